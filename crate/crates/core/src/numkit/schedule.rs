use std::f64::consts::PI;

use super::NumError;

/// Distillation weight at epoch `e` of `total`: `(1 - cos(eπ/E)) / 2`.
pub fn cosine_alpha(e: usize, total: usize) -> Result<f64, NumError> {
    if total == 0 || e > total {
        return Err(NumError::InvalidArgument(format!("epoch {e} outside 0..={total}")));
    }
    if e == 0 {
        return Ok(0.0);
    }
    if e == total {
        return Ok(1.0);
    }
    if 2 * e == total {
        return Ok(0.5);
    }
    Ok(0.5 * (1.0 - (e as f64 * PI / total as f64).cos()))
}

/// Cosine-decayed learning rate, from `base` at epoch 0 towards zero at `total`.
pub fn cosine_lr(base: f64, e: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (e.min(total)) as f64 / total as f64;
    base * 0.5 * (1.0 + (frac * PI).cos())
}
