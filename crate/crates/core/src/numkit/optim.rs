use serde::{Deserialize, Serialize};

use super::{NumError, Tensor};

/// AdamW moments and hyper-parameters. Moments are positional: the same
/// parameter list must be passed on every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }
}

/// One decoupled-weight-decay Adam update with bias correction. Gradients
/// are cleared afterwards.
pub fn adamw_step(params: &mut [&mut Tensor], state: &mut OptimState) -> Result<(), NumError> {
    if state.first_moment.is_empty() && state.step == 0 {
        state.first_moment = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.second_moment = params.iter().map(|p| vec![0.0; p.len()]).collect();
    }
    if state.first_moment.len() != params.len() {
        return Err(NumError::shape(
            "adamw_step",
            format!("state tracks {} parameters, got {}", state.first_moment.len(), params.len()),
        ));
    }
    for (i, p) in params.iter().enumerate() {
        if p.grad().is_none() {
            return Err(NumError::MissingGradient(format!("#{i} {:?}", p.shape())));
        }
        if state.first_moment[i].len() != p.len() {
            return Err(NumError::shape("adamw_step", format!("moment length mismatch for parameter #{i}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, wd, eps) = (state.beta1, state.beta2, state.lr, state.weight_decay, state.eps);
    for (i, p) in params.iter_mut().enumerate() {
        let g = p.grad().expect("checked above").to_vec();
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        let data = p.data_mut();
        for j in 0..data.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            data[j] -= lr * (mhat / (vhat.sqrt() + eps) + wd * data[j]);
        }
        p.set_grad(None)?;
    }
    Ok(())
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(params: &mut [&mut Tensor], max_norm: f64) -> f64 {
    let sq: f64 = params
        .iter()
        .filter_map(|p| p.grad())
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let c = max_norm / norm;
        for p in params.iter_mut() {
            if let Some(g) = p.grad() {
                let scaled = g.iter().map(|v| v * c).collect();
                p.set_grad(Some(scaled)).expect("same length");
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let mut w = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = w.data().to_vec();
        w.set_grad(Some(vec![0.0; 3])).unwrap();
        let mut st = OptimState::new(0.1, 0.0);
        adamw_step(&mut [&mut w], &mut st).unwrap();
        assert_eq!(w.data(), before.as_slice());
        assert!(w.grad().is_none());
        assert_eq!(st.step, 1);
    }

    #[test]
    fn one_step_descends_on_square() {
        let mut w = Tensor::new(vec![1], vec![1.0]).unwrap();
        w.set_grad(Some(vec![2.0])).unwrap();
        let mut st = OptimState::new(0.1, 0.0);
        adamw_step(&mut [&mut w], &mut st).unwrap();
        assert!(w.data()[0] < 1.0 && w.data()[0] > 0.0);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut w = Tensor::zeros(&[2]);
        let mut st = OptimState::new(0.1, 0.0);
        assert!(matches!(adamw_step(&mut [&mut w], &mut st), Err(NumError::MissingGradient(_))));
    }

    #[test]
    fn converges_on_quadratic() {
        // f(x, y) = (x - 3)^2 + 10 (y + 1)^2, minimum 0 at (3, -1).
        let mut w = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let mut st = OptimState::new(0.1, 0.0);
        let f = |x: &[f64]| (x[0] - 3.0).powi(2) + 10.0 * (x[1] + 1.0).powi(2);
        for _ in 0..200 {
            let x = w.data().to_vec();
            w.set_grad(Some(vec![2.0 * (x[0] - 3.0), 20.0 * (x[1] + 1.0)])).unwrap();
            adamw_step(&mut [&mut w], &mut st).unwrap();
        }
        assert!(f(w.data()) < 1e-4, "loss {}", f(w.data()));
    }

    #[test]
    fn clipping_caps_norm() {
        let mut w = Tensor::zeros(&[2]);
        w.set_grad(Some(vec![3.0, 4.0])).unwrap();
        let n = clip_global_norm(&mut [&mut w], 1.0);
        assert_eq!(n, 5.0);
        let g = w.grad().unwrap();
        assert!(((g[0] * g[0] + g[1] * g[1]).sqrt() - 1.0).abs() < 1e-12);
    }
}
