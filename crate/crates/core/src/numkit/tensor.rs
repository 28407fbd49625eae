use super::NumError;

/// Dense row-major `f64` tensor.
///
/// All values are finite; constructors reject NaN and infinities.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumError> {
        check_shape(&shape, data.len())?;
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(NumError::NonFinite(format!("element {pos} of tensor {shape:?}")));
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; len], requires_grad: false, grad: None }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(value.is_finite());
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; len], requires_grad: false, grad: None }
    }

    pub fn scalar(value: f64) -> Result<Self, NumError> {
        Self::new(vec![1], vec![value])
    }

    /// Builds a `(rows, cols)` matrix from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumError> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(NumError::shape("from_rows", "ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the values. Callers must keep them finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<f64>>) -> Result<(), NumError> {
        if let Some(g) = &grad {
            if g.len() != self.data.len() {
                return Err(NumError::shape(
                    "set_grad",
                    format!("gradient length {} for tensor of {} elements", g.len(), self.data.len()),
                ));
            }
        }
        self.grad = grad;
        Ok(())
    }

    /// Adds `scale * g` into the gradient, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64], scale: f64) -> Result<(), NumError> {
        if g.len() != self.data.len() {
            return Err(NumError::shape(
                "accumulate_grad",
                format!("gradient length {} for tensor of {} elements", g.len(), self.data.len()),
            ));
        }
        let buf = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (b, v) in buf.iter_mut().zip(g) {
            *b += scale * v;
        }
        Ok(())
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<f64>) {
        (self.shape, self.data)
    }
}

pub(crate) fn check_shape(shape: &[usize], len: usize) -> Result<(), NumError> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(NumError::shape("tensor", format!("dimensions must be positive, got {shape:?}")));
    }
    let expected: usize = shape.iter().product();
    if expected != len {
        return Err(NumError::shape(
            "tensor",
            format!("shape {shape:?} holds {expected} elements but data has {len}"),
        ));
    }
    Ok(())
}
