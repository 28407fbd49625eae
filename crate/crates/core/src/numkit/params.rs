use rand::Rng;

use super::{NumError, Tape, Tensor, Var};

/// Index of a parameter inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter storage. Order is registration order and defines
/// the checkpoint layout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        tensor.set_requires_grad(true);
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Glorot-uniform `(fan_in, fan_out)` matrix scaled by `gain`.
    pub fn add_matrix(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        let t = Tensor::new(vec![fan_in, fan_out], data).expect("finite init");
        self.add(name, t)
    }

    pub fn add_filled(&mut self, name: impl Into<String>, len: usize, value: f64) -> ParamId {
        self.add(name, Tensor::filled(&[len], value))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count over all parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Mutable references to the listed parameters, in list order.
    pub fn select_mut(&mut self, ids: &[ParamId]) -> Vec<&mut Tensor> {
        let mut wanted = vec![usize::MAX; self.tensors.len()];
        for (pos, id) in ids.iter().enumerate() {
            assert!(wanted[id.0] == usize::MAX, "parameter listed twice");
            wanted[id.0] = pos;
        }
        let mut slots: Vec<Option<&mut Tensor>> = ids.iter().map(|_| None).collect();
        for (i, t) in self.tensors.iter_mut().enumerate() {
            if wanted[i] != usize::MAX {
                slots[wanted[i]] = Some(t);
            }
        }
        slots.into_iter().map(|s| s.expect("every id resolved")).collect()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.set_grad(None).expect("clearing never fails");
        }
    }

    /// Replaces every value from a flat buffer laid out in registration order.
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<(), NumError> {
        if flat.len() != self.numel() {
            return Err(NumError::shape("load_flat", format!("{} values for {} parameters", flat.len(), self.numel())));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(NumError::NonFinite("parameter payload".into()));
        }
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn flat_values(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }
}

/// Lazily records parameters as tape leaves, at most once per tape.
///
/// A parameter used by several branches (e.g. one shared weight at every
/// observation length) maps to a single leaf, so its gradient sums over all
/// uses.
pub struct Binder {
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl Binder {
    pub fn new(params: &ParamSet, trainable: bool) -> Self {
        Self { vars: vec![None; params.len()], trainable }
    }

    pub fn bind(&mut self, tape: &mut Tape, params: &ParamSet, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let t = params.get(id);
        let v = tape
            .leaf_from(t.shape().to_vec(), t.data().to_vec(), self.trainable)
            .expect("parameters are valid tensors");
        self.vars[id.0] = Some(v);
        v
    }

    pub fn is_bound(&self, id: ParamId) -> bool {
        self.vars[id.0].is_some()
    }

    /// Parameters touched so far, in id order.
    pub fn bound_ids(&self) -> Vec<ParamId> {
        self.vars.iter().enumerate().filter(|(_, v)| v.is_some()).map(|(i, _)| ParamId(i)).collect()
    }

    pub fn var(&self, id: ParamId) -> Option<Var> {
        self.vars[id.0]
    }

    /// Adds `scale * ∂loss/∂param` into each bound parameter's gradient.
    pub fn accumulate_into(&self, tape: &Tape, params: &mut ParamSet, scale: f64) -> Result<(), NumError> {
        for (i, v) in self.vars.iter().enumerate() {
            let Some(v) = v else { continue };
            if let Some(g) = tape.grad(*v) {
                params.get_mut(ParamId(i)).accumulate_grad(g, scale)?;
            }
        }
        Ok(())
    }
}
