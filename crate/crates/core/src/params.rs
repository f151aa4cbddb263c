//! Named learnable tensors and their per-forward tape bindings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, uniquely named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::invalid("param", format!("duplicate parameter name {name}")));
        }
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        Ok(ParamId(self.tensors.len() - 1))
    }

    /// Adds an `N(0, std)` tensor drawn from a stream keyed by `(seed, name)`,
    /// so the draw does not depend on which other parameters exist.
    pub fn add_normal(&mut self, name: &str, shape: &[usize], std: f64, seed: u64) -> Result<ParamId> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(name));
        let normal = Normal::new(0.0, std).map_err(|e| Error::invalid("param", e.to_string()))?;
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
        self.add(name, Tensor::new(shape, data)?)
    }

    pub fn add_full(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.add(name, Tensor::full(shape, value))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Records every parameter on `tape`. With `trainable == false` they go in
    /// as constants (inference).
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bindings {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        Bindings { vars }
    }

    /// Copies tape gradients into each tensor's `grad` (zeros when a
    /// parameter was not reached).
    pub fn load_grads(&mut self, bindings: &Bindings, grads: &mut Gradients) {
        for (t, &v) in self.tensors.iter_mut().zip(&bindings.vars) {
            let g = grads.take(v).unwrap_or_else(|| vec![0.0; t.numel()]);
            t.set_grad(g).expect("gradient length matches parameter");
        }
    }

    /// Replaces a tensor's values; shape must match.
    pub fn assign(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self.find(name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let current = &self.tensors[id.0];
        if current.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: model expects shape {:?}, checkpoint has {:?}",
                current.shape(),
                value.shape()
            )));
        }
        self.tensors[id.0] = value.with_requires_grad(true);
        Ok(())
    }
}

/// Tape handles for one forward pass, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bindings {
    vars: Vec<Var>,
}

impl Bindings {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Routes `id` to another tape node, e.g. a probe leaf in a gradient check.
    pub fn with_var(mut self, id: ParamId, var: Var) -> Self {
        self.vars[id.0] = var;
        self
    }
}

// FNV-1a
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}
