use std::collections::HashMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::numerics::{Tape, Tensor, Var};

use super::ModelError;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// Ordered, named parameter set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param { name, tensor });
    }

    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization.
    pub fn push_uniform<R: Rng>(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut R) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.push(name, Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound)));
    }

    /// `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, variance-preserving ahead of a ReLU.
    pub fn push_he_uniform<R: Rng>(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut R) {
        let bound = (6.0 / fan_in as f64).sqrt();
        self.push(name, Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound)));
    }

    pub fn push_const(&mut self, name: &str, shape: &[usize], value: f64) {
        self.push(name, Tensor::full(shape, value));
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.tensor)
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.iter_mut().map(|p| &mut p.tensor).collect()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Records every parameter on `tape`; frozen parameters become constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let mut vars = Vec::with_capacity(self.params.len());
        let mut index = HashMap::with_capacity(self.params.len());
        for (i, p) in self.params.iter().enumerate() {
            let v = if trainable {
                let mut t = p.tensor.clone();
                t.requires_grad = true;
                t.grad = None;
                tape.leaf(&t)
            } else {
                tape.constant(&p.tensor)
            };
            vars.push(v);
            index.insert(p.name.clone(), i);
        }
        Bound { vars, index }
    }

    /// Copies leaf gradients from `tape` into each parameter's `grad`.
    pub fn absorb_grads(&mut self, tape: &Tape, bound: &Bound) {
        for (p, v) in self.params.iter_mut().zip(&bound.vars) {
            p.tensor.grad = tape.grad(*v).map(|g| g.to_vec());
        }
    }

    /// Overwrites values from `other`, which must hold the same names and shapes.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<(), ModelError> {
        if self.params.len() != other.params.len() {
            return Err(ModelError::Config(format!(
                "parameter count mismatch: {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            if a.name != b.name || a.tensor.shape() != b.tensor.shape() {
                return Err(ModelError::Config(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    a.name,
                    a.tensor.shape(),
                    b.name,
                    b.tensor.shape()
                )));
            }
            a.tensor.data_mut().copy_from_slice(b.tensor.data());
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for d in p.tensor.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// Tape handles for a [`ParamStore`], looked up by parameter name.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var, ModelError> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| ModelError::Config(format!("missing parameter {name}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
