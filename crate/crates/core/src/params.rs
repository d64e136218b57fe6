//! Named parameter storage, initialization and the SGD update.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered collection of named tensors. Insertion order is the checkpoint order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.names.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Plain SGD: `p ← p − lr·g` for every parameter that received a gradient.
    pub fn sgd_step(&mut self, grads: &[Option<Tensor>], learning_rate: f64) {
        assert_eq!(grads.len(), self.tensors.len());
        for (p, g) in self.tensors.iter_mut().zip(grads) {
            if let Some(g) = g {
                for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                    *pv -= learning_rate * gv;
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Copies values from `other` for every name present in both stores.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<(), String> {
        for (i, name) in self.names.iter().enumerate() {
            let Some(j) = other.index.get(name) else {
                return Err(format!("missing parameter {name}"));
            };
            let src = &other.tensors[*j];
            if src.shape() != self.tensors[i].shape() {
                return Err(format!(
                    "shape mismatch for {name}: expected {:?}, found {:?}",
                    self.tensors[i].shape(),
                    src.shape()
                ));
            }
            self.tensors[i] = src.clone();
        }
        Ok(())
    }
}

/// He-normal initialization for a layer with `fan_in` inputs.
pub fn he_normal<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    let std = gain * (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect())
}
