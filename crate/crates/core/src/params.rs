//! Named parameter storage and its binding into a computation graph.
//!
//! Network code asks a [`Binder`] for parameters by name and shape. When the
//! binder is in creation mode, missing parameters are initialized on the spot
//! from a per-name seed, so the forward pass is the single source of truth for
//! the architecture.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sucode_tensor::{Graph, Grads, Tensor, Var};

use crate::error::{Error, Result};

/// One stored array with its freeze flag and the stage that created it.
#[derive(Clone, Debug, PartialEq)]
pub struct ArrayEntry {
    pub tensor: Tensor,
    pub frozen: bool,
    pub stage_of_origin: u8,
}

pub type ParamMap = BTreeMap<String, ArrayEntry>;

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Uniform(f64),
    Normal(f64),
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
}

impl Init {
    fn sample(self, shape: &[usize], seed: u64) -> Tensor {
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = match self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(a) => {
                let d = Uniform::new_inclusive(-a, a);
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
            Init::Normal(s) => {
                let d = Normal::new(0.0, s).expect("finite std");
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
            Init::FanIn(fan_in) => {
                let a = 1.0 / (fan_in.max(1) as f64).sqrt();
                let d = Uniform::new_inclusive(-a, a);
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
        };
        Tensor::new(shape, data)
    }
}

/// FNV-1a hash of a parameter name mixed with a run seed.
pub fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325 ^ seed.wrapping_mul(0x9e3779b97f4a7c15);
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

struct Creation {
    seed: u64,
    stage: u8,
}

pub struct Binder<'g, 's> {
    graph: &'g Graph,
    store: RefCell<&'s mut ParamMap>,
    bound: RefCell<BTreeMap<String, Var<'g>>>,
    trainable: Box<dyn Fn(&str) -> bool + 's>,
    create: Option<Creation>,
}

impl<'g, 's> Binder<'g, 's> {
    /// Binds stored parameters as graph constants; nothing is trainable and
    /// missing parameters are an error.
    pub fn frozen(graph: &'g Graph, store: &'s mut ParamMap) -> Self {
        Self {
            graph,
            store: RefCell::new(store),
            bound: RefCell::new(BTreeMap::new()),
            trainable: Box::new(|_| false),
            create: None,
        }
    }

    /// Binds parameters for which `trainable(name)` holds (and whose entry is
    /// not frozen) as differentiable graph leaves.
    pub fn training(graph: &'g Graph, store: &'s mut ParamMap, trainable: impl Fn(&str) -> bool + 's) -> Self {
        Self {
            graph,
            store: RefCell::new(store),
            bound: RefCell::new(BTreeMap::new()),
            trainable: Box::new(trainable),
            create: None,
        }
    }

    /// Enables on-demand creation of missing parameters.
    pub fn creating(mut self, seed: u64, stage: u8) -> Self {
        self.create = Some(Creation { seed, stage });
        self
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Var<'g>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let mut store = self.store.borrow_mut();
        if !store.contains_key(name) {
            let Some(c) = &self.create else {
                return Err(Error::CheckpointIncomplete(name.to_string()));
            };
            let tensor = init.sample(shape, name_seed(c.seed, name));
            store.insert(name.to_string(), ArrayEntry { tensor, frozen: false, stage_of_origin: c.stage });
        }
        let entry = &store[name];
        if entry.tensor.shape() != shape {
            return Err(Error::Shape(format!(
                "parameter `{name}` has shape {:?}, expected {shape:?}",
                entry.tensor.shape()
            )));
        }
        let var = if !entry.frozen && (self.trainable)(name) {
            self.graph.param(entry.tensor.clone())
        } else {
            self.graph.constant(entry.tensor.clone())
        };
        self.bound.borrow_mut().insert(name.to_string(), var);
        Ok(var)
    }

    /// Gradients of every differentiable parameter touched by the forward pass.
    pub fn gradients(&self, grads: &Grads) -> BTreeMap<String, Tensor> {
        self.bound
            .borrow()
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|(n, v)| (n.clone(), grads.get_or_zeros(*v)))
            .collect()
    }

    pub fn bound_names(&self) -> Vec<String> {
        self.bound.borrow().keys().cloned().collect()
    }
}

/// Component a parameter name belongs to (the text before the first `/`).
pub fn component(name: &str) -> &str {
    name.split('/').next().unwrap_or(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn creation_is_order_independent() {
        let mut a = ParamMap::new();
        let mut b = ParamMap::new();
        {
            let g = Graph::new();
            let bind = Binder::frozen(&g, &mut a).creating(3, 1);
            bind.param("x/w", &[2, 2], Init::FanIn(2)).unwrap();
            bind.param("y/w", &[3], Init::Normal(1.0)).unwrap();
        }
        {
            let g = Graph::new();
            let bind = Binder::frozen(&g, &mut b).creating(3, 1);
            bind.param("y/w", &[3], Init::Normal(1.0)).unwrap();
            bind.param("x/w", &[2, 2], Init::FanIn(2)).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn missing_and_misshaped_parameters() {
        let mut store = ParamMap::new();
        let g = Graph::new();
        let bind = Binder::frozen(&g, &mut store);
        assert_eq!(bind.param("x", &[1], Init::Zeros).unwrap_err().name(), "CheckpointIncomplete");
        drop(bind);
        store.insert("x".into(), ArrayEntry { tensor: Tensor::zeros(&[2]), frozen: false, stage_of_origin: 1 });
        let bind = Binder::frozen(&g, &mut store);
        assert_eq!(bind.param("x", &[3], Init::Zeros).unwrap_err().name(), "ShapeError");
    }

    #[test]
    fn frozen_entries_never_trainable() {
        let mut store = ParamMap::new();
        store.insert("a".into(), ArrayEntry { tensor: Tensor::ones(&[2]), frozen: true, stage_of_origin: 1 });
        store.insert("b".into(), ArrayEntry { tensor: Tensor::ones(&[2]), frozen: false, stage_of_origin: 1 });
        let g = Graph::new();
        let bind = Binder::training(&g, &mut store, |_| true);
        let a = bind.param("a", &[2], Init::Zeros).unwrap();
        let b = bind.param("b", &[2], Init::Zeros).unwrap();
        let loss = a.mul(&b).sum_all();
        let grads = bind.gradients(&g.backward(loss));
        assert_eq!(grads.keys().collect::<Vec<_>>(), vec!["b"]);
    }
}
