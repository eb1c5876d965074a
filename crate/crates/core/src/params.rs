//! Named parameter collections and their per-graph bindings.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use refnet_tensor::{Scalar, Tensor, Var};

/// Ordered list of named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// FNV-1a over names, shapes and value bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::default();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            h.bytes(name.as_bytes());
            for &d in t.shape() {
                h.bytes(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.bytes(&v.as_f64().to_bits().to_le_bytes());
            }
        }
        h.0
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    /// Wraps every tensor in a graph leaf.
    pub fn bind(&self, trainable: bool) -> Bound<T> {
        let index = self.names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Bound {
            vars: self.tensors.iter().map(|t| Var::leaf(t.clone(), trainable)).collect(),
            index: Rc::new(index),
        }
    }
}

/// Graph leaves for one forward pass, in the order of the owning `ParamSet`.
#[derive(Debug, Clone)]
pub struct Bound<T: Scalar> {
    vars: Vec<Var<T>>,
    index: Rc<HashMap<String, usize>>,
}

impl<T: Scalar> Bound<T> {
    pub fn get(&self, name: &str) -> &Var<T> {
        let i = self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.vars[*i]
    }

    pub fn vars(&self) -> &[Var<T>] {
        &self.vars
    }

    pub fn refs(&self) -> Vec<&Var<T>> {
        self.vars.iter().collect()
    }
}

#[derive(Clone, Copy)]
pub(crate) struct Fnv(pub(crate) u64);

impl Default for Fnv {
    fn default() -> Self {
        Self(0xcbf29ce484222325)
    }
}

impl Fnv {
    pub(crate) fn bytes(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x100000001b3);
        }
    }
}

/// Normal init with `std = gain / sqrt(fan_in)`.
pub(crate) fn he_normal<T: Scalar>(rng: &mut impl Rng, shape: Vec<usize>, fan_in: usize, gain: f64) -> Tensor<T> {
    let std = gain / (fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
}

/// He gain for a leaky ReLU with the given negative slope.
pub(crate) fn leaky_gain(slope: f64) -> f64 {
    (2.0 / (1.0 + slope * slope)).sqrt()
}
