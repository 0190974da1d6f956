use std::rc::Rc;

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;

/// Named parameter tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Rc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces `name`.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), Rc::new(value));
    }

    /// Inserts `name` with entries drawn from `N(0, std^2)`.
    pub fn insert_normal<R: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: Vec<usize>, std: f64, rng: &mut R) {
        let n = shape.iter().product();
        let normal = Normal::new(0.0, std).expect("standard deviation must be finite and non-negative");
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        self.insert(name, Tensor::new(shape, data));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|t| t.as_ref())
    }

    pub(crate) fn get_full(&self, name: &str) -> Option<(usize, Rc<Tensor>)> {
        self.entries.get_full(name).map(|(i, _, v)| (i, Rc::clone(v)))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(Rc::make_mut)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn values(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.values().map(|t| t.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    /// Mutable access by position, matching the order of [`Gradients::for_params`](super::Gradients::for_params).
    pub fn value_at_mut(&mut self, index: usize) -> &mut Tensor {
        let (_, v) = self.entries.get_index_mut(index).expect("parameter index out of range");
        Rc::make_mut(v)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }
}
