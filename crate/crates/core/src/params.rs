//! Named, hierarchical storage for trainable arrays.
//!
//! Names are dotted paths (`ivm.block0.temporal.qkv.weight`). The first path
//! segment identifies the owning component: `ivm` (video encoder), `iqm` (text
//! encoder), `cfor` (fusor), `agor` (answer generator), `mcl` (contrastive
//! heads, memory maps and temperatures), `vtm` and `cls_head`.

use std::sync::Arc;

use indexmap::IndexMap;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterTree {
    entries: IndexMap<String, Arc<Mat>>,
}

impl ParameterTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) -> Result<usize> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name {name}")));
        }
        let (index, _) = self.entries.insert_full(name, Arc::new(value));
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.entries.get(name).map(|m| m.as_ref())
    }

    pub fn require(&self, name: &str) -> Result<&Mat> {
        self.get(name)
            .ok_or_else(|| Error::Invalid(format!("missing parameter {name}")))
    }

    pub fn shared(&self, index: usize) -> &Arc<Mat> {
        &self.entries[index]
    }

    pub fn name(&self, index: usize) -> &str {
        self.entries
            .get_index(index)
            .map(|(k, _)| k.as_str())
            .unwrap()
    }

    pub fn by_index(&self, index: usize) -> &Mat {
        &self.entries[index]
    }

    pub fn by_index_mut(&mut self, index: usize) -> &mut Mat {
        Arc::make_mut(&mut self.entries[index])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.entries.get_mut(name).map(Arc::make_mut)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn num_elements(&self) -> usize {
        self.entries.values().map(|m| m.len()).sum()
    }

    /// Indices of every array whose name starts with `prefix.`.
    pub fn group(&self, prefix: &str) -> Vec<usize> {
        let dotted = format!("{prefix}.");
        self.entries
            .keys()
            .enumerate()
            .filter(|(_, k)| k.starts_with(&dotted))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn first_non_finite(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|(_, v)| v.iter().any(|x| !x.is_finite()))
            .map(|(k, _)| k.as_str())
    }
}

/// Seeded initializer for parameter arrays.
pub struct Initializer {
    rng: ChaCha8Rng,
    std: f64,
}

impl Initializer {
    pub fn new(seed: u64, std: f64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            std,
        }
    }

    pub fn normal(&mut self, rows: usize, cols: usize) -> Mat {
        let dist = Normal::new(0.0, self.std).unwrap();
        Array2::from_shape_simple_fn((rows, cols), || dist.sample(&mut self.rng))
    }

    pub fn zeros(&self, rows: usize, cols: usize) -> Mat {
        Array2::zeros((rows, cols))
    }

    pub fn ones(&self, rows: usize, cols: usize) -> Mat {
        Array2::ones((rows, cols))
    }
}
