use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    /// Running statistics are state, not optimized.
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub path: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub data: Vec<T>,
}

/// Named parameter arrays in construction order, keyed by layer path.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T> Default for Parameters<T> {
    fn default() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Real> Parameters<T> {
    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: usize) -> &[T] {
        &self.entries[id].data
    }

    pub fn get_mut(&mut self, id: usize) -> &mut [T] {
        &mut self.entries[id].data
    }

    pub fn id(&self, path: &str) -> Option<usize> {
        self.index.get(path).copied()
    }

    pub fn by_path(&self, path: &str) -> Option<&ParamEntry<T>> {
        self.id(path).map(|i| &self.entries[i])
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.kind.trainable()).map(|e| e.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Gradients<T> {
        Gradients(self.entries.iter().map(|e| vec![T::zero(); e.data.len()]).collect())
    }

    pub fn cast<U: Real>(&self) -> Parameters<U> {
        Parameters {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    path: e.path.clone(),
                    shape: e.shape.clone(),
                    kind: e.kind,
                    data: e.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    pub(crate) fn push(&mut self, path: String, shape: Vec<usize>, kind: ParamKind, data: Vec<T>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        assert!(!self.index.contains_key(&path), "duplicate parameter path {path}");
        let id = self.entries.len();
        self.index.insert(path.clone(), id);
        self.entries.push(ParamEntry { path, shape, kind, data });
        id
    }

    pub fn from_entries(entries: Vec<ParamEntry<T>>) -> Self {
        let mut p = Self::default();
        for e in entries {
            p.push(e.path, e.shape, e.kind, e.data);
        }
        p
    }
}

/// Gradient buffers aligned with [`Parameters`] entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T>(pub Vec<Vec<T>>);

impl<T: Real> Gradients<T> {
    pub fn get_mut(&mut self, id: usize) -> &mut [T] {
        &mut self.0[id]
    }

    pub fn get(&self, id: usize) -> &[T] {
        &self.0[id]
    }

    /// Mutable access to two distinct entries.
    pub fn pair_mut(&mut self, a: usize, b: usize) -> (&mut [T], &mut [T]) {
        assert_ne!(a, b);
        if a < b {
            let (lo, hi) = self.0.split_at_mut(b);
            (&mut lo[a], &mut hi[0])
        } else {
            let (lo, hi) = self.0.split_at_mut(a);
            (&mut hi[0], &mut lo[b])
        }
    }
}

/// Allocates parameters in a fixed order from one seeded stream.
pub(crate) struct ParamBuilder<'a, T> {
    pub params: Parameters<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<'a, T: Real> ParamBuilder<'a, T> {
    pub fn new(rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            params: Parameters::default(),
            rng,
        }
    }

    /// He-uniform: U(−√(6/fan_in), +√(6/fan_in)).
    pub fn weight(&mut self, path: String, shape: Vec<usize>, fan_in: usize) -> usize {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64_lossy(self.rng.random_range(-bound..bound)))
            .collect();
        self.params.push(path, shape, ParamKind::Weight, data)
    }

    pub fn constant(&mut self, path: String, len: usize, kind: ParamKind, value: f64) -> usize {
        self.params.push(path, vec![len], kind, vec![T::from_f64_lossy(value); len])
    }
}
