//! Named parameter storage and gradient accumulation.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat, insertion-ordered store of every trainable matrix in a model.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    #[serde(skip)]
    lookup: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(
            !self.lookup.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        if self.lookup.len() != self.names.len() {
            return self.names.iter().position(|n| n == name).map(ParamId);
        }
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Rebuilds the name index after deserialization.
    pub fn reindex(&mut self) {
        self.lookup = self
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
    }

    /// Copies every parameter of `other` whose name exists here with the same
    /// shape. Returns the number of parameters copied.
    pub fn load_matching(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for (_, name, value) in other.iter() {
            if let Some(id) = self.id(name) {
                if self.values[id.0].dim() == value.dim() {
                    self.values[id.0].assign(value);
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Overwrites every parameter from `other`, which must carry the same names
    /// and shapes.
    pub fn load_exact(&mut self, other: &ParamStore) -> Result<()> {
        for i in 0..self.values.len() {
            let name = &self.names[i];
            let src = other
                .id(name)
                .map(|id| other.get(id))
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if src.dim() != self.values[i].dim() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name}: expected {:?}, found {:?}",
                    self.values[i].dim(),
                    src.dim()
                )));
            }
            self.values[i].assign(src);
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Gradients keyed by [`ParamId`]; parameters that did not take part in a
/// computation hold `None`.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamStore) -> Self {
        Gradients {
            grads: vec![None; params.len()],
        }
    }

    pub(crate) fn from_vec(grads: Vec<Option<Mat>>) -> Self {
        Gradients { grads }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(src) = src {
                match dst {
                    Some(d) => *d += src,
                    None => *dst = Some(src.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global norm does not exceed `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.iter().all(|x| x.is_finite()))
    }
}

/// Glorot/Xavier uniform initialisation.
pub fn xavier_uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Mat {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

pub fn uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn lookup_and_load_matching() {
        let mut a = ParamStore::new();
        let x = a.add("x", array![[1.0, 2.0]]);
        a.add("y", array![[3.0]]);
        let mut b = ParamStore::new();
        b.add("x", array![[5.0, 6.0]]);
        b.add("y", array![[1.0, 1.0]]);
        assert_eq!(a.load_matching(&b), 1);
        assert_eq!(a.get(x), &array![[5.0, 6.0]]);
        assert!(a.load_exact(&b).is_err());
    }

    #[test]
    fn reindex_after_serde() {
        let mut a = ParamStore::new();
        a.add("w", array![[1.0]]);
        let json = serde_json::to_string(&a).unwrap();
        let mut back: ParamStore = serde_json::from_str(&json).unwrap();
        back.reindex();
        assert_eq!(back.id("w"), Some(ParamId(0)));
    }

    #[test]
    fn clip_global_norm() {
        let mut g = Gradients::from_vec(vec![Some(array![[3.0, 4.0]]), None]);
        assert_eq!(g.global_norm(), 5.0);
        g.clip_global_norm(1.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
    }
}
