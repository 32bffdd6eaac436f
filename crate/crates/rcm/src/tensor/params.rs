//! Named parameter collections with a deterministic flattening order.

use super::Tensor;
use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// A named map of tensor leaves. Iteration and flattening follow the
/// lexicographic order of the leaf names, which keeps every consumer
/// (optimiser, EMA, checkpoints, gradient accumulation) deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    leaves: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.leaves.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.leaves
            .get(name)
            .ok_or_else(|| Error::StructureMismatch(format!("missing leaf `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.leaves
            .get_mut(name)
            .ok_or_else(|| Error::StructureMismatch(format!("missing leaf `{name}`")))
    }

    /// Leaves in flattening (lexicographic) order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.leaves.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.leaves.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.leaves.keys()
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    /// Total number of scalar elements across all leaves.
    pub fn num_elements(&self) -> usize {
        self.leaves.values().map(Tensor::numel).sum()
    }

    /// Concatenate all leaves into one vector, in flattening order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_elements());
        for t in self.leaves.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Rebuild a set with this set's structure from a flat vector.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamSet> {
        if flat.len() != self.num_elements() {
            return Err(Error::StructureMismatch(format!(
                "flat vector has {} elements, structure needs {}",
                flat.len(),
                self.num_elements()
            )));
        }
        let mut out = ParamSet::new();
        let mut off = 0;
        for (name, t) in &self.leaves {
            let next = off + t.numel();
            out.insert(
                name.clone(),
                Tensor::from_vec(t.shape().to_vec(), flat[off..next].to_vec())?,
            );
            off = next;
        }
        Ok(out)
    }

    pub fn same_structure(&self, other: &ParamSet) -> bool {
        self.leaves.len() == other.leaves.len()
            && self
                .leaves
                .iter()
                .zip(other.leaves.iter())
                .all(|((an, at), (bn, bt))| an == bn && at.shape() == bt.shape())
    }

    fn check_structure(&self, other: &ParamSet, op: &'static str) -> Result<()> {
        if !self.same_structure(other) {
            return Err(Error::StructureMismatch(format!(
                "{op}: leaf structures differ ({} vs {} leaves)",
                self.leaves.len(),
                other.leaves.len()
            )));
        }
        Ok(())
    }

    /// Leafwise `self + c * other`.
    pub fn axpy(&self, c: f64, other: &ParamSet) -> Result<ParamSet> {
        self.check_structure(other, "axpy")?;
        let mut out = ParamSet::new();
        for ((name, a), (_, b)) in self.leaves.iter().zip(other.leaves.iter()) {
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| super::quantize(x + c * y))
                .collect();
            out.insert(name.clone(), Tensor::from_vec(a.shape().to_vec(), data)?);
        }
        Ok(out)
    }

    /// Leafwise `a * self + b * other`.
    pub fn lerp(&self, a: f64, b: f64, other: &ParamSet) -> Result<ParamSet> {
        self.check_structure(other, "lerp")?;
        let mut out = ParamSet::new();
        for ((name, x), (_, y)) in self.leaves.iter().zip(other.leaves.iter()) {
            let data = x
                .data()
                .iter()
                .zip(y.data())
                .map(|(&p, &q)| super::quantize(a * p + b * q))
                .collect();
            out.insert(name.clone(), Tensor::from_vec(x.shape().to_vec(), data)?);
        }
        Ok(out)
    }

    pub fn scale(&self, c: f64) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, t) in &self.leaves {
            out.insert(name.clone(), super::ops::scale(t, c));
        }
        out
    }

    /// Global L2 norm over every element of every leaf.
    pub fn global_norm(&self) -> f64 {
        self.leaves
            .values()
            .map(Tensor::sq_norm)
            .sum::<f64>()
            .sqrt()
    }

    /// Inner product with another set of identical structure.
    pub fn dot(&self, other: &ParamSet) -> Result<f64> {
        self.check_structure(other, "dot")?;
        Ok(self
            .leaves
            .values()
            .zip(other.leaves.values())
            .map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>())
            .sum())
    }

    pub fn all_finite(&self) -> bool {
        self.leaves.values().all(Tensor::is_finite)
    }

    /// A set with the same structure and every element zero.
    pub fn zeros_like(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, t) in &self.leaves {
            out.insert(name.clone(), Tensor::zeros(t.shape()));
        }
        out
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self { leaves: iter.into_iter().collect() }
    }
}
