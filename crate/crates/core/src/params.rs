//! Named, layer-grouped parameter tensors.

use serde::{Deserialize, Serialize};
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::tensor::{Dual, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub group: String,
    pub tensor: Tensor<f64>,
}

/// Ordered collection of parameter tensors. Order is part of the identity:
/// models address tensors by index, and gradient sets share the layout of the
/// parameters they were computed for.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    entries: Vec<ParamEntry>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, group: impl Into<String>, tensor: Tensor<f64>) -> usize {
        let name = name.into();
        assert!(self.index_of(&name).is_none(), "duplicate parameter name {name}");
        self.entries.push(ParamEntry {
            name,
            group: group.into(),
            tensor,
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f64>> {
        self.index_of(name).map(|i| &self.entries[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f64>> {
        self.index_of(name).map(move |i| &mut self.entries[i].tensor)
    }

    pub fn tensor(&self, index: usize) -> &Tensor<f64> {
        &self.entries[index].tensor
    }

    /// Distinct group names in first-appearance order.
    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.group) {
                out.push(e.group.clone());
            }
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn tensors(&self) -> Vec<Tensor<f64>> {
        self.entries.iter().map(|e| e.tensor.clone()).collect()
    }

    pub fn lift<S: Scalar>(&self) -> Vec<Tensor<S>> {
        self.entries.iter().map(|e| e.tensor.lift()).collect()
    }

    /// Dual-valued copy whose tangent is `direction` (for Hessian-vector products).
    pub fn lift_dual(&self, direction: &ParameterSet) -> Vec<Tensor<Dual>> {
        self.assert_same_layout(direction);
        self.entries
            .iter()
            .zip(&direction.entries)
            .map(|(e, d)| {
                let data = e
                    .tensor
                    .data
                    .iter()
                    .zip(&d.tensor.data)
                    .map(|(&x, &t)| Dual::new(x, t))
                    .collect();
                Tensor::from_vec(e.tensor.rows, e.tensor.cols, data)
            })
            .collect()
    }

    /// Same names and groups, new values.
    pub fn with_tensors(&self, tensors: Vec<Tensor<f64>>) -> Self {
        assert_eq!(tensors.len(), self.entries.len(), "tensor count mismatch");
        let entries = self
            .entries
            .iter()
            .zip(tensors)
            .map(|(e, t)| {
                assert_eq!(e.tensor.shape(), t.shape(), "shape mismatch for {}", e.name);
                ParamEntry {
                    name: e.name.clone(),
                    group: e.group.clone(),
                    tensor: t,
                }
            })
            .collect();
        Self { entries }
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_| 0.0)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    group: e.group.clone(),
                    tensor: e.tensor.map(&f),
                })
                .collect(),
        }
    }

    fn assert_same_layout(&self, other: &ParameterSet) {
        assert_eq!(self.entries.len(), other.entries.len(), "parameter layout mismatch");
        for (a, b) in self.entries.iter().zip(&other.entries) {
            assert!(
                a.name == b.name && a.tensor.shape() == b.tensor.shape(),
                "parameter layout mismatch at {}",
                a.name
            );
        }
    }

    pub fn same_layout(&self, other: &ParameterSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.group == b.group && a.tensor.shape() == b.tensor.shape())
    }

    /// `self += scale · other`
    pub fn axpy(&mut self, scale: f64, other: &ParameterSet) {
        self.assert_same_layout(other);
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            for (x, &y) in a.tensor.data.iter_mut().zip(&b.tensor.data) {
                *x += scale * y;
            }
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        self.map(|x| x * c)
    }

    pub fn dot(&self, other: &ParameterSet) -> f64 {
        self.assert_same_layout(other);
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| a.tensor.data.iter().zip(&b.tensor.data).map(|(x, y)| x * y).sum::<f64>())
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.data.iter().all(|x| x.is_finite()))
    }

    /// Dot product restricted to one group.
    pub fn group_dot(&self, other: &ParameterSet, group: &str) -> f64 {
        self.assert_same_layout(other);
        self.entries
            .iter()
            .zip(&other.entries)
            .filter(|(a, _)| a.group == group)
            .map(|(a, b)| a.tensor.data.iter().zip(&b.tensor.data).map(|(x, y)| x * y).sum::<f64>())
            .sum()
    }

    /// Multiplies each group by its own factor.
    pub fn scale_groups(&self, factor: impl Fn(&str) -> f64) -> Self {
        let mut out = self.clone();
        for e in &mut out.entries {
            let f = factor(&e.group);
            for x in &mut e.tensor.data {
                *x *= f;
            }
        }
        out
    }

    /// Keeps only the entries whose names appear in `layout`, in `layout`'s order.
    pub fn restrict_to(&self, layout: &ParameterSet) -> Result<Self> {
        let mut out = ParameterSet::new();
        for e in &layout.entries {
            let t = self
                .get(&e.name)
                .ok_or_else(|| Error::Contract(format!("missing parameter {}", e.name)))?;
            out.push(e.name.clone(), e.group.clone(), t.clone());
        }
        Ok(out)
    }

    /// Appends (or replaces) every entry of `other`.
    pub fn merged(&self, other: &ParameterSet) -> Self {
        let mut out = self.clone();
        for e in &other.entries {
            match out.index_of(&e.name) {
                Some(i) => out.entries[i] = e.clone(),
                None => out.entries.push(e.clone()),
            }
        }
        out
    }

    pub fn without_group(&self, group: &str) -> Self {
        Self {
            entries: self.entries.iter().filter(|e| e.group != group).cloned().collect(),
        }
    }

    /// Hash of names, shapes and exact bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for e in &self.entries {
            e.name.hash(&mut h);
            e.group.hash(&mut h);
            e.tensor.rows.hash(&mut h);
            e.tensor.cols.hash(&mut h);
            for x in &e.tensor.data {
                x.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}
