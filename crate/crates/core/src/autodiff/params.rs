use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::tensor::Mat;
use crate::error::{Error, Result};

/// One named parameter array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamEntry {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::contract(format!(
                "entry `{name}`: shape {shape:?} holds {expected} values, got {}",
                values.len()
            )));
        }
        Ok(ParamEntry { name, shape, values })
    }

    /// View as a matrix: `[n]` becomes `1 x n`, `[r, c]` stays `r x c`.
    pub fn to_mat(&self) -> Mat {
        let (rows, cols) = match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => (1, self.values.len()),
        };
        Mat::from_vec(rows, cols, self.values.clone())
    }
}

/// All learnable parameters of a velocity network, in declaration order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new(entries: Vec<ParamEntry>) -> Result<Self> {
        let set = ParamSet { entries };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_values() == 0 {
            return Err(Error::contract("parameter set is empty"));
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::contract(format!("duplicate parameter name `{}`", e.name)));
            }
            if let Some(bad) = e.values.iter().position(|v| !v.is_finite()) {
                return Err(Error::numeric(format!("parameter `{}` at index {bad}", e.name)));
            }
        }
        Ok(())
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|e| e.values.iter().copied()).collect()
    }

    /// Overwrite all values from a flat vector in declaration order.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_values() {
            return Err(Error::contract(format!(
                "flat length {} != parameter count {}",
                flat.len(),
                self.num_values()
            )));
        }
        let mut off = 0;
        for e in &mut self.entries {
            let n = e.values.len();
            e.values.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn same_layout(&self, other_shapes: impl Iterator<Item = (String, Vec<usize>)>) -> bool {
        let mine: Vec<_> = self.entries.iter().map(|e| (e.name.clone(), e.shape.clone())).collect();
        let theirs: Vec<_> = other_shapes.collect();
        mine == theirs
    }

    pub fn squared_norm(&self) -> f64 {
        self.entries.iter().flat_map(|e| e.values.iter()).map(|v| v * v).sum()
    }
}

/// Gradient of a scalar with respect to every entry of a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradSet {
    entries: Vec<ParamEntry>,
}

impl GradSet {
    pub fn zeros_like(params: &ParamSet) -> Self {
        GradSet {
            entries: params
                .entries()
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    values: vec![0.0; e.values.len()],
                })
                .collect(),
        }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub(crate) fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|e| e.values.iter().copied()).collect()
    }

    pub fn norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| e.values.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_congruent(&self, params: &ParamSet) -> bool {
        self.entries.len() == params.entries().len()
            && self
                .entries
                .iter()
                .zip(params.entries())
                .all(|(g, p)| g.shape == p.shape && g.values.len() == p.values.len())
    }

    pub fn add_assign(&mut self, other: &GradSet) {
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            for (x, y) in a.values.iter_mut().zip(&b.values) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for e in &mut self.entries {
            for v in &mut e.values {
                *v *= s;
            }
        }
    }
}
