//! Empirical-quantile binning of numeric variables.
//!
//! Edges sit at the `i/B` quantiles (i = 1..B-1) with linear interpolation
//! between order statistics: for sorted `x[0..n]` the position is
//! `(n-1)·i/B`. A value falls in bin `k` = number of edges `<= value`, so bins
//! are right-open `[e_k, e_{k+1})`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::VocabError;

pub const DEFAULT_BINS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum VariableBins {
    /// Strictly increasing edges.
    Edges(Vec<f64>),
    /// Too few distinct values; every value maps to `Q0`.
    Degenerate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizerSpec {
    pub bins: usize,
    pub variables: BTreeMap<String, VariableBins>,
}

impl QuantizerSpec {
    pub fn new(bins: usize) -> Result<Self, VocabError> {
        if bins < 2 {
            return Err(VocabError::InvalidBinCount(bins));
        }
        Ok(Self { bins, variables: BTreeMap::new() })
    }

    /// Fits `variable`, recording degenerate variables instead of failing.
    pub fn fit(&mut self, variable: &str, values: &[f64]) -> Result<(), VocabError> {
        let bins = match fit_variable(variable, values, self.bins) {
            Ok(edges) => VariableBins::Edges(edges),
            Err(VocabError::DegenerateVariable { .. }) => VariableBins::Degenerate,
            Err(e) => return Err(e),
        };
        self.variables.insert(variable.to_string(), bins);
        Ok(())
    }

    pub fn edges(&self, variable: &str) -> Option<&VariableBins> {
        self.variables.get(variable)
    }

    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Quantile edges of one variable. Duplicate edges (heavy ties) are merged.
pub fn fit_variable(variable: &str, values: &[f64], bins: usize) -> Result<Vec<f64>, VocabError> {
    if bins < 2 {
        return Err(VocabError::InvalidBinCount(bins));
    }
    let mut sorted: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < bins {
        return Err(VocabError::DegenerateVariable {
            variable: variable.to_string(),
            distinct: distinct.len(),
            bins,
        });
    }
    let n = sorted.len();
    let mut edges: Vec<f64> = Vec::with_capacity(bins - 1);
    for i in 1..bins {
        let num = (n - 1) * i;
        let lo = num / bins;
        let rem = num % bins;
        let edge = if rem == 0 {
            sorted[lo]
        } else {
            let frac = rem as f64 / bins as f64;
            sorted[lo] + (sorted[lo + 1] - sorted[lo]) * frac
        };
        if edges.last().is_none_or(|&last| edge > last) {
            edges.push(edge);
        }
    }
    Ok(edges)
}

/// Fits every variable of `data`; variables with too few distinct values
/// become degenerate.
pub fn fit_quantizer(data: &BTreeMap<String, Vec<f64>>, bins: usize) -> Result<QuantizerSpec, VocabError> {
    let mut spec = QuantizerSpec::new(bins)?;
    for (name, values) in data {
        spec.fit(name, values)?;
    }
    Ok(spec)
}

/// `<variable>_Qk` with k the number of edges at or below `value`.
pub fn quantize(variable: &str, value: f64, spec: &QuantizerSpec) -> Result<String, VocabError> {
    let k = match spec.variables.get(variable) {
        None => return Err(VocabError::UnknownVariable(variable.to_string())),
        Some(VariableBins::Degenerate) => 0,
        Some(VariableBins::Edges(edges)) => edges.partition_point(|&e| e <= value),
    };
    Ok(format!("{variable}_Q{k}"))
}
