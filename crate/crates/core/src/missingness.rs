//! Missingness encoding: masks, time-since-last-observation intervals,
//! imputation schemes and the exponential decay rate.
//!
//! Values are stored row-major as `[steps × variables]`. Missing entries hold
//! the placeholder `0.0` and are never read by anything downstream.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// One irregularly sampled multivariate series.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub id: String,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub mask: Vec<f64>,
    pub deltas: Vec<f64>,
    pub label: u8,
    dim: usize,
}

impl Series {
    /// Validates the layout and derives the interval matrix from `times` and `mask`.
    pub fn new(
        id: impl Into<String>,
        dim: usize,
        times: Vec<f64>,
        values: Vec<f64>,
        mask: Vec<f64>,
        label: u8,
    ) -> Result<Self> {
        let steps = times.len();
        if dim == 0 {
            return Err(Error::Validation("series needs at least one variable".into()));
        }
        if values.len() != steps * dim || mask.len() != steps * dim {
            return Err(Error::dims("series", &[steps, dim], &[values.len(), mask.len()]));
        }
        if let Some(bad) = mask.iter().find(|&&m| m != 0.0 && m != 1.0) {
            return Err(Error::Validation(format!("mask entry {bad} is not 0 or 1")));
        }
        if label > 1 {
            return Err(Error::Validation(format!("label {label} is not 0 or 1")));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::Validation("non-finite timestamp".into()));
        }
        let deltas = compute_intervals(&times, &mask, dim)?;
        let mut values = values;
        for (v, m) in values.iter_mut().zip(&mask) {
            if *m == 0.0 {
                *v = 0.0;
            } else if !v.is_finite() {
                return Err(Error::Validation("non-finite observed value".into()));
            }
        }
        Ok(Self {
            id: id.into(),
            times,
            values,
            mask,
            deltas,
            label,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn value_row(&self, t: usize) -> &[f64] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn mask_row(&self, t: usize) -> &[f64] {
        &self.mask[t * self.dim..(t + 1) * self.dim]
    }

    pub fn delta_row(&self, t: usize) -> &[f64] {
        &self.deltas[t * self.dim..(t + 1) * self.dim]
    }

    /// Replaces the stored values, keeping the placeholder convention.
    pub fn with_values(&self, values: Vec<f64>) -> Self {
        let mut out = self.clone();
        out.values = values
            .into_iter()
            .zip(&self.mask)
            .map(|(v, &m)| if m == 1.0 { v } else { 0.0 })
            .collect();
        out
    }

    /// Same series with every timestamp shifted by `offset`.
    pub fn shifted(&self, offset: f64) -> Self {
        let mut out = self.clone();
        out.times.iter_mut().for_each(|t| *t += offset);
        out
    }
}

/// A labelled collection of series over a shared variable vocabulary.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TimeSeriesBatch {
    pub variables: Vec<String>,
    pub series: Vec<Series>,
}

impl TimeSeriesBatch {
    pub fn new(variables: Vec<String>, series: Vec<Series>) -> Result<Self> {
        let batch = Self { variables, series };
        batch.validate()?;
        Ok(batch)
    }

    pub fn dim(&self) -> usize {
        self.variables.len()
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.series.iter().map(|s| s.label).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.series.iter().enumerate() {
            if s.dim() != self.dim() {
                return Err(Error::dims("batch", &[self.dim()], &[s.dim()]).in_series(i));
            }
            if s.times.windows(2).any(|w| w[1] < w[0]) {
                let step = s.times.windows(2).position(|w| w[1] < w[0]).unwrap() + 1;
                return Err(Error::DecreasingTimestamps {
                    step,
                    prev: s.times[step - 1],
                    next: s.times[step],
                }
                .in_series(i));
            }
        }
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            variables: self.variables.clone(),
            series: indices.iter().map(|&i| self.series[i].clone()).collect(),
        }
    }
}

/// Time since each variable's previous observation.
///
/// `δ₁ = 0`; afterwards `δₜ = sₜ − sₜ₋₁`, plus `δₜ₋₁` when the variable was
/// missing at `t − 1`.
pub fn compute_intervals(times: &[f64], mask: &[f64], dim: usize) -> Result<Vec<f64>> {
    let steps = times.len();
    if mask.len() != steps * dim {
        return Err(Error::dims("compute_intervals", &[steps, dim], &[mask.len()]));
    }
    let mut deltas = vec![0.0; steps * dim];
    for t in 1..steps {
        let gap = times[t] - times[t - 1];
        if gap < 0.0 {
            return Err(Error::DecreasingTimestamps {
                step: t,
                prev: times[t - 1],
                next: times[t],
            });
        }
        for d in 0..dim {
            let prev = (t - 1) * dim + d;
            deltas[t * dim + d] = if mask[prev] == 0.0 { gap + deltas[prev] } else { gap };
        }
    }
    Ok(deltas)
}

/// Per-variable empirical means over a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedMeans {
    pub means: Vec<f64>,
    /// Variables never observed in training; their mean defaults to 0.
    pub unobserved: Vec<usize>,
}

pub fn fit_means(series: &[Series]) -> Result<FittedMeans> {
    let first = series
        .first()
        .ok_or_else(|| Error::Validation("fit_means needs at least one series".into()))?;
    let dim = first.dim();
    let mut sums = vec![0.0; dim];
    let mut counts = vec![0.0; dim];
    for s in series {
        if s.dim() != dim {
            return Err(Error::dims("fit_means", &[dim], &[s.dim()]));
        }
        for (i, (&v, &m)) in s.values.iter().zip(&s.mask).enumerate() {
            sums[i % dim] += m * v;
            counts[i % dim] += m;
        }
    }
    let mut unobserved = Vec::new();
    let means = (0..dim)
        .map(|d| {
            if counts[d] == 0.0 {
                warn!("variable {d} has no observations in the training split; mean set to 0");
                unobserved.push(d);
                0.0
            } else {
                sums[d] / counts[d]
            }
        })
        .collect();
    Ok(FittedMeans { means, unobserved })
}

/// `m ⊙ x + (1 − m) ⊙ x̃` at every step.
pub fn impute_mean(series: &Series, means: &[f64]) -> Vec<f64> {
    let dim = series.dim();
    series
        .values
        .iter()
        .zip(&series.mask)
        .enumerate()
        .map(|(i, (&v, &m))| if m == 1.0 { v } else { means[i % dim] })
        .collect()
}

/// Last observation carried forward; entries before a variable's first
/// observation fall back to the training mean.
pub fn impute_forward(series: &Series, means: &[f64]) -> Vec<f64> {
    let mut last = means.to_vec();
    let mut out = Vec::with_capacity(series.values.len());
    for t in 0..series.len() {
        for ((l, &m), &v) in last.iter_mut().zip(series.mask_row(t)).zip(series.value_row(t)) {
            if m == 1.0 {
                *l = v;
            }
            out.push(*l);
        }
    }
    out
}

/// Augmented GRU-Simple input `[x; m; δ]`.
pub fn concat_simple(x: &[f64], m: &[f64], delta: &[f64]) -> Result<Vec<f64>> {
    if x.len() != m.len() || x.len() != delta.len() {
        return Err(Error::dims("concat_simple", &[x.len(), m.len()], &[delta.len()]));
    }
    Ok([x, m, delta].concat())
}

/// Inverse of [`concat_simple`].
pub fn split_simple(v: &[f64]) -> Result<(&[f64], &[f64], &[f64])> {
    if !v.len().is_multiple_of(3) {
        return Err(Error::dims("split_simple", &[v.len()], &[3]));
    }
    let d = v.len() / 3;
    Ok((&v[..d], &v[d..2 * d], &v[2 * d..]))
}

/// Weight and bias of one decay head.
///
/// A 1-D weight acts elementwise (per-variable input decay); a 2-D `[H, D]`
/// weight maps the interval vector onto the hidden dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct DecayParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl DecayParams {
    pub fn diagonal(dim: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![dim]),
            bias: Tensor::zeros(vec![dim]),
        }
    }

    pub fn full(out: usize, dim: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![out, dim]),
            bias: Tensor::zeros(vec![out]),
        }
    }

    /// `exp(−max(0, W δ + b))` without recording a graph.
    pub fn rate(&self, delta: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let w = g.constant(self.weight.clone());
        let b = g.constant(self.bias.clone());
        let d = g.vector(delta);
        let gamma = decay_rate(&mut g, d, w, b)?;
        Ok(g.data(gamma).to_vec())
    }
}

/// `γ = exp(−max(0, W δ + b))`, differentiable in `W` and `b`.
pub fn decay_rate(g: &mut Graph, delta: Var, weight: Var, bias: Var) -> Result<Var> {
    let wd = if g.shape(weight).len() == 1 {
        g.mul(weight, delta)?
    } else {
        g.matmul(weight, delta)?
    };
    let pre = g.add(wd, bias)?;
    Ok(decay_from_preactivation(g, pre))
}

/// `exp(−max(0, z))`.
pub fn decay_from_preactivation(g: &mut Graph, pre: Var) -> Var {
    let r = g.relu(pre);
    let n = g.neg(r);
    g.exp(n)
}

/// Per-variable standardization fitted on observed training entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Normalizer {
    pub const STD_FLOOR: f64 = 1e-6;

    pub fn fit(series: &[Series]) -> Result<Self> {
        let FittedMeans { means, .. } = fit_means(series)?;
        let dim = means.len();
        let mut sq = vec![0.0; dim];
        let mut counts = vec![0.0; dim];
        for s in series {
            for (i, (&v, &m)) in s.values.iter().zip(&s.mask).enumerate() {
                let d = i % dim;
                sq[d] += m * (v - means[d]).powi(2);
                counts[d] += m;
            }
        }
        let stds = sq
            .iter()
            .zip(&counts)
            .map(|(&s, &c)| {
                if c > 0.0 {
                    (s / c).sqrt().max(Self::STD_FLOOR)
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { means, stds })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            means: vec![0.0; dim],
            stds: vec![1.0; dim],
        }
    }

    pub fn apply(&self, series: &Series) -> Series {
        let dim = series.dim();
        let values = series
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - self.means[i % dim]) / self.stds[i % dim])
            .collect();
        series.with_values(values)
    }

    pub fn apply_batch(&self, batch: &TimeSeriesBatch) -> TimeSeriesBatch {
        TimeSeriesBatch {
            variables: batch.variables.clone(),
            series: batch.series.iter().map(|s| self.apply(s)).collect(),
        }
    }
}
