//! Loss, metrics, optimizers, gradient verification and the training loop.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::missingness::{Series, TimeSeriesBatch};
use crate::models::{GammaStats, Model, ModelKind, ModelSpec};
use crate::odesolver::{Method, SolverSpec};
use crate::parallel::{map_indexed, Execution};
use crate::params::{ParamGroup, ParamSet};
use crate::tensor::{Graph, Tensor, Var};

/// Stable per-example binary cross-entropy, `softplus(ℓ) − y·ℓ`.
pub fn bce_node(g: &mut Graph, logit: Var, label: u8) -> Result<Var> {
    let sp = g.softplus(logit);
    if label == 1 {
        g.sub(sp, logit)
    } else {
        Ok(sp)
    }
}

pub fn bce_value(logit: f64, label: u8) -> f64 {
    let sp = logit.max(0.0) + (-logit.abs()).exp().ln_1p();
    sp - f64::from(label) * logit
}

fn check_labels(labels: &[u8]) -> Result<()> {
    match labels.iter().position(|&y| y > 1) {
        Some(i) => Err(Error::Validation(format!(
            "label {} at index {i} is not 0 or 1",
            labels[i]
        ))),
        None => Ok(()),
    }
}

/// Mean binary cross-entropy of `logits` against `labels`.
pub fn bce_loss(logits: &[f64], labels: &[u8]) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(Error::dims("bce_loss", &[logits.len()], &[labels.len()]));
    }
    if logits.is_empty() {
        return Err(Error::Validation("bce_loss of an empty batch".into()));
    }
    check_labels(labels)?;
    let total: f64 = logits.iter().zip(labels).map(|(&l, &y)| bce_value(l, y)).sum();
    Ok(total / logits.len() as f64)
}

/// Area under the ROC curve by rank sum, ties sharing their average rank.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dims("auc", &[scores.len()], &[labels.len()]));
    }
    check_labels(labels)?;
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric(format!("score at index {i} is NaN")));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let rank = (i + j + 2) as f64 / 2.0;
        rank_sum += rank * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Standard deviation of the AUC over bootstrap resamples of `(scores, labels)`.
/// Resamples that miss a class are redrawn.
pub fn bootstrap_auc_std(scores: &[f64], labels: &[u8], resamples: usize, seed: u64) -> Result<f64> {
    auc(scores, labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = scores.len();
    let mut values = Vec::with_capacity(resamples);
    let (mut s, mut l) = (vec![0.0; n], vec![0u8; n]);
    while values.len() < resamples {
        for k in 0..n {
            let i = rng.random_range(0..n);
            s[k] = scores[i];
            l[k] = labels[i];
        }
        if let Ok(a) = auc(&s, &l) {
            values.push(a);
        }
    }
    Ok(std_dev(&values))
}

/// Population standard deviation; 0 for fewer than two values.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Loss and parameter gradients summed over a batch of series.
#[derive(Clone, Debug)]
pub struct BatchGradients {
    /// Per-series loss, in batch order.
    pub losses: Vec<f64>,
    pub logits: Vec<f64>,
    /// Gradient of the mean loss, one vector per parameter.
    pub grads: Vec<Vec<f64>>,
    pub gammas: GammaStats,
}

impl BatchGradients {
    pub fn mean_loss(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len() as f64
    }
}

struct SeriesGradient {
    loss: f64,
    logit: f64,
    grads: Vec<Vec<f64>>,
    gammas: GammaStats,
}

fn series_gradient(model: &Model, series: &Series) -> Result<SeriesGradient> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let out = model.forward(&mut g, &bound, series)?;
    let loss = bce_node(&mut g, out.logit, series.label)?;
    g.backward(loss)?;
    Ok(SeriesGradient {
        loss: g.data(loss)[0],
        logit: g.data(out.logit)[0],
        grads: bound.grads(&g),
        gammas: out.gammas,
    })
}

/// Forward and backward over every series, one graph per series.
pub fn batch_gradients(model: &Model, series: &[&Series], exec: Execution) -> Result<BatchGradients> {
    if series.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    let parts = map_indexed(exec, series.len(), |i| {
        series_gradient(model, series[i]).map_err(|e| e.in_series(i))
    });
    let mut grads: Vec<Vec<f64>> = model
        .params
        .entries()
        .iter()
        .map(|e| vec![0.0; e.tensor.len()])
        .collect();
    let mut out = BatchGradients {
        losses: Vec::with_capacity(series.len()),
        logits: Vec::with_capacity(series.len()),
        grads: Vec::new(),
        gammas: GammaStats::default(),
    };
    for part in parts {
        let part = part?;
        for (acc, gr) in grads.iter_mut().zip(&part.grads) {
            acc.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
        }
        out.losses.push(part.loss);
        out.logits.push(part.logit);
        out.gammas.merge(&part.gammas);
    }
    let scale = 1.0 / series.len() as f64;
    grads.iter_mut().flatten().for_each(|v| *v *= scale);
    out.grads = grads;
    Ok(out)
}

/// Logits for every series of `batch`.
pub fn predict(model: &Model, batch: &TimeSeriesBatch, exec: Execution) -> Result<Vec<f64>> {
    map_indexed(exec, batch.len(), |i| {
        model.logit(&batch.series[i]).map_err(|e| e.in_series(i))
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::Validation(format!("unknown optimizer `{s}`"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// First-order optimizer with per-group learning-rate multipliers.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub filter_lr_multiplier: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            filter_lr_multiplier: 1.0,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn with_filter_multiplier(mut self, multiplier: f64) -> Self {
        self.filter_lr_multiplier = multiplier;
        self
    }

    /// Applies one update. Refuses non-finite gradients, naming the parameter.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::dims("optimizer step", &[params.len()], &[grads.len()]));
        }
        for (e, g) in params.entries().iter().zip(grads) {
            if g.len() != e.tensor.len() {
                return Err(Error::dims("optimizer step", e.tensor.shape(), &[g.len()]));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { param: e.name.clone() });
            }
        }
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t));
        for (i, (e, g)) in params.entries_mut().iter_mut().zip(grads).enumerate() {
            let lr = match e.group {
                ParamGroup::Main => self.learning_rate,
                ParamGroup::FilterLinear => self.learning_rate * self.filter_lr_multiplier,
            };
            let p = e.tensor.data_mut();
            match self.kind {
                OptimizerKind::Sgd => p.iter_mut().zip(g).for_each(|(p, g)| *p -= lr * g),
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for k in 0..p.len() {
                        m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g[k];
                        v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g[k] * g[k];
                        p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Zero is accepted and leaves parameters untouched.
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Epochs without a validation AUC improvement before stopping; 0 disables.
    pub patience: usize,
    pub validation_fraction: f64,
    pub test_fraction: f64,
    pub clip_norm: f64,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 0.01,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            patience: 5,
            validation_fraction: 0.2,
            test_fraction: 0.2,
            clip_norm: 5.0,
            execution: Execution::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation fraction must lie in (0, 1)");
        }
        if !(self.test_fraction >= 0.0 && self.validation_fraction + self.test_fraction < 1.0) {
            return bad("validation and test fractions must leave a training share");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip norm must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation AUC.
    pub model: Model,
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val_auc: f64,
    /// Every decay rate computed during training.
    pub gammas: GammaStats,
}

/// Minibatch training with early stopping on validation AUC.
///
/// `on_epoch` sees each epoch's metrics as soon as they are known.
pub fn train(
    mut model: Model,
    train_set: &TimeSeriesBatch,
    validation: &TimeSeriesBatch,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Validation("empty training set".into()));
    }
    let labels = train_set.labels();
    if !labels.contains(&0) || !labels.contains(&1) {
        return Err(Error::Validation("training set needs both classes".into()));
    }
    let val_labels = validation.labels();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt =
        Optimizer::new(cfg.optimizer, cfg.learning_rate).with_filter_multiplier(model.spec.filter_lr_multiplier);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut losses = vec![0.0; train_set.len()];
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut gammas = GammaStats::default();
    let mut best: Option<(usize, f64, ParamSet)> = None;
    let mut stale = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Series> = chunk.iter().map(|&i| &train_set.series[i]).collect();
            let mut bg = batch_gradients(&model, &batch, cfg.execution)?;
            if bg.losses.iter().any(|l| !l.is_finite()) {
                return Err(Error::DivergentLoss { epoch, batch: b });
            }
            for (&i, &l) in chunk.iter().zip(&bg.losses) {
                losses[i] = l;
            }
            gammas.merge(&bg.gammas);
            clip_global_norm(&mut bg.grads, cfg.clip_norm);
            opt.step(&mut model.params, &bg.grads)?;
        }
        // summed in series order so the value does not depend on the shuffle
        let train_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let val_auc = auc(&predict(&model, validation, cfg.execution)?, &val_labels)?;
        let m = EpochMetrics {
            epoch,
            train_loss,
            val_auc,
        };
        log::info!("epoch {epoch}: train loss {train_loss:.5}, validation AUC {val_auc:.4}");
        on_epoch(&m);
        history.push(m);
        if best.as_ref().is_none_or(|(_, a, _)| val_auc > *a) {
            best = Some((epoch, val_auc, model.params.clone()));
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience > 0 && stale >= cfg.patience {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    let (best_epoch, best_val_auc, params) = best.expect("at least one epoch ran");
    model.params = params;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val_auc,
        gammas,
    })
}

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so near-zero gradients are
/// compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-2;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Acceptable worst relative error for `kind`.
pub fn grad_threshold(kind: ModelKind) -> f64 {
    if matches!(kind, ModelKind::OdeGrud | ModelKind::ExtOdeGrud) {
        1e-3
    } else {
        1e-4
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub kind: ModelKind,
    pub checked: usize,
    pub worst_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub threshold: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.worst_error < self.threshold
    }
}

fn mean_loss(model: &Model, series: &[Series]) -> Result<f64> {
    let mut total = 0.0;
    for s in series {
        total += bce_value(model.logit(s)?, s.label);
    }
    Ok(total / series.len() as f64)
}

/// Central finite differences over every parameter entry against the
/// analytic gradient of the mean loss.
pub fn grad_check(model: &Model, series: &[Series]) -> Result<GradCheckReport> {
    let refs: Vec<&Series> = series.iter().collect();
    let analytic = batch_gradients(model, &refs, Execution::Sequential)?.grads;
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        kind: model.spec.kind,
        checked: 0,
        worst_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        threshold: grad_threshold(model.spec.kind),
    };
    for (p, entry) in model.params.entries().iter().enumerate() {
        for (k, &exact) in analytic[p].iter().enumerate() {
            let orig = entry.tensor.data()[k];
            probe.params.entries_mut()[p].tensor.data_mut()[k] = orig + FD_STEP;
            let up = mean_loss(&probe, series)?;
            probe.params.entries_mut()[p].tensor.data_mut()[k] = orig - FD_STEP;
            let down = mean_loss(&probe, series)?;
            probe.params.entries_mut()[p].tensor.data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let err = relative_error(exact, numeric);
            report.checked += 1;
            if err > report.worst_error || report.worst_param.is_empty() {
                report.worst_error = err;
                report.worst_param = entry.name.clone();
                report.worst_index = k;
                report.analytic = exact;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Toy problem for [`grad_check`]: D=2, H=3, four series of at most five
/// steps, all parameters uniform in [−1, 1], rk4 with step 0.25.
pub fn toy_fixture(kind: ModelKind, seed: u64) -> Result<(Model, Vec<Series>)> {
    let (d, h) = (2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec = ModelSpec::new(kind, d, h);
    spec.solver = SolverSpec::new(Method::Rk4, 0.25);
    spec.readout_horizon = 0.5;
    let means = vec![rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
    let mut model = Model::new(spec, means, seed)?;
    for e in model.params.entries_mut() {
        let shape = e.tensor.shape().to_vec();
        let data = (0..e.tensor.len()).map(|_| rng.random_range(-1.0..=1.0)).collect();
        e.tensor = Tensor::new(shape, data)?;
    }
    let lengths = [3, 5, 4, 2];
    let series = lengths
        .iter()
        .enumerate()
        .map(|(i, &len)| {
            let mut t = 0.0;
            let mut times = Vec::with_capacity(len);
            let mut values = Vec::with_capacity(len * d);
            let mut mask = Vec::with_capacity(len * d);
            for _ in 0..len {
                times.push(t);
                t += rng.random_range(0.3..1.5);
                let first = rng.random_bool(0.6);
                let row = [first, !first || rng.random_bool(0.5)];
                for &obs in &row {
                    mask.push(if obs { 1.0 } else { 0.0 });
                    values.push(if obs { rng.random_range(-2.0..2.0) } else { 0.0 });
                }
            }
            Series::new(format!("toy{i}"), d, times, values, mask, (i % 2) as u8)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((model, series))
}
