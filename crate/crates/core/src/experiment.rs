//! End-to-end runs: split, normalize, train, evaluate on the test split.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{median_gap, split, SplitFractions};
use crate::error::{Error, Result};
use crate::missingness::{fit_means, Normalizer, TimeSeriesBatch};
use crate::models::{GammaStats, Imputation, Model, ModelKind, ModelSpec};
use crate::odesolver::{GradientMode, Method, SolverSpec};
use crate::training::{auc, bce_loss, bootstrap_auc_std, predict, train, EpochMetrics, TrainConfig};

pub const BOOTSTRAP_RESAMPLES: usize = 200;

/// Model settings before the data is seen; the solver step defaults to a
/// quarter of the median gap of the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelOptions {
    pub kind: ModelKind,
    pub hidden_dim: usize,
    pub imputation: Imputation,
    pub method: Method,
    pub step_size: Option<f64>,
    pub gradient_mode: GradientMode,
    pub readout_horizon: f64,
    pub literal_input_decay: bool,
    pub filter_lr_multiplier: f64,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            kind: ModelKind::OdeGrud,
            hidden_dim: 16,
            imputation: Imputation::Mean,
            method: Method::Rk4,
            step_size: None,
            gradient_mode: GradientMode::Discretize,
            readout_horizon: 0.0,
            literal_input_decay: false,
            filter_lr_multiplier: 1.0,
        }
    }
}

impl ModelOptions {
    pub fn resolve(&self, input_dim: usize, train: &TimeSeriesBatch) -> ModelSpec {
        let step = self.step_size.unwrap_or_else(|| median_gap(train) / 4.0);
        let mut spec = ModelSpec::new(self.kind, input_dim, self.hidden_dim);
        spec.imputation = self.imputation;
        spec.solver = SolverSpec::new(self.method, step).with_gradient_mode(self.gradient_mode);
        spec.readout_horizon = self.readout_horizon;
        spec.literal_input_decay = self.literal_input_decay;
        spec.filter_lr_multiplier = self.filter_lr_multiplier;
        spec
    }
}

/// Normalized splits; statistics come from the training split only.
pub struct Prepared {
    pub train: TimeSeriesBatch,
    pub validation: TimeSeriesBatch,
    pub test: TimeSeriesBatch,
    pub normalizer: Normalizer,
}

pub fn prepare(batch: &TimeSeriesBatch, cfg: &TrainConfig) -> Result<Prepared> {
    cfg.validate()?;
    batch.validate()?;
    let fractions = SplitFractions {
        train: 1.0 - cfg.validation_fraction - cfg.test_fraction,
        validation: cfg.validation_fraction,
        test: cfg.test_fraction,
    };
    let parts = split(batch, fractions, cfg.seed, true)?;
    let normalizer = Normalizer::fit(&parts.train.series)?;
    Ok(Prepared {
        train: normalizer.apply_batch(&parts.train),
        validation: normalizer.apply_batch(&parts.validation),
        test: normalizer.apply_batch(&parts.test),
        normalizer,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub model: ModelKind,
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_auc: f64,
    pub test_auc: Option<f64>,
    pub test_auc_std: Option<f64>,
    pub test_loss: Option<f64>,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub parameters: usize,
    pub step_size: f64,
    pub gamma_min: Option<f64>,
    pub gamma_max: Option<f64>,
    pub gamma_count: usize,
}

pub struct RunOutput {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochMetrics>,
    pub summary: Summary,
    pub gammas: GammaStats,
}

/// Trains `options` on `batch` and scores the held-out test split.
pub fn run(
    batch: &TimeSeriesBatch,
    options: &ModelOptions,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<RunOutput> {
    let data = prepare(batch, cfg)?;
    let spec = options.resolve(batch.dim(), &data.train);
    let means = fit_means(&data.train.series)?.means;
    let model = Model::new(spec, means, cfg.seed)?;
    let parameters = model.params.numel();
    let outcome = train(model, &data.train, &data.validation, cfg, on_epoch)?;

    let (test_auc, test_auc_std, test_loss) = if data.test.is_empty() {
        (None, None, None)
    } else {
        let scores = predict(&outcome.model, &data.test, cfg.execution)?;
        let labels = data.test.labels();
        (
            Some(auc(&scores, &labels)?),
            Some(bootstrap_auc_std(&scores, &labels, BOOTSTRAP_RESAMPLES, cfg.seed)?),
            Some(bce_loss(&scores, &labels)?),
        )
    };
    let g = outcome.gammas;
    let summary = Summary {
        model: options.kind,
        seed: cfg.seed,
        epochs_run: outcome.history.len(),
        best_epoch: outcome.best_epoch,
        best_val_auc: outcome.best_val_auc,
        test_auc,
        test_auc_std,
        test_loss,
        n_train: data.train.len(),
        n_validation: data.validation.len(),
        n_test: data.test.len(),
        parameters,
        step_size: outcome.model.spec.solver.step_size,
        gamma_min: (g.count > 0).then_some(g.min),
        gamma_max: (g.count > 0).then_some(g.max),
        gamma_count: g.count,
    };
    Ok(RunOutput {
        checkpoint: Checkpoint {
            model: outcome.model,
            normalizer: data.normalizer,
            variables: batch.variables.clone(),
        },
        history: outcome.history,
        summary,
        gammas: g,
    })
}

/// Scores of a checkpoint on raw (unnormalized) data.
pub fn score(checkpoint: &Checkpoint, batch: &TimeSeriesBatch, cfg: &TrainConfig) -> Result<Vec<f64>> {
    if batch.dim() != checkpoint.model.spec.input_dim {
        return Err(Error::dims(
            "checkpoint input",
            &[checkpoint.model.spec.input_dim],
            &[batch.dim()],
        ));
    }
    let data = checkpoint.normalizer.apply_batch(batch);
    predict(&checkpoint.model, &data, cfg.execution)
}
