use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use odegrud::checkpoint::Checkpoint;
use odegrud::data::{
    attach_labels, generate_synthetic, load_labels, load_triplets, write_labels, write_triplets, LoadOptions,
    Missingness, SyntheticSpec, DEFAULT_MAX_STEPS,
};
use odegrud::experiment::{self, ModelOptions};
use odegrud::missingness::{fit_means, Normalizer, TimeSeriesBatch};
use odegrud::models::{Imputation, Model, ModelKind};
use odegrud::odesolver::{steps_for, GradientMode, Method};
use odegrud::parallel::Execution;
use odegrud::training::{
    auc, batch_gradients, bce_loss, grad_check, std_dev, toy_fixture, Optimizer, OptimizerKind, TrainConfig,
};
use serde_json::json;

use crate::config::{usage, Echo, FileConfig, NameList, Pair};
use crate::{BenchArgs, DataArgs, EvalArgs, GradcheckArgs, ModelArgs, OptimArgs, SynthArgs, TrainArgs};

/// A check ran but missed its threshold. Maps to exit code 1.
#[derive(Debug)]
pub struct ThresholdFailure(pub String);

impl fmt::Display for ThresholdFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ThresholdFailure {}

const DATA_KEYS: [&str; 11] = [
    "data",
    "labels",
    "variables",
    "max-steps",
    "synthetic",
    "n-series",
    "dim",
    "mean-length",
    "missing-rates",
    "amplitude",
    "noise",
];
const MODEL_KEYS: [&str; 9] = [
    "model",
    "hidden-dim",
    "imputation",
    "solver",
    "step-size",
    "grad-mode",
    "readout-horizon",
    "literal-input-decay",
    "filter-lr-mult",
];
const OPTIM_KEYS: [&str; 7] = [
    "epochs",
    "lr",
    "batch-size",
    "optimizer",
    "patience",
    "val-fraction",
    "test-fraction",
];

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| usage(format!("cannot create output directory {}: {e}", dir.display())))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn execution(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

/// Resolves the synthetic spec for `preset` with flag/config overrides.
fn synthetic_spec(preset: &str, a: &DataArgs, cfg: &FileConfig, seed: u64, echo: &mut Echo) -> Result<SyntheticSpec> {
    let base = SyntheticSpec::preset(preset).map_err(|e| usage(e.to_string()))?;
    let rates = match base.missingness {
        Missingness::Informative { negative, positive } => Pair(negative, positive),
        Missingness::Random { rate } => Pair(rate, rate),
    };
    let rates = cfg.pick(a.missing_rates, "missing-rates", rates)?;
    let spec = SyntheticSpec {
        n_series: cfg.pick(a.n_series, "n-series", base.n_series)?,
        dim: cfg.pick(a.dim, "dim", base.dim)?,
        mean_length: cfg.pick(a.mean_length, "mean-length", base.mean_length)?,
        amplitude: cfg.pick(a.amplitude, "amplitude", base.amplitude)?,
        noise: cfg.pick(a.noise, "noise", base.noise)?,
        missingness: if rates.0 == rates.1 {
            Missingness::Random { rate: rates.0 }
        } else {
            Missingness::Informative {
                negative: rates.0,
                positive: rates.1,
            }
        },
        seed,
        ..base
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    echo.set("synthetic", preset);
    echo.set("n-series", spec.n_series);
    echo.set("dim", spec.dim);
    echo.set("mean-length", spec.mean_length);
    echo.set("missing-rates", rates);
    echo.set("amplitude", spec.amplitude);
    echo.set("noise", spec.noise);
    Ok(spec)
}

/// Loads the one configured data source.
fn load_data(
    a: &DataArgs,
    cfg: &FileConfig,
    seed: u64,
    vocabulary: Option<Vec<String>>,
    echo: &mut Echo,
) -> Result<TimeSeriesBatch> {
    let data: Option<PathBuf> = cfg.pick_opt(a.data.clone(), "data")?;
    let labels: Option<PathBuf> = cfg.pick_opt(a.labels.clone(), "labels")?;
    let synthetic: Option<String> = cfg.pick_opt(a.synthetic.clone(), "synthetic")?;
    match (data, synthetic) {
        (Some(_), Some(_)) => Err(usage("give either --data or --synthetic, not both")),
        (None, None) => Err(usage("no data source: give --data with --labels, or --synthetic")),
        (None, Some(preset)) => Ok(generate_synthetic(&synthetic_spec(&preset, a, cfg, seed, echo)?)?),
        (Some(path), None) => {
            let labels = labels.ok_or_else(|| usage("--data needs --labels"))?;
            let listed: Option<NameList> = cfg.pick_opt(a.variables.clone(), "variables")?;
            let options = LoadOptions {
                vocabulary: vocabulary.or(listed.map(|l| l.0)),
                max_steps: cfg.pick(a.max_steps, "max-steps", DEFAULT_MAX_STEPS)?,
            };
            let mut batch = load_triplets(&path, &options).with_context(|| format!("loading {}", path.display()))?;
            let map = load_labels(&labels).with_context(|| format!("loading {}", labels.display()))?;
            attach_labels(&mut batch, &map)?;
            echo.set("data", path.display());
            echo.set("labels", labels.display());
            echo.set("variables", NameList(batch.variables.clone()));
            echo.set("max-steps", options.max_steps);
            Ok(batch)
        }
    }
}

fn model_options(a: &ModelArgs, cfg: &FileConfig, echo: &mut Echo) -> Result<ModelOptions> {
    let d = ModelOptions::default();
    let o = ModelOptions {
        kind: cfg.pick(a.model, "model", d.kind)?,
        hidden_dim: cfg.pick(a.hidden_dim, "hidden-dim", d.hidden_dim)?,
        imputation: cfg.pick::<Imputation>(a.imputation, "imputation", d.imputation)?,
        method: cfg.pick::<Method>(a.solver, "solver", d.method)?,
        step_size: cfg.pick_opt(a.step_size, "step-size")?,
        gradient_mode: cfg.pick::<GradientMode>(a.grad_mode, "grad-mode", d.gradient_mode)?,
        readout_horizon: cfg.pick(a.readout_horizon, "readout-horizon", d.readout_horizon)?,
        literal_input_decay: cfg.pick(a.literal_input_decay, "literal-input-decay", d.literal_input_decay)?,
        filter_lr_multiplier: cfg.pick(a.filter_lr_mult, "filter-lr-mult", d.filter_lr_multiplier)?,
    };
    echo.set("model", o.kind);
    echo.set("hidden-dim", o.hidden_dim);
    echo.set("imputation", o.imputation);
    echo.set("solver", o.method);
    echo.set_opt("step-size", o.step_size);
    echo.set("grad-mode", o.gradient_mode);
    echo.set("readout-horizon", o.readout_horizon);
    echo.set("literal-input-decay", o.literal_input_decay);
    echo.set("filter-lr-mult", o.filter_lr_multiplier);
    Ok(o)
}

fn train_config(a: &OptimArgs, cfg: &FileConfig, seed: u64, exec: Execution, echo: &mut Echo) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let c = TrainConfig {
        epochs: cfg.pick(a.epochs, "epochs", d.epochs)?,
        batch_size: cfg.pick(a.batch_size, "batch-size", d.batch_size)?,
        learning_rate: cfg.pick(a.lr, "lr", d.learning_rate)?,
        optimizer: cfg.pick::<OptimizerKind>(a.optimizer, "optimizer", d.optimizer)?,
        seed,
        patience: cfg.pick(a.patience, "patience", d.patience)?,
        validation_fraction: cfg.pick(a.val_fraction, "val-fraction", d.validation_fraction)?,
        test_fraction: cfg.pick(a.test_fraction, "test-fraction", d.test_fraction)?,
        clip_norm: d.clip_norm,
        execution: exec,
    };
    c.validate().map_err(|e| usage(e.to_string()))?;
    echo.set("epochs", c.epochs);
    echo.set("lr", c.learning_rate);
    echo.set("batch-size", c.batch_size);
    echo.set("optimizer", c.optimizer);
    echo.set("patience", c.patience);
    echo.set("val-fraction", c.validation_fraction);
    echo.set("test-fraction", c.test_fraction);
    Ok(c)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let cfg = FileConfig::load(a.config.as_deref())?;
    let keys: Vec<&str> = [
        &DATA_KEYS[..],
        &MODEL_KEYS[..],
        &OPTIM_KEYS[..],
        &["seed", "out", "sequential"],
    ]
    .concat();
    cfg.check_keys(&keys)?;
    let mut echo = Echo::default();
    let seed = cfg.pick(a.seed, "seed", 0u64)?;
    let out: PathBuf = cfg.pick(a.out.clone(), "out", PathBuf::from("odegrud-run"))?;
    let sequential = cfg.pick(a.sequential, "sequential", false)?;
    echo.set("seed", seed);
    echo.set("out", out.display());
    echo.set("sequential", sequential);
    let options = model_options(&a.model, &cfg, &mut echo)?;
    let tc = train_config(&a.optim, &cfg, seed, execution(sequential), &mut echo)?;
    let batch = load_data(&a.data, &cfg, seed, None, &mut echo)?;

    create_out(&out)?;
    fs::write(out.join("config.txt"), echo.render())?;
    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = BufWriter::new(File::create(&metrics_path)?);
    let mut write_err = None;
    let run = experiment::run(&batch, &options, &tc, |m| {
        let line = serde_json::to_string(m).expect("metrics serialize");
        if let Err(e) = writeln!(metrics, "{line}").and_then(|()| metrics.flush()) {
            write_err.get_or_insert(e);
        }
    });
    if let Some(e) = write_err {
        return Err(e).context("writing metrics");
    }
    let run = run?;
    run.checkpoint.save(&out.join("model.ckpt"))?;
    write_json(&out.join("summary.json"), &serde_json::to_value(&run.summary)?)?;
    let s = &run.summary;
    match (s.test_auc, s.test_auc_std) {
        (Some(auc), Some(std)) => println!(
            "{}: test AUC {auc:.4} ± {std:.4} (best epoch {}, validation AUC {:.4})",
            s.model, s.best_epoch, s.best_val_auc
        ),
        _ => println!(
            "{}: validation AUC {:.4} (best epoch {})",
            s.model, s.best_val_auc, s.best_epoch
        ),
    }
    println!("artifacts in {}", out.display());
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let cfg = FileConfig::load(a.config.as_deref())?;
    let keys: Vec<&str> = [&DATA_KEYS[..], &["seed", "out"]].concat();
    cfg.check_keys(&keys)?;
    let ck =
        Checkpoint::load(&a.checkpoint).with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let mut echo = Echo::default();
    let seed = cfg.pick(a.seed, "seed", 0u64)?;
    let out: PathBuf = cfg.pick(a.out.clone(), "out", PathBuf::from("odegrud-eval"))?;
    echo.set("checkpoint", a.checkpoint.display());
    echo.set("seed", seed);
    let batch = load_data(&a.data, &cfg, seed, Some(ck.variables.clone()), &mut echo)?;
    if batch.dim() != ck.model.spec.input_dim {
        return Err(usage(format!(
            "checkpoint expects {} variables, data has {}",
            ck.model.spec.input_dim,
            batch.dim()
        )));
    }
    let scores = experiment::score(&ck, &batch, &TrainConfig::default())?;
    let labels = batch.labels();
    let loss = bce_loss(&scores, &labels)?;
    let auc = auc(&scores, &labels).ok();

    create_out(&out)?;
    fs::write(out.join("config.txt"), echo.render())?;
    let mut w = BufWriter::new(File::create(out.join("scores.csv"))?);
    writeln!(w, "series_id,label,score")?;
    for (s, score) in batch.series.iter().zip(&scores) {
        writeln!(w, "{},{},{}", s.id, s.label, score)?;
    }
    w.flush()?;
    write_json(
        &out.join("eval.json"),
        &json!({ "model": ck.model.spec.kind, "n_series": batch.len(), "auc": auc, "loss": loss }),
    )?;
    match auc {
        Some(v) => println!("AUC {v:.4}, loss {loss:.4} over {} series", batch.len()),
        None => println!("AUC undefined (one class), loss {loss:.4} over {} series", batch.len()),
    }
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let kinds: Vec<ModelKind> = if a.model == "all" {
        ModelKind::ALL.to_vec()
    } else {
        vec![a.model.parse().map_err(|e: odegrud::Error| usage(e.to_string()))?]
    };
    let seed = a.seed.unwrap_or(0);
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for kind in kinds {
        for fixture in [seed, seed + 1] {
            let (model, series) = toy_fixture(kind, fixture)?;
            let r = grad_check(&model, &series)?;
            let verdict = if r.passed() { "ok" } else { "FAIL" };
            println!(
                "{kind:<13} fixture {fixture}: worst relative error {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e}) threshold {:.0e} {verdict}",
                r.worst_error, r.worst_param, r.worst_index, r.analytic, r.numeric, r.threshold
            );
            if !r.passed() {
                failures.push(format!(
                    "{kind} {}[{}] error {:.3e}",
                    r.worst_param, r.worst_index, r.worst_error
                ));
            }
            reports.push(r);
        }
    }
    if let Some(dir) = &a.out {
        create_out(dir)?;
        write_json(&dir.join("gradcheck.json"), &serde_json::to_value(&reports)?)?;
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(ThresholdFailure(format!("gradient check failed: {}", failures.join("; "))).into())
    }
}

/// Solver steps one forward pass over `batch` takes.
fn solver_steps(model: &Model, batch: &TimeSeriesBatch) -> usize {
    let spec = &model.spec;
    let solves_per_gap = match spec.kind {
        ModelKind::Gru | ModelKind::Grud => return 0,
        ModelKind::OdeRnn | ModelKind::OdeGrud => 1,
        ModelKind::ExtOdeGrud => 3,
    };
    let step = spec.solver.step_size;
    batch
        .series
        .iter()
        .map(|s| {
            let gaps: usize = s
                .times
                .windows(2)
                .filter(|w| w[1] > w[0])
                .map(|w| steps_for(w[1] - w[0], step))
                .sum();
            let tail = if spec.readout_horizon > 0.0 {
                steps_for(spec.readout_horizon, step)
            } else {
                0
            };
            gaps * solves_per_gap + tail
        })
        .sum()
}

pub fn bench(a: BenchArgs) -> Result<()> {
    let (n_series, hidden) = match a.suite.as_str() {
        "quick" => (200, 8),
        "full" => (1000, 16),
        other => return Err(usage(format!("unknown bench suite `{other}` (quick, full)"))),
    };
    let repeats = a.repeats.unwrap_or(3);
    if repeats == 0 {
        return Err(usage("--repeats must be positive"));
    }
    let seed = a.seed.unwrap_or(0);
    let exec = execution(a.sequential.unwrap_or(false));
    let spec = SyntheticSpec {
        n_series,
        seed,
        ..SyntheticSpec::default()
    };
    let raw = generate_synthetic(&spec)?;
    let batch = Normalizer::fit(&raw.series)?.apply_batch(&raw);
    let means = fit_means(&batch.series)?.means;
    let refs: Vec<_> = batch.series.iter().collect();
    println!(
        "workload: {n_series} series, D={}, H={hidden}, rk4 step 0.25, {repeats} timed epochs, {}",
        spec.dim,
        if exec.is_parallel() { "parallel" } else { "sequential" }
    );
    println!(
        "{:<13} {:>12} {:>12} {:>12} {:>16}",
        "model", "epoch_s", "std_s", "cv", "solver_steps/s"
    );
    let mut rows = Vec::new();
    for kind in ModelKind::ALL {
        let options = ModelOptions {
            kind,
            hidden_dim: hidden,
            step_size: Some(0.25),
            ..ModelOptions::default()
        };
        let mut model = Model::new(options.resolve(batch.dim(), &batch), means.clone(), seed)?;
        let steps = solver_steps(&model, &batch);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-3);
        let mut times = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let start = Instant::now();
            for chunk in refs.chunks(32) {
                let bg = batch_gradients(&model, chunk, exec)?;
                opt.step(&mut model.params, &bg.grads)?;
            }
            times.push(start.elapsed().as_secs_f64());
        }
        let mean = times.iter().sum::<f64>() / times.len() as f64;
        let std = std_dev(&times);
        let throughput = steps as f64 / mean;
        println!(
            "{:<13} {:>12.4} {:>12.4} {:>12.3} {:>16.0}",
            kind.name(),
            mean,
            std,
            std / mean,
            throughput
        );
        rows.push(json!({
            "model": kind, "epoch_seconds": times, "mean": mean, "std": std,
            "solver_steps_per_epoch": steps, "solver_steps_per_second": throughput,
        }));
    }
    if let Some(dir) = &a.out {
        create_out(dir)?;
        write_json(
            &dir.join("bench.json"),
            &json!({ "suite": a.suite, "n_series": n_series, "hidden": hidden, "parallel": exec.is_parallel(), "rows": rows }),
        )?;
    }
    Ok(())
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let cfg = FileConfig::load(a.config.as_deref())?;
    let keys: Vec<&str> = [&DATA_KEYS[..], &["seed", "out"]].concat();
    cfg.check_keys(&keys)?;
    if a.data.data.is_some() || a.data.labels.is_some() {
        return Err(usage("synth generates data; --data and --labels do not apply"));
    }
    let mut echo = Echo::default();
    let seed = cfg.pick(a.seed, "seed", 0u64)?;
    let out: PathBuf = cfg.pick(a.out.clone(), "out", PathBuf::from("odegrud-synth"))?;
    let preset: String = cfg.pick(a.data.synthetic.clone(), "synthetic", "default".to_string())?;
    echo.set("seed", seed);
    echo.set("out", out.display());
    let spec = synthetic_spec(&preset, &a.data, &cfg, seed, &mut echo)?;
    let batch = generate_synthetic(&spec)?;
    create_out(&out)?;
    fs::write(out.join("config.txt"), echo.render())?;
    write_triplets(BufWriter::new(File::create(out.join("triplets.csv"))?), &batch)?;
    write_labels(BufWriter::new(File::create(out.join("labels.csv"))?), &batch)?;
    let positives = batch.labels().iter().filter(|&&y| y == 1).count();
    println!(
        "wrote {} series ({positives} positive, {} variables) to {}",
        batch.len(),
        batch.dim(),
        out.display()
    );
    Ok(())
}
