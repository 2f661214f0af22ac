//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) and exits non-zero when any
//! criterion fails. The training criterion dominates the runtime.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::reference_logit;
use odegrud::cells::{CellVars, GrudDynamics};
use odegrud::data::{generate_synthetic, Missingness, SyntheticSpec};
use odegrud::experiment::{run, ModelOptions};
use odegrud::missingness::{compute_intervals, fit_means, impute_forward, impute_mean, Series};
use odegrud::models::{GammaStats, Imputation, Model, ModelKind, ModelSpec};
use odegrud::odesolver::{convergence_order, solve, GradientMode, LinearOde, Method, OdeFunc, SolverSpec, TestProblem};
use odegrud::tensor::{Graph, Tensor, Var};
use odegrud::training::{grad_check, toy_fixture, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    passed: bool,
    detail: String,
}

impl Verdict {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

fn report(n: usize, title: &str, v: &Verdict, secs: f64) {
    let tag = if v.passed { "PASS" } else { "FAIL" };
    println!("criterion {n} {tag} [{secs:.1}s] {title}: {}", v.detail);
}

fn gradients() -> Verdict {
    let start = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    for kind in [
        ModelKind::Grud,
        ModelKind::OdeRnn,
        ModelKind::OdeGrud,
        ModelKind::ExtOdeGrud,
    ] {
        let mut worst: f64 = 0.0;
        let mut threshold = 0.0;
        for fixture in [0, 1] {
            let (model, series) = toy_fixture(kind, fixture).expect("fixture");
            let r = grad_check(&model, &series).expect("grad check");
            ok &= r.passed();
            worst = worst.max(r.worst_error);
            threshold = r.threshold;
        }
        parts.push(format!("{kind} {worst:.1e} (< {threshold:.0e})"));
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 120.0;
    Verdict::new(
        ok,
        format!("worst relative error {}; {secs:.1}s of 120s", parts.join(", ")),
    )
}

fn solver() -> Verdict {
    let growth = TestProblem::growth();
    let euler = convergence_order(Method::Euler, &growth).expect("euler order");
    let rk4 = convergence_order(Method::Rk4, &growth).expect("rk4 order");
    let e_err = (growth.solve(Method::Rk4, 0.1).expect("rk4") - std::f64::consts::E).abs();
    let ok = (euler - 1.0).abs() <= 0.2 && (rk4 - 4.0).abs() <= 0.2 && e_err < 1e-5;
    Verdict::new(
        ok,
        format!("euler order {euler:.3}, rk4 order {rk4:.3}, rk4 step 0.1 error in e {e_err:.2e}"),
    )
}

/// Gradients of `Σᵢ wᵢ · y(tᵢ)` with respect to `y0` and every parameter.
fn weighted_grads<F: OdeFunc + Clone + 'static>(
    f: &F,
    theta: &[Tensor],
    y0: &Tensor,
    grid: &[f64],
    weights: &[Vec<f64>],
    spec: &SolverSpec,
) -> Vec<f64> {
    let mut g = Graph::new();
    let ps: Vec<Var> = theta.iter().map(|t| g.param(t.clone())).collect();
    let yv = g.param(y0.clone());
    let out = solve(&mut g, f, &ps, yv, grid, spec).expect("solve");
    let mut loss = None;
    for (&o, w) in out.iter().zip(weights) {
        let wv = g.vector(w);
        let prod = g.mul(o, wv).expect("shapes");
        let s = g.sum(prod);
        loss = Some(match loss {
            None => s,
            Some(l) => g.add(l, s).expect("scalars"),
        });
    }
    g.backward(loss.expect("non-empty grid")).expect("backward");
    let mut all = g.grad(yv).expect("y0 grad").to_vec();
    for p in ps {
        all.extend_from_slice(g.grad(p).expect("param grad"));
    }
    all
}

fn relative_gap(a: &[f64], reference: &[f64]) -> f64 {
    let diff = a.iter().zip(reference).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = reference.iter().map(|y| y.abs()).fold(0.0, f64::max);
    diff / scale.max(f64::MIN_POSITIVE)
}

fn mode_gap<F: OdeFunc + Clone + 'static>(
    f: &F,
    theta: &[Tensor],
    y0: &Tensor,
    grid: &[f64],
    rng: &mut ChaCha8Rng,
    spec: SolverSpec,
) -> f64 {
    let weights: Vec<Vec<f64>> = grid
        .iter()
        .map(|_| (0..y0.len()).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let disc = weighted_grads(
        f,
        theta,
        y0,
        grid,
        &weights,
        &spec.with_gradient_mode(GradientMode::Discretize),
    );
    let adj = weighted_grads(
        f,
        theta,
        y0,
        grid,
        &weights,
        &spec.with_gradient_mode(GradientMode::Adjoint),
    );
    relative_gap(&adj, &disc)
}

fn adjoint() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let grid = [0.0, 0.3, 0.9, 1.6, 2.0];
    let spec = SolverSpec::new(Method::Rk4, 0.05);

    let mut linear: f64 = 0.0;
    for _ in 0..5 {
        let a: Vec<f64> = (0..9).map(|_| rng.random_range(-0.6..0.6)).collect();
        let y0 = Tensor::vector((0..3).map(|_| rng.random_range(-1.0..1.0)).collect());
        let theta = [Tensor::matrix(3, 3, a).expect("3x3")];
        linear = linear.max(mode_gap(&LinearOde, &theta, &y0, &grid, &mut rng, spec));
    }

    let (d, h) = (2, 3);
    let dynamics = GrudDynamics { dim: d, hidden: h };
    let mut grud: f64 = 0.0;
    for seed in 0..5 {
        let model = Model::new(ModelSpec::new(ModelKind::OdeGrud, d, h), vec![0.0; d], seed).expect("model");
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let cell = CellVars::bind(&bound, "cell").expect("cell");
        let theta: Vec<Tensor> = cell.to_vec().into_iter().map(|v| g.value(v).clone()).collect();
        let mut y0: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
        y0.extend((0..d).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }));
        y0.extend((0..h).map(|_| rng.random_range(-0.9..0.9)));
        let y0 = Tensor::vector(y0);
        grud = grud.max(mode_gap(
            &dynamics,
            &theta,
            &y0,
            &grid,
            &mut rng,
            SolverSpec::new(Method::Rk4, 0.25),
        ));
    }
    Verdict::new(
        linear <= 1e-5 && grud <= 1e-3,
        format!("max relative gap {linear:.2e} linear (≤ 1e-5), {grud:.2e} ode_grud dynamics (≤ 1e-3)"),
    )
}

/// Random series on a dyadic grid with small dyadic values, so every sum the
/// implementations form is exact in any order.
fn dyadic_series(rng: &mut ChaCha8Rng, dim: usize) -> Series {
    let len = rng.random_range(1..=8);
    let mut t = rng.random_range(0..16) as f64 * 0.25;
    let (mut times, mut values, mut mask) = (vec![], vec![], vec![]);
    for _ in 0..len {
        times.push(t);
        t += rng.random_range(0..12) as f64 * 0.125;
        for _ in 0..dim {
            let observed = rng.random_bool(0.5);
            mask.push(if observed { 1.0 } else { 0.0 });
            values.push(if observed {
                rng.random_range(-32..=32) as f64 / 8.0
            } else {
                0.0
            });
        }
    }
    Series::new("s", dim, times, values, mask, 0).expect("valid series")
}

fn last_observed(s: &Series, d: usize, before: usize) -> Option<usize> {
    (0..before).rev().find(|&j| s.mask_row(j)[d] == 1.0)
}

fn brute_intervals(s: &Series) -> Vec<f64> {
    let mut out = Vec::new();
    for t in 0..s.len() {
        for d in 0..s.dim() {
            let since = last_observed(s, d, t).unwrap_or(0);
            out.push(s.times[t] - s.times[since]);
        }
    }
    out
}

fn brute_means(batch: &[Series], dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|d| {
            let seen: Vec<f64> = batch
                .iter()
                .flat_map(|s| {
                    (0..s.len())
                        .filter(move |&t| s.mask_row(t)[d] == 1.0)
                        .map(move |t| s.value_row(t)[d])
                })
                .collect();
            if seen.is_empty() {
                0.0
            } else {
                seen.iter().sum::<f64>() / seen.len() as f64
            }
        })
        .collect()
}

#[allow(clippy::needless_range_loop)]
fn brute_impute(s: &Series, means: &[f64], forward: bool) -> Vec<f64> {
    let mut out = Vec::new();
    for t in 0..s.len() {
        for d in 0..s.dim() {
            let source = if forward {
                last_observed(s, d, t + 1)
            } else {
                (s.mask_row(t)[d] == 1.0).then_some(t)
            };
            out.push(source.map_or(means[d], |j| s.value_row(j)[d]));
        }
    }
    out
}

fn missingness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = Vec::new();
    let instances = 1000;
    for i in 0..instances {
        let dim = rng.random_range(1..=4);
        let n = rng.random_range(1..=4);
        let batch: Vec<Series> = (0..n).map(|_| dyadic_series(&mut rng, dim)).collect();
        let means = fit_means(&batch).expect("means").means;
        if means != brute_means(&batch, dim) {
            mismatches.push(format!("fit_means #{i}"));
        }
        for s in &batch {
            if compute_intervals(&s.times, &s.mask, dim).expect("intervals") != brute_intervals(s) {
                mismatches.push(format!("compute_intervals #{i}"));
            }
            if impute_mean(s, &means) != brute_impute(s, &means, false) {
                mismatches.push(format!("impute_mean #{i}"));
            }
            if impute_forward(s, &means) != brute_impute(s, &means, true) {
                mismatches.push(format!("impute_forward #{i}"));
            }
        }
    }
    let detail = if mismatches.is_empty() {
        format!("{instances} random instances, all four functions bit-identical to brute force")
    } else {
        format!("{} mismatches, first {}", mismatches.len(), mismatches[0])
    };
    Verdict::new(mismatches.is_empty(), detail)
}

fn reduction() -> Verdict {
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (d, h, len) = (3, 5, rng.random_range(1..=7));
        let rows: Vec<Vec<f64>> = (0..len)
            .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let times: Vec<f64> = (0..len).map(|t| t as f64).collect();
        let s = Series::new("full", d, times, rows.concat(), vec![1.0; len * d], 1).expect("series");
        let masks = vec![vec![1.0; d]; len];
        for kind in [
            ModelKind::Grud,
            ModelKind::OdeRnn,
            ModelKind::OdeGrud,
            ModelKind::ExtOdeGrud,
        ] {
            let mut spec = ModelSpec::new(kind, d, h);
            // unit gaps, one euler step each, and a horizon that applies the
            // last observation's update
            spec.solver = SolverSpec::new(Method::Euler, 1.0);
            spec.readout_horizon = 1.0;
            let mut model = Model::new(spec, vec![0.1, -0.2, 0.3], seed).expect("model");
            for prefix in ["decay", "fl", "dyn"] {
                model.params.zero_prefix(prefix);
            }
            let expected = reference_logit(&model.params, h, &rows, Some(&masks));
            worst = worst.max((model.logit(&s).expect("logit") - expected).abs());
        }
    }
    Verdict::new(
        worst <= 1e-10,
        format!("max |logit − masked GRU| = {worst:.2e} over 5 series × 4 models"),
    )
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Ordering {
    verdict: Verdict,
    gammas: GammaStats,
    runs: usize,
}

fn ordering() -> Ordering {
    let kinds = [ModelKind::ExtOdeGrud, ModelKind::OdeGrud, ModelKind::Gru];
    let mut aucs = vec![Vec::new(); kinds.len()];
    let mut gammas = GammaStats::default();
    let mut runs = 0;
    for seed in SEEDS {
        let data = SyntheticSpec {
            seed,
            ..SyntheticSpec::preset("informative").expect("preset")
        };
        assert_eq!((data.n_series, data.dim), (2000, 4));
        assert!(
            matches!(data.missingness, Missingness::Informative { negative, positive } if negative == 0.2 && positive == 0.7)
        );
        let batch = generate_synthetic(&data).expect("synthetic");
        let cfg = TrainConfig {
            epochs: 8,
            patience: 3,
            seed,
            ..TrainConfig::default()
        };
        for (k, &kind) in kinds.iter().enumerate() {
            let options = ModelOptions {
                kind,
                hidden_dim: 8,
                imputation: Imputation::Mean,
                method: Method::Rk4,
                step_size: Some(0.5),
                ..ModelOptions::default()
            };
            let start = Instant::now();
            let out = run(&batch, &options, &cfg, |_| {}).expect("training run");
            let auc = out.summary.test_auc.expect("both classes in test split");
            println!(
                "  seed {seed} {kind:<13} test AUC {auc:.4} ± {:.4} best epoch {} ({:.0}s)",
                out.summary.test_auc_std.unwrap_or(f64::NAN),
                out.summary.best_epoch,
                start.elapsed().as_secs_f64()
            );
            aucs[k].push(auc);
            gammas.merge(&out.gammas);
            runs += 1;
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ext, ode, gru) = (mean(&aucs[0]), mean(&aucs[1]), mean(&aucs[2]));
    let checks = [
        (ext >= ode, format!("ext {ext:.4} ≥ ode_grud {ode:.4}")),
        (ode >= 0.85, format!("ode_grud {ode:.4} ≥ 0.85")),
        (
            ext - gru >= 0.05,
            format!("ext − gru {:.4} ≥ 0.05 (gru {gru:.4})", ext - gru),
        ),
    ];
    let passed = checks.iter().all(|c| c.0);
    let detail = checks
        .iter()
        .map(|(ok, text)| format!("{text} {}", if *ok { "ok" } else { "MISSED" }))
        .collect::<Vec<_>>()
        .join("; ");
    Ordering {
        verdict: Verdict::new(passed, format!("mean test AUC over 5 seeds: {detail}")),
        gammas,
        runs,
    }
}

fn main() -> ExitCode {
    let mut results = Vec::new();
    let mut timed = |n: usize, title: &str, f: &mut dyn FnMut() -> Verdict| {
        let start = Instant::now();
        let v = f();
        report(n, title, &v, start.elapsed().as_secs_f64());
        results.push((n, v.passed));
    };
    timed(2, "gradient correctness", &mut gradients);
    timed(3, "solver convergence", &mut solver);
    timed(4, "adjoint/discretize agreement", &mut adjoint);
    timed(5, "missingness oracles", &mut missingness);
    timed(6, "reduction to masked GRU", &mut reduction);

    let start = Instant::now();
    let ord = ordering();
    let secs = start.elapsed().as_secs_f64();
    let mut v7 = ord.verdict;
    if secs > 1200.0 {
        v7.passed = false;
        v7.detail.push_str(&format!("; over the 20 minute budget ({secs:.0}s)"));
    }
    report(7, "ordering on informative synthetic data", &v7, secs);
    results.push((7, v7.passed));

    let g = ord.gammas;
    let v8 = Verdict::new(
        g.count > 0 && g.in_unit_interval(),
        format!(
            "{} decay values over {} runs, min {:e}, max {}",
            g.count, ord.runs, g.min, g.max
        ),
    );
    report(8, "decay range", &v8, 0.0);
    results.push((8, v8.passed));

    let rest = results.iter().all(|r| r.1);
    let v1 = Verdict::new(rest, "desk-scale substitute: passes exactly when criteria 2-8 pass");
    report(1, "full-scale results", &v1, 0.0);

    let failed: Vec<String> = results.iter().filter(|r| !r.1).map(|r| r.0.to_string()).collect();
    if failed.is_empty() {
        println!("acceptance: all 8 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: criteria {} failed (and therefore 1)", failed.join(", "));
        ExitCode::FAILURE
    }
}
