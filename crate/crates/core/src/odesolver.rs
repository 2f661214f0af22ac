//! Fixed-step initial value problem solvers over a time grid.
//!
//! Two ways to differentiate a solution are offered. In
//! [`GradientMode::Discretize`] every internal step is recorded on the
//! caller's [`Graph`], so backpropagation is exact for the computed
//! trajectory. In [`GradientMode::Adjoint`] each grid interval becomes a single
//! opaque node; its backward pass integrates the adjoint system
//! `da/dt = −aᵀ ∂f/∂y`, `da_θ/dt = −aᵀ ∂f/∂θ` from the interval end back to
//! its start, re-integrating `y` alongside, and keeps no per-step graph.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Right-hand side `dy/dt = f(y, t; θ)`.
///
/// `params` are the graph nodes of `θ` in the order the function expects.
/// The output must have the same shape as `y`.
pub trait OdeFunc: Send + Sync {
    fn eval(&self, g: &mut Graph, y: Var, t: f64, params: &[Var]) -> Result<Var>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Euler,
    Rk4,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    #[default]
    Discretize,
    Adjoint,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Method::Euler),
            "rk4" => Ok(Method::Rk4),
            _ => Err(Error::Validation(format!("unknown solver `{s}`"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Euler => "euler",
            Method::Rk4 => "rk4",
        })
    }
}

impl FromStr for GradientMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "discretize" => Ok(GradientMode::Discretize),
            "adjoint" => Ok(GradientMode::Adjoint),
            _ => Err(Error::Validation(format!("unknown gradient mode `{s}`"))),
        }
    }
}

impl fmt::Display for GradientMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GradientMode::Discretize => "discretize",
            GradientMode::Adjoint => "adjoint",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverSpec {
    pub method: Method,
    pub step_size: f64,
    pub gradient_mode: GradientMode,
}

impl SolverSpec {
    pub fn new(method: Method, step_size: f64) -> Self {
        Self {
            method,
            step_size,
            gradient_mode: GradientMode::Discretize,
        }
    }

    pub fn with_gradient_mode(mut self, mode: GradientMode) -> Self {
        self.gradient_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Validation(format!(
                "step size must be positive, got {}",
                self.step_size
            )));
        }
        Ok(())
    }
}

/// Number of uniform internal steps covering `dt`: `⌈dt / step⌉`, with a
/// relative slack of 1e-9 so that e.g. `1.0 / 0.1` yields 10 rather than 11.
pub fn steps_for(dt: f64, step: f64) -> usize {
    ((dt / step) * (1.0 - 1e-9)).ceil().max(1.0) as usize
}

fn check_grid(t_grid: &[f64]) -> Result<()> {
    if t_grid.is_empty() {
        return Err(Error::Validation("empty time grid".into()));
    }
    if let Some(w) = t_grid.windows(2).find(|w| !(w[1] > w[0])) {
        return Err(Error::Validation(format!(
            "time grid must be strictly increasing ({} then {})",
            w[0], w[1]
        )));
    }
    Ok(())
}

fn ensure_finite(g: &Graph, y: Var, t: f64) -> Result<()> {
    if g.data(y).iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence { time: t })
    }
}

/// `y + c·k` on the graph.
fn axpy(g: &mut Graph, y: Var, c: f64, k: Var) -> Result<Var> {
    let ck = g.scale(k, c);
    g.add(y, ck)
}

fn step_graph<F: OdeFunc + ?Sized>(
    g: &mut Graph,
    f: &F,
    params: &[Var],
    method: Method,
    y: Var,
    t: f64,
    h: f64,
) -> Result<Var> {
    match method {
        Method::Euler => {
            let k = f.eval(g, y, t, params)?;
            axpy(g, y, h, k)
        }
        Method::Rk4 => {
            let k1 = f.eval(g, y, t, params)?;
            let y2 = axpy(g, y, 0.5 * h, k1)?;
            let k2 = f.eval(g, y2, t + 0.5 * h, params)?;
            let y3 = axpy(g, y, 0.5 * h, k2)?;
            let k3 = f.eval(g, y3, t + 0.5 * h, params)?;
            let y4 = axpy(g, y, h, k3)?;
            let k4 = f.eval(g, y4, t + h, params)?;
            let k23 = g.add(k2, k3)?;
            let k14 = g.add(k1, k4)?;
            let a = axpy(g, y, h / 6.0, k14)?;
            axpy(g, a, h / 3.0, k23)
        }
    }
}

/// Integrates `f` from `y0` across `t_grid`, returning one state per grid time.
///
/// The first returned node is `y0` itself. Interval `[tᵢ, tᵢ₊₁]` is covered by
/// [`steps_for`] uniform steps.
pub fn solve<F: OdeFunc + Clone + 'static>(
    g: &mut Graph,
    f: &F,
    params: &[Var],
    y0: Var,
    t_grid: &[f64],
    spec: &SolverSpec,
) -> Result<Vec<Var>> {
    check_grid(t_grid)?;
    spec.validate()?;
    let mut out = Vec::with_capacity(t_grid.len());
    out.push(y0);
    let mut y = y0;
    for w in t_grid.windows(2) {
        y = match spec.gradient_mode {
            GradientMode::Discretize => solve_interval_graph(g, f, params, y, w[0], w[1], spec)?,
            GradientMode::Adjoint => solve_interval_adjoint(g, f, params, y, w[0], w[1], spec)?,
        };
        out.push(y);
    }
    Ok(out)
}

fn solve_interval_graph<F: OdeFunc + ?Sized>(
    g: &mut Graph,
    f: &F,
    params: &[Var],
    y0: Var,
    t0: f64,
    t1: f64,
    spec: &SolverSpec,
) -> Result<Var> {
    let n = steps_for(t1 - t0, spec.step_size);
    let h = (t1 - t0) / n as f64;
    let mut y = y0;
    for i in 0..n {
        let t = t0 + i as f64 * h;
        y = step_graph(g, f, params, spec.method, y, t, h)?;
        ensure_finite(g, y, t + h)?;
    }
    Ok(y)
}

fn solve_interval_adjoint<F: OdeFunc + Clone + 'static>(
    g: &mut Graph,
    f: &F,
    params: &[Var],
    y0: Var,
    t0: f64,
    t1: f64,
    spec: &SolverSpec,
) -> Result<Var> {
    let theta: Vec<Tensor> = params.iter().map(|&p| g.value(p).clone()).collect();
    let y0_value = g.value(y0).clone();
    let y1 = integrate_plain(f, &y0_value, &theta, t0, t1, spec)?;
    let mut inputs = Vec::with_capacity(params.len() + 1);
    inputs.push(y0);
    inputs.extend_from_slice(params);
    let f = f.clone();
    let spec = *spec;
    let y1_saved = y1.clone();
    Ok(g.custom(inputs, y1, move |upstream| {
        let (a0, a_theta) = adjoint_interval(&f, &y1_saved, &theta, t0, t1, &spec, upstream)?;
        let mut grads = Vec::with_capacity(a_theta.len() + 1);
        grads.push(Some(a0));
        grads.extend(a_theta.into_iter().map(Some));
        Ok(grads)
    }))
}

/// Evaluates `f` on plain values.
pub fn eval_plain<F: OdeFunc + ?Sized>(f: &F, y: &Tensor, t: f64, theta: &[Tensor]) -> Result<Tensor> {
    let mut g = Graph::new();
    let yv = g.constant(y.clone());
    let ps: Vec<Var> = theta.iter().map(|p| g.constant(p.clone())).collect();
    let out = f.eval(&mut g, yv, t, &ps)?;
    Ok(g.value(out).clone())
}

/// `f(y)`, `aᵀ ∂f/∂y` and `aᵀ ∂f/∂θ`.
type Vjp = (Vec<f64>, Vec<f64>, Vec<Vec<f64>>);

/// Value of `f` together with `aᵀ ∂f/∂y` and `aᵀ ∂f/∂θ`.
fn vjp<F: OdeFunc + ?Sized>(f: &F, y: &[f64], shape: &[usize], t: f64, theta: &[Tensor], a: &[f64]) -> Result<Vjp> {
    let mut g = Graph::new();
    let yv = g.param(Tensor::new(shape.to_vec(), y.to_vec())?);
    let ps: Vec<Var> = theta.iter().map(|p| g.param(p.clone())).collect();
    let out = f.eval(&mut g, yv, t, &ps)?;
    let fval = g.data(out).to_vec();
    g.backward_with_seed(out, a)?;
    let ay = g.grad(yv).map_or_else(|| vec![0.0; y.len()], <[f64]>::to_vec);
    let at = ps
        .iter()
        .zip(theta)
        .map(|(&p, th)| g.grad(p).map_or_else(|| vec![0.0; th.len()], <[f64]>::to_vec))
        .collect();
    Ok((fval, ay, at))
}

fn integrate_plain<F: OdeFunc + ?Sized>(
    f: &F,
    y0: &Tensor,
    theta: &[Tensor],
    t0: f64,
    t1: f64,
    spec: &SolverSpec,
) -> Result<Tensor> {
    let n = steps_for(t1 - t0, spec.step_size);
    let h = (t1 - t0) / n as f64;
    let mut y = y0.clone();
    for i in 0..n {
        let t = t0 + i as f64 * h;
        let mut g = Graph::new();
        let ys = g.constant(y);
        let ps: Vec<Var> = theta.iter().map(|p| g.constant(p.clone())).collect();
        let next = step_graph(&mut g, f, &ps, spec.method, ys, t, h)?;
        ensure_finite(&g, next, t + h)?;
        y = g.value(next).clone();
    }
    Ok(y)
}

/// Augmented adjoint state `[y, a, a_θ]` as flat vectors.
struct Augmented {
    y: Vec<f64>,
    a: Vec<f64>,
    at: Vec<Vec<f64>>,
}

impl Augmented {
    fn plus(&self, c: f64, d: &Augmented) -> Augmented {
        let lin = |x: &[f64], dx: &[f64]| x.iter().zip(dx).map(|(x, dx)| x + c * dx).collect();
        Augmented {
            y: lin(&self.y, &d.y),
            a: lin(&self.a, &d.a),
            at: self.at.iter().zip(&d.at).map(|(x, dx)| lin(x, dx)).collect(),
        }
    }
}

/// Augmented dynamics in forward time.
fn augmented_rhs<F: OdeFunc + ?Sized>(
    f: &F,
    z: &Augmented,
    shape: &[usize],
    t: f64,
    theta: &[Tensor],
) -> Result<Augmented> {
    let (fy, ay, at) = vjp(f, &z.y, shape, t, theta, &z.a)?;
    Ok(Augmented {
        y: fy,
        a: ay.into_iter().map(|v| -v).collect(),
        at: at.into_iter().map(|v| v.into_iter().map(|x| -x).collect()).collect(),
    })
}

/// Integrates the adjoint system over `[t0, t1]` backwards from `y(t1)`.
/// Returns `(∂L/∂y(t0), ∂L/∂θ)` given `a(t1) = ∂L/∂y(t1)`.
fn adjoint_interval<F: OdeFunc + ?Sized>(
    f: &F,
    y1: &Tensor,
    theta: &[Tensor],
    t0: f64,
    t1: f64,
    spec: &SolverSpec,
    a1: &[f64],
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = steps_for(t1 - t0, spec.step_size);
    let h = -(t1 - t0) / n as f64;
    let shape = y1.shape();
    let mut z = Augmented {
        y: y1.data().to_vec(),
        a: a1.to_vec(),
        at: theta.iter().map(|p| vec![0.0; p.len()]).collect(),
    };
    for i in 0..n {
        let t = t1 + i as f64 * h;
        z = match spec.method {
            Method::Euler => {
                let k = augmented_rhs(f, &z, shape, t, theta)?;
                z.plus(h, &k)
            }
            Method::Rk4 => {
                let k1 = augmented_rhs(f, &z, shape, t, theta)?;
                let k2 = augmented_rhs(f, &z.plus(0.5 * h, &k1), shape, t + 0.5 * h, theta)?;
                let k3 = augmented_rhs(f, &z.plus(0.5 * h, &k2), shape, t + 0.5 * h, theta)?;
                let k4 = augmented_rhs(f, &z.plus(h, &k3), shape, t + h, theta)?;
                z.plus(h / 6.0, &k1)
                    .plus(h / 3.0, &k2)
                    .plus(h / 3.0, &k3)
                    .plus(h / 6.0, &k4)
            }
        };
        if z.a.iter().chain(&z.y).any(|v| !v.is_finite()) {
            return Err(Error::Divergence { time: t + h });
        }
    }
    Ok((z.a, z.at))
}

/// Gradients of a loss that depends on the solution at every grid time.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjointGradients {
    pub y0: Vec<f64>,
    pub params: Vec<Vec<f64>>,
}

/// Adjoint-method gradients given `∂L/∂y(tᵢ)` for every grid time `tᵢ`
/// (including the initial time).
pub fn grad_adjoint<F: OdeFunc + ?Sized>(
    f: &F,
    y0: &Tensor,
    theta: &[Tensor],
    t_grid: &[f64],
    spec: &SolverSpec,
    loss_grads: &[Vec<f64>],
) -> Result<AdjointGradients> {
    check_grid(t_grid)?;
    spec.validate()?;
    if loss_grads.len() != t_grid.len() {
        return Err(Error::Contract(format!(
            "{} loss gradients for a grid of {} times",
            loss_grads.len(),
            t_grid.len()
        )));
    }
    if let Some(bad) = loss_grads.iter().find(|l| l.len() != y0.len()) {
        return Err(Error::dims("grad_adjoint", y0.shape(), &[bad.len()]));
    }
    let mut states = vec![y0.clone()];
    for w in t_grid.windows(2) {
        let next = integrate_plain(f, states.last().unwrap(), theta, w[0], w[1], spec)?;
        states.push(next);
    }
    let last = t_grid.len() - 1;
    let mut a = loss_grads[last].clone();
    let mut total: Vec<Vec<f64>> = theta.iter().map(|p| vec![0.0; p.len()]).collect();
    for i in (1..=last).rev() {
        let (a_prev, at) = adjoint_interval(f, &states[i], theta, t_grid[i - 1], t_grid[i], spec, &a)?;
        for (acc, g) in total.iter_mut().zip(at) {
            acc.iter_mut().zip(g).for_each(|(x, y)| *x += y);
        }
        a = a_prev.iter().zip(&loss_grads[i - 1]).map(|(x, y)| x + y).collect();
    }
    Ok(AdjointGradients { y0: a, params: total })
}

/// Linear dynamics `dy/dt = A y` with `A` as the single parameter.
#[derive(Clone, Copy, Debug, Default)]
pub struct LinearOde;

impl OdeFunc for LinearOde {
    fn eval(&self, g: &mut Graph, y: Var, _t: f64, params: &[Var]) -> Result<Var> {
        g.matmul(params[0], y)
    }
}

/// `dy/dt = λ y` with known solution, used to measure convergence order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TestProblem {
    pub rate: f64,
    pub y0: f64,
    pub t_end: f64,
}

impl TestProblem {
    pub fn growth() -> Self {
        Self {
            rate: 1.0,
            y0: 1.0,
            t_end: 1.0,
        }
    }

    pub fn decay() -> Self {
        Self {
            rate: -1.0,
            y0: 1.0,
            t_end: 1.0,
        }
    }

    pub fn exact(&self) -> f64 {
        self.y0 * (self.rate * self.t_end).exp()
    }

    /// Numerical solution at `t_end`.
    pub fn solve(&self, method: Method, step: f64) -> Result<f64> {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(1, 1, vec![self.rate])?);
        let y0 = g.vector(&[self.y0]);
        let out = solve(
            &mut g,
            &LinearOde,
            &[a],
            y0,
            &[0.0, self.t_end],
            &SolverSpec::new(method, step),
        )?;
        Ok(g.data(*out.last().unwrap())[0])
    }
}

/// Steps at which convergence order is measured.
pub const ORDER_STEPS: [f64; 4] = [0.1, 0.05, 0.025, 0.0125];

/// Least-squares slope of `ln(error)` against `ln(step)` over [`ORDER_STEPS`].
pub fn convergence_order(method: Method, problem: &TestProblem) -> Result<f64> {
    let exact = problem.exact();
    let mut pts = Vec::with_capacity(ORDER_STEPS.len());
    for &h in &ORDER_STEPS {
        let err = (problem.solve(method, h)? - exact).abs();
        pts.push((h.ln(), err.ln()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(sxy / sxx)
}
