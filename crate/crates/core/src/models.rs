//! Sequence classifiers over irregularly sampled series.
//!
//! Every model maps one [`Series`] to a single logit through a final affine
//! head on the hidden state:
//!
//! * [`ModelKind::Gru`]: plain GRU over imputed inputs, blind to the mask.
//! * [`ModelKind::Grud`]: GRU-D with input and hidden decay.
//! * [`ModelKind::OdeRnn`]: hidden state follows a learned ODE between
//!   observations and is updated by a masked GRU cell at each observation.
//! * [`ModelKind::OdeGrud`]: the state `[x; m; h]` is integrated with the GRU-D
//!   derivative between observations; decayed inputs and hidden state are
//!   injected at each observation time.
//! * [`ModelKind::ExtOdeGrud`]: as `OdeGrud`, but decay pre-activations are
//!   themselves integrated by two filter-linear ODEs driven by the elapsed time
//!   since each variable's last observation.
//!
//! Continuous models integrate interval `[tᵢ, tᵢ₊₁]` with observation `i`
//! held in the state. After the last observation the hidden state is carried
//! forward for [`ModelSpec::readout_horizon`] time units before readout.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cells::{
    gru_step, grud_cell, grud_step, impute_with_decay, init_cell, init_decay, CellShape, CellState, CellVars,
    DecayVars, GrudDynamics,
};
use crate::error::{Error, Result};
use crate::missingness::{concat_simple, decay_from_preactivation, impute_forward, impute_mean, Series};
use crate::odesolver::{solve, Method, OdeFunc, SolverSpec};
use crate::params::{Bound, ParamGroup, ParamSet};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Gru,
    Grud,
    OdeRnn,
    OdeGrud,
    ExtOdeGrud,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Gru,
        ModelKind::Grud,
        ModelKind::OdeRnn,
        ModelKind::OdeGrud,
        ModelKind::ExtOdeGrud,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Gru => "gru",
            ModelKind::Grud => "grud",
            ModelKind::OdeRnn => "ode_rnn",
            ModelKind::OdeGrud => "ode_grud",
            ModelKind::ExtOdeGrud => "ext_ode_grud",
        }
    }

    pub fn uses_solver(self) -> bool {
        matches!(self, ModelKind::OdeRnn | ModelKind::OdeGrud | ModelKind::ExtOdeGrud)
    }

    pub fn has_decay(self) -> bool {
        matches!(self, ModelKind::Grud | ModelKind::OdeGrud | ModelKind::ExtOdeGrud)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown model kind `{s}`")))
    }
}

/// Input construction for models that do not learn their own imputation
/// (`gru`, `ode_rnn`). Decay-based models always impute through γ.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Imputation {
    #[default]
    Mean,
    Forward,
    Simple,
}

impl FromStr for Imputation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Imputation::Mean),
            "forward" => Ok(Imputation::Forward),
            "simple" => Ok(Imputation::Simple),
            _ => Err(Error::Validation(format!("unknown imputation `{s}`"))),
        }
    }
}

impl fmt::Display for Imputation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Imputation::Mean => "mean",
            Imputation::Forward => "forward",
            Imputation::Simple => "simple",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub imputation: Imputation,
    pub solver: SolverSpec,
    /// Time the hidden state keeps evolving after the last observation.
    pub readout_horizon: f64,
    /// Use `x̂ = m⊙x + (γ⊙x_last + (1−γ))⊙x̃` in the extended model.
    pub literal_input_decay: bool,
    /// Learning-rate multiplier of the filter-linear decay parameters.
    pub filter_lr_multiplier: f64,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            kind,
            input_dim,
            hidden_dim,
            imputation: Imputation::Mean,
            solver: SolverSpec::new(Method::Rk4, 0.25),
            readout_horizon: 0.0,
            literal_input_decay: false,
            filter_lr_multiplier: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Validation("input and hidden dimensions must be positive".into()));
        }
        if !(self.readout_horizon >= 0.0 && self.readout_horizon.is_finite()) {
            return Err(Error::Validation("readout horizon must be non-negative".into()));
        }
        if !(self.filter_lr_multiplier >= 0.0) {
            return Err(Error::Validation(
                "filter learning-rate multiplier must be non-negative".into(),
            ));
        }
        self.solver.validate()
    }

    /// Width of the vector fed to the recurrent cell.
    pub fn cell_input_dim(&self) -> usize {
        match (self.kind, self.imputation) {
            (ModelKind::Gru | ModelKind::OdeRnn, Imputation::Simple) => 3 * self.input_dim,
            _ => self.input_dim,
        }
    }
}

/// Range of every decay rate computed during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GammaStats {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl Default for GammaStats {
    fn default() -> Self {
        Self {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            count: 0,
        }
    }
}

impl GammaStats {
    pub fn record(&mut self, values: &[f64]) {
        for &v in values {
            self.min = self.min.min(v);
            self.max = self.max.max(v);
        }
        self.count += values.len();
    }

    pub fn merge(&mut self, other: &GammaStats) {
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        self.count += other.count;
    }

    /// True when every recorded rate lies in `(0, 1]`.
    pub fn in_unit_interval(&self) -> bool {
        self.count == 0 || (self.min > 0.0 && self.max <= 1.0)
    }
}

/// Output of one forward pass over a single series.
pub struct Forward {
    pub logit: Var,
    pub gammas: GammaStats,
    /// Cell input actually consumed at each observation.
    pub inputs: Vec<Vec<f64>>,
    /// Input and hidden decay applied at each observation (decay models only).
    pub decays: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Per-pass bookkeeping shared by the model variants.
#[derive(Default)]
struct Trace {
    gammas: GammaStats,
    inputs: Vec<Vec<f64>>,
    decays: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Trace {
    fn decay(&mut self, g: &Graph, gamma_x: Var, gamma_h: Var) {
        let (x, h) = (g.data(gamma_x), g.data(gamma_h));
        self.gammas.record(x);
        self.gammas.record(h);
        self.decays.push((x.to_vec(), h.to_vec()));
    }
}

/// `dh/dt = W₂ tanh(W₁ h + b₁) + b₂`; parameters `[W₁, b₁, W₂, b₂]`.
#[derive(Clone, Copy, Debug, Default)]
pub struct HiddenDynamics;

impl OdeFunc for HiddenDynamics {
    fn eval(&self, g: &mut Graph, h: Var, _t: f64, params: &[Var]) -> Result<Var> {
        let a = g.matmul(params[0], h)?;
        let a = g.add(a, params[1])?;
        let a = g.tanh(a);
        let out = g.matmul(params[2], a)?;
        g.add(out, params[3])
    }
}

/// Filter-linear derivative of a decay pre-activation:
/// `dg/dt = W δ(t) + b` with `δ(t) = δ₀ + (t − t₀)`.
/// A 1-D `W` acts per variable; a 2-D `W` maps onto the hidden dimension.
/// Parameters `[W, b]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterLinear {
    pub delta_start: Vec<f64>,
    pub t_start: f64,
}

impl OdeFunc for FilterLinear {
    fn eval(&self, g: &mut Graph, _y: Var, t: f64, params: &[Var]) -> Result<Var> {
        let elapsed = t - self.t_start;
        let delta: Vec<f64> = self.delta_start.iter().map(|d| d + elapsed).collect();
        let dv = g.vector(&delta);
        let wd = if g.shape(params[0]).len() == 1 {
            g.mul(params[0], dv)?
        } else {
            g.matmul(params[0], dv)?
        };
        g.add(wd, params[1])
    }
}

/// Model parameters together with the spec and the imputation means.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamSet,
    /// Per-variable fallback `x̃`, in the model's (normalized) input space.
    pub means: Vec<f64>,
}

impl Model {
    /// Gate, dynamics and head weights uniform in ±1/√H, decay weights
    /// non-negative, biases zero.
    pub fn new(spec: ModelSpec, means: Vec<f64>, seed: u64) -> Result<Self> {
        spec.validate()?;
        if means.len() != spec.input_dim {
            return Err(Error::dims("model means", &[spec.input_dim], &[means.len()]));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h) = (spec.input_dim, spec.hidden_dim);
        let bound = 1.0 / (h as f64).sqrt();
        let mut params = ParamSet::new();
        let mask = if spec.kind == ModelKind::Gru { 0 } else { d };
        init_cell(
            &mut params,
            "cell",
            CellShape {
                input: spec.cell_input_dim(),
                mask,
                hidden: h,
            },
            &mut rng,
        );
        match spec.kind {
            ModelKind::Grud | ModelKind::OdeGrud => init_decay(&mut params, "decay", d, h, ParamGroup::Main, &mut rng),
            ModelKind::ExtOdeGrud => init_decay(&mut params, "fl", d, h, ParamGroup::FilterLinear, &mut rng),
            ModelKind::OdeRnn => {
                params.insert_uniform("dyn.w1", ParamGroup::Main, vec![h, h], bound, &mut rng);
                params.insert("dyn.b1", ParamGroup::Main, Tensor::zeros(vec![h]));
                params.insert_uniform("dyn.w2", ParamGroup::Main, vec![h, h], bound, &mut rng);
                params.insert("dyn.b2", ParamGroup::Main, Tensor::zeros(vec![h]));
            }
            ModelKind::Gru => {}
        }
        params.insert_uniform("head.w", ParamGroup::Main, vec![1, h], bound, &mut rng);
        params.insert("head.b", ParamGroup::Main, Tensor::zeros(vec![1]));
        Ok(Self { spec, params, means })
    }

    pub fn bind<'a>(&'a self, g: &mut Graph) -> Bound<'a> {
        self.params.bind(g)
    }

    /// Records the forward pass for one series on `g`.
    pub fn forward(&self, g: &mut Graph, bound: &Bound<'_>, series: &Series) -> Result<Forward> {
        if series.is_empty() {
            return Err(Error::Validation(format!("series `{}` has no observations", series.id)));
        }
        if series.dim() != self.spec.input_dim {
            return Err(Error::dims("model input", &[self.spec.input_dim], &[series.dim()]));
        }
        let cell = CellVars::bind(bound, "cell")?;
        let (h, trace) = match self.spec.kind {
            ModelKind::Gru => self.run_gru(g, &cell, series)?,
            ModelKind::Grud => self.run_grud(g, bound, &cell, series)?,
            ModelKind::OdeRnn => self.run_ode_rnn(g, bound, &cell, series)?,
            ModelKind::OdeGrud | ModelKind::ExtOdeGrud => self.run_ode_grud(g, bound, &cell, series)?,
        };
        let w = bound.get("head.w")?;
        let b = bound.get("head.b")?;
        let wh = g.matmul(w, h)?;
        let out = g.add(wh, b)?;
        let logit = g.sum(out);
        Ok(Forward {
            logit,
            gammas: trace.gammas,
            inputs: trace.inputs,
            decays: trace.decays,
        })
    }

    /// Logit of one series without keeping the graph.
    pub fn logit(&self, series: &Series) -> Result<f64> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let out = self.forward(&mut g, &bound, series)?;
        Ok(g.data(out.logit)[0])
    }

    /// Per-step cell inputs for the non-decay models.
    fn baseline_inputs(&self, series: &Series) -> Result<Vec<Vec<f64>>> {
        let d = series.dim();
        let rows = |v: Vec<f64>| v.chunks(d).map(<[f64]>::to_vec).collect::<Vec<_>>();
        Ok(match self.spec.imputation {
            Imputation::Mean => rows(impute_mean(series, &self.means)),
            Imputation::Forward => rows(impute_forward(series, &self.means)),
            Imputation::Simple => {
                let filled = impute_forward(series, &self.means);
                (0..series.len())
                    .map(|t| concat_simple(&filled[t * d..(t + 1) * d], series.mask_row(t), series.delta_row(t)))
                    .collect::<Result<_>>()?
            }
        })
    }

    fn zero_hidden(&self, g: &mut Graph) -> Var {
        g.constant(Tensor::zeros(vec![self.spec.hidden_dim]))
    }

    fn evolve<F: OdeFunc + Clone + 'static>(
        &self,
        g: &mut Graph,
        f: &F,
        params: &[Var],
        y: Var,
        t0: f64,
        t1: f64,
    ) -> Result<Var> {
        if t1 > t0 {
            let out = solve(g, f, params, y, &[t0, t1], &self.spec.solver)?;
            Ok(out[1])
        } else {
            Ok(y)
        }
    }

    fn run_gru(&self, g: &mut Graph, cell: &CellVars, series: &Series) -> Result<(Var, Trace)> {
        let inputs = self.baseline_inputs(series)?;
        let mut h = self.zero_hidden(g);
        for row in &inputs {
            let x = g.vector(row);
            h = gru_step(g, cell, x, h)?;
        }
        Ok((
            h,
            Trace {
                inputs,
                ..Trace::default()
            },
        ))
    }

    fn run_grud(&self, g: &mut Graph, bound: &Bound<'_>, cell: &CellVars, series: &Series) -> Result<(Var, Trace)> {
        let din = DecayVars::bind(bound, "decay.in")?;
        let dh = DecayVars::bind(bound, "decay.hid")?;
        let mut state = CellState::new(g, self.spec.hidden_dim, &self.means);
        let mut trace = Trace::default();
        for t in 0..series.len() {
            let step = grud_step(
                g,
                cell,
                &din,
                &dh,
                series.value_row(t),
                series.mask_row(t),
                series.delta_row(t),
                &self.means,
                &mut state,
            )?;
            trace.decay(g, step.gamma_x, step.gamma_h);
            trace.inputs.push(g.data(step.x_hat).to_vec());
        }
        Ok((state.h, trace))
    }

    fn run_ode_rnn(&self, g: &mut Graph, bound: &Bound<'_>, cell: &CellVars, series: &Series) -> Result<(Var, Trace)> {
        let dyn_params = [
            bound.get("dyn.w1")?,
            bound.get("dyn.b1")?,
            bound.get("dyn.w2")?,
            bound.get("dyn.b2")?,
        ];
        let inputs = self.baseline_inputs(series)?;
        let times = &series.times;
        let mut h = self.zero_hidden(g);
        for (t, row) in inputs.iter().enumerate() {
            if t > 0 {
                h = self.evolve(g, &HiddenDynamics, &dyn_params, h, times[t - 1], times[t])?;
            }
            let x = g.vector(row);
            let m = g.vector(series.mask_row(t));
            h = grud_cell(g, cell, x, h, m)?;
        }
        let last = times[times.len() - 1];
        h = self.evolve(
            g,
            &HiddenDynamics,
            &dyn_params,
            h,
            last,
            last + self.spec.readout_horizon,
        )?;
        Ok((
            h,
            Trace {
                inputs,
                ..Trace::default()
            },
        ))
    }

    fn run_ode_grud(&self, g: &mut Graph, bound: &Bound<'_>, cell: &CellVars, series: &Series) -> Result<(Var, Trace)> {
        let (d, hdim) = (self.spec.input_dim, self.spec.hidden_dim);
        let extended = self.spec.kind == ModelKind::ExtOdeGrud;
        let literal = extended && self.spec.literal_input_decay;
        let dynamics = GrudDynamics { dim: d, hidden: hdim };
        let cell_params = cell.to_vec();
        let (din, dh) = if extended {
            (DecayVars::bind(bound, "fl.in")?, DecayVars::bind(bound, "fl.hid")?)
        } else {
            (
                DecayVars::bind(bound, "decay.in")?,
                DecayVars::bind(bound, "decay.hid")?,
            )
        };

        let times = &series.times;
        let steps = series.len();
        let mut trace = Trace::default();
        let mut last = self.means.clone();
        let mut h = self.zero_hidden(g);
        // Extended model: integrated input-decay pre-activation and the decay
        // rates that apply at the next observation.
        let mut pre_x = g.constant(Tensor::zeros(vec![d]));
        let mut next_gamma: Option<(Var, Var)> = None;

        for t in 0..steps {
            let (x, m, delta) = (series.value_row(t), series.mask_row(t), series.delta_row(t));
            let (gamma_x, gamma_h) = if extended {
                match next_gamma.take() {
                    Some(pair) => pair,
                    None => {
                        let ones_d = g.vector(&vec![1.0; d]);
                        let ones_h = g.vector(&vec![1.0; hdim]);
                        (ones_d, ones_h)
                    }
                }
            } else {
                let dv = g.vector(delta);
                (din.rate(g, dv)?, dh.rate(g, dv)?)
            };
            trace.decay(g, gamma_x, gamma_h);

            let x_hat = impute_with_decay(g, x, m, &last, &self.means, gamma_x, literal)?;
            trace.inputs.push(g.data(x_hat).to_vec());
            for k in 0..d {
                if m[k] == 1.0 {
                    last[k] = x[k];
                }
            }
            let h_hat = g.mul(gamma_h, h)?;
            let mv = g.vector(m);
            let y = g.concat(&[x_hat, mv, h_hat])?;

            let t0 = times[t];
            let t1 = if t + 1 < steps {
                times[t + 1]
            } else {
                t0 + self.spec.readout_horizon
            };
            h = if t1 > t0 {
                let y1 = self.evolve(g, &dynamics, &cell_params, y, t0, t1)?;
                g.slice(y1, 2 * d, hdim)?
            } else {
                h_hat
            };

            if extended && t + 1 < steps {
                // Elapsed time since each variable's last observation, as of t0.
                let delta_after: Vec<f64> = (0..d).map(|k| if m[k] == 1.0 { 0.0 } else { delta[k] }).collect();
                let keep: Vec<f64> = m.iter().map(|mi| 1.0 - mi).collect();
                let keep = g.vector(&keep);
                let reset = g.mul(keep, pre_x)?;
                let fl = FilterLinear {
                    delta_start: delta_after,
                    t_start: t0,
                };
                pre_x = self.evolve(g, &fl, &[din.weight, din.bias], reset, t0, t1)?;
                let zero_h = self.zero_hidden(g);
                let pre_h = self.evolve(g, &fl, &[dh.weight, dh.bias], zero_h, t0, t1)?;
                let gx = decay_from_preactivation(g, pre_x);
                let gh = decay_from_preactivation(g, pre_h);
                next_gamma = Some((gx, gh));
            }
        }
        Ok((h, trace))
    }
}
