//! Gated recurrent cells: a plain GRU and the GRU-D cell with mask terms and
//! trainable decay, plus the GRU-D right-hand side used inside an ODE solver.

use rand::Rng;

use crate::error::{Error, Result};
use crate::missingness::decay_rate;
use crate::odesolver::OdeFunc;
use crate::params::{Bound, ParamGroup, ParamSet};
use crate::tensor::{Graph, Tensor, Var};

/// Dimensions of one cell. `mask == 0` drops the mask-to-hidden terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellShape {
    pub input: usize,
    pub mask: usize,
    pub hidden: usize,
}

const GATES: [&str; 3] = ["r", "z", "h"];

fn gate_names(prefix: &str, gate: &str) -> [String; 4] {
    // The candidate gate uses the unsuffixed W, U, V, b.
    let sfx = if gate == "h" { String::new() } else { format!("_{gate}") };
    [
        format!("{prefix}.w{sfx}"),
        format!("{prefix}.u{sfx}"),
        format!("{prefix}.v{sfx}"),
        format!("{prefix}.b{sfx}"),
    ]
}

/// Adds gate weights (uniform in ±1/√H) and zero biases under `prefix`.
pub fn init_cell<R: Rng>(params: &mut ParamSet, prefix: &str, shape: CellShape, rng: &mut R) {
    let bound = 1.0 / (shape.hidden as f64).sqrt();
    for gate in GATES {
        let [w, u, v, b] = gate_names(prefix, gate);
        params.insert_uniform(w, ParamGroup::Main, vec![shape.hidden, shape.input], bound, rng);
        params.insert_uniform(u, ParamGroup::Main, vec![shape.hidden, shape.hidden], bound, rng);
        if shape.mask > 0 {
            params.insert_uniform(v, ParamGroup::Main, vec![shape.hidden, shape.mask], bound, rng);
        }
        params.insert(b, ParamGroup::Main, Tensor::zeros(vec![shape.hidden]));
    }
}

/// Adds input (diagonal) and hidden (`[H, D]`) decay heads. Weights start
/// uniform in `[0, 1/√D]` and biases at zero: with `δ ≥ 0` a negative weight
/// would sit on the flat side of the rectifier and never receive a gradient.
pub fn init_decay<R: Rng>(
    params: &mut ParamSet,
    prefix: &str,
    dim: usize,
    hidden: usize,
    group: ParamGroup,
    rng: &mut R,
) {
    let bound = 1.0 / (dim as f64).sqrt();
    let mut positive = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(0.0..=bound)).collect() };
    let w_in = positive(dim);
    let w_hid = positive(hidden * dim);
    params.insert(format!("{prefix}.in.w"), group, Tensor::vector(w_in));
    params.insert(format!("{prefix}.in.b"), group, Tensor::zeros(vec![dim]));
    params.insert(
        format!("{prefix}.hid.w"),
        group,
        Tensor::matrix(hidden, dim, w_hid).expect("shape matches data"),
    );
    params.insert(format!("{prefix}.hid.b"), group, Tensor::zeros(vec![hidden]));
}

#[derive(Clone, Copy, Debug)]
pub struct Gate {
    pub w: Var,
    pub u: Var,
    pub v: Option<Var>,
    pub b: Var,
}

/// Graph-bound cell parameters.
#[derive(Clone, Copy, Debug)]
pub struct CellVars {
    pub reset: Gate,
    pub update: Gate,
    pub candidate: Gate,
}

impl CellVars {
    pub fn bind(bound: &Bound<'_>, prefix: &str) -> Result<Self> {
        let gate = |g: &str| -> Result<Gate> {
            let [w, u, v, b] = gate_names(prefix, g);
            Ok(Gate {
                w: bound.get(&w)?,
                u: bound.get(&u)?,
                v: bound.try_get(&v),
                b: bound.get(&b)?,
            })
        };
        Ok(Self {
            reset: gate("r")?,
            update: gate("z")?,
            candidate: gate("h")?,
        })
    }

    pub fn has_mask_terms(&self) -> bool {
        self.reset.v.is_some()
    }

    /// Flat list in a fixed order, for use as ODE parameters.
    pub fn to_vec(&self) -> Vec<Var> {
        let mut out = Vec::with_capacity(12);
        for gate in [self.reset, self.update, self.candidate] {
            out.extend([gate.w, gate.u]);
            out.extend(gate.v);
            out.push(gate.b);
        }
        out
    }

    pub fn from_slice(vars: &[Var], mask_terms: bool) -> Result<Self> {
        let per = if mask_terms { 4 } else { 3 };
        if vars.len() != 3 * per {
            return Err(Error::Contract(format!(
                "expected {} cell parameters, got {}",
                3 * per,
                vars.len()
            )));
        }
        let gate = |c: &[Var]| Gate {
            w: c[0],
            u: c[1],
            v: mask_terms.then(|| c[2]),
            b: c[per - 1],
        };
        Ok(Self {
            reset: gate(&vars[..per]),
            update: gate(&vars[per..2 * per]),
            candidate: gate(&vars[2 * per..]),
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecayVars {
    pub weight: Var,
    pub bias: Var,
}

impl DecayVars {
    pub fn bind(bound: &Bound<'_>, prefix: &str) -> Result<Self> {
        Ok(Self {
            weight: bound.get(&format!("{prefix}.w"))?,
            bias: bound.get(&format!("{prefix}.b"))?,
        })
    }

    pub fn rate(&self, g: &mut Graph, delta: Var) -> Result<Var> {
        decay_rate(g, delta, self.weight, self.bias)
    }
}

/// `W x + U h (+ V m) + b`.
fn pre_activation(g: &mut Graph, gate: &Gate, x: Var, h: Var, m: Option<Var>) -> Result<Var> {
    let wx = g.matmul(gate.w, x)?;
    let uh = g.matmul(gate.u, h)?;
    let mut acc = g.add(wx, uh)?;
    if let (Some(v), Some(m)) = (gate.v, m) {
        let vm = g.matmul(v, m)?;
        acc = g.add(acc, vm)?;
    }
    g.add(acc, gate.b)
}

/// Reset gate, update gate and candidate state.
pub struct Gates {
    pub reset: Var,
    pub update: Var,
    pub candidate: Var,
}

/// Gate activations for input `x`, (decayed) hidden `h` and optional mask `m`.
pub fn gates(g: &mut Graph, cell: &CellVars, x: Var, h: Var, m: Option<Var>) -> Result<Gates> {
    let r_pre = pre_activation(g, &cell.reset, x, h, m)?;
    let reset = g.sigmoid(r_pre);
    let z_pre = pre_activation(g, &cell.update, x, h, m)?;
    let update = g.sigmoid(z_pre);
    let rh = g.mul(reset, h)?;
    let c_pre = pre_activation(g, &cell.candidate, x, rh, m)?;
    let candidate = g.tanh(c_pre);
    Ok(Gates {
        reset,
        update,
        candidate,
    })
}

/// `(1 − z) ⊙ h + z ⊙ h̃`.
fn blend(g: &mut Graph, h: Var, gates: &Gates) -> Result<Var> {
    let diff = g.sub(gates.candidate, h)?;
    let step = g.mul(gates.update, diff)?;
    g.add(h, step)
}

/// Standard GRU update; mask terms are not used even when present.
pub fn gru_step(g: &mut Graph, cell: &CellVars, x: Var, h_prev: Var) -> Result<Var> {
    let gs = gates(g, cell, x, h_prev, None)?;
    blend(g, h_prev, &gs)
}

/// GRU update including the mask terms `V m`.
pub fn grud_cell(g: &mut Graph, cell: &CellVars, x_hat: Var, h_hat: Var, m: Var) -> Result<Var> {
    let gs = gates(g, cell, x_hat, h_hat, Some(m))?;
    blend(g, h_hat, &gs)
}

/// Input imputation with decay toward the mean.
///
/// Standard form: `x̂ = m ⊙ x + (1 − m) ⊙ (γ ⊙ x_last + (1 − γ) ⊙ x̃)`.
/// Literal form: `x̂ = m ⊙ x + (γ ⊙ x_last + (1 − γ)) ⊙ x̃`.
pub fn impute_with_decay(
    g: &mut Graph,
    x: &[f64],
    m: &[f64],
    last: &[f64],
    means: &[f64],
    gamma: Var,
    literal: bool,
) -> Result<Var> {
    // x̂ = base + slope ⊙ γ, both constant in the parameters.
    let (base, slope): (Vec<f64>, Vec<f64>) = (0..x.len())
        .map(|d| {
            if literal {
                (m[d] * x[d] + means[d], means[d] * (last[d] - 1.0))
            } else if m[d] == 1.0 {
                (x[d], 0.0)
            } else {
                (means[d], last[d] - means[d])
            }
        })
        .unzip();
    let base = g.vector(&base);
    let slope = g.vector(&slope);
    let sg = g.mul(slope, gamma)?;
    g.add(base, sg)
}

/// Per-series state carried between GRU-D steps.
#[derive(Clone, Debug)]
pub struct CellState {
    pub h: Var,
    /// Most recent observed value per variable, `x_{t′}`.
    pub last_observed: Vec<f64>,
}

impl CellState {
    /// Zero hidden state; last observations start at the training means.
    pub fn new(g: &mut Graph, hidden: usize, means: &[f64]) -> Self {
        Self {
            h: g.constant(Tensor::zeros(vec![hidden])),
            last_observed: means.to_vec(),
        }
    }

    pub fn observe(&mut self, x: &[f64], m: &[f64]) {
        for ((last, &v), &mi) in self.last_observed.iter_mut().zip(x).zip(m) {
            if mi == 1.0 {
                *last = v;
            }
        }
    }
}

/// Nodes produced by one GRU-D step.
pub struct GrudStep {
    pub h: Var,
    pub x_hat: Var,
    pub gamma_x: Var,
    pub gamma_h: Var,
}

/// One GRU-D step: decay the input toward the mean and the hidden state toward
/// zero, then apply the masked GRU update. Updates `state` in place.
#[allow(clippy::too_many_arguments)]
pub fn grud_step(
    g: &mut Graph,
    cell: &CellVars,
    input_decay: &DecayVars,
    hidden_decay: &DecayVars,
    x: &[f64],
    m: &[f64],
    delta: &[f64],
    means: &[f64],
    state: &mut CellState,
) -> Result<GrudStep> {
    let d = g.vector(delta);
    let gamma_x = input_decay.rate(g, d)?;
    let gamma_h = hidden_decay.rate(g, d)?;
    let x_hat = impute_with_decay(g, x, m, &state.last_observed, means, gamma_x, false)?;
    let h_hat = g.mul(gamma_h, state.h)?;
    let mv = g.vector(m);
    let h = grud_cell(g, cell, x_hat, h_hat, mv)?;
    state.h = h;
    state.observe(x, m);
    Ok(GrudStep {
        h,
        x_hat,
        gamma_x,
        gamma_h,
    })
}

/// GRU-D dynamics on the concatenated state `y = [x; m; h]`:
/// `dx/dt = dm/dt = 0`, `dh/dt = (h̃ − h) ⊙ z`.
///
/// Parameters are [`CellVars::to_vec`] of a cell with mask terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GrudDynamics {
    pub dim: usize,
    pub hidden: usize,
}

impl GrudDynamics {
    pub fn state_len(&self) -> usize {
        2 * self.dim + self.hidden
    }
}

impl OdeFunc for GrudDynamics {
    fn eval(&self, g: &mut Graph, y: Var, _t: f64, params: &[Var]) -> Result<Var> {
        let n = g.value(y).len();
        if n != self.state_len() {
            return Err(Error::Contract(format!(
                "ODE state has length {n}, expected 2·{} + {}",
                self.dim, self.hidden
            )));
        }
        let cell = CellVars::from_slice(params, true)?;
        let x = g.slice(y, 0, self.dim)?;
        let m = g.slice(y, self.dim, self.dim)?;
        let h = g.slice(y, 2 * self.dim, self.hidden)?;
        let gs = gates(g, &cell, x, h, Some(m))?;
        let diff = g.sub(gs.candidate, h)?;
        let dh = g.mul(diff, gs.update)?;
        let still = g.vector(&vec![0.0; 2 * self.dim]);
        g.concat(&[still, dh])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cell_params(shape: CellShape, seed: u64) -> ParamSet {
        let mut p = ParamSet::new();
        init_cell(&mut p, "cell", shape, &mut ChaCha8Rng::seed_from_u64(seed));
        init_decay(
            &mut p,
            "decay",
            shape.mask.max(shape.input),
            shape.hidden,
            ParamGroup::Main,
            &mut ChaCha8Rng::seed_from_u64(seed),
        );
        p.zero_prefix("decay");
        p
    }

    fn randomize(p: &mut ParamSet, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for e in p.entries_mut() {
            e.tensor
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn zero_gru_halves_the_hidden_state() {
        let shape = CellShape {
            input: 2,
            mask: 0,
            hidden: 3,
        };
        let mut p = cell_params(shape, 0);
        p.zero_prefix("cell");
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let cell = CellVars::bind(&b, "cell").unwrap();
        let x = g.vector(&[0.7, -1.3]);
        let h = g.vector(&[1.0, -2.0, 0.4]);
        let out = gru_step(&mut g, &cell, x, h).unwrap();
        assert_eq!(g.data(out), &[0.5, -1.0, 0.2]);

        let z = g.vector(&[0.0, 0.0, 0.0]);
        let x0 = g.vector(&[0.0, 0.0]);
        let out = gru_step(&mut g, &cell, x0, z).unwrap();
        assert_eq!(g.data(out), &[0.0; 3]);
    }

    #[test]
    fn gru_shape_mismatch_is_an_error() {
        let shape = CellShape {
            input: 2,
            mask: 0,
            hidden: 3,
        };
        let p = cell_params(shape, 0);
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let cell = CellVars::bind(&b, "cell").unwrap();
        let x = g.vector(&[0.7, -1.3, 2.0]);
        let h = g.vector(&[1.0, -2.0, 0.4]);
        assert!(matches!(gru_step(&mut g, &cell, x, h), Err(Error::Dimension { .. })));
    }

    #[test]
    fn grud_without_missingness_reduces_to_masked_gru() {
        let shape = CellShape {
            input: 2,
            mask: 2,
            hidden: 3,
        };
        let mut p = cell_params(shape, 4);
        randomize(&mut p, 5);
        p.zero_prefix("decay");
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let cell = CellVars::bind(&b, "cell").unwrap();
        let din = DecayVars::bind(&b, "decay.in").unwrap();
        let dh = DecayVars::bind(&b, "decay.hid").unwrap();
        let means = [0.3, -0.2];
        let mut state = CellState::new(&mut g, 3, &means);
        state.h = g.vector(&[0.1, -0.4, 0.9]);
        let h_prev = state.h;
        let (x, m) = ([1.5, -0.5], [1.0, 1.0]);
        let step = grud_step(&mut g, &cell, &din, &dh, &x, &m, &[0.0, 0.0], &means, &mut state).unwrap();
        assert_eq!(g.data(step.gamma_x), &[1.0, 1.0]);
        assert_eq!(g.data(step.x_hat), &x);
        let xv = g.vector(&x);
        let mv = g.vector(&m);
        let reference = grud_cell(&mut g, &cell, xv, h_prev, mv).unwrap();
        assert_eq!(g.data(step.h), g.data(reference));
        assert_eq!(state.last_observed, x.to_vec());
    }

    #[test]
    fn strong_decay_falls_back_to_the_mean() {
        let shape = CellShape {
            input: 2,
            mask: 2,
            hidden: 3,
        };
        let mut p = cell_params(shape, 1);
        p.get_mut("decay.in.w")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[50.0, 50.0]);
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let cell = CellVars::bind(&b, "cell").unwrap();
        let din = DecayVars::bind(&b, "decay.in").unwrap();
        let dh = DecayVars::bind(&b, "decay.hid").unwrap();
        let means = [0.3, -0.2];
        let mut state = CellState::new(&mut g, 3, &means);
        state.last_observed = vec![5.0, 7.0];
        let step = grud_step(
            &mut g,
            &cell,
            &din,
            &dh,
            &[0.0, 0.0],
            &[0.0, 0.0],
            &[2.0, 2.0],
            &means,
            &mut state,
        )
        .unwrap();
        for (a, b) in g.data(step.x_hat).iter().zip(means) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(state.last_observed, vec![5.0, 7.0]);
    }

    #[test]
    fn gate_ranges() {
        let shape = CellShape {
            input: 2,
            mask: 2,
            hidden: 3,
        };
        for seed in 0..20 {
            let mut p = cell_params(shape, seed);
            randomize(&mut p, seed + 100);
            let mut g = Graph::new();
            let b = p.bind(&mut g);
            let cell = CellVars::bind(&b, "cell").unwrap();
            let x = g.vector(&[3.0, -4.0]);
            let h = g.vector(&[0.5, -0.5, 0.9]);
            let m = g.vector(&[1.0, 0.0]);
            let gs = gates(&mut g, &cell, x, h, Some(m)).unwrap();
            assert!(g
                .data(gs.reset)
                .iter()
                .chain(g.data(gs.update))
                .all(|v| *v > 0.0 && *v < 1.0));
            assert!(g.data(gs.candidate).iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn derivative_with_zero_params() {
        let shape = CellShape {
            input: 1,
            mask: 1,
            hidden: 1,
        };
        let mut p = cell_params(shape, 0);
        p.zero_prefix("cell");
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let cell = CellVars::bind(&b, "cell").unwrap();
        let dyn1 = GrudDynamics { dim: 1, hidden: 1 };
        let y = g.vector(&[0.8, 1.0, 0.6]);
        let dy = dyn1.eval(&mut g, y, 0.0, &cell.to_vec()).unwrap();
        assert_eq!(g.data(dy), &[0.0, 0.0, -0.3]);

        let bad = g.vector(&[0.0; 4]);
        assert!(matches!(
            dyn1.eval(&mut g, bad, 0.0, &cell.to_vec()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn derivative_vanishes_at_fixed_point_and_closed_gate() {
        let shape = CellShape {
            input: 2,
            mask: 2,
            hidden: 3,
        };
        let mut p = cell_params(shape, 2);
        randomize(&mut p, 9);
        let dynamics = GrudDynamics { dim: 2, hidden: 3 };

        // closed update gate
        p.get_mut("cell.b_z")
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = -80.0);
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let cell = CellVars::bind(&b, "cell").unwrap();
        let y = g.vector(&[0.2, -0.1, 1.0, 0.0, 0.3, 0.5, -0.7]);
        let dy = dynamics.eval(&mut g, y, 0.0, &cell.to_vec()).unwrap();
        assert!(g.data(dy).iter().all(|v| v.abs() < 1e-30));

        // h equal to its candidate: zero candidate params and h = 0
        p.zero_prefix("cell.w");
        p.zero_prefix("cell.u");
        p.zero_prefix("cell.v");
        p.zero_prefix("cell.b");
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let cell = CellVars::bind(&b, "cell").unwrap();
        let y = g.vector(&[0.2, -0.1, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let dy = dynamics.eval(&mut g, y, 0.0, &cell.to_vec()).unwrap();
        assert!(g.data(dy).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unit_euler_step_equals_discrete_update() {
        let shape = CellShape {
            input: 2,
            mask: 2,
            hidden: 3,
        };
        let mut p = cell_params(shape, 3);
        randomize(&mut p, 11);
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let cell = CellVars::bind(&b, "cell").unwrap();
        let (x, m, h) = ([0.4, -1.1], [1.0, 0.0], [0.3, -0.6, 0.2]);
        let y = g.vector(&[x[0], x[1], m[0], m[1], h[0], h[1], h[2]]);
        let dynamics = GrudDynamics { dim: 2, hidden: 3 };
        let dy = dynamics.eval(&mut g, y, 0.0, &cell.to_vec()).unwrap();
        let euler: Vec<f64> = g.data(y)[4..]
            .iter()
            .zip(&g.data(dy)[4..])
            .map(|(a, b)| a + b)
            .collect();
        let (xv, mv, hv) = (g.vector(&x), g.vector(&m), g.vector(&h));
        let discrete = grud_cell(&mut g, &cell, xv, hv, mv).unwrap();
        for (a, b) in euler.iter().zip(g.data(discrete)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_computed_gru_against_graph() {
        // H = 1, D = 1 with explicit numbers
        let shape = CellShape {
            input: 1,
            mask: 0,
            hidden: 1,
        };
        let mut p = cell_params(shape, 0);
        for (name, v) in [
            ("cell.w_r", 0.5),
            ("cell.u_r", -0.3),
            ("cell.b_r", 0.1),
            ("cell.w_z", 1.2),
            ("cell.u_z", 0.4),
            ("cell.b_z", -0.2),
            ("cell.w", -0.7),
            ("cell.u", 0.9),
            ("cell.b", 0.05),
        ] {
            p.get_mut(name).unwrap().data_mut()[0] = v;
        }
        let (x, h) = (0.8, -0.6);
        let r = sigmoid(0.5 * x - 0.3 * h + 0.1);
        let z = sigmoid(1.2 * x + 0.4 * h - 0.2);
        let c = (-0.7 * x + 0.9 * r * h + 0.05f64).tanh();
        let expect = (1.0 - z) * h + z * c;
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let cell = CellVars::bind(&b, "cell").unwrap();
        let (xv, hv) = (g.vector(&[x]), g.vector(&[h]));
        let out = gru_step(&mut g, &cell, xv, hv).unwrap();
        assert!((g.data(out)[0] - expect).abs() < 1e-15);
    }
}
