//! Dense `f64` arrays and a taped reverse-mode differentiation graph.
//!
//! A [`Graph`] records every operation applied to its nodes in execution
//! order. Nodes are addressed by [`Var`] handles; a node is a tensor value
//! plus the operation that produced it. Calling [`Graph::backward`] on a
//! scalar node walks the tape in reverse and accumulates `∂loss/∂leaf` into
//! every leaf created with [`Graph::param`]. Graphs are meant to live for a
//! single forward/backward pass and are then dropped.
//!
//! ```
//! use odegrud::tensor::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::vector(vec![1.0, 2.0]));
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Arguments to `exp` are clamped to this range before exponentiation.
pub const EXP_CLIP: f64 = 60.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dims("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn = dyn Fn(&[f64]) -> Result<Vec<Option<Vec<f64>>>> + Send + Sync;

/// An operation whose backward rule is supplied by the caller.
///
/// The closure receives the upstream gradient of the op's output and returns
/// one optional gradient per input, in input order.
pub struct CustomOp {
    inputs: Vec<Var>,
    backward: Box<BackwardFn>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Relu(Var),
    Softplus(Var),
    Scale(Var, f64),
    Offset(Var),
    Sum(Var),
    Slice(Var, usize),
    Concat(Vec<Var>),
    Custom(CustomOp),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation tape. Single-threaded; distinct graphs are independent and may
/// be driven from different threads.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn vector(&mut self, data: &[f64]) -> Var {
        self.constant(Tensor::vector(data.to_vec()))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, present once a backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = &self.nodes[a.0].value;
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&x| f(x)).collect(),
        };
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape != vb.shape {
            return Err(Error::dims(name, &va.shape, &vb.shape));
        }
        let value = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect(),
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// `exp(clamp(a, -EXP_CLIP, EXP_CLIP))`.
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.clamp(-EXP_CLIP, EXP_CLIP).exp(), Op::Exp(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// `ln(1 + e^a)` in overflow-free form.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::Offset(a))
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.neg(a);
        self.offset(n, 1.0)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data.iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Matrix product `[m,k]·[k,n]`, or matrix-vector product `[m,k]·[k]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let bad = || Error::dims("matmul", &va.shape, &vb.shape);
        let (m, k) = match va.shape[..] {
            [m, k] => (m, k),
            _ => return Err(bad()),
        };
        let n = match vb.shape[..] {
            [kk, n] if kk == k => n,
            [kk] if kk == k => 1,
            _ => return Err(bad()),
        };
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &va.data[i * k..(i + 1) * k];
            let dst = &mut out[i * n..(i + 1) * n];
            for (p, &aip) in row.iter().enumerate() {
                if aip == 0.0 {
                    continue;
                }
                let brow = &vb.data[p * n..(p + 1) * n];
                for (d, &bpj) in dst.iter_mut().zip(brow) {
                    *d += aip * bpj;
                }
            }
        }
        let shape = if vb.shape.len() == 1 { vec![m] } else { vec![m, n] };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape, data: out }, Op::MatMul(a, b), rg))
    }

    /// Contiguous sub-vector `a[start..start+len]` of a 1-D node.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if va.shape.len() != 1 || start + len > va.data.len() {
            return Err(Error::dims("slice", &va.shape, &[start, len]));
        }
        let value = Tensor::vector(va.data[start..start + len].to_vec());
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Slice(a, start), rg))
    }

    /// Concatenation of 1-D nodes.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for &p in parts {
            let v = &self.nodes[p.0].value;
            if v.shape.len() != 1 {
                return Err(Error::dims("concat", &v.shape, &[v.data.len()]));
            }
            data.extend_from_slice(&v.data);
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), rg))
    }

    /// Records an operation with a caller-supplied backward rule.
    pub fn custom<F>(&mut self, inputs: Vec<Var>, value: Tensor, backward: F) -> Var
    where
        F: Fn(&[f64]) -> Result<Vec<Option<Vec<f64>>>> + Send + Sync + 'static,
    {
        let rg = self.rg(&inputs);
        self.push(
            value,
            Op::Custom(CustomOp {
                inputs,
                backward: Box::new(backward),
            }),
            rg,
        )
    }

    /// Backpropagates from a single-element node; leaf gradients accumulate
    /// across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let v = &self.nodes[loss.0].value;
        if v.data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                v.shape
            )));
        }
        self.backward_with_seed(loss, &[1.0])
    }

    /// Vector-Jacobian product: backpropagates `seed` (shaped like `out`).
    pub fn backward_with_seed(&mut self, out: Var, seed: &[f64]) -> Result<()> {
        if seed.len() != self.nodes[out.0].value.data.len() {
            return Err(Error::dims(
                "backward seed",
                &self.nodes[out.0].value.shape,
                &[seed.len()],
            ));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        adj[out.0] = Some(seed.to_vec());

        for i in (0..=out.0).rev() {
            let Some(up) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    match &mut self.grads[i] {
                        Some(acc) => acc.iter_mut().zip(&up).for_each(|(a, u)| *a += u),
                        slot @ None => *slot = Some(up),
                    }
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, &self.nodes, *a, up.iter().copied());
                    accumulate(&mut adj, &self.nodes, *b, up.iter().copied());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, &self.nodes, *a, up.iter().copied());
                    accumulate(&mut adj, &self.nodes, *b, up.iter().map(|u| -u));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
                    accumulate(&mut adj, &self.nodes, *a, up.iter().zip(vb).map(|(u, y)| u * y));
                    accumulate(&mut adj, &self.nodes, *b, up.iter().zip(va).map(|(u, x)| u * x));
                }
                Op::Neg(a) => accumulate(&mut adj, &self.nodes, *a, up.iter().map(|u| -u)),
                Op::Sigmoid(a) => {
                    let s = &node.value.data;
                    accumulate(
                        &mut adj,
                        &self.nodes,
                        *a,
                        up.iter().zip(s).map(|(u, s)| u * s * (1.0 - s)),
                    );
                }
                Op::Tanh(a) => {
                    let t = &node.value.data;
                    accumulate(
                        &mut adj,
                        &self.nodes,
                        *a,
                        up.iter().zip(t).map(|(u, t)| u * (1.0 - t * t)),
                    );
                }
                Op::Exp(a) => {
                    let x = &self.nodes[a.0].value.data;
                    let e = &node.value.data;
                    accumulate(
                        &mut adj,
                        &self.nodes,
                        *a,
                        up.iter()
                            .zip(x)
                            .zip(e)
                            .map(|((u, x), e)| if x.abs() > EXP_CLIP { 0.0 } else { u * e }),
                    );
                }
                Op::Relu(a) => {
                    let x = &self.nodes[a.0].value.data;
                    accumulate(
                        &mut adj,
                        &self.nodes,
                        *a,
                        up.iter().zip(x).map(|(u, x)| if *x > 0.0 { *u } else { 0.0 }),
                    );
                }
                Op::Softplus(a) => {
                    let x = &self.nodes[a.0].value.data;
                    accumulate(
                        &mut adj,
                        &self.nodes,
                        *a,
                        up.iter().zip(x).map(|(u, x)| u * sigmoid(*x)),
                    );
                }
                Op::Scale(a, c) => accumulate(&mut adj, &self.nodes, *a, up.iter().map(|u| u * c)),
                Op::Offset(a) => accumulate(&mut adj, &self.nodes, *a, up.iter().copied()),
                Op::Sum(a) => {
                    let n = self.nodes[a.0].value.data.len();
                    accumulate(&mut adj, &self.nodes, *a, std::iter::repeat_n(up[0], n));
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k) = (va.shape[0], va.shape[1]);
                    let n = if vb.shape.len() == 1 { 1 } else { vb.shape[1] };
                    if self.nodes[a.0].requires_grad {
                        // dA = G · Bᵀ
                        let mut da = vec![0.0; m * k];
                        for i in 0..m {
                            let grow = &up[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &vb.data[p * n..(p + 1) * n];
                                da[i * k + p] = grow.iter().zip(brow).map(|(g, b)| g * b).sum();
                            }
                        }
                        accumulate(&mut adj, &self.nodes, *a, da.into_iter());
                    }
                    if self.nodes[b.0].requires_grad {
                        // dB = Aᵀ · G
                        let mut db = vec![0.0; k * n];
                        for i in 0..m {
                            let grow = &up[i * n..(i + 1) * n];
                            for p in 0..k {
                                let aip = va.data[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                for (d, g) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *d += aip * g;
                                }
                            }
                        }
                        accumulate(&mut adj, &self.nodes, *b, db.into_iter());
                    }
                }
                Op::Slice(a, start) => {
                    let a = *a;
                    if self.nodes[a.0].requires_grad {
                        let n = self.nodes[a.0].value.data.len();
                        let slot = adj[a.0].get_or_insert_with(|| vec![0.0; n]);
                        for (d, u) in slot[*start..*start + up.len()].iter_mut().zip(&up) {
                            *d += u;
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.nodes[p.0].value.data.len();
                        accumulate(&mut adj, &self.nodes, p, up[offset..offset + n].iter().copied());
                        offset += n;
                    }
                }
                Op::Custom(op) => {
                    let grads = (op.backward)(&up)?;
                    if grads.len() != op.inputs.len() {
                        return Err(Error::Contract(format!(
                            "custom op returned {} gradients for {} inputs",
                            grads.len(),
                            op.inputs.len()
                        )));
                    }
                    for (&input, g) in op.inputs.iter().zip(grads) {
                        if let Some(g) = g {
                            if g.len() != self.nodes[input.0].value.data.len() {
                                return Err(Error::dims(
                                    "custom backward",
                                    &self.nodes[input.0].value.shape,
                                    &[g.len()],
                                ));
                            }
                            accumulate(&mut adj, &self.nodes, input, g.into_iter());
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], nodes: &[Node], target: Var, contrib: impl Iterator<Item = f64>) {
    if !nodes[target.0].requires_grad {
        return;
    }
    match &mut adj[target.0] {
        Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
        slot @ None => *slot = Some(contrib.collect()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Central finite differences of `f` at `x`.
    fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let h = 1e-5;
        let mut xp = x.to_vec();
        (0..x.len())
            .map(|i| {
                let orig = xp[i];
                xp[i] = orig + h;
                let up = f(&xp);
                xp[i] = orig - h;
                let down = f(&xp);
                xp[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(analytic: &[f64], numeric: &[f64]) {
        for (a, n) in analytic.iter().zip(numeric) {
            let tol = (1e-4 * a.abs().max(n.abs())).max(1e-6);
            assert!((a - n).abs() <= tol, "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let m = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.data(p), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(g.shape(p), &[2, 2]);

        let a = g.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let b = g.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let ab = g.matmul(a, b).unwrap();
        assert_eq!(g.data(ab), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
        let v = g.constant(Tensor::zeros(vec![4]));
        assert!(g.add(a, v).is_err());
    }

    #[test]
    fn unary_reference_values() {
        let mut g = Graph::new();
        let z = g.vector(&[0.0]);
        let s = g.sigmoid(z);
        let t = g.tanh(z);
        assert_eq!(g.data(s), &[0.5]);
        assert_eq!(g.data(t), &[0.0]);
        let ln2 = g.vector(&[std::f64::consts::LN_2]);
        let r = g.relu(ln2);
        let n = g.neg(r);
        let e = g.exp(n);
        assert!((g.data(e)[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn exp_is_clipped() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1e4, -1e4]));
        let e = g.exp(x);
        assert!(g.data(e).iter().all(|v| v.is_finite() && *v > 0.0));
        let s = g.sum(e);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.0, 1.0, -1.0]));
        let r = g.relu(x);
        let s = g.sum(r);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);

        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![3.0]));
        let y = g.scale(x, 2.0);
        let s = g.sum(y);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn slice_concat_roundtrip_gradients() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]));
        let a = g.slice(x, 0, 1).unwrap();
        let b = g.slice(x, 1, 3).unwrap();
        let c = g.concat(&[b, a]).unwrap();
        assert_eq!(g.data(c), &[2.0, 3.0, 4.0, 1.0]);
        let w = g.vector(&[1.0, 2.0, 3.0, 4.0]);
        let p = g.mul(c, w).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let a0 = [0.3, -1.2, 0.7, 1.9, -0.4, 0.1, 0.8, -1.5, 1.1];
        let b0 = [-0.6, 0.2, 1.4, 0.9, -1.7, 0.5, 0.3, 1.2, -0.8];
        let forward = |a: &[f64], b: &[f64]| {
            let mut g = Graph::new();
            let va = g.param(Tensor::matrix(3, 3, a.to_vec()).unwrap());
            let vb = g.param(Tensor::matrix(3, 3, b.to_vec()).unwrap());
            let p = g.matmul(va, vb).unwrap();
            let s = g.sum(p);
            (g, va, vb, s)
        };
        let (mut g, va, vb, s) = forward(&a0, &b0);
        g.backward(s).unwrap();
        let num_a = numeric_grad(
            |a| {
                let (g, _, _, s) = forward(a, &b0);
                g.data(s)[0]
            },
            &a0,
        );
        let num_b = numeric_grad(
            |b| {
                let (g, _, _, s) = forward(&a0, b);
                g.data(s)[0]
            },
            &b0,
        );
        assert_close(g.grad(va).unwrap(), &num_a);
        assert_close(g.grad(vb).unwrap(), &num_b);
    }

    /// A composite expression touching every differentiable op.
    fn composite(g: &mut Graph, x: Var, w: Var) -> Var {
        let wx = g.matmul(w, x).unwrap();
        let s = g.sigmoid(wx);
        let t = g.tanh(x);
        let st = g.mul(s, t).unwrap();
        let e = g.exp(st);
        let r = g.relu(x);
        let sp = g.softplus(r);
        let a = g.add(e, sp).unwrap();
        let n = g.neg(x);
        let b = g.sub(a, n).unwrap();
        let c = g.scale(b, 0.7);
        let om = g.one_minus(c);
        let head = g.slice(om, 0, 2).unwrap();
        let tail = g.slice(om, 2, 1).unwrap();
        let cat = g.concat(&[tail, head]).unwrap();
        let sq = g.mul(cat, om).unwrap();
        g.sum(sq)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn every_op_matches_finite_differences(
            x0 in proptest::collection::vec(-2.0f64..2.0, 3),
            w0 in proptest::collection::vec(-2.0f64..2.0, 9),
        ) {
            // keep relu away from its kink
            prop_assume!(x0.iter().all(|v| v.abs() > 1e-3));
            let eval = |x: &[f64], w: &[f64]| {
                let mut g = Graph::new();
                let vx = g.param(Tensor::vector(x.to_vec()));
                let vw = g.param(Tensor::matrix(3, 3, w.to_vec()).unwrap());
                let out = composite(&mut g, vx, vw);
                (g, vx, vw, out)
            };
            let (mut g, vx, vw, out) = eval(&x0, &w0);
            prop_assert!(g.data(out)[0].is_finite());
            g.backward(out).unwrap();
            let nx = numeric_grad(|x| { let (g, _, _, o) = eval(x, &w0); g.data(o)[0] }, &x0);
            let nw = numeric_grad(|w| { let (g, _, _, o) = eval(&x0, w); g.data(o)[0] }, &w0);
            assert_close(g.grad(vx).unwrap(), &nx);
            assert_close(g.grad(vw).unwrap(), &nw);
        }

        #[test]
        fn backward_is_linear_in_the_loss(
            x0 in proptest::collection::vec(-2.0f64..2.0, 3),
            alpha in -3.0f64..3.0,
            beta in -3.0f64..3.0,
        ) {
            let grads = |ca: f64, cb: f64| {
                let mut g = Graph::new();
                let x = g.param(Tensor::vector(x0.clone()));
                let t = g.tanh(x);
                let l1 = g.sum(t);
                let sq = g.mul(x, x).unwrap();
                let sg = g.sigmoid(sq);
                let l2 = g.sum(sg);
                let a = g.scale(l1, ca);
                let b = g.scale(l2, cb);
                let l = g.add(a, b).unwrap();
                g.backward(l).unwrap();
                g.grad(x).unwrap().to_vec()
            };
            let combined = grads(alpha, beta);
            let g1 = grads(1.0, 0.0);
            let g2 = grads(0.0, 1.0);
            for i in 0..3 {
                let expect = alpha * g1[i] + beta * g2[i];
                prop_assert!((combined[i] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
            }
        }
    }
}
