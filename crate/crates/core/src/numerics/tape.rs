//! Dynamic reverse-mode tape.
//!
//! Every operation appends a node holding its forward value and enough
//! cached state to run its backward rule. The tape is rebuilt for every
//! training step; nodes are never mutated after creation except for the
//! gradient buffers filled by [`Tape::backward`].

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::{axpy, dot, gemm_acc, gemm_at_acc, gemm_bt_acc, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Relu,
    Gelu,
    Tanh,
    Exp,
    Log,
    Sqrt,
    Softplus,
    Square,
}

struct AttnCache {
    q: Var,
    k: Var,
    v: Var,
    prefix: Option<(Var, Var)>,
    heads: usize,
    prefix_len: usize,
    tq: usize,
    tk: usize,
    probs: Vec<f64>,
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Linear(Var, Var, Option<Var>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    AddRowMasked(Var, Var, Vec<bool>),
    ScaleRows(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        pad: usize,
        probs: Vec<f64>,
        count: usize,
    },
    Gather(Var, Vec<usize>),
    Attention(Box<AttnCache>),
    Reshape(Var),
    Slice(Var, usize),
    Concat(Vec<Var>),
    MaskedMeanRows(Var, Vec<bool>, usize),
    Dropout(Var, Vec<f64>),
}

impl Op {
    fn for_each_input(&self, mut f: impl FnMut(Var)) {
        match self {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b)
            | Op::MatMulBt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRow(a, b)
            | Op::AddRowMasked(a, b, _)
            | Op::ScaleRows(a, b) => {
                f(*a);
                f(*b);
            }
            Op::Linear(x, w, b) => {
                f(*x);
                f(*w);
                if let Some(b) = b {
                    f(*b);
                }
            }
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Unary(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::RowSum(a)
            | Op::Softmax(a)
            | Op::Reshape(a)
            | Op::Slice(a, _)
            | Op::MaskedMeanRows(a, _, _)
            | Op::Dropout(a, _) => f(*a),
            Op::LayerNorm { x, gain, bias, .. } => {
                f(*x);
                f(*gain);
                f(*bias);
            }
            Op::CrossEntropy { logits, .. } => f(*logits),
            Op::Gather(t, _) => f(*t),
            Op::Attention(c) => {
                f(c.q);
                f(c.k);
                f(c.v);
                if let Some((pk, pv)) = c.prefix {
                    f(pk);
                    f(pv);
                }
            }
            Op::Concat(vs) => vs.iter().for_each(|v| f(*v)),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Operation recorder and reverse-mode differentiator.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    params: BTreeMap<ParamId, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = libm::tanh(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + libm::log1p(libm::exp(-libm::fabs(x)))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// In-place numerically stable softmax of one slice.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return;
    }
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - m);
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

fn grad_slot<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &[Node],
    v: Var,
) -> Option<&'a mut [f64]> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
}

impl Tape {
    /// A recording tape.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            params: BTreeMap::new(),
        }
    }

    /// A tape that computes values only; nothing requires gradients.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass w.r.t. a leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let mut requires_grad = false;
        if self.grad_enabled {
            op.for_each_input(|v| requires_grad |= self.nodes[v.0].requires_grad);
        }
        // attention keeps its weights for inspection even without gradients
        let op = if requires_grad || matches!(op, Op::Attention(_)) {
            op
        } else {
            Op::Leaf
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite("leaf"));
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Places a parameter on the tape (once per tape; later calls reuse the node).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param,
            requires_grad: self.grad_enabled,
            grad: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        match s.len() {
            1 => Ok((1, s[0])),
            2 => Ok((s[0], s[1])),
            _ => Err(shape_err(op, format!("expected matrix, got {:?}", s))),
        }
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 || self.shape(b).len() != 2 {
            return Err(shape_err(
                "matmul",
                format!("{:?} · {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(&[m, n], out)?;
        self.push(t, Op::MatMul(a, b), "matmul")
    }

    /// `a · bᵀ` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul_bt", a)?;
        let (n, k2) = self.matrix_dims("matmul_bt", b)?;
        if k != k2 {
            return Err(shape_err(
                "matmul_bt",
                format!("{:?} · {:?}ᵀ", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm_bt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(&[m, n], out)?;
        self.push(t, Op::MatMulBt(a, b), "matmul_bt")
    }

    /// `x · w + b` with `x: [m,k]` (or `[k]`), `w: [k,n]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let vector_in = self.shape(x).len() == 1;
        let (m, k) = self.matrix_dims("linear", x)?;
        let (k2, n) = self.matrix_dims("linear", w)?;
        if k != k2 {
            return Err(shape_err(
                "linear",
                format!("{:?} · {:?}", self.shape(x), self.shape(w)),
            ));
        }
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(shape_err("linear", "bias shape"));
            }
            let bd = self.value(b).data();
            for row in out.chunks_mut(n.max(1)) {
                row.copy_from_slice(bd);
            }
        }
        gemm_acc(self.value(x).data(), self.value(w).data(), &mut out, m, k, n);
        let shape: Vec<usize> = if vector_in { vec![n] } else { vec![m, n] };
        let t = Tensor::new(&shape, out)?;
        self.push(t, Op::Linear(x, w, b), "linear")
    }

    // ---- elementwise -----------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        self.push(t, op, name)
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

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Row broadcast: adds `row: [n]` to every row of `a: [m,n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.value(a).cols().max(if self.shape(a).len() == 1 {
            self.shape(a)[0]
        } else {
            0
        });
        if self.shape(row) != [n] {
            return Err(shape_err(
                "add_row",
                format!("{:?} + {:?}", self.shape(a), self.shape(row)),
            ));
        }
        let r = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(n.max(1)) {
            for (x, &y) in chunk.iter_mut().zip(r) {
                *x += y;
            }
        }
        let t = Tensor::new(self.shape(a), data)?;
        self.push(t, Op::AddRow(a, row), "add_row")
    }

    /// Adds `row` to the rows of `a` whose mask entry is `true`.
    pub fn add_row_masked(&mut self, a: Var, row: Var, mask: &[bool]) -> Result<Var> {
        let (m, n) = self.matrix_dims("add_row_masked", a)?;
        if self.shape(row) != [n] || mask.len() != m {
            return Err(shape_err("add_row_masked", "row or mask length"));
        }
        let r = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for (i, chunk) in data.chunks_mut(n.max(1)).enumerate() {
            if mask[i] {
                for (x, &y) in chunk.iter_mut().zip(r) {
                    *x += y;
                }
            }
        }
        let t = Tensor::new(self.shape(a), data)?;
        self.push(t, Op::AddRowMasked(a, row, mask.to_vec()), "add_row_masked")
    }

    /// Column broadcast: multiplies row `i` of `a: [m,n]` by `s[i]`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("scale_rows", a)?;
        if self.shape(s) != [m] {
            return Err(shape_err("scale_rows", "scale length must equal rows"));
        }
        let sv = self.value(s).data();
        let mut data = self.value(a).data().to_vec();
        for (i, chunk) in data.chunks_mut(n.max(1)).enumerate() {
            chunk.iter_mut().for_each(|x| *x *= sv[i]);
        }
        let t = Tensor::new(self.shape(a), data)?;
        self.push(t, Op::ScaleRows(a, s), "scale_rows")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let t = Tensor::new(self.shape(a), data)?;
        self.push(t, Op::Scale(a, c), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x + c).collect();
        let t = Tensor::new(self.shape(a), data)?;
        self.push(t, Op::AddScalar(a), "add_scalar")
    }

    fn unary(&mut self, a: Var, kind: Unary, name: &'static str) -> Result<Var> {
        let f: fn(f64) -> f64 = match kind {
            Unary::Relu => |x| x.max(0.0),
            Unary::Gelu => gelu,
            Unary::Tanh => libm::tanh,
            Unary::Exp => libm::exp,
            Unary::Log => libm::log,
            Unary::Sqrt => libm::sqrt,
            Unary::Softplus => softplus,
            Unary::Square => |x| x * x,
        };
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(self.shape(a), data)?;
        self.push(t, Op::Unary(a, kind), name)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Relu, "relu")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Gelu, "gelu")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Tanh, "tanh")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp, "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Log, "log")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sqrt, "sqrt")
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Softplus, "softplus")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Square, "square")
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(shape_err("mean", "empty tensor"));
        }
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s / n as f64), Op::Mean(a), "mean")
    }

    /// `[m,n] -> [m]`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("row_sum", a)?;
        let d = self.value(a).data();
        let out = (0..m).map(|i| d[i * n..(i + 1) * n].iter().sum()).collect();
        self.push(Tensor::vector(out), Op::RowSum(a), "row_sum")
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let n = *self.shape(a).last().unwrap_or(&1);
        let mut data = self.value(a).data().to_vec();
        if n > 0 {
            data.chunks_mut(n).for_each(softmax_in_place);
        }
        let t = Tensor::new(self.shape(a), data)?;
        self.push(t, Op::Softmax(a), "softmax")
    }

    /// Per-row standardization followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::InvalidParameter(format!("layer_norm eps {eps}")));
        }
        let n = *self.shape(x).last().unwrap_or(&1);
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(shape_err("layer_norm", "gain/bias length"));
        }
        let xd = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = if n == 0 { 0 } else { xd.len() / n };
        let mut out = vec![0.0; xd.len()];
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / libm::sqrt(var + eps);
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.shape(x), out)?;
        self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            "layer_norm",
        )
    }

    /// Mean token negative log-likelihood over non-pad positions.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad: usize) -> Result<Var> {
        let (t_len, v) = self.matrix_dims("cross_entropy", logits)?;
        if targets.len() != t_len {
            return Err(shape_err(
                "cross_entropy",
                format!("{} targets for {} rows", targets.len(), t_len),
            ));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; ld.len()];
        let mut total = 0.0;
        let mut count = 0;
        for (t, &tgt) in targets.iter().enumerate() {
            if tgt == pad {
                continue;
            }
            if tgt >= v {
                return Err(Error::Contract(format!("target id {tgt} outside vocab {v}")));
            }
            let row = &mut probs[t * v..(t + 1) * v];
            row.copy_from_slice(&ld[t * v..(t + 1) * v]);
            softmax_in_place(row);
            let m = ld[t * v..(t + 1) * v]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = m + libm::log(
                ld[t * v..(t + 1) * v]
                    .iter()
                    .map(|x| libm::exp(x - m))
                    .sum::<f64>(),
            );
            total += lse - ld[t * v + tgt];
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyTarget);
        }
        let loss = Tensor::scalar(total / count as f64);
        self.push(
            loss,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad,
                probs,
                count,
            },
            "cross_entropy",
        )
    }

    // ---- indexing / layout -------------------------------------------------

    /// Selects rows of `table: [V, d]` → `[ids.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix_dims("gather_rows", table)?;
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= v {
                return Err(Error::Contract(format!("row index {i} outside {v}")));
            }
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(&[ids.len(), d], out)?;
        self.push(t, Op::Gather(table, ids.to_vec()), "gather_rows")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        self.push(t, Op::Reshape(a), "reshape")
    }

    /// Rows `start..end` along the first axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let rows = self.value(a).rows();
        if start > end || end > rows || self.shape(a).is_empty() {
            return Err(shape_err("slice_rows", format!("{start}..{end} of {rows}")));
        }
        let c = if self.shape(a).len() == 1 { 1 } else { self.value(a).cols() };
        let data = self.value(a).data()[start * c..end * c].to_vec();
        let mut shape = self.shape(a).to_vec();
        shape[0] = end - start;
        let t = Tensor::new(&shape, data)?;
        self.push(t, Op::Slice(a, start * c), "slice_rows")
    }

    /// Concatenation along the first axis; trailing axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs"))?;
        let tail: Vec<usize> = self.shape(first).iter().skip(1).copied().collect();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(shape_err("concat", format!("{:?} vs tail {:?}", s, tail)));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let t = Tensor::new(&shape, data)?;
        self.push(t, Op::Concat(parts.to_vec()), "concat")
    }

    /// Mean over rows with `mask[i] == true`; `[m,n] -> [n]`.
    pub fn masked_mean_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (m, n) = self.matrix_dims("masked_mean_rows", x)?;
        if mask.len() != m {
            return Err(shape_err("masked_mean_rows", "mask length"));
        }
        let count = mask.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(Error::Contract("pooling over all-pad input".into()));
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; n];
        for i in (0..m).filter(|&i| mask[i]) {
            axpy(1.0, &xd[i * n..(i + 1) * n], &mut out);
        }
        let inv = 1.0 / count as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        self.push(
            Tensor::vector(out),
            Op::MaskedMeanRows(x, mask.to_vec(), count),
            "masked_mean_rows",
        )
    }

    /// Inverted dropout. Identity when `rate == 0` or gradients are disabled.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 || !self.grad_enabled {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(Error::InvalidParameter(format!("dropout rate {rate}")));
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(a, m)| a * m)
            .collect();
        let t = Tensor::new(self.shape(x), data)?;
        self.push(t, Op::Dropout(x, mask), "dropout")
    }

    // ---- attention -------------------------------------------------------

    /// Scaled dot-product attention over already-projected `q: [Tq,D]`,
    /// `k, v: [Tk,D]`, split into `heads` heads of width `D / heads`.
    ///
    /// `prefix`, when given, is a pair of `[heads, P, D/heads]` tensors
    /// placed in front of every head's keys and values. Prefix positions are
    /// never masked. `key_mask[j] == false` hides real key `j`; `causal`
    /// additionally hides keys after the query position.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        prefix: Option<(Var, Var)>,
        heads: usize,
        key_mask: &[bool],
        causal: bool,
    ) -> Result<Var> {
        let (tq, d) = self.matrix_dims("attention", q)?;
        let (tk, dk) = self.matrix_dims("attention", k)?;
        if dk != d || self.shape(v) != self.shape(k) {
            return Err(shape_err("attention", "q/k/v widths differ"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(shape_err("attention", format!("{d} not divisible by {heads} heads")));
        }
        if key_mask.len() != tk {
            return Err(Error::Contract(format!(
                "key mask length {} != key length {}",
                key_mask.len(),
                tk
            )));
        }
        if causal && tq != tk {
            return Err(shape_err("attention", "causal attention needs Tq == Tk"));
        }
        let dh = d / heads;
        let p_len = match prefix {
            Some((pk, pv)) => {
                let s = self.shape(pk);
                if s.len() != 3 || s[0] != heads || s[2] != dh || self.shape(pv) != s {
                    return Err(shape_err(
                        "attention",
                        format!("prefix shape {:?}, expected [{heads}, P, {dh}]", s),
                    ));
                }
                s[1]
            }
            None => 0,
        };
        let width = p_len + tk;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let (pkd, pvd): (&[f64], &[f64]) = match prefix {
            Some((pk, pv)) => (self.value(pk).data(), self.value(pv).data()),
            None => (&[], &[]),
        };
        let mut probs = vec![0.0; heads * tq * width];
        let mut out = vec![0.0; tq * d];
        for h in 0..heads {
            let off = h * dh;
            let pkh = &pkd[h * p_len * dh..(h + 1) * p_len * dh];
            let pvh = &pvd[h * p_len * dh..(h + 1) * p_len * dh];
            for i in 0..tq {
                let qi = &qd[i * d + off..i * d + off + dh];
                let row = &mut probs[(h * tq + i) * width..(h * tq + i + 1) * width];
                let mut max = f64::NEG_INFINITY;
                for p in 0..p_len {
                    let s = dot(qi, &pkh[p * dh..(p + 1) * dh]) * scale;
                    row[p] = s;
                    max = max.max(s);
                }
                for j in 0..tk {
                    if key_mask[j] && !(causal && j > i) {
                        let s = dot(qi, &kd[j * d + off..j * d + off + dh]) * scale;
                        row[p_len + j] = s;
                        max = max.max(s);
                    }
                }
                if max == f64::NEG_INFINITY {
                    row.iter_mut().for_each(|x| *x = 0.0);
                    continue;
                }
                let mut total = 0.0;
                for p in 0..p_len {
                    let e = libm::exp(row[p] - max);
                    row[p] = e;
                    total += e;
                }
                for j in 0..tk {
                    if key_mask[j] && !(causal && j > i) {
                        let e = libm::exp(row[p_len + j] - max);
                        row[p_len + j] = e;
                        total += e;
                    } else {
                        row[p_len + j] = 0.0;
                    }
                }
                let inv = 1.0 / total;
                row.iter_mut().for_each(|x| *x *= inv);
                let oi = &mut out[i * d + off..i * d + off + dh];
                for p in 0..p_len {
                    axpy(row[p], &pvh[p * dh..(p + 1) * dh], oi);
                }
                for j in 0..tk {
                    let w = row[p_len + j];
                    if w != 0.0 {
                        axpy(w, &vd[j * d + off..j * d + off + dh], oi);
                    }
                }
            }
        }
        let t = Tensor::new(&[tq, d], out)?;
        self.push(
            t,
            Op::Attention(Box::new(AttnCache {
                q,
                k,
                v,
                prefix,
                heads,
                prefix_len: p_len,
                tq,
                tk,
                probs,
            })),
            "attention",
        )
    }

    /// Attention weights recorded by an attention node, `[heads, Tq, P+Tk]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention(c) => Some(&c.probs),
            _ => None,
        }
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a scalar loss. Gradients for every leaf that
    /// requires them are stored on the tape (see [`Tape::grad`]).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.grad_enabled {
            return Err(Error::Contract("backward on an inference tape".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf | Op::Param) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if matches!(node.op, Op::Leaf | Op::Param) && node.requires_grad {
                node.grad = Some(g.unwrap_or_else(|| vec![0.0; node.value.len()]));
            }
        }
        Ok(())
    }

    /// Adds the gradients of parameter nodes into the store's buffers.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (&id, &v) in &self.params {
            if let Some(g) = self.grad(v) {
                let p = store.get_mut(id);
                for (a, b) in p.grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        macro_rules! with_grad {
            ($v:expr, |$gv:ident| $body:expr) => {
                if let Some($gv) = grad_slot(grads, nodes, $v) {
                    $body
                }
            };
        }
        let val = |v: Var| nodes[v.0].value.data();
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.rows(), nodes[b.0].value.rows());
                let m = if nodes[a.0].value.shape().len() == 1 { 1 } else { m };
                let n = nodes[b.0].value.cols();
                with_grad!(*a, |ga| gemm_bt_acc(g, val(*b), ga, m, n, k));
                with_grad!(*b, |gb| gemm_at_acc(val(*a), g, gb, m, k, n));
            }
            Op::MatMulBt(a, b) => {
                let m = nodes[i].value.rows();
                let n = nodes[b.0].value.rows();
                let k = nodes[b.0].value.cols();
                // out = a bᵀ: da = g b, db = gᵀ a
                with_grad!(*a, |ga| gemm_acc(g, val(*b), ga, m, n, k));
                with_grad!(*b, |gb| gemm_at_acc(g, val(*a), gb, m, n, k));
            }
            Op::Linear(x, w, b) => {
                let k = nodes[w.0].value.rows();
                let n = nodes[w.0].value.cols();
                let m = if n == 0 { 0 } else { g.len() / n };
                with_grad!(*x, |gx| gemm_bt_acc(g, val(*w), gx, m, n, k));
                with_grad!(*w, |gw| gemm_at_acc(val(*x), g, gw, m, k, n));
                if let Some(b) = b {
                    with_grad!(*b, |gb| {
                        for row in g.chunks(n.max(1)) {
                            axpy(1.0, row, gb);
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                with_grad!(*a, |ga| axpy(1.0, g, ga));
                with_grad!(*b, |gb| axpy(1.0, g, gb));
            }
            Op::Sub(a, b) => {
                with_grad!(*a, |ga| axpy(1.0, g, ga));
                with_grad!(*b, |gb| axpy(-1.0, g, gb));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                with_grad!(*a, |ga| {
                    for j in 0..g.len() {
                        ga[j] += g[j] * bv[j];
                    }
                });
                with_grad!(*b, |gb| {
                    for j in 0..g.len() {
                        gb[j] += g[j] * av[j];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                with_grad!(*a, |ga| {
                    for j in 0..g.len() {
                        ga[j] += g[j] / bv[j];
                    }
                });
                with_grad!(*b, |gb| {
                    for j in 0..g.len() {
                        gb[j] -= g[j] * av[j] / (bv[j] * bv[j]);
                    }
                });
            }
            Op::AddRow(a, row) => {
                let n = nodes[row.0].value.len();
                with_grad!(*a, |ga| axpy(1.0, g, ga));
                with_grad!(*row, |gr| {
                    for chunk in g.chunks(n.max(1)) {
                        axpy(1.0, chunk, gr);
                    }
                });
            }
            Op::AddRowMasked(a, row, mask) => {
                let n = nodes[row.0].value.len();
                with_grad!(*a, |ga| axpy(1.0, g, ga));
                with_grad!(*row, |gr| {
                    for (r, chunk) in g.chunks(n.max(1)).enumerate() {
                        if mask[r] {
                            axpy(1.0, chunk, gr);
                        }
                    }
                });
            }
            Op::ScaleRows(a, s) => {
                let n = nodes[a.0].value.cols();
                let (av, sv) = (val(*a), val(*s));
                with_grad!(*a, |ga| {
                    for (r, chunk) in g.chunks(n.max(1)).enumerate() {
                        axpy(sv[r], chunk, &mut ga[r * n..(r + 1) * n]);
                    }
                });
                with_grad!(*s, |gs| {
                    for r in 0..sv.len() {
                        gs[r] += dot(&g[r * n..(r + 1) * n], &av[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::Scale(a, c) => with_grad!(*a, |ga| axpy(*c, g, ga)),
            Op::AddScalar(a) => with_grad!(*a, |ga| axpy(1.0, g, ga)),
            Op::Unary(a, kind) => {
                let xv = val(*a);
                with_grad!(*a, |ga| {
                    for j in 0..g.len() {
                        let x = xv[j];
                        let y = out[j];
                        let d = match kind {
                            Unary::Relu => {
                                if x > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Gelu => gelu_grad(x),
                            Unary::Tanh => 1.0 - y * y,
                            Unary::Exp => y,
                            Unary::Log => 1.0 / x,
                            Unary::Sqrt => 0.5 / y,
                            Unary::Softplus => sigmoid(x),
                            Unary::Square => 2.0 * x,
                        };
                        ga[j] += g[j] * d;
                    }
                });
            }
            Op::Sum(a) => with_grad!(*a, |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = nodes[a.0].value.len() as f64;
                with_grad!(*a, |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::RowSum(a) => {
                let n = nodes[a.0].value.cols();
                with_grad!(*a, |ga| {
                    for (r, chunk) in ga.chunks_mut(n.max(1)).enumerate() {
                        chunk.iter_mut().for_each(|x| *x += g[r]);
                    }
                });
            }
            Op::Softmax(a) => {
                let n = *nodes[i].value.shape().last().unwrap_or(&1);
                with_grad!(*a, |ga| {
                    for ((y, gy), gx) in out
                        .chunks(n.max(1))
                        .zip(g.chunks(n.max(1)))
                        .zip(ga.chunks_mut(n.max(1)))
                    {
                        let s = dot(y, gy);
                        for j in 0..y.len() {
                            gx[j] += y[j] * (gy[j] - s);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = nodes[gain.0].value.len();
                let gv = val(*gain);
                with_grad!(*gain, |gg| {
                    for (gr, hr) in g.chunks(n.max(1)).zip(xhat.chunks(n.max(1))) {
                        for j in 0..n {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                });
                with_grad!(*bias, |gb| {
                    for gr in g.chunks(n.max(1)) {
                        axpy(1.0, gr, gb);
                    }
                });
                with_grad!(*x, |gx| {
                    let mut dxhat = vec![0.0; n];
                    for r in 0..rstd.len() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        for j in 0..n {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / n as f64;
                        let m2 = dot(&dxhat, hr) / n as f64;
                        let out = &mut gx[r * n..(r + 1) * n];
                        for j in 0..n {
                            out[j] += rstd[r] * (dxhat[j] - m1 - hr[j] * m2);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                pad,
                probs,
                count,
            } => {
                let v = nodes[logits.0].value.cols();
                let scale = g[0] / *count as f64;
                with_grad!(*logits, |gl| {
                    for (t, &tgt) in targets.iter().enumerate() {
                        if tgt == *pad {
                            continue;
                        }
                        let row = &mut gl[t * v..(t + 1) * v];
                        axpy(scale, &probs[t * v..(t + 1) * v], row);
                        row[tgt] -= scale;
                    }
                });
            }
            Op::Gather(table, ids) => {
                let d = nodes[table.0].value.cols();
                with_grad!(*table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(1.0, &g[r * d..(r + 1) * d], &mut gt[id * d..(id + 1) * d]);
                    }
                });
            }
            Op::Attention(c) => self.attention_backward(c, g, grads),
            Op::Reshape(a) => with_grad!(*a, |ga| axpy(1.0, g, ga)),
            Op::Slice(a, off) => {
                with_grad!(*a, |ga| axpy(1.0, g, &mut ga[*off..*off + g.len()]));
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = nodes[p.0].value.len();
                    with_grad!(*p, |gp| axpy(1.0, &g[off..off + n], gp));
                    off += n;
                }
            }
            Op::MaskedMeanRows(x, mask, count) => {
                let n = g.len();
                let inv = 1.0 / *count as f64;
                with_grad!(*x, |gx| {
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            axpy(inv, g, &mut gx[r * n..(r + 1) * n]);
                        }
                    }
                });
            }
            Op::Dropout(x, mask) => {
                with_grad!(*x, |gx| {
                    for j in 0..g.len() {
                        gx[j] += g[j] * mask[j];
                    }
                });
            }
        }
    }

    fn attention_backward(&self, c: &AttnCache, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let d = nodes[c.q.0].value.cols();
        let dh = d / c.heads;
        let (tq, tk, p_len) = (c.tq, c.tk, c.prefix_len);
        let width = p_len + tk;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let qd = nodes[c.q.0].value.data();
        let kd = nodes[c.k.0].value.data();
        let vd = nodes[c.v.0].value.data();
        let (pkd, pvd): (&[f64], &[f64]) = match c.prefix {
            Some((pk, pv)) => (nodes[pk.0].value.data(), nodes[pv.0].value.data()),
            None => (&[], &[]),
        };
        let need = |v: Var| nodes[v.0].requires_grad;
        let mut gq = vec![0.0; if need(c.q) { tq * d } else { 0 }];
        let mut gk = vec![0.0; if need(c.k) { tk * d } else { 0 }];
        let mut gv = vec![0.0; if need(c.v) { tk * d } else { 0 }];
        let want_prefix = c.prefix.is_some_and(|(pk, pv)| need(pk) || need(pv));
        let mut gpk = vec![0.0; if want_prefix { pkd.len() } else { 0 }];
        let mut gpv = vec![0.0; if want_prefix { pvd.len() } else { 0 }];
        let mut dp = vec![0.0; width];
        for h in 0..c.heads {
            let off = h * dh;
            let pbase = h * p_len * dh;
            for i in 0..tq {
                let row = &c.probs[(h * tq + i) * width..(h * tq + i + 1) * width];
                let go = &g[i * d + off..i * d + off + dh];
                for p in 0..p_len {
                    dp[p] = dot(go, &pvd[pbase + p * dh..pbase + (p + 1) * dh]);
                }
                for j in 0..tk {
                    dp[p_len + j] = if row[p_len + j] != 0.0 {
                        dot(go, &vd[j * d + off..j * d + off + dh])
                    } else {
                        0.0
                    };
                }
                let s = dot(row, &dp);
                // value grads
                if want_prefix {
                    for p in 0..p_len {
                        axpy(row[p], go, &mut gpv[pbase + p * dh..pbase + (p + 1) * dh]);
                    }
                }
                if !gv.is_empty() {
                    for j in 0..tk {
                        if row[p_len + j] != 0.0 {
                            axpy(row[p_len + j], go, &mut gv[j * d + off..j * d + off + dh]);
                        }
                    }
                }
                // score grads
                let qi = &qd[i * d + off..i * d + off + dh];
                for p in 0..p_len {
                    let ds = row[p] * (dp[p] - s) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    if !gq.is_empty() {
                        axpy(
                            ds,
                            &pkd[pbase + p * dh..pbase + (p + 1) * dh],
                            &mut gq[i * d + off..i * d + off + dh],
                        );
                    }
                    if want_prefix {
                        axpy(ds, qi, &mut gpk[pbase + p * dh..pbase + (p + 1) * dh]);
                    }
                }
                for j in 0..tk {
                    let pj = row[p_len + j];
                    if pj == 0.0 {
                        continue;
                    }
                    let ds = pj * (dp[p_len + j] - s) * scale;
                    if !gq.is_empty() {
                        axpy(
                            ds,
                            &kd[j * d + off..j * d + off + dh],
                            &mut gq[i * d + off..i * d + off + dh],
                        );
                    }
                    if !gk.is_empty() {
                        axpy(ds, qi, &mut gk[j * d + off..j * d + off + dh]);
                    }
                }
            }
        }
        let mut add = |v: Var, src: &[f64]| {
            if nodes[v.0].requires_grad && !src.is_empty() {
                let n = nodes[v.0].value.len();
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
                axpy(1.0, src, slot);
            }
        };
        add(c.q, &gq);
        add(c.k, &gk);
        add(c.v, &gv);
        if let Some((pk, pv)) = c.prefix {
            add(pk, &gpk);
            add(pv, &gpv);
        }
    }
}
