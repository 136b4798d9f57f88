//! Define-by-run reverse-mode tape.
//!
//! A [`Tape`] is built fresh for every forward pass. Each primitive pushes a
//! node holding its output value and enough saved state to run its backward
//! rule; `backward` then walks the nodes in reverse insertion order, which is
//! a valid reverse topological order because inputs always precede outputs.

use super::kernels::{gemm, MatRef};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// tanh-approximate GELU; forward and backward below use the same formula.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Indices of the `k` largest entries, ties going to the lower index,
/// returned in ascending index order.
pub fn select_top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Gelu,
    Relu,
    Sigmoid,
    Exp,
    Ln,
    XLogX,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        tb: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBias {
        a: Var,
        bias: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    MulScalar {
        a: Var,
        s: Var,
    },
    MulRows {
        a: Var,
        w: Var,
    },
    Unary {
        a: Var,
        kind: Unary,
    },
    Softmax {
        a: Var,
    },
    LogSoftmax {
        a: Var,
        mask: Option<Vec<bool>>,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    MeanRows {
        a: Var,
    },
    GatherRows {
        a: Var,
        idx: Vec<usize>,
    },
    IndexAddRows {
        a: Var,
        idx: Vec<usize>,
    },
    LayerNorm {
        a: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    MaskedFill {
        a: Var,
        mask: Vec<bool>,
    },
    TopK {
        a: Var,
        idx: Vec<usize>,
    },
    ScatterCols {
        a: Var,
        idx: Vec<usize>,
    },
    Pick {
        a: Var,
        idx: Vec<usize>,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Dropout {
        a: Var,
        scale: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation plus gradient storage.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Non-finite outputs are checked after every op in debug builds.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient after `backward`; `None` if nothing flowed into `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like `v`, zeros if nothing flowed into it.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.value(v).shape().to_vec();
        match self.grad(v) {
            Some(g) => Tensor::from_parts(shape, g.to_vec()),
            None => Tensor::zeros(&shape),
        }
    }

    /// Clears gradients so `backward` may run again on the same graph.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite {
                context: format!("output of {name}"),
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    // ---------------------------------------------------------------- linear algebra

    /// 2-D matrix product with optional transposition of either operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        let ar = orient(MatRef::new(self.data(a), sa[0], sa[1]), ta);
        let br = orient(MatRef::new(self.data(b), sb[0], sb[1]), tb);
        gemm(ar, br, 0.0, &mut out);
        let value = Tensor::from_parts(vec![m, n], out);
        self.push("matmul", value, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Batched product of `[n, m, k]` with `[n, k, p]` (or `[n, p, k]` when `tb`).
    pub fn bmm(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(self.mismatch("bmm", a, b));
        }
        let (nb, m, k) = (sa[0], sa[1], sa[2]);
        let (k2, p) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(self.mismatch("bmm", a, b));
        }
        let mut out = vec![0.0; nb * m * p];
        let (ad, bd) = (self.data(a), self.data(b));
        let bsz = sb[1] * sb[2];
        for i in 0..nb {
            let ar = MatRef::new(&ad[i * m * k..(i + 1) * m * k], m, k);
            let br = orient(MatRef::new(&bd[i * bsz..(i + 1) * bsz], sb[1], sb[2]), tb);
            gemm(ar, br, 0.0, &mut out[i * m * p..(i + 1) * m * p]);
        }
        let value = Tensor::from_parts(vec![nb, m, p], out);
        self.push("bmm", value, Op::BatchMatMul { a, b, tb }, &[a, b])
    }

    // ---------------------------------------------------------------- elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("add", a, b));
        }
        let out = zip_map(self.data(a), self.data(b), |x, y| x + y);
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        self.push("add", value, Op::Add { a, b }, &[a, b])
    }

    /// Adds a `[w]` vector to every row of `a` (last axis width `w`).
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let w = self.nodes[a.0].value.last_dim();
        if self.shape(bias) != [w] {
            return Err(self.mismatch("add_bias", a, bias));
        }
        let bd = self.data(bias);
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + bd[i % w])
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        self.push("add_bias", value, Op::AddBias { a, bias }, &[a, bias])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("mul", a, b));
        }
        let out = zip_map(self.data(a), self.data(b), |x, y| x * y);
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        self.push("mul", value, Op::Mul { a, b }, &[a, b])
    }

    /// Multiplies by a compile-time constant (no gradient w.r.t. the factor).
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.data(a).iter().map(|x| x * factor).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        self.push("scale", value, Op::Scale { a, factor }, &[a])
    }

    /// Multiplies every entry of `a` by the single-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.nodes[s.0].value.numel() != 1 {
            return Err(self.mismatch("mul_scalar", a, s));
        }
        let sv = self.data(s)[0];
        let out = self.data(a).iter().map(|x| x * sv).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        self.push("mul_scalar", value, Op::MulScalar { a, s }, &[a, s])
    }

    /// Scales row `r` of `a` by `w[r]`.
    pub fn mul_rows(&mut self, a: Var, w: Var) -> Result<Var> {
        let rows = self.nodes[a.0].value.rows();
        if self.nodes[w.0].value.numel() != rows {
            return Err(self.mismatch("mul_rows", a, w));
        }
        let width = self.nodes[a.0].value.last_dim();
        let wd = self.data(w);
        let out = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x * wd[i / width])
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        self.push("mul_rows", value, Op::MulRows { a, w }, &[a, w])
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Result<Var> {
        let (name, f): (&'static str, fn(f64) -> f64) = match kind {
            Unary::Gelu => ("gelu", gelu),
            Unary::Relu => ("relu", |x| x.max(0.0)),
            Unary::Sigmoid => ("sigmoid", sigmoid),
            Unary::Exp => ("exp", f64::exp),
            Unary::Ln => ("ln", f64::ln),
            Unary::XLogX => ("xlogx", |x| if x == 0.0 { 0.0 } else { x * x.ln() }),
        };
        let out = self.data(a).iter().map(|&x| f(x)).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        self.push(name, value, Op::Unary { a, kind }, &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Gelu)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Ln)
    }

    /// `x ln x` with `0 ln 0 = 0`. Negative inputs are a contract violation.
    pub fn xlogx(&mut self, a: Var) -> Result<Var> {
        if self.data(a).iter().any(|&x| x < 0.0) {
            return Err(Error::contract("xlogx: negative input"));
        }
        self.unary(a, Unary::XLogX)
    }

    // ---------------------------------------------------------------- softmax family

    fn check_mask(&self, op: &'static str, a: Var, mask: &Option<Vec<bool>>) -> Result<()> {
        match mask {
            Some(m) if m.len() != self.nodes[a.0].value.numel() => Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: vec![m.len()],
            }),
            _ => Ok(()),
        }
    }

    /// Softmax over the last axis. Entries with `mask[i] == false` are
    /// excluded and receive probability exactly 0; a fully masked row
    /// yields all zeros.
    pub fn softmax(&mut self, a: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        self.check_mask("softmax", a, &mask)?;
        let t = &self.nodes[a.0].value;
        let w = t.last_dim();
        let mut out = vec![0.0; t.numel()];
        for r in 0..t.rows() {
            let x = t.row(r);
            let keep = |j: usize| mask.as_ref().is_none_or(|m| m[r * w + j]);
            let max = (0..w)
                .filter(|&j| keep(j))
                .map(|j| x[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let o = &mut out[r * w..(r + 1) * w];
            let mut sum = 0.0;
            for j in (0..w).filter(|&j| keep(j)) {
                o[j] = (x[j] - max).exp();
                sum += o[j];
            }
            for j in (0..w).filter(|&j| keep(j)) {
                o[j] /= sum;
            }
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        self.push("softmax", value, Op::Softmax { a }, &[a])
    }

    /// Log-softmax over the last axis; masked entries are excluded from the
    /// normalizer and output 0 (they must not be consumed downstream).
    pub fn log_softmax(&mut self, a: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        self.check_mask("log_softmax", a, &mask)?;
        let t = &self.nodes[a.0].value;
        let w = t.last_dim();
        let mut out = vec![0.0; t.numel()];
        for r in 0..t.rows() {
            let x = t.row(r);
            let keep = |j: usize| mask.as_ref().is_none_or(|m| m[r * w + j]);
            let max = (0..w)
                .filter(|&j| keep(j))
                .map(|j| x[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let lse = max
                + (0..w)
                    .filter(|&j| keep(j))
                    .map(|j| (x[j] - max).exp())
                    .sum::<f64>()
                    .ln();
            for j in (0..w).filter(|&j| keep(j)) {
                out[r * w + j] = x[j] - lse;
            }
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        self.push("log_softmax", value, Op::LogSoftmax { a, mask }, &[a])
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.numel();
        if n == 0 {
            return Err(Error::contract("mean of empty tensor"));
        }
        let s = self.data(a).iter().sum::<f64>() / n as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean { a }, &[a])
    }

    /// Column means of `a` viewed as `[rows, w]`, giving `[w]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (rows, w) = (t.rows(), t.last_dim());
        if rows == 0 {
            return Err(Error::contract("mean_rows of zero rows"));
        }
        let mut out = vec![0.0; w];
        for r in 0..rows {
            for (o, x) in out.iter_mut().zip(t.row(r)) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= rows as f64);
        self.push("mean_rows", Tensor::from_parts(vec![w], out), Op::MeanRows { a }, &[a])
    }

    // ---------------------------------------------------------------- indexing

    /// Gathers rows of `a` (viewed as `[rows, w]`), producing `[idx.len(), w]`.
    /// Also serves as the embedding lookup.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (rows, w) = (t.rows(), t.last_dim());
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(format!(
                "gather_rows: index {bad} out of range for {rows} rows"
            )));
        }
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in &idx {
            out.extend_from_slice(t.row(i));
        }
        let value = Tensor::from_parts(vec![idx.len(), w], out);
        self.push("gather_rows", value, Op::GatherRows { a, idx }, &[a])
    }

    /// Scatter-add: output `[n_rows, w]` zeros with row `idx[i]` += row `i` of `a`.
    pub fn index_add_rows(&mut self, a: Var, idx: Vec<usize>, n_rows: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let w = t.last_dim();
        if idx.len() != t.rows() {
            return Err(Error::Shape {
                op: "index_add_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n_rows) {
            return Err(Error::contract(format!(
                "index_add_rows: index {bad} out of range for {n_rows} rows"
            )));
        }
        let mut out = vec![0.0; n_rows * w];
        for (src, &dst) in idx.iter().enumerate() {
            for (o, x) in out[dst * w..(dst + 1) * w].iter_mut().zip(t.row(src)) {
                *o += x;
            }
        }
        let value = Tensor::from_parts(vec![n_rows, w], out);
        self.push("index_add_rows", value, Op::IndexAddRows { a, idx }, &[a])
    }

    /// Picks `a[r, idx[r]]` for each row, giving `[rows]`.
    pub fn pick(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (rows, w) = (t.rows(), t.last_dim());
        if idx.len() != rows {
            return Err(Error::Shape {
                op: "pick",
                lhs: t.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= w) {
            return Err(Error::contract(format!("pick: column {bad} out of range {w}")));
        }
        let out = idx.iter().enumerate().map(|(r, &j)| t.row(r)[j]).collect();
        self.push("pick", Tensor::from_parts(vec![rows], out), Op::Pick { a, idx }, &[a])
    }

    /// Selects the `k` largest entries of each row (ties to the lower index),
    /// returning their values `[rows, k]` in ascending index order together
    /// with the selected indices (row-major, `rows * k`). Gradient flows only
    /// into the selected positions.
    pub fn top_k(&mut self, a: Var, k: usize) -> Result<(Var, Vec<usize>)> {
        let t = &self.nodes[a.0].value;
        let (rows, w) = (t.rows(), t.last_dim());
        if k == 0 || k > w {
            return Err(Error::contract(format!("top_k: k={k} outside 1..={w}")));
        }
        let mut idx = Vec::with_capacity(rows * k);
        let mut out = Vec::with_capacity(rows * k);
        for r in 0..rows {
            let row = t.row(r);
            for j in select_top_k(row, k) {
                idx.push(j);
                out.push(row[j]);
            }
        }
        let value = Tensor::from_parts(vec![rows, k], out);
        let v = self.push("top_k", value, Op::TopK { a, idx: idx.clone() }, &[a])?;
        Ok((v, idx))
    }

    /// Inverse of [`Tape::top_k`]'s compaction: places row `r` of `a`
    /// (`[rows, k]`) at columns `idx[r*k..]` of a zero `[rows, width]` tensor.
    pub fn scatter_cols(&mut self, a: Var, idx: Vec<usize>, width: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (rows, k) = (t.rows(), t.last_dim());
        if idx.len() != rows * k {
            return Err(Error::Shape {
                op: "scatter_cols",
                lhs: t.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        if idx.iter().any(|&j| j >= width) {
            return Err(Error::contract("scatter_cols: column out of range"));
        }
        let mut out = vec![0.0; rows * width];
        for r in 0..rows {
            for s in 0..k {
                out[r * width + idx[r * k + s]] = t.data()[r * k + s];
            }
        }
        let value = Tensor::from_parts(vec![rows, width], out);
        self.push("scatter_cols", value, Op::ScatterCols { a, idx }, &[a])
    }

    /// Replaces entries where `mask` is true with `fill`; those entries get no gradient.
    pub fn masked_fill(&mut self, a: Var, mask: Vec<bool>, fill: f64) -> Result<Var> {
        self.check_mask("masked_fill", a, &Some(mask.clone()))?;
        if !fill.is_finite() {
            return Err(Error::contract("masked_fill: fill value must be finite"));
        }
        let out = self
            .data(a)
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| if m { fill } else { x })
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        self.push("masked_fill", value, Op::MaskedFill { a, mask }, &[a])
    }

    /// Concatenates along the first axis; trailing dims must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let tail = self.shape(first).get(1..).unwrap_or(&[]).to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(self.mismatch("concat", first, p));
            }
            lead += s[0];
            out.extend_from_slice(self.data(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let value = Tensor::from_parts(shape, out);
        self.push(
            "concat",
            value,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            parts,
        )
    }

    // ---------------------------------------------------------------- layout

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.nodes[a.0].value.clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape { a }, &[a])
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: Vec<usize>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape {
                op: "permute",
                lhs: shape,
                rhs: perm,
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = permute_data(self.data(a), &shape, &perm);
        let value = Tensor::from_parts(out_shape, out);
        self.push("permute", value, Op::Permute { a, perm }, &[a])
    }

    // ---------------------------------------------------------------- normalization / noise

    /// Layer normalization over the last axis with affine `gamma`, `beta` of width `w`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let w = self.nodes[a.0].value.last_dim();
        if self.shape(gamma) != [w] {
            return Err(self.mismatch("layer_norm", a, gamma));
        }
        if self.shape(beta) != [w] {
            return Err(self.mismatch("layer_norm", a, beta));
        }
        let t = &self.nodes[a.0].value;
        let (g, b) = (self.data(gamma), self.data(beta));
        let rows = t.rows();
        let mut out = vec![0.0; t.numel()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = t.row(r);
            let mean = x.iter().sum::<f64>() / w as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..w {
                out[r * w + j] = g[j] * (x[j] - mean) * rstd + b[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                a,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
            &[a, gamma, beta],
        )
    }

    /// Inverted dropout with a caller-supplied keep mask.
    pub fn dropout(&mut self, a: Var, keep: &[bool], rate: f64) -> Result<Var> {
        if keep.len() != self.nodes[a.0].value.numel() {
            return Err(Error::Shape {
                op: "dropout",
                lhs: self.shape(a).to_vec(),
                rhs: vec![keep.len()],
            });
        }
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        let inv = 1.0 / (1.0 - rate);
        let scale: Vec<f64> = keep.iter().map(|&k| if k { inv } else { 0.0 }).collect();
        let out = zip_map(self.data(a), &scale, |x, s| x * s);
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        self.push("dropout", value, Op::Dropout { a, scale }, &[a])
    }

    // ---------------------------------------------------------------- backward

    /// Populates gradients of every requires-grad node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::contract(
                "backward called twice without reset_grads",
            ));
        }
        let node = &self.nodes[loss.0];
        if node.value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.requires_grad {
            return Err(Error::contract(
                "loss does not depend on any requires-grad tensor",
            ));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            backprop(&self.nodes, &mut self.grads, i, &g);
            self.grads[i] = Some(g);
        }
        self.backward_done = true;
        Ok(())
    }
}

fn orient(m: MatRef<'_>, transposed: bool) -> MatRef<'_> {
    if transposed {
        m.t()
    } else {
        m
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    // stride in the input for a unit step along each output axis
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut counter = vec![0usize; out_shape.len()];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(data[src]);
        for ax in (0..out_shape.len()).rev() {
            counter[ax] += 1;
            src += step[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            src -= step[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    out
}

/// Gradient buffer for `v`, allocated on first use; `None` for constants.
fn grad_buf<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, contrib: impl Fn(usize) -> f64) {
    if let Some(buf) = grad_buf(nodes, grads, v) {
        for (i, b) in buf.iter_mut().enumerate() {
            *b += contrib(i);
        }
    }
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let out = &nodes[i].value;
    let val = |v: Var| &nodes[v.0].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul { a, b, ta, tb } => {
            let (sa, sb) = (val(*a).shape(), val(*b).shape());
            let (m, n) = (out.shape()[0], out.shape()[1]);
            let gm = MatRef::new(g, m, n);
            let am = orient(MatRef::new(val(*a).data(), sa[0], sa[1]), *ta);
            let bm = orient(MatRef::new(val(*b).data(), sb[0], sb[1]), *tb);
            if let Some(buf) = grad_buf(nodes, grads, *a) {
                if *ta {
                    gemm(bm, gm.t(), 1.0, buf);
                } else {
                    gemm(gm, bm.t(), 1.0, buf);
                }
            }
            if let Some(buf) = grad_buf(nodes, grads, *b) {
                if *tb {
                    gemm(gm.t(), am, 1.0, buf);
                } else {
                    gemm(am.t(), gm, 1.0, buf);
                }
            }
        }
        Op::BatchMatMul { a, b, tb } => {
            let (sa, sb) = (val(*a).shape().to_vec(), val(*b).shape().to_vec());
            let (nb, m, k) = (sa[0], sa[1], sa[2]);
            let p = out.shape()[2];
            let bsz = sb[1] * sb[2];
            if let Some(buf) = grad_buf(nodes, grads, *a) {
                for t in 0..nb {
                    let gm = MatRef::new(&g[t * m * p..(t + 1) * m * p], m, p);
                    let bm = orient(
                        MatRef::new(&val(*b).data()[t * bsz..(t + 1) * bsz], sb[1], sb[2]),
                        *tb,
                    );
                    gemm(gm, bm.t(), 1.0, &mut buf[t * m * k..(t + 1) * m * k]);
                }
            }
            if let Some(buf) = grad_buf(nodes, grads, *b) {
                for t in 0..nb {
                    let gm = MatRef::new(&g[t * m * p..(t + 1) * m * p], m, p);
                    let am = MatRef::new(&val(*a).data()[t * m * k..(t + 1) * m * k], m, k);
                    let dst = &mut buf[t * bsz..(t + 1) * bsz];
                    if *tb {
                        gemm(gm.t(), am, 1.0, dst);
                    } else {
                        gemm(am.t(), gm, 1.0, dst);
                    }
                }
            }
        }
        Op::Add { a, b } => {
            accumulate(nodes, grads, *a, |j| g[j]);
            accumulate(nodes, grads, *b, |j| g[j]);
        }
        Op::AddBias { a, bias } => {
            accumulate(nodes, grads, *a, |j| g[j]);
            if let Some(buf) = grad_buf(nodes, grads, *bias) {
                let w = buf.len();
                for (j, gv) in g.iter().enumerate() {
                    buf[j % w] += gv;
                }
            }
        }
        Op::Mul { a, b } => {
            let (ad, bd) = (val(*a).data(), val(*b).data());
            accumulate(nodes, grads, *a, |j| g[j] * bd[j]);
            accumulate(nodes, grads, *b, |j| g[j] * ad[j]);
        }
        Op::Scale { a, factor } => accumulate(nodes, grads, *a, |j| g[j] * factor),
        Op::MulScalar { a, s } => {
            let sv = val(*s).data()[0];
            accumulate(nodes, grads, *a, |j| g[j] * sv);
            let ad = val(*a).data();
            let dot: f64 = g.iter().zip(ad).map(|(x, y)| x * y).sum();
            accumulate(nodes, grads, *s, |_| dot);
        }
        Op::MulRows { a, w } => {
            let width = val(*a).last_dim();
            let (ad, wd) = (val(*a).data(), val(*w).data());
            accumulate(nodes, grads, *a, |j| g[j] * wd[j / width]);
            if let Some(buf) = grad_buf(nodes, grads, *w) {
                for (j, (gv, av)) in g.iter().zip(ad).enumerate() {
                    buf[j / width] += gv * av;
                }
            }
        }
        Op::Unary { a, kind } => {
            let x = val(*a).data();
            let y = out.data();
            match kind {
                Unary::Gelu => accumulate(nodes, grads, *a, |j| g[j] * gelu_grad(x[j])),
                Unary::Relu => {
                    accumulate(nodes, grads, *a, |j| if x[j] > 0.0 { g[j] } else { 0.0 })
                }
                Unary::Sigmoid => accumulate(nodes, grads, *a, |j| g[j] * y[j] * (1.0 - y[j])),
                Unary::Exp => accumulate(nodes, grads, *a, |j| g[j] * y[j]),
                Unary::Ln => accumulate(nodes, grads, *a, |j| g[j] / x[j]),
                // d/dx x ln x = ln x + 1; at the 0 boundary the entry is treated as inactive.
                Unary::XLogX => accumulate(nodes, grads, *a, |j| {
                    if x[j] == 0.0 {
                        0.0
                    } else {
                        g[j] * (x[j].ln() + 1.0)
                    }
                }),
            }
        }
        Op::Softmax { a } => {
            let y = out.data();
            let w = out.last_dim();
            let dots: Vec<f64> = (0..out.rows())
                .map(|r| (0..w).map(|j| g[r * w + j] * y[r * w + j]).sum())
                .collect();
            accumulate(nodes, grads, *a, |j| y[j] * (g[j] - dots[j / w]));
        }
        Op::LogSoftmax { a, mask } => {
            let y = out.data();
            let w = out.last_dim();
            let keep = |j: usize| mask.as_ref().is_none_or(|m| m[j]);
            let sums: Vec<f64> = (0..out.rows())
                .map(|r| (r * w..(r + 1) * w).filter(|&j| keep(j)).map(|j| g[j]).sum())
                .collect();
            accumulate(nodes, grads, *a, |j| {
                if keep(j) {
                    g[j] - y[j].exp() * sums[j / w]
                } else {
                    0.0
                }
            });
        }
        Op::Sum { a } => accumulate(nodes, grads, *a, |_| g[0]),
        Op::Mean { a } => {
            let n = val(*a).numel() as f64;
            accumulate(nodes, grads, *a, |_| g[0] / n);
        }
        Op::MeanRows { a } => {
            let rows = val(*a).rows() as f64;
            let w = out.numel();
            accumulate(nodes, grads, *a, |j| g[j % w] / rows);
        }
        Op::GatherRows { a, idx } => {
            if let Some(buf) = grad_buf(nodes, grads, *a) {
                let w = out.last_dim();
                for (r, &src) in idx.iter().enumerate() {
                    for (b, gv) in buf[src * w..(src + 1) * w].iter_mut().zip(&g[r * w..(r + 1) * w]) {
                        *b += gv;
                    }
                }
            }
        }
        Op::IndexAddRows { a, idx } => {
            let w = out.last_dim();
            accumulate(nodes, grads, *a, |j| g[idx[j / w] * w + j % w]);
        }
        Op::Pick { a, idx } => {
            if let Some(buf) = grad_buf(nodes, grads, *a) {
                let w = val(*a).last_dim();
                for (r, &c) in idx.iter().enumerate() {
                    buf[r * w + c] += g[r];
                }
            }
        }
        Op::TopK { a, idx } => {
            if let Some(buf) = grad_buf(nodes, grads, *a) {
                let w = val(*a).last_dim();
                let k = out.last_dim();
                for (s, &c) in idx.iter().enumerate() {
                    buf[(s / k) * w + c] += g[s];
                }
            }
        }
        Op::ScatterCols { a, idx } => {
            let width = out.last_dim();
            let k = val(*a).last_dim();
            accumulate(nodes, grads, *a, |s| g[(s / k) * width + idx[s]]);
        }
        Op::MaskedFill { a, mask } => {
            accumulate(nodes, grads, *a, |j| if mask[j] { 0.0 } else { g[j] })
        }
        Op::ConcatRows { parts } => {
            let mut off = 0;
            for &p in parts {
                let n = val(p).numel();
                accumulate(nodes, grads, p, |j| g[off + j]);
                off += n;
            }
        }
        Op::Reshape { a } => accumulate(nodes, grads, *a, |j| g[j]),
        Op::Permute { a, perm } => {
            // Undo the permutation: permute the gradient by the inverse.
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let back = permute_data(g, out.shape(), &inv);
            accumulate(nodes, grads, *a, |j| back[j]);
        }
        Op::Dropout { a, scale } => accumulate(nodes, grads, *a, |j| g[j] * scale[j]),
        Op::LayerNorm {
            a,
            gamma,
            beta,
            mean,
            rstd,
        } => {
            let x = val(*a).data();
            let gam = val(*gamma).data();
            let w = gam.len();
            let rows = out.rows();
            let xhat = |r: usize, j: usize| (x[r * w + j] - mean[r]) * rstd[r];
            if let Some(buf) = grad_buf(nodes, grads, *gamma) {
                for r in 0..rows {
                    for j in 0..w {
                        buf[j] += g[r * w + j] * xhat(r, j);
                    }
                }
            }
            if let Some(buf) = grad_buf(nodes, grads, *beta) {
                for r in 0..rows {
                    for j in 0..w {
                        buf[j] += g[r * w + j];
                    }
                }
            }
            if let Some(buf) = grad_buf(nodes, grads, *a) {
                for r in 0..rows {
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..w {
                        let gx = g[r * w + j] * gam[j];
                        m1 += gx;
                        m2 += gx * xhat(r, j);
                    }
                    m1 /= w as f64;
                    m2 /= w as f64;
                    for j in 0..w {
                        let gx = g[r * w + j] * gam[j];
                        buf[r * w + j] += rstd[r] * (gx - m1 - xhat(r, j) * m2);
                    }
                }
            }
        }
    }
}
