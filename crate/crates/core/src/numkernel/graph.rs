//! Eager reverse-mode autodiff.
//!
//! A [`Graph`] records every operation as it is evaluated. Values are
//! computed immediately; [`Graph::backward`] walks the recorded nodes in
//! reverse creation order, which is a valid topological order because an
//! operation can only consume nodes that already exist.
//!
//! A graph lives for one forward/backward pass. Parameters are pulled in
//! from a borrowed [`ParamStore`] as leaves and their gradients are read
//! back with [`Graph::param_grads`] before the graph is dropped.

use std::cell::{Ref, RefCell};

use super::params::{ParamId, ParamStore};
use super::tensor::{kernels, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    SumAll(Var),
    MeanAll(Var),
    RowSums(Var),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    PickPerRow {
        x: Var,
        cols: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ReplaceRows {
        x: Var,
        row: Var,
        positions: Vec<usize>,
    },
    Reshape(Var),
    ArgmaxRows,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Gelu(..) => "gelu",
            Op::SoftmaxRows(..) => "softmax",
            Op::LogSoftmaxRows(..) => "log_softmax",
            Op::LayerNormRows { .. } => "layernorm",
            Op::L2NormalizeRows { .. } => "l2_normalize",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::RowSums(..) => "row_sums",
            Op::GatherRows { .. } => "gather_rows",
            Op::PickPerRow { .. } => "pick_per_row",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::ReplaceRows { .. } => "replace_rows",
            Op::Reshape(..) => "reshape",
            Op::ArgmaxRows => "argmax_rows",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Tape of evaluated operations.
pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: RefCell<Vec<Node>>,
    param_vars: RefCell<Vec<Option<Var>>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<'p> Graph<'p> {
    /// A graph with no parameter store; only inputs and constants.
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: RefCell::new(Vec::new()),
            param_vars: RefCell::new(Vec::new()),
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            nodes: RefCell::new(Vec::with_capacity(4096)),
            param_vars: RefCell::new(vec![None; params.len()]),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Leaf that gradients flow into.
    pub fn input(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.borrow()[id.0] {
            return v;
        }
        let store = self.params.expect("graph has no parameter store");
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.param_vars.borrow_mut()[id.0] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.nodes.borrow()[v.0].grad.clone()
    }

    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    /// Gradients of every parameter that took part in the graph.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let nodes = self.nodes.borrow();
        self.param_vars
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                nodes[v.0].grad.clone().map(|g| (ParamId(i), g))
            })
            .collect()
    }

    // ---- operations ----

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k) = ta.require_matrix("matmul")?;
            let (k2, n) = tb.require_matrix("matmul")?;
            if k != k2 {
                return Err(mismatch("matmul", ta, tb));
            }
            let mut c = vec![0.0; m * n];
            kernels::mm_nn(ta.data(), tb.data(), &mut c, m, k, n);
            Tensor::from_parts(vec![m, n], c)
        };
        Ok(self.push(out, Op::MatMul(a, b), self.rg(&[a, b])))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k) = ta.require_matrix("matmul_nt")?;
            let (n, k2) = tb.require_matrix("matmul_nt")?;
            if k != k2 {
                return Err(mismatch("matmul_nt", ta, tb));
            }
            let mut c = vec![0.0; m * n];
            kernels::mm_nt(ta.data(), tb.data(), &mut c, m, k, n);
            Tensor::from_parts(vec![m, n], c)
        };
        Ok(self.push(out, Op::MatMulNt(a, b), self.rg(&[a, b])))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let (m, n) = t.require_matrix("transpose")?;
            Tensor::from_parts(vec![n, m], transpose_raw(t.data(), m, n))
        };
        Ok(self.push(out, Op::Transpose(a), self.rg(&[a])))
    }

    fn elementwise(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape() != tb.shape() {
                return Err(mismatch(name, ta, tb));
            }
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(ta.shape().to_vec(), data)
        };
        Ok(self.push(out, op, self.rg(&[a, b])))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `[1, n]` row to every row of an `[m, n]` matrix.
    pub fn add_row(&self, x: Var, row: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (tx, tr) = (&nodes[x.0].value, &nodes[row.0].value);
            let (m, n) = tx.require_matrix("add_row")?;
            if tr.len() != n || tr.rows() != 1 {
                return Err(mismatch("add_row", tx, tr));
            }
            let mut data = tx.data().to_vec();
            for r in 0..m {
                for (v, b) in data[r * n..(r + 1) * n].iter_mut().zip(tr.data()) {
                    *v += b;
                }
            }
            Tensor::from_parts(vec![m, n], data)
        };
        Ok(self.push(out, Op::AddRow(x, row), self.rg(&[x, row])))
    }

    /// Scalar-times-tensor.
    pub fn scale(&self, x: Var, s: f64) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|v| v * s).collect())
        };
        self.push(out, Op::Scale(x, s), self.rg(&[x]))
    }

    fn unary(&self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
        };
        self.push(out, op, self.rg(&[x]))
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn softmax_rows(&self, x: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let (m, n) = t.require_matrix("softmax")?;
            let mut data = t.data().to_vec();
            for r in 0..m {
                softmax_in_place(&mut data[r * n..(r + 1) * n]);
            }
            Tensor::from_parts(vec![m, n], data)
        };
        Ok(self.push(out, Op::SoftmaxRows(x), self.rg(&[x])))
    }

    pub fn log_softmax_rows(&self, x: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let (m, n) = t.require_matrix("log_softmax")?;
            let mut data = t.data().to_vec();
            for r in 0..m {
                let row = &mut data[r * n..(r + 1) * n];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                row.iter_mut().for_each(|v| *v -= lse);
            }
            Tensor::from_parts(vec![m, n], data)
        };
        Ok(self.push(out, Op::LogSoftmaxRows(x), self.rg(&[x])))
    }

    /// Per-row normalization to zero mean and unit variance, then `γ ⊙ x̂ + β`.
    pub fn layernorm_rows(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, xhat, rstd) = {
            let nodes = self.nodes.borrow();
            let (t, g, b) = (&nodes[x.0].value, &nodes[gamma.0].value, &nodes[beta.0].value);
            let (m, n) = t.require_matrix("layernorm")?;
            if g.len() != n || b.len() != n {
                return Err(mismatch("layernorm", t, g));
            }
            let mut xhat = vec![0.0; m * n];
            let mut rstd = vec![0.0; m];
            let mut out = vec![0.0; m * n];
            for r in 0..m {
                let row = &t.data()[r * n..(r + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let rs = 1.0 / (var + eps).sqrt();
                rstd[r] = rs;
                for c in 0..n {
                    let h = (row[c] - mean) * rs;
                    xhat[r * n + c] = h;
                    out[r * n + c] = h * g.data()[c] + b.data()[c];
                }
            }
            (Tensor::from_parts(vec![m, n], out), xhat, rstd)
        };
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&self, x: Var) -> Result<Var> {
        let (out, norms) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let (m, n) = t.require_matrix("l2_normalize")?;
            let mut data = t.data().to_vec();
            let mut norms = vec![0.0; m];
            for r in 0..m {
                let row = &mut data[r * n..(r + 1) * n];
                let norm = kernels::dot(row, row).sqrt();
                if norm == 0.0 {
                    return Err(Error::NonFinite("l2_normalize of a zero row".into()));
                }
                norms[r] = norm;
                row.iter_mut().for_each(|v| *v /= norm);
            }
            (Tensor::from_parts(vec![m, n], data), norms)
        };
        Ok(self.push(out, Op::L2NormalizeRows { x, norms }, self.rg(&[x])))
    }

    /// Cosine similarity between every row of `a` and every row of `b`.
    pub fn cosine_similarity(&self, a: Var, b: Var) -> Result<Var> {
        let na = self.l2_normalize_rows(a)?;
        let nb = self.l2_normalize_rows(b)?;
        self.matmul_nt(na, nb)
    }

    pub fn sum(&self, x: Var) -> Var {
        let s = self.nodes.borrow()[x.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), self.rg(&[x]))
    }

    pub fn mean(&self, x: Var) -> Var {
        let s = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            t.data().iter().sum::<f64>() / t.len() as f64
        };
        self.push(Tensor::scalar(s), Op::MeanAll(x), self.rg(&[x]))
    }

    /// `[m, n] → [m, 1]`
    pub fn row_sums(&self, x: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let (m, n) = t.require_matrix("row_sums")?;
            let data = (0..m).map(|r| t.data()[r * n..(r + 1) * n].iter().sum()).collect();
            Tensor::from_parts(vec![m, 1], data)
        };
        Ok(self.push(out, Op::RowSums(x), self.rg(&[x])))
    }

    /// Selects rows of a `[v, d]` table (embedding lookup).
    pub fn gather_rows(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[table.0].value;
            let (v, d) = t.require_matrix("gather_rows")?;
            if ids.is_empty() {
                return Err(Error::InvalidArgument("gather_rows with no ids".into()));
            }
            let mut data = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= v {
                    return Err(Error::IndexOutOfRange { index: id, len: v });
                }
                data.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
            }
            Tensor::from_parts(vec![ids.len(), d], data)
        };
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            self.rg(&[table]),
        ))
    }

    /// Picks `x[i, cols[i]]` for every row, giving `[m, 1]`.
    pub fn pick_per_row(&self, x: Var, cols: &[usize]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let (m, n) = t.require_matrix("pick_per_row")?;
            if cols.len() != m {
                return Err(Error::ShapeMismatch {
                    op: "pick_per_row",
                    lhs: vec![m, n],
                    rhs: vec![cols.len()],
                });
            }
            let mut data = Vec::with_capacity(m);
            for (r, &c) in cols.iter().enumerate() {
                if c >= n {
                    return Err(Error::IndexOutOfRange { index: c, len: n });
                }
                data.push(t.data()[r * n + c]);
            }
            Tensor::from_parts(vec![m, 1], data)
        };
        Ok(self.push(
            out,
            Op::PickPerRow {
                x,
                cols: cols.to_vec(),
            },
            self.rg(&[x]),
        ))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts.first().ok_or_else(|| {
                Error::InvalidArgument("concat_rows of nothing".into())
            })?
            .0]
                .value;
            let (_, n) = first.require_matrix("concat_rows")?;
            let mut rows = 0;
            let mut data = Vec::new();
            for p in parts {
                let t = &nodes[p.0].value;
                let (m, n2) = t.require_matrix("concat_rows")?;
                if n2 != n {
                    return Err(mismatch("concat_rows", first, t));
                }
                rows += m;
                data.extend_from_slice(t.data());
            }
            Tensor::from_parts(vec![rows, n], data)
        };
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), self.rg(parts)))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts.first().ok_or_else(|| {
                Error::InvalidArgument("concat_cols of nothing".into())
            })?
            .0]
                .value;
            let (m, _) = first.require_matrix("concat_cols")?;
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let t = &nodes[p.0].value;
                let (m2, n) = t.require_matrix("concat_cols")?;
                if m2 != m {
                    return Err(mismatch("concat_cols", first, t));
                }
                widths.push(n);
            }
            let total: usize = widths.iter().sum();
            let mut data = vec![0.0; m * total];
            let mut offset = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                let t = &nodes[p.0].value;
                for r in 0..m {
                    data[r * total + offset..r * total + offset + w]
                        .copy_from_slice(&t.data()[r * w..(r + 1) * w]);
                }
                offset += w;
            }
            Tensor::from_parts(vec![m, total], data)
        };
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), self.rg(parts)))
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let (m, n) = t.require_matrix("slice_cols")?;
            if len == 0 || start + len > n {
                return Err(Error::IndexOutOfRange {
                    index: start + len,
                    len: n,
                });
            }
            let mut data = Vec::with_capacity(m * len);
            for r in 0..m {
                data.extend_from_slice(&t.data()[r * n + start..r * n + start + len]);
            }
            Tensor::from_parts(vec![m, len], data)
        };
        Ok(self.push(out, Op::SliceCols { x, start }, self.rg(&[x])))
    }

    /// Copy of `x` with each row listed in `positions` replaced by `row`.
    pub fn replace_rows(&self, x: Var, row: Var, positions: &[usize]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (t, tr) = (&nodes[x.0].value, &nodes[row.0].value);
            let (m, n) = t.require_matrix("replace_rows")?;
            if tr.len() != n {
                return Err(mismatch("replace_rows", t, tr));
            }
            let mut data = t.data().to_vec();
            for &p in positions {
                if p >= m {
                    return Err(Error::IndexOutOfRange { index: p, len: m });
                }
                data[p * n..(p + 1) * n].copy_from_slice(tr.data());
            }
            Tensor::from_parts(vec![m, n], data)
        };
        let mut positions = positions.to_vec();
        positions.sort_unstable();
        positions.dedup();
        Ok(self.push(out, Op::ReplaceRows { x, row, positions }, self.rg(&[x, row])))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.nodes.borrow()[x.0].value.reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x), self.rg(&[x])))
    }

    /// Same value, cut off from differentiation.
    pub fn detach(&self, x: Var) -> Var {
        let v = self.nodes.borrow()[x.0].value.clone();
        self.constant(v)
    }

    /// Column index of each row's maximum as `[m, 1]`; not differentiable.
    pub fn argmax_rows(&self, x: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let (m, n) = t.require_matrix("argmax_rows")?;
            let data = (0..m)
                .map(|r| {
                    let row = &t.data()[r * n..(r + 1) * n];
                    let mut best = 0;
                    for (c, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = c;
                        }
                    }
                    best as f64
                })
                .collect();
            Tensor::from_parts(vec![m, 1], data)
        };
        Ok(self.push(out, Op::ArgmaxRows, self.rg(&[x])))
    }

    // ---- reverse pass ----

    /// Propagates `d loss / d node` to every leaf that requires a gradient,
    /// adding into the leaves' accumulators.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let leaf_grads = {
            let nodes = self.nodes.borrow();
            let root = &nodes[loss.0];
            if !root.value.is_scalar() {
                return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
            }
            let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
            grads.resize_with(loss.0 + 1, || None);
            grads[loss.0] = Some(vec![1.0]);
            let mut leaf_grads = Vec::new();

            for i in (0..=loss.0).rev() {
                let Some(g) = grads[i].take() else { continue };
                let node = &nodes[i];
                if !node.requires_grad {
                    continue;
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "gradient flowing into `{}` (node {i})",
                        node.op.name()
                    )));
                }
                propagate(&nodes, &mut grads, i, g, &mut leaf_grads)?;
            }
            leaf_grads
        };

        let mut nodes = self.nodes.borrow_mut();
        for (i, g) in leaf_grads {
            let node = &mut nodes[i];
            match &mut node.grad {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(&g)
                    .for_each(|(a, b)| *a += b),
                None => node.grad = Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
            }
        }
        Ok(())
    }
}

/// Adds `f`'s contribution into the gradient slot of `v`.
fn accumulate(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    v: Var,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
    f(slot);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn propagate(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    i: usize,
    g: Vec<f64>,
    leaf_grads: &mut Vec<(usize, Vec<f64>)>,
) -> Result<()> {
    let node = &nodes[i];
    let out = &node.value;
    match &node.op {
        Op::Leaf => leaf_grads.push((i, g)),
        Op::MatMul(a, b) => {
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
            accumulate(nodes, grads, *a, |ga| kernels::mm_nt(&g, tb.data(), ga, m, n, k));
            accumulate(nodes, grads, *b, |gb| kernels::mm_tn(ta.data(), &g, gb, m, k, n));
        }
        Op::MatMulNt(a, b) => {
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
            accumulate(nodes, grads, *a, |ga| kernels::mm_nn(&g, tb.data(), ga, m, n, k));
            accumulate(nodes, grads, *b, |gb| kernels::mm_tn(&g, ta.data(), gb, m, n, k));
        }
        Op::Transpose(a) => {
            let (m, n) = (out.rows(), out.cols());
            let gt = transpose_raw(&g, m, n);
            accumulate(nodes, grads, *a, |ga| add_into(ga, &gt));
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |ga| add_into(ga, &g));
            accumulate(nodes, grads, *b, |gb| add_into(gb, &g));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |ga| add_into(ga, &g));
            accumulate(nodes, grads, *b, |gb| {
                gb.iter_mut().zip(&g).for_each(|(d, s)| *d -= s)
            });
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            accumulate(nodes, grads, *a, |ga| {
                for ((d, gv), bv) in ga.iter_mut().zip(&g).zip(tb.data()) {
                    *d += gv * bv;
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for ((d, gv), av) in gb.iter_mut().zip(&g).zip(ta.data()) {
                    *d += gv * av;
                }
            });
        }
        Op::AddRow(x, row) => {
            let n = out.cols();
            accumulate(nodes, grads, *x, |gx| add_into(gx, &g));
            accumulate(nodes, grads, *row, |gr| {
                for chunk in g.chunks_exact(n) {
                    add_into(gr, chunk);
                }
            });
        }
        Op::Scale(x, s) => {
            accumulate(nodes, grads, *x, |gx| {
                gx.iter_mut().zip(&g).for_each(|(d, v)| *d += v * s)
            });
        }
        Op::Exp(x) => {
            accumulate(nodes, grads, *x, |gx| {
                for ((d, gv), y) in gx.iter_mut().zip(&g).zip(out.data()) {
                    *d += gv * y;
                }
            });
        }
        Op::Log(x) => {
            let tx = &nodes[x.0].value;
            accumulate(nodes, grads, *x, |gx| {
                for ((d, gv), xv) in gx.iter_mut().zip(&g).zip(tx.data()) {
                    *d += gv / xv;
                }
            });
        }
        Op::Gelu(x) => {
            let tx = &nodes[x.0].value;
            accumulate(nodes, grads, *x, |gx| {
                for ((d, gv), &xv) in gx.iter_mut().zip(&g).zip(tx.data()) {
                    *d += gv * gelu_grad(xv);
                }
            });
        }
        Op::SoftmaxRows(x) => {
            let n = out.cols();
            accumulate(nodes, grads, *x, |gx| {
                for ((dr, gr), yr) in gx
                    .chunks_exact_mut(n)
                    .zip(g.chunks_exact(n))
                    .zip(out.data().chunks_exact(n))
                {
                    let s = kernels::dot(gr, yr);
                    for ((d, gv), y) in dr.iter_mut().zip(gr).zip(yr) {
                        *d += y * (gv - s);
                    }
                }
            });
        }
        Op::LogSoftmaxRows(x) => {
            let n = out.cols();
            accumulate(nodes, grads, *x, |gx| {
                for ((dr, gr), yr) in gx
                    .chunks_exact_mut(n)
                    .zip(g.chunks_exact(n))
                    .zip(out.data().chunks_exact(n))
                {
                    let s: f64 = gr.iter().sum();
                    for ((d, gv), y) in dr.iter_mut().zip(gr).zip(yr) {
                        *d += gv - y.exp() * s;
                    }
                }
            });
        }
        Op::LayerNormRows {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let n = out.cols();
            let tg = &nodes[gamma.0].value;
            accumulate(nodes, grads, *gamma, |dg| {
                for (gr, hr) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                    for ((d, gv), h) in dg.iter_mut().zip(gr).zip(hr) {
                        *d += gv * h;
                    }
                }
            });
            accumulate(nodes, grads, *beta, |db| {
                for gr in g.chunks_exact(n) {
                    add_into(db, gr);
                }
            });
            accumulate(nodes, grads, *x, |dx| {
                let mut dxhat = vec![0.0; n];
                for (r, ((dr, gr), hr)) in dx
                    .chunks_exact_mut(n)
                    .zip(g.chunks_exact(n))
                    .zip(xhat.chunks_exact(n))
                    .enumerate()
                {
                    for c in 0..n {
                        dxhat[c] = gr[c] * tg.data()[c];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dh = kernels::dot(&dxhat, hr) / n as f64;
                    for c in 0..n {
                        dr[c] += rstd[r] * (dxhat[c] - mean_d - hr[c] * mean_dh);
                    }
                }
            });
        }
        Op::L2NormalizeRows { x, norms } => {
            let n = out.cols();
            accumulate(nodes, grads, *x, |dx| {
                for (r, ((dr, gr), yr)) in dx
                    .chunks_exact_mut(n)
                    .zip(g.chunks_exact(n))
                    .zip(out.data().chunks_exact(n))
                    .enumerate()
                {
                    let s = kernels::dot(gr, yr);
                    for ((d, gv), y) in dr.iter_mut().zip(gr).zip(yr) {
                        *d += (gv - y * s) / norms[r];
                    }
                }
            });
        }
        Op::SumAll(x) => {
            let gv = g[0];
            accumulate(nodes, grads, *x, |gx| gx.iter_mut().for_each(|d| *d += gv));
        }
        Op::MeanAll(x) => {
            let gv = g[0] / nodes[x.0].value.len() as f64;
            accumulate(nodes, grads, *x, |gx| gx.iter_mut().for_each(|d| *d += gv));
        }
        Op::RowSums(x) => {
            let n = nodes[x.0].value.cols();
            accumulate(nodes, grads, *x, |gx| {
                for (dr, gv) in gx.chunks_exact_mut(n).zip(&g) {
                    dr.iter_mut().for_each(|d| *d += gv);
                }
            });
        }
        Op::GatherRows { table, ids } => {
            let d = out.cols();
            accumulate(nodes, grads, *table, |gt| {
                for (k, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * d..(id + 1) * d], &g[k * d..(k + 1) * d]);
                }
            });
        }
        Op::PickPerRow { x, cols } => {
            let n = nodes[x.0].value.cols();
            accumulate(nodes, grads, *x, |gx| {
                for (r, &c) in cols.iter().enumerate() {
                    gx[r * n + c] += g[r];
                }
            });
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = nodes[p.0].value.len();
                let slice = &g[offset..offset + len];
                accumulate(nodes, grads, *p, |gp| add_into(gp, slice));
                offset += len;
            }
        }
        Op::ConcatCols(parts) => {
            let (m, total) = (out.rows(), out.cols());
            let mut offset = 0;
            for p in parts {
                let w = nodes[p.0].value.cols();
                accumulate(nodes, grads, *p, |gp| {
                    for r in 0..m {
                        add_into(
                            &mut gp[r * w..(r + 1) * w],
                            &g[r * total + offset..r * total + offset + w],
                        );
                    }
                });
                offset += w;
            }
        }
        Op::SliceCols { x, start } => {
            let (m, len) = (out.rows(), out.cols());
            let n = nodes[x.0].value.cols();
            accumulate(nodes, grads, *x, |gx| {
                for r in 0..m {
                    add_into(
                        &mut gx[r * n + start..r * n + start + len],
                        &g[r * len..(r + 1) * len],
                    );
                }
            });
        }
        Op::ReplaceRows { x, row, positions } => {
            let n = out.cols();
            accumulate(nodes, grads, *x, |gx| {
                for (r, (dr, gr)) in gx.chunks_exact_mut(n).zip(g.chunks_exact(n)).enumerate() {
                    if positions.binary_search(&r).is_err() {
                        add_into(dr, gr);
                    }
                }
            });
            accumulate(nodes, grads, *row, |grow| {
                for &p in positions {
                    add_into(grow, &g[p * n..(p + 1) * n]);
                }
            });
        }
        Op::Reshape(x) => accumulate(nodes, grads, *x, |gx| add_into(gx, &g)),
        Op::ArgmaxRows => return Err(Error::UnsupportedOp("argmax_rows")),
    }
    Ok(())
}

fn transpose_raw(data: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        for c in 0..n {
            out[c * m + r] = data[r * n + c];
        }
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
