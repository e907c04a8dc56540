//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive op as a node whose parents precede it,
//! so the node vector is already in topological order. [`Graph::backward`]
//! walks it once in reverse.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{gemm, gemm_at, gemm_bt, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate backward-pass corruptions used to prove the gradient checks bite.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    Conv1dBackwardSign,
}

#[derive(Clone, Copy, Debug)]
enum Bcast {
    Row,
    Col,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBcast(Var, Var, Bcast),
    MulBcast(Var, Var, Bcast),
    Scale(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var, Option<Vec<bool>>),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    SelectRows(Var, Vec<usize>),
    GatherMax { table: Var, argmax: Vec<usize> },
    MaxRows { x: Var, argmax: Vec<usize> },
    Conv1d(Var, Var),
    Sum(Var),
    Mean(Var),
    Pick(Var, usize),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Gru(Box<GruSaved<T>>),
}

#[derive(Debug)]
struct GruSaved<T> {
    h: Var,
    x: Var,
    w: Var,
    u: Var,
    b: Var,
    z: Vec<T>,
    r: Vec<T>,
    n: Vec<T>,
    rh: Vec<T>,
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBcast(..) => "add_broadcast",
            Op::MulBcast(..) => "mul_broadcast",
            Op::Scale(..) => "scale",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Transpose(_) => "transpose",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::SelectRows(..) => "select_rows",
            Op::GatherMax { .. } => "gather_max",
            Op::MaxRows { .. } => "max_rows",
            Op::Conv1d(..) => "conv1d",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Pick(..) => "pick",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gru(_) => "gru_step",
        }
    }
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Value written in place of log-probabilities of masked entries. Finite so the
/// non-finite guard stays meaningful; never read by a correct caller.
pub const MASKED_LOG_PROB: f64 = -1e30;

const LN_EPS: f64 = 1e-5;

pub struct Graph<'p, T: Scalar> {
    nodes: Vec<Node<T>>,
    store: Option<&'p ParamStore<T>>,
    bound: BTreeMap<String, Var>,
    fault: Option<Fault>,
}

impl<'p, T: Scalar> Default for Graph<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
            bound: BTreeMap::new(),
            fault: None,
        }
    }

    /// A graph that can bind named parameters from `store` as leaves.
    pub fn with_params(store: &'p ParamStore<T>) -> Self {
        Self {
            store: Some(store),
            ..Self::new()
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        debug_assert!(
            value.is_finite(),
            "non-finite output from {} with shape {:?}",
            op.name(),
            value.shape()
        );
        let requires_grad = match &op {
            Op::Leaf => false,
            op => parents(op).iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    fn leaf_shared(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite leaf");
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Bind a named parameter. Repeated calls with the same name return the
    /// same node, so every use of a weight shares one gradient slot.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let store = self
            .store
            .ok_or_else(|| TensorError::Contract("graph has no parameter store".into()))?;
        let p = store
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        let v = self.leaf_shared(Arc::clone(&p.value), p.trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters bound so far, by name.
    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Same value, cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = Arc::clone(&self.nodes[v.0].value);
        self.leaf_shared(value, false)
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(shape_err("matmul", av, bv));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![T::zero(); m * n];
        gemm(av.data(), bv.data(), &mut out, m, k, n);
        Ok(self.push(Tensor::from_vec(&[m, n], out)?, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(op, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(av.shape(), data)
    }

    fn bcast_mode(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, n) = (av.rows(), av.cols());
        if bv.numel() == n && (bv.shape().len() == 1 || bv.rows() == 1) {
            Ok(Bcast::Row)
        } else if bv.shape().len() == 2 && bv.rows() == m && bv.cols() == 1 {
            Ok(Bcast::Col)
        } else {
            Err(shape_err(op, av, bv))
        }
    }

    /// `a[m×n] + b` where `b` is a row `[1×n]`/`[n]` or a column `[m×1]`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let mode = self.bcast_mode("add_broadcast", a, b)?;
        let out = broadcast_zip(self.value(a), self.value(b), mode, |x, y| x + y);
        Ok(self.push(out, Op::AddBcast(a, b, mode)))
    }

    /// `a[m×n] ⊙ b` with the same broadcasting rules as [`Graph::add_broadcast`].
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let mode = self.bcast_mode("mul_broadcast", a, b)?;
        let out = broadcast_zip(self.value(a), self.value(b), mode, |x, y| x * y);
        Ok(self.push(out, Op::MulBcast(a, b, mode)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transposed();
        self.push(out, Op::Transpose(a))
    }

    // ---- pointwise ------------------------------------------------------

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        self.push(out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.push(out, Op::Relu(a))
    }

    // ---- normalisation --------------------------------------------------

    /// Softmax over the last axis. `mask[j] == true` excludes column `j`
    /// (probability exactly zero); at least one column must stay unmasked.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let mask = self.check_mask("softmax", a, mask)?;
        let out = softmax_forward(self.value(a), mask.as_deref());
        Ok(self.push(out, Op::Softmax(a)))
    }

    /// Log-softmax over the last axis; masked entries hold [`MASKED_LOG_PROB`].
    pub fn log_softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let mask = self.check_mask("log_softmax", a, mask)?;
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = x.row(i);
            let live = |j: usize| mask.as_ref().is_none_or(|m| !m[j]);
            let mx = (0..c).filter(|&j| live(j)).map(|j| row[j]).fold(T::neg_infinity(), T::max);
            let lse = (0..c).filter(|&j| live(j)).map(|j| (row[j] - mx).exp()).sum::<T>().ln() + mx;
            for j in 0..c {
                out[i * c + j] = if live(j) { row[j] - lse } else { T::of(MASKED_LOG_PROB) };
            }
        }
        let out = Tensor::from_vec(x.shape(), out)?;
        Ok(self.push(out, Op::LogSoftmax(a, mask)))
    }

    /// Softmax along `axis` of a 1-D or 2-D tensor.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let rank = self.shape(a).len();
        if axis + 1 == rank || rank == 1 {
            self.softmax_rows(a, None)
        } else if rank == 2 && axis == 0 {
            let t = self.transpose(a);
            let s = self.softmax_rows(t, None)?;
            Ok(self.transpose(s))
        } else {
            Err(TensorError::Config(format!("softmax axis {axis} for rank {rank}")))
        }
    }

    fn check_mask(&self, op: &'static str, a: Var, mask: Option<&[bool]>) -> Result<Option<Vec<bool>>> {
        let Some(m) = mask else { return Ok(None) };
        let c = self.value(a).cols();
        if m.len() != c {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: vec![m.len()],
            });
        }
        if m.iter().all(|&x| x) {
            return Err(TensorError::Contract(format!("{op}: every position is masked")));
        }
        Ok(Some(m.to_vec()))
    }

    /// Per-row layer normalisation with learned gain and bias of width `cols`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        for p in [gain, bias] {
            if self.value(p).numel() != c {
                return Err(shape_err("layer_norm", xv, self.value(p)));
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let n = T::of(c as f64);
        let mut xhat = vec![T::zero(); r * c];
        let mut inv_std = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + T::of(LN_EPS)).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::from_vec(xv.shape(), out)?;
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }))
    }

    // ---- structural -----------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| TensorError::Contract("concat of nothing".into()))?;
        let m = self.value(first).rows();
        let mut n = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != m || pv.shape().len() != 2 {
                return Err(shape_err("concat_cols", self.value(first), pv));
            }
            n += pv.cols();
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| TensorError::Contract("concat of nothing".into()))?;
        let n = self.value(first).cols();
        let mut out = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != n {
                return Err(shape_err("concat_rows", self.value(first), pv));
            }
            out.extend_from_slice(pv.data());
        }
        let m = out.len() / n;
        let out = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        if len == 0 || start + len > r {
            return Err(TensorError::Index { op: "slice_rows", index: start + len, extent: r });
        }
        let out = Tensor::from_vec(&[len, c], av.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push(out, Op::SliceRows(a, start)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        if len == 0 || start + len > c {
            return Err(TensorError::Index { op: "slice_cols", index: start + len, extent: c });
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&av.row(i)[start..start + len]);
        }
        let out = Tensor::from_vec(&[r, len], out)?;
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    /// Gather rows by index; an embedding lookup when `a` is a table.
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        if idx.is_empty() {
            return Err(TensorError::Contract("select_rows with no indices".into()));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(TensorError::Index { op: "select_rows", index: i, extent: r });
            }
            out.extend_from_slice(av.row(i));
        }
        let out = Tensor::from_vec(&[idx.len(), c], out)?;
        Ok(self.push(out, Op::SelectRows(a, idx.to_vec())))
    }

    /// `out[t] = max over rows table[groups[t][..]]`, elementwise per column.
    pub fn gather_max(&mut self, table: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let tv = self.value(table);
        let (r, c) = (tv.rows(), tv.cols());
        if groups.is_empty() {
            return Err(TensorError::Contract("gather_max with no groups".into()));
        }
        let mut out = vec![T::zero(); groups.len() * c];
        let mut argmax = vec![0usize; groups.len() * c];
        for (t, grp) in groups.iter().enumerate() {
            if grp.is_empty() {
                return Err(TensorError::Contract(format!("gather_max group {t} is empty")));
            }
            for &i in grp {
                if i >= r {
                    return Err(TensorError::Index { op: "gather_max", index: i, extent: r });
                }
            }
            for j in 0..c {
                let mut best = grp[0];
                for &i in &grp[1..] {
                    if tv.at(i, j) > tv.at(best, j) {
                        best = i;
                    }
                }
                out[t * c + j] = tv.at(best, j);
                argmax[t * c + j] = best;
            }
        }
        let out = Tensor::from_vec(&[groups.len(), c], out)?;
        Ok(self.push(out, Op::GatherMax { table, argmax }))
    }

    /// Column-wise maximum over all rows: `[r×c] -> [1×c]` (max-pool over time).
    pub fn max_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        let mut out = vec![T::zero(); c];
        let mut argmax = vec![0usize; c];
        for j in 0..c {
            let mut best = 0;
            for i in 1..r {
                if av.at(i, j) > av.at(best, j) {
                    best = i;
                }
            }
            out[j] = av.at(best, j);
            argmax[j] = best;
        }
        let out = Tensor::from_vec(&[1, c], out).expect("positive extents");
        self.push(out, Op::MaxRows { x: a, argmax })
    }

    /// Same-padded 1-D convolution over rows: `x[len×d_in] * w[k×d_in×d_f] -> [len×d_f]`.
    pub fn conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let ws = wv.shape();
        if ws.len() != 3 || xv.shape().len() != 2 || ws[1] != xv.cols() {
            return Err(shape_err("conv1d", xv, wv));
        }
        let (k, din, df) = (ws[0], ws[1], ws[2]);
        if k % 2 == 0 {
            return Err(TensorError::Config(format!("conv1d kernel size {k} must be odd")));
        }
        let len = xv.rows();
        let pad = k / 2;
        let mut out = vec![T::zero(); len * df];
        for t in 0..len {
            for j in 0..k {
                let Some(s) = (t + j).checked_sub(pad).filter(|&s| s < len) else { continue };
                gemm(
                    xv.row(s),
                    &wv.data()[j * din * df..(j + 1) * din * df],
                    &mut out[t * df..(t + 1) * df],
                    1,
                    din,
                    df,
                );
            }
        }
        let out = Tensor::from_vec(&[len, df], out)?;
        Ok(self.push(out, Op::Conv1d(x, w)))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.sum() / T::of(av.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// One element (flat index) as a scalar.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let av = self.value(a);
        if index >= av.numel() {
            return Err(TensorError::Index { op: "pick", index, extent: av.numel() });
        }
        let v = av.data()[index];
        Ok(self.push(Tensor::scalar(v), Op::Pick(a, index)))
    }

    // ---- recurrent ------------------------------------------------------

    /// One GRU step over a batch of rows.
    ///
    /// `h[B×d_h]`, `x[B×d_x]`, `w[d_x×3d_h]`, `u[d_h×3d_h]`, `b[3d_h]`, with gate
    /// blocks ordered (update z, reset r, candidate n):
    ///
    /// ```text
    /// z = σ(x·W_z + h·U_z + b_z)
    /// r = σ(x·W_r + h·U_r + b_r)
    /// n = tanh(x·W_n + (r⊙h)·U_n + b_n)
    /// h' = (1 − z)⊙h + z⊙n
    /// ```
    pub fn gru_step(&mut self, h: Var, x: Var, w: Var, u: Var, b: Var) -> Result<Var> {
        let (hv, xv, wv, uv, bv) = (self.value(h), self.value(x), self.value(w), self.value(u), self.value(b));
        let (bsz, dh, dx) = (hv.rows(), hv.cols(), xv.cols());
        if xv.rows() != bsz {
            return Err(shape_err("gru_step", hv, xv));
        }
        if wv.shape() != [dx, 3 * dh] {
            return Err(shape_err("gru_step", xv, wv));
        }
        if uv.shape() != [dh, 3 * dh] {
            return Err(shape_err("gru_step", hv, uv));
        }
        if bv.numel() != 3 * dh {
            return Err(shape_err("gru_step", hv, bv));
        }
        let three = 3 * dh;
        // x·W + b for all three blocks
        let mut ax = vec![T::zero(); bsz * three];
        for i in 0..bsz {
            ax[i * three..(i + 1) * three].copy_from_slice(bv.data());
        }
        gemm(xv.data(), wv.data(), &mut ax, bsz, dx, three);
        let mut hu = vec![T::zero(); bsz * 2 * dh];
        gemm_block(hv.data(), uv.data(), three, 0, 2 * dh, &mut hu, bsz, dh);
        let mut z = vec![T::zero(); bsz * dh];
        let mut r = vec![T::zero(); bsz * dh];
        let mut rh = vec![T::zero(); bsz * dh];
        for i in 0..bsz {
            for j in 0..dh {
                let zi = sigmoid(ax[i * three + j] + hu[i * 2 * dh + j]);
                let ri = sigmoid(ax[i * three + dh + j] + hu[i * 2 * dh + dh + j]);
                z[i * dh + j] = zi;
                r[i * dh + j] = ri;
                rh[i * dh + j] = ri * hv.data()[i * dh + j];
            }
        }
        let mut an = vec![T::zero(); bsz * dh];
        gemm_block(&rh, uv.data(), three, 2 * dh, dh, &mut an, bsz, dh);
        let mut n = vec![T::zero(); bsz * dh];
        let mut out = vec![T::zero(); bsz * dh];
        for i in 0..bsz {
            for j in 0..dh {
                let idx = i * dh + j;
                let ni = (ax[i * three + 2 * dh + j] + an[idx]).tanh();
                n[idx] = ni;
                out[idx] = (T::one() - z[idx]) * hv.data()[idx] + z[idx] * ni;
            }
        }
        let out = Tensor::from_vec(&[bsz, dh], out)?;
        Ok(self.push(out, Op::Gru(Box::new(GruSaved { h, x, w, u, b, z, r, n, rh }))))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| self.nodes[i].requires_grad)
                    .map(|g| Tensor::from_vec(self.nodes[i].value.shape(), g).expect("matching shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &self.nodes[i].value;
        let val = |v: Var| -> &Tensor<T> { &self.nodes[v.0].value };
        let live = |v: Var| self.nodes[v.0].requires_grad;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if live(*a) {
                    gemm_bt(g, bv.data(), acc(grads, *a, av.numel()), m, n, k);
                }
                if live(*b) {
                    gemm_at(av.data(), g, acc(grads, *b, bv.numel()), m, k, n);
                }
            }
            Op::Add(a, b) => {
                for (v, s) in [(*a, T::one()), (*b, T::one())] {
                    if live(v) {
                        axpy(acc(grads, v, g.len()), s, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, s) in [(*a, T::one()), (*b, -T::one())] {
                    if live(v) {
                        axpy(acc(grads, v, g.len()), s, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if live(*a) {
                    let d = acc(grads, *a, g.len());
                    for j in 0..g.len() {
                        d[j] += g[j] * bv[j];
                    }
                }
                if live(*b) {
                    let d = acc(grads, *b, g.len());
                    for j in 0..g.len() {
                        d[j] += g[j] * av[j];
                    }
                }
            }
            Op::AddBcast(a, b, mode) => {
                if live(*a) {
                    axpy(acc(grads, *a, g.len()), T::one(), g);
                }
                if live(*b) {
                    let (m, n) = (out.rows(), out.cols());
                    let d = acc(grads, *b, val(*b).numel());
                    for r in 0..m {
                        for c in 0..n {
                            let bi = match mode {
                                Bcast::Row => c,
                                Bcast::Col => r,
                            };
                            d[bi] += g[r * n + c];
                        }
                    }
                }
            }
            Op::MulBcast(a, b, mode) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, n) = (out.rows(), out.cols());
                let bi = |r: usize, c: usize| match mode {
                    Bcast::Row => c,
                    Bcast::Col => r,
                };
                if live(*a) {
                    let d = acc(grads, *a, g.len());
                    for r in 0..m {
                        for c in 0..n {
                            d[r * n + c] += g[r * n + c] * bv.data()[bi(r, c)];
                        }
                    }
                }
                if live(*b) {
                    let d = acc(grads, *b, bv.numel());
                    for r in 0..m {
                        for c in 0..n {
                            d[bi(r, c)] += g[r * n + c] * av.data()[r * n + c];
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if live(*a) {
                    axpy(acc(grads, *a, g.len()), *s, g);
                }
            }
            Op::Sigmoid(a) => {
                if live(*a) {
                    let d = acc(grads, *a, g.len());
                    for (j, &y) in out.data().iter().enumerate() {
                        d[j] += g[j] * y * (T::one() - y);
                    }
                }
            }
            Op::Tanh(a) => {
                if live(*a) {
                    let d = acc(grads, *a, g.len());
                    for (j, &y) in out.data().iter().enumerate() {
                        d[j] += g[j] * (T::one() - y * y);
                    }
                }
            }
            Op::Relu(a) => {
                if live(*a) {
                    let x = val(*a).data();
                    let d = acc(grads, *a, g.len());
                    for j in 0..g.len() {
                        if x[j] > T::zero() {
                            d[j] += g[j];
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if live(*a) {
                    let (r, c) = (out.rows(), out.cols());
                    let d = acc(grads, *a, g.len());
                    for i in 0..r {
                        let y = out.row(i);
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: T = y.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for j in 0..c {
                            d[i * c + j] += y[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a, mask) => {
                if live(*a) {
                    let (r, c) = (out.rows(), out.cols());
                    let d = acc(grads, *a, g.len());
                    let on = |j: usize| mask.as_ref().is_none_or(|m| !m[j]);
                    for i in 0..r {
                        let y = out.row(i);
                        let gr = &g[i * c..(i + 1) * c];
                        let gsum: T = (0..c).filter(|&j| on(j)).map(|j| gr[j]).sum();
                        for j in (0..c).filter(|&j| on(j)) {
                            d[i * c + j] += gr[j] - y[j].exp() * gsum;
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                if live(*a) {
                    let (r, c) = (out.rows(), out.cols());
                    let d = acc(grads, *a, g.len());
                    for i in 0..r {
                        for j in 0..c {
                            d[j * r + i] += g[i * c + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = (out.rows(), out.cols());
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if live(p) {
                        let d = acc(grads, p, m * w);
                        for r in 0..m {
                            axpy(&mut d[r * w..(r + 1) * w], T::one(), &g[r * n + off..r * n + off + w]);
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).numel();
                    if live(p) {
                        axpy(acc(grads, p, len), T::one(), &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::SliceRows(a, start) => {
                if live(*a) {
                    let c = out.cols();
                    let d = acc(grads, *a, val(*a).numel());
                    axpy(&mut d[start * c..start * c + g.len()], T::one(), g);
                }
            }
            Op::SliceCols(a, start) => {
                if live(*a) {
                    let (r, w) = (out.rows(), out.cols());
                    let c = val(*a).cols();
                    let d = acc(grads, *a, val(*a).numel());
                    for i in 0..r {
                        axpy(&mut d[i * c + start..i * c + start + w], T::one(), &g[i * w..(i + 1) * w]);
                    }
                }
            }
            Op::SelectRows(a, idx) => {
                if live(*a) {
                    let c = out.cols();
                    let d = acc(grads, *a, val(*a).numel());
                    for (r, &src) in idx.iter().enumerate() {
                        axpy(&mut d[src * c..(src + 1) * c], T::one(), &g[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::GatherMax { table, argmax } => {
                if live(*table) {
                    let c = out.cols();
                    let d = acc(grads, *table, val(*table).numel());
                    for (k, &src) in argmax.iter().enumerate() {
                        d[src * c + k % c] += g[k];
                    }
                }
            }
            Op::MaxRows { x, argmax } => {
                if live(*x) {
                    let c = out.cols();
                    let d = acc(grads, *x, val(*x).numel());
                    for (j, &src) in argmax.iter().enumerate() {
                        d[src * c + j] += g[j];
                    }
                }
            }
            Op::Conv1d(x, w) => {
                let (xv, wv) = (val(*x), val(*w));
                let ws = wv.shape();
                let (k, din, df) = (ws[0], ws[1], ws[2]);
                let len = xv.rows();
                let pad = k / 2;
                let sign = if self.fault == Some(Fault::Conv1dBackwardSign) { -T::one() } else { T::one() };
                let gs: Vec<T> = g.iter().map(|&v| v * sign).collect();
                if live(*x) {
                    let d = acc(grads, *x, xv.numel());
                    for t in 0..len {
                        for j in 0..k {
                            let Some(s) = (t + j).checked_sub(pad).filter(|&s| s < len) else { continue };
                            gemm_bt(
                                &gs[t * df..(t + 1) * df],
                                &wv.data()[j * din * df..(j + 1) * din * df],
                                &mut d[s * din..(s + 1) * din],
                                1,
                                df,
                                din,
                            );
                        }
                    }
                }
                if live(*w) {
                    let d = acc(grads, *w, wv.numel());
                    for t in 0..len {
                        for j in 0..k {
                            let Some(s) = (t + j).checked_sub(pad).filter(|&s| s < len) else { continue };
                            gemm_at(
                                xv.row(s),
                                &gs[t * df..(t + 1) * df],
                                &mut d[j * din * df..(j + 1) * din * df],
                                1,
                                din,
                                df,
                            );
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if live(*a) {
                    let d = acc(grads, *a, val(*a).numel());
                    d.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean(a) => {
                if live(*a) {
                    let n = val(*a).numel();
                    let s = g[0] / T::of(n as f64);
                    acc(grads, *a, n).iter_mut().for_each(|v| *v += s);
                }
            }
            Op::Pick(a, index) => {
                if live(*a) {
                    acc(grads, *a, val(*a).numel())[*index] += g[0];
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (r, c) = (out.rows(), out.cols());
                if live(*gain) {
                    let d = acc(grads, *gain, c);
                    for i in 0..r {
                        for j in 0..c {
                            d[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                if live(*bias) {
                    let d = acc(grads, *bias, c);
                    for i in 0..r {
                        axpy(d, T::one(), &g[i * c..(i + 1) * c]);
                    }
                }
                if live(*x) {
                    let gv = val(*gain).data();
                    let n = T::of(c as f64);
                    let d = acc(grads, *x, r * c);
                    for i in 0..r {
                        let dxh: Vec<T> = (0..c).map(|j| g[i * c + j] * gv[j]).collect();
                        let s1: T = dxh.iter().copied().sum();
                        let s2: T = (0..c).map(|j| dxh[j] * xhat[i * c + j]).sum();
                        for j in 0..c {
                            d[i * c + j] += inv_std[i] / n * (n * dxh[j] - s1 - xhat[i * c + j] * s2);
                        }
                    }
                }
            }
            Op::Gru(s) => self.gru_backward(s, g, grads),
        }
    }

    fn gru_backward(&self, s: &GruSaved<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| -> &Tensor<T> { &self.nodes[v.0].value };
        let live = |v: Var| self.nodes[v.0].requires_grad;
        let (hv, xv, wv, uv) = (val(s.h), val(s.x), val(s.w), val(s.u));
        let (bsz, dh, dx) = (hv.rows(), hv.cols(), xv.cols());
        let three = 3 * dh;
        let one = T::one();
        // pre-activation gradients for the three blocks, laid out like x·W
        let mut da = vec![T::zero(); bsz * three];
        let mut dh_total = vec![T::zero(); bsz * dh];
        for i in 0..bsz {
            for j in 0..dh {
                let idx = i * dh + j;
                let (z, n, h) = (s.z[idx], s.n[idx], hv.data()[idx]);
                dh_total[idx] = g[idx] * (one - z);
                da[i * three + j] = g[idx] * (n - h) * z * (one - z);
                da[i * three + 2 * dh + j] = g[idx] * z * (one - n * n);
            }
        }
        // through (r⊙h)·U_n
        let mut drh = vec![T::zero(); bsz * dh];
        let dan: Vec<T> = (0..bsz)
            .flat_map(|i| da[i * three + 2 * dh..i * three + three].to_vec())
            .collect();
        gemm_block_bt(&dan, uv.data(), three, 2 * dh, dh, &mut drh, bsz, dh);
        for i in 0..bsz {
            for j in 0..dh {
                let idx = i * dh + j;
                let r = s.r[idx];
                dh_total[idx] += drh[idx] * r;
                da[i * three + dh + j] = drh[idx] * hv.data()[idx] * r * (one - r);
            }
        }
        let dazr: Vec<T> = (0..bsz)
            .flat_map(|i| da[i * three..i * three + 2 * dh].to_vec())
            .collect();
        gemm_block_bt(&dazr, uv.data(), three, 0, 2 * dh, &mut dh_total, bsz, dh);
        if live(s.u) {
            let d = acc(grads, s.u, uv.numel());
            gemm_block_at(hv.data(), &dazr, three, 0, 2 * dh, d, bsz, dh);
            gemm_block_at(&s.rh, &dan, three, 2 * dh, dh, d, bsz, dh);
        }
        if live(s.h) {
            axpy(acc(grads, s.h, bsz * dh), one, &dh_total);
        }
        if live(s.w) {
            gemm_at(xv.data(), &da, acc(grads, s.w, wv.numel()), bsz, dx, three);
        }
        if live(s.x) {
            gemm_bt(&da, wv.data(), acc(grads, s.x, bsz * dx), bsz, three, dx);
        }
        if live(s.b) {
            let d = acc(grads, s.b, three);
            for i in 0..bsz {
                axpy(d, one, &da[i * three..(i + 1) * three]);
            }
        }
    }
}

/// Gradients from one [`Graph::backward`] call.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when `v` does not require grad or was not reached from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, graph: &Graph<'_, T>, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.shape(v)))
    }
}

fn parents<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Conv1d(a, b) => vec![*a, *b],
        Op::AddBcast(a, b, _) | Op::MulBcast(a, b, _) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::Sigmoid(a)
        | Op::Tanh(a)
        | Op::Relu(a)
        | Op::Softmax(a)
        | Op::LogSoftmax(a, _)
        | Op::Transpose(a)
        | Op::SliceRows(a, _)
        | Op::SliceCols(a, _)
        | Op::SelectRows(a, _)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::Pick(a, _) => vec![*a],
        Op::ConcatCols(p) | Op::ConcatRows(p) => p.clone(),
        Op::GatherMax { table, .. } => vec![*table],
        Op::MaxRows { x, .. } => vec![*x],
        Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
        Op::Gru(s) => vec![s.h, s.x, s.w, s.u, s.b],
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn axpy<T: Scalar>(dst: &mut [T], s: T, src: &[T]) {
    for (d, &v) in dst.iter_mut().zip(src) {
        *d += s * v;
    }
}

fn shape_err<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn broadcast_zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, mode: Bcast, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let (m, n) = (a.rows(), a.cols());
    let mut out = Vec::with_capacity(m * n);
    for r in 0..m {
        for c in 0..n {
            let bv = match mode {
                Bcast::Row => b.data()[c],
                Bcast::Col => b.data()[r],
            };
            out.push(f(a.data()[r * n + c], bv));
        }
    }
    Tensor::from_vec(a.shape(), out).expect("same shape as input")
}

pub(crate) fn softmax_forward<T: Scalar>(x: &Tensor<T>, mask: Option<&[bool]>) -> Tensor<T> {
    let (r, c) = (x.rows(), x.cols());
    let mut out = vec![T::zero(); r * c];
    let live = |j: usize| mask.is_none_or(|m| !m[j]);
    for i in 0..r {
        let row = x.row(i);
        let mx = (0..c).filter(|&j| live(j)).map(|j| row[j]).fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for j in (0..c).filter(|&j| live(j)) {
            let e = (row[j] - mx).exp();
            out[i * c + j] = e;
            total += e;
        }
        for v in &mut out[i * c..(i + 1) * c] {
            *v /= total;
        }
    }
    Tensor::from_vec(x.shape(), out).expect("same shape as input")
}

/// out[m×width] += a[m×k] · b[k × cols][:, off..off+width]
#[allow(clippy::too_many_arguments)]
fn gemm_block<T: Scalar>(a: &[T], b: &[T], cols: usize, off: usize, width: usize, out: &mut [T], m: usize, k: usize) {
    for i in 0..m {
        let orow = &mut out[i * width..(i + 1) * width];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * cols + off..p * cols + off + width];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m×k] += g[m×width] · (b[k × cols][:, off..off+width])ᵀ
#[allow(clippy::too_many_arguments)]
fn gemm_block_bt<T: Scalar>(g: &[T], b: &[T], cols: usize, off: usize, width: usize, out: &mut [T], m: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * width..(i + 1) * width];
        for p in 0..k {
            let brow = &b[p * cols + off..p * cols + off + width];
            let mut s = T::zero();
            for (&x, &y) in grow.iter().zip(brow) {
                s += x * y;
            }
            out[i * k + p] += s;
        }
    }
}

/// d[k × cols][:, off..off+width] += a[m×k]ᵀ · g[m×width]
#[allow(clippy::too_many_arguments)]
fn gemm_block_at<T: Scalar>(a: &[T], g: &[T], cols: usize, off: usize, width: usize, d: &mut [T], m: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * width..(i + 1) * width];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let drow = &mut d[p * cols + off..p * cols + off + width];
            for (o, &gv) in drow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}
