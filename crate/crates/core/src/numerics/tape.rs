//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward sweep. Nodes only reference earlier nodes, so the
//! graph is acyclic by construction and a single reverse pass suffices.

use std::collections::BTreeMap;

use super::kernels::{self, ConvGeom};
use super::{Gradients, NumericsError, ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    AddBias(Var, Var),
    Conv1d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    AvgPool { x: Var, width: usize },
    Interp { x: Var, plan: Vec<(usize, f64)> },
    Softmax { x: Var, outer: usize, dim: usize, inner: usize },
    MaskedSoftmax { x: Var, mask: Vec<bool> },
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    OuterAdd(Var, Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    Sum(Var),
    Pick(Var, usize),
    CrossEntropy { x: Var, label: usize, probs: Vec<f64> },
    KlDiv { x: Var, teacher: Vec<f64>, student: Vec<f64>, tau: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "multiply",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::AddBias(..) => "add_bias",
            Op::Conv1d { .. } => "conv1d",
            Op::AvgPool { .. } => "avg_pool",
            Op::Interp { .. } => "interpolate_time",
            Op::Softmax { .. } => "softmax",
            Op::MaskedSoftmax { .. } => "masked_softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::OuterAdd(..) => "outer_add",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatRows(_) => "concat_rows",
            Op::Sum(_) => "sum",
            Op::Pick(..) => "pick",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::KlDiv { .. } => "kl_div",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for one forward pass and differentiates it.
pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: BTreeMap<ParamId, Var>,
}

fn shape_err(op: &'static str, detail: String) -> NumericsError {
    NumericsError::shape(op, detail)
}

fn rows_cols(t: &Tensor, op: &'static str) -> Result<(usize, usize), NumericsError> {
    t.dims2().map_err(|_| shape_err(op, format!("expected a matrix, got {:?}", t.shape())))
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self { store, nodes: Vec::new(), param_vars: BTreeMap::new() }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var, NumericsError> {
        if !value.all_finite() {
            return Err(NumericsError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input; gradients never flow into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A learnable parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let value = self.store.get(id).clone();
        self.nodes.push(Node { value, op: Op::Param(id), requires_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// Copies the value of `v` into a new constant node (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("operand shapes differ: {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var, NumericsError> {
        let name = op.name();
        self.same_shape(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    fn map_unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var, NumericsError> {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, NumericsError> {
        self.map_unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var, NumericsError> {
        self.map_unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.map_unary(a, Op::Sigmoid(a), kernels::sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.map_unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.map_unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var, NumericsError> {
        self.map_unary(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    /// `[m,k]·[k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = rows_cols(self.value(a), "matmul")?;
        let (k2, n) = rows_cols(self.value(b), "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("inner dimensions differ: [{},{}]·[{},{}]", m, k, k2, n)));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), (k, 1), self.value(b).data(), (n, 1), &mut out, (n, 1), 0.0);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).transpose2()?;
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg)
    }

    /// Adds a length-`n` vector to every row of an `[m,n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let (m, n) = rows_cols(self.value(x), "add_bias")?;
        if self.value(bias).len() != n {
            return Err(shape_err("add_bias", format!("bias of {} values for {} columns", self.value(bias).len(), n)));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(Tensor::from_parts(vec![m, n], data), Op::AddBias(x, bias), rg)
    }

    /// Batched 1-D cross-correlation.
    ///
    /// `x` is `[cin, t]` or `[batch, cin, t]`, `w` is `[cout, cin, k]`,
    /// optional `bias` has `cout` entries. Output length is
    /// `t + pad_left + pad_right - k + 1`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        pad_left: usize,
        pad_right: usize,
    ) -> Result<Var, NumericsError> {
        let (batch, cin, t, batched) = match *self.shape(x) {
            [c, t] => (1, c, t, false),
            [n, c, t] => (n, c, t, true),
            ref other => return Err(shape_err("conv1d", format!("input must be rank 2 or 3, got {:?}", other))),
        };
        let (cout, wcin, k) = match *self.shape(w) {
            [a, b, c] => (a, b, c),
            ref other => return Err(shape_err("conv1d", format!("kernels must be rank 3, got {:?}", other))),
        };
        if wcin != cin {
            return Err(shape_err("conv1d", format!("input has {} channels (axis 0/1), kernels expect {} (axis 1)", cin, wcin)));
        }
        if k > t + pad_left + pad_right {
            return Err(shape_err("conv1d", format!("kernel length {} exceeds padded input length {}", k, t + pad_left + pad_right)));
        }
        if let Some(b) = bias {
            if self.value(b).len() != cout {
                return Err(shape_err("conv1d", format!("bias has {} values for {} output channels", self.value(b).len(), cout)));
            }
        }
        let geom = ConvGeom { batch, cin, t, cout, k, pad_left, pad_right };
        let out = kernels::conv1d_forward(
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let t_out = geom.t_out();
        let shape = if batched { vec![batch, cout, t_out] } else { vec![cout, t_out] };
        let rg = self.rg(x) || self.rg(w) || bias.is_some_and(|b| self.rg(b));
        self.push(Tensor::from_parts(shape, out), Op::Conv1d { x, w, b: bias, geom }, rg)
    }

    /// Convolution with "same" padding (`(k-1)/2` left, the rest right).
    pub fn conv1d_same(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var, NumericsError> {
        let k = *self.shape(w).last().unwrap_or(&1);
        let left = (k - 1) / 2;
        self.conv1d(x, w, bias, left, k - 1 - left)
    }

    /// Non-overlapping mean pooling along the last axis of `[c, t]`; a
    /// trailing remainder shorter than `width` is dropped.
    pub fn avg_pool(&mut self, x: Var, width: usize) -> Result<Var, NumericsError> {
        let (c, t) = rows_cols(self.value(x), "avg_pool")?;
        if width == 0 || t / width == 0 {
            return Err(NumericsError::contract("avg_pool", format!("pooled length is 0 (t = {}, width = {})", t, width)));
        }
        let l = t / width;
        let src = self.value(x).data();
        let mut out = vec![0.0; c * l];
        for r in 0..c {
            for j in 0..l {
                out[r * l + j] = src[r * t + j * width..][..width].iter().sum::<f64>() / width as f64;
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::from_parts(vec![c, l], out), Op::AvgPool { x, width }, rg)
    }

    /// Per-row linear interpolation of `[c, t]` onto `t_target` samples.
    pub fn interpolate_time(&mut self, x: Var, t_target: usize) -> Result<Var, NumericsError> {
        let (c, t) = rows_cols(self.value(x), "interpolate_time")?;
        if t_target == 0 {
            return Err(NumericsError::contract("interpolate_time", "target length must be positive".into()));
        }
        if t < 2 {
            return Err(NumericsError::contract("interpolate_time", format!("need at least 2 samples, got {}", t)));
        }
        let plan = kernels::interp_plan(t, t_target);
        let out = kernels::interp_forward(self.value(x).data(), c, t, &plan);
        let rg = self.rg(x);
        self.push(Tensor::from_parts(vec![c, t_target], out), Op::Interp { x, plan }, rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("softmax", format!("axis {} invalid for shape {:?}", axis, shape)));
        }
        let outer = shape[..axis].iter().product();
        let dim = shape[axis];
        let inner = shape[axis + 1..].iter().product();
        let out = kernels::softmax_strided(self.value(x).data(), outer, dim, inner);
        let rg = self.rg(x);
        self.push(Tensor::from_parts(shape, out), Op::Softmax { x, outer, dim, inner }, rg)
    }

    /// Row softmax over the entries where `mask` is true. Rows with no
    /// unmasked entry fall back to a self-loop (weight 1 on the diagonal).
    pub fn masked_softmax_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var, NumericsError> {
        let (n, m) = rows_cols(self.value(x), "masked_softmax")?;
        if n != m || mask.len() != n * m {
            return Err(shape_err("masked_softmax", format!("need a square matrix and matching mask, got [{},{}] and {} mask entries", n, m, mask.len())));
        }
        let mut mask = mask.to_vec();
        let src = self.value(x).data();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let row_mask = &mut mask[i * n..(i + 1) * n];
            if !row_mask.iter().any(|&b| b) {
                row_mask[i] = true;
            }
            let row = &src[i * n..(i + 1) * n];
            let max = row
                .iter()
                .zip(row_mask.iter())
                .filter(|(_, &keep)| keep)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..n {
                if row_mask[j] {
                    let e = (row[j] - max).exp();
                    out[i * n + j] = e;
                    total += e;
                }
            }
            for v in &mut out[i * n..(i + 1) * n] {
                *v /= total;
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::from_parts(vec![n, n], out), Op::MaskedSoftmax { x, mask }, rg)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("non-empty shape");
        let out: Vec<f64> = self.value(x).data().chunks_exact(d).flat_map(kernels::log_softmax_row).collect();
        let rg = self.rg(x);
        self.push(Tensor::from_parts(shape, out), Op::LogSoftmax(x), rg)
    }

    /// Per-row layer normalization of `[m, n]` with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, NumericsError> {
        let (m, n) = rows_cols(self.value(x), "layer_norm")?;
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(shape_err("layer_norm", format!("gain/bias must have {} entries", n)));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(Tensor::from_parts(vec![m, n], out), Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg)
    }

    /// `out[i, j] = a[i] + b[j]` for vectors (any shape, read flat).
    pub fn outer_add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let (n, m) = (va.len(), vb.len());
        let mut out = Vec::with_capacity(n * m);
        for &x in va {
            out.extend(vb.iter().map(|&y| x + y));
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_parts(vec![n, m], out), Op::OuterAdd(a, b), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let (m, n) = rows_cols(self.value(x), "slice_cols")?;
        if start >= end || end > n {
            return Err(shape_err("slice_cols", format!("range {}..{} invalid for {} columns", start, end, n)));
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + end]);
        }
        let rg = self.rg(x);
        self.push(Tensor::from_parts(vec![m, w], out), Op::SliceCols { x, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        if parts.is_empty() {
            return Err(shape_err("concat_cols", "nothing to concatenate".into()));
        }
        let m = rows_cols(self.value(parts[0]), "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = rows_cols(self.value(p), "concat_cols")?;
            if pm != m {
                return Err(shape_err("concat_cols", format!("row counts differ: {} vs {}", m, pm)));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::from_parts(vec![m, total], out), Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let (m, n) = rows_cols(self.value(x), "slice_rows")?;
        if start >= end || end > m {
            return Err(shape_err("slice_rows", format!("range {}..{} invalid for {} rows", start, end, m)));
        }
        let out = self.value(x).data()[start * n..end * n].to_vec();
        let rg = self.rg(x);
        self.push(Tensor::from_parts(vec![end - start, n], out), Op::SliceRows { x, start }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        if parts.is_empty() {
            return Err(shape_err("concat_rows", "nothing to concatenate".into()));
        }
        let n = rows_cols(self.value(parts[0]), "concat_rows")?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pm, pn) = rows_cols(self.value(p), "concat_rows")?;
            if pn != n {
                return Err(shape_err("concat_rows", format!("column counts differ: {} vs {}", n, pn)));
            }
            rows += pm;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::from_parts(vec![rows, n], out), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, NumericsError> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Selects one element (flat index) as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var, NumericsError> {
        let n = self.value(x).len();
        if index >= n {
            return Err(shape_err("pick", format!("index {} out of range for {} values", index, n)));
        }
        let v = self.value(x).data()[index];
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), Op::Pick(x, index), rg)
    }

    /// `-log softmax(logits)[label]` for a single logit vector.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var, NumericsError> {
        let z = self.value(logits).data();
        if label >= z.len() {
            return Err(NumericsError::contract("cross_entropy", format!("label {} out of range for {} classes", label, z.len())));
        }
        let ls = kernels::log_softmax_row(z);
        let probs = ls.iter().map(|v| v.exp()).collect();
        let rg = self.rg(logits);
        self.push(Tensor::scalar(-ls[label]), Op::CrossEntropy { x: logits, label, probs }, rg)
    }

    /// `τ² · KL(softmax(teacher/τ) ‖ softmax(student/τ))` with the teacher
    /// logits held constant. Identical logits give exactly zero.
    pub fn kl_div(&mut self, student_logits: Var, teacher_logits: &[f64], tau: f64) -> Result<Var, NumericsError> {
        let z = self.value(student_logits).data();
        if z.len() != teacher_logits.len() {
            return Err(NumericsError::contract("kl_div", format!("class counts differ: student {} vs teacher {}", z.len(), teacher_logits.len())));
        }
        let log_q = kernels::log_softmax_row(&z.iter().map(|v| v / tau).collect::<Vec<_>>());
        let log_p = kernels::log_softmax_row(&teacher_logits.iter().map(|v| v / tau).collect::<Vec<_>>());
        let teacher: Vec<f64> = log_p.iter().map(|v| v.exp()).collect();
        let mut kl = 0.0;
        for ((p, lp), lq) in teacher.iter().zip(&log_p).zip(&log_q) {
            if *p > 0.0 {
                kl += p * (lp - lq);
            }
        }
        let student = log_q.iter().map(|v| v.exp()).collect();
        let rg = self.rg(student_logits);
        self.push(Tensor::scalar(tau * tau * kl), Op::KlDiv { x: student_logits, teacher, student, tau }, rg)
    }

    /// Reverse sweep from a scalar `loss`, accumulating parameter gradients
    /// into `grads`. Calling it again adds on top of existing entries.
    pub fn backward(&self, loss: Var, grads: &mut Gradients) -> Result<(), NumericsError> {
        if self.value(loss).len() != 1 {
            return Err(NumericsError::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut g: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        g.resize_with(loss.0 + 1, || None);
        g[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(gout) = g[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &gout, &mut g, grads)?;
        }
        Ok(())
    }

    fn backprop_node(
        &self,
        node: &Node,
        gout: &[f64],
        g: &mut [Option<Vec<f64>>],
        grads: &mut Gradients,
    ) -> Result<(), NumericsError> {
        // Returns the accumulator for `v`, or None if `v` needs no gradient.
        fn slot<'a>(tape: &Tape<'_>, g: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
            if !tape.rg(v) {
                return None;
            }
            let n = tape.value(v).len();
            Some(g[v.0].get_or_insert_with(|| vec![0.0; n]))
        }
        macro_rules! acc {
            ($v:expr, |$d:ident| $body:expr) => {
                if let Some($d) = slot(self, g, $v) {
                    $body
                }
            };
        }

        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                if gout.iter().any(|v| !v.is_finite()) {
                    return Err(NumericsError::NonFiniteGradient { name: self.store.name(*id).to_string() });
                }
                grads.accumulate(*id, node.value.shape(), gout);
            }
            Op::Add(a, b) => {
                acc!(*a, |d| add_into(d, gout));
                acc!(*b, |d| add_into(d, gout));
            }
            Op::Sub(a, b) => {
                acc!(*a, |d| add_into(d, gout));
                acc!(*b, |d| for (x, y) in d.iter_mut().zip(gout) {
                    *x -= y;
                });
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                acc!(*a, |d| for ((x, y), z) in d.iter_mut().zip(gout).zip(vb) {
                    *x += y * z;
                });
                acc!(*b, |d| for ((x, y), z) in d.iter_mut().zip(gout).zip(va) {
                    *x += y * z;
                });
            }
            Op::Scale(a, s) => acc!(*a, |d| for (x, y) in d.iter_mut().zip(gout) {
                *x += y * s;
            }),
            Op::AddScalar(a) => acc!(*a, |d| add_into(d, gout)),
            Op::Sigmoid(a) => {
                let out = node.value.data();
                acc!(*a, |d| for ((x, y), s) in d.iter_mut().zip(gout).zip(out) {
                    *x += y * s * (1.0 - s);
                });
            }
            Op::Tanh(a) => {
                let out = node.value.data();
                acc!(*a, |d| for ((x, y), t) in d.iter_mut().zip(gout).zip(out) {
                    *x += y * (1.0 - t * t);
                });
            }
            Op::Relu(a) => {
                let inp = self.value(*a).data();
                acc!(*a, |d| for ((x, y), v) in d.iter_mut().zip(gout).zip(inp) {
                    if *v > 0.0 {
                        *x += y;
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let inp = self.value(*a).data();
                acc!(*a, |d| for ((x, y), v) in d.iter_mut().zip(gout).zip(inp) {
                    *x += if *v > 0.0 { *y } else { slope * y };
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let n = self.value(*b).dims2()?.1;
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                // dA = G·Bᵀ, dB = Aᵀ·G
                acc!(*a, |d| kernels::gemm(m, n, k, gout, (n, 1), vb, (1, n), d, (k, 1), 1.0));
                acc!(*b, |d| kernels::gemm(k, m, n, va, (1, k), gout, (n, 1), d, (n, 1), 1.0));
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2()?;
                acc!(*a, |d| for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] += gout[j * r + i];
                    }
                });
            }
            Op::Reshape(a) => acc!(*a, |d| add_into(d, gout)),
            Op::AddBias(x, b) => {
                let n = node.value.dims2()?.1;
                acc!(*x, |d| add_into(d, gout));
                acc!(*b, |d| for row in gout.chunks_exact(n) {
                    add_into(d, row);
                });
            }
            Op::Conv1d { x, w, b, geom } => {
                let wv = self.value(*w).data();
                let xv = self.value(*x).data();
                let mut dx = self.rg(*x).then(|| vec![0.0; self.value(*x).len()]);
                let mut dw = self.rg(*w).then(|| vec![0.0; self.value(*w).len()]);
                let mut db = b.filter(|bv| self.rg(*bv)).map(|bv| vec![0.0; self.value(bv).len()]);
                kernels::conv1d_backward(gout, xv, wv, geom, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                if let Some(dx) = dx {
                    acc!(*x, |d| add_into(d, &dx));
                }
                if let Some(dw) = dw {
                    acc!(*w, |d| add_into(d, &dw));
                }
                if let (Some(bv), Some(db)) = (b, db) {
                    acc!(*bv, |d| add_into(d, &db));
                }
            }
            Op::AvgPool { x, width } => {
                let (c, t) = self.value(*x).dims2()?;
                let l = t / width;
                let inv = 1.0 / *width as f64;
                acc!(*x, |d| for r in 0..c {
                    for j in 0..l {
                        let gv = gout[r * l + j] * inv;
                        for v in &mut d[r * t + j * width..][..*width] {
                            *v += gv;
                        }
                    }
                });
            }
            Op::Interp { x, plan } => {
                let (c, t) = self.value(*x).dims2()?;
                acc!(*x, |d| kernels::interp_backward(gout, c, t, plan, d));
            }
            Op::Softmax { x, outer, dim, inner } => {
                let y = node.value.data();
                acc!(*x, |d| for o in 0..*outer {
                    for i in 0..*inner {
                        let base = o * dim * inner + i;
                        let dot: f64 = (0..*dim).map(|k| gout[base + k * inner] * y[base + k * inner]).sum();
                        for k in 0..*dim {
                            let p = base + k * inner;
                            d[p] += y[p] * (gout[p] - dot);
                        }
                    }
                });
            }
            Op::MaskedSoftmax { x, mask } => {
                let y = node.value.data();
                let n = node.value.dims2()?.0;
                acc!(*x, |d| for i in 0..n {
                    let row = i * n..(i + 1) * n;
                    let dot: f64 = gout[row.clone()].iter().zip(&y[row.clone()]).map(|(a, b)| a * b).sum();
                    for p in row {
                        if mask[p] {
                            d[p] += y[p] * (gout[p] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let dim = *node.value.shape().last().expect("shape");
                acc!(*x, |d| for (r, (gr, yr)) in gout.chunks_exact(dim).zip(y.chunks_exact(dim)).enumerate() {
                    let total: f64 = gr.iter().sum();
                    for k in 0..dim {
                        d[r * dim + k] += gr[k] - yr[k].exp() * total;
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let n = node.value.dims2()?.1;
                let gv = self.value(*gain).data();
                acc!(*gain, |d| for (gr, hr) in gout.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                    for j in 0..n {
                        d[j] += gr[j] * hr[j];
                    }
                });
                acc!(*bias, |d| for gr in gout.chunks_exact(n) {
                    add_into(d, gr);
                });
                acc!(*x, |d| for (r, (gr, hr)) in gout.chunks_exact(n).zip(xhat.chunks_exact(n)).enumerate() {
                    let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                    let mean_dh = dh.iter().sum::<f64>() / n as f64;
                    let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        d[r * n + j] += inv_std[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                    }
                });
            }
            Op::OuterAdd(a, b) => {
                let n = self.value(*a).len();
                let m = self.value(*b).len();
                acc!(*a, |d| for i in 0..n {
                    d[i] += gout[i * m..(i + 1) * m].iter().sum::<f64>();
                });
                acc!(*b, |d| for row in gout.chunks_exact(m) {
                    add_into(d, row);
                });
            }
            Op::SliceCols { x, start } => {
                let (m, w) = node.value.dims2()?;
                let n = self.value(*x).dims2()?.1;
                acc!(*x, |d| for r in 0..m {
                    add_into(&mut d[r * n + start..r * n + start + w], &gout[r * w..(r + 1) * w]);
                });
            }
            Op::ConcatCols(parts) => {
                let (m, total) = node.value.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).dims2()?.1;
                    acc!(p, |d| for r in 0..m {
                        add_into(&mut d[r * w..(r + 1) * w], &gout[r * total + offset..r * total + offset + w]);
                    });
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                let n = node.value.dims2()?.1;
                acc!(*x, |d| add_into(&mut d[start * n..start * n + gout.len()], gout));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc!(p, |d| add_into(d, &gout[offset..offset + len]));
                    offset += len;
                }
            }
            Op::Sum(x) => acc!(*x, |d| for v in d.iter_mut() {
                *v += gout[0];
            }),
            Op::Pick(x, index) => acc!(*x, |d| d[*index] += gout[0]),
            Op::CrossEntropy { x, label, probs } => acc!(*x, |d| for (k, p) in probs.iter().enumerate() {
                let target = if k == *label { 1.0 } else { 0.0 };
                d[k] += gout[0] * (p - target);
            }),
            Op::KlDiv { x, teacher, student, tau } => acc!(*x, |d| for k in 0..d.len() {
                d[k] += gout[0] * tau * (student[k] - teacher[k]);
            }),
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
