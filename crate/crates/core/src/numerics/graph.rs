//! Define-by-run tape. Every op evaluates eagerly when it is recorded and
//! keeps whatever it needs for the reverse sweep.

use std::collections::HashMap;

use super::kernels::{self, Conv1dGeom, Conv2dGeom};
use super::linalg::gemm;
use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside BCE.
pub const PROB_CLAMP: f64 = 1e-7;
/// Cosines are clamped to `[-1 + COS_CLAMP, 1 - COS_CLAMP]` before `acos`.
pub const COS_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

type UnaryFn = Box<dyn Fn(f64) -> f64>;

enum Op {
    Input,
    Param(ParamId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    AddBias(NodeId, NodeId),
    MulCols(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    LayerNormRows { x: NodeId, xhat: Vec<f64>, rstd: Vec<f64> },
    InstanceNorm { x: NodeId, xhat: Vec<f64>, rstd: Vec<f64> },
    L2NormRows { x: NodeId, norms: Vec<f64> },
    MeanRows(NodeId),
    SlidingMean { x: NodeId, window: usize },
    GroupMean { x: NodeId, group: usize },
    SlidingExtreme { x: NodeId, arg: Vec<usize> },
    Conv1d { x: NodeId, w: NodeId, b: Option<NodeId>, geom: Conv1dGeom, cols: Vec<f64> },
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, geom: Conv2dGeom, cols: Vec<f64> },
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize, probs: Vec<f64> },
    SliceCols { x: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    Sum(NodeId),
    Mean(NodeId),
    BceProb { p: NodeId, target: Tensor },
    BceLogits { z: NodeId, target: Tensor },
    Mse { x: NodeId, target: Tensor },
    CrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Vec<f64> },
    AngularMargin { cos: NodeId, labels: Vec<usize>, margin: f64, scale: f64 },
    Custom { x: NodeId, grad: UnaryFn },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::AddBias(..) => "add_bias",
            Op::MulCols(..) => "mul_cols",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::SoftmaxRows(..) => "softmax",
            Op::LogSoftmaxRows(..) => "log_softmax",
            Op::LayerNormRows { .. } => "layer_norm",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::L2NormRows { .. } => "l2_normalize",
            Op::MeanRows(..) => "mean_rows",
            Op::SlidingMean { .. } => "sliding_mean",
            Op::GroupMean { .. } => "group_mean",
            Op::SlidingExtreme { .. } => "sliding_extreme",
            Op::Conv1d { .. } => "conv1d",
            Op::Conv2d { .. } => "conv2d",
            Op::Attention { .. } => "attention",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::BceProb { .. } => "bce",
            Op::BceLogits { .. } => "bce_with_logits",
            Op::Mse { .. } => "mse",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::AngularMargin { .. } => "angular_margin",
            Op::Custom { .. } => "custom",
        }
    }
}

struct Node {
    /// `None` for parameter nodes, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation over a borrowed parameter store.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    record: bool,
    named: HashMap<String, NodeId>,
}

impl<'p> Graph<'p> {
    /// A graph that keeps activations for [`Graph::backward`].
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            record: true,
            named: HashMap::new(),
        }
    }

    /// A forward-only graph: nothing requires gradients, no activations are saved.
    pub fn inference(params: &'p ParamStore) -> Self {
        Graph {
            record: false,
            ..Graph::new(params)
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.params.value(*p),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.value(id).shape()
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Attaches a name to a node so callers can fetch outputs by role.
    pub fn set_output(&mut self, name: impl Into<String>, id: NodeId) {
        self.named.insert(name.into(), id);
    }

    pub fn output(&self, name: &str) -> Option<NodeId> {
        self.named.get(name).copied()
    }

    /// Every recorded value is finite.
    pub fn all_finite(&self) -> bool {
        self.nodes
            .iter()
            .all(|n| n.value.as_ref().map_or(true, Tensor::is_finite))
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[NodeId]) -> NodeId {
        let requires_grad = self.record && inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let op = if requires_grad { op } else { strip(op) };
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn err(&self, op: &str, detail: impl Into<String>) -> Error {
        Error::shape(format!("{op}#{}", self.nodes.len()), detail)
    }

    fn same_shape(&self, op: &str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(self.err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &str, a: NodeId) -> Result<(usize, usize)> {
        let s = self.shape(a);
        match s.len() {
            1 => Ok((1, s[0])),
            2 => Ok((s[0], s[1])),
            _ => Err(self.err(op, format!("expected a matrix, got {:?}", s))),
        }
    }

    // ---- leaves -------------------------------------------------------

    /// Constant leaf (no gradient).
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Input,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant leaf registered under `name`, checked against an expected shape.
    pub fn named_input(&mut self, name: &str, value: Tensor, expected: Option<&[usize]>) -> Result<NodeId> {
        if let Some(e) = expected {
            if e != value.shape() {
                return Err(Error::shape(
                    format!("input '{name}'"),
                    format!("expected {:?}, got {:?}", e, value.shape()),
                ));
            }
        }
        let id = self.input(value);
        self.named.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        let requires_grad = self.record && self.params.get(id).trainable;
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    // ---- elementwise --------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        Ok(self.push(Op::Add(a, b), v, &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let vb = self.value(b);
        let mut v = self.value(a).clone();
        for (x, y) in v.data_mut().iter_mut().zip(vb.data()) {
            *x -= y;
        }
        Ok(self.push(Op::Sub(a, b), v, &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let vb = self.value(b);
        let mut v = self.value(a).clone();
        for (x, y) in v.data_mut().iter_mut().zip(vb.data()) {
            *x *= y;
        }
        Ok(self.push(Op::Mul(a, b), v, &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        self.push(Op::Scale(a, s), v, &[a])
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x + s);
        self.push(Op::AddScalar(a), v, &[a])
    }

    /// `[n, c] + [c]`, broadcasting the bias over rows.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (_, c) = self.matrix_dims("add_bias", x)?;
        if self.value(b).len() != c {
            return Err(self.err("add_bias", format!("bias {:?} for {} columns", self.shape(b), c)));
        }
        let bias = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(c) {
            for (r, bb) in row.iter_mut().zip(&bias) {
                *r += bb;
            }
        }
        Ok(self.push(Op::AddBias(x, b), v, &[x, b]))
    }

    /// `[n, c] ⊙ [c]`, broadcasting a per-column gain over rows.
    pub fn mul_cols(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (_, c) = self.matrix_dims("mul_cols", x)?;
        if self.value(s).len() != c {
            return Err(self.err("mul_cols", format!("gain {:?} for {} columns", self.shape(s), c)));
        }
        let gain = self.value(s).data().to_vec();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(c) {
            for (r, g) in row.iter_mut().zip(&gain) {
                *r *= g;
            }
        }
        Ok(self.push(Op::MulCols(x, s), v, &[x, s]))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a.max(0.0));
        self.push(Op::Relu(x), v, &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(sigmoid);
        self.push(Op::Sigmoid(x), v, &[x])
    }

    /// Elementwise `f` with a caller-supplied derivative `df`.
    pub fn custom_unary(
        &mut self,
        x: NodeId,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64) -> f64 + 'static,
    ) -> NodeId {
        let v = self.value(x).map(f);
        self.push(Op::Custom { x, grad: Box::new(df) }, v, &[x])
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(self.err("matmul", format!("{:?} x {:?}", self.shape(a), self.shape(b))));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        Ok(self.push(Op::MatMul(a, b), Tensor::matrix(m, n, out), &[a, b]))
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.matrix_dims("matmul_t", a)?;
        let (n, k2) = self.matrix_dims("matmul_t", b)?;
        if k != k2 {
            return Err(self.err("matmul_t", format!("{:?} x {:?}ᵀ", self.shape(a), self.shape(b))));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, 0.0, &mut out);
        Ok(self.push(Op::MatMulT(a, b), Tensor::matrix(m, n, out), &[a, b]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.matrix_dims("transpose", a)?;
        let v = self.value(a).transpose();
        Ok(self.push(Op::Transpose(a), v, &[a]))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self
            .value(a)
            .clone()
            .reshape(shape)
            .map_err(|_| self.err("reshape", format!("{:?} -> {:?}", self.shape(a), shape)))?;
        Ok(self.push(Op::Reshape(a), v, &[a]))
    }

    /// Dense layer `x·w + b` with `w: [in, out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    // ---- row-wise normalisations -------------------------------------

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (_, c) = self.matrix_dims("softmax", x)?;
        let mut v = self.value(x).clone();
        kernels::softmax_rows(v.data_mut(), c);
        Ok(self.push(Op::SoftmaxRows(x), v, &[x]))
    }

    pub fn log_softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (_, c) = self.matrix_dims("log_softmax", x)?;
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|a| (a - m).exp()).sum::<f64>().ln();
            for a in row.iter_mut() {
                *a -= lse;
            }
        }
        Ok(self.push(Op::LogSoftmaxRows(x), v, &[x]))
    }

    /// Normalises each row to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let (r, c) = self.matrix_dims("layer_norm", x)?;
        let xv = self.value(x).data();
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                xhat[i * c + j] = (row[j] - mean) * rs;
            }
        }
        let v = Tensor::new(self.shape(x).to_vec(), xhat.clone())?;
        Ok(self.push(Op::LayerNormRows { x, xhat, rstd }, v, &[x]))
    }

    /// Normalises each column over rows: instance norm for a time-major
    /// `[time, channels]` sequence (and batch norm in training mode when rows
    /// are batch items).
    pub fn instance_norm(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let (r, c) = self.matrix_dims("instance_norm", x)?;
        let xv = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for row in xv.chunks(c) {
            for (m, a) in mean.iter_mut().zip(row) {
                *m += a;
            }
        }
        for m in &mut mean {
            *m /= r as f64;
        }
        for row in xv.chunks(c) {
            for j in 0..c {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v / r as f64 + eps).sqrt()).collect();
        let mut xhat = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                xhat[i * c + j] = (xv[i * c + j] - mean[j]) * rstd[j];
            }
        }
        let v = Tensor::new(self.shape(x).to_vec(), xhat.clone())?;
        Ok(self.push(Op::InstanceNorm { x, xhat, rstd }, v, &[x]))
    }

    /// Scales each row to unit L2 norm: `x / sqrt(|x|² + eps)`.
    pub fn l2_normalize_rows(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let (_, c) = self.matrix_dims("l2_normalize", x)?;
        let mut v = self.value(x).clone();
        let mut norms = Vec::with_capacity(v.rows());
        for row in v.data_mut().chunks_mut(c) {
            let n = (row.iter().map(|a| a * a).sum::<f64>() + eps).sqrt();
            norms.push(n);
            for a in row.iter_mut() {
                *a /= n;
            }
        }
        Ok(self.push(Op::L2NormRows { x, norms }, v, &[x]))
    }

    // ---- pooling over time (rows) ------------------------------------

    /// Mean over rows: `[n, c] -> [1, c]`.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.matrix_dims("mean_rows", x)?;
        if r == 0 {
            return Err(self.err("mean_rows", "empty input"));
        }
        let mut out = vec![0.0; c];
        for row in self.value(x).data().chunks(c) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        Ok(self.push(Op::MeanRows(x), Tensor::matrix(1, c, out), &[x]))
    }

    /// Centred moving average over `window` rows (odd), truncated and
    /// renormalised at the sequence edges; stride 1.
    pub fn sliding_mean(&mut self, x: NodeId, window: usize) -> Result<NodeId> {
        let (r, c) = self.matrix_dims("sliding_mean", x)?;
        if window % 2 == 0 || r == 0 {
            return Err(self.err("sliding_mean", format!("window {window} over {r} rows")));
        }
        let v = kernels::sliding_mean_rows(self.value(x).data(), r, c, window);
        Ok(self.push(Op::SlidingMean { x, window }, Tensor::matrix(r, c, v), &[x]))
    }

    /// Non-overlapping mean over groups of `group` rows; the last group may be short.
    pub fn group_mean(&mut self, x: NodeId, group: usize) -> Result<NodeId> {
        let (r, c) = self.matrix_dims("group_mean", x)?;
        if group == 0 || r == 0 {
            return Err(self.err("group_mean", format!("group {group} over {r} rows")));
        }
        let out_rows = r.div_ceil(group);
        let xv = self.value(x).data();
        let mut out = vec![0.0; out_rows * c];
        for g in 0..out_rows {
            let lo = g * group;
            let hi = (lo + group).min(r);
            let n = (hi - lo) as f64;
            for t in lo..hi {
                for j in 0..c {
                    out[g * c + j] += xv[t * c + j];
                }
            }
            for o in &mut out[g * c..(g + 1) * c] {
                *o /= n;
            }
        }
        Ok(self.push(Op::GroupMean { x, group }, Tensor::matrix(out_rows, c, out), &[x]))
    }

    /// Centred sliding max (dilation) or min (erosion) over rows, stride 1.
    pub fn sliding_extreme(&mut self, x: NodeId, window: usize, take_min: bool) -> Result<NodeId> {
        let (r, c) = self.matrix_dims("sliding_extreme", x)?;
        if window % 2 == 0 || r == 0 {
            return Err(self.err("sliding_extreme", format!("window {window} over {r} rows")));
        }
        let (v, arg) = kernels::sliding_extreme_rows(self.value(x).data(), r, c, window, take_min);
        Ok(self.push(Op::SlidingExtreme { x, arg }, Tensor::matrix(r, c, v), &[x]))
    }

    // ---- convolutions -------------------------------------------------

    /// Time-major 1-D convolution. `x: [len, c_in]`, `w: [kernel, c_in, c_out]`,
    /// `b: [c_out]`.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> Result<NodeId> {
        let (len_in, c_in) = self.matrix_dims("conv1d", x)?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[1] != c_in {
            return Err(self.err("conv1d", format!("weight {:?} for input {:?}", ws, self.shape(x))));
        }
        let (kernel, c_out) = (ws[0], ws[2]);
        if let Some(b) = b {
            if self.value(b).len() != c_out {
                return Err(self.err("conv1d", format!("bias {:?} for {} channels", self.shape(b), c_out)));
            }
        }
        if stride == 0 || len_in + 2 * pad < kernel {
            return Err(self.err("conv1d", format!("input length {len_in} too short for kernel {kernel}")));
        }
        let geom = Conv1dGeom { len_in, c_in, c_out, kernel, stride, pad };
        let cols = kernels::im2col_1d(self.value(x).data(), &geom);
        let y = kernels::patches_times_weight(
            &cols,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            geom.len_out(),
            geom.patch(),
            c_out,
        );
        let inputs: Vec<NodeId> = [Some(x), Some(w), b].into_iter().flatten().collect();
        let out = Tensor::matrix(geom.len_out(), c_out, y);
        Ok(self.push(Op::Conv1d { x, w, b, geom, cols }, out, &inputs))
    }

    /// Channels-last 2-D convolution. `x: [h, w, c_in]`,
    /// `w: [kh, kw, c_in, c_out]`, output `[h_out, w_out, c_out]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[2] != xs[2] {
            return Err(self.err("conv2d", format!("weight {:?} for input {:?}", ws, xs)));
        }
        let geom = Conv2dGeom {
            h: xs[0],
            w: xs[1],
            c_in: xs[2],
            c_out: ws[3],
            kh: ws[0],
            kw: ws[1],
            sh: stride.0,
            sw: stride.1,
            ph: pad.0,
            pw: pad.1,
        };
        if geom.sh == 0 || geom.sw == 0 || geom.h + 2 * geom.ph < geom.kh || geom.w + 2 * geom.pw < geom.kw {
            return Err(self.err("conv2d", format!("input {:?} too small for kernel {:?}", xs, ws)));
        }
        if let Some(b) = b {
            if self.value(b).len() != geom.c_out {
                return Err(self.err("conv2d", format!("bias {:?} for {} channels", self.shape(b), geom.c_out)));
            }
        }
        let cols = kernels::im2col_2d(self.value(x).data(), &geom);
        let n = geom.h_out() * geom.w_out();
        let y = kernels::patches_times_weight(
            &cols,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            n,
            geom.patch(),
            geom.c_out,
        );
        let inputs: Vec<NodeId> = [Some(x), Some(w), b].into_iter().flatten().collect();
        let out = Tensor::new(vec![geom.h_out(), geom.w_out(), geom.c_out], y)?;
        Ok(self.push(Op::Conv2d { x, w, b, geom, cols }, out, &inputs))
    }

    // ---- attention ----------------------------------------------------

    /// Multi-head scaled dot-product attention over rows. `q, k, v: [t, heads·d]`.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        let (t, dm) = self.matrix_dims("attention", q)?;
        if self.shape(k) != self.shape(q) || self.shape(v) != self.shape(q) {
            return Err(self.err("attention", "q, k, v must share a shape"));
        }
        if heads == 0 || dm % heads != 0 {
            return Err(self.err("attention", format!("{dm} columns not divisible into {heads} heads")));
        }
        let dh = dm / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; t * dm];
        let mut probs = vec![0.0; heads * t * t];
        for h in 0..heads {
            let qh = head_cols(qv, t, dm, h, dh);
            let kh = head_cols(kv, t, dm, h, dh);
            let vh = head_cols(vv, t, dm, h, dh);
            let p = &mut probs[h * t * t..(h + 1) * t * t];
            gemm(t, dh, t, &qh, false, &kh, true, 0.0, p);
            for a in p.iter_mut() {
                *a *= scale;
            }
            kernels::softmax_rows(p, t);
            let mut oh = vec![0.0; t * dh];
            gemm(t, t, dh, p, false, &vh, false, 0.0, &mut oh);
            put_head_cols(&mut out, &oh, t, dm, h, dh);
        }
        let out = Tensor::matrix(t, dm, out);
        Ok(self.push(Op::Attention { q, k, v, heads, probs }, out, &[q, k, v]))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.matrix_dims("slice_cols", x)?;
        if start + len > c {
            return Err(self.err("slice_cols", format!("{start}+{len} > {c}")));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for row in xv.chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        Ok(self.push(Op::SliceCols { x, start }, Tensor::matrix(r, len, out), &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let r = self.matrix_dims("concat_cols", parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.matrix_dims("concat_cols", p)?;
            if pr != r {
                return Err(self.err("concat_cols", "row counts differ"));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p).data();
            for i in 0..r {
                out[i * total + off..i * total + off + w].copy_from_slice(&pv[i * w..(i + 1) * w]);
            }
            off += w;
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), Tensor::matrix(r, total, out), parts))
    }

    // ---- reductions and losses ---------------------------------------

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        self.push(Op::Sum(x), Tensor::scalar(s), &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let s = v.sum() / v.len().max(1) as f64;
        self.push(Op::Mean(x), Tensor::scalar(s), &[x])
    }

    /// Mean binary cross entropy of probabilities against 0/1 targets, with
    /// probabilities clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce(&mut self, p: NodeId, target: &Tensor) -> Result<NodeId> {
        if self.shape(p) != target.shape() {
            return Err(self.err("bce", format!("{:?} vs target {:?}", self.shape(p), target.shape())));
        }
        let n = target.len().max(1) as f64;
        let loss: f64 = self
            .value(p)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &y)| bce_prob(p, y))
            .sum::<f64>()
            / n;
        Ok(self.push(Op::BceProb { p, target: target.clone() }, Tensor::scalar(loss), &[p]))
    }

    /// Mean binary cross entropy evaluated from logits (numerically stable).
    pub fn bce_with_logits(&mut self, z: NodeId, target: &Tensor) -> Result<NodeId> {
        if self.shape(z) != target.shape() {
            return Err(self.err("bce_with_logits", format!("{:?} vs target {:?}", self.shape(z), target.shape())));
        }
        let n = target.len().max(1) as f64;
        let loss: f64 = self
            .value(z)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &y)| bce_logit(z, y))
            .sum::<f64>()
            / n;
        Ok(self.push(Op::BceLogits { z, target: target.clone() }, Tensor::scalar(loss), &[z]))
    }

    /// Mean squared error over all entries.
    pub fn mse(&mut self, x: NodeId, target: &Tensor) -> Result<NodeId> {
        if self.shape(x) != target.shape() {
            return Err(self.err("mse", format!("{:?} vs target {:?}", self.shape(x), target.shape())));
        }
        if target.is_empty() {
            return Err(self.err("mse", "empty input"));
        }
        let loss = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / target.len() as f64;
        Ok(self.push(Op::Mse { x, target: target.clone() }, Tensor::scalar(loss), &[x]))
    }

    /// Mean softmax cross entropy of `[batch, classes]` logits.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (b, c) = self.matrix_dims("cross_entropy", logits)?;
        if labels.len() != b || labels.iter().any(|&l| l >= c) {
            return Err(self.err("cross_entropy", format!("{} labels for [{b}, {c}] logits", labels.len())));
        }
        let mut probs = self.value(logits).data().to_vec();
        kernels::softmax_rows(&mut probs, c);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -probs[i * c + l].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / b as f64;
        Ok(self.push(
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            Tensor::scalar(loss),
            &[logits],
        ))
    }

    /// Additive angular margin on a `[batch, classes]` cosine matrix:
    /// `scale·cos(θ_y + margin)` at each row's label, `scale·cos θ_j` elsewhere.
    pub fn angular_margin(&mut self, cos: NodeId, labels: &[usize], margin: f64, scale: f64) -> Result<NodeId> {
        let (b, c) = self.matrix_dims("angular_margin", cos)?;
        if labels.len() != b || labels.iter().any(|&l| l >= c) {
            return Err(self.err("angular_margin", format!("{} labels for [{b}, {c}] cosines", labels.len())));
        }
        let mut v = self.value(cos).clone();
        for (i, &l) in labels.iter().enumerate() {
            for j in 0..c {
                let x = v.at(i, j);
                let y = if j == l { margin_cos(x, margin) } else { x };
                v.set(i, j, scale * y);
            }
        }
        Ok(self.push(
            Op::AngularMargin { cos, labels: labels.to_vec(), margin, scale },
            v,
            &[cos],
        ))
    }

    // ---- reverse sweep -----------------------------------------------

    /// Gradients of the scalar `loss` with respect to every trainable parameter
    /// reachable from it.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                format!("backward from {}#{}", self.op_name(loss), loss.0),
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        if !self.record {
            return Err(Error::InvalidArgument("backward on an inference graph".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        let mut out = Gradients::with_len(self.params.len());
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>], out: &mut Gradients) {
        let node = &self.nodes[i];
        let y = node.value.as_ref();
        let gd = g.data();
        let mut acc = |id: NodeId, t: Tensor| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(a) => a.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let like = |id: NodeId, data: Vec<f64>| Tensor::new(self.shape(id).to_vec(), data).expect("grad shape");
        match &node.op {
            Op::Input => {}
            Op::Param(p) => {
                if self.params.get(*p).trainable {
                    out.accumulate(*p, g);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, like(*a, gd.iter().zip(bv).map(|(g, b)| g * b).collect()));
                acc(*b, like(*b, gd.iter().zip(av).map(|(g, a)| g * a).collect()));
            }
            Op::Scale(a, s) => acc(*a, g.map(|v| v * s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::AddBias(x, b) => {
                let c = self.value(*b).len();
                let mut gb = vec![0.0; c];
                for row in gd.chunks(c) {
                    for (s, v) in gb.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                acc(*x, g.clone());
                acc(*b, like(*b, gb));
            }
            Op::MulCols(x, s) => {
                let c = self.value(*s).len();
                let sv = self.value(*s).data();
                let xv = self.value(*x).data();
                let mut gx = gd.to_vec();
                let mut gs = vec![0.0; c];
                for (r, row) in gx.chunks_mut(c).enumerate() {
                    for j in 0..c {
                        gs[j] += row[j] * xv[r * c + j];
                        row[j] *= sv[j];
                    }
                }
                acc(*x, like(*x, gx));
                acc(*s, like(*s, gs));
            }
            Op::MatMul(a, b) => {
                let (m, k) = dims(self.shape(*a));
                let n = g.cols();
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, gd, false, self.value(*b).data(), true, 0.0, &mut ga);
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, self.value(*a).data(), true, gd, false, 0.0, &mut gb);
                acc(*a, like(*a, ga));
                acc(*b, like(*b, gb));
            }
            Op::MatMulT(a, b) => {
                let (m, k) = dims(self.shape(*a));
                let n = g.cols();
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, gd, false, self.value(*b).data(), false, 0.0, &mut ga);
                let mut gb = vec![0.0; n * k];
                gemm(n, m, k, gd, true, self.value(*a).data(), false, 0.0, &mut gb);
                acc(*a, like(*a, ga));
                acc(*b, like(*b, gb));
            }
            Op::Transpose(a) => acc(*a, like(*a, g.transpose().into_data())),
            Op::Reshape(a) => acc(*a, like(*a, gd.to_vec())),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(*x, like(*x, gd.iter().zip(xv).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect()));
            }
            Op::Sigmoid(x) => {
                let yv = y.unwrap().data();
                acc(*x, like(*x, gd.iter().zip(yv).map(|(g, y)| g * y * (1.0 - y)).collect()));
            }
            Op::SoftmaxRows(x) => {
                let yv = y.unwrap().data();
                let c = g.cols();
                let mut gx = vec![0.0; gd.len()];
                for ((gr, yr), or) in gd.chunks(c).zip(yv.chunks(c)).zip(gx.chunks_mut(c)) {
                    let dotp: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        or[j] = yr[j] * (gr[j] - dotp);
                    }
                }
                acc(*x, like(*x, gx));
            }
            Op::LogSoftmaxRows(x) => {
                let yv = y.unwrap().data();
                let c = g.cols();
                let mut gx = vec![0.0; gd.len()];
                for ((gr, yr), or) in gd.chunks(c).zip(yv.chunks(c)).zip(gx.chunks_mut(c)) {
                    let s: f64 = gr.iter().sum();
                    for j in 0..c {
                        or[j] = gr[j] - yr[j].exp() * s;
                    }
                }
                acc(*x, like(*x, gx));
            }
            Op::LayerNormRows { x, xhat, rstd } => {
                let c = g.cols();
                let mut gx = vec![0.0; gd.len()];
                for (r, rs) in rstd.iter().enumerate() {
                    let gr = &gd[r * c..(r + 1) * c];
                    let xr = &xhat[r * c..(r + 1) * c];
                    let mg = gr.iter().sum::<f64>() / c as f64;
                    let mgx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        gx[r * c + j] = rs * (gr[j] - mg - xr[j] * mgx);
                    }
                }
                acc(*x, like(*x, gx));
            }
            Op::InstanceNorm { x, xhat, rstd } => {
                let c = g.cols();
                let r = g.rows();
                let mut mg = vec![0.0; c];
                let mut mgx = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        mg[j] += gd[i * c + j];
                        mgx[j] += gd[i * c + j] * xhat[i * c + j];
                    }
                }
                let mut gx = vec![0.0; gd.len()];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] =
                            rstd[j] * (gd[i * c + j] - mg[j] / r as f64 - xhat[i * c + j] * mgx[j] / r as f64);
                    }
                }
                acc(*x, like(*x, gx));
            }
            Op::L2NormRows { x, norms } => {
                let yv = y.unwrap().data();
                let c = g.cols();
                let mut gx = vec![0.0; gd.len()];
                for (r, n) in norms.iter().enumerate() {
                    let gr = &gd[r * c..(r + 1) * c];
                    let yr = &yv[r * c..(r + 1) * c];
                    let dotp: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[r * c + j] = (gr[j] - yr[j] * dotp) / n;
                    }
                }
                acc(*x, like(*x, gx));
            }
            Op::MeanRows(x) => {
                let r = self.value(*x).rows();
                let mut gx = Vec::with_capacity(r * gd.len());
                for _ in 0..r {
                    gx.extend(gd.iter().map(|v| v / r as f64));
                }
                acc(*x, like(*x, gx));
            }
            Op::SlidingMean { x, window } => {
                let (r, c) = (g.rows(), g.cols());
                let half = window / 2;
                // dx[j] = Σ_{t : |t-j| ≤ half} g[t] / n_t
                let mut scaled = gd.to_vec();
                for t in 0..r {
                    let (lo, hi) = kernels::window_bounds(t, half, r);
                    let n = (hi - lo + 1) as f64;
                    for v in &mut scaled[t * c..(t + 1) * c] {
                        *v /= n;
                    }
                }
                let mut prefix = vec![0.0; (r + 1) * c];
                for t in 0..r {
                    for j in 0..c {
                        prefix[(t + 1) * c + j] = prefix[t * c + j] + scaled[t * c + j];
                    }
                }
                let mut gx = vec![0.0; r * c];
                for s in 0..r {
                    let (lo, hi) = kernels::window_bounds(s, half, r);
                    for j in 0..c {
                        gx[s * c + j] = prefix[(hi + 1) * c + j] - prefix[lo * c + j];
                    }
                }
                acc(*x, like(*x, gx));
            }
            Op::GroupMean { x, group } => {
                let (r, c) = dims(self.shape(*x));
                let mut gx = vec![0.0; r * c];
                for t in 0..r {
                    let gi = t / group;
                    let n = ((gi * group + group).min(r) - gi * group) as f64;
                    for j in 0..c {
                        gx[t * c + j] = gd[gi * c + j] / n;
                    }
                }
                acc(*x, like(*x, gx));
            }
            Op::SlidingExtreme { x, arg } => {
                let c = g.cols();
                let mut gx = vec![0.0; self.value(*x).len()];
                for (idx, &src) in arg.iter().enumerate() {
                    gx[src * c + idx % c] += gd[idx];
                }
                acc(*x, like(*x, gx));
            }
            Op::Conv1d { x, w, b, geom, cols } => {
                let lo = geom.len_out();
                let patch = geom.patch();
                let mut gw = vec![0.0; patch * geom.c_out];
                gemm(patch, lo, geom.c_out, cols, true, gd, false, 0.0, &mut gw);
                acc(*w, like(*w, gw));
                if let Some(b) = b {
                    acc(*b, like(*b, col_sums(gd, geom.c_out)));
                }
                if self.nodes[x.0].requires_grad {
                    let mut gcols = vec![0.0; lo * patch];
                    gemm(lo, geom.c_out, patch, gd, false, self.value(*w).data(), true, 0.0, &mut gcols);
                    let mut gx = vec![0.0; geom.len_in * geom.c_in];
                    kernels::col2im_1d(&gcols, geom, &mut gx);
                    acc(*x, like(*x, gx));
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let n = geom.h_out() * geom.w_out();
                let patch = geom.patch();
                let mut gw = vec![0.0; patch * geom.c_out];
                gemm(patch, n, geom.c_out, cols, true, gd, false, 0.0, &mut gw);
                acc(*w, like(*w, gw));
                if let Some(b) = b {
                    acc(*b, like(*b, col_sums(gd, geom.c_out)));
                }
                if self.nodes[x.0].requires_grad {
                    let mut gcols = vec![0.0; n * patch];
                    gemm(n, geom.c_out, patch, gd, false, self.value(*w).data(), true, 0.0, &mut gcols);
                    let mut gx = vec![0.0; geom.h * geom.w * geom.c_in];
                    kernels::col2im_2d(&gcols, geom, &mut gx);
                    acc(*x, like(*x, gx));
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (t, dm) = dims(self.shape(*q));
                let dh = dm / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut gq = vec![0.0; t * dm];
                let mut gk = vec![0.0; t * dm];
                let mut gv = vec![0.0; t * dm];
                for h in 0..*heads {
                    let p = &probs[h * t * t..(h + 1) * t * t];
                    let qh = head_cols(qv, t, dm, h, dh);
                    let kh = head_cols(kv, t, dm, h, dh);
                    let vh = head_cols(vv, t, dm, h, dh);
                    let goh = head_cols(gd, t, dm, h, dh);
                    let mut gvh = vec![0.0; t * dh];
                    gemm(t, t, dh, p, true, &goh, false, 0.0, &mut gvh);
                    let mut gp = vec![0.0; t * t];
                    gemm(t, dh, t, &goh, false, &vh, true, 0.0, &mut gp);
                    for (gr, pr) in gp.chunks_mut(t).zip(p.chunks(t)) {
                        let dotp: f64 = gr.iter().zip(pr).map(|(a, b)| a * b).sum();
                        for j in 0..t {
                            gr[j] = pr[j] * (gr[j] - dotp) * scale;
                        }
                    }
                    let mut gqh = vec![0.0; t * dh];
                    gemm(t, t, dh, &gp, false, &kh, false, 0.0, &mut gqh);
                    let mut gkh = vec![0.0; t * dh];
                    gemm(t, t, dh, &gp, true, &qh, false, 0.0, &mut gkh);
                    put_head_cols(&mut gq, &gqh, t, dm, h, dh);
                    put_head_cols(&mut gk, &gkh, t, dm, h, dh);
                    put_head_cols(&mut gv, &gvh, t, dm, h, dh);
                }
                acc(*q, like(*q, gq));
                acc(*k, like(*k, gk));
                acc(*v, like(*v, gv));
            }
            Op::SliceCols { x, start } => {
                let (r, c) = dims(self.shape(*x));
                let len = g.cols();
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    gx[i * c + start..i * c + start + len].copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
                acc(*x, like(*x, gx));
            }
            Op::ConcatCols(parts) => {
                let (r, total) = (g.rows(), g.cols());
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut gp = vec![0.0; r * w];
                    for i in 0..r {
                        gp[i * w..(i + 1) * w].copy_from_slice(&gd[i * total + off..i * total + off + w]);
                    }
                    acc(p, like(p, gp));
                    off += w;
                }
            }
            Op::Sum(x) => acc(*x, Tensor::full(self.shape(*x), gd[0])),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                acc(*x, Tensor::full(self.shape(*x), gd[0] / n));
            }
            Op::BceProb { p, target } => {
                let n = target.len() as f64;
                let pv = self.value(*p).data();
                let gp = pv
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &y)| {
                        if p <= PROB_CLAMP || p >= 1.0 - PROB_CLAMP {
                            0.0
                        } else {
                            gd[0] * (-y / p + (1.0 - y) / (1.0 - p)) / n
                        }
                    })
                    .collect();
                acc(*p, like(*p, gp));
            }
            Op::BceLogits { z, target } => {
                let n = target.len() as f64;
                let zv = self.value(*z).data();
                let gz = zv.iter().zip(target.data()).map(|(&z, &y)| gd[0] * (sigmoid(z) - y) / n).collect();
                acc(*z, like(*z, gz));
            }
            Op::Mse { x, target } => {
                let n = target.len() as f64;
                let xv = self.value(*x).data();
                let gx = xv.iter().zip(target.data()).map(|(a, b)| gd[0] * 2.0 * (a - b) / n).collect();
                acc(*x, like(*x, gx));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.value(*logits).cols();
                let b = labels.len() as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| gd[0] * p / b).collect();
                for (i, &l) in labels.iter().enumerate() {
                    gl[i * c + l] -= gd[0] / b;
                }
                acc(*logits, like(*logits, gl));
            }
            Op::AngularMargin { cos, labels, margin, scale } => {
                let c = self.value(*cos).cols();
                let cv = self.value(*cos).data();
                let mut gc: Vec<f64> = gd.iter().map(|g| g * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    let idx = i * c + l;
                    gc[idx] = gd[idx] * scale * margin_cos_grad(cv[idx], *margin);
                }
                acc(*cos, like(*cos, gc));
            }
            Op::Custom { x, grad } => {
                let xv = self.value(*x).data();
                acc(*x, like(*x, gd.iter().zip(xv).map(|(g, x)| g * grad(*x)).collect()));
            }
        }
    }
}

/// Drops saved activations from ops that will never be differentiated.
fn strip(op: Op) -> Op {
    match op {
        Op::LayerNormRows { x, .. } => Op::LayerNormRows { x, xhat: Vec::new(), rstd: Vec::new() },
        Op::InstanceNorm { x, .. } => Op::InstanceNorm { x, xhat: Vec::new(), rstd: Vec::new() },
        Op::L2NormRows { x, .. } => Op::L2NormRows { x, norms: Vec::new() },
        Op::SlidingExtreme { x, .. } => Op::SlidingExtreme { x, arg: Vec::new() },
        Op::Conv1d { x, w, b, geom, .. } => Op::Conv1d { x, w, b, geom, cols: Vec::new() },
        Op::Conv2d { x, w, b, geom, .. } => Op::Conv2d { x, w, b, geom, cols: Vec::new() },
        Op::Attention { q, k, v, heads, .. } => Op::Attention { q, k, v, heads, probs: Vec::new() },
        Op::CrossEntropy { logits, labels, .. } => Op::CrossEntropy { logits, labels, probs: Vec::new() },
        other => other,
    }
}

fn dims(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (1, shape[0]),
        _ => (shape[0], shape[1..].iter().product()),
    }
}

fn col_sums(g: &[f64], c: usize) -> Vec<f64> {
    let mut s = vec![0.0; c];
    for row in g.chunks(c) {
        for (a, b) in s.iter_mut().zip(row) {
            *a += b;
        }
    }
    s
}

fn head_cols(x: &[f64], t: usize, dm: usize, h: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(t * dh);
    for i in 0..t {
        out.extend_from_slice(&x[i * dm + h * dh..i * dm + (h + 1) * dh]);
    }
    out
}

fn put_head_cols(dst: &mut [f64], src: &[f64], t: usize, dm: usize, h: usize, dh: usize) {
    for i in 0..t {
        dst[i * dm + h * dh..i * dm + (h + 1) * dh].copy_from_slice(&src[i * dh..(i + 1) * dh]);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross entropy of one clamped probability.
pub fn bce_prob(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Binary cross entropy of one logit.
pub fn bce_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// `cos(acos(c) + m)` with `c` clamped away from ±1.
pub fn margin_cos(c: f64, m: f64) -> f64 {
    let c = c.clamp(-1.0 + COS_CLAMP, 1.0 - COS_CLAMP);
    c * m.cos() - (1.0 - c * c).sqrt() * m.sin()
}

fn margin_cos_grad(c: f64, m: f64) -> f64 {
    if c <= -1.0 + COS_CLAMP || c >= 1.0 - COS_CLAMP {
        return 0.0;
    }
    m.cos() + c * m.sin() / (1.0 - c * c).sqrt()
}
