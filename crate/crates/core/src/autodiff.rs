//! Tape-based reverse-mode automatic differentiation.
//!
//! Every primitive application is appended to a [`Tape`] together with the
//! values its backward rule needs. [`Tape::backward`] replays the tape in
//! reverse exactly once; a second call is rejected because callers are expected
//! to re-run the forward pass (the perturbed second pass of a sharpness-aware
//! step always does).
//!
//! Primitives that are not differentiable in the usual sense (rounding) plug in
//! through [`CustomGradRule`].

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Forward function plus a hand-written backward rule.
///
/// `backward` receives the gradient of the loss with respect to the output and
/// must return exactly one gradient per input, each shaped like that input.
pub trait CustomGradRule: Send + Sync {
    fn name(&self) -> &str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;

    fn backward(
        &self,
        grad_output: &Tensor,
        inputs: &[&Tensor],
        output: &Tensor,
    ) -> Result<Vec<Tensor>>;
}

/// A registered custom primitive, usable on any tape via [`Tape::custom`].
#[derive(Clone)]
pub struct CustomOp {
    rule: Arc<dyn CustomGradRule>,
}

impl CustomOp {
    pub fn name(&self) -> &str {
        self.rule.name()
    }
}

impl fmt::Debug for CustomOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CustomOp({})", self.rule.name())
    }
}

pub fn register_custom_grad<R: CustomGradRule + 'static>(rule: R) -> CustomOp {
    CustomOp {
        rule: Arc::new(rule),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    /// Average over the full window, padding counted as zeros.
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pool2d {
    pub kind: PoolKind,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MulScalar(Var, Var),
    DivScalar(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Clip {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Sum(Var),
    Mean(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    LogSoftmax(Var),
    PickColumns {
        x: Var,
        cols: Vec<usize>,
    },
    Rows {
        table: Var,
        rows: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Pool {
        x: Var,
        cfg: Pool2d,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    StandardizeRows {
        x: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Custom {
        op: CustomOp,
        inputs: Vec<Var>,
    },
}

impl Op {
    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::MulScalar(..) => "mul_scalar",
            Op::DivScalar(..) => "div_scalar",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Clip { .. } => "clip",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::LogSoftmax(..) => "log_softmax",
            Op::PickColumns { .. } => "pick_columns",
            Op::Rows { .. } => "rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::Reshape(..) => "reshape",
            Op::Pool { .. } => "pool2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::BatchNormEval { .. } => "batch_norm_eval",
            Op::StandardizeRows { .. } => "standardize_rows",
            Op::Custom { op, .. } => op.name(),
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::MulScalar(a, s) | Op::DivScalar(a, s) => vec![*a, *s],
            Op::Linear { x, w, b } | Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::LogSoftmax(a)
            | Op::Reshape(a) => vec![*a],
            Op::Clip { x, .. }
            | Op::PickColumns { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Pool { x, .. }
            | Op::StandardizeRows { x, .. } => vec![*x],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::Rows { table, .. } => vec![*table],
            Op::BatchNorm { x, gamma, beta, .. } | Op::BatchNormEval { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// An append-only record of a forward computation.
///
/// Tapes are single-threaded and independent; concurrent work uses one tape
/// per thread.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Tensor>>>,
    strict: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape in strict-finite mode: any primitive producing NaN or infinity
    /// fails with [`Error::NonFinite`].
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: None,
            strict: true,
        }
    }

    pub fn lenient() -> Self {
        Tape {
            strict: false,
            ..Tape::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        if self.grads.is_some() {
            return Err(Error::contract("tape is frozen after backward"));
        }
        if self.strict && !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name().to_string(),
            });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(op, value)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = self.value(a).map(f);
        self.push(op, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        self.push(Op::MatMul(a, b), value)
    }

    /// `x · wᵀ + b` with `w` laid out `[out, in]`. Inputs with more than two
    /// axes are flattened to `[N, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.is_empty() || sw.len() != 2 {
            return Err(Error::dim(format!("linear: x {sx:?}, w {sw:?}")));
        }
        let n = sx[0];
        let fan_in: usize = sx[1..].iter().product();
        let (out, win) = (sw[0], sw[1]);
        if fan_in != win {
            return Err(Error::dim(format!(
                "linear: input features {fan_in} vs weight {sw:?}"
            )));
        }
        let mut data = mm_nt(self.value(x).data(), self.value(w).data(), n, win, out);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [out] {
                return Err(Error::dim(format!("linear: bias {:?}", bv.shape())));
            }
            for row in data.chunks_mut(out) {
                for (y, bias) in row.iter_mut().zip(bv.data()) {
                    *y += bias;
                }
            }
        }
        let value = Tensor::new(vec![n, out], data)?;
        self.push(Op::Linear { x, w, b }, value)
    }

    /// Zero-padded cross-correlation of `x: [N, C, H, W]` with square filters
    /// `w: [F, C, k, k]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sw[2] != sw[3] || sx[1] != sw[1] {
            return Err(Error::dim(format!("conv2d: x {sx:?}, w {sw:?}")));
        }
        let geom = ConvGeom::new(&sx, &sw, stride, pad)?;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; geom.n * geom.f * geom.ohw()];
        let mut cols = vec![0.0; geom.col_rows() * geom.ohw()];
        for n in 0..geom.n {
            geom.im2col(&xv[n * geom.chw()..(n + 1) * geom.chw()], &mut cols);
            let y = mm(wv, &cols, geom.f, geom.col_rows(), geom.ohw());
            out[n * geom.f * geom.ohw()..(n + 1) * geom.f * geom.ohw()].copy_from_slice(&y);
        }
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [geom.f] {
                return Err(Error::dim(format!("conv2d: bias {:?}", bv.shape())));
            }
            for (i, chunk) in out.chunks_mut(geom.ohw()).enumerate() {
                let bias = bv.data()[i % geom.f];
                chunk.iter_mut().for_each(|y| *y += bias);
            }
        }
        let value = Tensor::new(vec![geom.n, geom.f, geom.oh, geom.ow], out)?;
        self.push(
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            value,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Offset(a), |x| x + c)
    }

    fn scalar_of(&self, s: Var, op: &str) -> Result<f64> {
        self.value(s)
            .item()
            .map_err(|_| Error::dim(format!("{op}: second operand must hold one value")))
    }

    /// Tensor times a one-element tensor.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let c = self.scalar_of(s, "mul_scalar")?;
        self.unary(a, Op::MulScalar(a, s), |x| x * c)
    }

    /// Tensor divided by a one-element tensor.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let c = self.scalar_of(s, "div_scalar")?;
        self.unary(a, Op::DivScalar(a, s), |x| x / c)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    /// Clamp into `[lo, hi]`; the gradient passes only strictly inside.
    pub fn clip(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(x, Op::Clip { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Op::Mean(a), Tensor::scalar(s))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim(format!(
                "softmax_cross_entropy: logits {s:?} with {} labels",
                labels.len()
            )));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index(format!("label {bad} out of range for {k} classes")));
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; x.len()];
        let mut loss = 0.0;
        for (i, row) in x.chunks(k).enumerate() {
            let lse = log_sum_exp(row);
            loss += lse - row[labels[i]];
            for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        loss /= labels.len() as f64;
        self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
        )
    }

    /// Row-wise log-softmax of a `[N, K]` tensor.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::dim(format!("log_softmax: {s:?}")));
        }
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(s[1]) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(s, data)?;
        self.push(Op::LogSoftmax(x), value)
    }

    /// `out[i] = x[i, cols[i]]` for a `[N, K]` tensor.
    pub fn pick_columns(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != cols.len() {
            return Err(Error::dim(format!("pick_columns: {s:?} with {} picks", cols.len())));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= s[1]) {
            return Err(Error::Index(format!("column {bad} out of range for {}", s[1])));
        }
        let xv = self.value(x).data();
        let data = cols.iter().enumerate().map(|(i, &c)| xv[i * s[1] + c]).collect();
        self.push(
            Op::PickColumns {
                x,
                cols: cols.to_vec(),
            },
            Tensor::from_vec(data),
        )
    }

    /// Embedding lookup: rows of a `[V, D]` table.
    pub fn rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let value = self.value(table).gather_rows(rows)?;
        if value.ndim() != 2 {
            return Err(Error::dim("rows: table must be two-dimensional"));
        }
        self.push(
            Op::Rows {
                table,
                rows: rows.to_vec(),
            },
            value,
        )
    }

    /// Columns `start..start + len` of a `[N, F]` tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || len == 0 || start + len > s[1] {
            return Err(Error::dim(format!("slice_cols {start}+{len} of {s:?}")));
        }
        let xv = self.value(x).data();
        let data = xv
            .chunks(s[1])
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let value = Tensor::new(vec![s[0], len], data)?;
        self.push(Op::SliceCols { x, start }, value)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        self.push(Op::Reshape(x), value)
    }

    pub fn pool2d(&mut self, x: Var, cfg: Pool2d) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || cfg.stride == 0 || cfg.kernel == 0 {
            return Err(Error::dim(format!("pool2d: {s:?} with {cfg:?}")));
        }
        let (oh, ow) = (
            out_extent(s[2], cfg.kernel, cfg.stride, cfg.pad)?,
            out_extent(s[3], cfg.kernel, cfg.stride, cfg.pad)?,
        );
        let xv = self.value(x).data();
        let planes = s[0] * s[1];
        let (h, w) = (s[2], s[3]);
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::new();
        let area = (cfg.kernel * cfg.kernel) as f64;
        for p in 0..planes {
            let plane = &xv[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = usize::MAX;
                    let mut acc = 0.0;
                    for ky in 0..cfg.kernel {
                        for kx in 0..cfg.kernel {
                            let iy = (oy * cfg.stride + ky) as isize - cfg.pad as isize;
                            let ix = (ox * cfg.stride + kx) as isize - cfg.pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let idx = iy as usize * w + ix as usize;
                            acc += plane[idx];
                            if plane[idx] > best {
                                best = plane[idx];
                                best_at = p * h * w + idx;
                            }
                        }
                    }
                    match cfg.kind {
                        PoolKind::Max => {
                            out.push(best);
                            argmax.push(best_at);
                        }
                        PoolKind::Avg => out.push(acc / area),
                    }
                }
            }
        }
        let value = Tensor::new(vec![s[0], s[1], oh, ow], out)?;
        self.push(Op::Pool { x, cfg, argmax }, value)
    }

    /// Training-mode batch normalization over every axis but the channel axis
    /// (axis 1). Also returns the batch statistics for running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let layout = ChannelLayout::of(self.shape(x), self.shape(gamma), self.shape(beta))?;
        let m = layout.count();
        if m < 2 {
            return Err(Error::dim("batch_norm needs at least two values per channel"));
        }
        let xv = self.value(x).data();
        let mut mean = vec![0.0; layout.c];
        let mut var = vec![0.0; layout.c];
        layout.for_each(|i, c| mean[c] += xv[i]);
        mean.iter_mut().for_each(|v| *v /= m as f64);
        layout.for_each(|i, c| var[c] += (xv[i] - mean[c]).powi(2));
        var.iter_mut().for_each(|v| *v /= m as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        layout.for_each(|i, c| {
            xhat[i] = (xv[i] - mean[c]) * inv_std[c];
            out[i] = g[c] * xhat[i] + b[c];
        });
        let unbiased = m as f64 / (m as f64 - 1.0);
        let stats = BatchStats {
            mean,
            var: var.iter().map(|v| v * unbiased).collect(),
        };
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let v = self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            value,
        )?;
        Ok((v, stats))
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let layout = ChannelLayout::of(self.shape(x), self.shape(gamma), self.shape(beta))?;
        if mean.len() != layout.c || var.len() != layout.c {
            return Err(Error::dim("batch_norm_eval: statistics length"));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        layout.for_each(|i, c| {
            xhat[i] = (xv[i] - mean[c]) * inv_std[c];
            out[i] = g[c] * xhat[i] + b[c];
        });
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            value,
        )
    }

    /// Standardizes each slice along the leading axis to zero mean and unit
    /// (population) variance.
    pub fn standardize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(Error::dim("standardize_rows on a scalar"));
        }
        let xv = self.value(x).data();
        let inner = xv.len() / s[0];
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = Vec::with_capacity(s[0]);
        for (r, row) in xv.chunks(inner).enumerate() {
            let mean = row.iter().sum::<f64>() / inner as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / inner as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                xhat[r * inner + j] = (v - mean) * is;
            }
        }
        let value = Tensor::new(s, xhat.clone())?;
        self.push(Op::StandardizeRows { x, xhat, inv_std }, value)
    }

    pub fn custom(&mut self, op: &CustomOp, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = op.rule.forward(&values)?;
        self.push(
            Op::Custom {
                op: op.clone(),
                inputs: inputs.to_vec(),
            },
            out,
        )
    }

    pub fn has_run_backward(&self) -> bool {
        self.grads.is_some()
    }

    /// Populates gradients of the scalar `loss` for every node on the tape.
    ///
    /// May be called once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::contract(
                "backward already ran on this tape; re-run the forward pass",
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (var, contrib) in self.vjp(i, &g)? {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(&contrib)
                        .for_each(|(a, c)| *a += c),
                    slot @ None => {
                        *slot = Some(Tensor::new(self.shape(var).to_vec(), contrib)?);
                    }
                }
            }
            grads[i] = Some(g);
        }
        if self.strict {
            if let Some(i) = grads
                .iter()
                .position(|g| g.as_ref().is_some_and(|t| !t.is_finite()))
            {
                return Err(Error::NonFinite {
                    op: format!("backward of {}", self.nodes[i].op.name()),
                });
            }
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Gradient of the loss with respect to `v`; zeros when `v` does not
    /// influence the loss.
    pub fn grad(&self, v: Var) -> Result<Tensor> {
        let grads = self
            .grads
            .as_ref()
            .ok_or_else(|| Error::contract("grad() before backward()"))?;
        Ok(grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shape(v))))
    }

    fn vjp(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[i];
        let out = &node.value;
        let gd = g.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let res = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                vec![
                    (*a, mm_nt(gd, val(*b), m, n, k)),
                    (*b, mm_tn(val(*a), gd, k, m, n)),
                ]
            }
            Op::Linear { x, w, b } => {
                let sw = self.shape(*w);
                let (out_f, in_f) = (sw[0], sw[1]);
                let n = self.shape(*x)[0];
                let mut r = vec![
                    (*x, mm(gd, val(*w), n, out_f, in_f)),
                    (*w, mm_tn(gd, val(*x), out_f, n, in_f)),
                ];
                if let Some(b) = b {
                    let mut db = vec![0.0; out_f];
                    for row in gd.chunks(out_f) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                    r.push((*b, db));
                }
                r
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let geom = ConvGeom::new(self.shape(*x), self.shape(*w), *stride, *pad)?;
                let (xv, wv) = (val(*x), val(*w));
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                let mut cols = vec![0.0; geom.col_rows() * geom.ohw()];
                let plane = geom.f * geom.ohw();
                for n in 0..geom.n {
                    let gy = &gd[n * plane..(n + 1) * plane];
                    geom.im2col(&xv[n * geom.chw()..(n + 1) * geom.chw()], &mut cols);
                    let dwn = mm_nt(gy, &cols, geom.f, geom.ohw(), geom.col_rows());
                    dw.iter_mut().zip(&dwn).for_each(|(a, b)| *a += b);
                    let dcols = mm_tn(wv, gy, geom.col_rows(), geom.f, geom.ohw());
                    geom.col2im(&dcols, &mut dx[n * geom.chw()..(n + 1) * geom.chw()]);
                }
                let mut r = vec![(*x, dx), (*w, dw)];
                if let Some(b) = b {
                    let mut db = vec![0.0; geom.f];
                    for (j, chunk) in gd.chunks(geom.ohw()).enumerate() {
                        db[j % geom.f] += chunk.iter().sum::<f64>();
                    }
                    r.push((*b, db));
                }
                r
            }
            Op::Add(a, b) => vec![(*a, gd.to_vec()), (*b, gd.to_vec())],
            Op::Sub(a, b) => vec![(*a, gd.to_vec()), (*b, gd.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => vec![
                (*a, zip_mul(gd, val(*b))),
                (*b, zip_mul(gd, val(*a))),
            ],
            Op::Scale(a, c) => vec![(*a, gd.iter().map(|v| v * c).collect())],
            Op::Offset(a) | Op::Reshape(a) => vec![(*a, gd.to_vec())],
            Op::MulScalar(a, s) => {
                let c = val(*s)[0];
                vec![
                    (*a, gd.iter().map(|v| v * c).collect()),
                    (*s, vec![crate::tensor::dot(gd, val(*a))]),
                ]
            }
            Op::DivScalar(a, s) => {
                let c = val(*s)[0];
                let ds = -crate::tensor::dot(gd, out.data()) / c;
                vec![(*a, gd.iter().map(|v| v / c).collect()), (*s, vec![ds])]
            }
            Op::Relu(a) => vec![(
                *a,
                gd.iter()
                    .zip(val(*a))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            )],
            Op::Sigmoid(a) => vec![(
                *a,
                gd.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect(),
            )],
            Op::Tanh(a) => vec![(
                *a,
                gd.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect(),
            )],
            Op::Exp(a) => vec![(*a, zip_mul(gd, out.data()))],
            Op::Clip { x, lo, hi } => vec![(
                *x,
                gd.iter()
                    .zip(val(*x))
                    .map(|(g, &v)| if v > *lo && v < *hi { *g } else { 0.0 })
                    .collect(),
            )],
            Op::Sum(a) => vec![(*a, vec![gd[0]; self.nodes[a.0].value.numel()])],
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel();
                vec![(*a, vec![gd[0] / n as f64; n])]
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                let scale = gd[0] / labels.len() as f64;
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                vec![(*logits, d)]
            }
            Op::LogSoftmax(x) => {
                let k = self.shape(*x)[1];
                let mut d = Vec::with_capacity(gd.len());
                for (grow, yrow) in gd.chunks(k).zip(out.data().chunks(k)) {
                    let total: f64 = grow.iter().sum();
                    d.extend(grow.iter().zip(yrow).map(|(g, y)| g - y.exp() * total));
                }
                vec![(*x, d)]
            }
            Op::PickColumns { x, cols } => {
                let k = self.shape(*x)[1];
                let mut d = vec![0.0; self.nodes[x.0].value.numel()];
                for (i, &c) in cols.iter().enumerate() {
                    d[i * k + c] = gd[i];
                }
                vec![(*x, d)]
            }
            Op::Rows { table, rows } => {
                let dim = self.shape(*table)[1];
                let mut d = vec![0.0; self.nodes[table.0].value.numel()];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..dim {
                        d[r * dim + j] += gd[i * dim + j];
                    }
                }
                vec![(*table, d)]
            }
            Op::SliceCols { x, start } => {
                let f = self.shape(*x)[1];
                let len = out.shape()[1];
                let mut d = vec![0.0; self.nodes[x.0].value.numel()];
                for (row, grow) in d.chunks_mut(f).zip(gd.chunks(len)) {
                    row[*start..start + len].copy_from_slice(grow);
                }
                vec![(*x, d)]
            }
            Op::Pool { x, cfg, argmax } => {
                let s = self.shape(*x);
                let mut d = vec![0.0; self.nodes[x.0].value.numel()];
                match cfg.kind {
                    PoolKind::Max => {
                        for (g, &at) in gd.iter().zip(argmax) {
                            if at != usize::MAX {
                                d[at] += g;
                            }
                        }
                    }
                    PoolKind::Avg => {
                        let (h, w) = (s[2], s[3]);
                        let (oh, ow) = (out.shape()[2], out.shape()[3]);
                        let area = (cfg.kernel * cfg.kernel) as f64;
                        for p in 0..s[0] * s[1] {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let g = gd[(p * oh + oy) * ow + ox] / area;
                                    for ky in 0..cfg.kernel {
                                        for kx in 0..cfg.kernel {
                                            let iy = (oy * cfg.stride + ky) as isize
                                                - cfg.pad as isize;
                                            let ix = (ox * cfg.stride + kx) as isize
                                                - cfg.pad as isize;
                                            if iy < 0
                                                || ix < 0
                                                || iy >= h as isize
                                                || ix >= w as isize
                                            {
                                                continue;
                                            }
                                            d[p * h * w + iy as usize * w + ix as usize] += g;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                vec![(*x, d)]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let layout =
                    ChannelLayout::of(self.shape(*x), self.shape(*gamma), self.shape(*beta))?;
                let m = layout.count() as f64;
                let gv = val(*gamma);
                let mut dgamma = vec![0.0; layout.c];
                let mut dbeta = vec![0.0; layout.c];
                layout.for_each(|i, c| {
                    dgamma[c] += gd[i] * xhat[i];
                    dbeta[c] += gd[i];
                });
                // dx = γ·inv_std/m · (m·dy − Σdy − x̂·Σ(dy·x̂))
                let mut dx = vec![0.0; gd.len()];
                layout.for_each(|i, c| {
                    dx[i] = gv[c] * inv_std[c] / m * (m * gd[i] - dbeta[c] - xhat[i] * dgamma[c]);
                });
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let layout =
                    ChannelLayout::of(self.shape(*x), self.shape(*gamma), self.shape(*beta))?;
                let gv = val(*gamma);
                let mut dgamma = vec![0.0; layout.c];
                let mut dbeta = vec![0.0; layout.c];
                let mut dx = vec![0.0; gd.len()];
                layout.for_each(|i, c| {
                    dgamma[c] += gd[i] * xhat[i];
                    dbeta[c] += gd[i];
                    dx[i] = gd[i] * gv[c] * inv_std[c];
                });
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::StandardizeRows { x, xhat, inv_std } => {
                let rows = inv_std.len();
                let inner = xhat.len() / rows;
                let mut dx = vec![0.0; xhat.len()];
                for r in 0..rows {
                    let span = r * inner..(r + 1) * inner;
                    let (g, xh) = (&gd[span.clone()], &xhat[span.clone()]);
                    let mg = g.iter().sum::<f64>() / inner as f64;
                    let mgx = crate::tensor::dot(g, xh) / inner as f64;
                    for (j, d) in dx[span].iter_mut().enumerate() {
                        *d = inv_std[r] * (g[j] - mg - xh[j] * mgx);
                    }
                }
                vec![(*x, dx)]
            }
            Op::Custom { op, inputs } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let grads = op.rule.backward(g, &values, out)?;
                if grads.len() != inputs.len() {
                    return Err(Error::contract(format!(
                        "custom rule `{}` returned {} gradients for {} inputs",
                        op.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                let mut r = Vec::with_capacity(grads.len());
                for ((&v, gi), input) in inputs.iter().zip(grads).zip(&values) {
                    if gi.shape() != input.shape() {
                        return Err(Error::contract(format!(
                            "custom rule `{}` gradient shape {:?} vs input {:?}",
                            op.name(),
                            gi.shape(),
                            input.shape()
                        )));
                    }
                    r.push((v, gi.into_data()));
                }
                r
            }
        };
        Ok(res)
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

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn zip_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

fn out_extent(size: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = size + 2 * pad;
    if kernel > padded || stride == 0 {
        return Err(Error::dim(format!(
            "kernel {kernel} (stride {stride}) does not fit extent {size} with pad {pad}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// `A[m,k] · B[k,n]`.
pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (cv, bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `A[m,k] · B[n,k]ᵀ`.
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = crate::tensor::dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    c
}

/// `A[k,m]ᵀ · B[k,n]`.
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            for (cv, bv) in c[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(sx: &[usize], sw: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (oh, ow) = (
            out_extent(sx[2], sw[2], stride, pad)?,
            out_extent(sx[3], sw[2], stride, pad)?,
        );
        Ok(ConvGeom {
            n: sx[0],
            c: sx[1],
            h: sx[2],
            w: sx[3],
            f: sw[0],
            k: sw[2],
            stride,
            pad,
            oh,
            ow,
        })
    }

    fn ohw(&self) -> usize {
        self.oh * self.ow
    }

    fn chw(&self) -> usize {
        self.c * self.h * self.w
    }

    fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
        if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
            None
        } else {
            Some(iy as usize * self.w + ix as usize)
        }
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let ohw = self.ohw();
        for c in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            cols[row * ohw + oy * self.ow + ox] = self
                                .source(oy, ox, ky, kx)
                                .map_or(0.0, |s| x[c * self.h * self.w + s]);
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let ohw = self.ohw();
        for c in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            if let Some(s) = self.source(oy, ox, ky, kx) {
                                dx[c * self.h * self.w + s] += cols[row * ohw + oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Index arithmetic for per-channel (axis 1) reductions.
struct ChannelLayout {
    n: usize,
    c: usize,
    inner: usize,
}

impl ChannelLayout {
    fn of(x: &[usize], gamma: &[usize], beta: &[usize]) -> Result<Self> {
        if x.len() < 2 || gamma != [x[1]] || beta != [x[1]] {
            return Err(Error::dim(format!(
                "batch norm: x {x:?}, gamma {gamma:?}, beta {beta:?}"
            )));
        }
        Ok(ChannelLayout {
            n: x[0],
            c: x[1],
            inner: x[2..].iter().product(),
        })
    }

    fn count(&self) -> usize {
        self.n * self.inner
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        for n in 0..self.n {
            for c in 0..self.c {
                let base = (n * self.c + c) * self.inner;
                for j in 0..self.inner {
                    f(base + j, c);
                }
            }
        }
    }
}
