use std::collections::HashMap;

use super::kernels::{self, ConvGeom, NormLayout, PoolGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Stabilizing constant added to the variance in batch normalization.
pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the previous running statistic when folding in a batch.
pub const BN_MOMENTUM: f64 = 0.9;

/// Every differentiable operation the engine supports.
///
/// Shape rules:
/// - `MatMul`: `(m, k) x (k, n) -> (m, n)`.
/// - `Conv2d`: input `(N, C, H, W)`, kernel `(OC, C, KH, KW)`, optional bias `(OC)`.
/// - `MaxPool2d` / `AvgPool2d`: rank-4 input, square window, no padding.
/// - `Add`: equal shapes, or `(N, M) + (M)` as a bias over the batch dimension.
/// - `Multiply` / `Subtract`: equal shapes.
/// - `Sum` / `Mean` / `Dot`: reduce to shape `[1]`; `Dot` takes two equal rank-1 inputs.
/// - `BatchNorm`: inputs `x, gamma, beta, running_mean, running_var`; `x` is
///   `(N, C)` or `(N, C, H, W)` and the other four are `(C)`.
/// - `Affine`: `x (N, I)`, `w (I, O)`, `b (O)` giving `x·w + b`.
/// - `Transpose`: rank 2 only.
/// - `GatherRows`: selects rows of a rank-2 input; `Take` selects flat elements.
/// - `LogSoftmax`: row-wise over a rank-2 input.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Conv2d { stride: usize, padding: usize },
    MaxPool2d { size: usize, stride: usize },
    AvgPool2d { size: usize, stride: usize },
    Relu,
    Sigmoid,
    Tanh,
    Add,
    Multiply,
    Subtract,
    Scale(f64),
    Sum,
    Mean,
    Log,
    Exp,
    Dot,
    BatchNorm { train: bool },
    Affine,
    Transpose,
    Reshape(Vec<usize>),
    GatherRows(Vec<usize>),
    Take(Vec<usize>),
    LogSigmoid,
    LogSoftmax,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::MaxPool2d { .. } => "max_pool2d",
            OpKind::AvgPool2d { .. } => "avg_pool2d",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Add => "add",
            OpKind::Multiply => "multiply",
            OpKind::Subtract => "subtract",
            OpKind::Scale(_) => "scale",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
            OpKind::Dot => "dot",
            OpKind::BatchNorm { .. } => "batch_norm",
            OpKind::Affine => "affine",
            OpKind::Transpose => "transpose",
            OpKind::Reshape(_) => "reshape",
            OpKind::GatherRows(_) => "gather_rows",
            OpKind::Take(_) => "take",
            OpKind::LogSigmoid => "log_sigmoid",
            OpKind::LogSoftmax => "log_softmax",
        }
    }

    /// Evaluates the operation without recording it anywhere.
    pub fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        forward(self, inputs, false).map(|(t, _)| t)
    }

    /// True when the output is piecewise linear with a kink at input 0.
    pub(crate) fn has_kink_at_zero(&self) -> bool {
        matches!(self, OpKind::Relu)
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Saved {
    None,
    ArgMax(Vec<usize>),
    Norm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Option<OpKind>,
    inputs: Vec<usize>,
    saved: Saved,
    requires_grad: bool,
    is_param: bool,
}

/// Records operations in execution order so gradients can flow back through them.
///
/// A tape is a single-threaded object. With tracing disabled it only
/// evaluates; `backward` then fails because nothing was recorded.
pub struct Tape {
    nodes: Vec<Node>,
    tracing: bool,
    check_finite: bool,
    recorded: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tracing tape. Non-finite checks follow `debug_assertions`.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            tracing: true,
            check_finite: cfg!(debug_assertions),
            recorded: 0,
        }
    }

    /// A tape that evaluates but does not record.
    pub fn inference() -> Self {
        Tape {
            tracing: false,
            ..Tape::new()
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn is_tracing(&self) -> bool {
        self.tracing
    }

    /// Number of recorded (differentiable) operations.
    pub fn recorded_ops(&self) -> usize {
        self.recorded
    }

    fn push_leaf(&mut self, value: Tensor, is_param: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: None,
            inputs: Vec::new(),
            saved: Saved::None,
            requires_grad: is_param && self.tracing,
            is_param,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient is computed for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// A trainable leaf; `backward` always reports a gradient for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Batch mean and variance computed by a train-mode `BatchNorm` node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].saved {
            Saved::Norm { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    pub fn apply(&mut self, op: OpKind, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        if self.check_finite && values.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite { op: op.name() });
        }
        let (value, saved) = forward(&op, &values, self.tracing)?;
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = self.tracing && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if self.tracing {
            self.recorded += 1;
        }
        self.nodes.push(Node {
            value,
            op: Some(op),
            inputs: inputs.iter().map(|v| v.0).collect(),
            saved,
            requires_grad,
            is_param: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.tracing || self.recorded == 0 {
            return Err(Error::EmptyTape);
        }
        let loss_node = &self.nodes[loss.0];
        if !loss_node.value.is_scalar() {
            return Err(Error::NotScalar(loss_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(loss_node.value.shape()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(op) = &node.op else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(dout) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&i| self.nodes[i].requires_grad)
                .collect();
            let input_grads = backward_op(op, &inputs, &node.value, &node.saved, &dout, &needs);
            for ((&input, g), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                if !need {
                    continue;
                }
                let Some(g) = g else { continue };
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        let mut map = HashMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if !node.is_param {
                continue;
            }
            let g = grads
                .get_mut(id)
                .and_then(Option::take)
                .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
            map.insert(id, g);
        }
        Ok(Gradients { map })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let op = OpKind::Conv2d { stride, padding };
        match bias {
            Some(b) => self.apply(op, &[x, w, b]),
            None => self.apply(op, &[x, w]),
        }
    }

    pub fn max_pool2d(&mut self, x: Var, size: usize, stride: usize) -> Result<Var> {
        self.apply(OpKind::MaxPool2d { size, stride }, &[x])
    }

    pub fn avg_pool2d(&mut self, x: Var, size: usize, stride: usize) -> Result<Var> {
        self.apply(OpKind::AvgPool2d { size, stride }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Relu, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Sigmoid, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Tanh, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Subtract, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Multiply, &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.apply(OpKind::Scale(factor), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Sum, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Mean, &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Log, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Exp, &[x])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Dot, &[a, b])
    }

    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: Var,
        running_var: Var,
        train: bool,
    ) -> Result<Var> {
        self.apply(
            OpKind::BatchNorm { train },
            &[x, gamma, beta, running_mean, running_var],
        )
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Affine, &[x, w, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Transpose, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(OpKind::Reshape(shape.to_vec()), &[x])
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        self.apply(OpKind::GatherRows(rows.to_vec()), &[x])
    }

    pub fn take(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        self.apply(OpKind::Take(indices.to_vec()), &[x])
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::LogSigmoid, &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::LogSoftmax, &[x])
    }
}

/// Gradients of a scalar loss, keyed by the parameter leaves of the tape.
#[derive(Debug)]
pub struct Gradients {
    map: HashMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient of a parameter leaf. `None` for constants and intermediate values.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.map.get(&v.0)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.map.remove(&v.0)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

fn arity(op: &OpKind, got: usize) -> Result<()> {
    let ok = match op {
        OpKind::MatMul | OpKind::Add | OpKind::Multiply | OpKind::Subtract | OpKind::Dot => {
            got == 2
        }
        OpKind::Conv2d { .. } => got == 2 || got == 3,
        OpKind::BatchNorm { .. } => got == 5,
        OpKind::Affine => got == 3,
        _ => got == 1,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(
            op.name(),
            format!("wrong number of inputs: {got}"),
        ))
    }
}

fn mismatch(op: &OpKind, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op: op.name(),
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

fn conv_geom(op: &OpKind, x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<ConvGeom> {
    let (&[n, c, h, wd], &[oc, wc, kh, kw]) = (x.shape(), w.shape()) else {
        return Err(mismatch(op, x, w));
    };
    if wc != c || stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(mismatch(op, x, w));
    }
    Ok(ConvGeom {
        n,
        c,
        h,
        w: wd,
        oc,
        kh,
        kw,
        stride,
        pad,
        oh: (h + 2 * pad - kh) / stride + 1,
        ow: (wd + 2 * pad - kw) / stride + 1,
    })
}

fn pool_geom(op: &OpKind, x: &Tensor, size: usize, stride: usize) -> Result<PoolGeom> {
    let &[n, c, h, w] = x.shape() else {
        return Err(Error::invalid(
            op.name(),
            format!("expected rank-4 input, got {:?}", x.shape()),
        ));
    };
    if size == 0 || stride == 0 || size > h || size > w {
        return Err(Error::invalid(
            op.name(),
            format!(
                "window {size} stride {stride} does not fit input {:?}",
                x.shape()
            ),
        ));
    }
    Ok(PoolGeom {
        n,
        c,
        h,
        w,
        size,
        stride,
        oh: (h - size) / stride + 1,
        ow: (w - size) / stride + 1,
    })
}

fn norm_layout(op: &OpKind, inputs: &[&Tensor]) -> Result<NormLayout> {
    let x = inputs[0];
    let layout = NormLayout::from_shape(x.shape()).ok_or_else(|| {
        Error::invalid(
            op.name(),
            format!("expected rank 2 or 4, got {:?}", x.shape()),
        )
    })?;
    for t in &inputs[1..] {
        if t.shape() != [layout.channels] {
            return Err(mismatch(op, x, t));
        }
    }
    Ok(layout)
}

fn rank2(op: &OpKind, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::invalid(
            op.name(),
            format!("expected rank-2 input, got {:?}", t.shape()),
        )),
    }
}

fn elementwise(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    a.map(f)
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    kernels::gemm(m, k, n, 1.0, a, (k, 1), b, (n, 1), 0.0, &mut out, (n, 1));
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

fn forward(op: &OpKind, inputs: &[&Tensor], save: bool) -> Result<(Tensor, Saved)> {
    arity(op, inputs.len())?;
    let a = inputs[0];
    let out = match op {
        OpKind::MatMul => {
            let b = inputs[1];
            let (m, k) = rank2(op, a)?;
            let (k2, n) = rank2(op, b)?;
            if k != k2 {
                return Err(mismatch(op, a, b));
            }
            Tensor::from_parts(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n))
        }
        OpKind::Conv2d { stride, padding } => {
            let w = inputs[1];
            let g = conv_geom(op, a, w, *stride, *padding)?;
            let bias = inputs.get(2).copied();
            if let Some(b) = bias {
                if b.shape() != [g.oc] {
                    return Err(mismatch(op, w, b));
                }
            }
            let data = kernels::conv2d_forward(a.data(), w.data(), bias.map(Tensor::data), &g);
            Tensor::from_parts(vec![g.n, g.oc, g.oh, g.ow], data)
        }
        OpKind::MaxPool2d { size, stride } => {
            let g = pool_geom(op, a, *size, *stride)?;
            let (data, arg) = kernels::max_pool_forward(a.data(), &g);
            let out = Tensor::from_parts(vec![g.n, g.c, g.oh, g.ow], data);
            let saved = if save {
                Saved::ArgMax(arg)
            } else {
                Saved::None
            };
            return Ok((out, saved));
        }
        OpKind::AvgPool2d { size, stride } => {
            let g = pool_geom(op, a, *size, *stride)?;
            Tensor::from_parts(
                vec![g.n, g.c, g.oh, g.ow],
                kernels::avg_pool_forward(a.data(), &g),
            )
        }
        OpKind::Relu => elementwise(a, |v| v.max(0.0)),
        OpKind::Sigmoid => elementwise(a, sigmoid),
        OpKind::Tanh => elementwise(a, f64::tanh),
        OpKind::LogSigmoid => elementwise(a, log_sigmoid),
        OpKind::Log => elementwise(a, f64::ln),
        OpKind::Exp => elementwise(a, f64::exp),
        OpKind::Scale(s) => elementwise(a, |v| v * s),
        OpKind::Add => {
            let b = inputs[1];
            if a.shape() == b.shape() {
                zip_with(a, b, |x, y| x + y)
            } else if a.rank() == 2 && b.shape() == [a.shape()[1]] {
                let cols = b.len();
                let mut out = a.clone();
                for row in out.data_mut().chunks_mut(cols) {
                    row.iter_mut().zip(b.data()).for_each(|(o, bv)| *o += bv);
                }
                out
            } else {
                return Err(mismatch(op, a, b));
            }
        }
        OpKind::Subtract | OpKind::Multiply => {
            let b = inputs[1];
            if a.shape() != b.shape() {
                return Err(mismatch(op, a, b));
            }
            if matches!(op, OpKind::Subtract) {
                zip_with(a, b, |x, y| x - y)
            } else {
                zip_with(a, b, |x, y| x * y)
            }
        }
        OpKind::Sum => Tensor::scalar(a.data().iter().sum()),
        OpKind::Mean => Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64),
        OpKind::Dot => {
            let b = inputs[1];
            if a.rank() != 1 || a.shape() != b.shape() {
                return Err(mismatch(op, a, b));
            }
            Tensor::scalar(a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum())
        }
        OpKind::BatchNorm { train } => {
            let layout = norm_layout(op, inputs)?;
            let (gamma, beta) = (inputs[1].data(), inputs[2].data());
            if *train {
                let f = kernels::batch_norm_train(a.data(), gamma, beta, layout, BN_EPSILON);
                let out = Tensor::from_parts(a.shape().to_vec(), f.out);
                // Batch statistics are kept even when not tracing so callers can
                // fold them into running estimates.
                let saved = Saved::Norm {
                    xhat: if save { f.xhat } else { Vec::new() },
                    inv_std: f.inv_std,
                    mean: f.mean,
                    var: f.var,
                };
                return Ok((out, saved));
            }
            let (rm, rv) = (inputs[3].data(), inputs[4].data());
            let mut out = a.clone();
            for n in 0..layout.outer {
                for c in 0..layout.channels {
                    let is = 1.0 / (rv[c] + BN_EPSILON).sqrt();
                    let start = (n * layout.channels + c) * layout.inner;
                    for v in &mut out.data_mut()[start..start + layout.inner] {
                        *v = gamma[c] * (*v - rm[c]) * is + beta[c];
                    }
                }
            }
            out
        }
        OpKind::Affine => {
            let (w, b) = (inputs[1], inputs[2]);
            let (n, i) = rank2(op, a)?;
            let (i2, o) = rank2(op, w)?;
            if i != i2 {
                return Err(mismatch(op, a, w));
            }
            if b.shape() != [o] {
                return Err(mismatch(op, w, b));
            }
            let mut data = matmul_raw(a.data(), w.data(), n, i, o);
            for row in data.chunks_mut(o) {
                row.iter_mut().zip(b.data()).for_each(|(v, bv)| *v += bv);
            }
            Tensor::from_parts(vec![n, o], data)
        }
        OpKind::Transpose => {
            let (r, c) = rank2(op, a)?;
            Tensor::from_parts(vec![c, r], transpose_raw(a.data(), r, c))
        }
        OpKind::Reshape(shape) => {
            if shape.iter().product::<usize>() != a.len() || shape.contains(&0) {
                return Err(Error::ShapeMismatch {
                    op: op.name(),
                    left: a.shape().to_vec(),
                    right: shape.clone(),
                });
            }
            Tensor::from_parts(shape.clone(), a.data().to_vec())
        }
        OpKind::GatherRows(rows) => {
            let (r, c) = rank2(op, a)?;
            if rows.is_empty() || rows.iter().any(|&i| i >= r) {
                return Err(Error::invalid(
                    op.name(),
                    format!("row index out of range for {r} rows"),
                ));
            }
            let mut data = Vec::with_capacity(rows.len() * c);
            for &i in rows {
                data.extend_from_slice(a.row(i));
            }
            Tensor::from_parts(vec![rows.len(), c], data)
        }
        OpKind::Take(indices) => {
            if indices.is_empty() || indices.iter().any(|&i| i >= a.len()) {
                return Err(Error::invalid(
                    op.name(),
                    format!("index out of range for {} elements", a.len()),
                ));
            }
            Tensor::from_parts(
                vec![indices.len()],
                indices.iter().map(|&i| a.data()[i]).collect(),
            )
        }
        OpKind::LogSoftmax => {
            let (_, c) = rank2(op, a)?;
            let mut out = a.clone();
            for row in out.data_mut().chunks_mut(c) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                row.iter_mut().for_each(|v| *v -= lse);
            }
            out
        }
    };
    Ok((out, Saved::None))
}

fn backward_op(
    op: &OpKind,
    inputs: &[&Tensor],
    out: &Tensor,
    saved: &Saved,
    dout: &Tensor,
    needs: &[bool],
) -> Vec<Option<Tensor>> {
    let a = inputs[0];
    let like = |t: &Tensor, data: Vec<f64>| Some(Tensor::from_parts(t.shape().to_vec(), data));
    match op {
        OpKind::MatMul => {
            let b = inputs[1];
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            let mut da = None;
            let mut db = None;
            if needs[0] {
                let mut g = vec![0.0; m * k];
                kernels::gemm(
                    m,
                    n,
                    k,
                    1.0,
                    dout.data(),
                    (n, 1),
                    b.data(),
                    (1, n),
                    0.0,
                    &mut g,
                    (k, 1),
                );
                da = like(a, g);
            }
            if needs[1] {
                let mut g = vec![0.0; k * n];
                kernels::gemm(
                    k,
                    m,
                    n,
                    1.0,
                    a.data(),
                    (1, k),
                    dout.data(),
                    (n, 1),
                    0.0,
                    &mut g,
                    (n, 1),
                );
                db = like(b, g);
            }
            vec![da, db]
        }
        OpKind::Conv2d { stride, padding } => {
            let w = inputs[1];
            let g = conv_geom(op, a, w, *stride, *padding).expect("validated in forward");
            let (dx, dw, db) =
                kernels::conv2d_backward(a.data(), w.data(), dout.data(), &g, needs[0]);
            let mut grads = vec![if needs[0] { like(a, dx) } else { None }, like(w, dw)];
            if inputs.len() == 3 {
                grads.push(like(inputs[2], db));
            }
            grads
        }
        OpKind::MaxPool2d { .. } => {
            let Saved::ArgMax(arg) = saved else {
                unreachable!("max_pool2d without argmax")
            };
            let mut dx = vec![0.0; a.len()];
            for (&idx, &d) in arg.iter().zip(dout.data()) {
                dx[idx] += d;
            }
            vec![like(a, dx)]
        }
        OpKind::AvgPool2d { size, stride } => {
            let g = pool_geom(op, a, *size, *stride).expect("validated in forward");
            vec![like(a, kernels::avg_pool_backward(dout.data(), &g))]
        }
        OpKind::Relu => vec![Some(zip_with(
            a,
            dout,
            |x, d| if x > 0.0 { d } else { 0.0 },
        ))],
        OpKind::Sigmoid => vec![Some(zip_with(out, dout, |y, d| d * y * (1.0 - y)))],
        OpKind::Tanh => vec![Some(zip_with(out, dout, |y, d| d * (1.0 - y * y)))],
        OpKind::LogSigmoid => vec![Some(zip_with(a, dout, |x, d| d * sigmoid(-x)))],
        OpKind::Log => vec![Some(zip_with(a, dout, |x, d| d / x))],
        OpKind::Exp => vec![Some(zip_with(out, dout, |y, d| d * y))],
        OpKind::Scale(s) => vec![Some(elementwise(dout, |d| d * s))],
        OpKind::Add => {
            let b = inputs[1];
            let db = if b.shape() == a.shape() {
                dout.clone()
            } else {
                let cols = b.len();
                let mut acc = vec![0.0; cols];
                for row in dout.data().chunks(cols) {
                    acc.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                }
                Tensor::from_parts(b.shape().to_vec(), acc)
            };
            vec![Some(dout.clone()), Some(db)]
        }
        OpKind::Subtract => vec![Some(dout.clone()), Some(elementwise(dout, |d| -d))],
        OpKind::Multiply => {
            let b = inputs[1];
            vec![
                Some(zip_with(b, dout, |y, d| y * d)),
                Some(zip_with(a, dout, |x, d| x * d)),
            ]
        }
        OpKind::Sum => vec![Some(Tensor::full(a.shape(), dout.item()))],
        OpKind::Mean => vec![Some(Tensor::full(a.shape(), dout.item() / a.len() as f64))],
        OpKind::Dot => {
            let b = inputs[1];
            let d = dout.item();
            vec![
                Some(elementwise(b, |y| y * d)),
                Some(elementwise(a, |x| x * d)),
            ]
        }
        OpKind::BatchNorm { train } => {
            let layout = NormLayout::from_shape(a.shape()).expect("validated in forward");
            let gamma = inputs[1].data();
            if *train {
                let Saved::Norm { xhat, inv_std, .. } = saved else {
                    unreachable!("train batch_norm without saved statistics")
                };
                let (dx, dg, db) =
                    kernels::batch_norm_train_backward(dout.data(), xhat, inv_std, gamma, layout);
                let zeros = |t: &Tensor| Some(Tensor::zeros(t.shape()));
                return vec![
                    like(a, dx),
                    like(inputs[1], dg),
                    like(inputs[2], db),
                    zeros(inputs[3]),
                    zeros(inputs[4]),
                ];
            }
            let (rm, rv) = (inputs[3].data(), inputs[4].data());
            let mut dx = vec![0.0; a.len()];
            let mut dg = vec![0.0; layout.channels];
            let mut db = vec![0.0; layout.channels];
            let mut drm = vec![0.0; layout.channels];
            let mut drv = vec![0.0; layout.channels];
            for n in 0..layout.outer {
                for c in 0..layout.channels {
                    let is = 1.0 / (rv[c] + BN_EPSILON).sqrt();
                    let start = (n * layout.channels + c) * layout.inner;
                    for i in start..start + layout.inner {
                        let d = dout.data()[i];
                        let centered = a.data()[i] - rm[c];
                        dx[i] = d * gamma[c] * is;
                        dg[c] += d * centered * is;
                        db[c] += d;
                        drm[c] -= d * gamma[c] * is;
                        drv[c] -= 0.5 * d * gamma[c] * centered * is * is * is;
                    }
                }
            }
            vec![
                like(a, dx),
                like(inputs[1], dg),
                like(inputs[2], db),
                like(inputs[3], drm),
                like(inputs[4], drv),
            ]
        }
        OpKind::Affine => {
            let (w, b) = (inputs[1], inputs[2]);
            let (n, i) = (a.shape()[0], a.shape()[1]);
            let o = w.shape()[1];
            let mut dx = None;
            if needs[0] {
                let mut g = vec![0.0; n * i];
                kernels::gemm(
                    n,
                    o,
                    i,
                    1.0,
                    dout.data(),
                    (o, 1),
                    w.data(),
                    (1, o),
                    0.0,
                    &mut g,
                    (i, 1),
                );
                dx = like(a, g);
            }
            let mut dw = vec![0.0; i * o];
            kernels::gemm(
                i,
                n,
                o,
                1.0,
                a.data(),
                (1, i),
                dout.data(),
                (o, 1),
                0.0,
                &mut dw,
                (o, 1),
            );
            let mut db = vec![0.0; o];
            for row in dout.data().chunks(o) {
                db.iter_mut().zip(row).for_each(|(s, v)| *s += v);
            }
            vec![dx, like(w, dw), like(b, db)]
        }
        OpKind::Transpose => {
            let (r, c) = (a.shape()[0], a.shape()[1]);
            vec![like(a, transpose_raw(dout.data(), c, r))]
        }
        OpKind::Reshape(_) => vec![like(a, dout.data().to_vec())],
        OpKind::GatherRows(rows) => {
            let c = a.shape()[1];
            let mut dx = vec![0.0; a.len()];
            for (k, &r) in rows.iter().enumerate() {
                let src = &dout.data()[k * c..(k + 1) * c];
                dx[r * c..(r + 1) * c]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, s)| *d += s);
            }
            vec![like(a, dx)]
        }
        OpKind::Take(indices) => {
            let mut dx = vec![0.0; a.len()];
            for (&i, &d) in indices.iter().zip(dout.data()) {
                dx[i] += d;
            }
            vec![like(a, dx)]
        }
        OpKind::LogSoftmax => {
            let c = a.shape()[1];
            let mut dx = dout.data().to_vec();
            for (row, y) in dx.chunks_mut(c).zip(out.data().chunks(c)) {
                let total: f64 = row.iter().sum();
                row.iter_mut()
                    .zip(y)
                    .for_each(|(d, &lp)| *d -= lp.exp() * total);
            }
            vec![like(a, dx)]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let out = OpKind::Sigmoid.forward(&[&Tensor::scalar(0.0)]).unwrap();
        assert_eq!(out.item(), 0.5);
    }

    #[test]
    fn matmul_with_identity_is_noop() {
        let a = t(&[2, 3], &[1.0, -2.0, 3.5, 0.25, 7.0, -1.0]);
        let out = OpKind::MatMul.forward(&[&a, &Tensor::identity(3)]).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn unit_kernel_conv_is_identity() {
        let x = t(&[1, 1, 4, 4], &(0..16).map(f64::from).collect::<Vec<_>>());
        let w = t(&[1, 1, 1, 1], &[1.0]);
        let out = OpKind::Conv2d {
            stride: 1,
            padding: 0,
        }
        .forward(&[&x, &w])
        .unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn dot_by_hand() {
        let out = OpKind::Dot
            .forward(&[&Tensor::vector(&[1.0, 2.0]), &Tensor::vector(&[3.0, -1.0])])
            .unwrap();
        assert_eq!(out.item(), 1.0);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let err = OpKind::MatMul
            .forward(&[&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])])
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn bias_add_is_the_only_broadcast() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(OpKind::Add
            .forward(&[&a, &Tensor::vector(&[1.0, 2.0, 3.0])])
            .is_ok());
        assert!(OpKind::Add
            .forward(&[&a, &Tensor::vector(&[1.0, 2.0])])
            .is_err());
        assert!(OpKind::Multiply
            .forward(&[&a, &Tensor::vector(&[1.0, 2.0, 3.0])])
            .is_err());
    }

    #[test]
    fn conv_with_padding_matches_direct_sum() {
        let x = t(
            &[1, 2, 3, 3],
            &(0..18).map(|v| v as f64 * 0.5 - 3.0).collect::<Vec<_>>(),
        );
        let w = t(
            &[2, 2, 3, 3],
            &(0..36)
                .map(|v| ((v * 7) % 11) as f64 - 5.0)
                .collect::<Vec<_>>(),
        );
        let b = Tensor::vector(&[0.5, -1.0]);
        let out = OpKind::Conv2d {
            stride: 1,
            padding: 1,
        }
        .forward(&[&x, &w, &b])
        .unwrap();
        assert_eq!(out.shape(), &[1, 2, 3, 3]);
        for oc in 0..2 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut acc = b.data()[oc];
                    for c in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let (iy, ix) =
                                    (oy as isize + ki as isize - 1, ox as isize + kj as isize - 1);
                                if (0..3).contains(&iy) && (0..3).contains(&ix) {
                                    acc += w.data()[((oc * 2 + c) * 3 + ki) * 3 + kj]
                                        * x.data()[(c * 3 + iy as usize) * 3 + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((out.data()[(oc * 3 + oy) * 3 + ox] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 3], &[1.0, -2.0, 0.5, 4.0, 9.0, -7.0]));
        let loss = tape.sum(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn dot_gradient_swaps_arguments() {
        let mut tape = Tape::new();
        let u = tape.param(Tensor::vector(&[1.0, 2.0, -3.0]));
        let v = tape.param(Tensor::vector(&[0.5, -4.0, 2.0]));
        let loss = tape.dot(u, v).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(u).unwrap(), tape.value(v));
        assert_eq!(grads.get(v).unwrap(), tape.value(u));
    }

    #[test]
    fn log_sigmoid_dot_at_zero_gives_half_gradient() {
        let mut tape = Tape::new();
        let u = tape.param(Tensor::vector(&[1.0, 1.0]));
        let v = tape.param(Tensor::vector(&[2.0, -2.0]));
        let d = tape.dot(u, v).unwrap();
        let s = tape.sigmoid(d).unwrap();
        let loss = tape.log(s).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(u).unwrap().data(), &[1.0, -1.0]);
    }

    #[test]
    fn unreached_params_get_zero_gradients() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(&[1.0, 2.0]));
        let unused = tape.param(Tensor::zeros(&[3, 2]));
        let loss = tape.sum(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(unused).unwrap(), &Tensor::zeros(&[3, 2]));
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(&[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::EmptyTape)));
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::NotScalar(_))));

        let mut inference = Tape::inference();
        let x = inference.param(Tensor::vector(&[1.0]));
        let y = inference.sum(x).unwrap();
        assert!(matches!(inference.backward(y), Err(Error::EmptyTape)));
    }

    #[test]
    fn non_finite_detection_when_enabled() {
        let mut tape = Tape::new().with_finite_checks(true);
        let x = tape.constant(Tensor::vector(&[0.0, 1.0]));
        assert!(matches!(tape.log(x), Err(Error::NonFinite { op: "log" })));
        let mut lax = Tape::new().with_finite_checks(false);
        let x = lax.constant(Tensor::vector(&[0.0, 1.0]));
        assert!(lax.log(x).is_ok());
    }

    #[test]
    fn inference_batch_norm_with_unit_stats_is_identity() {
        let x = t(
            &[2, 3, 2, 2],
            &(0..24).map(|v| v as f64 * 0.37 - 4.0).collect::<Vec<_>>(),
        );
        let out = OpKind::BatchNorm { train: false }
            .forward(&[
                &x,
                &Tensor::ones(&[3]),
                &Tensor::zeros(&[3]),
                &Tensor::zeros(&[3]),
                &Tensor::ones(&[3]),
            ])
            .unwrap();
        let scale = 1.0 / (1.0 + BN_EPSILON).sqrt();
        for (o, i) in out.data().iter().zip(x.data()) {
            assert!((o - i * scale).abs() < 1e-15);
            assert!((o - i).abs() < 1e-4);
        }
    }

    #[test]
    fn train_batch_norm_normalizes_channels() {
        let x = t(&[4, 2], &[1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0]);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let rm = tape.constant(Tensor::zeros(&[2]));
        let rv = tape.constant(Tensor::ones(&[2]));
        let y = tape.batch_norm(xv, g, b, rm, rv, true).unwrap();
        let (mean, var) = tape.batch_stats(y).unwrap();
        assert_eq!(mean, &[2.5, 25.0]);
        assert_eq!(var, &[1.25, 125.0]);
        let out = tape.value(y);
        let col0: f64 = out.data().iter().step_by(2).sum();
        assert!(col0.abs() < 1e-12);
    }
}
