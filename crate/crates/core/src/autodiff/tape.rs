//! Define-by-run operation tape.
//!
//! Every forward operation appends a node holding its output value and
//! whatever the backward rule needs. [`Tape::backward`] walks the nodes in
//! exact reverse order of recording, so a node's inputs always precede it.

use super::linalg::{gemm, MatRef};
use super::params::{GradStore, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Neg,
    Exp,
    Square,
    Sqrt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Fixed negative slope of 0.01.
    LeakyRelu,
    Sigmoid,
    Tanh,
    Linear,
}

pub const LEAKY_SLOPE: f64 = 0.01;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Linear => x,
        }
    }

    /// Derivative expressed through input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            // Subgradient at the kink is 0.
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Linear => 1.0,
        }
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

/// Backward rule for an operation whose forward value was computed outside
/// the tape (renderer, assignment-based losses).
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Vector-Jacobian product: one optional gradient per input, each shaped
    /// like the corresponding input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor)
        -> Result<Vec<Option<Tensor>>>;
}

/// Running statistics owned by a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }
    fn spatial_out(&self) -> usize {
        self.h_out * self.w_out
    }
}

enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        b_scalar: bool,
    },
    Unary {
        kind: UnaryKind,
        x: Var,
    },
    Affine {
        x: Var,
        scale: f64,
    },
    Matmul {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Activation {
        kind: Activation,
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
        channels: usize,
        inner: usize,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    MeanAxis1 {
        x: Var,
        dims: (usize, usize, usize),
    },
    Reshape {
        x: Var,
    },
    BceWithLogits {
        logits: Var,
        target: f64,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(Var, ParamId, u64)>,
    frozen: bool,
}

/// Gradients of a scalar root with respect to every node of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like its value when unreachable.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec()))
    }

    /// Add the gradients of every parameter recorded on `tape` from the
    /// store `grads` belongs to.
    pub fn accumulate_params(&self, tape: &Tape, store: &mut GradStore) {
        for &(var, id, tag) in &tape.params {
            if tag != store.tag() {
                continue;
            }
            if let Some(g) = self.get(var) {
                store.get_mut(id).add_assign(g);
            }
        }
    }
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite value produced by {what}")))
    }
}

fn shape_err(msg: String) -> Error {
    Error::ShapeMismatch(msg)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, value: Tensor, op: Op, needs_grad: bool, what: &str) -> Result<Var> {
        check_finite(&value, what)?;
        Ok(self.push(value, op, needs_grad))
    }

    /// Leaf whose gradient is tracked.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf bound to a trainable parameter of `store`.
    /// Leaf bound to a trainable parameter of `store`. While parameters are
    /// frozen it is recorded as a constant instead.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.frozen {
            return self.constant(store.value(id).clone());
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.params.push((v, id, store.tag()));
        v
    }

    /// Record parameters as constants, e.g. when only input gradients of a
    /// network are needed.
    pub fn set_params_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn params(&self) -> impl Iterator<Item = (Var, ParamId)> + '_ {
        self.params.iter().map(|&(v, id, _)| (v, id))
    }

    // ---------------------------------------------------------------- elementwise

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let b_scalar = if va.shape() == vb.shape() {
            false
        } else if vb.len() == 1 {
            true
        } else {
            return Err(shape_err(format!(
                "{kind:?}: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        };
        if kind == BinaryKind::Div && vb.data().iter().any(|&d| d == 0.0) {
            return Err(Error::Numeric("division by zero".into()));
        }
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let data: Vec<f64> = if b_scalar {
            let s = vb.item();
            va.data().iter().map(|&x| f(x, s)).collect()
        } else {
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect()
        };
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push_checked(out, Op::Binary { kind, a, b, b_scalar }, ng, "elementwise op")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if kind == UnaryKind::Sqrt && vx.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Numeric("sqrt of a negative value".into()));
        }
        let out = vx.map(|v| match kind {
            UnaryKind::Neg => -v,
            UnaryKind::Exp => v.exp(),
            UnaryKind::Square => v * v,
            UnaryKind::Sqrt => v.sqrt(),
        });
        let ng = self.needs_grad(x);
        self.push_checked(out, Op::Unary { kind, x }, ng, "elementwise op")
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Square, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, x)
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        let ng = self.needs_grad(x);
        self.push_checked(out, Op::Affine { x, scale: factor }, ng, "scale")
    }

    // ---------------------------------------------------------------- linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(shape_err(format!(
                "matmul {:?} x {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(MatRef::new(va.data(), m, k), MatRef::new(vb.data(), k, n), &mut out, 0.0);
        let out = Tensor::new(vec![m, n], out)?;
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push_checked(out, Op::Matmul { a, b }, ng, "matmul")
    }

    /// `x[..., f] + bias[f]`, broadcasting over all leading dimensions.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let f = vb.len();
        if vx.shape().last() != Some(&f) {
            return Err(shape_err(format!(
                "add_bias {:?} + {:?}",
                vx.shape(),
                vb.shape()
            )));
        }
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(f) {
            for (o, b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let ng = self.needs_grad(x) || self.needs_grad(bias);
        self.push_checked(out, Op::AddBias { x, bias }, ng, "add_bias")
    }

    /// 2-D cross-correlation. `x` is `[C, H, W]` or `[B, C, H, W]`,
    /// `w` is `[C_out, C_in, k, k]`, `bias` is `[C_out]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let vx = self.value(x);
        let vw = self.value(w);
        let batched = vx.rank() == 4;
        let (batch, c_in, h, wd) = match vx.shape() {
            [c, h, w] => (1, *c, *h, *w),
            [b, c, h, w] => (*b, *c, *h, *w),
            s => return Err(shape_err(format!("conv2d input rank: {s:?}"))),
        };
        let (c_out, k) = match vw.shape() {
            [o, i, k1, k2] if *i == c_in && k1 == k2 => (*o, *k1),
            s => {
                return Err(shape_err(format!(
                    "conv2d kernel {s:?} for {c_in} input channels"
                )))
            }
        };
        if k == 0 || stride == 0 {
            return Err(Error::InvalidConfig("conv2d needs k >= 1 and stride >= 1".into()));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::InvalidConfig(format!(
                "conv2d kernel {k} larger than padded input {h}x{wd} (pad {pad})"
            )));
        }
        let h_out = (h + 2 * pad - k) / stride + 1;
        let w_out = (wd + 2 * pad - k) / stride + 1;
        if let Some(b) = bias {
            if self.value(b).len() != c_out {
                return Err(shape_err("conv2d bias length".into()));
            }
        }
        let geom = ConvGeom {
            batch,
            c_in,
            h,
            w: wd,
            c_out,
            k,
            stride,
            pad,
            h_out,
            w_out,
        };
        let patch = geom.patch();
        let so = geom.spatial_out();
        let mut cols = vec![0.0; batch * patch * so];
        let mut out = vec![0.0; batch * c_out * so];
        for bi in 0..batch {
            let xb = &vx.data()[bi * c_in * h * wd..(bi + 1) * c_in * h * wd];
            let cb = &mut cols[bi * patch * so..(bi + 1) * patch * so];
            im2col(xb, &geom, cb);
            let ob = &mut out[bi * c_out * so..(bi + 1) * c_out * so];
            gemm(
                MatRef::new(vw.data(), c_out, patch),
                MatRef::new(cb, patch, so),
                ob,
                0.0,
            );
            if let Some(b) = bias {
                let vb = self.value(b).data();
                for (co, row) in ob.chunks_mut(so).enumerate() {
                    for v in row {
                        *v += vb[co];
                    }
                }
            }
        }
        let shape = if batched {
            vec![batch, c_out, h_out, w_out]
        } else {
            vec![c_out, h_out, w_out]
        };
        let out = Tensor::new(shape, out)?;
        let ng = self.needs_grad(x) || self.needs_grad(w) || bias.is_some_and(|b| self.needs_grad(b));
        self.push_checked(
            out,
            Op::Conv2d {
                x,
                w,
                bias,
                geom,
                cols,
            },
            ng,
            "conv2d",
        )
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| kind.apply(v));
        let ng = self.needs_grad(x);
        self.push_checked(out, Op::Activation { kind, x }, ng, "activation")
    }

    /// Batch normalization over dimension 1 of `[B, C, ...]`.
    ///
    /// With `training` the batch statistics normalize the input and update
    /// `stats`; otherwise `stats` is used as is.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        training: bool,
    ) -> Result<Var> {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        if shape.len() < 2 {
            return Err(shape_err(format!("batch_norm input {shape:?}")));
        }
        let (b, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        if self.value(gamma).len() != c || self.value(beta).len() != c || stats.mean.len() != c {
            return Err(shape_err(format!("batch_norm parameters for {c} channels")));
        }
        if training && b < 2 {
            return Err(Error::InvalidConfig(
                "batch_norm in training mode needs a batch of at least 2".into(),
            ));
        }
        let data = vx.data();
        let m = (b * inner) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        if training {
            for bi in 0..b {
                for ci in 0..c {
                    let off = (bi * c + ci) * inner;
                    mean[ci] += data[off..off + inner].iter().sum::<f64>();
                }
            }
            for v in &mut mean {
                *v /= m;
            }
            for bi in 0..b {
                for ci in 0..c {
                    let off = (bi * c + ci) * inner;
                    var[ci] += data[off..off + inner]
                        .iter()
                        .map(|v| (v - mean[ci]) * (v - mean[ci]))
                        .sum::<f64>();
                }
            }
            for v in &mut var {
                *v /= m;
            }
        } else {
            mean.copy_from_slice(&stats.mean);
            var.copy_from_slice(&stats.var);
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * inner;
                for i in off..off + inner {
                    let xh = (data[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = xh;
                    out[i] = g[ci] * xh + be[ci];
                }
            }
        }
        if training {
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            for ci in 0..c {
                stats.mean[ci] = (1.0 - BN_MOMENTUM) * stats.mean[ci] + BN_MOMENTUM * mean[ci];
                stats.var[ci] =
                    (1.0 - BN_MOMENTUM) * stats.var[ci] + BN_MOMENTUM * var[ci] * unbias;
            }
        }
        let out = Tensor::new(shape, out)?;
        let ng = self.needs_grad(x) || self.needs_grad(gamma) || self.needs_grad(beta);
        self.push_checked(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: training,
                channels: c,
                inner,
            },
            ng,
            "batch_norm",
        )
    }

    // ---------------------------------------------------------------- reductions & shape

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.needs_grad(x);
        self.push_checked(out, Op::Sum { x }, ng, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.is_empty() {
            return Err(shape_err("mean of an empty tensor".into()));
        }
        let out = Tensor::scalar(vx.sum() / vx.len() as f64);
        let ng = self.needs_grad(x);
        self.push_checked(out, Op::Mean { x }, ng, "mean")
    }

    /// Mean over the middle axis of `[A, N, F]`, giving `[A, F]`.
    pub fn mean_axis1(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (a, n, f) = match vx.shape() {
            [a, n, f] if *n > 0 => (*a, *n, *f),
            s => return Err(shape_err(format!("mean_axis1 on {s:?}"))),
        };
        let mut out = vec![0.0; a * f];
        for ai in 0..a {
            for ni in 0..n {
                let row = &vx.data()[(ai * n + ni) * f..(ai * n + ni + 1) * f];
                for (o, v) in out[ai * f..(ai + 1) * f].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        for v in &mut out {
            *v /= n as f64;
        }
        let out = Tensor::new(vec![a, f], out)?;
        let ng = self.needs_grad(x);
        self.push_checked(out, Op::MeanAxis1 { x, dims: (a, n, f) }, ng, "mean_axis1")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        let ng = self.needs_grad(x);
        Ok(self.push(out, Op::Reshape { x }, ng))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against a constant label.
    pub fn bce_with_logits(&mut self, logits: Var, target: f64) -> Result<Var> {
        let vz = self.value(logits);
        if vz.is_empty() {
            return Err(shape_err("bce of an empty batch".into()));
        }
        let total: f64 = vz
            .data()
            .iter()
            .map(|&z| z.max(0.0) - z * target + (-z.abs()).exp().ln_1p())
            .sum();
        let out = Tensor::scalar(total / vz.len() as f64);
        let ng = self.needs_grad(logits);
        self.push_checked(out, Op::BceWithLogits { logits, target }, ng, "bce")
    }

    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        let ng = inputs.iter().any(|&v| self.needs_grad(v));
        let name = op.name();
        self.push_checked(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            ng,
            name,
        )
    }

    // ---------------------------------------------------------------- backward

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::NotScalar(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(rv.shape().to_vec(), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            check_finite(&g, "backward")?;
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs_grad(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b, b_scalar } => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let bval = |i: usize| if *b_scalar { vb[0] } else { vb[i] };
                let shape_a = self.value(*a).shape().to_vec();
                if self.needs_grad(*a) {
                    let ga: Vec<f64> = match kind {
                        BinaryKind::Add | BinaryKind::Sub => gd.to_vec(),
                        BinaryKind::Mul => gd.iter().enumerate().map(|(i, g)| g * bval(i)).collect(),
                        BinaryKind::Div => gd.iter().enumerate().map(|(i, g)| g / bval(i)).collect(),
                    };
                    self.accumulate(grads, *a, Tensor::new(shape_a, ga)?);
                }
                if self.needs_grad(*b) {
                    let per: Vec<f64> = match kind {
                        BinaryKind::Add => gd.to_vec(),
                        BinaryKind::Sub => gd.iter().map(|g| -g).collect(),
                        BinaryKind::Mul => gd.iter().zip(va).map(|(g, x)| g * x).collect(),
                        BinaryKind::Div => gd
                            .iter()
                            .enumerate()
                            .map(|(i, g)| -g * va[i] / (bval(i) * bval(i)))
                            .collect(),
                    };
                    let gb = if *b_scalar {
                        Tensor::full(self.value(*b).shape().to_vec(), per.iter().sum())
                    } else {
                        Tensor::new(self.value(*b).shape().to_vec(), per)?
                    };
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Unary { kind, x } => {
                let vx = self.value(*x).data();
                let y = node.value.data();
                let gx: Vec<f64> = gd
                    .iter()
                    .enumerate()
                    .map(|(i, g)| match kind {
                        UnaryKind::Neg => -g,
                        UnaryKind::Exp => g * y[i],
                        UnaryKind::Square => 2.0 * g * vx[i],
                        UnaryKind::Sqrt => g * 0.5 / y[i],
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), gx)?);
            }
            Op::Affine { x, scale } => {
                let mut gx = g.clone();
                gx.scale(*scale);
                let gx = gx.reshape(self.value(*x).shape().to_vec())?;
                self.accumulate(grads, *x, gx);
            }
            Op::Matmul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.needs_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(MatRef::new(gd, m, n), MatRef::new(vb.data(), k, n).t(), &mut ga, 0.0);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], ga)?);
                }
                if self.needs_grad(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(MatRef::new(va.data(), m, k).t(), MatRef::new(gd, m, n), &mut gb, 0.0);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], gb)?);
                }
            }
            Op::AddBias { x, bias } => {
                if self.needs_grad(*x) {
                    self.accumulate(grads, *x, g.clone());
                }
                if self.needs_grad(*bias) {
                    let f = self.value(*bias).len();
                    let mut gb = vec![0.0; f];
                    for row in gd.chunks(f) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::new(self.value(*bias).shape().to_vec(), gb)?);
                }
            }
            Op::Conv2d {
                x,
                w,
                bias,
                geom,
                cols,
            } => self.conv2d_backward(*x, *w, *bias, geom, cols, gd, grads)?,
            Op::Activation { kind, x } => {
                let vx = self.value(*x).data();
                let y = node.value.data();
                let gx: Vec<f64> = gd
                    .iter()
                    .enumerate()
                    .map(|(i, g)| g * kind.derivative(vx[i], y[i]))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), gx)?);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
                channels,
                inner,
            } => {
                let (c, inner) = (*channels, *inner);
                let b = gd.len() / (c * inner);
                let m = (b * inner) as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * inner;
                        for i in off..off + inner {
                            sum_g[ci] += gd[i];
                            sum_gx[ci] += gd[i] * xhat[i];
                        }
                    }
                }
                if self.needs_grad(*gamma) {
                    self.accumulate(grads, *gamma, Tensor::new(vec![c], sum_gx.clone())?);
                }
                if self.needs_grad(*beta) {
                    self.accumulate(grads, *beta, Tensor::new(vec![c], sum_g.clone())?);
                }
                if self.needs_grad(*x) {
                    let gam = self.value(*gamma).data();
                    let mut gx = vec![0.0; gd.len()];
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * inner;
                            let s = gam[ci] * inv_std[ci];
                            for i in off..off + inner {
                                gx[i] = if *batch_stats {
                                    s / m * (m * gd[i] - sum_g[ci] - xhat[i] * sum_gx[ci])
                                } else {
                                    s * gd[i]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), gx)?);
                }
            }
            Op::Sum { x } => {
                let gx = Tensor::full(self.value(*x).shape().to_vec(), gd[0]);
                self.accumulate(grads, *x, gx);
            }
            Op::Mean { x } => {
                let n = self.value(*x).len() as f64;
                let gx = Tensor::full(self.value(*x).shape().to_vec(), gd[0] / n);
                self.accumulate(grads, *x, gx);
            }
            Op::MeanAxis1 { x, dims: (a, n, f) } => {
                let mut gx = vec![0.0; a * n * f];
                for ai in 0..*a {
                    for ni in 0..*n {
                        for fi in 0..*f {
                            gx[(ai * n + ni) * f + fi] = gd[ai * f + fi] / *n as f64;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![*a, *n, *f], gx)?);
            }
            Op::Reshape { x } => {
                let gx = g.clone().reshape(self.value(*x).shape().to_vec())?;
                self.accumulate(grads, *x, gx);
            }
            Op::BceWithLogits { logits, target } => {
                let vz = self.value(*logits);
                let n = vz.len() as f64;
                let gz = vz.map(|z| gd[0] * (sigmoid(z) - target) / n);
                self.accumulate(grads, *logits, gz);
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = op.backward(&vals, &node.value, g)?;
                if gs.len() != inputs.len() {
                    return Err(shape_err(format!(
                        "custom op {} returned {} gradients for {} inputs",
                        op.name(),
                        gs.len(),
                        inputs.len()
                    )));
                }
                for (&v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        if gi.shape() != self.value(v).shape() {
                            return Err(shape_err(format!(
                                "custom op {} gradient shape {:?} for input {:?}",
                                op.name(),
                                gi.shape(),
                                self.value(v).shape()
                            )));
                        }
                        self.accumulate(grads, v, gi);
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: &ConvGeom,
        cols: &[f64],
        gd: &[f64],
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let patch = geom.patch();
        let so = geom.spatial_out();
        let per_out = geom.c_out * so;
        if let Some(b) = bias {
            if self.needs_grad(b) {
                let mut gb = vec![0.0; geom.c_out];
                for bi in 0..geom.batch {
                    for (co, row) in gd[bi * per_out..(bi + 1) * per_out].chunks(so).enumerate() {
                        gb[co] += row.iter().sum::<f64>();
                    }
                }
                self.accumulate(grads, b, Tensor::new(vec![geom.c_out], gb)?);
            }
        }
        if self.needs_grad(w) {
            let mut gw = vec![0.0; geom.c_out * patch];
            for bi in 0..geom.batch {
                gemm(
                    MatRef::new(&gd[bi * per_out..(bi + 1) * per_out], geom.c_out, so),
                    MatRef::new(&cols[bi * patch * so..(bi + 1) * patch * so], patch, so).t(),
                    &mut gw,
                    1.0,
                );
            }
            self.accumulate(grads, w, Tensor::new(self.value(w).shape().to_vec(), gw)?);
        }
        if self.needs_grad(x) {
            let vw = self.value(w).data();
            let per_in = geom.c_in * geom.h * geom.w;
            let mut gx = vec![0.0; geom.batch * per_in];
            let mut dcols = vec![0.0; patch * so];
            for bi in 0..geom.batch {
                gemm(
                    MatRef::new(vw, geom.c_out, patch).t(),
                    MatRef::new(&gd[bi * per_out..(bi + 1) * per_out], geom.c_out, so),
                    &mut dcols,
                    0.0,
                );
                col2im(&dcols, geom, &mut gx[bi * per_in..(bi + 1) * per_in]);
            }
            self.accumulate(grads, x, Tensor::new(self.value(x).shape().to_vec(), gx)?);
        }
        Ok(())
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let so = g.spatial_out();
    for ci in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * so..(row + 1) * so];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * g.w_out + ox] = if iy >= 0
                            && (iy as usize) < g.h
                            && ix >= 0
                            && (ix as usize) < g.w
                        {
                            x[(ci * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let so = g.spatial_out();
    for ci in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * so..(row + 1) * so];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            x[(ci * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}
