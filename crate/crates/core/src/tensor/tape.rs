use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::{Rng, RngCore};

use super::kernels::{self, ConvGeometry};
use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<S> {
    Owned(Tensor<S>),
    Param(ParamId),
}

enum Op<S> {
    Input,
    Constant,
    Param(ParamId),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    OneMinus(Var),
    Scale(Var, S),
    ConcatChannels(Var, Var),
    Dropout {
        input: Var,
        mask: Vec<S>,
    },
    Reshape(Var),
    Stack(Vec<Var>),
    Sum(Var),
    WeightedSquaredError {
        pred: Var,
        target: Vec<S>,
        weights: Vec<S>,
        scale: S,
    },
}

struct Node<S> {
    value: Value<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order and backward visits it in reverse.
pub struct Tape<'p, S: Scalar> {
    params: &'p ParamStore<S>,
    nodes: Vec<Node<S>>,
    scratch: Vec<S>,
}

/// Reverse-mode gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    nodes: Vec<Option<Vec<S>>>,
    params: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss with respect to an input leaf.
    pub fn wrt(&self, v: Var) -> Option<&[S]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[S]> {
        self.params.get(id.0).and_then(|g| g.as_deref())
    }

    /// Adds every parameter gradient into the store's gradient slots.
    pub fn accumulate_into(&self, store: &mut ParamStore<S>) {
        for (i, g) in self.params.iter().enumerate() {
            if let Some(g) = g {
                store.get_mut(ParamId(i)).accumulate_grad(g);
            }
        }
    }

    /// Elementwise sum with another gradient set from the same parameter
    /// store (used to merge per-sample tapes in a fixed order).
    pub fn merge(&mut self, other: Gradients<S>) {
        for (mine, theirs) in self.params.iter_mut().zip(other.params) {
            match (mine.as_mut(), theirs) {
                (Some(a), Some(b)) => a.iter_mut().zip(&b).for_each(|(x, &y)| *x += y),
                (None, Some(b)) => *mine = Some(b),
                _ => {}
            }
        }
    }
}

fn same_shape<S: Scalar>(op: &str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: operand shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Splits a `[C,H,W]` or `[B,C,H,W]` shape into (batch, C, H, W).
fn image_dims(op: &str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::shape(format!(
            "{op}: expected CxHxW or BxCxHxW, got {shape:?}"
        ))),
    }
}

fn with_image_dims(shape: &[usize], c: usize, h: usize, w: usize) -> Vec<usize> {
    if shape.len() == 4 {
        vec![shape[0], c, h, w]
    } else {
        vec![c, h, w]
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

impl<'p, S: Scalar> Tape<'p, S> {
    pub fn new(params: &'p ParamStore<S>) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            scratch: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<S> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        let requires_grad = match &op {
            Op::Input | Op::Param(_) => true,
            Op::Constant => false,
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => self.wants(*input) || self.wants(*weight) || bias.is_some_and(|b| self.wants(b)),
            Op::Linear {
                input,
                weight,
                bias,
            } => self.wants(*input) || self.wants(*weight) || self.wants(*bias),
            Op::MaxPool2 { input, .. } | Op::Dropout { input, .. } => self.wants(*input),
            Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::OneMinus(x)
            | Op::Scale(x, _)
            | Op::Reshape(x)
            | Op::Sum(x) => self.wants(*x),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::ConcatChannels(a, b) => {
                self.wants(*a) || self.wants(*b)
            }
            Op::Stack(items) => items.iter().any(|v| self.wants(*v)),
            Op::WeightedSquaredError { pred, .. } => self.wants(*pred),
        };
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a differentiable input leaf; its gradient is available from
    /// [`Gradients::wrt`] after backward.
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Input)
    }

    /// Records a leaf that never receives a gradient (e.g. image frames).
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Constant)
    }

    /// References a parameter without copying it.
    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let (batch, c, h, wd) = image_dims("conv2d", x.shape())?;
        let &[oc, ic, k, k2] = w.shape() else {
            return Err(Error::shape(format!(
                "conv2d: weight must be (out, in, k, k), got {:?}",
                w.shape()
            )));
        };
        if ic != c || k != k2 || stride == 0 {
            return Err(Error::shape(format!(
                "conv2d: input {:?} incompatible with weight {:?} at stride {stride}",
                x.shape(),
                w.shape()
            )));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [oc] {
                return Err(Error::shape(format!(
                    "conv2d: bias {:?} does not match {oc} output channels",
                    self.value(b).shape()
                )));
            }
        }
        let (Some(oh), Some(ow)) = (
            kernels::conv_output_extent(h, k, stride, padding),
            kernels::conv_output_extent(wd, k, stride, padding),
        ) else {
            return Err(Error::shape(format!(
                "conv2d: kernel {k} does not fit input {:?} with padding {padding}",
                x.shape()
            )));
        };
        let g = ConvGeometry {
            in_channels: c,
            height: h,
            width: wd,
            out_channels: oc,
            kernel: k,
            stride,
            padding,
            out_height: oh,
            out_width: ow,
        };
        let mut out = vec![S::zero(); batch * g.output_len()];
        let mut scratch = std::mem::take(&mut self.scratch);
        {
            let x = self.value(input).data();
            let w = self.value(weight).data();
            let b = bias.map(|b| self.value(b).data());
            for (n, chunk) in out.chunks_mut(g.output_len()).enumerate() {
                let img = &x[n * g.input_len()..(n + 1) * g.input_len()];
                kernels::conv2d_forward(&g, img, w, b, chunk, &mut scratch);
            }
        }
        self.scratch = scratch;
        let shape = with_image_dims(self.value(input).shape(), oc, oh, ow);
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(
            t,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
        ))
    }

    /// 2x2 max pooling with stride 2; both spatial extents must be even.
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let (_, _, h, w) = image_dims("max_pool2", self.value(input).shape())?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!(
                "max_pool2: spatial extents must be even, got {:?}",
                self.value(input).shape()
            )));
        }
        self.pool(input, false)
    }

    /// 2x2 max pooling with stride 2 where a trailing odd row or column
    /// forms a clipped window (output extent `ceil(n / 2)`). Identical to
    /// [`max_pool2`](Self::max_pool2) on even extents.
    pub fn max_pool2_ceil(&mut self, input: Var) -> Result<Var> {
        image_dims("max_pool2", self.value(input).shape())?;
        self.pool(input, true)
    }

    fn pool(&mut self, input: Var, ceil: bool) -> Result<Var> {
        let x = self.value(input);
        let (batch, c, h, w) = image_dims("max_pool2", x.shape())?;
        let mut out = Vec::new();
        let mut argmax = Vec::new();
        let (oh, ow) =
            kernels::max_pool2_forward(x.data(), batch * c, h, w, ceil, &mut out, &mut argmax);
        if oh == 0 || ow == 0 {
            return Err(Error::shape(format!(
                "max_pool2: input {:?} too small",
                x.shape()
            )));
        }
        let shape = with_image_dims(x.shape(), c, oh, ow);
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::MaxPool2 { input, argmax }))
    }

    fn map(&mut self, input: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(x.shape(), data).expect("same shape");
        self.push(t, op)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.map(input, |v| if v > S::zero() { v } else { S::zero() }, Op::Relu(input))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.map(input, sigmoid, Op::Sigmoid(input))
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        self.map(input, |v| v.tanh(), Op::Tanh(input))
    }

    pub fn one_minus(&mut self, input: Var) -> Var {
        self.map(input, |v| S::one() - v, Op::OneMinus(input))
    }

    pub fn scale(&mut self, input: Var, factor: S) -> Var {
        self.map(input, |v| v * factor, Op::Scale(input, factor))
    }

    fn zip(&mut self, op_name: &str, a: Var, b: Var, f: impl Fn(S, S) -> S, op: Op<S>) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(op_name, x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let t = Tensor::new(x.shape(), data)?;
        Ok(self.push(t, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (bx, cx, hx, wx) = image_dims("concat_channels", x.shape())?;
        let (by, cy, hy, wy) = image_dims("concat_channels", y.shape())?;
        if bx != by || hx != hy || wx != wy || x.shape().len() != y.shape().len() {
            return Err(Error::shape(format!(
                "concat_channels: {:?} and {:?} disagree outside the channel axis",
                x.shape(),
                y.shape()
            )));
        }
        let (px, py) = (cx * hx * wx, cy * hy * wy);
        let mut data = Vec::with_capacity(bx * (px + py));
        for n in 0..bx {
            data.extend_from_slice(&x.data()[n * px..(n + 1) * px]);
            data.extend_from_slice(&y.data()[n * py..(n + 1) * py]);
        }
        let shape = with_image_dims(x.shape(), cx + cy, hx, wx);
        let t = Tensor::new(&shape, data)?;
        Ok(self.push(t, Op::ConcatChannels(a, b)))
    }

    /// Affine map `W * flatten(x) + b` with `W` shaped (out, in).
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let &[out_dim, in_dim] = w.shape() else {
            return Err(Error::shape(format!(
                "linear: weight must be (out, in), got {:?}",
                w.shape()
            )));
        };
        if x.len() != in_dim || b.shape() != [out_dim] {
            return Err(Error::shape(format!(
                "linear: input {:?} and bias {:?} incompatible with weight {:?}",
                x.shape(),
                b.shape(),
                w.shape()
            )));
        }
        let mut out = b.data().to_vec();
        S::gemm(
            out_dim,
            in_dim,
            1,
            S::one(),
            w.data(),
            (in_dim as isize, 1),
            x.data(),
            (1, 1),
            S::one(),
            &mut out,
            (1, 1),
        );
        let t = Tensor::new(&[out_dim], out)?;
        Ok(self.push(t, Op::Linear { input, weight, bias }))
    }

    /// Inverted dropout: zeroes each entry with probability `p` and scales
    /// survivors by `1 / (1 - p)`.
    pub fn dropout(&mut self, input: Var, p: f64, rng: &mut dyn RngCore) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability must lie in [0, 1), got {p}"
            )));
        }
        let keep = S::from_f64(1.0 / (1.0 - p));
        let mask: Vec<S> = (0..self.value(input).len())
            .map(|_| if rng.random::<f64>() < p { S::zero() } else { keep })
            .collect();
        let x = self.value(input);
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(x.shape(), data)?;
        Ok(self.push(t, Op::Dropout { input, mask }))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(input).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(input)))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, items: &[Var]) -> Result<Var> {
        let Some(&first) = items.first() else {
            return Err(Error::shape("stack: no inputs"));
        };
        let inner = self.value(first).shape().to_vec();
        let mut data = Vec::with_capacity(items.len() * self.value(first).len());
        for &v in items {
            let t = self.value(v);
            if t.shape() != inner.as_slice() {
                return Err(Error::shape(format!(
                    "stack: {:?} does not match {inner:?}",
                    t.shape()
                )));
            }
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![items.len()];
        shape.extend(&inner);
        let t = Tensor::new(&shape, data)?;
        Ok(self.push(t, Op::Stack(items.to_vec())))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s: S = self.value(input).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(input))
    }

    /// `scale * sum_i weights[i % w] * (pred_i - target_i)^2`, where the
    /// weights cycle over the last axis. Produces a scalar.
    pub fn weighted_squared_error(
        &mut self,
        pred: Var,
        target: &Tensor<S>,
        weights: &[S],
        scale: S,
    ) -> Result<Var> {
        let p = self.value(pred);
        same_shape("weighted_squared_error", p, target)?;
        let last = *p.shape().last().expect("non-empty shape");
        if weights.len() != last {
            return Err(Error::shape(format!(
                "weighted_squared_error: {} weights for last axis of {}",
                weights.len(),
                last
            )));
        }
        let mut acc = S::zero();
        for (i, (&a, &b)) in p.data().iter().zip(target.data()).enumerate() {
            let d = a - b;
            acc += weights[i % last] * d * d;
        }
        let t = Tensor::scalar(acc * scale);
        Ok(self.push(
            t,
            Op::WeightedSquaredError {
                pred,
                target: target.data().to_vec(),
                weights: weights.to_vec(),
                scale,
            },
        ))
    }

    /// Fingerprint of every piecewise-linear branch taken in the forward pass
    /// (relu signs and max-pool winners). Two passes with equal fingerprints
    /// lie on the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for v in self.value(*x).data() {
                        (*v > S::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool2 { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<S>>> = (0..n).map(|_| None).collect();
        let mut param_grads: Vec<Option<Vec<S>>> = (0..self.params.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        let mut scratch = Vec::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = (match node.op {
                Op::Input | Op::Constant => None,
                _ => grads[idx].take(),
            }) else {
                continue;
            };
            match &node.op {
                Op::Input | Op::Constant => unreachable!(),
                Op::Param(id) => add_into(&mut param_grads[id.0], &g),
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let x = self.value(*input);
                    let w = self.value(*weight);
                    let (batch, c, h, wd) = image_dims("conv2d", x.shape())?;
                    let (oc, k) = (w.shape()[0], w.shape()[2]);
                    let out_shape = self.value(Var(idx)).shape();
                    let (_, _, oh, ow) = image_dims("conv2d", out_shape)?;
                    let geom = ConvGeometry {
                        in_channels: c,
                        height: h,
                        width: wd,
                        out_channels: oc,
                        kernel: k,
                        stride: *stride,
                        padding: *padding,
                        out_height: oh,
                        out_width: ow,
                    };
                    let mut gx = self.wants(*input).then(|| vec![S::zero(); x.len()]);
                    let mut gw = vec![S::zero(); w.len()];
                    let mut gb = bias.map(|_| vec![S::zero(); oc]);
                    for nb in 0..batch {
                        let xi = &x.data()[nb * geom.input_len()..(nb + 1) * geom.input_len()];
                        let go = &g[nb * geom.output_len()..(nb + 1) * geom.output_len()];
                        let gxi = gx
                            .as_mut()
                            .map(|v| &mut v[nb * geom.input_len()..(nb + 1) * geom.input_len()]);
                        kernels::conv2d_backward(
                            &geom,
                            xi,
                            w.data(),
                            go,
                            gxi,
                            Some(&mut gw),
                            gb.as_deref_mut(),
                            &mut scratch,
                        );
                    }
                    if let Some(gx) = gx {
                        add_into(&mut grads[input.0], &gx);
                    }
                    add_into(&mut grads[weight.0], &gw);
                    if let (Some(b), Some(gb)) = (bias, gb) {
                        add_into(&mut grads[b.0], &gb);
                    }
                }
                Op::MaxPool2 { input, argmax } => {
                    let slot = grads[input.0].get_or_insert_with(|| vec![S::zero(); self.value(*input).len()]);
                    for (&src, &gv) in argmax.iter().zip(&g) {
                        slot[src] += gv;
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let gx: Vec<S> = g
                        .iter()
                        .zip(xv)
                        .map(|(&gv, &v)| if v > S::zero() { gv } else { S::zero() })
                        .collect();
                    add_into(&mut grads[x.0], &gx);
                }
                Op::Sigmoid(x) => {
                    let y = self.value(Var(idx)).data();
                    let gx: Vec<S> = g
                        .iter()
                        .zip(y)
                        .map(|(&gv, &s)| gv * s * (S::one() - s))
                        .collect();
                    add_into(&mut grads[x.0], &gx);
                }
                Op::Tanh(x) => {
                    let y = self.value(Var(idx)).data();
                    let gx: Vec<S> = g
                        .iter()
                        .zip(y)
                        .map(|(&gv, &t)| gv * (S::one() - t * t))
                        .collect();
                    add_into(&mut grads[x.0], &gx);
                }
                Op::OneMinus(x) => {
                    let gx: Vec<S> = g.iter().map(|&v| -v).collect();
                    add_into(&mut grads[x.0], &gx);
                }
                Op::Scale(x, f) => {
                    let gx: Vec<S> = g.iter().map(|&v| v * *f).collect();
                    add_into(&mut grads[x.0], &gx);
                }
                Op::Add(a, b) => {
                    add_into(&mut grads[a.0], &g);
                    add_into(&mut grads[b.0], &g);
                }
                Op::Sub(a, b) => {
                    add_into(&mut grads[a.0], &g);
                    let gb: Vec<S> = g.iter().map(|&v| -v).collect();
                    add_into(&mut grads[b.0], &gb);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let ga: Vec<S> = g.iter().zip(bv).map(|(&gv, &y)| gv * y).collect();
                    let gb: Vec<S> = g.iter().zip(av).map(|(&gv, &x)| gv * x).collect();
                    add_into(&mut grads[a.0], &ga);
                    add_into(&mut grads[b.0], &gb);
                }
                Op::ConcatChannels(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (batch, ca, h, w) = image_dims("concat_channels", ta.shape())?;
                    let cb = image_dims("concat_channels", tb.shape())?.1;
                    let (pa, pb) = (ca * h * w, cb * h * w);
                    let mut ga = Vec::with_capacity(ta.len());
                    let mut gb = Vec::with_capacity(tb.len());
                    for nb in 0..batch {
                        let base = nb * (pa + pb);
                        ga.extend_from_slice(&g[base..base + pa]);
                        gb.extend_from_slice(&g[base + pa..base + pa + pb]);
                    }
                    add_into(&mut grads[a.0], &ga);
                    add_into(&mut grads[b.0], &gb);
                }
                Op::Linear { input, weight, bias } => {
                    let x = self.value(*input).data();
                    let w = self.value(*weight);
                    let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
                    let mut gw = vec![S::zero(); out_dim * in_dim];
                    for (o, row) in gw.chunks_mut(in_dim).enumerate() {
                        let go = g[o];
                        row.iter_mut().zip(x).for_each(|(r, &xv)| *r = go * xv);
                    }
                    add_into(&mut grads[weight.0], &gw);
                    add_into(&mut grads[bias.0], &g);
                    if self.wants(*input) {
                        let mut gx = vec![S::zero(); in_dim];
                        S::gemm(
                            in_dim,
                            out_dim,
                            1,
                            S::one(),
                            w.data(),
                            (1, in_dim as isize),
                            &g,
                            (1, 1),
                            S::zero(),
                            &mut gx,
                            (1, 1),
                        );
                        add_into(&mut grads[input.0], &gx);
                    }
                }
                Op::Dropout { input, mask } => {
                    let gx: Vec<S> = g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                    add_into(&mut grads[input.0], &gx);
                }
                Op::Reshape(x) => add_into(&mut grads[x.0], &g),
                Op::Stack(items) => {
                    let inner = self.value(items[0]).len();
                    for (i, v) in items.iter().enumerate() {
                        add_into(&mut grads[v.0], &g[i * inner..(i + 1) * inner]);
                    }
                }
                Op::Sum(x) => {
                    let gx = vec![g[0]; self.value(*x).len()];
                    add_into(&mut grads[x.0], &gx);
                }
                Op::WeightedSquaredError {
                    pred,
                    target,
                    weights,
                    scale,
                } => {
                    let p = self.value(*pred).data();
                    let two = S::from_f64(2.0);
                    let last = weights.len();
                    let gp: Vec<S> = p
                        .iter()
                        .zip(target)
                        .enumerate()
                        .map(|(i, (&a, &b))| g[0] * *scale * two * weights[i % last] * (a - b))
                        .collect();
                    add_into(&mut grads[pred.0], &gp);
                }
            }
        }
        Ok(Gradients {
            nodes: grads,
            params: param_grads,
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

fn add_into<S: Scalar>(slot: &mut Option<Vec<S>>, g: &[S]) {
    match slot {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}
