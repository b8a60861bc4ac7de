//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] owns every value produced during one forward episode. Ops
//! append a node holding the result and just enough bookkeeping to run the
//! chain rule backwards; [`Var`] is a cheap handle into the tape. A tape is
//! single-threaded and is dropped at the end of the episode; the model's
//! parameters live outside it and are re-registered for each episode.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        dims: ConvDims,
    },
    AvgPool2 {
        input: Var,
    },
    UpsampleBilinear2 {
        input: Var,
    },
    UpsampleNearest {
        input: Var,
        sy: usize,
        sx: usize,
    },
    Concat {
        a: Var,
        b: Var,
    },
    SpikeStep {
        input: Var,
        slope: f32,
    },
    Tanh {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    LeakyRelu {
        input: Var,
        slope: f32,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Affine {
        input: Var,
        scale: f32,
    },
    ChannelMul {
        x: Var,
        c: Var,
    },
    ChannelAdd {
        x: Var,
        c: Var,
    },
    Sum {
        input: Var,
    },
    /// Scalar-valued op whose input gradient was computed alongside the value.
    Fused {
        input: Var,
        grad: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    needs_grad: bool,
    grad: Option<Tensor>,
}

/// Surrogate derivative of the spike step: `1 / (1 + a x^2)`.
pub fn arctan_spike(x: f32, a: f32) -> f32 {
    1.0 / (1.0 + a * x * x)
}

/// Heaviside step with ties firing.
pub fn step(x: f32) -> f32 {
    if x >= 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    no_grad: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that keeps values but never records backward information.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            no_grad: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Registers a trainable leaf whose gradient is kept after `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        let rg = !self.no_grad;
        self.push_leaf(value, rg)
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

    /// Accumulated gradient of a `param` leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            needs_grad: requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs = !self.no_grad && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op: if needs { op } else { Op::Leaf },
            requires_grad: false,
            needs_grad: needs,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn chw(&self, v: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        self.value(v)
            .chw()
            .ok_or_else(|| Error::shape(op, format!("expected C×H×W input, got {:?}", self.shape(v))))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("operands {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    // ---- structural ops -------------------------------------------------

    /// Same-size convolution: input C×H×W, weight O×C×K×K, bias O.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, padding: usize) -> Result<Var> {
        let (c, h, w) = self.chw(input, "conv2d")?;
        let (o, wc, k) = match self.shape(weight) {
            &[o, wc, k1, k2] if k1 == k2 => (o, wc, k1),
            s => return Err(Error::shape("conv2d", format!("weight must be O×C×K×K, got {s:?}"))),
        };
        if wc != c {
            return Err(Error::shape(
                "conv2d",
                format!("input channels: input has {c}, weight expects {wc}"),
            ));
        }
        if k % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel size {k} must be odd")));
        }
        if padding != (k - 1) / 2 {
            return Err(Error::shape(
                "conv2d",
                format!("padding {padding} must be (K-1)/2 = {}", (k - 1) / 2),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias: expected [{o}], got {:?}", self.shape(b)),
                ));
            }
        }
        let dims = ConvDims {
            in_channels: c,
            out_channels: o,
            height: h,
            width: w,
            kernel: k,
            pad: padding,
        };
        let out = kernels::conv2d_forward(
            &dims,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(&[o, h, w], out)?;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                dims,
            },
            &parents,
        ))
    }

    pub fn avg_pool2(&mut self, input: Var) -> Result<Var> {
        let (c, h, w) = self.chw(input, "avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "avg_pool2",
                format!("height {h} and width {w} must be even"),
            ));
        }
        let out = kernels::avg_pool2_forward(self.value(input).data(), c, h, w);
        let value = Tensor::new(&[c, h / 2, w / 2], out)?;
        Ok(self.push(value, Op::AvgPool2 { input }, &[input]))
    }

    pub fn upsample_bilinear2(&mut self, input: Var) -> Result<Var> {
        let (c, h, w) = self.chw(input, "upsample_bilinear2")?;
        if h == 0 || w == 0 {
            return Err(Error::shape("upsample_bilinear2", "empty spatial extent"));
        }
        let out = kernels::upsample_bilinear2_forward(self.value(input).data(), c, h, w);
        let value = Tensor::new(&[c, 2 * h, 2 * w], out)?;
        Ok(self.push(value, Op::UpsampleBilinear2 { input }, &[input]))
    }

    pub fn upsample_nearest(&mut self, input: Var, target: (usize, usize)) -> Result<Var> {
        let (c, h, w) = self.chw(input, "upsample_nearest")?;
        let (th, tw) = target;
        if h == 0 || w == 0 || th < h || tw < w || th % h != 0 || tw % w != 0 {
            return Err(Error::shape(
                "upsample_nearest",
                format!("{h}x{w} -> {th}x{tw} is not an integer upscale"),
            ));
        }
        let (sy, sx) = (th / h, tw / w);
        let out = kernels::upsample_nearest_forward(self.value(input).data(), c, h, w, sy, sx);
        let value = Tensor::new(&[c, th, tw], out)?;
        Ok(self.push(value, Op::UpsampleNearest { input, sy, sx }, &[input]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ca, ha, wa) = self.chw(a, "concat_channels")?;
        let (cb, hb, wb) = self.chw(b, "concat_channels")?;
        if (ha, wa) != (hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!("spatial extents {ha}x{wa} and {hb}x{wb} differ"),
            ));
        }
        let mut data = Vec::with_capacity((ca + cb) * ha * wa);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::new(&[ca + cb, ha, wa], data)?;
        Ok(self.push(value, Op::Concat { a, b }, &[a, b]))
    }

    // ---- pointwise ops --------------------------------------------------

    /// Heaviside forward, arctan-spike surrogate backward.
    pub fn spike_step(&mut self, input: Var, slope: f32) -> Var {
        let value = self.value(input).map(step);
        self.push(value, Op::SpikeStep { input, slope }, &[input])
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        let value = self.value(input).map(f32::tanh);
        self.push(value, Op::Tanh { input }, &[input])
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = self.value(input).map(sigmoid);
        self.push(value, Op::Sigmoid { input }, &[input])
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f32) -> Var {
        let value = self.value(input).map(|x| if x >= 0.0 { x } else { slope * x });
        self.push(value, Op::LeakyRelu { input, slope }, &[input])
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Tensor {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(value, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, input: Var, scale: f32, shift: f32) -> Var {
        let value = self.value(input).map(|x| scale * x + shift);
        self.push(value, Op::Affine { input, scale }, &[input])
    }

    pub fn scale(&mut self, input: Var, k: f32) -> Var {
        self.affine(input, k, 0.0)
    }

    fn channel_check(&self, x: Var, c: Var, op: &'static str) -> Result<(usize, usize)> {
        let (ch, h, w) = self.chw(x, op)?;
        if self.shape(c) != [ch] {
            return Err(Error::shape(
                op,
                format!("per-channel operand {:?} does not match {ch} channels", self.shape(c)),
            ));
        }
        Ok((ch, h * w))
    }

    /// Multiplies every plane of `x` by the matching entry of the vector `c`.
    pub fn channel_mul(&mut self, x: Var, c: Var) -> Result<Var> {
        let (_, plane) = self.channel_check(x, c, "channel_mul")?;
        let cv = self.value(c).data();
        let mut value = self.value(x).clone();
        for (i, p) in value.data_mut().chunks_mut(plane).enumerate() {
            p.iter_mut().for_each(|v| *v *= cv[i]);
        }
        Ok(self.push(value, Op::ChannelMul { x, c }, &[x, c]))
    }

    /// Adds the entry `c[k]` to every element of plane `k` of `x`.
    pub fn channel_add(&mut self, x: Var, c: Var) -> Result<Var> {
        let (_, plane) = self.channel_check(x, c, "channel_add")?;
        let cv = self.value(c).data();
        let mut value = self.value(x).clone();
        for (i, p) in value.data_mut().chunks_mut(plane).enumerate() {
            p.iter_mut().for_each(|v| *v += cv[i]);
        }
        Ok(self.push(value, Op::ChannelAdd { x, c }, &[x, c]))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s: f64 = self.value(input).data().iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum { input }, &[input])
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let n = self.value(input).numel().max(1) as f32;
        let s = self.sum(input);
        self.scale(s, 1.0 / n)
    }

    /// Records a scalar function of `input` whose gradient the caller has
    /// already computed (`grad` has the input's shape).
    pub fn fused_scalar(&mut self, input: Var, value: f32, grad: Vec<f32>) -> Result<Var> {
        if grad.len() != self.value(input).numel() {
            return Err(Error::shape(
                "fused_scalar",
                format!("gradient length {} vs input {}", grad.len(), self.value(input).numel()),
            ));
        }
        Ok(self.push(Tensor::scalar(value), Op::Fused { input, grad }, &[input]))
    }

    // ---- reverse pass ---------------------------------------------------

    /// Back-propagates from the scalar `loss`, adding into the gradients of
    /// every `param` leaf it depends on. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }

        for (i, g) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[i];
            let Some(g) = g else { continue };
            if !node.requires_grad {
                continue;
            }
            match &mut node.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(Tensor::new(node.value.shape(), g)?),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].needs_grad;
        let val = |v: Var| nodes[v.0].value.data();
        let out = nodes[i].value.data();

        let mut acc = |v: Var, contrib: Vec<f32>| {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                slot => *slot = Some(contrib),
            }
        };
        let elementwise = |f: &dyn Fn(usize) -> f32| -> Vec<f32> { (0..g.len()).map(|k| g[k] * f(k)).collect() };

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                dims,
            } => {
                if needs(*input) {
                    acc(*input, kernels::conv2d_backward_input(dims, g, val(*weight)));
                }
                if needs(*weight) {
                    acc(*weight, kernels::conv2d_backward_weight(dims, g, val(*input)));
                }
                if let Some(b) = bias {
                    if needs(*b) {
                        acc(*b, kernels::conv2d_backward_bias(dims, g));
                    }
                }
            }
            Op::AvgPool2 { input } => {
                let (c, h, w) = nodes[input.0].value.chw().expect("rank 3");
                acc(*input, kernels::avg_pool2_backward(g, c, h, w));
            }
            Op::UpsampleBilinear2 { input } => {
                let (c, h, w) = nodes[input.0].value.chw().expect("rank 3");
                acc(*input, kernels::upsample_bilinear2_backward(g, c, h, w));
            }
            Op::UpsampleNearest { input, sy, sx } => {
                let (c, h, w) = nodes[input.0].value.chw().expect("rank 3");
                acc(*input, kernels::upsample_nearest_backward(g, c, h, w, *sy, *sx));
            }
            Op::Concat { a, b } => {
                let na = nodes[a.0].value.numel();
                acc(*a, g[..na].to_vec());
                acc(*b, g[na..].to_vec());
            }
            Op::SpikeStep { input, slope } => {
                let x = val(*input);
                acc(*input, elementwise(&|k| arctan_spike(x[k], *slope)));
            }
            Op::Tanh { input } => {
                acc(*input, elementwise(&|k| 1.0 - out[k] * out[k]));
            }
            Op::Sigmoid { input } => {
                acc(*input, elementwise(&|k| out[k] * (1.0 - out[k])));
            }
            Op::LeakyRelu { input, slope } => {
                let x = val(*input);
                acc(*input, elementwise(&|k| if x[k] >= 0.0 { 1.0 } else { *slope }));
            }
            Op::Add { a, b } => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub { a, b } => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul { a, b } => {
                let (xa, xb) = (val(*a), val(*b));
                acc(*a, elementwise(&|k| xb[k]));
                acc(*b, elementwise(&|k| xa[k]));
            }
            Op::Affine { input, scale } => {
                acc(*input, g.iter().map(|v| v * scale).collect());
            }
            Op::ChannelMul { x, c } => {
                let xv = val(*x);
                let cv = val(*c);
                let plane = g.len() / cv.len();
                acc(*x, elementwise(&|k| cv[k / plane]));
                let gc = g
                    .chunks(plane)
                    .zip(xv.chunks(plane))
                    .map(|(gp, xp)| gp.iter().zip(xp).map(|(a, b)| a * b).sum())
                    .collect();
                acc(*c, gc);
            }
            Op::ChannelAdd { x, c } => {
                let plane = g.len() / val(*c).len();
                acc(*x, g.to_vec());
                acc(*c, g.chunks(plane).map(|p| p.iter().sum()).collect());
            }
            Op::Sum { input } => {
                acc(*input, vec![g[0]; nodes[input.0].value.numel()]);
            }
            Op::Fused { input, grad } => {
                acc(*input, grad.iter().map(|v| v * g[0]).collect());
            }
        }
    }
}
