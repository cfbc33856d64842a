//! Recording of a forward pass and reverse-mode gradient propagation.

use crate::element::Element;
use crate::error::{mismatch, Result, TensorError};
use crate::ops::{self, ChannelOp};
use crate::param::{ParamId, ParamSet};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Leaf,
    Param(ParamId),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    Upsample2x(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    ChannelMean(Var),
    ChannelStd {
        input: Var,
        mean: Tensor<f64>,
    },
    Channel {
        x: Var,
        p: Var,
        op: ChannelOp,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    PixelNorm(Var),
    SliceChannels {
        input: Var,
        start: usize,
    },
    ConcatChannels(Var, Var),
    ExpandPlanes(Var),
    TileRows(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Operation graph for one forward pass.
///
/// Nodes are appended in evaluation order, so a reverse scan is a valid
/// topological order for backpropagation.
#[derive(Debug, Default)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(Var, ParamId)>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Adds every parameter gradient into `params[id].grad`.
    pub fn accumulate_into(&self, params: &mut ParamSet<T>) -> Result<()> {
        for &(var, id) in &self.params {
            if let Some(g) = self.get(var) {
                params.get_mut(id).grad.add_assign(g)?;
            }
        }
        Ok(())
    }
}

fn same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(mismatch(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

fn zip_map<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map on equal shapes")
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Input that takes no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Free variable whose gradient is reported by [`Gradients::get`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> Var {
        self.push(params.get(id).value.clone(), Op::Param(id), true)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let out = ops::conv2d(self.value(input), self.value(kernel), self.value(bias), stride, padding)?;
        let rg = self.any_grad(&[input, kernel, bias]);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            rg,
        ))
    }

    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let out = ops::upsample2x(self.value(input))?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(out, Op::Upsample2x(input), rg))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = ops::linear(self.value(input), self.value(weight), self.value(bias))?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(out, Op::Linear { input, weight, bias }, rg))
    }

    /// Spatial mean per sample and channel, `[N, C, H, W] -> [N, C]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (mean, _) = ops::channel_stats(self.value(x))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(mean, Op::ChannelMean(x), rg))
    }

    /// Spatial population standard deviation, `[N, C, H, W] -> [N, C]`.
    pub fn channel_std(&mut self, x: Var) -> Result<Var> {
        let (mean, std) = ops::channel_stats(self.value(x))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            std,
            Op::ChannelStd {
                input: x,
                mean: mean.cast(),
            },
            rg,
        ))
    }

    fn channel(&mut self, x: Var, p: Var, op: ChannelOp) -> Result<Var> {
        let out = ops::channel_binary(self.value(x), self.value(p), op)?;
        let rg = self.any_grad(&[x, p]);
        Ok(self.push(out, Op::Channel { x, p, op }, rg))
    }

    pub fn add_channel(&mut self, x: Var, p: Var) -> Result<Var> {
        self.channel(x, p, ChannelOp::Add)
    }

    pub fn sub_channel(&mut self, x: Var, p: Var) -> Result<Var> {
        self.channel(x, p, ChannelOp::Sub)
    }

    pub fn mul_channel(&mut self, x: Var, p: Var) -> Result<Var> {
        self.channel(x, p, ChannelOp::Mul)
    }

    pub fn div_channel(&mut self, x: Var, p: Var) -> Result<Var> {
        self.channel(x, p, ChannelOp::Div)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let f = T::from_f64(factor);
        let out = self.value(a).map(|x| x * f);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, factor), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let out = self.value(a).map(|x| x + c);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s = T::from_f64(slope);
        let out = self.value(a).map(|x| if x > T::ZERO { x } else { x * s });
        let rg = self.any_grad(&[a]);
        self.push(out, Op::LeakyRelu(a, slope), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| T::ONE / (T::ONE + (-x).exp()));
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(Element::abs);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Abs(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Square(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / T::from_f64(v.numel().max(1) as f64));
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Mean(a), rg)
    }

    /// Channel-axis Euclidean norm, `[N, C, H, W] -> [N, 1, H, W]`.
    pub fn pixel_norm(&mut self, a: Var) -> Result<Var> {
        let out = ops::pixel_norm(self.value(a))?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::PixelNorm(a), rg))
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let out = ops::slice_channels(self.value(input), start, len)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(out, Op::SliceChannels { input, start }, rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_channels(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::ConcatChannels(a, b), rg))
    }

    /// Broadcasts `[N, S]` to `[N, S, H, W]`.
    pub fn expand_planes(&mut self, a: Var, height: usize, width: usize) -> Result<Var> {
        let out = ops::expand_planes(self.value(a), height, width)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::ExpandPlanes(a), rg))
    }

    /// Repeats a `[C]` vector into `[rows, C]`.
    pub fn tile_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let out = ops::tile_rows(self.value(a), rows)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::TileRows(a), rg))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.value(loss).shape();
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: shape.to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(shape.to_vec()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match node.op {
                Op::Leaf | Op::Param(_) | Op::Constant => continue,
                _ => match grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(node, &g, &mut grads)?;
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((Var(i), id)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], var: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[var.0].requires_grad {
            return Ok(());
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn rg(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let out = &node.value;
        match node.op {
            Op::Constant | Op::Leaf | Op::Param(_) => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let cg = ops::conv2d_backward(
                    self.value(input),
                    self.value(kernel),
                    self.value(bias),
                    stride,
                    padding,
                    g,
                    self.rg(input),
                )?;
                if let Some(dx) = cg.input {
                    self.accumulate(grads, input, dx)?;
                }
                self.accumulate(grads, kernel, cg.kernel)?;
                self.accumulate(grads, bias, cg.bias)?;
            }
            Op::Upsample2x(input) => {
                self.accumulate(grads, input, ops::upsample2x_backward(g)?)?;
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let lg = ops::linear_backward(
                    self.value(input),
                    self.value(weight),
                    self.value(bias),
                    g,
                    self.rg(input),
                )?;
                if let Some(dx) = lg.input {
                    self.accumulate(grads, input, dx)?;
                }
                self.accumulate(grads, weight, lg.weight)?;
                self.accumulate(grads, bias, lg.bias)?;
            }
            Op::ChannelMean(input) => {
                let x = self.value(input);
                let (_, _, h, w) = x.dims4("channel_mean")?;
                let inv = T::from_f64(1.0 / (h * w) as f64);
                let expanded = ops::expand_planes(g, h, w)?.map(|v| v * inv);
                self.accumulate(grads, input, expanded)?;
            }
            Op::ChannelStd { input, ref mean } => {
                let x = self.value(input);
                let (_, _, h, w) = x.dims4("channel_std")?;
                let plane = h * w;
                let count = T::from_f64(plane as f64);
                let mut dx = Tensor::zeros(x.shape().to_vec());
                for p in 0..out.numel() {
                    let sigma = out.data()[p];
                    if sigma <= T::ZERO {
                        continue;
                    }
                    let mu = T::from_f64(mean.data()[p]);
                    let coef = g.data()[p] / (count * sigma);
                    let src = &x.data()[p * plane..(p + 1) * plane];
                    let dst = &mut dx.data_mut()[p * plane..(p + 1) * plane];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d = coef * (v - mu);
                    }
                }
                self.accumulate(grads, input, dx)?;
            }
            Op::Channel { x, p, op } => {
                let xv = self.value(x);
                let pv = self.value(p);
                let (_, _, h, w) = xv.dims4("channel_binary")?;
                let plane = h * w;
                if self.rg(x) {
                    let dx = match op {
                        ChannelOp::Add | ChannelOp::Sub => g.clone(),
                        ChannelOp::Mul => ops::channel_binary(g, pv, ChannelOp::Mul)?,
                        ChannelOp::Div => ops::channel_binary(g, pv, ChannelOp::Div)?,
                    };
                    self.accumulate(grads, x, dx)?;
                }
                if self.rg(p) {
                    let mut dp = Tensor::zeros(pv.shape().to_vec());
                    for (i, d) in dp.data_mut().iter_mut().enumerate() {
                        let gs = &g.data()[i * plane..(i + 1) * plane];
                        let xs = &xv.data()[i * plane..(i + 1) * plane];
                        *d = match op {
                            ChannelOp::Add => gs.iter().copied().sum(),
                            ChannelOp::Sub => -gs.iter().copied().sum::<T>(),
                            ChannelOp::Mul => gs.iter().zip(xs).map(|(&a, &b)| a * b).sum(),
                            ChannelOp::Div => {
                                let q = pv.data()[i];
                                -gs.iter().zip(xs).map(|(&a, &b)| a * b).sum::<T>() / (q * q)
                            }
                        };
                    }
                    self.accumulate(grads, p, dp)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone())?;
                self.accumulate(grads, b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone())?;
                self.accumulate(grads, b, g.map(|v| -v))?;
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    self.accumulate(grads, a, zip_map(g, self.value(b), |x, y| x * y))?;
                }
                if self.rg(b) {
                    self.accumulate(grads, b, zip_map(g, self.value(a), |x, y| x * y))?;
                }
            }
            Op::Scale(a, f) => {
                let f = T::from_f64(f);
                self.accumulate(grads, a, g.map(|v| v * f))?;
            }
            Op::AddScalar(a) => self.accumulate(grads, a, g.clone())?,
            Op::LeakyRelu(a, slope) => {
                let s = T::from_f64(slope);
                let dx = zip_map(g, self.value(a), |gv, x| if x > T::ZERO { gv } else { gv * s });
                self.accumulate(grads, a, dx)?;
            }
            Op::Sigmoid(a) => {
                let dx = zip_map(g, out, |gv, y| gv * y * (T::ONE - y));
                self.accumulate(grads, a, dx)?;
            }
            Op::Abs(a) => {
                let dx = zip_map(g, self.value(a), |gv, x| {
                    if x > T::ZERO {
                        gv
                    } else if x < T::ZERO {
                        -gv
                    } else {
                        T::ZERO
                    }
                });
                self.accumulate(grads, a, dx)?;
            }
            Op::Square(a) => {
                let two = T::from_f64(2.0);
                let dx = zip_map(g, self.value(a), |gv, x| two * x * gv);
                self.accumulate(grads, a, dx)?;
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                self.accumulate(grads, a, Tensor::full(self.value(a).shape().to_vec(), gv))?;
            }
            Op::Mean(a) => {
                let x = self.value(a);
                let gv = g.data()[0] / T::from_f64(x.numel().max(1) as f64);
                self.accumulate(grads, a, Tensor::full(x.shape().to_vec(), gv))?;
            }
            Op::PixelNorm(a) => {
                let x = self.value(a);
                let (n, c, h, w) = x.dims4("pixel_norm")?;
                let plane = h * w;
                let mut dx = Tensor::zeros(x.shape().to_vec());
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        for i in 0..plane {
                            let norm = out.data()[b * plane + i];
                            if norm > T::ZERO {
                                dx.data_mut()[off + i] =
                                    g.data()[b * plane + i] * x.data()[off + i] / norm;
                            }
                        }
                    }
                }
                self.accumulate(grads, a, dx)?;
            }
            Op::SliceChannels { input, start } => {
                let x = self.value(input);
                let (n, c, h, w) = x.dims4("slice_channels")?;
                let len = out.shape()[1];
                let plane = h * w;
                let mut dx = Tensor::zeros(x.shape().to_vec());
                for b in 0..n {
                    dx.data_mut()[(b * c + start) * plane..(b * c + start + len) * plane]
                        .copy_from_slice(&g.data()[b * len * plane..(b + 1) * len * plane]);
                }
                self.accumulate(grads, input, dx)?;
            }
            Op::ConcatChannels(a, b) => {
                let ca = self.value(a).shape()[1];
                let cb = self.value(b).shape()[1];
                if self.rg(a) {
                    self.accumulate(grads, a, ops::slice_channels(g, 0, ca)?)?;
                }
                if self.rg(b) {
                    self.accumulate(grads, b, ops::slice_channels(g, ca, cb)?)?;
                }
            }
            Op::ExpandPlanes(a) => {
                let (_, _, h, w) = g.dims4("expand_planes")?;
                let plane = h * w;
                let summed: Vec<T> = g.data().chunks(plane.max(1)).map(|c| c.iter().copied().sum()).collect();
                let shape = self.value(a).shape().to_vec();
                self.accumulate(grads, a, Tensor::new(shape, summed)?)?;
            }
            Op::TileRows(a) => {
                let cols = self.value(a).numel();
                let mut acc = Tensor::zeros([cols]);
                for row in g.data().chunks(cols.max(1)) {
                    for (d, &v) in acc.data_mut().iter_mut().zip(row) {
                        *d += v;
                    }
                }
                self.accumulate(grads, a, acc)?;
            }
        }
        Ok(())
    }
}
