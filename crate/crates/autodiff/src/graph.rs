//! Tape of primitive applications and the reverse sweep over it.
//!
//! Nodes are appended in evaluation order, so the node index order is a
//! topological order and [`Graph::backward`] simply walks it in reverse.

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;
use crate::warp::{Rigid2, WarpTaps};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Softplus,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    ChannelBias {
        input: Var,
        bias: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
        rows: usize,
        n: usize,
        m: usize,
    },
    Activation(Var, Activation),
    Neg(Var),
    Scale(Var, f64),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddN(Vec<Var>),
    MulChannels {
        feature: Var,
        weight: Var,
        channels: usize,
    },
    Concat {
        inputs: Vec<Var>,
        widths: Vec<usize>,
    },
    Slice {
        input: Var,
        start: usize,
        len: usize,
        width: usize,
    },
    Softmax {
        input: Var,
        width: usize,
    },
    Warp {
        input: Var,
        taps: Arc<WarpTaps>,
        channels: usize,
    },
    Upsample2x {
        input: Var,
        h: usize,
        w: usize,
        c: usize,
    },
    Reshape(Var),
    Tile {
        input: Var,
        times: usize,
    },
    Sum(Var),
    Mean(Var),
    WeightedSum {
        input: Var,
        weights: Vec<f64>,
    },
    SmoothL1(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    trainable: bool,
    requires_grad: bool,
}

/// A single-threaded differentiation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to the trainable leaves of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a trainable leaf (all zeros when the leaf does not reach
    /// the loss). Constants and intermediate nodes have none.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

fn shape_err(op: &'static str, expected: &[usize], got: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}

fn hwc(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(TensorError::Contract(format!(
            "{op}: expected an [H, W, C] tensor, got shape {:?}",
            t.shape()
        ))),
    }
}

/// Accumulator for input `v`, or `None` when `v` needs no gradient.
fn grad_slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn last_axis(t: &Tensor) -> usize {
    t.shape().last().copied().unwrap_or(1)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            trainable: false,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].trainable = true;
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_trainable(&self, v: Var) -> bool {
        self.nodes[v.0].trainable
    }

    /// Cross-correlation of an `[H, W, Cin]` input with a `[k, k, Cin, Cout]`
    /// kernel. `Same` padding yields `ceil(H / stride)` rows.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (h, w, cin) = hwc("conv2d", self.value(input))?;
        let (k, kcin, cout) = match *self.shape(kernel) {
            [k1, k2, ci, co] if k1 == k2 => (k1, ci, co),
            _ => {
                return Err(TensorError::Contract(format!(
                    "conv2d: kernel must be [k, k, Cin, Cout], got {:?}",
                    self.shape(kernel)
                )))
            }
        };
        if kcin != cin {
            return Err(TensorError::Axis {
                op: "conv2d",
                axis: 2,
                left: cin,
                right: kcin,
            });
        }
        if k % 2 == 0 || stride == 0 {
            return Err(TensorError::Contract(format!(
                "conv2d: kernel size must be odd and stride positive (k={k}, stride={stride})"
            )));
        }
        let pad = match padding {
            Padding::Same => (k - 1) / 2,
            Padding::Valid => 0,
        };
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(TensorError::Contract(format!(
                "conv2d: {h}x{w} input too small for a {k}x{k} kernel"
            )));
        }
        let geom = ConvGeom {
            h,
            w,
            cin,
            k,
            cout,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        };
        let out = kernels::conv2d_forward(&geom, self.value(input).data(), self.value(kernel).data());
        let value = Tensor::new([geom.ho, geom.wo, cout], out)?;
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.push(value, Op::Conv2d { input, kernel, geom }, rg))
    }

    /// Adds a per-channel bias `[C]` to any tensor whose last axis is `C`.
    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let c = last_axis(self.value(input));
        if self.shape(bias) != [c] {
            return Err(shape_err("channel_bias", &[c], self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(input).clone();
        for chunk in value.data_mut().chunks_mut(c) {
            for (v, bb) in chunk.iter_mut().zip(&b) {
                *v += bb;
            }
        }
        let rg = self.rg(input) || self.rg(bias);
        Ok(self.push(value, Op::ChannelBias { input, bias }, rg))
    }

    /// Affine map `x W + b` for `x` of shape `[n]` or a batch `[rows, n]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, m) = match *self.shape(weight) {
            [n, m] => (n, m),
            _ => {
                return Err(TensorError::Contract(format!(
                    "linear: weight must be [n, m], got {:?}",
                    self.shape(weight)
                )))
            }
        };
        let (rows, batched) = match *self.shape(input) {
            [len] if len == n => (1, false),
            [r, len] if len == n => (r, true),
            _ => {
                return Err(TensorError::Axis {
                    op: "linear",
                    axis: self.shape(input).len().saturating_sub(1),
                    left: last_axis(self.value(input)),
                    right: n,
                })
            }
        };
        if self.shape(bias) != [m] {
            return Err(shape_err("linear", &[m], self.shape(bias)));
        }
        let mut out = Vec::with_capacity(rows * m);
        for _ in 0..rows {
            out.extend_from_slice(self.value(bias).data());
        }
        kernels::gemm(
            rows,
            n,
            m,
            self.value(input).data(),
            (n as isize, 1),
            self.value(weight).data(),
            (m as isize, 1),
            1.0,
            &mut out,
        );
        let shape = if batched { vec![rows, m] } else { vec![m] };
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            value,
            Op::Linear {
                input,
                weight,
                bias,
                rows,
                n,
                m,
            },
            rg,
        ))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let f = match kind {
            Activation::Relu => |x: f64| x.max(0.0),
            Activation::Sigmoid => kernels::sigmoid,
            Activation::Softplus => kernels::softplus,
        };
        let value = self.value(input).map(f);
        let rg = self.rg(input);
        self.push(value, Op::Activation(input, kind), rg)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Sigmoid)
    }

    pub fn softplus(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Softplus)
    }

    pub fn neg(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|x| -x);
        let rg = self.rg(input);
        self.push(value, Op::Neg(input), rg)
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let value = self.value(input).map(|x| x * factor);
        let rg = self.rg(input);
        self.push(value, Op::Scale(input, factor), rg)
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        self.value(a)
            .zip_map(self.value(b), f)
            .map_err(|_| shape_err(op, self.shape(a), self.shape(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Sum of equally shaped tensors, accumulated in list order.
    pub fn add_n(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| TensorError::Contract("add_n: empty input list".into()))?;
        let mut value = self.value(first).clone();
        for &v in &inputs[1..] {
            if self.shape(v) != value.shape() {
                return Err(shape_err("add_n", value.shape(), self.shape(v)));
            }
            for (acc, x) in value.data_mut().iter_mut().zip(self.value(v).data()) {
                *acc += x;
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(value, Op::AddN(inputs.to_vec()), rg))
    }

    /// `feature[.., c] * weight[.., 0]`: a single-channel map broadcast over
    /// every channel of `feature`.
    pub fn mul_channels(&mut self, feature: Var, weight: Var) -> Result<Var> {
        let fs = self.shape(feature).to_vec();
        let mut expected = fs.clone();
        if let Some(last) = expected.last_mut() {
            *last = 1;
        }
        if self.shape(weight) != expected.as_slice() {
            return Err(shape_err("mul_channels", &expected, self.shape(weight)));
        }
        let channels = *fs.last().unwrap_or(&1);
        let w = self.value(weight).data().to_vec();
        let mut value = self.value(feature).clone();
        for (chunk, wt) in value.data_mut().chunks_mut(channels).zip(&w) {
            for v in chunk {
                *v *= wt;
            }
        }
        let rg = self.rg(feature) || self.rg(weight);
        Ok(self.push(
            value,
            Op::MulChannels {
                feature,
                weight,
                channels,
            },
            rg,
        ))
    }

    /// Concatenates along the last axis; all leading axes must agree.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| TensorError::Contract("concat: empty input list".into()))?;
        let lead = self.shape(first)[..self.shape(first).len().saturating_sub(1)].to_vec();
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(shape_err("concat", &lead, s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &wd) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[r * wd..(r + 1) * wd]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, out)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                widths,
            },
            rg,
        ))
    }

    /// Selects `len` consecutive entries of the last axis starting at `start`.
    pub fn slice_last(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let width = *shape
            .last()
            .ok_or_else(|| TensorError::Contract("slice_last: scalar input".into()))?;
        if start + len > width || len == 0 {
            return Err(TensorError::Contract(format!(
                "slice_last: range {start}..{} outside axis of size {width}",
                start + len
            )));
        }
        let out: Vec<f64> = self
            .value(input)
            .data()
            .chunks(width)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut oshape = shape;
        *oshape.last_mut().unwrap() = len;
        let value = Tensor::new(oshape, out)?;
        let rg = self.rg(input);
        Ok(self.push(
            value,
            Op::Slice {
                input,
                start,
                len,
                width,
            },
            rg,
        ))
    }

    /// Softmax along the last axis.
    pub fn softmax_last(&mut self, input: Var) -> Result<Var> {
        let width = last_axis(self.value(input));
        let mut value = self.value(input).clone();
        for row in value.data_mut().chunks_mut(width) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let rg = self.rg(input);
        Ok(self.push(value, Op::Softmax { input, width }, rg))
    }

    /// Bilinear resampling of an `[H, W, C]` grid under a rigid motion given in
    /// voxel units. Destination cells whose preimage falls outside the grid
    /// read zero. The transform is treated as a constant.
    pub fn bilinear_warp(&mut self, input: Var, transform: &Rigid2) -> Result<Var> {
        let (h, w, c) = hwc("bilinear_warp", self.value(input))?;
        let taps = WarpTaps::bilinear(h, w, transform);
        let out = taps.forward(self.value(input).data(), c);
        let value = Tensor::new([h, w, c], out)?;
        let rg = self.rg(input);
        Ok(self.push(
            value,
            Op::Warp {
                input,
                taps,
                channels: c,
            },
            rg,
        ))
    }

    /// Nearest-neighbor 2x spatial upsampling of an `[H, W, C]` grid.
    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let (h, w, c) = hwc("upsample2x", self.value(input))?;
        let src = self.value(input).data();
        let mut out = vec![0.0; 4 * h * w * c];
        for y in 0..2 * h {
            for x in 0..2 * w {
                let s = ((y / 2) * w + x / 2) * c;
                let d = (y * 2 * w + x) * c;
                out[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
        let value = Tensor::new([2 * h, 2 * w, c], out)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::Upsample2x { input, h, w, c }, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).reshape(shape)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::Reshape(input), rg))
    }

    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let n = self.value(input).len();
        self.reshape(input, &[n])
    }

    /// Repeats a `[d]` vector into `[times, d]`.
    pub fn tile(&mut self, input: Var, times: usize) -> Result<Var> {
        let d = match *self.shape(input) {
            [d] => d,
            _ => {
                return Err(TensorError::Contract(format!(
                    "tile: expected a vector, got {:?}",
                    self.shape(input)
                )))
            }
        };
        let src = self.value(input).data().to_vec();
        let mut out = Vec::with_capacity(times * d);
        for _ in 0..times {
            out.extend_from_slice(&src);
        }
        let value = Tensor::new([times, d], out)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::Tile { input, times }, rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        let rg = self.rg(input);
        self.push(value, Op::Sum(input), rg)
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        if t.is_empty() {
            return Err(TensorError::Contract("mean: empty tensor".into()));
        }
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.rg(input);
        Ok(self.push(value, Op::Mean(input), rg))
    }

    /// `sum_i weights[i] * x[i]` with constant weights.
    pub fn weighted_sum(&mut self, input: Var, weights: &[f64]) -> Result<Var> {
        if weights.len() != self.value(input).len() {
            return Err(shape_err("weighted_sum", self.shape(input), &[weights.len()]));
        }
        let s = self
            .value(input)
            .data()
            .iter()
            .zip(weights)
            .map(|(x, w)| x * w)
            .sum();
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                input,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Elementwise Huber loss with unit transition point.
    pub fn smooth_l1(&mut self, input: Var) -> Var {
        let value = self
            .value(input)
            .map(|x| if x.abs() < 1.0 { 0.5 * x * x } else { x.abs() - 0.5 });
        let rg = self.rg(input);
        self.push(value, Op::SmoothL1(input), rg)
    }

    /// Reverse sweep from a scalar `loss`. Gradients are summed over all paths.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        let grads = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| {
                node.trainable.then(|| {
                    let data = grads
                        .get_mut(i)
                        .and_then(Option::take)
                        .unwrap_or_else(|| vec![0.0; node.value.len()]);
                    Tensor::new(node.value.shape(), data).expect("gradient length matches node")
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        macro_rules! acc {
            ($v:expr, |$buf:ident| $body:block) => {
                if let Some($buf) = grad_slot(nodes, grads, $v) {
                    $body
                }
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, geom } => {
                let x = nodes[input.0].value.data();
                let k = nodes[kernel.0].value.data();
                acc!(*kernel, |buf| {
                    kernels::conv2d_backward_kernel(geom, x, g, buf);
                });
                acc!(*input, |buf| {
                    kernels::conv2d_backward_input(geom, k, g, buf);
                });
            }
            Op::ChannelBias { input, bias } => {
                acc!(*input, |buf| {
                    for (b, gv) in buf.iter_mut().zip(g) {
                        *b += gv;
                    }
                });
                acc!(*bias, |buf| {
                    let c = buf.len();
                    for chunk in g.chunks(c) {
                        for (b, gv) in buf.iter_mut().zip(chunk) {
                            *b += gv;
                        }
                    }
                });
            }
            Op::Linear {
                input,
                weight,
                bias,
                rows,
                n,
                m,
            } => {
                let (rows, n, m) = (*rows, *n, *m);
                let x = nodes[input.0].value.data();
                let wt = nodes[weight.0].value.data();
                acc!(*weight, |buf| {
                    kernels::gemm(n, rows, m, x, (1, n as isize), g, (m as isize, 1), 1.0, buf);
                });
                acc!(*bias, |buf| {
                    for chunk in g.chunks(m) {
                        for (b, gv) in buf.iter_mut().zip(chunk) {
                            *b += gv;
                        }
                    }
                });
                acc!(*input, |buf| {
                    kernels::gemm(rows, m, n, g, (m as isize, 1), wt, (1, m as isize), 1.0, buf);
                });
            }
            Op::Activation(input, kind) => {
                let x = nodes[input.0].value.data();
                let y = node.value.data();
                acc!(*input, |buf| {
                    match kind {
                        Activation::Relu => {
                            for ((b, gv), xv) in buf.iter_mut().zip(g).zip(x) {
                                if *xv > 0.0 {
                                    *b += gv;
                                }
                            }
                        }
                        Activation::Sigmoid => {
                            for ((b, gv), yv) in buf.iter_mut().zip(g).zip(y) {
                                *b += gv * yv * (1.0 - yv);
                            }
                        }
                        Activation::Softplus => {
                            for ((b, gv), xv) in buf.iter_mut().zip(g).zip(x) {
                                *b += gv * kernels::sigmoid(*xv);
                            }
                        }
                    }
                });
            }
            Op::Neg(input) => acc!(*input, |buf| {
                for (b, gv) in buf.iter_mut().zip(g) {
                    *b -= gv;
                }
            }),
            Op::Scale(input, factor) => {
                // A zero factor contributes exactly zero; skip the subtree.
                if *factor != 0.0 {
                    acc!(*input, |buf| {
                        for (b, gv) in buf.iter_mut().zip(g) {
                            *b += factor * gv;
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc!(v, |buf| {
                        for (bb, gv) in buf.iter_mut().zip(g) {
                            *bb += gv;
                        }
                    });
                }
            }
            Op::Sub(a, b) => {
                acc!(*a, |buf| {
                    for (bb, gv) in buf.iter_mut().zip(g) {
                        *bb += gv;
                    }
                });
                acc!(*b, |buf| {
                    for (bb, gv) in buf.iter_mut().zip(g) {
                        *bb -= gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                acc!(*a, |buf| {
                    for ((bb, gv), o) in buf.iter_mut().zip(g).zip(bv) {
                        *bb += gv * o;
                    }
                });
                acc!(*b, |buf| {
                    for ((bb, gv), o) in buf.iter_mut().zip(g).zip(av) {
                        *bb += gv * o;
                    }
                });
            }
            Op::AddN(inputs) => {
                for &v in inputs {
                    acc!(v, |buf| {
                        for (bb, gv) in buf.iter_mut().zip(g) {
                            *bb += gv;
                        }
                    });
                }
            }
            Op::MulChannels {
                feature,
                weight,
                channels,
            } => {
                let c = *channels;
                let f = nodes[feature.0].value.data();
                let w = nodes[weight.0].value.data();
                acc!(*feature, |buf| {
                    for ((bchunk, gchunk), wt) in buf.chunks_mut(c).zip(g.chunks(c)).zip(w) {
                        for (bb, gv) in bchunk.iter_mut().zip(gchunk) {
                            *bb += gv * wt;
                        }
                    }
                });
                acc!(*weight, |buf| {
                    for ((bb, gchunk), fchunk) in buf.iter_mut().zip(g.chunks(c)).zip(f.chunks(c)) {
                        *bb += gchunk.iter().zip(fchunk).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            Op::Concat { inputs, widths } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&v, &wd) in inputs.iter().zip(widths) {
                    acc!(v, |buf| {
                        for (bchunk, grow) in buf.chunks_mut(wd).zip(g.chunks(total)) {
                            for (bb, gv) in bchunk.iter_mut().zip(&grow[offset..offset + wd]) {
                                *bb += gv;
                            }
                        }
                    });
                    offset += wd;
                }
            }
            Op::Slice {
                input,
                start,
                len,
                width,
            } => acc!(*input, |buf| {
                for (brow, grow) in buf.chunks_mut(*width).zip(g.chunks(*len)) {
                    for (bb, gv) in brow[*start..*start + *len].iter_mut().zip(grow) {
                        *bb += gv;
                    }
                }
            }),
            Op::Softmax { input, width } => {
                let y = node.value.data();
                acc!(*input, |buf| {
                    for ((brow, grow), yrow) in
                        buf.chunks_mut(*width).zip(g.chunks(*width)).zip(y.chunks(*width))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((bb, gv), yv) in brow.iter_mut().zip(grow).zip(yrow) {
                            *bb += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::Warp {
                input,
                taps,
                channels,
            } => acc!(*input, |buf| {
                taps.backward(g, *channels, buf);
            }),
            Op::Upsample2x { input, h, w, c } => {
                let (h, w, c) = (*h, *w, *c);
                acc!(*input, |buf| {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            let d = ((y / 2) * w + x / 2) * c;
                            let s = (y * 2 * w + x) * c;
                            for (bb, gv) in buf[d..d + c].iter_mut().zip(&g[s..s + c]) {
                                *bb += gv;
                            }
                        }
                    }
                });
            }
            Op::Reshape(input) => acc!(*input, |buf| {
                for (bb, gv) in buf.iter_mut().zip(g) {
                    *bb += gv;
                }
            }),
            Op::Tile { input, times } => acc!(*input, |buf| {
                let d = buf.len();
                for chunk in g.chunks(d).take(*times) {
                    for (bb, gv) in buf.iter_mut().zip(chunk) {
                        *bb += gv;
                    }
                }
            }),
            Op::Sum(input) => acc!(*input, |buf| {
                for bb in buf.iter_mut() {
                    *bb += g[0];
                }
            }),
            Op::Mean(input) => acc!(*input, |buf| {
                let s = g[0] / buf.len() as f64;
                for bb in buf.iter_mut() {
                    *bb += s;
                }
            }),
            Op::WeightedSum { input, weights } => acc!(*input, |buf| {
                for (bb, w) in buf.iter_mut().zip(weights) {
                    *bb += g[0] * w;
                }
            }),
            Op::SmoothL1(input) => {
                let x = nodes[input.0].value.data();
                acc!(*input, |buf| {
                    for ((bb, gv), xv) in buf.iter_mut().zip(g).zip(x) {
                        *bb += gv * xv.clamp(-1.0, 1.0);
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_fn([2, 3], |i| i as f64));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn unused_parameter_gets_exact_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::filled([3], 2.0));
        let unused = g.param(Tensor::filled([4], 7.0));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::filled([3], 2.0));
        let x = g.param(Tensor::filled([3], 1.0));
        let y = g.mul(c, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[2.0; 3]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros([2]));
        assert!(matches!(g.backward(x), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn paths_accumulate() {
        // y = x*x + x  => dy/dx = 2x + 1
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let sq = g.mul(x, x).unwrap();
        let y = g.add(sq, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item().unwrap(), 7.0);
    }

    #[test]
    fn sigmoid_of_linear_matches_closed_form() {
        let xs = [0.3, -1.2, 0.8];
        let ws = [0.5, 0.25, -0.7];
        let mut g = Graph::new();
        let w = g.param(Tensor::new([3, 1], ws.to_vec()).unwrap());
        let x = g.constant(Tensor::new([3], xs.to_vec()).unwrap());
        let b = g.constant(Tensor::zeros([1]));
        let z = g.linear(x, w, b).unwrap();
        let y = g.sigmoid(z);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        let wx: f64 = xs.iter().zip(&ws).map(|(a, b)| a * b).sum();
        let sig = 1.0 / (1.0 + (-wx).exp());
        for (gw, xv) in grads.get(w).unwrap().data().iter().zip(&xs) {
            assert!((gw - sig * (1.0 - sig) * xv).abs() < 1e-15);
        }
    }

    #[test]
    fn softplus_derivative_at_zero_is_half() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.0));
        let y = g.softplus(x);
        assert!((g.value(y).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item().unwrap(), 0.5);
    }

    #[test]
    fn zero_scale_cuts_the_subtree() {
        let mut g = Graph::new();
        let x = g.param(Tensor::filled([2], 1.0));
        let s = g.sum(x);
        let z = g.scale(s, 0.0);
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn conv_reports_offending_axis() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([4, 4, 3]));
        let k = g.param(Tensor::zeros([3, 3, 2, 5]));
        assert!(matches!(
            g.conv2d(x, k, 1, Padding::Same),
            Err(TensorError::Axis { axis: 2, left: 3, right: 2, .. })
        ));
    }
}
