use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::math;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fixed sparse linear map applied independently to every leading channel:
/// `out[c, o] = Σ w · in[c, i]` over the taps `(o, i, w)`.
///
/// Used for resampling with precomputed (non-learned) interpolation weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseLinearMap {
    in_spatial: Vec<usize>,
    out_spatial: Vec<usize>,
    taps: Vec<(u32, u32, f64)>,
}

impl SparseLinearMap {
    pub fn new(in_spatial: Vec<usize>, out_spatial: Vec<usize>, taps: Vec<(u32, u32, f64)>) -> Result<Self> {
        let n_in: usize = in_spatial.iter().product();
        let n_out: usize = out_spatial.iter().product();
        if let Some(bad) = taps
            .iter()
            .find(|(o, i, _)| *o as usize >= n_out || *i as usize >= n_in)
        {
            return Err(Error::InvalidValue(alloc::format!(
                "tap {:?} outside {:?} -> {:?}",
                bad,
                in_spatial,
                out_spatial
            )));
        }
        Ok(SparseLinearMap {
            in_spatial,
            out_spatial,
            taps,
        })
    }

    pub fn in_spatial(&self) -> &[usize] {
        &self.in_spatial
    }

    pub fn out_spatial(&self) -> &[usize] {
        &self.out_spatial
    }

    pub fn taps(&self) -> &[(u32, u32, f64)] {
        &self.taps
    }

    /// Applies the map to a plain tensor of shape `[C, in_spatial..]`.
    pub fn apply(&self, input: &Tensor) -> Result<Tensor> {
        let (c, out) = self.forward(input)?;
        let mut shape = vec![c];
        shape.extend_from_slice(&self.out_spatial);
        Tensor::new(shape, out)
    }

    fn forward(&self, input: &Tensor) -> Result<(usize, Vec<f64>)> {
        if input.rank() != self.in_spatial.len() + 1 || input.shape()[1..] != self.in_spatial[..] {
            return Err(Error::ShapeMismatch {
                lhs: input.shape().to_vec(),
                rhs: self.in_spatial.clone(),
            });
        }
        let c = input.shape()[0];
        let n_in: usize = self.in_spatial.iter().product();
        let n_out: usize = self.out_spatial.iter().product();
        let mut out = vec![0.0; c * n_out];
        for ch in 0..c {
            let src = &input.data()[ch * n_in..(ch + 1) * n_in];
            let dst = &mut out[ch * n_out..(ch + 1) * n_out];
            for &(o, i, w) in &self.taps {
                dst[o as usize] += w * src[i as usize];
            }
        }
        Ok((c, out))
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Reduce { input: Var, axes: Vec<usize>, scale: f64 },
    Reshape(Var),
    Matmul(Var, Var),
    Conv2d { input: Var, kernel: Var, stride: usize, padding: usize },
    ChannelBias(Var, Var),
    Resample(Var, Rc<SparseLinearMap>),
    FlipLast(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`. Always present for leaves that
    /// require grad (zeros when unused); `None` for non-differentiable nodes.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Rhs,
    Lhs,
}

/// Define-by-run recording of differentiable operations.
///
/// Nodes are appended in execution order, so every op's inputs precede it.
/// A tape is meant to be built for one step and dropped; `backward` does not
/// consume or mutate it and repeated calls return identical gradients.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn broadcast(&self, a: Var, b: Var) -> Result<Broadcast> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            Ok(Broadcast::Same)
        } else if tb.numel() == 1 {
            Ok(Broadcast::Rhs)
        } else if ta.numel() == 1 {
            Ok(Broadcast::Lhs)
        } else {
            Err(Error::ShapeMismatch {
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            })
        }
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let mode = self.broadcast(a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (shape, data): (Vec<usize>, Vec<f64>) = match mode {
            Broadcast::Same => (
                ta.shape().to_vec(),
                ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
            ),
            Broadcast::Rhs => {
                let y = tb.data()[0];
                (ta.shape().to_vec(), ta.data().iter().map(|&x| f(x, y)).collect())
            }
            Broadcast::Lhs => {
                let x = ta.data()[0];
                (tb.shape().to_vec(), tb.data().iter().map(|&y| f(x, y)).collect())
            }
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape, data }, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(value, rg, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(value, rg, Op::MulScalar(a, s))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("same shape")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(&[a]);
        self.push(value, rg, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(value, rg, Op::Sigmoid(a))
    }

    /// Sums over `axes` (all axes when `None`). Reducing every axis yields shape `[1]`.
    pub fn sum(&mut self, a: Var, axes: Option<&[usize]>) -> Result<Var> {
        self.reduce(a, axes, false)
    }

    pub fn mean(&mut self, a: Var, axes: Option<&[usize]>) -> Result<Var> {
        self.reduce(a, axes, true)
    }

    fn reduce(&mut self, a: Var, axes: Option<&[usize]>, mean: bool) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let axes: Vec<usize> = match axes {
            None => (0..shape.len()).collect(),
            Some(ax) => {
                let mut ax = ax.to_vec();
                ax.sort_unstable();
                ax.dedup();
                if let Some(&bad) = ax.iter().find(|&&x| x >= shape.len()) {
                    return Err(Error::InvalidAxis {
                        axis: bad,
                        rank: shape.len(),
                    });
                }
                ax
            }
        };
        let count: usize = axes.iter().map(|&ax| shape[ax]).product();
        let scale = if mean { 1.0 / count as f64 } else { 1.0 };
        let (out_shape, index) = reduce_index(&shape, &axes);
        let n_out: usize = out_shape.iter().product();
        let mut out = vec![0.0; n_out];
        for (&v, &o) in self.value(a).data().iter().zip(&index) {
            out[o] += v;
        }
        if mean {
            out.iter_mut().for_each(|v| *v *= scale);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape: out_shape, data: out }, rg, Op::Reduce { input: a, axes, scale }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, rg, Op::Reshape(a)))
    }

    /// Same values as `a`, with no path back into the tape.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, false, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::ShapeMismatch {
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            rg,
            Op::Matmul(a, b),
        ))
    }

    /// Cross-correlation of `input [Cin×H×W]` with `kernel [Cout×Cin×k×k]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (ti, tk) = (self.value(input), self.value(kernel));
        let g = ConvGeom::new(ti.shape(), tk.shape(), stride, padding)?;
        let out = kernels::conv_forward_geom(&g, ti.data(), tk.data());
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(
            Tensor {
                shape: vec![g.cout, g.ho, g.wo],
                data: out,
            },
            rg,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
        ))
    }

    /// Adds `bias [C]` along the first axis of `x [C, ...]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.rank() != 1 || tb.shape()[0] != tx.shape()[0] {
            return Err(Error::ShapeMismatch {
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let per = tx.numel() / tx.shape()[0];
        let data: Vec<f64> = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb.data()[i / per])
            .collect();
        let shape = tx.shape().to_vec();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor { shape, data }, rg, Op::ChannelBias(x, bias)))
    }

    pub fn resample(&mut self, x: Var, map: Rc<SparseLinearMap>) -> Result<Var> {
        let value = map.apply(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Resample(x, map)))
    }

    /// Mirrors the last axis.
    pub fn flip_last(&mut self, x: Var) -> Var {
        let value = self.value(x).flip_last_axis();
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::FlipLast(x))
    }

    /// Reverse-mode sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.nodes.get(loss.0).ok_or(Error::UnknownNode(loss.0))?;
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if root.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if !node.requires_grad {
                    return None;
                }
                let data = g.unwrap_or_else(|| vec![0.0; node.value.numel()]);
                Some(Tensor {
                    shape: node.value.shape().to_vec(),
                    data,
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: Var, contribution: impl FnOnce(usize) -> Vec<f64>) {
        let node = &self.nodes[target.0];
        if !node.requires_grad {
            return;
        }
        let n = node.value.numel();
        let c = contribution(n);
        debug_assert_eq!(c.len(), n);
        match &mut grads[target.0] {
            Some(existing) => existing.iter_mut().zip(&c).for_each(|(e, v)| *e += v),
            slot @ None => *slot = Some(c),
        }
    }

    /// Gradient w.r.t. one side of a broadcast binary op: `local[i]` is the
    /// partial derivative at output element `i`.
    fn accumulate_binary(
        &self,
        grads: &mut [Option<Vec<f64>>],
        target: Var,
        full: bool,
        g: &[f64],
        local: impl Fn(usize) -> f64,
    ) {
        self.accumulate(grads, target, |_| {
            if full {
                g.iter().enumerate().map(|(i, &gi)| gi * local(i)).collect()
            } else {
                let s = g.iter().enumerate().fold(0.0, |acc, (i, &gi)| acc + gi * local(i));
                vec![s]
            }
        });
    }

    fn binary_sides(&self, a: Var, b: Var) -> (bool, bool, impl Fn(Var, usize) -> f64 + '_) {
        let (ta, tb) = (self.value(a), self.value(b));
        let a_full = ta.numel() != 1 || tb.numel() == 1;
        let b_full = tb.numel() != 1 || ta.numel() == 1;
        let at = move |v: Var, i: usize| {
            let d = self.value(v).data();
            if d.len() == 1 {
                d[0]
            } else {
                d[i]
            }
        };
        (a_full, b_full, at)
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (af, bf, _) = self.binary_sides(*a, *b);
                self.accumulate_binary(grads, *a, af, g, |_| 1.0);
                self.accumulate_binary(grads, *b, bf, g, |_| 1.0);
            }
            Op::Sub(a, b) => {
                let (af, bf, _) = self.binary_sides(*a, *b);
                self.accumulate_binary(grads, *a, af, g, |_| 1.0);
                self.accumulate_binary(grads, *b, bf, g, |_| -1.0);
            }
            Op::Mul(a, b) => {
                let (af, bf, at) = self.binary_sides(*a, *b);
                self.accumulate_binary(grads, *a, af, g, |i| at(*b, i));
                self.accumulate_binary(grads, *b, bf, g, |i| at(*a, i));
            }
            Op::Div(a, b) => {
                let (af, bf, at) = self.binary_sides(*a, *b);
                self.accumulate_binary(grads, *a, af, g, |i| 1.0 / at(*b, i));
                self.accumulate_binary(grads, *b, bf, g, |i| {
                    let y = at(*b, i);
                    -at(*a, i) / (y * y)
                });
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, |_| g.to_vec()),
            Op::MulScalar(a, s) => self.accumulate(grads, *a, |_| g.iter().map(|v| v * s).collect()),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |_| {
                    g.iter()
                        .zip(x)
                        .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                        .collect()
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                self.accumulate(grads, *a, |_| {
                    g.iter().zip(y).map(|(&gi, &yi)| gi * yi * (1.0 - yi)).collect()
                });
            }
            Op::Reduce { input, axes, scale } => {
                let shape = self.value(*input).shape();
                self.accumulate(grads, *input, |_| {
                    let (_, index) = reduce_index(shape, axes);
                    index.iter().map(|&o| g[o] * scale).collect()
                });
            }
            Op::Reshape(a) => self.accumulate(grads, *a, |_| g.to_vec()),
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                // dA = G·Bᵀ, dB = Aᵀ·G
                self.accumulate(grads, *a, |_| {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_a_bt_into(g, tb.data(), &mut da, m, n, k);
                    da
                });
                self.accumulate(grads, *b, |_| {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_at_b_into(ta.data(), g, &mut db, m, k, n);
                    db
                });
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let (ti, tk) = (self.value(*input), self.value(*kernel));
                let geom = ConvGeom::new(ti.shape(), tk.shape(), *stride, *padding).expect("validated in forward");
                let (di, dk) = kernels::conv_backward_geom(
                    &geom,
                    ti.data(),
                    tk.data(),
                    g,
                    self.requires_grad(*input),
                    self.requires_grad(*kernel),
                );
                if let Some(di) = di {
                    self.accumulate(grads, *input, |_| di);
                }
                if let Some(dk) = dk {
                    self.accumulate(grads, *kernel, |_| dk);
                }
            }
            Op::ChannelBias(x, bias) => {
                self.accumulate(grads, *x, |_| g.to_vec());
                self.accumulate(grads, *bias, |c| {
                    let per = g.len() / c;
                    g.chunks_exact(per).map(|ch| ch.iter().sum()).collect()
                });
            }
            Op::Resample(x, map) => {
                self.accumulate(grads, *x, |n| {
                    let n_in: usize = map.in_spatial().iter().product();
                    let n_out: usize = map.out_spatial().iter().product();
                    let mut dx = vec![0.0; n];
                    for (dst, src) in dx.chunks_exact_mut(n_in).zip(g.chunks_exact(n_out)) {
                        for &(o, i, w) in map.taps() {
                            dst[i as usize] += w * src[o as usize];
                        }
                    }
                    dx
                });
            }
            Op::FlipLast(x) => {
                let w = *node.value.shape().last().expect("non-empty");
                self.accumulate(grads, *x, |_| {
                    let mut d = g.to_vec();
                    d.chunks_exact_mut(w).for_each(<[f64]>::reverse);
                    d
                });
            }
        }
    }
}

/// Output shape after removing `axes`, plus the output index of every input element.
fn reduce_index(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let keep: Vec<usize> = (0..shape.len()).filter(|d| !axes.contains(d)).collect();
    let mut out_shape: Vec<usize> = keep.iter().map(|&d| shape[d]).collect();
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    // output stride contributed by each input axis (0 for reduced axes)
    let mut out_stride = vec![0usize; shape.len()];
    let mut s = 1;
    for &d in keep.iter().rev() {
        out_stride[d] = s;
        s *= shape[d];
    }
    let n: usize = shape.iter().product();
    let mut index = Vec::with_capacity(n);
    let mut counter = vec![0usize; shape.len()];
    for _ in 0..n {
        index.push(counter.iter().zip(&out_stride).map(|(c, st)| c * st).sum());
        for d in (0..shape.len()).rev() {
            counter[d] += 1;
            if counter[d] < shape[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    (out_shape, index)
}

/// Numerically stable logistic function.
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + math::exp(-x))
    } else {
        let e = math::exp(x);
        e / (1.0 + e)
    }
}
