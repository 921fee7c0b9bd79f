//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! Every op appends a node to the [`Tape`] holding its value and the indices
//! of its parents, so the record is topologically ordered by construction.
//! [`Tape::backward`] walks the record once in reverse, summing gradient
//! contributions of nodes that feed several consumers.

use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeom};
use super::{Real, Tensor};
use crate::error::{contract, Error, Result};
use crate::tolerance::{FD_STEP, GRAD_MAG_FLOOR};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Identifier of the operation that produced a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Relu,
    LeakyRelu,
    Sigmoid,
    Square,
    Abs,
    Sum,
    Mean,
    MeanAxis,
    Reshape,
    Conv,
    ConvTranspose,
    ChannelBias,
    Concat,
    BroadcastDepth,
    MatMul,
    Softmax,
    CrossEntropy,
}

#[derive(Clone, Copy)]
struct ConvMeta {
    geom: ConvGeom,
    batch: usize,
    cin: usize,
    cout: usize,
}

enum Op<E> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, E),
    AddScalar(usize),
    Relu(usize),
    LeakyRelu(usize, E),
    Sigmoid(usize),
    Square(usize),
    Abs(usize),
    Sum(usize),
    Mean(usize),
    MeanAxis { x: usize, axis: usize },
    Reshape(usize),
    Conv { x: usize, k: usize, meta: ConvMeta },
    ConvTranspose { x: usize, k: usize, meta: ConvMeta },
    ChannelBias { x: usize, b: usize },
    Concat { a: usize, b: usize },
    BroadcastDepth { x: usize, depth: usize },
    MatMul(usize, usize),
    Softmax(usize),
    CrossEntropy { logits: usize, targets: Vec<usize> },
}

impl<E> Op<E> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Relu(..) => OpKind::Relu,
            Op::LeakyRelu(..) => OpKind::LeakyRelu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Square(..) => OpKind::Square,
            Op::Abs(..) => OpKind::Abs,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::MeanAxis { .. } => OpKind::MeanAxis,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Conv { .. } => OpKind::Conv,
            Op::ConvTranspose { .. } => OpKind::ConvTranspose,
            Op::ChannelBias { .. } => OpKind::ChannelBias,
            Op::Concat { .. } => OpKind::Concat,
            Op::BroadcastDepth { .. } => OpKind::BroadcastDepth,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Softmax(..) => OpKind::Softmax,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }

    fn parents(&self) -> Vec<usize> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![a, b],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Relu(x)
            | Op::LeakyRelu(x, _)
            | Op::Sigmoid(x)
            | Op::Square(x)
            | Op::Abs(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x)
            | Op::Softmax(x)
            | Op::MeanAxis { x, .. }
            | Op::BroadcastDepth { x, .. } => vec![x],
            Op::Conv { x, k, .. } | Op::ConvTranspose { x, k, .. } => vec![x, k],
            Op::ChannelBias { x, b } => vec![x, b],
            Op::Concat { a, b } => vec![a, b],
            Op::CrossEntropy { logits, .. } => vec![logits],
        }
    }
}

struct Node<E> {
    value: Tensor<E>,
    op: Op<E>,
    requires_grad: bool,
}

/// Topologically ordered record of every node created since the last reset.
pub struct Tape<E> {
    id: u64,
    nodes: Vec<Node<E>>,
}

impl<E: Real> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<E> {
    tape: u64,
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Real> Gradients<E> {
    /// Gradient of the loss with respect to `v`, if `v` required one.
    pub fn get(&self, v: Var) -> Option<&Tensor<E>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<E>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index).and_then(|g| g.take())
    }
}

enum Pairing {
    Same,
    LeftScalar,
    RightScalar,
}

fn pairing(a: &[usize], b: &[usize], op: &str) -> Result<Pairing> {
    if a == b {
        Ok(Pairing::Same)
    } else if a.is_empty() {
        Ok(Pairing::LeftScalar)
    } else if b.is_empty() {
        Ok(Pairing::RightScalar)
    } else {
        Err(Error::Contract(format!(
            "{op}: incompatible shapes {:?} and {:?} (only scalar broadcasting is supported)",
            a, b
        )))
    }
}

fn binary<E: Real>(a: &Tensor<E>, b: &Tensor<E>, p: &Pairing, f: impl Fn(E, E) -> E) -> Tensor<E> {
    match p {
        Pairing::Same => a.zip_map(b, f).expect("shapes checked"),
        Pairing::LeftScalar => {
            let s = a.item();
            b.map(|y| f(s, y))
        }
        Pairing::RightScalar => {
            let s = b.item();
            a.map(|x| f(x, s))
        }
    }
}

/// Reduces a gradient to the shape of a scalar-broadcast operand.
fn reduce_to<E: Real>(g: Tensor<E>, target: &[usize]) -> Tensor<E> {
    if target.is_empty() && !g.shape().is_empty() {
        let s = g.data().iter().fold(E::zero(), |acc, &x| acc + x);
        Tensor::scalar(s)
    } else {
        g
    }
}

fn spatial3(shape: &[usize]) -> [usize; 3] {
    match shape.len() {
        4 => [1, shape[2], shape[3]],
        5 => [shape[2], shape[3], shape[4]],
        _ => unreachable!("spatial3 on rank {}", shape.len()),
    }
}

impl<E: Real> Tape<E> {
    pub fn new() -> Self {
        Self {
            id: fresh_id(),
            nodes: Vec::new(),
        }
    }

    /// Drops every node; handles from before the reset become foreign.
    pub fn reset(&mut self) {
        self.id = fresh_id();
        self.nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::GraphIntegrity(format!(
                "node {} does not belong to the active tape",
                v.index
            )));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>) -> Var {
        let requires_grad = op.parents().iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    /// Copies the value of `v` into a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v)?.clone();
        Ok(self.constant(value))
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<E>> {
        let i = self.check(v)?;
        Ok(&self.nodes[i].value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.value(v)?.shape())
    }

    pub fn op_kind(&self, v: Var) -> Result<OpKind> {
        let i = self.check(v)?;
        Ok(self.nodes[i].op.kind())
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        let i = self.check(v)?;
        Ok(self.nodes[i].requires_grad)
    }

    /// Parents of `v` in recording order.
    pub fn parents(&self, v: Var) -> Result<Vec<Var>> {
        let i = self.check(v)?;
        Ok(self.nodes[i]
            .op
            .parents()
            .into_iter()
            .map(|index| Var {
                tape: self.id,
                index,
            })
            .collect())
    }

    fn binary_op(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(E, E) -> E,
        op: impl FnOnce(usize, usize) -> Op<E>,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let p = pairing(
            self.nodes[ia].value.shape(),
            self.nodes[ib].value.shape(),
            name,
        )?;
        let value = binary(&self.nodes[ia].value, &self.nodes[ib].value, &p, f);
        Ok(self.push(value, op(ia, ib)))
    }

    fn unary_op(&mut self, x: Var, f: impl Fn(E) -> E, op: impl FnOnce(usize) -> Op<E>) -> Result<Var> {
        let i = self.check(x)?;
        let value = self.nodes[i].value.map(f);
        Ok(self.push(value, op(i)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_op(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_op(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_op(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, x: Var, s: E) -> Result<Var> {
        self.unary_op(x, |v| v * s, |i| Op::Scale(i, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: E) -> Result<Var> {
        self.unary_op(x, |v| v + s, Op::AddScalar)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary_op(x, |v| if v <= E::zero() { E::zero() } else { v }, Op::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: E) -> Result<Var> {
        self.unary_op(
            x,
            |v| if v > E::zero() { v } else { v * slope },
            |i| Op::LeakyRelu(i, slope),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary_op(x, |v| E::one() / (E::one() + (-v).exp()), Op::Sigmoid)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary_op(x, |v| v * v, Op::Square)
    }

    pub fn abs_val(&mut self, x: Var) -> Result<Var> {
        self.unary_op(x, |v| v.abs(), Op::Abs)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let s = self.nodes[i]
            .value
            .data()
            .iter()
            .fold(E::zero(), |acc, &v| acc + v);
        Ok(self.push(Tensor::scalar(s), Op::Sum(i)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let t = &self.nodes[i].value;
        contract!(t.numel() > 0, "mean of an empty tensor");
        let s = t.data().iter().fold(E::zero(), |acc, &v| acc + v) / E::lit(t.numel() as f64);
        Ok(self.push(Tensor::scalar(s), Op::Mean(i)))
    }

    /// Arithmetic mean over one axis; the axis is removed from the shape.
    pub fn mean_along_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let i = self.check(x)?;
        let t = &self.nodes[i].value;
        contract!(
            axis < t.rank(),
            "axis {} out of range for rank {}",
            axis,
            t.rank()
        );
        contract!(t.shape()[axis] > 0, "mean over an empty axis");
        let (outer, len, inner) = kernels::axis_split(t.shape(), axis);
        let data = kernels::mean_axis(t.data(), outer, len, inner);
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::MeanAxis { x: i, axis }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let i = self.check(x)?;
        let value = self.nodes[i].value.clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(i)))
    }

    fn conv_common(
        &mut self,
        x: Var,
        k: Var,
        stride: [usize; 3],
        pad: [usize; 3],
        rank: usize,
        transposed: bool,
    ) -> Result<Var> {
        let (ix, ik) = (self.check(x)?, self.check(k)?);
        let xs = self.nodes[ix].value.shape().to_vec();
        let ks = self.nodes[ik].value.shape().to_vec();
        contract!(
            xs.len() == rank && ks.len() == rank,
            "convolution expects rank-{rank} input and kernel, got {:?} and {:?}",
            xs,
            ks
        );
        let batch = xs[0];
        let cin = xs[1];
        let kdims = spatial3(&ks);
        let (geom, cout) = if transposed {
            contract!(
                ks[0] == cin,
                "transposed kernel expects {} input channels, input has {}",
                ks[0],
                cin
            );
            (
                ConvGeom::transposed(spatial3(&xs), kdims, stride, pad)?,
                ks[1],
            )
        } else {
            contract!(
                ks[1] == cin,
                "kernel expects {} input channels, input has {}",
                ks[1],
                cin
            );
            (ConvGeom::new(spatial3(&xs), kdims, stride, pad)?, ks[0])
        };
        let meta = ConvMeta {
            geom,
            batch,
            cin,
            cout,
        };
        let xv = self.nodes[ix].value.data();
        let kv = self.nodes[ik].value.data();
        let (data, spatial) = if transposed {
            (
                kernels::conv_t_forward(&geom, xv, batch, cin, kv, cout),
                geom.in_dims,
            )
        } else {
            (
                kernels::conv_forward(&geom, xv, batch, cin, kv, cout),
                geom.out_dims,
            )
        };
        let shape = if rank == 4 {
            vec![batch, cout, spatial[1], spatial[2]]
        } else {
            vec![batch, cout, spatial[0], spatial[1], spatial[2]]
        };
        let value = Tensor::new(shape, data)?;
        let op = if transposed {
            Op::ConvTranspose {
                x: ix,
                k: ik,
                meta,
            }
        } else {
            Op::Conv {
                x: ix,
                k: ik,
                meta,
            }
        };
        Ok(self.push(value, op))
    }

    /// 2D cross-correlation: input `[b, cin, h, w]`, kernel `[cout, cin, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        self.conv_common(x, kernel, [1, stride, stride], [0, padding, padding], 4, false)
    }

    /// 3D cross-correlation: input `[b, cin, d, h, w]`, kernel `[cout, cin, kd, kh, kw]`.
    pub fn conv3d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        self.conv_common(
            x,
            kernel,
            [stride; 3],
            [padding; 3],
            5,
            false,
        )
    }

    /// Adjoint of [`Tape::conv3d`]: kernel `[cin, cout, kd, kh, kw]`, output
    /// extent `(in - 1) * stride - 2 * padding + k` per axis.
    pub fn conv3d_transposed(
        &mut self,
        x: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        self.conv_common(x, kernel, [stride; 3], [padding; 3], 5, true)
    }

    /// Adds `bias[c]` to every element of channel `c` (axis 1).
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.check(x)?, self.check(bias)?);
        let xs = self.nodes[ix].value.shape();
        let bs = self.nodes[ib].value.shape();
        contract!(xs.len() >= 2, "channel_bias needs rank >= 2, got {:?}", xs);
        contract!(
            bs == [xs[1]],
            "bias shape {:?} does not match {} channels",
            bs,
            xs[1]
        );
        let (outer, ch, inner) = kernels::axis_split(xs, 1);
        let mut value = self.nodes[ix].value.clone();
        let b = self.nodes[ib].value.data();
        let d = value.data_mut();
        for o in 0..outer {
            for c in 0..ch {
                let base = (o * ch + c) * inner;
                for v in &mut d[base..base + inner] {
                    *v = *v + b[c];
                }
            }
        }
        Ok(self.push(value, Op::ChannelBias { x: ix, b: ib }))
    }

    /// Concatenates along the channel axis (axis 1).
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let sa = self.nodes[ia].value.shape().to_vec();
        let sb = self.nodes[ib].value.shape().to_vec();
        contract!(
            sa.len() >= 2 && sa.len() == sb.len() && sa[0] == sb[0] && sa[2..] == sb[2..],
            "concat_channels: incompatible shapes {:?} and {:?}",
            sa,
            sb
        );
        let inner: usize = sa[2..].iter().product();
        let (ca, cb) = (sa[1] * inner, sb[1] * inner);
        let mut data = Vec::with_capacity(sa[0] * (ca + cb));
        let (da, db) = (self.nodes[ia].value.data(), self.nodes[ib].value.data());
        for n in 0..sa[0] {
            data.extend_from_slice(&da[n * ca..(n + 1) * ca]);
            data.extend_from_slice(&db[n * cb..(n + 1) * cb]);
        }
        let mut shape = sa.clone();
        shape[1] = sa[1] + sb[1];
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat { a: ia, b: ib }))
    }

    /// Replicates a `[b, c, h, w]` map `depth` times into `[b, c, depth, h, w]`.
    pub fn broadcast_depth(&mut self, x: Var, depth: usize) -> Result<Var> {
        let i = self.check(x)?;
        let s = self.nodes[i].value.shape().to_vec();
        contract!(s.len() == 4, "broadcast_depth expects rank 4, got {:?}", s);
        contract!(depth >= 1, "broadcast depth must be >= 1");
        let plane = s[2] * s[3];
        let src = self.nodes[i].value.data();
        let mut data = Vec::with_capacity(src.len() * depth);
        for bc in 0..s[0] * s[1] {
            let p = &src[bc * plane..(bc + 1) * plane];
            for _ in 0..depth {
                data.extend_from_slice(p);
            }
        }
        let value = Tensor::new(vec![s[0], s[1], depth, s[2], s[3]], data)?;
        Ok(self.push(value, Op::BroadcastDepth { x: i, depth }))
    }

    /// `[m, k] x [k, n]` matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let sa = self.nodes[ia].value.shape();
        let sb = self.nodes[ib].value.shape();
        contract!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul: incompatible shapes {:?} and {:?}",
            sa,
            sb
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![E::zero(); m * n];
        E::gemm(
            m,
            k,
            n,
            E::one(),
            self.nodes[ia].value.data(),
            k as isize,
            1,
            self.nodes[ib].value.data(),
            n as isize,
            1,
            E::zero(),
            &mut out,
            n as isize,
            1,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(ia, ib)))
    }

    /// Row-wise softmax of a `[b, k]` matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let t = &self.nodes[i].value;
        contract!(t.rank() == 2, "softmax expects rank 2, got {:?}", t.shape());
        let k = t.shape()[1];
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(k) {
            softmax_row(row);
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Softmax(i)))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let i = self.check(logits)?;
        let t = &self.nodes[i].value;
        contract!(
            t.rank() == 2 && t.shape()[0] == targets.len(),
            "cross_entropy: logits {:?} vs {} targets",
            t.shape(),
            targets.len()
        );
        let k = t.shape()[1];
        contract!(
            targets.iter().all(|&c| c < k),
            "cross_entropy: target class out of range"
        );
        let mut total = E::zero();
        for (row, &c) in t.data().chunks(k).zip(targets) {
            let m = row.iter().fold(E::neg_infinity(), |a, &b| a.max(b));
            let lse = row.iter().fold(E::zero(), |a, &b| a + (b - m).exp()).ln() + m;
            total = total + (lse - row[c]);
        }
        let value = Tensor::scalar(total / E::lit(targets.len() as f64));
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits: i,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<E>> {
        let root = self.check(loss)?;
        contract!(
            self.nodes[root].value.rank() == 0,
            "backward requires a scalar loss, got shape {:?}",
            self.nodes[root].value.shape()
        );
        let mut grads: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::scalar(E::one()));
        for i in (0..=root).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn val(&self, i: usize) -> &Tensor<E> {
        &self.nodes[i].value
    }

    fn propagate(&self, i: usize, g: &Tensor<E>, grads: &mut [Option<Tensor<E>>]) -> Result<()> {
        let out = &self.nodes[i].value;
        let mut acc = |j: usize, t: Tensor<E>| {
            match &mut grads[j] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                if self.wants(a) {
                    acc(a, reduce_to(g.clone(), self.val(a).shape()));
                }
                if self.wants(b) {
                    acc(b, reduce_to(g.clone(), self.val(b).shape()));
                }
            }
            &Op::Sub(a, b) => {
                if self.wants(a) {
                    acc(a, reduce_to(g.clone(), self.val(a).shape()));
                }
                if self.wants(b) {
                    acc(b, reduce_to(g.map(|v| -v), self.val(b).shape()));
                }
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.val(a), self.val(b));
                if self.wants(a) {
                    let p = pairing(g.shape(), vb.shape(), "mul")?;
                    acc(a, reduce_to(binary(g, vb, &p, |x, y| x * y), va.shape()));
                }
                if self.wants(b) {
                    let p = pairing(g.shape(), va.shape(), "mul")?;
                    acc(b, reduce_to(binary(g, va, &p, |x, y| x * y), vb.shape()));
                }
            }
            &Op::Scale(x, s) => acc(x, g.map(|v| v * s)),
            &Op::AddScalar(x) => acc(x, g.clone()),
            &Op::Relu(x) => acc(
                x,
                g.zip_map(self.val(x), |gv, xv| if xv > E::zero() { gv } else { E::zero() })?,
            ),
            &Op::LeakyRelu(x, s) => acc(
                x,
                g.zip_map(self.val(x), |gv, xv| if xv > E::zero() { gv } else { gv * s })?,
            ),
            &Op::Sigmoid(x) => acc(x, g.zip_map(out, |gv, y| gv * y * (E::one() - y))?),
            &Op::Square(x) => acc(x, g.zip_map(self.val(x), |gv, xv| gv * (xv + xv))?),
            &Op::Abs(x) => acc(
                x,
                g.zip_map(self.val(x), |gv, xv| {
                    if xv > E::zero() {
                        gv
                    } else if xv < E::zero() {
                        -gv
                    } else {
                        E::zero()
                    }
                })?,
            ),
            &Op::Sum(x) => acc(x, Tensor::full(self.val(x).shape(), g.item())),
            &Op::Mean(x) => {
                let n = E::lit(self.val(x).numel() as f64);
                acc(x, Tensor::full(self.val(x).shape(), g.item() / n));
            }
            &Op::MeanAxis { x, axis } => {
                let shape = self.val(x).shape();
                let (outer, len, inner) = kernels::axis_split(shape, axis);
                let denom = E::lit(len as f64);
                let gd = g.data();
                let mut d = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let row = &gd[o * inner..(o + 1) * inner];
                    for _ in 0..len {
                        d.extend(row.iter().map(|&v| v / denom));
                    }
                }
                acc(x, Tensor::new(shape.to_vec(), d)?);
            }
            &Op::Reshape(x) => acc(x, g.clone().reshape(self.val(x).shape())?),
            &Op::Conv { x, k, meta } => {
                let (dx, dk) = kernels::conv_backward(
                    &meta.geom,
                    self.val(x).data(),
                    meta.batch,
                    meta.cin,
                    self.val(k).data(),
                    meta.cout,
                    g.data(),
                    self.wants(x),
                    self.wants(k),
                );
                if let Some(dx) = dx {
                    acc(x, Tensor::new(self.val(x).shape().to_vec(), dx)?);
                }
                if let Some(dk) = dk {
                    acc(k, Tensor::new(self.val(k).shape().to_vec(), dk)?);
                }
            }
            &Op::ConvTranspose { x, k, meta } => {
                let (dx, dk) = kernels::conv_t_backward(
                    &meta.geom,
                    self.val(x).data(),
                    meta.batch,
                    meta.cin,
                    self.val(k).data(),
                    meta.cout,
                    g.data(),
                    self.wants(x),
                    self.wants(k),
                );
                if let Some(dx) = dx {
                    acc(x, Tensor::new(self.val(x).shape().to_vec(), dx)?);
                }
                if let Some(dk) = dk {
                    acc(k, Tensor::new(self.val(k).shape().to_vec(), dk)?);
                }
            }
            &Op::ChannelBias { x, b } => {
                if self.wants(x) {
                    acc(x, g.clone());
                }
                if self.wants(b) {
                    let (outer, ch, inner) = kernels::axis_split(g.shape(), 1);
                    let mut db = vec![E::zero(); ch];
                    for o in 0..outer {
                        for (c, slot) in db.iter_mut().enumerate() {
                            let base = (o * ch + c) * inner;
                            *slot = g.data()[base..base + inner]
                                .iter()
                                .fold(*slot, |a, &v| a + v);
                        }
                    }
                    acc(b, Tensor::new(vec![ch], db)?);
                }
            }
            &Op::Concat { a, b } => {
                let sa = self.val(a).shape().to_vec();
                let sb = self.val(b).shape().to_vec();
                let inner: usize = sa[2..].iter().product();
                let (ca, cb) = (sa[1] * inner, sb[1] * inner);
                let gd = g.data();
                if self.wants(a) {
                    let mut d = Vec::with_capacity(sa[0] * ca);
                    for n in 0..sa[0] {
                        let base = n * (ca + cb);
                        d.extend_from_slice(&gd[base..base + ca]);
                    }
                    acc(a, Tensor::new(sa.clone(), d)?);
                }
                if self.wants(b) {
                    let mut d = Vec::with_capacity(sb[0] * cb);
                    for n in 0..sb[0] {
                        let base = n * (ca + cb) + ca;
                        d.extend_from_slice(&gd[base..base + cb]);
                    }
                    acc(b, Tensor::new(sb.clone(), d)?);
                }
            }
            &Op::BroadcastDepth { x, depth } => {
                let s = self.val(x).shape().to_vec();
                let plane = s[2] * s[3];
                let gd = g.data();
                let mut d = vec![E::zero(); s[0] * s[1] * plane];
                for bc in 0..s[0] * s[1] {
                    let dst = &mut d[bc * plane..(bc + 1) * plane];
                    for z in 0..depth {
                        let src = &gd[(bc * depth + z) * plane..(bc * depth + z + 1) * plane];
                        for (a, &v) in dst.iter_mut().zip(src) {
                            *a = *a + v;
                        }
                    }
                }
                acc(x, Tensor::new(s, d)?);
            }
            &Op::MatMul(a, b) => {
                let (va, vb) = (self.val(a), self.val(b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.wants(a) {
                    let mut d = vec![E::zero(); m * k];
                    E::gemm(
                        m,
                        n,
                        k,
                        E::one(),
                        g.data(),
                        n as isize,
                        1,
                        vb.data(),
                        1,
                        n as isize,
                        E::zero(),
                        &mut d,
                        k as isize,
                        1,
                    );
                    acc(a, Tensor::new(vec![m, k], d)?);
                }
                if self.wants(b) {
                    let mut d = vec![E::zero(); k * n];
                    E::gemm(
                        k,
                        m,
                        n,
                        E::one(),
                        va.data(),
                        1,
                        k as isize,
                        g.data(),
                        n as isize,
                        1,
                        E::zero(),
                        &mut d,
                        n as isize,
                        1,
                    );
                    acc(b, Tensor::new(vec![k, n], d)?);
                }
            }
            &Op::Softmax(x) => {
                let k = out.shape()[1];
                let mut d = Vec::with_capacity(out.numel());
                for (y, gr) in out.data().chunks(k).zip(g.data().chunks(k)) {
                    let dot = y.iter().zip(gr).fold(E::zero(), |a, (&p, &q)| a + p * q);
                    d.extend(y.iter().zip(gr).map(|(&p, &q)| p * (q - dot)));
                }
                acc(x, Tensor::new(out.shape().to_vec(), d)?);
            }
            Op::CrossEntropy { logits, targets } => {
                let x = *logits;
                let v = self.val(x);
                let k = v.shape()[1];
                let scale = g.item() / E::lit(targets.len() as f64);
                let mut d = v.data().to_vec();
                for (row, &c) in d.chunks_mut(k).zip(targets) {
                    softmax_row(row);
                    row[c] = row[c] - E::one();
                    for p in row.iter_mut() {
                        *p = *p * scale;
                    }
                }
                acc(x, Tensor::new(v.shape().to_vec(), d)?);
            }
        }
        Ok(())
    }
}

fn softmax_row<E: Real>(row: &mut [E]) {
    let m = row.iter().fold(E::neg_infinity(), |a, &b| a.max(b));
    let mut total = E::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// Outcome of comparing analytic gradients with central finite differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Checks `f` (a scalar-valued graph of the given inputs) element by element
/// against central differences with step [`FD_STEP`]. Only forward
/// evaluations feed the numeric side.
pub fn gradient_check<F>(inputs: &[Tensor<f64>], f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out)?.item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = GradCheck {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_element: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe = inputs.to_vec();
    for (which, v) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[which].shape());
        let analytic = grads.get(*v).unwrap_or(&zeros).clone();
        for e in 0..inputs[which].numel() {
            let orig = inputs[which].data()[e];
            probe[which].data_mut()[e] = orig + FD_STEP;
            let plus = eval(&probe)?;
            probe[which].data_mut()[e] = orig - FD_STEP;
            let minus = eval(&probe)?;
            probe[which].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic.data()[e];
            let denom = a.abs().max(numeric.abs()).max(GRAD_MAG_FLOOR);
            let rel = (a - numeric).abs() / denom;
            if rel > worst.max_rel_error || !rel.is_finite() {
                worst = GradCheck {
                    max_rel_error: if rel.is_finite() { rel } else { f64::INFINITY },
                    worst_input: which,
                    worst_element: e,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tolerance::GRAD_REL_TOL;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn square_gradient_is_two_x() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1], &[3.0]));
        let y = tape.mul(x, x).unwrap();
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let l = tape.sum(x).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn foreign_node_is_graph_integrity_error() {
        let mut a = Tape::<f64>::new();
        let mut b = Tape::<f64>::new();
        let x = a.param(Tensor::scalar(1.0));
        let y = b.param(Tensor::scalar(1.0));
        assert!(matches!(b.add(x, y), Err(Error::GraphIntegrity(_))));
        assert!(matches!(b.backward(x), Err(Error::GraphIntegrity(_))));
        a.reset();
        assert!(matches!(a.sum(x), Err(Error::GraphIntegrity(_))));
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[-1.0, 2.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).unwrap().data(), &[0.0, 2.0]);
        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s).unwrap().item(), 0.5);

        let a = tape.param(t(&[1], &[-3.0]));
        let ab = tape.abs_val(a).unwrap();
        let l = tape.sum(ab).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[-1.0]);
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::zeros(&[2, 3]));
        let b = tape.param(Tensor::zeros(&[3, 2]));
        assert!(matches!(tape.add(a, b), Err(Error::Contract(_))));
        assert!(matches!(tape.mean_along_axis(a, 2), Err(Error::Contract(_))));
    }

    #[test]
    fn scalar_broadcast_add_and_mul() {
        let mut tape = Tape::<f64>::new();
        let s = tape.param(Tensor::scalar(2.0));
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.mul(s, x).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[2.0, 4.0, 6.0]);
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(s).unwrap().item(), 6.0);
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn mean_along_axis_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2, 2], &[1.0, 3.0, 5.0, 7.0]));
        let m = tape.mean_along_axis(x, 0).unwrap();
        assert_eq!(tape.value(m).unwrap().data(), &[3.0, 5.0]);

        let x = tape.param(Tensor::from_fn(&[4, 2], |i| i as f64 * 0.3));
        let m = tape.mean_along_axis(x, 0).unwrap();
        let l = tape.sum(m).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.25));

        let c = tape.constant(Tensor::full(&[3, 4, 5], 0.7));
        for axis in 0..3 {
            let m = tape.mean_along_axis(c, axis).unwrap();
            assert_eq!(tape.value(m).unwrap().rank(), 2);
            assert!(tape
                .value(m)
                .unwrap()
                .data()
                .iter()
                .all(|&v| (v - 0.7).abs() < 1e-15));
        }
    }

    #[test]
    fn fan_out_gradients_are_summed() {
        // l = sum(x) + sum(2x) + sum(x*x) -> dl/dx = 1 + 2 + 2x
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[0.5, -1.5]));
        let a = tape.sum(x).unwrap();
        let d = tape.scale(x, 2.0).unwrap();
        let b = tape.sum(d).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let c = tape.sum(sq).unwrap();
        let ab = tape.add(a, b).unwrap();
        let l = tape.add(ab, c).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[4.0, 0.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(t(&[2], &[1.0, 2.0]));
        let x = tape.param(t(&[2], &[3.0, 4.0]));
        let y = tape.mul(c, x).unwrap();
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn detach_cuts_gradient_path() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let y = tape.square(x).unwrap();
        let d = tape.detach(y).unwrap();
        let l = tape.sum(d).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(x).is_none());
    }

    #[test]
    fn record_is_topologically_ordered() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let y = tape.square(x).unwrap();
        let z = tape.add(x, y).unwrap();
        for v in [y, z] {
            for p in tape.parents(v).unwrap() {
                assert!(p.index() < v.index());
            }
        }
        assert_eq!(tape.op_kind(z).unwrap(), OpKind::Add);
    }

    #[test]
    fn cross_entropy_matches_log_softmax() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[1, 3], &[0.0, 0.0, 0.0]));
        let l = tape.cross_entropy(x, &[1]).unwrap();
        assert!((tape.value(l).unwrap().item() - 3f64.ln()).abs() < 1e-12);
        let check = gradient_check(&[t(&[2, 3], &[0.3, -1.0, 2.0, 0.1, 0.5, -0.4])], |tp, v| {
            tp.cross_entropy(v[0], &[2, 0])
        })
        .unwrap();
        assert!(check.passes(GRAD_REL_TOL), "{check:?}");
    }
}
