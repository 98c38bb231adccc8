//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive applied during a forward pass together
//! with its output value. [`Tape::backward`] then walks the record in reverse
//! and returns the gradient of a scalar loss with respect to every node.
//!
//! ```
//! use grfp::tape::Tape;
//! use grfp::tensor::Tensor;
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::new(&[2], vec![1.0, -3.0]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).data(), &[2.0, -6.0]);
//! ```

use std::sync::Arc;

use crate::conv::{conv2d, conv2d_backward};
use crate::error::{GrfpError, Result};
use crate::labels::{LabelMap, IGNORE};
use crate::tensor::{Real, Tensor};
use crate::warp::{warp_backward, warp_bilinear, FlowField};

/// Handle of a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Abs,
    Relu,
    Exp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        weight: Var,
        bias: Option<Var>,
        dilation: usize,
    },
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
    },
    Unary {
        kind: Unary,
        x: Var,
    },
    Affine {
        x: Var,
        scale: T,
    },
    ScaleBy {
        x: Var,
        s: Var,
    },
    Softmax {
        x: Var,
    },
    Warp {
        x: Var,
        flow: Var,
    },
    Sum {
        x: Var,
    },
    Nll {
        probs: Var,
        labels: Arc<LabelMap>,
        floor: T,
    },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of primitive applications.
///
/// Entries are appended as operations run, so every entry's inputs precede it.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `v`; zeros when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn try_get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }
}

/// How an elementwise binary op lines up its operands.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Layout {
    Same,
    /// `b` has one channel and is replicated across `a`'s channels.
    BroadcastB,
    /// `a` has one channel.
    BroadcastA,
}

fn binary_layout(a: &[usize], b: &[usize]) -> Option<Layout> {
    if a == b {
        return Some(Layout::Same);
    }
    if a.len() == 3 && b.len() == 3 && a[..2] == b[..2] {
        if b[2] == 1 {
            return Some(Layout::BroadcastB);
        }
        if a[2] == 1 {
            return Some(Layout::BroadcastA);
        }
    }
    None
}

fn apply_unary<T: Real>(kind: Unary, v: T) -> T {
    match kind {
        Unary::Sigmoid => T::one() / (T::one() + (-v).exp()),
        Unary::Tanh => v.tanh(),
        Unary::Abs => v.abs(),
        Unary::Relu => v.max(T::zero()),
        Unary::Exp => v.exp(),
    }
}

/// d out / d in, from the input `x` and output `y`.
fn unary_deriv<T: Real>(kind: Unary, x: T, y: T) -> T {
    match kind {
        Unary::Sigmoid => y * (T::one() - y),
        Unary::Tanh => T::one() - y * y,
        Unary::Abs => {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        }
        Unary::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Unary::Exp => y,
    }
}

/// Per-pixel channel softmax with max subtraction.
pub fn softmax_channels<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, _, c) = x.hwc()?;
    if c == 0 {
        return Err(GrfpError::contract("softmax over zero channels"));
    }
    let mut out = x.clone();
    for px in out.data_mut().chunks_mut(c) {
        let max = px.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in px.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in px.iter_mut() {
            *v = *v / total;
        }
    }
    Ok(out)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    /// Leaf whose gradient is wanted.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, dilation: usize) -> Result<Var> {
        let value = conv2d(
            self.value(x),
            self.value(weight),
            bias.map(|b| self.value(b)),
            dilation,
        )?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        let rg = self.any_grad(&inputs);
        Ok(self.push(
            value,
            Op::Conv {
                x,
                weight,
                bias,
                dilation,
            },
            rg,
        ))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let op_name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "hadamard",
        };
        let layout = binary_layout(ta.shape(), tb.shape())
            .ok_or_else(|| GrfpError::shape(op_name, ta.shape(), tb.shape()))?;
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let value = match layout {
            Layout::Same => ta.zip_map(tb, f)?,
            Layout::BroadcastB => {
                let c = ta.shape()[2];
                let mut out = ta.clone();
                for (px, &s) in out.data_mut().chunks_mut(c).zip(tb.data()) {
                    for v in px {
                        *v = f(*v, s);
                    }
                }
                out
            }
            Layout::BroadcastA => {
                let c = tb.shape()[2];
                let mut out = tb.clone();
                for (px, &s) in out.data_mut().chunks_mut(c).zip(ta.data()) {
                    for v in px {
                        *v = f(s, *v);
                    }
                }
                out
            }
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Binary { kind, a, b }, rg))
    }

    /// Elementwise sum; a one-channel operand broadcasts across channels.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let value = self.value(x).map(|v| apply_unary(kind, v));
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Unary { kind, x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(Unary::Abs, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    /// `scale · x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Affine { x, scale }, rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -T::one(), T::zero())
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.affine(x, s, T::zero())
    }

    /// Multiplies every element of `x` by the single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(GrfpError::shape("scale_by", self.value(x).shape(), self.value(s).shape()));
        }
        let k = self.value(s).item();
        let value = self.value(x).map(|v| v * k);
        let rg = self.any_grad(&[x, s]);
        Ok(self.push(value, Op::ScaleBy { x, s }, rg))
    }

    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let value = softmax_channels(self.value(x))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Softmax { x }, rg))
    }

    /// Bilinear backward warp of `x` along the `H × W × 2` flow held by `flow`.
    pub fn warp(&mut self, x: Var, flow: Var) -> Result<Var> {
        let f = FlowField::new(self.value(flow).clone())?;
        let value = warp_bilinear(self.value(x), &f)?;
        let rg = self.any_grad(&[x, flow]);
        Ok(self.push(value, Op::Warp { x, flow }, rg))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Sum { x }, rg)
    }

    /// Unnormalized negative log-likelihood `−Σ log max(p[label], floor)` over
    /// non-ignore pixels of an `H × W × C` probability map.
    pub fn nll(&mut self, probs: Var, labels: &LabelMap, floor: T) -> Result<Var> {
        let p = self.value(probs);
        let (h, w, c) = p.hwc()?;
        if labels.height() != h || labels.width() != w {
            return Err(GrfpError::shape(
                "nll",
                p.shape(),
                &[labels.height(), labels.width()],
            ));
        }
        labels.validate(c)?;
        let mut loss = T::zero();
        for (px, &l) in p.data().chunks(c).zip(labels.data()) {
            if l != IGNORE {
                loss -= px[l as usize].max(floor).ln();
            }
        }
        let rg = self.any_grad(&[probs]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Nll {
                probs,
                labels: Arc::new(labels.clone()),
                floor,
            },
            rg,
        ))
    }

    /// Gradients of the rank-0 value `loss` with respect to every recorded node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.rank() != 0 {
            return Err(GrfpError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                x,
                weight,
                bias,
                dilation,
            } => {
                let cg = conv2d_backward(
                    g,
                    self.value(*x),
                    self.value(*weight),
                    bias.is_some(),
                    *dilation,
                    self.requires_grad(*x),
                )?;
                if let Some(gx) = cg.x {
                    self.accumulate(grads, *x, gx);
                }
                self.accumulate(grads, *weight, cg.weight);
                if let (Some(b), Some(gb)) = (bias, cg.bias) {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Binary { kind, a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let layout = binary_layout(ta.shape(), tb.shape()).expect("checked in forward");
                // upstream gradient times d/da and d/db, expanded to the output shape
                let (mut ga, mut gb) = (g.clone(), g.clone());
                let c = g.shape().last().copied().unwrap_or(1);
                for (k, gv) in g.data().iter().enumerate() {
                    let (ia, ib) = match layout {
                        Layout::Same => (k, k),
                        Layout::BroadcastB => (k, k / c),
                        Layout::BroadcastA => (k / c, k),
                    };
                    let (da, db) = match kind {
                        Binary::Add => (T::one(), T::one()),
                        Binary::Sub => (T::one(), -T::one()),
                        Binary::Mul => (tb.data()[ib], ta.data()[ia]),
                    };
                    ga.data_mut()[k] = *gv * da;
                    gb.data_mut()[k] = *gv * db;
                }
                let reduce = |full: Tensor<T>, shape: &[usize]| -> Tensor<T> {
                    let mut out = Tensor::zeros(shape);
                    for (px, o) in full.data().chunks(c).zip(out.data_mut()) {
                        *o = px.iter().copied().sum();
                    }
                    out
                };
                let (ga, gb) = match layout {
                    Layout::Same => (ga, gb),
                    Layout::BroadcastB => (ga, reduce(gb, tb.shape())),
                    Layout::BroadcastA => (reduce(ga, ta.shape()), gb),
                };
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Unary { kind, x } => {
                let xv = self.value(*x);
                let mut gx = g.clone();
                for ((gv, &xi), &yi) in gx.data_mut().iter_mut().zip(xv.data()).zip(node.value.data()) {
                    *gv = *gv * unary_deriv(*kind, xi, yi);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Affine { x, scale } => {
                let gx = g.map(|v| v * *scale);
                self.accumulate(grads, *x, gx);
            }
            Op::ScaleBy { x, s } => {
                let k = self.value(*s).item();
                self.accumulate(grads, *x, g.map(|v| v * k));
                if self.requires_grad(*s) {
                    let mut total = T::zero();
                    for (gv, xv) in g.data().iter().zip(self.value(*x).data()) {
                        total += *gv * *xv;
                    }
                    let shape = self.value(*s).shape().to_vec();
                    self.accumulate(grads, *s, Tensor::full(&shape, total));
                }
            }
            Op::Softmax { x } => {
                let y = &node.value;
                let c = y.shape()[2];
                let mut gx = g.clone();
                for ((gp, yp), gxp) in g
                    .data()
                    .chunks(c)
                    .zip(y.data().chunks(c))
                    .zip(gx.data_mut().chunks_mut(c))
                {
                    let dot: T = gp.iter().zip(yp).map(|(&a, &b)| a * b).sum();
                    for k in 0..c {
                        gxp[k] = yp[k] * (gp[k] - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Warp { x, flow } => {
                let f = FlowField::new(self.value(*flow).clone())?;
                let (gx, gf) = warp_backward(g, self.value(*x), &f)?;
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *flow, gf);
            }
            Op::Sum { x } => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, g.item()));
            }
            Op::Nll { probs, labels, floor } => {
                let p = self.value(*probs);
                let c = p.shape()[2];
                let up = g.item();
                let mut gp = Tensor::zeros(p.shape());
                for ((px, gpx), &l) in p
                    .data()
                    .chunks(c)
                    .zip(gp.data_mut().chunks_mut(c))
                    .zip(labels.data())
                {
                    if l != IGNORE {
                        let v = px[l as usize];
                        if v > *floor {
                            gpx[l as usize] = -up / v;
                        }
                    }
                }
                self.accumulate(grads, *probs, gp);
            }
        }
        Ok(())
    }
}
