//! Reverse-mode differentiation on a linear tape.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the tape from the loss towards the leaves. Nodes are only ever
//! appended, so tape order is a topological order.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ops::conv::{conv2d_backward, conv2d_forward, ConvGeometry, ConvGrads};
use crate::ops::resample::{upsample_backward, upsample_forward, AxisPlan};
use crate::ops::{Activation, ConvSpec};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry },
    Act { input: Var, act: Activation },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Upsample { input: Var, rows: AxisPlan<T>, cols: AxisPlan<T> },
    Concat(Var, Var),
    SliceChannels { input: Var, start: usize },
    PadEdge { input: Var, top: usize, left: usize },
    Crop { input: Var, top: usize, left: usize },
    Sum(Var),
    /// Scalar output whose local gradient w.r.t. each input was computed
    /// during the forward pass.
    Fused(Vec<(Var, Vec<T>)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Constant input; no gradient is tracked unless the tensor asks for one.
    pub fn input(&mut self, tensor: Tensor<T>) -> Var {
        let rg = tensor.requires_grad;
        self.push(tensor, Op::Leaf, rg)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id);
        let mut value = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("stored shapes are consistent");
        value.requires_grad = t.requires_grad;
        let v = self.push(value, Op::Leaf, t.requires_grad);
        self.params.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        x.ensure_finite("conv2d input")?;
        let w = &self.nodes[weight.0].value;
        let b = bias.map(|b| &self.nodes[b.0].value);
        let geom = ConvGeometry::resolve(x, spec, w, b)?;
        let data = conv2d_forward(&geom, x.data(), w.data(), b.map(Tensor::data));
        let out = Tensor::new(geom.output_shape(), data)?;
        let rg = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::Conv { input, weight, bias, geom }, rg))
    }

    pub fn activation(&mut self, input: Var, act: Activation) -> Var {
        let out = self.nodes[input.0].value.map(|v| act.apply(v));
        let rg = self.needs(input);
        self.push(out, Op::Act { input, act }, rg)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Tanh)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        if sa != sb {
            return Err(Error::config(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let out = self.nodes[input.0].value.map(|v| v * factor);
        let rg = self.needs(input);
        self.push(out, Op::Scale(input, factor), rg)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.nodes[input.0].value.sum();
        let rg = self.needs(input);
        self.push(Tensor::scalar(s), Op::Sum(input), rg)
    }

    /// Bilinear resize to a larger (or equal) spatial size; see [`crate::ops::resample`]
    /// for the sampling convention.
    pub fn upsample_bilinear(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let (n, c, h, w) = x.dims4()?;
        if out_h < h || out_w < w {
            return Err(Error::config(format!("bilinear_upsample cannot shrink {h}x{w} to {out_h}x{out_w}")));
        }
        let rows = AxisPlan::new(h, out_h);
        let cols = AxisPlan::new(w, out_w);
        let data = upsample_forward(x.data(), n * c, (h, w), &rows, &cols);
        let out = Tensor::new(vec![n, c, out_h, out_w], data)?;
        let rg = self.needs(input);
        Ok(self.push(out, Op::Upsample { input, rows, cols }, rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (na, ca, ha, wa) = ta.dims4()?;
        let (nb, cb, hb, wb) = tb.dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::config(format!(
                "concat_channels: {:?} and {:?} disagree on batch or spatial size",
                ta.shape(),
                tb.shape()
            )));
        }
        let plane = ha * wa;
        let mut data = Vec::with_capacity(ta.numel() + tb.numel());
        for n in 0..na {
            data.extend_from_slice(&ta.data()[n * ca * plane..(n + 1) * ca * plane]);
            data.extend_from_slice(&tb.data()[n * cb * plane..(n + 1) * cb * plane]);
        }
        let out = Tensor::new(vec![na, ca + cb, ha, wa], data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Concat(a, b), rg))
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, count: usize) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let (n, c, h, w) = x.dims4()?;
        if count == 0 || start + count > c {
            return Err(Error::config(format!("channel slice {start}..{} outside 0..{c}", start + count)));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * count * plane);
        for b in 0..n {
            let base = (b * c + start) * plane;
            data.extend_from_slice(&x.data()[base..base + count * plane]);
        }
        let out = Tensor::new(vec![n, count, h, w], data)?;
        let rg = self.needs(input);
        Ok(self.push(out, Op::SliceChannels { input, start }, rg))
    }

    /// Replicate-pads the spatial border.
    pub fn pad_edge(&mut self, input: Var, top: usize, bottom: usize, left: usize, right: usize) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let (n, c, h, w) = x.dims4()?;
        let (oh, ow) = (h + top + bottom, w + left + right);
        let mut data = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let plane = &x.data()[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                let sy = y.saturating_sub(top).min(h - 1);
                for xx in 0..ow {
                    let sx = xx.saturating_sub(left).min(w - 1);
                    data.push(plane[sy * w + sx]);
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], data)?;
        let rg = self.needs(input);
        Ok(self.push(out, Op::PadEdge { input, top, left }, rg))
    }

    pub fn crop(&mut self, input: Var, top: usize, left: usize, out_h: usize, out_w: usize) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let (n, c, h, w) = x.dims4()?;
        if top + out_h > h || left + out_w > w {
            return Err(Error::config(format!("crop {out_h}x{out_w}+{top}+{left} outside {h}x{w}")));
        }
        let mut data = Vec::with_capacity(n * c * out_h * out_w);
        for p in 0..n * c {
            let plane = &x.data()[p * h * w..(p + 1) * h * w];
            for y in top..top + out_h {
                data.extend_from_slice(&plane[y * w + left..y * w + left + out_w]);
            }
        }
        let out = Tensor::new(vec![n, c, out_h, out_w], data)?;
        let rg = self.needs(input);
        Ok(self.push(out, Op::Crop { input, top, left }, rg))
    }

    /// Records a scalar computed outside the tape together with its gradient
    /// with respect to each listed input.
    pub fn fused_scalar(&mut self, value: T, local_grads: Vec<(Var, Vec<T>)>) -> Result<Var> {
        for (v, g) in &local_grads {
            if g.len() != self.nodes[v.0].value.numel() {
                return Err(Error::config("fused_scalar: gradient length does not match its input"));
            }
        }
        let rg = local_grads.iter().any(|(v, _)| self.needs(*v));
        Ok(self.push(Tensor::scalar(value), Op::Fused(local_grads), rg))
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::Usage(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, params: self.params.clone() })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv { input, weight, bias, geom } => {
                let x = &self.nodes[input.0].value;
                let w = &self.nodes[weight.0].value;
                // Three distinct nodes, so the buffers are taken out to borrow them together.
                let mut gi = self.needs(*input).then(|| take_or_zero(grads, *input, x.numel()));
                let mut gw = self.needs(*weight).then(|| take_or_zero(grads, *weight, w.numel()));
                let mut gb = bias.filter(|b| self.needs(*b)).map(|b| take_or_zero(grads, b, geom.spec.out_channels));
                conv2d_backward(
                    geom,
                    x.data(),
                    w.data(),
                    g,
                    ConvGrads { input: gi.as_deref_mut(), weight: gw.as_deref_mut(), bias: gb.as_deref_mut() },
                );
                if let Some(v) = gi {
                    grads[input.0] = Some(v);
                }
                if let Some(v) = gw {
                    grads[weight.0] = Some(v);
                }
                if let (Some(v), Some(b)) = (gb, bias) {
                    grads[b.0] = Some(v);
                }
            }
            Op::Act { input, act } => {
                if self.needs(*input) {
                    let y = node.value.data();
                    let acc = slot(grads, *input, y.len());
                    for ((a, &gv), &yv) in acc.iter_mut().zip(g).zip(y) {
                        *a += gv * act.derivative_from_output(yv);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        add_into(slot(grads, v, g.len()), g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                if self.needs(*a) {
                    let acc = slot(grads, *a, g.len());
                    for ((s, &gv), &o) in acc.iter_mut().zip(g).zip(vb) {
                        *s += gv * o;
                    }
                }
                if self.needs(*b) {
                    let acc = slot(grads, *b, g.len());
                    for ((s, &gv), &o) in acc.iter_mut().zip(g).zip(va) {
                        *s += gv * o;
                    }
                }
            }
            Op::Scale(input, f) => {
                if self.needs(*input) {
                    let acc = slot(grads, *input, g.len());
                    for (s, &gv) in acc.iter_mut().zip(g) {
                        *s += gv * *f;
                    }
                }
            }
            Op::Sum(input) => {
                if self.needs(*input) {
                    let n = self.nodes[input.0].value.numel();
                    for s in slot(grads, *input, n) {
                        *s += g[0];
                    }
                }
            }
            Op::Upsample { input, rows, cols } => {
                if self.needs(*input) {
                    let x = &self.nodes[input.0].value;
                    let (n, c, h, w) = x.dims4().expect("validated in forward");
                    let acc = slot(grads, *input, x.numel());
                    upsample_backward(g, n * c, (h, w), rows, cols, acc);
                }
            }
            Op::Concat(a, b) => {
                let (n, ca, h, w) = self.nodes[a.0].value.dims4().expect("validated in forward");
                let cb = self.nodes[b.0].value.dims4().expect("validated in forward").1;
                let plane = h * w;
                let ct = ca + cb;
                if self.needs(*a) {
                    let acc = slot(grads, *a, n * ca * plane);
                    for bi in 0..n {
                        add_into(&mut acc[bi * ca * plane..(bi + 1) * ca * plane], &g[bi * ct * plane..(bi * ct + ca) * plane]);
                    }
                }
                if self.needs(*b) {
                    let acc = slot(grads, *b, n * cb * plane);
                    for bi in 0..n {
                        add_into(
                            &mut acc[bi * cb * plane..(bi + 1) * cb * plane],
                            &g[(bi * ct + ca) * plane..(bi + 1) * ct * plane],
                        );
                    }
                }
            }
            Op::SliceChannels { input, start } => {
                if self.needs(*input) {
                    let x = &self.nodes[input.0].value;
                    let (n, c, h, w) = x.dims4().expect("validated in forward");
                    let count = node.value.shape()[1];
                    let plane = h * w;
                    let acc = slot(grads, *input, x.numel());
                    for b in 0..n {
                        let base = (b * c + start) * plane;
                        add_into(&mut acc[base..base + count * plane], &g[b * count * plane..(b + 1) * count * plane]);
                    }
                }
            }
            Op::PadEdge { input, top, left } => {
                if self.needs(*input) {
                    let x = &self.nodes[input.0].value;
                    let (n, c, h, w) = x.dims4().expect("validated in forward");
                    let (oh, ow) = (node.value.shape()[2], node.value.shape()[3]);
                    let acc = slot(grads, *input, x.numel());
                    for p in 0..n * c {
                        for y in 0..oh {
                            let sy = y.saturating_sub(*top).min(h - 1);
                            for xx in 0..ow {
                                let sx = xx.saturating_sub(*left).min(w - 1);
                                acc[p * h * w + sy * w + sx] += g[(p * oh + y) * ow + xx];
                            }
                        }
                    }
                }
            }
            Op::Crop { input, top, left } => {
                if self.needs(*input) {
                    let x = &self.nodes[input.0].value;
                    let (n, c, h, w) = x.dims4().expect("validated in forward");
                    let (oh, ow) = (node.value.shape()[2], node.value.shape()[3]);
                    let acc = slot(grads, *input, x.numel());
                    for p in 0..n * c {
                        for y in 0..oh {
                            let dst = p * h * w + (y + top) * w + left;
                            add_into(&mut acc[dst..dst + ow], &g[(p * oh + y) * ow..(p * oh + y + 1) * ow]);
                        }
                    }
                }
            }
            Op::Fused(locals) => {
                for (v, local) in locals {
                    if self.needs(*v) {
                        let acc = slot(grads, *v, local.len());
                        for (s, &l) in acc.iter_mut().zip(local) {
                            *s += g[0] * l;
                        }
                    }
                }
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn take_or_zero<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> Vec<T> {
    grads[v.0].take().unwrap_or_else(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Result of a backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. a node, if the node was reached.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for one parameter; zeros when the loss does not depend on it.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Vec<T> {
        self.params
            .get(&id)
            .and_then(|v| self.wrt(*v))
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); store.get(id).numel()])
    }

    /// Writes every parameter's gradient into its `grad` slot.
    pub fn store_into(&self, store: &mut ParamStore<T>) {
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let g = self.param(store, id);
            store.get_mut(id).grad = Some(g);
        }
    }
}
