//! Minimal reverse-mode automatic differentiation over `ndarray` in double
//! precision.
//!
//! A [`Graph`] is built fresh for every forward pass. It borrows the
//! [`ParamStore`] read-only, records every operation on a tape, and
//! [`Graph::backward`] walks the tape in reverse to produce parameter
//! gradients. Image tensors use NCHW layout.

pub mod gradcheck;
mod kernels;
pub mod optim;
pub mod params;

use std::collections::HashMap;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, ArrayD, ArrayView2, ArrayViewMut2, Axis, Ix2, IxDyn, Slice, Zip};
use rand::Rng;

use crate::error::{Error, Result};
use kernels::ConvGeom;
pub use params::{ParamEntry, ParamId, ParamStore};

pub type Tensor = ArrayD<f64>;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Batch statistics observed by a training-mode batch norm, to be folded
/// into the running buffers once the graph is dropped.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Array1<f64>,
    /// Unbiased batch variance.
    pub batch_var: Array1<f64>,
}

enum Storage {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        geom: ConvGeom,
    },
    GlobalAvgPool(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Array1<f64>,
        train: bool,
    },
    Mean(Var),
}

struct Node {
    storage: Storage,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to every trainable parameter reached.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
    bn_updates: Vec<BnUpdate>,
}

fn view2(t: &Tensor) -> ArrayView2<'_, f64> {
    t.view().into_dimensionality::<Ix2>().expect("2-d tensor")
}

fn same_shape(ctx: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(ctx, a.shape(), b.shape()));
    }
    Ok(())
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            bn_updates: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].storage {
            Storage::Owned(t) => t,
            Storage::Param(id) => self.params.value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            storage: Storage::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Parameter leaf; repeated calls for the same id return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes.get(&id) {
            return *v;
        }
        let trainable = self.params.get(id).trainable;
        self.nodes.push(Node {
            storage: Storage::Param(id),
            op: Op::Leaf,
            needs_grad: trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() != 2 || bv.ndim() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let out = view2(av).dot(&view2(bv)).into_dyn();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// Adds a vector along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let last = *xv.shape().last().unwrap_or(&0);
        if bv.ndim() != 1 || bv.len() != last {
            return Err(Error::shape("add_bias", [last], bv.shape()));
        }
        let out = xv + bv;
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(out, Op::AddBias(x, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = self.value(a) - self.value(b);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = self.value(a) * self.value(b);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).mapv(|v| scale * v + shift);
        let ng = self.needs(x);
        self.push(out, Op::Affine(x, scale), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.max(0.0));
        let ng = self.needs(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let ng = self.needs(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(f64::tanh);
        let ng = self.needs(x);
        self.push(out, Op::Tanh(x), ng)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        let views: Vec<_> = xs.iter().map(|v| self.value(*v).view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).map_err(|_| {
            Error::shape(
                "concat",
                format!("matching shapes off axis {axis}"),
                xs.iter()
                    .map(|v| self.shape(*v).to_vec())
                    .collect::<Vec<_>>(),
            )
        })?;
        let ng = xs.iter().any(|v| self.needs(*v));
        Ok(self.push(out, Op::Concat(xs.to_vec(), axis), ng))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.ndim() || start >= end || end > xv.shape()[axis] {
            return Err(Error::shape(
                "slice",
                format!("axis {axis} range {start}..{end}"),
                xv.shape(),
            ));
        }
        let out = xv
            .slice_axis(Axis(axis), Slice::from(start..end))
            .to_owned();
        let ng = self.needs(x);
        Ok(self.push(out, Op::Slice(x, axis, start), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let out = xv
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .map_err(|_| Error::shape("reshape", shape, xv.shape()))?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Square-kernel 2-d convolution. `x`: N×C×H×W, `w`: O×C×K×K, `b`: O.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.ndim() != 4 || wv.ndim() != 4 || xv.shape()[1] != wv.shape()[1] {
            return Err(Error::shape("conv2d input", wv.shape(), xv.shape()));
        }
        let (n, c, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (o, k) = (wv.shape()[0], wv.shape()[2]);
        let geom = ConvGeom::new(c, h, wd, k, stride, pad)
            .ok_or_else(|| Error::shape("conv2d geometry", [k, k], [h, wd]))?;
        let xs = xv.as_standard_layout();
        let xs = xs.as_slice().expect("standard layout");
        let wmat = wv
            .view()
            .into_shape_with_order((o, geom.rows()))
            .map_err(|_| Error::shape("conv2d kernel", [o, geom.rows()], wv.shape()))?;
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[n, o, geom.ho, geom.wo]));
        let mut cols = vec![0.0; geom.rows() * geom.cols()];
        {
            let out_s = out.as_slice_mut().expect("fresh array");
            let per_in = c * h * wd;
            let per_out = o * geom.cols();
            for i in 0..n {
                kernels::im2col(&xs[i * per_in..(i + 1) * per_in], &geom, &mut cols);
                let cv = ArrayView2::from_shape((geom.rows(), geom.cols()), &cols).unwrap();
                let mut ov = ArrayViewMut2::from_shape(
                    (o, geom.cols()),
                    &mut out_s[i * per_out..(i + 1) * per_out],
                )
                .unwrap();
                general_mat_mul(1.0, &wmat, &cv, 0.0, &mut ov);
            }
        }
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != o {
                return Err(Error::shape("conv2d bias", [o], bv.shape()));
            }
            for (mut plane, bias) in out.axis_iter_mut(Axis(1)).zip(bv.iter()) {
                plane += *bias;
            }
        }
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, ng))
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 4 {
            return Err(Error::shape("max_pool2d", "N×C×H×W", xv.shape()));
        }
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let geom = ConvGeom::new(c, h, w, k, stride, pad)
            .ok_or_else(|| Error::shape("max_pool2d geometry", [k, k], [h, w]))?;
        let xs = xv.as_standard_layout();
        let xs = xs.as_slice().unwrap();
        let per_out = c * geom.cols();
        let mut out = vec![0.0; n * per_out];
        let mut argmax = vec![0usize; n * per_out];
        for i in 0..n {
            kernels::max_pool(
                &xs[i * c * h * w..(i + 1) * c * h * w],
                &geom,
                &mut out[i * per_out..(i + 1) * per_out],
                &mut argmax[i * per_out..(i + 1) * per_out],
            );
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[n, c, geom.ho, geom.wo]), out).unwrap();
        let ng = self.needs(x);
        Ok(self.push(out, Op::MaxPool { x, argmax }, ng))
    }

    pub fn avg_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 4 {
            return Err(Error::shape("avg_pool2d", "N×C×H×W", xv.shape()));
        }
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let geom = ConvGeom::new(c, h, w, k, stride, 0)
            .ok_or_else(|| Error::shape("avg_pool2d geometry", [k, k], [h, w]))?;
        let xs = xv.as_standard_layout();
        let xs = xs.as_slice().unwrap();
        let per_out = c * geom.cols();
        let mut out = vec![0.0; n * per_out];
        for i in 0..n {
            kernels::avg_pool(
                &xs[i * c * h * w..(i + 1) * c * h * w],
                &geom,
                &mut out[i * per_out..(i + 1) * per_out],
            );
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[n, c, geom.ho, geom.wo]), out).unwrap();
        let ng = self.needs(x);
        Ok(self.push(out, Op::AvgPool { x, geom }, ng))
    }

    /// N×C×H×W → N×C.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 4 {
            return Err(Error::shape("global_avg_pool", "N×C×H×W", xv.shape()));
        }
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let hw = (xv.shape()[2] * xv.shape()[3]) as f64;
        let flat = xv
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n, c, xv.shape()[2] * xv.shape()[3]))
            .unwrap();
        let out = flat.sum_axis(Axis(2)).mapv(|v| v / hw).into_dyn();
        let ng = self.needs(x);
        Ok(self.push(out, Op::GlobalAvgPool(x), ng))
    }

    /// Batch normalization over axis 1 of an N×F or N×C×H×W tensor.
    ///
    /// In training mode the batch statistics are used and recorded for the
    /// running buffers; otherwise the running buffers are used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
        eps: f64,
        train: bool,
    ) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 2 && xv.ndim() != 4 {
            return Err(Error::shape("batch_norm", "N×F or N×C×H×W", xv.shape()));
        }
        let shape = xv.shape().to_vec();
        let (n, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        let x3 = xv
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n, c, s))
            .unwrap();
        let m = (n * s) as f64;
        let (mean, var) = if train {
            let mean = x3.sum_axis(Axis(2)).sum_axis(Axis(0)) / m;
            let mut var = Array1::<f64>::zeros(c);
            for ((_, ch, _), v) in x3.indexed_iter() {
                let d = v - mean[ch];
                var[ch] += d * d;
            }
            var /= m;
            (mean, var)
        } else {
            let rm = self.params.value(running_mean).clone();
            let rv = self.params.value(running_var).clone();
            (
                rm.into_dimensionality().expect("1-d running mean"),
                rv.into_dimensionality().expect("1-d running var"),
            )
        };
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let gv = self.params.value(gamma);
        let bv = self.params.value(beta);
        let mut xhat = x3.clone();
        let mut out = x3;
        for ((_, ch, _), v) in xhat.indexed_iter_mut() {
            *v = (*v - mean[ch]) * inv_std[ch];
        }
        Zip::indexed(&mut out)
            .and(&xhat)
            .for_each(|(_, ch, _), o, xh| {
                *o = gv[[ch]] * xh + bv[[ch]];
            });
        if train {
            let unbiased = if m > 1.0 {
                var.mapv(|v| v * m / (m - 1.0))
            } else {
                var.clone()
            };
            self.bn_updates.push(BnUpdate {
                running_mean,
                running_var,
                batch_mean: mean,
                batch_var: unbiased,
            });
        }
        let out = out.into_shape_with_order(IxDyn(&shape)).unwrap();
        let xhat = xhat.into_dyn();
        let (gn, bn) = (self.param(gamma), self.param(beta));
        let ng = self.needs(x) || self.needs(gn) || self.needs(bn);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma: gn,
                beta: bn,
                xhat,
                inv_std,
                train,
            },
            ng,
        ))
    }

    /// Mean of all elements, as a 0-d tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = ArrayD::from_elem(IxDyn(&[]), xv.mean().unwrap_or(0.0));
        let ng = self.needs(x);
        self.push(out, Op::Mean(x), ng)
    }

    /// Inverted dropout: surviving activations are scaled by `1/(1-p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let shape = self.shape(x).to_vec();
        let mask = ArrayD::from_shape_simple_fn(IxDyn(&shape), || {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let m = self.input(mask);
        self.mul(x, m)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", "scalar", self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::ones(self.value(loss).raw_dim()));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    if let Storage::Param(id) = node.storage {
                        out.grads.insert(id, g);
                    }
                }
                Op::MatMul(a, b) => {
                    let g2 = view2(&g);
                    if self.needs(*a) {
                        let d = g2.dot(&view2(self.value(*b)).t()).into_dyn();
                        accumulate(&mut grads, *a, d);
                    }
                    if self.needs(*b) {
                        let d = view2(self.value(*a)).t().dot(&g2).into_dyn();
                        accumulate(&mut grads, *b, d);
                    }
                }
                Op::AddBias(x, b) => {
                    if self.needs(*b) {
                        let last = g.ndim() - 1;
                        let cols = g.shape()[last];
                        let flat = g
                            .as_standard_layout()
                            .into_owned()
                            .into_shape_with_order((g.len() / cols.max(1), cols))
                            .unwrap();
                        accumulate(&mut grads, *b, flat.sum_axis(Axis(0)).into_dyn());
                    }
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, -g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::Affine(x, scale) => {
                    accumulate(&mut grads, *x, g * *scale);
                }
                Op::Relu(x) => {
                    let y = self.value(Var(i));
                    let mut d = g;
                    Zip::from(&mut d).and(y).for_each(|d, &y| {
                        if y <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    accumulate(&mut grads, *x, d);
                }
                Op::Sigmoid(x) => {
                    let y = self.value(Var(i));
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(y)
                        .for_each(|d, &y| *d *= y * (1.0 - y));
                    accumulate(&mut grads, *x, d);
                }
                Op::Tanh(x) => {
                    let y = self.value(Var(i));
                    let mut d = g;
                    Zip::from(&mut d).and(y).for_each(|d, &y| *d *= 1.0 - y * y);
                    accumulate(&mut grads, *x, d);
                }
                Op::Concat(xs, axis) => {
                    let mut offset = 0;
                    for x in xs {
                        let len = self.shape(*x)[*axis];
                        if self.needs(*x) {
                            let d = g
                                .slice_axis(Axis(*axis), Slice::from(offset..offset + len))
                                .to_owned();
                            accumulate(&mut grads, *x, d);
                        }
                        offset += len;
                    }
                }
                Op::Slice(x, axis, start) => {
                    let mut d = ArrayD::zeros(self.value(*x).raw_dim());
                    let len = g.shape()[*axis];
                    d.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + len))
                        .assign(&g);
                    accumulate(&mut grads, *x, d);
                }
                Op::Reshape(x) => {
                    let shape = self.shape(*x).to_vec();
                    let d = g
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(IxDyn(&shape))
                        .unwrap();
                    accumulate(&mut grads, *x, d);
                }
                Op::Conv2d { x, w, b, geom } => {
                    self.conv2d_backward(&mut grads, &g, *x, *w, *b, geom);
                }
                Op::MaxPool { x, argmax, .. } => {
                    let mut d = ArrayD::<f64>::zeros(self.value(*x).raw_dim());
                    let n = d.shape()[0];
                    let per_in = d.len() / n.max(1);
                    let per_out = g.len() / n.max(1);
                    let gs = g.as_standard_layout();
                    let gs = gs.as_slice().unwrap();
                    let ds = d.as_slice_mut().unwrap();
                    for s in 0..n {
                        for j in 0..per_out {
                            ds[s * per_in + argmax[s * per_out + j]] += gs[s * per_out + j];
                        }
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::AvgPool { x, geom } => {
                    let mut d = ArrayD::<f64>::zeros(self.value(*x).raw_dim());
                    let n = d.shape()[0];
                    let per_in = d.len() / n.max(1);
                    let per_out = g.len() / n.max(1);
                    let gs = g.as_standard_layout();
                    let gs = gs.as_slice().unwrap();
                    let ds = d.as_slice_mut().unwrap();
                    for s in 0..n {
                        kernels::avg_pool_backward(
                            &gs[s * per_out..(s + 1) * per_out],
                            geom,
                            &mut ds[s * per_in..(s + 1) * per_in],
                        );
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::GlobalAvgPool(x) => {
                    let shape = self.shape(*x).to_vec();
                    let hw = (shape[2] * shape[3]) as f64;
                    let mut d = ArrayD::<f64>::zeros(IxDyn(&shape));
                    for ((nn, cc), v) in view2(&g).indexed_iter() {
                        d.slice_mut(ndarray::s![nn, cc, .., ..]).fill(v / hw);
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    train,
                } => {
                    let shape = g.shape().to_vec();
                    let (n, c) = (shape[0], shape[1]);
                    let s: usize = shape[2..].iter().product();
                    let g3 = g
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order((n, c, s))
                        .unwrap();
                    let xh3 = xhat
                        .view()
                        .into_shape_with_order((n, c, s))
                        .expect("xhat stored in standard layout");
                    let mut sum_g = Array1::<f64>::zeros(c);
                    let mut sum_gx = Array1::<f64>::zeros(c);
                    Zip::indexed(&g3).and(&xh3).for_each(|(_, ch, _), gv, xv| {
                        sum_g[ch] += gv;
                        sum_gx[ch] += gv * xv;
                    });
                    if self.needs(*gamma) {
                        accumulate(&mut grads, *gamma, sum_gx.clone().into_dyn());
                    }
                    if self.needs(*beta) {
                        accumulate(&mut grads, *beta, sum_g.clone().into_dyn());
                    }
                    if self.needs(*x) {
                        let gam = self.value(*gamma);
                        let m = (n * s) as f64;
                        let mut d = g3.clone();
                        Zip::indexed(&mut d)
                            .and(&xh3)
                            .for_each(|(_, ch, _), dv, xv| {
                                let scale = gam[[ch]] * inv_std[ch];
                                *dv = if *train {
                                    scale * (*dv - sum_g[ch] / m - xv * sum_gx[ch] / m)
                                } else {
                                    scale * *dv
                                };
                            });
                        accumulate(
                            &mut grads,
                            *x,
                            d.into_shape_with_order(IxDyn(&shape)).unwrap(),
                        );
                    }
                }
                Op::Mean(x) => {
                    let xv = self.value(*x);
                    let gv = g.iter().next().copied().unwrap_or(0.0);
                    let d = ArrayD::from_elem(xv.raw_dim(), gv / xv.len().max(1) as f64);
                    accumulate(&mut grads, *x, d);
                }
            }
        }
        Ok(out)
    }

    fn conv2d_backward(
        &self,
        grads: &mut [Option<Tensor>],
        g: &Tensor,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
    ) {
        let xv = self.value(x);
        let wv = self.value(w);
        let n = xv.shape()[0];
        let o = wv.shape()[0];
        let gs = g.as_standard_layout();
        let gs = gs.as_slice().unwrap();
        let per_out = o * geom.cols();
        let per_in = geom.c * geom.h * geom.w;

        if let Some(b) = b.filter(|b| self.needs(*b)) {
            let mut db = Array1::<f64>::zeros(o);
            for s in 0..n {
                for oc in 0..o {
                    let base = s * per_out + oc * geom.cols();
                    db[oc] += gs[base..base + geom.cols()].iter().sum::<f64>();
                }
            }
            accumulate(grads, b, db.into_dyn());
        }
        let need_w = self.needs(w);
        let need_x = self.needs(x);
        if !need_w && !need_x {
            return;
        }
        let xs = xv.as_standard_layout();
        let xs = xs.as_slice().unwrap();
        let wmat = wv.view().into_shape_with_order((o, geom.rows())).unwrap();
        let mut dw = ndarray::Array2::<f64>::zeros((o, geom.rows()));
        let mut dx = if need_x {
            vec![0.0; xv.len()]
        } else {
            Vec::new()
        };
        let mut cols = vec![0.0; geom.rows() * geom.cols()];
        let mut dcols = ndarray::Array2::<f64>::zeros((geom.rows(), geom.cols()));
        for s in 0..n {
            let gv = ArrayView2::from_shape((o, geom.cols()), &gs[s * per_out..(s + 1) * per_out])
                .unwrap();
            if need_w {
                kernels::im2col(&xs[s * per_in..(s + 1) * per_in], geom, &mut cols);
                let cv = ArrayView2::from_shape((geom.rows(), geom.cols()), &cols).unwrap();
                general_mat_mul(1.0, &gv, &cv.t(), 1.0, &mut dw);
            }
            if need_x {
                general_mat_mul(1.0, &wmat.t(), &gv, 0.0, &mut dcols);
                kernels::col2im(
                    dcols.as_slice().unwrap(),
                    geom,
                    &mut dx[s * per_in..(s + 1) * per_in],
                );
            }
        }
        if need_w {
            let d = dw.into_shape_with_order(IxDyn(wv.shape())).unwrap();
            accumulate(grads, w, d);
        }
        if need_x {
            let d = ArrayD::from_shape_vec(xv.raw_dim(), dx).unwrap();
            accumulate(grads, x, d);
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, d: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &d,
        slot @ None => *slot = Some(d),
    }
}
