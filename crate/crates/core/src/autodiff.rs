//! Reverse-mode differentiation over whole fields.
//!
//! A [`Graph`] records every operation as a node holding its output buffer.
//! Each operation carries a hand-written adjoint, so a backward pass costs a
//! small constant number of sweeps over the buffers involved. Values are
//! checked for finiteness as they are produced and the first offending
//! operation is remembered, which [`evaluate_with_gradients`] reports.
//!
//! ```
//! use semdepth::autodiff::{evaluate_with_gradients, NamedTensors};
//! use semdepth::tensor::Tensor;
//!
//! let mut params = NamedTensors::new();
//! params.insert("p", Tensor::scalar(3.0));
//! let (value, grads) = evaluate_with_gradients(&params, |g, vars| {
//!     let p = vars["p"];
//!     Ok(g.mul(p, p)?)
//! })
//! .unwrap();
//! assert_eq!(value, 9.0);
//! assert_eq!(grads.get("p").unwrap().item(), 6.0);
//! ```

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{invalid, Error, Result};
use crate::geometry::{self, Intrinsics};
use crate::losses::{self, LabelMap};
use crate::tensor::{Shape, Tensor};
use crate::warp;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Abs(usize),
    Exp(usize),
    Ln(usize),
    Recip(usize),
    Sigmoid(usize),
    Square(usize),
    Min(usize, usize),
    Mean(usize),
    Sum(usize),
    ChannelMean(usize),
    Box3(usize),
    DiffH(usize),
    DiffW(usize),
    Upsample(usize),
    Softmax(usize),
    PixelLinear {
        input: usize,
        weight: usize,
        bias: usize,
    },
    Junction(usize, f64),
    Project {
        depth: usize,
        pose: usize,
        intrinsics: Intrinsics,
        in_view: Vec<bool>,
    },
    Bilinear {
        source: usize,
        coords: usize,
        in_view: Vec<bool>,
    },
    CrossEntropy {
        scores: usize,
        labels: Arc<LabelMap>,
    },
    Photometric {
        target: usize,
        projected: usize,
        params: losses::PhotometricParams,
        moments: Box<losses::Moments>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Abs(..) => "abs",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Recip(..) => "recip",
            Op::Sigmoid(..) => "sigmoid",
            Op::Square(..) => "square",
            Op::Min(..) => "min",
            Op::Mean(..) => "mean",
            Op::Sum(..) => "sum",
            Op::ChannelMean(..) => "channel_mean",
            Op::Box3(..) => "box3",
            Op::DiffH(..) => "diff_h",
            Op::DiffW(..) => "diff_w",
            Op::Upsample(..) => "upsample",
            Op::Softmax(..) => "softmax",
            Op::PixelLinear { .. } => "pixel_linear",
            Op::Junction(..) => "scaled_junction",
            Op::Project { .. } => "project_coords",
            Op::Bilinear { .. } => "bilinear_warp",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Photometric { .. } => "photometric_error",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recording of field operations, differentiable by [`Graph::backward`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    first_non_finite: Option<&'static str>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, true)
    }

    /// Registers a leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Name of the first operation whose output contained NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.first_non_finite
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite {
            Some(op) => Err(Error::NonFinite { op }),
            None => Ok(()),
        }
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.first_non_finite.is_none() && !value.all_finite() {
            self.first_non_finite = Some(op.name());
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.push_node(value, op, requires_grad)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let value = if sa == sb {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_vec(sa, data)?
        } else if sb == Shape::SCALAR {
            let y = tb.item();
            ta.map(|x| f(x, y))
        } else if sa == Shape::SCALAR {
            let x = ta.item();
            tb.map(|y| f(x, y))
        } else {
            return Err(Error::Shape {
                op: name,
                lhs: sa,
                rhs: sb,
            });
        };
        Ok(self.push(value, op, &[a.0, b.0]))
    }

    /// Element-wise sum; either side may be a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scaled(s);
        self.push(value, Op::Scale(a.0, s), &[a.0])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        self.push(value, Op::AddScalar(a.0), &[a.0])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        self.push(value, Op::Abs(a.0), &[a.0])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a.0), &[a.0])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.push(value, Op::Ln(a.0), &[a.0])
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::recip);
        self.push(value, Op::Recip(a.0), &[a.0])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(logistic);
        self.push(value, Op::Sigmoid(a.0), &[a.0])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.push(value, Op::Square(a.0), &[a.0])
    }

    /// Element-wise minimum. On exact ties the first argument wins, both in
    /// the forward value and in gradient routing.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op: "min",
                lhs: sa,
                rhs: sb,
            });
        }
        self.binary(a, b, "min", |x, y| if x <= y { x } else { y }, Op::Min(a.0, b.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean());
        self.push(value, Op::Mean(a.0), &[a.0])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a.0), &[a.0])
    }

    /// Averages over the channel axis, producing a single-channel field.
    pub fn channel_mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.shape();
        let inv = 1.0 / s.channels as f64;
        let data = t
            .data()
            .chunks_exact(s.channels)
            .map(|px| px.iter().sum::<f64>() * inv)
            .collect();
        let value = Tensor::from_vec(s.with_channels(1), data).expect("shape");
        self.push(value, Op::ChannelMean(a.0), &[a.0])
    }

    /// 3×3 uniform average with replicate padding, per channel.
    pub fn box3(&mut self, a: Var) -> Var {
        let value = box3_forward(self.value(a));
        self.push(value, Op::Box3(a.0), &[a.0])
    }

    /// Forward difference along the height: `a[y+1, x] - a[y, x]`.
    pub fn diff_h(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.shape();
        let value = Tensor::from_fn(Shape::new(s.height.saturating_sub(1), s.width, s.channels), |y, x, c| {
            t.at(y + 1, x, c) - t.at(y, x, c)
        });
        self.push(value, Op::DiffH(a.0), &[a.0])
    }

    /// Forward difference along the width: `a[y, x+1] - a[y, x]`.
    pub fn diff_w(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.shape();
        let value = Tensor::from_fn(Shape::new(s.height, s.width.saturating_sub(1), s.channels), |y, x, c| {
            t.at(y, x + 1, c) - t.at(y, x, c)
        });
        self.push(value, Op::DiffW(a.0), &[a.0])
    }

    /// Bilinear resize to `height × width` (pixel-center alignment, edges clamped).
    pub fn upsample(&mut self, a: Var, height: usize, width: usize) -> Var {
        let t = self.value(a);
        let value = resize_forward(t, height, width);
        self.push(value, Op::Upsample(a.0), &[a.0])
    }

    /// Softmax over the channel axis at every pixel.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.shape();
        let mut data = Vec::with_capacity(s.len());
        for px in t.data().chunks_exact(s.channels) {
            let m = px.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = px.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            data.extend(e.iter().map(|v| v / z));
        }
        let value = Tensor::from_vec(s, data).expect("shape");
        self.push(value, Op::Softmax(a.0), &[a.0])
    }

    /// Per-pixel affine map `out[p, m] = Σ_k in[p, k] · weight[k·M + m] + bias[m]`.
    ///
    /// `weight` is a `1×1×(K·M)` vector and `bias` a `1×1×M` vector.
    pub fn pixel_linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (ti, tw, tb) = (self.value(input), self.value(weight), self.value(bias));
        let k = ti.shape().channels;
        let m = tb.shape().len();
        if tw.shape().len() != k * m {
            return Err(Error::Shape {
                op: "pixel_linear",
                lhs: ti.shape(),
                rhs: tw.shape(),
            });
        }
        let s = ti.shape();
        let (w, b) = (tw.data(), tb.data());
        let mut data = Vec::with_capacity(s.pixels() * m);
        for px in ti.data().chunks_exact(k) {
            for j in 0..m {
                let mut acc = b[j];
                for (i, &v) in px.iter().enumerate() {
                    acc += v * w[i * m + j];
                }
                data.push(acc);
            }
        }
        let value = Tensor::from_vec(s.with_channels(m), data)?;
        Ok(self.push(
            value,
            Op::PixelLinear {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
            },
            &[input.0, weight.0, bias.0],
        ))
    }

    /// Forward identity whose backward pass multiplies the incoming gradient by `factor`.
    pub fn scaled_junction(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::Junction(a.0, factor), &[a.0])
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        self.check_finite()?;
        let out = &self.nodes[output.0].value;
        if out.shape() != Shape::SCALAR {
            return invalid(format!("backward needs a scalar output, got {}", out.shape()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match (&node.op, g) {
                    (Op::Leaf, Some(g)) if node.requires_grad => {
                        Some(Tensor::from_vec(node.value.shape(), g).expect("shape"))
                    }
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_broadcast(a, grads, g, |_, gi| gi);
                self.acc_broadcast(b, grads, g, |_, gi| gi);
            }
            Op::Sub(a, b) => {
                self.acc_broadcast(a, grads, g, |_, gi| gi);
                self.acc_broadcast(b, grads, g, |_, gi| -gi);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                self.acc_broadcast(a, grads, g, |k, gi| gi * bcast(vb, k));
                self.acc_broadcast(b, grads, g, |k, gi| gi * bcast(va, k));
            }
            Op::Div(a, b) => {
                let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                self.acc_broadcast(a, grads, g, |k, gi| gi / bcast(vb, k));
                self.acc_broadcast(b, grads, g, |k, gi| {
                    let d = bcast(vb, k);
                    -gi * bcast(va, k) / (d * d)
                });
            }
            Op::Scale(a, s) => self.acc_map(a, grads, |k| g[k] * s),
            Op::AddScalar(a) => self.acc_map(a, grads, |k| g[k]),
            Op::Junction(a, factor) => self.acc_map(a, grads, |k| g[k] * factor),
            Op::Abs(a) => {
                let va = self.nodes[a].value.data();
                // d|x|/dx taken as +1 at x = 0.
                self.acc_map(a, grads, |k| if va[k] >= 0.0 { g[k] } else { -g[k] })
            }
            Op::Exp(a) => self.acc_map(a, grads, |k| g[k] * out[k]),
            Op::Ln(a) => {
                let va = self.nodes[a].value.data();
                self.acc_map(a, grads, |k| g[k] / va[k])
            }
            Op::Recip(a) => self.acc_map(a, grads, |k| -g[k] * out[k] * out[k]),
            Op::Sigmoid(a) => self.acc_map(a, grads, |k| g[k] * out[k] * (1.0 - out[k])),
            Op::Square(a) => {
                let va = self.nodes[a].value.data();
                self.acc_map(a, grads, |k| 2.0 * g[k] * va[k])
            }
            Op::Min(a, b) => {
                let (va, vb) = (self.nodes[a].value.data(), self.nodes[b].value.data());
                self.acc_map(a, grads, |k| if va[k] <= vb[k] { g[k] } else { 0.0 });
                self.acc_map(b, grads, |k| if va[k] <= vb[k] { 0.0 } else { g[k] });
            }
            Op::Mean(a) => {
                let n = self.nodes[a].value.shape().len() as f64;
                self.acc_map(a, grads, |_| g[0] / n)
            }
            Op::Sum(a) => self.acc_map(a, grads, |_| g[0]),
            Op::ChannelMean(a) => {
                let c = self.nodes[a].value.shape().channels;
                let inv = 1.0 / c as f64;
                self.acc_map(a, grads, |k| g[k / c] * inv)
            }
            Op::Box3(a) => {
                if self.wants(a) {
                    let s = self.nodes[a].value.shape();
                    let ga = slot(grads, a, s.len());
                    box3_adjoint(s, g, ga);
                }
            }
            Op::DiffH(a) => {
                if self.wants(a) {
                    let s = self.nodes[a].value.shape();
                    let row = s.width * s.channels;
                    let ga = slot(grads, a, s.len());
                    for (k, &gk) in g.iter().enumerate() {
                        ga[k + row] += gk;
                        ga[k] -= gk;
                    }
                }
            }
            Op::DiffW(a) => {
                if self.wants(a) {
                    let s = self.nodes[a].value.shape();
                    let c = s.channels;
                    let ow = s.width - 1;
                    let ga = slot(grads, a, s.len());
                    for y in 0..s.height {
                        for x in 0..ow {
                            for ch in 0..c {
                                let gk = g[(y * ow + x) * c + ch];
                                let base = (y * s.width + x) * c + ch;
                                ga[base + c] += gk;
                                ga[base] -= gk;
                            }
                        }
                    }
                }
            }
            Op::Upsample(a) => {
                if self.wants(a) {
                    let s = self.nodes[a].value.shape();
                    let os = node.value.shape();
                    let ga = slot(grads, a, s.len());
                    resize_adjoint(s, os.height, os.width, g, ga);
                }
            }
            Op::Softmax(a) => {
                if self.wants(a) {
                    let c = node.value.shape().channels;
                    let ga = slot(grads, a, out.len());
                    for (p, (py, gy)) in out.chunks_exact(c).zip(g.chunks_exact(c)).enumerate() {
                        let dot: f64 = py.iter().zip(gy).map(|(y, g)| y * g).sum();
                        for j in 0..c {
                            ga[p * c + j] += py[j] * (gy[j] - dot);
                        }
                    }
                }
            }
            Op::PixelLinear {
                input,
                weight,
                bias,
            } => {
                let vi = &self.nodes[input].value;
                let vw = self.nodes[weight].value.data();
                let k = vi.shape().channels;
                let m = node.value.shape().channels;
                if self.wants(input) {
                    let gi = slot(grads, input, vi.shape().len());
                    for (p, gp) in g.chunks_exact(m).enumerate() {
                        for i in 0..k {
                            let mut acc = 0.0;
                            for j in 0..m {
                                acc += gp[j] * vw[i * m + j];
                            }
                            gi[p * k + i] += acc;
                        }
                    }
                }
                if self.wants(weight) {
                    let gw = slot(grads, weight, k * m);
                    for (px, gp) in vi.data().chunks_exact(k).zip(g.chunks_exact(m)) {
                        for i in 0..k {
                            for j in 0..m {
                                gw[i * m + j] += px[i] * gp[j];
                            }
                        }
                    }
                }
                if self.wants(bias) {
                    let gb = slot(grads, bias, m);
                    for gp in g.chunks_exact(m) {
                        for j in 0..m {
                            gb[j] += gp[j];
                        }
                    }
                }
            }
            Op::Project {
                depth,
                pose,
                ref intrinsics,
                ref in_view,
            } => {
                let vd = &self.nodes[depth].value;
                let vp = &self.nodes[pose].value;
                let (want_d, want_p) = (self.wants(depth), self.wants(pose));
                let (gd, gp) = geometry::project_adjoint(vd, vp, intrinsics, in_view, g, want_d, want_p);
                if let Some(gd) = gd {
                    add_into(slot(grads, depth, vd.shape().len()), &gd);
                }
                if let Some(gp) = gp {
                    add_into(slot(grads, pose, 6), &gp);
                }
            }
            Op::Bilinear {
                source,
                coords,
                ref in_view,
            } => {
                let vs = &self.nodes[source].value;
                let vc = &self.nodes[coords].value;
                if self.wants(source) {
                    warp::bilinear_adjoint_source(vs.shape(), vc, in_view, g, slot(grads, source, vs.shape().len()));
                }
                if self.wants(coords) {
                    warp::bilinear_adjoint_coords(vs, vc, in_view, g, slot(grads, coords, vc.shape().len()));
                }
            }
            Op::CrossEntropy { scores, ref labels } => {
                if self.wants(scores) {
                    let vs = &self.nodes[scores].value;
                    losses::cross_entropy_adjoint(vs, labels, g[0], slot(grads, scores, vs.shape().len()));
                }
            }
            Op::Photometric {
                target,
                projected,
                params,
                ref moments,
            } => {
                let (vt, vp) = (&self.nodes[target].value, &self.nodes[projected].value);
                let n = vt.shape().len();
                if self.wants(projected) {
                    losses::photometric_adjoint(vt, vp, moments, params, g, false, slot(grads, projected, n));
                }
                if self.wants(target) {
                    losses::photometric_adjoint(vt, vp, moments, params, g, true, slot(grads, target, n));
                }
            }
        }
    }

    fn acc_map(&self, a: usize, grads: &mut [Option<Vec<f64>>], f: impl Fn(usize) -> f64) {
        if !self.wants(a) {
            return;
        }
        let n = self.nodes[a].value.shape().len();
        let ga = slot(grads, a, n);
        for (k, v) in ga.iter_mut().enumerate() {
            *v += f(k);
        }
    }

    /// Accumulates `f(k, g[k])` into input `a`, summing over broadcast positions
    /// when `a` is a scalar that was expanded to the output shape.
    fn acc_broadcast(&self, a: usize, grads: &mut [Option<Vec<f64>>], g: &[f64], f: impl Fn(usize, f64) -> f64) {
        if !self.wants(a) {
            return;
        }
        let n = self.nodes[a].value.shape().len();
        let ga = slot(grads, a, n);
        if n == g.len() {
            for (k, v) in ga.iter_mut().enumerate() {
                *v += f(k, g[k]);
            }
        } else {
            ga[0] += g.iter().enumerate().map(|(k, &gk)| f(k, gk)).sum::<f64>();
        }
    }
}

#[inline]
fn bcast(t: &Tensor, k: usize) -> f64 {
    let d = t.data();
    if d.len() == 1 {
        d[0]
    } else {
        d[k]
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut Vec<f64> {
    grads[i].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Numerically stable logistic function.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn box3_forward(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (h, w, c) = (s.height, s.width, s.channels);
    let mut out = Tensor::zeros(s);
    let inv = 1.0 / 9.0;
    for y in 0..h {
        let rows = [y.saturating_sub(1), y, (y + 1).min(h - 1)];
        for x in 0..w {
            let cols = [x.saturating_sub(1), x, (x + 1).min(w - 1)];
            for ch in 0..c {
                let mut acc = 0.0;
                for &yy in &rows {
                    for &xx in &cols {
                        acc += t.at(yy, xx, ch);
                    }
                }
                out.set(y, x, ch, acc * inv);
            }
        }
    }
    out
}

fn box3_adjoint(s: Shape, g: &[f64], ga: &mut [f64]) {
    let (h, w, c) = (s.height, s.width, s.channels);
    let inv = 1.0 / 9.0;
    for y in 0..h {
        let rows = [y.saturating_sub(1), y, (y + 1).min(h - 1)];
        for x in 0..w {
            let cols = [x.saturating_sub(1), x, (x + 1).min(w - 1)];
            for ch in 0..c {
                let gk = g[(y * w + x) * c + ch] * inv;
                for &yy in &rows {
                    for &xx in &cols {
                        ga[(yy * w + xx) * c + ch] += gk;
                    }
                }
            }
        }
    }
}

/// Source position and interpolation weight along one axis for resizing
/// `n_in → n_out` with pixel-center alignment.
#[inline]
fn resize_tap(i: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    let src = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
    let i0 = (src.floor() as usize).min(n_in.saturating_sub(2));
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, src - i0 as f64)
}

pub(crate) fn resize_forward(t: &Tensor, height: usize, width: usize) -> Tensor {
    let s = t.shape();
    let c = s.channels;
    let mut out = Tensor::zeros(Shape::new(height, width, c));
    for y in 0..height {
        let (y0, y1, fy) = resize_tap(y, s.height, height);
        for x in 0..width {
            let (x0, x1, fx) = resize_tap(x, s.width, width);
            for ch in 0..c {
                let v = (1.0 - fy) * ((1.0 - fx) * t.at(y0, x0, ch) + fx * t.at(y0, x1, ch))
                    + fy * ((1.0 - fx) * t.at(y1, x0, ch) + fx * t.at(y1, x1, ch));
                out.set(y, x, ch, v);
            }
        }
    }
    out
}

fn resize_adjoint(s: Shape, height: usize, width: usize, g: &[f64], ga: &mut [f64]) {
    let c = s.channels;
    let idx = |y: usize, x: usize, ch: usize| (y * s.width + x) * c + ch;
    for y in 0..height {
        let (y0, y1, fy) = resize_tap(y, s.height, height);
        for x in 0..width {
            let (x0, x1, fx) = resize_tap(x, s.width, width);
            for ch in 0..c {
                let gk = g[(y * width + x) * c + ch];
                ga[idx(y0, x0, ch)] += gk * (1.0 - fy) * (1.0 - fx);
                ga[idx(y0, x1, ch)] += gk * (1.0 - fy) * fx;
                ga[idx(y1, x0, ch)] += gk * fy * (1.0 - fx);
                ga[idx(y1, x1, ch)] += gk * fy * fx;
            }
        }
    }
}

/// Gradients of every differentiable leaf after [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Named parameter (or gradient) blocks in a fixed, sorted order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NamedTensors {
    blocks: BTreeMap<String, Tensor>,
}

/// Gradient buffers keyed by parameter block name.
pub type GradientSet = NamedTensors;

impl NamedTensors {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.blocks.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.blocks.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.blocks.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.blocks.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.blocks.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.blocks.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.blocks.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.blocks.values().all(Tensor::all_finite)
    }
}

/// Evaluates a scalar expression and the gradient of every named parameter.
///
/// The closure receives a fresh graph with each parameter registered as a
/// differentiable leaf, and must return a scalar node. Non-finite
/// intermediates abort with [`Error::NonFinite`] naming the first offending
/// operation.
pub fn evaluate_with_gradients<F>(params: &NamedTensors, f: F) -> Result<(f64, GradientSet)>
where
    F: FnOnce(&mut Graph, &BTreeMap<String, Var>) -> Result<Var>,
{
    let mut graph = Graph::new();
    let vars: BTreeMap<String, Var> = params
        .iter()
        .map(|(name, t)| (name.to_string(), graph.param(t.clone())))
        .collect();
    let out = f(&mut graph, &vars)?;
    graph.check_finite()?;
    let value = graph.value(out);
    if value.shape() != Shape::SCALAR {
        return invalid(format!("expression must be scalar, got {}", value.shape()));
    }
    let value = value.item();
    let mut grads = graph.backward(out)?;
    let mut set = GradientSet::new();
    for (name, var) in &vars {
        let g = grads
            .take(*var)
            .unwrap_or_else(|| Tensor::zeros(graph.value(*var).shape()));
        set.insert(name.clone(), g);
    }
    Ok((value, set))
}
