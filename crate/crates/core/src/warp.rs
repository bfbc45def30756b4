//! Inverse warping of images (bilinear, differentiable) and of class masks
//! (nearest neighbour, no gradients).
//!
//! Coordinates outside `[0, W−1] × [0, H−1]` are clamped to the border and
//! reported through a per-pixel in-bounds flag.

use crate::autodiff::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{CoordinateField, Image, SegMask, Shape, Tensor};

/// How samples outside the source rectangle are resolved.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BorderPolicy {
    /// Coordinates are clipped to the image rectangle.
    #[default]
    Clamp,
}

/// A warped mask together with its in-bounds flags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WarpedMask {
    pub mask: SegMask,
    pub in_bounds: Vec<bool>,
}

#[inline]
fn inside(v: f64, n: usize) -> bool {
    v >= 0.0 && v <= (n - 1) as f64
}

/// In-bounds flags: the point is in view and its unclamped coordinate lies in the rectangle.
pub fn in_bounds_flags(coords: &Tensor, in_view: &[bool], height: usize, width: usize) -> Vec<bool> {
    coords
        .data()
        .chunks_exact(2)
        .zip(in_view)
        .map(|(xy, &v)| v && inside(xy[0], width) && inside(xy[1], height))
        .collect()
}

/// Lower tap index and fractional offset along one axis after clamping.
#[inline]
fn tap(v: f64, n: usize) -> (usize, usize, f64) {
    let vc = v.clamp(0.0, (n - 1) as f64);
    let i0 = (vc.floor() as usize).min(n.saturating_sub(2));
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, vc - i0 as f64)
}

fn bilinear_forward(src: &Tensor, coords: &Tensor) -> Tensor {
    let s = src.shape();
    let cs = coords.shape();
    let c = s.channels;
    let mut out = Vec::with_capacity(cs.pixels() * c);
    for xy in coords.data().chunks_exact(2) {
        let (x0, x1, fx) = tap(xy[0], s.width);
        let (y0, y1, fy) = tap(xy[1], s.height);
        for ch in 0..c {
            let top = (1.0 - fx) * src.at(y0, x0, ch) + fx * src.at(y0, x1, ch);
            let bottom = (1.0 - fx) * src.at(y1, x0, ch) + fx * src.at(y1, x1, ch);
            out.push((1.0 - fy) * top + fy * bottom);
        }
    }
    Tensor::from_vec(Shape::new(cs.height, cs.width, c), out).expect("shape")
}

pub(crate) fn bilinear_adjoint_source(s: Shape, coords: &Tensor, _in_view: &[bool], g: &[f64], gs: &mut [f64]) {
    let c = s.channels;
    let idx = |y: usize, x: usize, ch: usize| (y * s.width + x) * c + ch;
    for (p, xy) in coords.data().chunks_exact(2).enumerate() {
        let (x0, x1, fx) = tap(xy[0], s.width);
        let (y0, y1, fy) = tap(xy[1], s.height);
        for ch in 0..c {
            let gk = g[p * c + ch];
            gs[idx(y0, x0, ch)] += gk * (1.0 - fy) * (1.0 - fx);
            gs[idx(y0, x1, ch)] += gk * (1.0 - fy) * fx;
            gs[idx(y1, x0, ch)] += gk * fy * (1.0 - fx);
            gs[idx(y1, x1, ch)] += gk * fy * fx;
        }
    }
}

pub(crate) fn bilinear_adjoint_coords(src: &Tensor, coords: &Tensor, in_view: &[bool], g: &[f64], gc: &mut [f64]) {
    let s = src.shape();
    let c = s.channels;
    for (p, xy) in coords.data().chunks_exact(2).enumerate() {
        if !in_view[p] {
            continue;
        }
        let (x0, x1, fx) = tap(xy[0], s.width);
        let (y0, y1, fy) = tap(xy[1], s.height);
        // Clamping is flat outside the rectangle.
        let live_x = inside(xy[0], s.width) && s.width > 1;
        let live_y = inside(xy[1], s.height) && s.height > 1;
        let (mut gx, mut gy) = (0.0, 0.0);
        for ch in 0..c {
            let gk = g[p * c + ch];
            let (i00, i01) = (src.at(y0, x0, ch), src.at(y0, x1, ch));
            let (i10, i11) = (src.at(y1, x0, ch), src.at(y1, x1, ch));
            gx += gk * ((1.0 - fy) * (i01 - i00) + fy * (i11 - i10));
            gy += gk * ((1.0 - fx) * (i10 - i00) + fx * (i11 - i01));
        }
        if live_x {
            gc[2 * p] += gx;
        }
        if live_y {
            gc[2 * p + 1] += gy;
        }
    }
}

impl Graph {
    /// Differentiable bilinear sampling of `source` at an `H×W×2` coordinate node.
    ///
    /// `in_view` marks coordinates produced from points in front of the camera;
    /// pass `None` when every coordinate is meaningful. Returns the sampled
    /// node and the in-bounds flags.
    pub fn bilinear(&mut self, source: Var, coords: Var, in_view: Option<&[bool]>) -> Result<(Var, Vec<bool>)> {
        let (ts, tc) = (self.value(source), self.value(coords));
        if tc.shape().channels != 2 {
            return Err(Error::Shape {
                op: "bilinear_warp",
                lhs: ts.shape(),
                rhs: tc.shape(),
            });
        }
        let in_view = match in_view {
            Some(v) => v.to_vec(),
            None => vec![true; tc.shape().pixels()],
        };
        let value = bilinear_forward(ts, tc);
        let flags = in_bounds_flags(tc, &in_view, ts.shape().height, ts.shape().width);
        let op = Op::Bilinear {
            source: source.0,
            coords: coords.0,
            in_view,
        };
        Ok((self.push(value, op, &[source.0, coords.0]), flags))
    }
}

/// Bilinear sampling of an arbitrary tensor; returns samples and in-bounds flags.
pub fn bilinear_sample(source: &Tensor, coords: &CoordinateField) -> (Tensor, Vec<bool>) {
    let s = source.shape();
    let value = bilinear_forward(source, coords.tensor());
    let flags = in_bounds_flags(coords.tensor(), coords.in_view(), s.height, s.width);
    (value, flags)
}

/// Reconstructs an image by sampling `source` at `coords`.
pub fn bilinear_warp(source: &Image, coords: &CoordinateField) -> Result<(Image, Vec<bool>)> {
    let (t, flags) = bilinear_sample(source.tensor(), coords);
    // Convex combinations of [0, 1] values stay in [0, 1] up to rounding.
    let t = t.map(|v| v.clamp(0.0, 1.0));
    Ok((Image::new(t)?, flags))
}

/// Nearest-neighbour warp of a class mask (round half away from zero, then clamp).
pub fn nearest_warp(mask: &SegMask, coords: &CoordinateField) -> WarpedMask {
    let (h, w) = (mask.height(), mask.width());
    let t = coords.tensor();
    let mut ids = Vec::with_capacity(coords.height() * coords.width());
    for xy in t.data().chunks_exact(2) {
        let x = (xy[0].round().clamp(0.0, (w - 1) as f64)) as usize;
        let y = (xy[1].round().clamp(0.0, (h - 1) as f64)) as usize;
        ids.push(mask.at(y, x));
    }
    let in_bounds = in_bounds_flags(t, coords.in_view(), h, w);
    WarpedMask {
        mask: SegMask::new(coords.height(), coords.width(), ids).expect("shape"),
        in_bounds,
    }
}
