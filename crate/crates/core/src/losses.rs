//! Photometric, smoothness and cross-entropy losses.
//!
//! Each loss exists as a graph builder (used while fitting, so gradients
//! flow) and as a plain function evaluating the same graph on constants.

use std::sync::Arc;

use crate::autodiff::{Graph, Op, Var};
use crate::error::{invalid, Error, Result};
use crate::tensor::{BinaryMask, DepthMap, Image, ScalarField, SegMask, Shape, Tensor};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Log inputs are clamped from below at this value.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the SSIM term against the absolute difference.
    pub alpha: f64,
    /// Weight of the smoothness term in the total loss.
    pub beta: f64,
    pub c1: f64,
    pub c2: f64,
    pub use_auto_mask: bool,
    /// Number of resolution levels the photometric loss is averaged over.
    pub scales: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.85,
            beta: 1e-3,
            c1: SSIM_C1,
            c2: SSIM_C2,
            use_auto_mask: true,
            scales: 4,
        }
    }
}

impl LossConfig {
    pub fn photometric(&self) -> PhotometricParams {
        PhotometricParams {
            alpha: self.alpha,
            c1: self.c1,
            c2: self.c2,
        }
    }

    pub fn with_alpha(alpha: f64) -> Self {
        Self {
            alpha,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return invalid(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(self.beta >= 0.0) {
            return invalid(format!("beta {} must be non-negative", self.beta));
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return invalid("SSIM constants must be positive");
        }
        if self.scales == 0 {
            return invalid("at least one scale is required");
        }
        Ok(())
    }
}

/// Per-pixel class posteriors, `H×W×S`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassScores(Tensor);

impl ClassScores {
    pub fn new(t: Tensor) -> Result<Self> {
        let s = t.shape();
        for (p, px) in t.data().chunks_exact(s.channels).enumerate() {
            let sum: f64 = px.iter().sum();
            if px.iter().any(|v| !(*v > 0.0)) || (sum - 1.0).abs() > 1e-6 {
                return invalid(format!("scores at pixel {p} are not a positive distribution"));
            }
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn classes(&self) -> usize {
        self.0.shape().channels
    }

    /// Arg-max class per pixel; ties go to the lower class index.
    pub fn argmax(&self) -> SegMask {
        argmax_mask(&self.0)
    }
}

pub(crate) fn argmax_mask(t: &Tensor) -> SegMask {
    let s = t.shape();
    let ids = t
        .data()
        .chunks_exact(s.channels)
        .map(|px| {
            let mut best = 0;
            for (j, v) in px.iter().enumerate() {
                if *v > px[best] {
                    best = j;
                }
            }
            best as u8
        })
        .collect();
    SegMask::new(s.height, s.width, ids).expect("shape")
}

/// Ground-truth class IDs with per-class weights and an ignore ID.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub labels: SegMask,
    pub weights: Vec<f64>,
    pub ignore_id: u8,
}

impl LabelMap {
    pub const DEFAULT_IGNORE: u8 = 255;

    /// Unit weights for `classes` classes.
    pub fn new(labels: SegMask, classes: usize) -> Result<Self> {
        Self::weighted(labels, vec![1.0; classes], Self::DEFAULT_IGNORE)
    }

    pub fn weighted(labels: SegMask, weights: Vec<f64>, ignore_id: u8) -> Result<Self> {
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return invalid("class weights must be non-negative");
        }
        if let Some(id) = labels
            .ids()
            .iter()
            .find(|&&id| id != ignore_id && id as usize >= weights.len())
        {
            return invalid(format!("label {id} is not below the class count {}", weights.len()));
        }
        Ok(Self {
            labels,
            weights,
            ignore_id,
        })
    }

    pub fn classes(&self) -> usize {
        self.weights.len()
    }

    fn valid_count(&self) -> usize {
        self.labels.ids().iter().filter(|&&id| id != self.ignore_id).count()
    }
}

pub(crate) fn cross_entropy_adjoint(scores: &Tensor, labels: &LabelMap, g: f64, gs: &mut [f64]) {
    let c = scores.shape().channels;
    let n = labels.valid_count() as f64;
    for (p, &id) in labels.labels.ids().iter().enumerate() {
        if id == labels.ignore_id {
            continue;
        }
        let k = p * c + id as usize;
        let v = scores.data()[k];
        if v > LOG_CLAMP {
            gs[k] -= g * labels.weights[id as usize] / (n * v);
        }
    }
}

impl Graph {
    /// `−mean_{non-ignored} w_ȳ · log(score of the true class)`.
    pub fn cross_entropy(&mut self, scores: Var, labels: Arc<LabelMap>) -> Result<Var> {
        let ts = self.value(scores);
        let s = ts.shape();
        if !labels.labels.same_size(s.height, s.width) || s.channels != labels.classes() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: s,
                rhs: Shape::new(labels.labels.height(), labels.labels.width(), labels.classes()),
            });
        }
        let n = labels.valid_count();
        if n == 0 {
            return Err(Error::NoValidPixels("cross_entropy"));
        }
        let mut acc = 0.0;
        for (p, &id) in labels.labels.ids().iter().enumerate() {
            if id == labels.ignore_id {
                continue;
            }
            let v = ts.data()[p * s.channels + id as usize];
            acc += labels.weights[id as usize] * v.max(LOG_CLAMP).ln();
        }
        let value = Tensor::scalar(-acc / n as f64);
        Ok(self.push(value, Op::CrossEntropy { scores: scores.0, labels }, &[scores.0]))
    }
}

/// Per-pixel SSIM over 3×3 replicate-padded windows, averaged over channels.
pub fn ssim_node(g: &mut Graph, a: Var, b: Var, c1: f64, c2: f64) -> Result<Var> {
    let mu_a = g.box3(a);
    let mu_b = g.box3(b);
    let aa = g.square(a);
    let bb = g.square(b);
    let ab = g.mul(a, b)?;
    let e_aa = g.box3(aa);
    let e_bb = g.box3(bb);
    let e_ab = g.box3(ab);
    let mu_aa = g.square(mu_a);
    let mu_bb = g.square(mu_b);
    let mu_ab = g.mul(mu_a, mu_b)?;
    let var_a = g.sub(e_aa, mu_aa)?;
    let var_b = g.sub(e_bb, mu_bb)?;
    let cov = g.sub(e_ab, mu_ab)?;

    let l_num = g.scale(mu_ab, 2.0);
    let l_num = g.add_scalar(l_num, c1);
    let c_num = g.scale(cov, 2.0);
    let c_num = g.add_scalar(c_num, c2);
    let num = g.mul(l_num, c_num)?;

    let l_den = g.add(mu_aa, mu_bb)?;
    let l_den = g.add_scalar(l_den, c1);
    let c_den = g.add(var_a, var_b)?;
    let c_den = g.add_scalar(c_den, c2);
    let den = g.mul(l_den, c_den)?;

    let ssim = g.div(num, den)?;
    Ok(g.channel_mean(ssim))
}

/// Constants of the per-pixel photometric error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhotometricParams {
    pub alpha: f64,
    pub c1: f64,
    pub c2: f64,
}

/// Separable 3×3 mean with replicate padding on a `h×w×c` buffer.
fn box3_into(src: &[f64], h: usize, w: usize, c: usize, tmp: &mut [f64], out: &mut [f64]) {
    let third = 1.0 / 3.0;
    let stride = w * c;
    for (row, t) in src.chunks_exact(stride).zip(tmp.chunks_exact_mut(stride)) {
        if w == 1 {
            t.copy_from_slice(row);
            continue;
        }
        for k in c..(w - 1) * c {
            t[k] = (row[k - c] + row[k] + row[k + c]) * third;
        }
        let last = (w - 1) * c;
        for ch in 0..c {
            t[ch] = (2.0 * row[ch] + row[ch + c]) * third;
            t[last + ch] = (row[last - c + ch] + 2.0 * row[last + ch]) * third;
        }
    }
    for y in 0..h {
        let (u, d) = (y.saturating_sub(1), (y + 1).min(h - 1));
        let (tu, tm, td) = (&tmp[u * stride..][..stride], &tmp[y * stride..][..stride], &tmp[d * stride..][..stride]);
        for (k, o) in out[y * stride..][..stride].iter_mut().enumerate() {
            *o = (tu[k] + tm[k] + td[k]) * third;
        }
    }
}

/// Windowed first and second moments of a pair of images.
pub(crate) struct Moments {
    mu_a: Vec<f64>,
    mu_b: Vec<f64>,
    e_aa: Vec<f64>,
    e_bb: Vec<f64>,
    e_ab: Vec<f64>,
}

impl Moments {
    fn new(a: &Tensor, b: &Tensor) -> Self {
        let s = a.shape();
        let (h, w, c, n) = (s.height, s.width, s.channels, s.len());
        let (da, db) = (a.data(), b.data());
        let mut tmp = vec![0.0; n];
        let mut prod = vec![0.0; n];
        let mut filt = |v: &[f64]| {
            let mut out = vec![0.0; n];
            box3_into(v, h, w, c, &mut tmp, &mut out);
            out
        };
        let mu_a = filt(da);
        let mu_b = filt(db);
        prod.iter_mut().zip(da).for_each(|(p, x)| *p = x * x);
        let e_aa = filt(&prod);
        prod.iter_mut().zip(db).for_each(|(p, x)| *p = x * x);
        let e_bb = filt(&prod);
        prod.iter_mut().zip(da.iter().zip(db)).for_each(|(p, (x, y))| *p = x * y);
        let e_ab = filt(&prod);
        Self { mu_a, mu_b, e_aa, e_bb, e_ab }
    }

    /// SSIM at element `k` and its partials w.r.t. (μ_a, μ_b, E_aa, E_bb, E_ab).
    #[inline]
    fn ssim(&self, k: usize, c1: f64, c2: f64) -> (f64, [f64; 5]) {
        let (ma, mb) = (self.mu_a[k], self.mu_b[k]);
        let ln = 2.0 * ma * mb + c1;
        let cn = 2.0 * (self.e_ab[k] - ma * mb) + c2;
        let ld = ma * ma + mb * mb + c1;
        let cd = (self.e_aa[k] - ma * ma) + (self.e_bb[k] - mb * mb) + c2;
        let den = ld * cd;
        let s = ln * cn / den;
        let d_ma = 2.0 * mb * (cn - ln) / den - s * 2.0 * ma * (1.0 / ld - 1.0 / cd);
        let d_mb = 2.0 * ma * (cn - ln) / den - s * 2.0 * mb * (1.0 / ld - 1.0 / cd);
        let d_e = -s / cd;
        (s, [d_ma, d_mb, d_e, d_e, 2.0 * ln / den])
    }
}

/// Per-pixel `(α/2)(1 − SSIM) + (1 − α)|a − b|`, averaged over channels.
pub(crate) fn photometric_forward(a: &Tensor, b: &Tensor, p: PhotometricParams) -> Tensor {
    photometric_with_moments(a, b, p).0
}

/// [`photometric_forward`] together with the moments its adjoint reuses.
pub(crate) fn photometric_with_moments(a: &Tensor, b: &Tensor, p: PhotometricParams) -> (Tensor, Moments) {
    let s = a.shape();
    let c = s.channels;
    let m = Moments::new(a, b);
    let (da, db) = (a.data(), b.data());
    let inv = 1.0 / c as f64;
    let out = (0..s.pixels())
        .map(|px| {
            let mut acc = 0.0;
            for k in px * c..(px + 1) * c {
                let (ssim, _) = m.ssim(k, p.c1, p.c2);
                acc += 0.5 * p.alpha * (1.0 - ssim) + (1.0 - p.alpha) * (da[k] - db[k]).abs();
            }
            acc * inv
        })
        .collect();
    (Tensor::from_vec(s.with_channels(1), out).expect("shape"), m)
}

/// Vector-Jacobian product of [`photometric_forward`] w.r.t. the target
/// (`wrt_target`) or the projected image.
pub(crate) fn photometric_adjoint(
    a: &Tensor,
    b: &Tensor,
    m: &Moments,
    p: PhotometricParams,
    g: &[f64],
    wrt_target: bool,
    out: &mut [f64],
) {
    let s = a.shape();
    let (h, w, c, n) = (s.height, s.width, s.channels, s.len());
    let (da, db) = (a.data(), b.data());
    let inv = 1.0 / c as f64;
    // Gradients w.r.t. the windowed moments of the differentiated image.
    let (mut g_mu, mut g_sq, mut g_cross) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let (i_mu, i_sq) = if wrt_target { (0, 2) } else { (1, 3) };
    let sign = if wrt_target { 1.0 } else { -1.0 };
    for k in 0..n {
        let gp = g[k / c] * inv;
        let (_, d) = m.ssim(k, p.c1, p.c2);
        let gs = -0.5 * p.alpha * gp;
        g_mu[k] = gs * d[i_mu];
        g_sq[k] = gs * d[i_sq];
        g_cross[k] = gs * d[4];
        let diff = da[k] - db[k];
        let dl1 = if diff >= 0.0 { 1.0 } else { -1.0 };
        out[k] += (1.0 - p.alpha) * gp * dl1 * sign;
    }
    // The replicate-padded box filter is symmetric, so it is its own adjoint.
    let mut tmp = vec![0.0; n];
    let (mut b_mu, mut b_sq, mut b_cross) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    box3_into(&g_mu, h, w, c, &mut tmp, &mut b_mu);
    box3_into(&g_sq, h, w, c, &mut tmp, &mut b_sq);
    box3_into(&g_cross, h, w, c, &mut tmp, &mut b_cross);
    let (own, other) = if wrt_target { (da, db) } else { (db, da) };
    for k in 0..n {
        out[k] += b_mu[k] + 2.0 * own[k] * b_sq[k] + other[k] * b_cross[k];
    }
}

impl Graph {
    /// Per-pixel photometric error between two images of equal shape (`H×W×1` output).
    pub fn photometric_error(&mut self, target: Var, projected: Var, params: PhotometricParams) -> Result<Var> {
        let (ta, tb) = (self.value(target), self.value(projected));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape {
                op: "photometric_error",
                lhs: ta.shape(),
                rhs: tb.shape(),
            });
        }
        let (value, moments) = photometric_with_moments(ta, tb, params);
        let op = Op::Photometric {
            target: target.0,
            projected: projected.0,
            params,
            moments: Box::new(moments),
        };
        Ok(self.push(value, op, &[target.0, projected.0]))
    }
}

/// `(α/2)(1 − SSIM) + (1 − α)|target − projected|`, single-channel.
pub fn photometric_error_node(g: &mut Graph, target: Var, projected: Var, cfg: &LossConfig) -> Result<Var> {
    g.photometric_error(target, projected, cfg.photometric())
}

/// Per-pixel minimum of the error maps against every candidate reconstruction.
pub fn min_error_node(g: &mut Graph, target: Var, projected: &[Var], cfg: &LossConfig) -> Result<Var> {
    let (first, rest) = projected
        .split_first()
        .ok_or_else(|| Error::Invalid("photometric loss needs at least one candidate".into()))?;
    let mut best = photometric_error_node(g, target, *first, cfg)?;
    for p in rest {
        let e = photometric_error_node(g, target, *p, cfg)?;
        best = g.min(best, e)?;
    }
    Ok(best)
}

/// Mean over all `H·W` pixels of the (optionally masked) per-pixel minimum error.
///
/// Masked pixels contribute zero but still count in the denominator.
pub fn photometric_loss_node(
    g: &mut Graph,
    target: Var,
    projected: &[Var],
    cfg: &LossConfig,
    mask: Option<Var>,
) -> Result<Var> {
    let best = min_error_node(g, target, projected, cfg)?;
    let masked = match mask {
        Some(m) => g.mul(best, m)?,
        None => best,
    };
    Ok(g.mean(masked))
}

/// Edge weights `exp(−|∂ image|)` (channel-averaged) along height and width.
pub fn edge_weights(image: &Tensor) -> (Tensor, Tensor) {
    let s = image.shape();
    let c = s.channels as f64;
    let wh = Tensor::from_fn(Shape::plane(s.height - 1, s.width), |y, x, _| {
        let d: f64 = (0..s.channels).map(|ch| (image.at(y + 1, x, ch) - image.at(y, x, ch)).abs()).sum();
        (-d / c).exp()
    });
    let ww = Tensor::from_fn(Shape::plane(s.height, s.width - 1), |y, x, _| {
        let d: f64 = (0..s.channels).map(|ch| (image.at(y, x + 1, ch) - image.at(y, x, ch)).abs()).sum();
        (-d / c).exp()
    });
    (wh, ww)
}

/// Edge-aware smoothness of the mean-normalized inverse depth.
pub fn smoothness_node(g: &mut Graph, depth: Var, image: &Tensor) -> Result<Var> {
    let (wh, ww) = edge_weights(image);
    let rho = g.recip(depth);
    let mean = g.mean(rho);
    let norm = g.div(rho, mean)?;
    let dh = g.diff_h(norm);
    let dh = g.abs(dh);
    let dw = g.diff_w(norm);
    let dw = g.abs(dw);
    let wh = g.constant(wh);
    let ww = g.constant(ww);
    let th = g.mul(dh, wh)?;
    let tw = g.mul(dw, ww)?;
    let th = g.mean(th);
    let tw = g.mean(tw);
    g.add(th, tw)
}

fn same_shape(a: &Image, b: &Image, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

/// Per-pixel SSIM map with the default stabilizing constants.
pub fn ssim_map(a: &Image, b: &Image) -> Result<ScalarField> {
    same_shape(a, b, "ssim_map")?;
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.tensor().clone()), g.constant(b.tensor().clone()));
    let s = ssim_node(&mut g, va, vb, SSIM_C1, SSIM_C2)?;
    ScalarField::new(g.value(s).clone())
}

pub fn photometric_error_map(target: &Image, projected: &Image, alpha: f64) -> Result<ScalarField> {
    same_shape(target, projected, "photometric_error_map")?;
    let cfg = LossConfig::with_alpha(alpha);
    let mut g = Graph::new();
    let (t, p) = (g.constant(target.tensor().clone()), g.constant(projected.tensor().clone()));
    let e = photometric_error_node(&mut g, t, p, &cfg)?;
    ScalarField::new(g.value(e).clone())
}

fn min_error_map(target: &Image, candidates: &[Image], cfg: &LossConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let t = g.constant(target.tensor().clone());
    let mut vars = Vec::with_capacity(candidates.len());
    for c in candidates {
        same_shape(target, c, "photometric_loss")?;
        vars.push(g.constant(c.tensor().clone()));
    }
    let e = min_error_node(&mut g, t, &vars, cfg)?;
    Ok(g.value(e).clone())
}

/// Mean over all pixels of the masked per-pixel minimum reprojection error.
pub fn photometric_loss(target: &Image, projected: &[Image], alpha: f64, pixel_mask: Option<&BinaryMask>) -> Result<f64> {
    let best = min_error_map(target, projected, &LossConfig::with_alpha(alpha))?;
    let n = best.data().len() as f64;
    let total: f64 = match pixel_mask {
        Some(m) => {
            if !(m.height() == target.height() && m.width() == target.width()) {
                return invalid("pixel mask size differs from the image");
            }
            best.data().iter().zip(m.bits()).map(|(e, &keep)| if keep { *e } else { 0.0 }).sum()
        }
        None => best.data().iter().sum(),
    };
    Ok(total / n)
}

/// Keeps pixels whose best reprojection beats every unwarped source.
pub fn auto_mask(target: &Image, sources: &[Image], projected: &[Image], alpha: f64) -> Result<BinaryMask> {
    if sources.len() != projected.len() {
        return invalid("sources and projections must be aligned");
    }
    let cfg = LossConfig::with_alpha(alpha);
    let warped = min_error_map(target, projected, &cfg)?;
    let identity = min_error_map(target, sources, &cfg)?;
    auto_mask_from_errors(&warped, &identity)
}

pub(crate) fn auto_mask_from_errors(warped: &Tensor, identity: &Tensor) -> Result<BinaryMask> {
    let s = warped.shape();
    let bits = warped.data().iter().zip(identity.data()).map(|(w, i)| w <= i).collect();
    BinaryMask::new(s.height, s.width, bits)
}

pub fn smoothness_loss(depth: &DepthMap, image: &Image) -> Result<f64> {
    if depth.height() != image.height() || depth.width() != image.width() {
        return invalid("depth and image sizes differ");
    }
    // DepthMap already guarantees positivity.
    let mut g = Graph::new();
    let d = g.constant(depth.tensor().clone());
    let s = smoothness_node(&mut g, d, image.tensor())?;
    Ok(g.value(s).item())
}

pub fn cross_entropy_loss(scores: &ClassScores, labels: &LabelMap) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(scores.tensor().clone());
    let l = g.cross_entropy(s, Arc::new(labels.clone()))?;
    Ok(g.value(l).item())
}
