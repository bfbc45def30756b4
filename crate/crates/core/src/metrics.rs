//! Depth and segmentation evaluation.

use std::io::Write;

use crate::error::{invalid, Error, Result};
use crate::tensor::{BinaryMask, DepthMap, SegMask, Tensor};

/// Ground-truth depth with a validity mask (sparse LiDAR-style data).
#[derive(Clone, Debug, PartialEq)]
pub struct SparseDepth {
    values: Tensor,
    valid: BinaryMask,
}

impl SparseDepth {
    pub fn new(values: Tensor, valid: BinaryMask) -> Result<Self> {
        let s = values.shape();
        if s.channels != 1 || s.height != valid.height() || s.width != valid.width() {
            return invalid("ground-truth depth and validity mask disagree in shape");
        }
        let bad = values.data().iter().zip(valid.bits()).any(|(v, &ok)| ok && !(v.is_finite() && *v > 0.0));
        if bad {
            return invalid("valid ground-truth depth must be positive and finite");
        }
        Ok(Self { values, valid })
    }

    /// Treats every non-positive or non-finite value as missing.
    pub fn from_dense(values: Tensor) -> Result<Self> {
        let s = values.shape();
        let bits = values.data().iter().map(|v| v.is_finite() && *v > 0.0).collect();
        Self::new(values, BinaryMask::new(s.height, s.width, bits)?)
    }

    pub fn from_depth(depth: &DepthMap) -> Self {
        Self {
            values: depth.tensor().clone(),
            valid: BinaryMask::filled(depth.height(), depth.width(), true),
        }
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn valid(&self) -> &BinaryMask {
        &self.valid
    }

    pub fn height(&self) -> usize {
        self.valid.height()
    }

    pub fn width(&self) -> usize {
        self.valid.width()
    }

    /// Restricts validity to `mask`.
    pub fn restricted(&self, mask: &BinaryMask) -> Result<Self> {
        Ok(Self {
            values: self.values.clone(),
            valid: self.valid.and(mask)?,
        })
    }

    fn pairs<'a>(&'a self, pred: &'a Tensor) -> impl Iterator<Item = (f64, f64)> + 'a {
        pred.data()
            .iter()
            .zip(self.values.data())
            .zip(self.valid.bits())
            .filter(|(_, &ok)| ok)
            .map(|((&p, &g), _)| (p, g))
    }
}

fn check_pair(pred: &Tensor, gt: &SparseDepth, op: &'static str) -> Result<usize> {
    let s = pred.shape();
    if s.channels != 1 || s.height != gt.height() || s.width != gt.width() {
        return Err(Error::Shape {
            op,
            lhs: s,
            rhs: gt.values.shape(),
        });
    }
    let n = gt.valid.count();
    if n == 0 {
        return Err(Error::NoValidPixels(op));
    }
    if gt.pairs(pred).any(|(p, _)| !(p.is_finite() && p > 0.0)) {
        return invalid(format!("{op}: prediction must be positive at valid pixels"));
    }
    Ok(n)
}

/// Error and accuracy measures over the valid pixels of one image.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub silog: f64,
    pub irmse: f64,
}

impl MetricReport {
    pub const COLUMNS: [&'static str; 9] = ["abs_rel", "sq_rel", "rmse", "rmse_log", "a1", "a2", "a3", "silog", "irmse"];

    pub fn values(&self) -> [f64; 9] {
        [self.abs_rel, self.sq_rel, self.rmse, self.rmse_log, self.a1, self.a2, self.a3, self.silog, self.irmse]
    }

    fn from_values(v: [f64; 9]) -> Self {
        Self {
            abs_rel: v[0],
            sq_rel: v[1],
            rmse: v[2],
            rmse_log: v[3],
            a1: v[4],
            a2: v[5],
            a3: v[6],
            silog: v[7],
            irmse: v[8],
        }
    }

    /// Column-wise mean.
    pub fn mean(reports: &[MetricReport]) -> Result<Self> {
        if reports.is_empty() {
            return invalid("cannot average an empty report list");
        }
        let mut acc = [0.0; 9];
        for r in reports {
            acc.iter_mut().zip(r.values()).for_each(|(a, v)| *a += v);
        }
        Ok(Self::from_values(acc.map(|a| a / reports.len() as f64)))
    }
}

/// Abs Rel, Sq Rel, RMSE, RMSE log and the δ accuracies, plus SILog and iRMSE.
pub fn depth_metrics(pred: &DepthMap, gt: &SparseDepth) -> Result<MetricReport> {
    let n = check_pair(pred, gt, "depth_metrics")? as f64;
    let mut acc = [0.0; 7];
    for (p, g) in gt.pairs(pred) {
        let ratio = (g / p).max(p / g);
        let lg = g.ln() - p.ln();
        acc[0] += (g - p).abs() / g;
        acc[1] += (g - p).powi(2) / g;
        acc[2] += (g - p).powi(2);
        acc[3] += lg * lg;
        acc[4] += f64::from(u8::from(ratio < 1.25));
        acc[5] += f64::from(u8::from(ratio < 1.25f64.powi(2)));
        acc[6] += f64::from(u8::from(ratio < 1.25f64.powi(3)));
    }
    let (silog, irmse) = silog_irmse(pred, gt)?;
    Ok(MetricReport {
        abs_rel: acc[0] / n,
        sq_rel: acc[1] / n,
        rmse: (acc[2] / n).sqrt(),
        rmse_log: (acc[3] / n).sqrt(),
        a1: acc[4] / n,
        a2: acc[5] / n,
        a3: acc[6] / n,
        silog,
        irmse,
    })
}

/// Scale-invariant log error `mean(Δ²) − mean(Δ)²` and RMSE of inverse depth.
pub fn silog_irmse(pred: &DepthMap, gt: &SparseDepth) -> Result<(f64, f64)> {
    let n = check_pair(pred, gt, "silog_irmse")? as f64;
    let (mut s1, mut s2, mut inv) = (0.0, 0.0, 0.0);
    for (p, g) in gt.pairs(pred) {
        let d = p.ln() - g.ln();
        s1 += d;
        s2 += d * d;
        inv += (1.0 / p - 1.0 / g).powi(2);
    }
    let mean = s1 / n;
    Ok(((s2 / n - mean * mean).max(0.0), (inv / n).sqrt()))
}

/// Median with the mean-of-middle convention for even counts.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return invalid("median of an empty list");
    }
    if values.iter().any(|v| v.is_nan()) {
        return invalid("median of a list containing NaN");
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Ok(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// `median(gt / pred)` over valid pixels.
pub fn median_scale(pred: &DepthMap, gt: &SparseDepth) -> Result<f64> {
    check_pair(pred, gt, "median_scale")?;
    let ratios: Vec<f64> = gt.pairs(pred).map(|(p, g)| g / p).collect();
    median(&ratios)
}

/// Dataset-level factor: the median over per-image factors.
pub fn global_scale(factors: &[f64]) -> Result<f64> {
    median(factors)
}

/// Evaluation rectangle as fractions of the image height and width.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropRect {
    pub top: f64,
    pub bottom: f64,
    pub left: f64,
    pub right: f64,
}

impl CropRect {
    /// The crop of Garg et al., the common choice for the Eigen split.
    pub const GARG: CropRect = CropRect {
        top: 0.408_108_11,
        bottom: 0.991_891_89,
        left: 0.035_947_71,
        right: 0.964_052_29,
    };

    /// The crop of Eigen et al.
    pub const EIGEN: CropRect = CropRect {
        top: 0.324_324_3,
        bottom: 0.913_513_51,
        left: 0.035_947_7,
        right: 0.964_052_29,
    };

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "garg" => Ok(Self::GARG),
            "eigen" => Ok(Self::EIGEN),
            other => invalid(format!("unknown crop preset `{other}` (expected garg or eigen)")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |a: f64, b: f64| (0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b) && a < b;
        if !(ok(self.top, self.bottom) && ok(self.left, self.right)) {
            return invalid("crop must satisfy 0 <= top < bottom <= 1 and 0 <= left < right <= 1");
        }
        Ok(())
    }

    /// Pixel bounds `(y0, y1, x0, x1)`, half-open.
    pub fn pixels(&self, height: usize, width: usize) -> (usize, usize, usize, usize) {
        let at = |f: f64, n: usize| ((f * n as f64) as usize).min(n);
        (at(self.top, height), at(self.bottom, height), at(self.left, width), at(self.right, width))
    }

    pub fn mask(&self, height: usize, width: usize) -> BinaryMask {
        let (y0, y1, x0, x1) = self.pixels(height, width);
        let bits = (0..height * width)
            .map(|k| {
                let (y, x) = (k / width, k % width);
                (y0..y1).contains(&y) && (x0..x1).contains(&x)
            })
            .collect();
        BinaryMask::new(height, width, bits).expect("size matches")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Scaling {
    None,
    #[default]
    MedianPerImage,
    /// One factor for the whole set: the median of the per-image factors.
    GlobalFactor,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DepthEvalConfig {
    pub scaling: Scaling,
    pub crop: Option<CropRect>,
    /// Clamp scaled predictions to this range before computing metrics.
    pub clamp: Option<(f64, f64)>,
}

impl DepthEvalConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(c) = &self.crop {
            c.validate()?;
        }
        if let Some((lo, hi)) = self.clamp {
            if !(lo > 0.0 && lo < hi) {
                return invalid("clamp range must satisfy 0 < min < max");
            }
        }
        Ok(())
    }
}

fn evaluation_region(gt: &SparseDepth, cfg: &DepthEvalConfig) -> Result<SparseDepth> {
    match &cfg.crop {
        Some(c) => gt.restricted(&c.mask(gt.height(), gt.width())),
        None => Ok(gt.clone()),
    }
}

fn scaled_prediction(pred: &DepthMap, factor: f64, clamp: Option<(f64, f64)>) -> Result<DepthMap> {
    DepthMap::new(pred.tensor().map(|p| {
        let v = p * factor;
        match clamp {
            Some((lo, hi)) => v.clamp(lo, hi),
            None => v,
        }
    }))
}

/// Evaluates a set of predictions, returning one report per image.
pub fn evaluate_depth_set(pairs: &[(&DepthMap, &SparseDepth)], cfg: &DepthEvalConfig) -> Result<Vec<MetricReport>> {
    cfg.validate()?;
    let regions = pairs.iter().map(|(_, g)| evaluation_region(g, cfg)).collect::<Result<Vec<_>>>()?;
    let factors = match cfg.scaling {
        Scaling::None => vec![1.0; pairs.len()],
        Scaling::MedianPerImage => pairs.iter().zip(&regions).map(|((p, _), g)| median_scale(p, g)).collect::<Result<_>>()?,
        Scaling::GlobalFactor => {
            let per_image = pairs.iter().zip(&regions).map(|((p, _), g)| median_scale(p, g)).collect::<Result<Vec<_>>>()?;
            vec![global_scale(&per_image)?; pairs.len()]
        }
    };
    pairs
        .iter()
        .zip(&regions)
        .zip(factors)
        .map(|(((p, _), g), f)| depth_metrics(&scaled_prediction(p, f, cfg.clamp)?, g))
        .collect()
}

pub fn evaluate_depth(pred: &DepthMap, gt: &SparseDepth, cfg: &DepthEvalConfig) -> Result<MetricReport> {
    Ok(evaluate_depth_set(&[(pred, gt)], cfg)?.remove(0))
}

/// Writes an `image` column, the metric columns, and a final `mean` row.
pub fn write_metrics_csv<W: Write>(out: W, rows: &[(String, MetricReport)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["image"];
    header.extend(MetricReport::COLUMNS);
    w.write_record(&header)?;
    let fmt = |name: &str, r: &MetricReport| {
        let mut rec = vec![name.to_string()];
        rec.extend(r.values().iter().map(|v| format!("{v:.6}")));
        rec
    };
    for (name, r) in rows {
        w.write_record(fmt(name, r))?;
    }
    let reports: Vec<MetricReport> = rows.iter().map(|(_, r)| *r).collect();
    if !reports.is_empty() {
        w.write_record(fmt("mean", &MetricReport::mean(&reports)?))?;
    }
    w.flush()?;
    Ok(())
}

/// Running per-class true positive, false positive and false negative counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionAccumulator {
    tp: Vec<u64>,
    fp: Vec<u64>,
    fn_: Vec<u64>,
    ignore_id: Option<u8>,
}

impl ConfusionAccumulator {
    pub fn new(classes: usize, ignore_id: Option<u8>) -> Result<Self> {
        if classes == 0 || classes > 255 {
            return invalid("class count must be in 1..=255");
        }
        Ok(Self {
            tp: vec![0; classes],
            fp: vec![0; classes],
            fn_: vec![0; classes],
            ignore_id,
        })
    }

    pub fn classes(&self) -> usize {
        self.tp.len()
    }

    /// Accumulates one prediction against its labels; ignored labels are skipped.
    pub fn add(&mut self, pred: &SegMask, gt: &SegMask) -> Result<()> {
        if !pred.same_size(gt.height(), gt.width()) {
            return invalid("prediction and label sizes differ");
        }
        let k = self.classes();
        for (&p, &g) in pred.ids().iter().zip(gt.ids()) {
            if Some(g) == self.ignore_id {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= k || g >= k {
                return invalid(format!("class id {} outside 0..{k}", p.max(g)));
            }
            if p == g {
                self.tp[g] += 1;
            } else {
                self.fp[p] += 1;
                self.fn_[g] += 1;
            }
        }
        Ok(())
    }

    /// Adds raw counts for one class.
    pub fn add_counts(&mut self, class: usize, tp: u64, fp: u64, fn_: u64) -> Result<()> {
        if class >= self.classes() {
            return invalid(format!("class {class} outside 0..{}", self.classes()));
        }
        self.tp[class] += tp;
        self.fp[class] += fp;
        self.fn_[class] += fn_;
        Ok(())
    }

    pub fn tp(&self) -> &[u64] {
        &self.tp
    }

    pub fn fp(&self) -> &[u64] {
        &self.fp
    }

    pub fn fn_counts(&self) -> &[u64] {
        &self.fn_
    }
}

/// Mean IoU over observed classes, with per-class IoU (`None` when unobserved).
pub fn miou(acc: &ConfusionAccumulator) -> Result<(f64, Vec<Option<f64>>)> {
    let per_class: Vec<Option<f64>> = (0..acc.classes())
        .map(|c| {
            let den = acc.tp[c] + acc.fp[c] + acc.fn_[c];
            (den > 0).then(|| acc.tp[c] as f64 / den as f64)
        })
        .collect();
    let observed: Vec<f64> = per_class.iter().flatten().copied().collect();
    if observed.is_empty() {
        return Err(Error::NoValidPixels("miou"));
    }
    Ok((observed.iter().sum::<f64>() / observed.len() as f64, per_class))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use proptest::prelude::*;

    fn depth(v: &[f64]) -> DepthMap {
        DepthMap::new(Tensor::from_vec(Shape::plane(1, v.len()), v.to_vec()).unwrap()).unwrap()
    }

    fn gt(v: &[f64]) -> SparseDepth {
        SparseDepth::from_dense(Tensor::from_vec(Shape::plane(1, v.len()), v.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let d = depth(&[1.0, 2.0, 7.5]);
        let r = depth_metrics(&d, &SparseDepth::from_depth(&d)).unwrap();
        assert_eq!(r.abs_rel, 0.0);
        assert_eq!(r.rmse, 0.0);
        assert_eq!((r.a1, r.a2, r.a3), (1.0, 1.0, 1.0));
        assert_eq!(r.silog, 0.0);
        assert_eq!(r.irmse, 0.0);
    }

    #[test]
    fn single_pixel_double() {
        let r = depth_metrics(&depth(&[2.0]), &gt(&[1.0])).unwrap();
        assert_eq!(r.abs_rel, 1.0);
        assert_eq!(r.sq_rel, 1.0);
        assert_eq!(r.rmse, 1.0);
        assert!((r.rmse_log - 2f64.ln()).abs() < 1e-15);
        assert_eq!((r.a1, r.a2, r.a3), (0.0, 0.0, 0.0));
    }

    #[test]
    fn two_pixel_silog_irmse() {
        let (s, i) = silog_irmse(&depth(&[1.0, 4.0]), &gt(&[1.0, 1.0])).unwrap();
        assert!((s - 4f64.ln().powi(2) / 4.0).abs() < 1e-15);
        assert!((i - (0.75f64.powi(2) / 2.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn invalid_pixels_are_ignored() {
        let r = depth_metrics(&depth(&[1.0, 50.0]), &gt(&[1.0, 0.0])).unwrap();
        assert_eq!(r.abs_rel, 0.0);
        assert!(matches!(depth_metrics(&depth(&[1.0]), &gt(&[0.0])), Err(Error::NoValidPixels(_))));
    }

    #[test]
    fn scaling_examples() {
        let g = gt(&[2.0, 4.0, 6.0]);
        assert_eq!(median_scale(&depth(&[1.0, 2.0, 3.0]), &g).unwrap(), 2.0);
        assert_eq!(global_scale(&[1.0, 2.0, 3.0]).unwrap(), 2.0);
        assert_eq!(global_scale(&[1.0, 3.0]).unwrap(), 2.0);
        assert!(global_scale(&[]).is_err());
    }

    #[test]
    fn miou_examples() {
        let mut acc = ConfusionAccumulator::new(2, None).unwrap();
        acc.add_counts(0, 6, 2, 2).unwrap();
        let (m, per) = miou(&acc).unwrap();
        assert!((m - 0.6).abs() < 1e-15);
        assert_eq!(per[1], None);
        assert!(miou(&ConfusionAccumulator::new(3, None).unwrap()).is_err());

        let labels = SegMask::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        let mut perfect = ConfusionAccumulator::new(2, None).unwrap();
        perfect.add(&labels, &labels).unwrap();
        assert_eq!(miou(&perfect).unwrap().0, 1.0);
    }

    #[test]
    fn accumulation_differs_from_per_image_average() {
        // One image predicts a rare class badly, the other predicts it perfectly.
        let g1 = SegMask::new(1, 4, vec![0, 0, 0, 1]).unwrap();
        let p1 = SegMask::new(1, 4, vec![0, 0, 0, 0]).unwrap();
        let g2 = SegMask::new(1, 4, vec![1, 1, 1, 1]).unwrap();
        let p2 = g2.clone();
        let mut total = ConfusionAccumulator::new(2, None).unwrap();
        total.add(&p1, &g1).unwrap();
        total.add(&p2, &g2).unwrap();
        let per_image: Vec<f64> = [(&p1, &g1), (&p2, &g2)]
            .iter()
            .map(|(p, g)| {
                let mut a = ConfusionAccumulator::new(2, None).unwrap();
                a.add(p, g).unwrap();
                miou(&a).unwrap().0
            })
            .collect();
        let averaged = (per_image[0] + per_image[1]) / 2.0;
        let accumulated = miou(&total).unwrap().0;
        assert!((accumulated - averaged).abs() > 0.05);
    }

    #[test]
    fn ignore_label_is_skipped() {
        let mut acc = ConfusionAccumulator::new(2, Some(255)).unwrap();
        acc.add(&SegMask::new(1, 2, vec![0, 1]).unwrap(), &SegMask::new(1, 2, vec![0, 255]).unwrap()).unwrap();
        assert_eq!(acc.tp(), &[1, 0]);
        assert_eq!(acc.fp(), &[0, 0]);
        assert!(acc.add(&SegMask::new(1, 1, vec![0]).unwrap(), &SegMask::new(1, 1, vec![7]).unwrap()).is_err());
    }

    #[test]
    fn crop_presets_are_valid_and_restrict() {
        for c in [CropRect::GARG, CropRect::EIGEN] {
            c.validate().unwrap();
            let m = c.mask(192, 640);
            assert!(m.count() > 0 && m.count() < 192 * 640);
        }
        assert!(CropRect { top: 0.5, bottom: 0.4, left: 0.0, right: 1.0 }.validate().is_err());
        assert!(CropRect::preset("nope").is_err());
    }

    #[test]
    fn clamp_limits_prediction() {
        let cfg = DepthEvalConfig {
            scaling: Scaling::None,
            crop: None,
            clamp: Some((0.5, 2.0)),
        };
        let r = evaluate_depth(&depth(&[10.0]), &gt(&[2.0]), &cfg).unwrap();
        assert_eq!(r.abs_rel, 0.0);
    }

    #[test]
    fn csv_has_expected_columns_and_mean_row() {
        let r = MetricReport {
            abs_rel: 0.5,
            ..Default::default()
        };
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &[("a".into(), r), ("b".into(), MetricReport::default())]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "image,abs_rel,sq_rel,rmse,rmse_log,a1,a2,a3,silog,irmse");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("mean,0.250000,"));
    }

    proptest! {
        #[test]
        fn metric_properties(
            pairs in proptest::collection::vec((0.1f64..80.0, 0.1f64..80.0), 1..40),
            c in 0.05f64..20.0,
        ) {
            let (p, g): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let (pred, truth) = (depth(&p), gt(&g));
            let r = depth_metrics(&pred, &truth).unwrap();
            prop_assert!(r.abs_rel >= 0.0 && r.sq_rel >= 0.0);
            prop_assert!(0.0 <= r.a1 && r.a1 <= r.a2 && r.a2 <= r.a3 && r.a3 <= 1.0);
            let scaled = depth(&p.iter().map(|v| v * c).collect::<Vec<_>>());
            let (s0, _) = silog_irmse(&pred, &truth).unwrap();
            let (s1, _) = silog_irmse(&scaled, &truth).unwrap();
            prop_assert!((s0 - s1).abs() < 1e-10);
            let m0 = median_scale(&pred, &truth).unwrap();
            let m1 = median_scale(&scaled, &truth).unwrap();
            prop_assert!((m1 - m0 / c).abs() <= 1e-10 * m0.abs().max(1.0));
        }
    }
}
