//! Dynamic-class masking, the motion indicator and the static-frame threshold.

use crate::error::{invalid, Error, Result};
use crate::tensor::{BinaryMask, SegMask};
use crate::warp::WarpedMask;

/// Class IDs of the Cityscapes human and vehicle categories (train IDs).
pub const CITYSCAPES_DC_IDS: [u8; 8] = [11, 12, 13, 14, 15, 16, 17, 18];
pub const CITYSCAPES_CLASSES: usize = 19;

/// A class vocabulary with the subset of potentially dynamic classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassSet {
    classes: usize,
    dc_ids: Vec<u8>,
    lookup: Vec<bool>,
}

impl ClassSet {
    pub fn new(classes: usize, dc_ids: &[u8]) -> Result<Self> {
        if classes == 0 || classes > 255 {
            return invalid(format!("class count {classes} outside 1..=255"));
        }
        let mut lookup = vec![false; 256];
        for &id in dc_ids {
            if id as usize >= classes {
                return invalid(format!("dynamic class {id} is not below the class count {classes}"));
            }
            lookup[id as usize] = true;
        }
        let dc_ids = (0..=255u8).filter(|&i| lookup[i as usize]).collect();
        Ok(Self {
            classes,
            dc_ids,
            lookup,
        })
    }

    pub fn cityscapes() -> Self {
        Self::new(CITYSCAPES_CLASSES, &CITYSCAPES_DC_IDS).expect("static class set")
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dc_ids(&self) -> &[u8] {
        &self.dc_ids
    }

    #[inline]
    pub fn is_dc(&self, id: u8) -> bool {
        self.lookup[id as usize]
    }

    /// Guidance only does something when at least one class is dynamic.
    pub fn is_active(&self) -> bool {
        !self.dc_ids.is_empty()
    }
}

impl Default for ClassSet {
    fn default() -> Self {
        Self::cityscapes()
    }
}

fn check_size(m: &SegMask, other: &SegMask) -> Result<()> {
    if !other.same_size(m.height(), m.width()) {
        return invalid(format!(
            "mask sizes differ: {}x{} vs {}x{}",
            m.height(),
            m.width(),
            other.height(),
            other.width()
        ));
    }
    Ok(())
}

/// μ: 1 where neither the target mask nor any in-bounds warped mask shows a dynamic class.
pub fn dc_mask(m_t: &SegMask, warped: &[WarpedMask], classes: &ClassSet) -> Result<BinaryMask> {
    for w in warped {
        check_size(m_t, &w.mask)?;
    }
    let bits = (0..m_t.ids().len())
        .map(|i| {
            !classes.is_dc(m_t.ids()[i]) && warped.iter().all(|w| !(w.in_bounds[i] && classes.is_dc(w.mask.ids()[i])))
        })
        .collect();
    BinaryMask::new(m_t.height(), m_t.width(), bits)
}

/// Λ: intersection over union of the dynamic-class footprints of two masks.
///
/// Pixels flagged out of bounds are ignored. Without any dynamic pixel the
/// frame counts as static and Λ = 1.
pub fn motion_indicator(m_t: &SegMask, m_warped: &SegMask, in_bounds: Option<&[bool]>, classes: &ClassSet) -> Result<f64> {
    check_size(m_t, m_warped)?;
    if let Some(f) = in_bounds {
        if f.len() != m_t.ids().len() {
            return invalid("in-bounds flags do not match the mask size");
        }
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (i, (&a, &b)) in m_t.ids().iter().zip(m_warped.ids()).enumerate() {
        if in_bounds.is_some_and(|f| !f[i]) {
            continue;
        }
        let (da, db) = (classes.is_dc(a), classes.is_dc(b));
        inter += (da && db) as usize;
        union += (da || db) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Per-neighbor Λ values of one target frame and their arithmetic mean.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionIndicator {
    pub per_neighbor: Vec<f64>,
    pub mean: f64,
}

impl MotionIndicator {
    pub fn new(per_neighbor: Vec<f64>) -> Result<Self> {
        if per_neighbor.is_empty() {
            return invalid("motion indicator needs at least one neighbor");
        }
        if per_neighbor.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return invalid("motion indicator values must lie in [0, 1]");
        }
        let mean = per_neighbor.iter().sum::<f64>() / per_neighbor.len() as f64;
        Ok(Self { per_neighbor, mean })
    }

    /// Λ for each warped neighbor mask against the target mask.
    pub fn compute(m_t: &SegMask, warped: &[WarpedMask], classes: &ClassSet) -> Result<Self> {
        let values = warped
            .iter()
            .map(|w| motion_indicator(m_t, &w.mask, Some(&w.in_bounds), classes))
            .collect::<Result<Vec<_>>>()?;
        Self::new(values)
    }
}

/// Threshold θ such that a fraction of at least ε of the frames has Λ̄ ≥ θ.
///
/// θ is the ⌈εN⌉-th largest indicator, 0 when every frame must pass and
/// just above the maximum when none may.
pub fn select_threshold(indicators: &[f64], epsilon: f64) -> Result<f64> {
    if indicators.is_empty() {
        return invalid("threshold selection needs at least one indicator");
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return invalid(format!("epsilon {epsilon} outside [0, 1]"));
    }
    if indicators.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "select_threshold" });
    }
    let n = indicators.len();
    // Guard against ε·N landing a hair above an integer through rounding.
    let k = ((epsilon * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n);
    let mut sorted = indicators.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(match k {
        0 => sorted[0].max(1.0) + 1e-9,
        k if k == n => 0.0,
        k => sorted[k - 1],
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceConfig {
    /// Fixed static-frame threshold, used when not re-selected from data.
    pub theta: f64,
    /// Fraction of frames trained without the semantic mask.
    pub epsilon: f64,
    pub epoch_start: usize,
    pub epoch_end: usize,
    pub classes: ClassSet,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            theta: 0.5,
            epsilon: 0.0,
            epoch_start: 30,
            epoch_end: 40,
            classes: ClassSet::cityscapes(),
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.theta) || !(0.0..=1.0).contains(&self.epsilon) {
            return invalid("theta and epsilon must lie in [0, 1]");
        }
        if self.epoch_start >= self.epoch_end {
            return invalid(format!(
                "epsilon schedule start {} must precede end {}",
                self.epoch_start, self.epoch_end
            ));
        }
        Ok(())
    }
}

/// ε ramp: zero up to the start anchor, linear to one at the end anchor.
pub fn epsilon_schedule(epoch: usize, config: &GuidanceConfig) -> f64 {
    if epoch <= config.epoch_start {
        return 0.0;
    }
    let span = (config.epoch_end - config.epoch_start) as f64;
    ((epoch - config.epoch_start) as f64 / span).min(1.0)
}

/// True when the frame is treated as dynamic and the masked loss applies.
#[inline]
pub fn uses_masked_branch(lambda_bar: f64, theta: f64) -> bool {
    lambda_bar < theta
}

/// `J_ce + β·J_sm + (J_phm if Λ̄ < θ else J_ph)`.
pub fn total_loss(j_ph: f64, j_phm: f64, j_ce: Option<f64>, j_sm: f64, lambda_bar: f64, theta: f64, beta: f64) -> f64 {
    let photometric = if uses_masked_branch(lambda_bar, theta) { j_phm } else { j_ph };
    j_ce.unwrap_or(0.0) + beta * j_sm + photometric
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unwarped(m: &SegMask) -> WarpedMask {
        WarpedMask {
            mask: m.clone(),
            in_bounds: vec![true; m.ids().len()],
        }
    }

    fn blob(h: usize, w: usize, id: u8, cells: &[(usize, usize)]) -> SegMask {
        let mut m = SegMask::filled(h, w, 0);
        for &(y, x) in cells {
            m.set(y, x, id);
        }
        m
    }

    #[test]
    fn no_dynamic_ids_gives_all_ones() {
        let m = SegMask::filled(4, 5, 2);
        let mu = dc_mask(&m, &[unwarped(&m)], &ClassSet::cityscapes()).unwrap();
        assert_eq!(mu.count(), 20);
    }

    #[test]
    fn target_blob_is_masked() {
        let cells = [(1, 1), (1, 2), (2, 1)];
        let m = blob(4, 5, 13, &cells);
        let empty = SegMask::filled(4, 5, 0);
        let mu = dc_mask(&m, &[unwarped(&empty)], &ClassSet::cityscapes()).unwrap();
        for y in 0..4 {
            for x in 0..5 {
                assert_eq!(mu.at(y, x), !cells.contains(&(y, x)));
            }
        }
    }

    #[test]
    fn shifted_blob_masks_union_of_footprints() {
        let a: Vec<(usize, usize)> = (1..4).flat_map(|y| (1..4).map(move |x| (y, x))).collect();
        let b: Vec<(usize, usize)> = a.iter().map(|&(y, x)| (y + 1, x + 2)).collect();
        let m = blob(6, 7, 11, &a);
        let w = blob(6, 7, 17, &b);
        let mu = dc_mask(&m, &[unwarped(&w)], &ClassSet::cityscapes()).unwrap();
        let union: std::collections::BTreeSet<_> = a.iter().chain(&b).copied().collect();
        for y in 0..6 {
            for x in 0..7 {
                assert_eq!(mu.at(y, x), !union.contains(&(y, x)));
            }
        }
        assert_eq!(mu.count(), 42 - union.len());
    }

    #[test]
    fn out_of_bounds_warped_pixels_are_not_dynamic() {
        let m = SegMask::filled(2, 2, 0);
        let w = WarpedMask {
            mask: SegMask::filled(2, 2, 13),
            in_bounds: vec![false, true, false, true],
        };
        let mu = dc_mask(&m, &[w], &ClassSet::cityscapes()).unwrap();
        assert_eq!(mu.bits(), &[true, false, true, false]);
    }

    #[test]
    fn indicator_examples() {
        let cs = ClassSet::cityscapes();
        let cells: Vec<_> = (0..10).map(|x| (0, x)).collect();
        let m = blob(2, 20, 13, &cells);
        assert_eq!(motion_indicator(&m, &m, None, &cs).unwrap(), 1.0);

        let far: Vec<_> = (10..20).map(|x| (0, x)).collect();
        assert_eq!(motion_indicator(&m, &blob(2, 20, 13, &far), None, &cs).unwrap(), 0.0);

        let shifted: Vec<_> = (4..14).map(|x| (0, x)).collect();
        let inter = cells.iter().filter(|c| shifted.contains(c)).count();
        let union = cells.len() + shifted.len() - inter;
        let l = motion_indicator(&m, &blob(2, 20, 13, &shifted), None, &cs).unwrap();
        assert_eq!((inter, union), (6, 14));
        assert!((l - 6.0 / 14.0).abs() < 1e-15);

        let empty = SegMask::filled(2, 20, 0);
        assert_eq!(motion_indicator(&empty, &empty, None, &cs).unwrap(), 1.0);
    }

    #[test]
    fn indicator_excludes_out_of_bounds() {
        let cs = ClassSet::cityscapes();
        let a = SegMask::new(1, 3, vec![13, 13, 0]).unwrap();
        let b = SegMask::new(1, 3, vec![13, 0, 13]).unwrap();
        let l = motion_indicator(&a, &b, Some(&[true, false, false]), &cs).unwrap();
        assert_eq!(l, 1.0);
    }

    #[test]
    fn threshold_examples() {
        let v = [0.2, 0.5, 0.9, 1.0];
        let theta = select_threshold(&v, 0.5).unwrap();
        assert_eq!(theta, 0.9);
        assert_eq!(v.iter().filter(|&&x| x >= theta).count(), 2);

        let theta = select_threshold(&v, 0.0).unwrap();
        assert!(v.iter().all(|&x| x < theta));
        let theta = select_threshold(&v, 1.0).unwrap();
        assert_eq!(theta, 0.0);
        assert!(v.iter().all(|&x| x >= theta));

        assert!(select_threshold(&[], 0.5).is_err());
        assert!(select_threshold(&v, 1.5).is_err());
    }

    #[test]
    fn schedule_examples() {
        let cfg = GuidanceConfig::default();
        assert_eq!(epsilon_schedule(0, &cfg), 0.0);
        assert_eq!(epsilon_schedule(30, &cfg), 0.0);
        assert_eq!(epsilon_schedule(35, &cfg), 0.5);
        assert_eq!(epsilon_schedule(40, &cfg), 1.0);
        assert_eq!(epsilon_schedule(55, &cfg), 1.0);
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(0.5, 0.2, None, 0.0, 0.3, 0.5, 0.0), 0.2);
        assert_eq!(total_loss(0.5, 0.2, None, 0.0, 0.5, 0.5, 0.0), 0.5);
        let t = total_loss(0.5, 0.1, Some(1.0), 2.0, 0.9, 0.5, 1e-3);
        assert!((t - 1.502).abs() < 1e-15);
    }

    #[test]
    fn class_set_validation() {
        assert!(ClassSet::new(5, &[5]).is_err());
        assert!(!ClassSet::new(5, &[]).unwrap().is_active());
        assert_eq!(ClassSet::cityscapes().dc_ids(), &CITYSCAPES_DC_IDS);
    }

    fn mask_strategy(n: usize) -> impl Strategy<Value = SegMask> {
        proptest::collection::vec(prop_oneof![Just(0u8), Just(3u8), Just(11u8), Just(13u8), Just(17u8)], n)
            .prop_map(|ids| SegMask::new(4, 4, ids).unwrap())
    }

    proptest! {
        #[test]
        fn indicator_is_symmetric_and_relabel_invariant(a in mask_strategy(16), b in mask_strategy(16)) {
            let cs = ClassSet::cityscapes();
            let ab = motion_indicator(&a, &b, None, &cs).unwrap();
            prop_assert_eq!(ab, motion_indicator(&b, &a, None, &cs).unwrap());
            let relabel = |m: &SegMask| {
                let ids = m.ids().iter().map(|&i| match i { 11 => 17, 17 => 13, 13 => 11, o => o }).collect();
                SegMask::new(4, 4, ids).unwrap()
            };
            prop_assert_eq!(ab, motion_indicator(&relabel(&a), &relabel(&b), None, &cs).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn enlarging_dynamic_set_never_unmasks(a in mask_strategy(16), b in mask_strategy(16)) {
            let small = ClassSet::new(19, &[11]).unwrap();
            let large = ClassSet::new(19, &[3, 11, 13]).unwrap();
            let w = [unwarped(&b)];
            let ms = dc_mask(&a, &w, &small).unwrap();
            let ml = dc_mask(&a, &w, &large).unwrap();
            for (s, l) in ms.bits().iter().zip(ml.bits()) {
                prop_assert!(*s || !*l);
            }
        }

        #[test]
        fn threshold_pass_fraction(v in proptest::collection::vec(0.0f64..=1.0, 1..40), eps in 0.0f64..=1.0) {
            let theta = select_threshold(&v, eps).unwrap();
            let n = v.len() as f64;
            let passed = v.iter().filter(|&&x| x >= theta).count() as f64 / n;
            prop_assert!(passed >= eps - 1e-9);
            // Ties at θ can only push the fraction up; distinct values stay within one frame.
            let mut d = v.clone();
            d.sort_by(f64::total_cmp);
            d.dedup();
            if d.len() == v.len() && eps > 0.0 && eps < 1.0 {
                prop_assert!(passed < eps + 1.0 / n + 1e-9);
            }
        }
    }
}
