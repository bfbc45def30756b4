use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Result};
use crate::geometry::{Intrinsics, Pose6DoF};
use crate::losses::{min_error_node, LossConfig};
use crate::optim::DepthActivation;
use crate::tensor::{BinaryMask, Image, ScalarField, Tensor};

/// Size of pyramid level `s` for a `height × width` base.
pub fn level_size(height: usize, width: usize, s: usize) -> (usize, usize) {
    ((height >> s).max(1), (width >> s).max(1))
}

/// Checks that every level halves the previous one.
pub fn check_pyramid(sizes: &[(usize, usize)]) -> Result<()> {
    if sizes.is_empty() {
        return invalid("a pyramid needs at least one level");
    }
    for w in sizes.windows(2) {
        let halves = |a: usize, b: usize| b == a / 2 || b == a.div_ceil(2);
        if !(halves(w[0].0, w[1].0) && halves(w[0].1, w[1].1)) {
            return invalid(format!("level {:?} does not halve {:?}", w[1], w[0]));
        }
    }
    Ok(())
}

/// Per-pixel minimum reprojection error of a full-resolution depth node.
pub fn reprojection_error_node(
    g: &mut Graph,
    depth: Var,
    target: Var,
    sources: &[Var],
    poses: &[Var],
    intrinsics: &Intrinsics,
    cfg: &LossConfig,
) -> Result<Var> {
    if sources.len() != poses.len() {
        return invalid("every source view needs a pose");
    }
    let mut projected = Vec::with_capacity(sources.len());
    for (&src, &pose) in sources.iter().zip(poses) {
        let (coords, in_view) = g.project(depth, pose, intrinsics)?;
        let (p, _) = g.bilinear(src, coords, Some(&in_view))?;
        projected.push(p);
    }
    min_error_node(g, target, &projected, cfg)
}

/// Photometric loss averaged over depth levels, each upsampled to the
/// target resolution first.
///
/// `mask_for` receives each level's error map and returns the per-pixel
/// weights to apply (a constant of the graph), or `None` for no mask.
#[allow(clippy::too_many_arguments)]
pub fn multiscale_photometric_node(
    g: &mut Graph,
    depths: &[Var],
    target: Var,
    sources: &[Var],
    poses: &[Var],
    intrinsics: &Intrinsics,
    cfg: &LossConfig,
    mut mask_for: impl FnMut(&Tensor) -> Option<Tensor>,
) -> Result<Var> {
    let ts = g.shape(target);
    let sizes: Vec<_> = depths.iter().map(|&d| (g.shape(d).height, g.shape(d).width)).collect();
    check_pyramid(&sizes)?;
    let mut total: Option<Var> = None;
    for &d in depths {
        let ds = g.shape(d);
        let full = if (ds.height, ds.width) == (ts.height, ts.width) {
            d
        } else {
            g.upsample(d, ts.height, ts.width)
        };
        let err = reprojection_error_node(g, full, target, sources, poses, intrinsics, cfg)?;
        let weighted = match mask_for(g.value(err)) {
            Some(m) => {
                let m = g.constant(m);
                g.mul(err, m)?
            }
            None => err,
        };
        let level = g.mean(weighted);
        total = Some(match total {
            Some(t) => g.add(t, level)?,
            None => level,
        });
    }
    let total = total.expect("non-empty pyramid");
    Ok(g.scale(total, 1.0 / depths.len() as f64))
}

/// Multi-scale photometric loss of a logit pyramid (level 0 at full resolution).
#[allow(clippy::too_many_arguments)]
pub fn multiscale_photometric(
    levels: &[ScalarField],
    activation: &DepthActivation,
    target: &Image,
    sources: &[Image],
    poses: &[Pose6DoF],
    intrinsics: &Intrinsics,
    cfg: &LossConfig,
    mask: Option<&BinaryMask>,
) -> Result<f64> {
    if sources.len() != poses.len() {
        return invalid("every source view needs a pose");
    }
    if let Some(m) = mask {
        if (m.height(), m.width()) != (target.height(), target.width()) {
            return invalid("mask size differs from the target image");
        }
    }
    let mut g = Graph::new();
    let t = g.constant(target.tensor().clone());
    let srcs: Vec<Var> = sources.iter().map(|s| g.constant(s.tensor().clone())).collect();
    let ps: Vec<Var> = poses.iter().map(|p| g.constant(p.to_tensor())).collect();
    let depths: Vec<Var> = levels
        .iter()
        .map(|l| {
            let v = g.constant(l.tensor().clone());
            g.depth_from_logits(v, activation)
        })
        .collect();
    let mask_t = mask.map(BinaryMask::to_tensor);
    let loss = multiscale_photometric_node(&mut g, &depths, t, &srcs, &ps, intrinsics, cfg, |_| mask_t.clone())?;
    Ok(g.value(loss).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project_coords;
    use crate::losses::photometric_loss;
    use crate::optim::sigmoid_to_depth;
    use crate::synth::preset;
    use crate::warp::bilinear_warp;

    fn setup() -> (crate::synth::SynthTriplet, DepthActivation) {
        (preset("static-street", 5).unwrap().triplet(1).unwrap(), DepthActivation::default())
    }

    fn logits_from(depth: &Tensor, act: &DepthActivation) -> ScalarField {
        ScalarField::new(depth.map(|d| act.logit_for_depth(d).unwrap())).unwrap()
    }

    #[test]
    fn single_level_equals_plain_loss() {
        let (t, act) = setup();
        let level = logits_from(&t.target.depth.tensor().map(|d| d * 0.9), &act);
        let depth = sigmoid_to_depth(&level, &act).unwrap();
        let sources = [t.prev.image.clone(), t.next.image.clone()];
        let projected: Vec<Image> = sources
            .iter()
            .zip(&t.poses)
            .map(|(s, p)| bilinear_warp(s, &project_coords(&depth, &t.intrinsics, p).unwrap()).unwrap().0)
            .collect();
        let plain = photometric_loss(&t.target.image, &projected, 0.85, None).unwrap();
        let ms = multiscale_photometric(&[level], &act, &t.target.image, &sources, &t.poses, &t.intrinsics, &LossConfig::default(), None).unwrap();
        assert!((plain - ms).abs() < 1e-12, "{plain} vs {ms}");
    }

    #[test]
    fn identical_levels_equal_single_scale() {
        let (t, act) = setup();
        let sources = [t.prev.image.clone(), t.next.image.clone()];
        let cfg = LossConfig::default();
        let levels: Vec<ScalarField> = (0..3)
            .map(|s| {
                let (h, w) = level_size(64, 192, s);
                ScalarField::new(Tensor::filled(crate::tensor::Shape::plane(h, w), act.logit_for_depth(9.0).unwrap())).unwrap()
            })
            .collect();
        let single = multiscale_photometric(&levels[..1], &act, &t.target.image, &sources, &t.poses, &t.intrinsics, &cfg, None).unwrap();
        let multi = multiscale_photometric(&levels, &act, &t.target.image, &sources, &t.poses, &t.intrinsics, &cfg, None).unwrap();
        assert!((single - multi).abs() < 1e-12);
    }

    #[test]
    fn two_levels_average_their_losses() {
        let (t, act) = setup();
        let sources = [t.prev.image.clone(), t.next.image.clone()];
        let cfg = LossConfig::default();
        let fine = logits_from(t.target.depth.tensor(), &act);
        let coarse_depth = crate::autodiff::resize_forward(t.target.depth.tensor(), 32, 96).map(|d| d * 1.1);
        let coarse = logits_from(&coarse_depth, &act);
        let up = crate::autodiff::resize_forward(&coarse_depth, 64, 192);
        let up_logits = logits_from(&up, &act);
        let l0 = multiscale_photometric(&[fine.clone()], &act, &t.target.image, &sources, &t.poses, &t.intrinsics, &cfg, None).unwrap();
        let l1 = multiscale_photometric(&[up_logits], &act, &t.target.image, &sources, &t.poses, &t.intrinsics, &cfg, None).unwrap();
        let both = multiscale_photometric(&[fine, coarse], &act, &t.target.image, &sources, &t.poses, &t.intrinsics, &cfg, None).unwrap();
        // The coarse depth round-trips through logits, so only rounding differs.
        assert!((both - 0.5 * (l0 + l1)).abs() < 1e-9, "{both} vs {}", 0.5 * (l0 + l1));
    }

    #[test]
    fn pyramid_shape_is_checked() {
        assert!(check_pyramid(&[(64, 192), (32, 96), (16, 48)]).is_ok());
        assert!(check_pyramid(&[(64, 192), (30, 96)]).is_err());
        assert!(check_pyramid(&[(5, 7), (3, 3)]).is_ok());
    }
}
