use proptest::prelude::*;

use semdepth::geometry::{project_coords, Intrinsics, Pose6DoF};
use semdepth::guidance::{motion_indicator, select_threshold, uses_masked_branch, ClassSet};
use semdepth::losses::photometric_error_map;
use semdepth::metrics::{evaluate_depth, DepthEvalConfig, SparseDepth};
use semdepth::tensor::{DepthMap, Image, SegMask, Shape, Tensor};

fn field(h: usize, w: usize, v: Vec<f64>) -> Tensor {
    Tensor::from_vec(Shape::plane(h, w), v).unwrap()
}

proptest! {
    #[test]
    fn scaling_depth_and_translation_leaves_coordinates_unchanged(
        depth in proptest::collection::vec(0.5f64..30.0, 12),
        rot in proptest::array::uniform3(-0.2f64..0.2),
        trans in proptest::array::uniform3(-1.0f64..1.0),
        s in 0.1f64..10.0,
    ) {
        let k = Intrinsics::kitti_like(3, 4);
        let pose = Pose6DoF::new(rot, trans);
        let a = project_coords(&DepthMap::new(field(3, 4, depth.clone())).unwrap(), &k, &pose).unwrap();
        let scaled = DepthMap::new(field(3, 4, depth.iter().map(|d| d * s).collect())).unwrap();
        let b = project_coords(&scaled, &k, &pose.with_scaled_translation(s)).unwrap();
        for (x, y) in a.tensor().data().iter().zip(b.tensor().data()) {
            prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
        }
    }

    #[test]
    fn threshold_passes_the_requested_share(
        values in proptest::collection::vec(0.0f64..=1.0, 1..30),
        epsilon in 0.0f64..=1.0,
    ) {
        let theta = select_threshold(&values, epsilon).unwrap();
        let passing = values.iter().filter(|&&v| !uses_masked_branch(v, theta)).count();
        let wanted = (epsilon * values.len() as f64 - 1e-9).ceil().max(0.0) as usize;
        prop_assert!(passing >= wanted);
        // Frames that pass are never below a frame that does not.
        let lowest_pass = values.iter().filter(|&&v| v >= theta).fold(f64::INFINITY, |a, &b| a.min(b));
        let highest_fail = values.iter().filter(|&&v| v < theta).fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        prop_assert!(highest_fail < lowest_pass);
        if wanted == 0 {
            prop_assert_eq!(passing, 0);
        }
    }

    #[test]
    fn motion_indicator_is_symmetric_and_bounded(
        a in proptest::collection::vec(0u8..20, 24),
        b in proptest::collection::vec(0u8..20, 24),
    ) {
        let classes = ClassSet::cityscapes();
        let (ma, mb) = (SegMask::new(4, 6, a).unwrap(), SegMask::new(4, 6, b).unwrap());
        let ab = motion_indicator(&ma, &mb, None, &classes).unwrap();
        let ba = motion_indicator(&mb, &ma, None, &classes).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn photometric_error_is_symmetric_and_non_negative(
        a in proptest::collection::vec(0.0f64..1.0, 60),
        b in proptest::collection::vec(0.0f64..1.0, 60),
        alpha in 0.0f64..=1.0,
    ) {
        let img = |v: Vec<f64>| Image::new(Tensor::from_vec(Shape::new(4, 5, 3), v).unwrap()).unwrap();
        let (x, y) = (img(a), img(b));
        let e1 = photometric_error_map(&x, &y, alpha).unwrap();
        let e2 = photometric_error_map(&y, &x, alpha).unwrap();
        for (p, q) in e1.tensor().data().iter().zip(e2.tensor().data()) {
            prop_assert!((p - q).abs() < 1e-12);
            prop_assert!(*p >= -1e-12);
        }
    }

    #[test]
    fn median_scaled_metrics_ignore_the_prediction_scale(
        gt in proptest::collection::vec(1.0f64..50.0, 10),
        pred in proptest::collection::vec(1.0f64..50.0, 10),
        c in 0.01f64..100.0,
    ) {
        let gt = SparseDepth::from_dense(field(2, 5, gt)).unwrap();
        let p1 = DepthMap::new(field(2, 5, pred.clone())).unwrap();
        let p2 = DepthMap::new(field(2, 5, pred.iter().map(|v| v * c).collect())).unwrap();
        let cfg = DepthEvalConfig::default();
        let (r1, r2) = (evaluate_depth(&p1, &gt, &cfg).unwrap(), evaluate_depth(&p2, &gt, &cfg).unwrap());
        for (x, y) in r1.values().iter().zip(r2.values()) {
            prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
        }
    }
}
