use std::path::PathBuf;

use semdepth::io::{
    apply_fit_config, parse_key_values, read_depth_png, write_depth_png, write_image_png, write_seg_png, ManifestRecord,
    TripletManifest,
};
use semdepth::metrics::{depth_metrics, SparseDepth};
use semdepth::optim::FitConfig;
use semdepth::synth::preset;

#[test]
fn synthetic_triplet_survives_a_manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let scene = preset("static-street", 4).unwrap();
    let t = scene.triplet(1).unwrap();
    let frames = [&t.prev, &t.target, &t.next];
    for (i, f) in frames.iter().enumerate() {
        write_image_png(&dir.path().join(format!("frame_{i}.png")), &f.image).unwrap();
        write_seg_png(&dir.path().join(format!("seg_{i}.png")), &f.seg).unwrap();
    }
    write_depth_png(&dir.path().join("depth.png"), &t.target.depth).unwrap();
    t.intrinsics.write(&dir.path().join("k.txt")).unwrap();
    let p = |s: &str| PathBuf::from(s);
    let manifest = TripletManifest {
        base: dir.path().to_path_buf(),
        records: vec![ManifestRecord {
            prev: p("frame_0.png"),
            target: p("frame_1.png"),
            next: p("frame_2.png"),
            intrinsics: p("k.txt"),
            seg_prev: Some(p("seg_0.png")),
            seg_target: Some(p("seg_1.png")),
            seg_next: Some(p("seg_2.png")),
            depth: Some(p("depth.png")),
            pose_prev: Some(t.poses[0].to_string()),
            pose_next: Some(t.poses[1].to_string()),
        }],
    };
    let path = dir.path().join("manifest.csv");
    manifest.write(&path).unwrap();
    let loaded = TripletManifest::read(&path).unwrap().load().unwrap();
    assert_eq!(loaded.len(), 1);
    let l = &loaded[0];

    // 8-bit frames, exact masks, depth to the 1/256 m grid, poses to print precision.
    for (a, b) in l.images.iter().zip(frames) {
        let worst = a.tensor().data().iter().zip(b.image.tensor().data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(worst <= 0.5 / 255.0 + 1e-12, "{worst}");
    }
    assert_eq!(l.segs.as_ref().unwrap()[1], t.target.seg);
    let depth = l.depth.as_ref().unwrap();
    let worst = depth.tensor().data().iter().zip(t.target.depth.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst <= 0.5 / 256.0 + 1e-12);
    for (a, b) in l.poses.unwrap().iter().zip(&t.poses) {
        for k in 0..3 {
            assert!((a.rotation[k] - b.rotation[k]).abs() < 1e-12);
            assert!((a.translation[k] - b.translation[k]).abs() < 1e-12);
        }
    }
    assert_eq!(l.intrinsics, t.intrinsics);
}

#[test]
fn stored_depth_evaluates_against_itself_with_zero_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = preset("moving-car", 1).unwrap().render_frame(1).unwrap().depth;
    let path = dir.path().join("d.png");
    write_depth_png(&path, &d).unwrap();
    let gt = read_depth_png(&path).unwrap();
    let pred = semdepth::tensor::DepthMap::new(gt.values().clone()).unwrap();
    let r = depth_metrics(&pred, &SparseDepth::from_depth(&pred)).unwrap();
    assert_eq!(r.abs_rel, 0.0);
    assert_eq!(r.a1, 1.0);
}

#[test]
fn config_file_overrides_defaults_and_rejects_unknown_keys() {
    let mut cfg = FitConfig::default();
    let entries = parse_key_values("# fit\nsteps = 50\nscales = 2\nrotation_scale = 0.5\nsemantic_masking = true\n").unwrap();
    apply_fit_config(&mut cfg, &entries).unwrap();
    assert_eq!((cfg.steps, cfg.loss.scales, cfg.rotation_scale, cfg.semantic_masking), (50, 2, 0.5, true));
    let bad = parse_key_values("stpes = 3").unwrap();
    assert!(apply_fit_config(&mut cfg, &bad).is_err());
}
