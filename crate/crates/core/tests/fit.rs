use semdepth::optim::{fit_depth, FitConfig, FitTriplet, Init};
use semdepth::synth::preset;

fn triplet(name: &str, seed: u64) -> FitTriplet {
    FitTriplet::from_synth(&preset(name, seed).unwrap().triplet(1).unwrap())
}

fn short(steps: usize) -> FitConfig {
    let mut cfg = FitConfig::default();
    cfg.steps = steps;
    cfg.epochs = 4;
    cfg.loss.scales = 2;
    cfg
}

#[test]
fn ground_truth_start_keeps_the_loss_near_zero() {
    let t = triplet("wall", 5);
    let mut cfg = short(60);
    cfg.init = Init::GroundTruth;
    let r = fit_depth(&[t], &cfg).unwrap();
    assert!(r.history[0] < 1e-3, "{}", r.history[0]);
    assert!(r.history.iter().all(|&l| l < 1e-3));
}

#[test]
fn loss_decreases_from_a_constant_start() {
    let r = fit_depth(&[triplet("static-street", 1)], &short(120)).unwrap();
    let first = r.history[0];
    let last = r.history[r.history.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn fitting_is_deterministic() {
    let t = triplet("static-street", 2);
    let mut cfg = short(30);
    cfg.joint = true;
    cfg.semantic_masking = true;
    cfg.seed = 9;
    let a = fit_depth(std::slice::from_ref(&t), &cfg).unwrap();
    let b = fit_depth(&[t], &cfg).unwrap();
    assert_eq!(a, b);
    assert!(a.segmentation.is_some());
}

#[test]
fn masking_switches_off_as_epsilon_reaches_one() {
    let t = triplet("moving-car", 0);
    let mut cfg = short(40);
    cfg.epochs = 40;
    cfg.semantic_masking = true;
    let r = fit_depth(&[t], &cfg).unwrap();
    assert_eq!(r.epochs.len(), 40);
    let first = &r.epochs[0];
    assert_eq!(first.epsilon, 0.0);
    assert!(first.masked[0]);
    let last = r.epochs.last().unwrap();
    assert_eq!(last.epsilon, 1.0);
    assert!(!last.masked[0]);
}

#[test]
fn several_triplets_share_one_schedule() {
    let data = [triplet("static-street", 3), triplet("moving-car", 3)];
    let mut cfg = short(8);
    cfg.semantic_masking = true;
    let r = fit_depth(&data, &cfg).unwrap();
    assert_eq!(r.depths.len(), 2);
    assert_eq!(r.poses.len(), 2);
    let lb = &r.epochs[0].lambda_bar;
    assert!(lb[0] > lb[1], "{lb:?}");
}

#[test]
fn invalid_requests_are_rejected() {
    let t = triplet("static-street", 0);
    let mut cfg = short(10);
    cfg.loss.scales = 7;
    assert!(fit_depth(std::slice::from_ref(&t), &cfg).is_err());

    let mut bare = t.clone();
    bare.poses = None;
    let mut cfg = short(10);
    cfg.freeze_pose = true;
    assert!(fit_depth(&[bare], &cfg).is_err());

    let mut no_seg = t.clone();
    no_seg.segs = None;
    let mut cfg = short(10);
    cfg.semantic_masking = true;
    assert!(fit_depth(&[no_seg], &cfg).is_err());

    let mut cfg = short(10);
    cfg.rotation_scale = 0.0;
    assert!(fit_depth(std::slice::from_ref(&t), &cfg).is_err());
    assert!(fit_depth(&[], &short(10)).is_err());
}
