use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{resize_forward, GradientSet, Graph, NamedTensors, Var};
use crate::error::{invalid, Error, Result};
use crate::geometry::{project_coords, Intrinsics, Pose6DoF};
use crate::guidance::{dc_mask, ClassSet, epsilon_schedule, select_threshold, uses_masked_branch, GuidanceConfig, MotionIndicator};
use crate::losses::{argmax_mask, photometric_forward, smoothness_node, LabelMap, LossConfig};
use crate::multitask::MultiTaskConfig;
use super::multiscale::{level_size, multiscale_photometric_node};
use crate::optim::{AdamConfig, AdamState, DepthActivation};
use crate::synth::SynthTriplet;
use crate::tensor::{BinaryMask, DepthMap, Image, SegMask, Shape, Tensor};
use crate::warp::{nearest_warp, WarpedMask};

/// Channels of the shared feature field used by joint depth/segmentation fits.
pub const TRUNK_CHANNELS: usize = 8;

/// One training sample: frames `t−1, t, t+1` and optional side information.
#[derive(Clone, Debug, PartialEq)]
pub struct FitTriplet {
    pub images: [Image; 3],
    pub intrinsics: Intrinsics,
    /// Class masks of the three frames, needed for semantic masking.
    pub segs: Option<[SegMask; 3]>,
    /// Known `T_{t→t−1}` and `T_{t→t+1}`.
    pub poses: Option<[Pose6DoF; 2]>,
    /// Known depth of the target frame, used only for initialization.
    pub depth: Option<DepthMap>,
}

impl FitTriplet {
    pub fn new(images: [Image; 3], intrinsics: Intrinsics) -> Result<Self> {
        let (h, w, c) = (images[1].height(), images[1].width(), images[1].channels());
        if images.iter().any(|i| (i.height(), i.width(), i.channels()) != (h, w, c)) {
            return invalid("the frames of a triplet must share their size");
        }
        Ok(Self {
            images,
            intrinsics,
            segs: None,
            poses: None,
            depth: None,
        })
    }

    pub fn from_synth(t: &SynthTriplet) -> Self {
        Self {
            images: [t.prev.image.clone(), t.target.image.clone(), t.next.image.clone()],
            intrinsics: t.intrinsics,
            segs: Some([t.prev.seg.clone(), t.target.seg.clone(), t.next.seg.clone()]),
            poses: Some(t.poses),
            depth: Some(t.target.depth.clone()),
        }
    }

    pub fn height(&self) -> usize {
        self.images[1].height()
    }

    pub fn width(&self) -> usize {
        self.images[1].width()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Every depth logit starts at this value; poses start at identity.
    Constant(f64),
    /// Depth and poses start at the values supplied with each triplet.
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub loss: LossConfig,
    pub guidance: GuidanceConfig,
    /// Apply the dynamic-class mask and static-frame threshold.
    pub semantic_masking: bool,
    pub multitask: MultiTaskConfig,
    /// Also fit a segmentation head through a shared feature field.
    pub joint: bool,
    pub activation: DepthActivation,
    pub adam: AdamConfig,
    pub steps: usize,
    pub epochs: usize,
    pub lr: f64,
    pub pose_lr: f64,
    /// Radians per unit of the stored rotation parameters. Adam moves every
    /// parameter by about the same amount per step, so values below one
    /// slow rotation relative to translation.
    pub rotation_scale: f64,
    /// Learning rates are multiplied by `lr_decay` after this epoch.
    pub lr_decay_epoch: usize,
    pub lr_decay: f64,
    pub freeze_pose: bool,
    pub init: Init,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            guidance: GuidanceConfig::default(),
            semantic_masking: false,
            multitask: MultiTaskConfig::default(),
            joint: false,
            activation: DepthActivation::default(),
            adam: AdamConfig::default(),
            steps: 2000,
            epochs: 40,
            lr: 1e-2,
            pose_lr: 1e-3,
            rotation_scale: 0.1,
            lr_decay_epoch: 30,
            lr_decay: 0.1,
            freeze_pose: false,
            init: Init::Constant(0.0),
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.guidance.validate()?;
        self.multitask.validate()?;
        if self.steps == 0 || self.epochs == 0 {
            return invalid("steps and epochs must be positive");
        }
        if !(self.lr > 0.0 && self.pose_lr >= 0.0 && self.lr_decay > 0.0) {
            return invalid("learning rates must be positive");
        }
        if !(self.rotation_scale > 0.0 && self.rotation_scale.is_finite()) {
            return invalid("rotation scale must be positive");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps.div_ceil(self.epochs)
    }
}

/// Guidance state of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// One-based epoch number.
    pub epoch: usize,
    pub epsilon: f64,
    pub theta: f64,
    pub lambda_bar: Vec<f64>,
    /// Whether each triplet used the masked photometric loss.
    pub masked: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub depths: Vec<DepthMap>,
    pub poses: Vec<[Pose6DoF; 2]>,
    pub segmentation: Option<Vec<SegMask>>,
    /// Mean total loss over triplets at every step.
    pub history: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
}

/// Constant inputs of one triplet.
struct Prepared {
    target: Tensor,
    sources: [Tensor; 2],
    /// Target image at each pyramid level, for the smoothness term.
    levels: Vec<Tensor>,
    /// Minimum error of the unwarped sources, for auto-masking.
    identity_error: Tensor,
    labels: Option<Arc<LabelMap>>,
}

fn key(i: usize, block: &str) -> String {
    format!("t{i}/{block}")
}

fn residual(s: usize) -> String {
    format!("r{s}")
}

const POSE_BLOCKS: [&str; 2] = ["pose_prev", "pose_next"];

/// Pose parameters are stored with the rotation in units of `rotation_scale`
/// radians; the pose is the stored block times these units.
fn pose_units(rotation_scale: f64) -> Tensor {
    let r = rotation_scale;
    Pose6DoF::new([r; 3], [1.0; 3]).to_tensor()
}

/// The nodes of one triplet's model.
struct Built {
    depths: Vec<Var>,
    poses: [Var; 2],
    scores: Option<Var>,
    leaves: Vec<(String, Var)>,
}

struct Problem<'a> {
    data: &'a [FitTriplet],
    cfg: &'a FitConfig,
    prepared: Vec<Prepared>,
}

impl Problem<'_> {
    /// Depth logits form a residual pyramid: each level adds its own field
    /// to the upsampled level below it, so coarse blocks move every level.
    fn build(&self, g: &mut Graph, params: &NamedTensors, i: usize) -> Result<Built> {
        let t = &self.data[i];
        let (h, w) = (t.height(), t.width());
        let mut leaves = Vec::new();
        let mut leaf = |g: &mut Graph, name: String| {
            let v = g.param(params.get(&name).expect("parameter block").clone());
            leaves.push((name, v));
            v
        };
        let scales = self.cfg.loss.scales;
        let mut logits = vec![None; scales];
        for s in (0..scales).rev() {
            let r = leaf(g, key(i, &residual(s)));
            logits[s] = Some(match logits.get(s + 1).copied().flatten() {
                Some(coarse) => {
                    let (hs, ws) = level_size(h, w, s);
                    let up = g.upsample(coarse, hs, ws);
                    g.add(up, r)?
                }
                None => r,
            });
        }
        let mut logits: Vec<Var> = logits.into_iter().map(|l| l.expect("level")).collect();

        let mut scores = None;
        if self.cfg.joint {
            let trunk = leaf(g, key(i, "trunk"));
            let (f_depth, f_seg) = self.cfg.multitask.factors();
            let to_depth = g.scaled_junction(trunk, f_depth);
            let to_seg = g.scaled_junction(trunk, f_seg);
            let (wd, bd) = (leaf(g, "head/depth_w".into()), leaf(g, "head/depth_b".into()));
            let (wsg, bsg) = (leaf(g, "head/seg_w".into()), leaf(g, "head/seg_b".into()));
            let head = g.pixel_linear(to_depth, wd, bd)?;
            logits[0] = g.add(logits[0], head)?;
            let raw = g.pixel_linear(to_seg, wsg, bsg)?;
            scores = Some(g.softmax(raw));
        }

        let depths = logits.iter().map(|&l| g.depth_from_logits(l, &self.cfg.activation)).collect();
        let poses = if self.cfg.freeze_pose {
            let gt = t.poses.as_ref().expect("checked before fitting");
            [g.constant(gt[0].to_tensor()), g.constant(gt[1].to_tensor())]
        } else {
            let units = g.constant(pose_units(self.cfg.rotation_scale));
            let a = leaf(g, key(i, POSE_BLOCKS[0]));
            let b = leaf(g, key(i, POSE_BLOCKS[1]));
            [g.mul(a, units)?, g.mul(b, units)?]
        };
        Ok(Built {
            depths,
            poses,
            scores,
            leaves,
        })
    }

    /// Current full-resolution depth and poses of triplet `i`.
    fn current(&self, params: &NamedTensors, i: usize) -> Result<(DepthMap, [Pose6DoF; 2], Option<SegMask>)> {
        let mut g = Graph::new();
        let b = self.build(&mut g, params, i)?;
        let depth = DepthMap::new(g.value(b.depths[0]).clone())?;
        let poses = [Pose6DoF::from_tensor(g.value(b.poses[0]))?, Pose6DoF::from_tensor(g.value(b.poses[1]))?];
        let seg = b.scores.map(|s| argmax_mask(g.value(s)));
        Ok((depth, poses, seg))
    }

    /// Dynamic-class mask and motion indicator of triplet `i` under the current estimate.
    fn guidance(&self, params: &NamedTensors, i: usize) -> Result<(BinaryMask, MotionIndicator)> {
        let (depth, poses, _) = self.current(params, i)?;
        triplet_guidance(&self.data[i], &depth, &poses, &self.cfg.guidance.classes)
    }

    /// Total loss of triplet `i` and its gradients, keyed by block name.
    fn step(&self, params: &NamedTensors, i: usize, mu: Option<&BinaryMask>) -> Result<(f64, GradientSet)> {
        let p = &self.prepared[i];
        let cfg = &self.cfg.loss;
        let mut g = Graph::new();
        let b = self.build(&mut g, params, i)?;
        let target = g.constant(p.target.clone());
        let sources = [g.constant(p.sources[0].clone()), g.constant(p.sources[1].clone())];
        let mu = mu.map(BinaryMask::to_tensor);
        let identity = &p.identity_error;
        let auto = cfg.use_auto_mask;
        let mask_for = |err: &Tensor| -> Option<Tensor> {
            let mut weights = mu.clone();
            if auto {
                let keep = Tensor::from_vec(
                    err.shape(),
                    err.data().iter().zip(identity.data()).map(|(e, i)| if e <= i { 1.0 } else { 0.0 }).collect(),
                )
                .expect("shape");
                weights = Some(match weights {
                    Some(w) => Tensor::from_vec(err.shape(), w.data().iter().zip(keep.data()).map(|(a, b)| a * b).collect())
                        .expect("shape"),
                    None => keep,
                });
            }
            weights
        };
        let intrinsics = &self.data[i].intrinsics;
        let photometric = multiscale_photometric_node(&mut g, &b.depths, target, &sources, &b.poses, intrinsics, cfg, mask_for)?;

        let mut smooth = None;
        for (&d, img) in b.depths.iter().zip(&p.levels) {
            let s = smoothness_node(&mut g, d, img)?;
            smooth = Some(match smooth {
                Some(acc) => g.add(acc, s)?,
                None => s,
            });
        }
        let smooth = g.scale(smooth.expect("non-empty pyramid"), cfg.beta / b.depths.len() as f64);
        let mut total = g.add(photometric, smooth)?;
        if let (Some(scores), Some(labels)) = (b.scores, &p.labels) {
            let ce = g.cross_entropy(scores, labels.clone())?;
            total = g.add(total, ce)?;
        }
        let value = g.value(total).item();
        let grads = g.backward(total)?;
        let mut out = GradientSet::new();
        for (name, v) in b.leaves {
            if let Some(gv) = grads.get(v) {
                out.insert(name, gv.clone());
            }
        }
        Ok((value, out))
    }
}

/// Warps the neighbor class masks into the target view with `depth` and
/// `poses`, then returns the dynamic-class mask and the motion indicator.
pub fn triplet_guidance(t: &FitTriplet, depth: &DepthMap, poses: &[Pose6DoF; 2], classes: &ClassSet) -> Result<(BinaryMask, MotionIndicator)> {
    let segs = t.segs.as_ref().ok_or_else(|| Error::Invalid("guidance needs segmentation masks".into()))?;
    let mut warped: Vec<WarpedMask> = Vec::with_capacity(2);
    for (seg, pose) in [(&segs[0], &poses[0]), (&segs[2], &poses[1])] {
        let coords = project_coords(depth, &t.intrinsics, pose)?;
        warped.push(nearest_warp(seg, &coords));
    }
    Ok((dc_mask(&segs[1], &warped, classes)?, MotionIndicator::compute(&segs[1], &warped, classes)?))
}

fn prepare(t: &FitTriplet, cfg: &FitConfig) -> Result<Prepared> {
    let target = t.images[1].tensor().clone();
    let sources = [t.images[0].tensor().clone(), t.images[2].tensor().clone()];
    let p = cfg.loss.photometric();
    let e0 = photometric_forward(&target, &sources[0], p);
    let e1 = photometric_forward(&target, &sources[1], p);
    let identity_error = Tensor::from_vec(e0.shape(), e0.data().iter().zip(e1.data()).map(|(a, b)| a.min(*b)).collect())?;
    let levels = (0..cfg.loss.scales)
        .map(|s| {
            let (h, w) = level_size(t.height(), t.width(), s);
            if s == 0 {
                target.clone()
            } else {
                resize_forward(&target, h, w)
            }
        })
        .collect();
    let labels = match (&t.segs, cfg.joint) {
        (Some(segs), true) => Some(Arc::new(LabelMap::new(segs[1].clone(), cfg.guidance.classes.classes())?)),
        _ => None,
    };
    Ok(Prepared {
        target,
        sources,
        levels,
        identity_error,
        labels,
    })
}

fn init_params(data: &[FitTriplet], cfg: &FitConfig) -> Result<NamedTensors> {
    let mut params = NamedTensors::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for (i, t) in data.iter().enumerate() {
        let (h, w) = (t.height(), t.width());
        for s in 0..cfg.loss.scales {
            let (hs, ws) = level_size(h, w, s);
            params.insert(key(i, &residual(s)), Tensor::zeros(Shape::plane(hs, ws)));
        }
        let poses = match cfg.init {
            Init::Constant(v) => {
                let top = key(i, &residual(cfg.loss.scales - 1));
                params.get_mut(&top).expect("block").data_mut().iter_mut().for_each(|x| *x = v);
                [Pose6DoF::IDENTITY; 2]
            }
            Init::GroundTruth => {
                let depth = t.depth.as_ref().ok_or_else(|| Error::Invalid("ground-truth initialization needs depth".into()))?;
                let logits = depth.tensor().map(|d| {
                    let d = d.clamp(cfg.activation.d_min * 1.0001, cfg.activation.d_max * 0.9999);
                    cfg.activation.logit_for_depth(d).expect("clamped into range")
                });
                // Every level starts at the resized ground truth, so each
                // residual is its level's target minus the upsampled coarser one.
                let targets: Vec<Tensor> = (0..cfg.loss.scales)
                    .map(|s| {
                        let (hs, ws) = level_size(h, w, s);
                        if s == 0 {
                            logits.clone()
                        } else {
                            resize_forward(&logits, hs, ws)
                        }
                    })
                    .collect();
                for s in 0..cfg.loss.scales {
                    let r = match targets.get(s + 1) {
                        Some(coarse) => {
                            let (hs, ws) = level_size(h, w, s);
                            let up = resize_forward(coarse, hs, ws);
                            let d = targets[s].data().iter().zip(up.data()).map(|(a, b)| a - b).collect();
                            Tensor::from_vec(targets[s].shape(), d)?
                        }
                        None => targets[s].clone(),
                    };
                    params.insert(key(i, &residual(s)), r);
                }
                t.poses.ok_or_else(|| Error::Invalid("ground-truth initialization needs poses".into()))?
            }
        };
        if !cfg.freeze_pose {
            let r = cfg.rotation_scale;
            for (block, pose) in POSE_BLOCKS.iter().zip(poses) {
                let stored = Pose6DoF::new(pose.rotation.map(|v| v / r), pose.translation);
                params.insert(key(i, block), stored.to_tensor());
            }
        }
        if cfg.joint {
            let trunk = Tensor::from_fn(Shape::new(h, w, TRUNK_CHANNELS), |_, _, _| rng.gen_range(-0.1..0.1));
            params.insert(key(i, "trunk"), trunk);
        }
    }
    if cfg.joint {
        let s = cfg.guidance.classes.classes();
        let mut random = |n: usize| Tensor::from_fn(Shape::vector(n), |_, _, _| rng.gen_range(-0.1..0.1));
        params.insert("head/depth_w", random(TRUNK_CHANNELS));
        params.insert("head/depth_b", Tensor::zeros(Shape::vector(1)));
        params.insert("head/seg_w", random(TRUNK_CHANNELS * s));
        params.insert("head/seg_b", Tensor::zeros(Shape::vector(s)));
    }
    Ok(params)
}

fn is_pose_block(name: &str) -> bool {
    POSE_BLOCKS.iter().any(|p| name.ends_with(p))
}

/// Fits depth (and pose, and optionally segmentation) to a set of triplets
/// by minimizing the combined self-supervised loss with Adam.
pub fn fit_depth(data: &[FitTriplet], cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    if data.is_empty() {
        return invalid("fitting needs at least one triplet");
    }
    for t in data {
        let (h, w) = level_size(t.height(), t.width(), cfg.loss.scales - 1);
        if h < 2 || w < 2 {
            return invalid(format!("{} scales are too many for a {}x{} image", cfg.loss.scales, t.height(), t.width()));
        }
        if cfg.freeze_pose && t.poses.is_none() {
            return invalid("freezing the pose needs known poses");
        }
        if (cfg.semantic_masking || cfg.joint) && t.segs.is_none() {
            return invalid("semantic masking and joint fitting need segmentation masks");
        }
    }
    let prepared = data.iter().map(|t| prepare(t, cfg)).collect::<Result<Vec<_>>>()?;
    let problem = Problem { data, cfg, prepared };
    let mut params = init_params(data, cfg)?;
    let mut adam = AdamState::new(cfg.adam);
    let per_epoch = cfg.steps_per_epoch();
    let guided = cfg.semantic_masking && cfg.guidance.classes.is_active();

    let mut history = Vec::with_capacity(cfg.steps);
    let mut epochs = Vec::new();
    let mut masks: Vec<Option<BinaryMask>> = vec![None; data.len()];
    for step in 0..cfg.steps {
        let epoch = step / per_epoch + 1;
        if step % per_epoch == 0 && guided {
            let mut mus = Vec::with_capacity(data.len());
            let mut bars = Vec::with_capacity(data.len());
            for i in 0..data.len() {
                let (mu, ind) = problem.guidance(&params, i)?;
                mus.push(mu);
                bars.push(ind.mean);
            }
            let epsilon = epsilon_schedule(epoch, &cfg.guidance);
            let theta = select_threshold(&bars, epsilon)?;
            let masked: Vec<bool> = bars.iter().map(|&l| uses_masked_branch(l, theta)).collect();
            masks = mus.into_iter().zip(&masked).map(|(m, &use_it)| use_it.then_some(m)).collect();
            epochs.push(EpochRecord {
                epoch,
                epsilon,
                theta,
                lambda_bar: bars,
                masked,
            });
        }
        let decay = if epoch > cfg.lr_decay_epoch { cfg.lr_decay } else { 1.0 };
        let mut grads = GradientSet::new();
        let mut total = 0.0;
        for (i, mu) in masks.iter().enumerate() {
            let (value, g) = problem.step(&params, i, mu.as_ref()).map_err(|e| match e {
                Error::NonFinite { .. } => Error::Diverged { step },
                other => other,
            })?;
            if !value.is_finite() {
                return Err(Error::Diverged { step });
            }
            total += value;
            for (name, t) in g.iter() {
                match grads.get_mut(name) {
                    Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(name, t.clone());
                    }
                }
            }
        }
        history.push(total / data.len() as f64);
        adam.step_with(&mut params, &grads, |name| decay * if is_pose_block(name) { cfg.pose_lr } else { cfg.lr })
            .map_err(|_| Error::Diverged { step })?;
    }

    let mut depths = Vec::with_capacity(data.len());
    let mut poses = Vec::with_capacity(data.len());
    let mut segs = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let (d, p, s) = problem.current(&params, i)?;
        depths.push(d);
        poses.push(p);
        if let Some(s) = s {
            segs.push(s);
        }
    }
    Ok(FitResult {
        depths,
        poses,
        segmentation: cfg.joint.then_some(segs),
        history,
        epochs,
    })
}
