use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use semdepth::geometry::project_coords;
use semdepth::guidance::{select_threshold, uses_masked_branch, total_loss, ClassSet, CITYSCAPES_CLASSES};
use semdepth::io::{
    apply_fit_config, read_depth_png, read_key_values, read_seg_png, write_depth_png, write_image_png, write_mask_png,
    write_seg_png, ManifestRecord, TripletManifest,
};
use semdepth::losses::{auto_mask, photometric_loss, smoothness_loss, LossConfig};
use semdepth::metrics::{
    evaluate_depth_set, miou, write_metrics_csv, ConfusionAccumulator, CropRect, DepthEvalConfig, Scaling, SparseDepth,
};
use semdepth::optim::{fit_depth, triplet_guidance, FitConfig, FitTriplet};
use semdepth::synth::{make_scene, preset_spec, SceneSpec, PRESETS};
use semdepth::tensor::{BinaryMask, DepthMap, Image};
use semdepth::warp::bilinear_warp;
use semdepth::Error;

#[derive(Parser)]
#[command(name = "semdepth", version, about = "Self-supervised depth fitting with semantic guidance")]
struct Cli {
    /// Seed for every random choice (scene generation, initialization).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene: frames, depth, classes, intrinsics and a manifest.
    Synth(SynthArgs),
    /// Fit depth and pose to triplets; writes depth PNGs and the loss history.
    Fit(FitArgs),
    /// Write the dynamic-class mask of each triplet as a 0/255 PNG.
    Mask(GeometryArgs),
    /// Print the motion indicator of each triplet and the selected threshold.
    Motion(MotionArgs),
    /// Compare predicted and ground-truth depth PNGs.
    EvalDepth(EvalDepthArgs),
    /// Compare predicted and ground-truth class PNGs.
    EvalSeg(EvalSegArgs),
    /// Print every loss term for one triplet.
    Losses(LossesArgs),
}

#[derive(Args)]
struct Source {
    /// Built-in scene name.
    #[arg(long, conflicts_with = "manifest", value_parser = clap::builder::PossibleValuesParser::new(PRESETS))]
    preset: Option<String>,
    /// Triplet manifest CSV.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Frames to render for a preset.
    #[arg(long, default_value_t = 3)]
    frames: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, conflicts_with = "spec")]
    preset: Option<String>,
    /// Scene description in TOML.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    frames: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    source: Source,
    /// Key-value config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Enable the dynamic-class mask and static-frame threshold.
    #[arg(long)]
    semantic_masking: bool,
    /// Also fit a segmentation head through shared features.
    #[arg(long)]
    joint: bool,
    /// Keep the poses at the values supplied with the data.
    #[arg(long)]
    freeze_pose: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GeometryArgs {
    #[command(flatten)]
    source: Source,
    /// Depth PNG of the target frame; defaults to the depth supplied with the data.
    #[arg(long)]
    depth: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MotionArgs {
    #[command(flatten)]
    source: Source,
    /// Fraction of frames to pass without masking.
    #[arg(long, default_value_t = 0.0)]
    epsilon: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScalingArg {
    Median,
    Global,
    None,
}

#[derive(Args)]
struct EvalDepthArgs {
    /// Predicted depth PNG, or a directory of `depth_*.png` files.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth depth PNG, or a directory matched by file name.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_enum, default_value = "median")]
    scaling: ScalingArg,
    /// Named crop: garg or eigen.
    #[arg(long)]
    crop: Option<String>,
    #[arg(long, requires = "max_depth")]
    min_depth: Option<f64>,
    #[arg(long, requires = "min_depth")]
    max_depth: Option<f64>,
    /// Output CSV; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalSegArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = CITYSCAPES_CLASSES)]
    classes: usize,
    /// Label ID excluded from evaluation.
    #[arg(long, default_value_t = 255)]
    ignore: u8,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LossesArgs {
    #[command(flatten)]
    source: Source,
    /// Triplet index within the source.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long)]
    depth: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    theta: f64,
}

/// Errors caused by how the command was invoked rather than by the data.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::Diverged { .. } | Error::NonFinite { .. }) => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a, cli.seed),
        Command::Fit(a) => fit(a, cli.seed),
        Command::Mask(a) => mask(a, cli.seed),
        Command::Motion(a) => motion(a, cli.seed),
        Command::EvalDepth(a) => eval_depth(a),
        Command::EvalSeg(a) => eval_seg(a),
        Command::Losses(a) => losses(a, cli.seed),
    }
}

fn load_source(s: &Source, seed: u64) -> anyhow::Result<Vec<FitTriplet>> {
    match (&s.preset, &s.manifest) {
        (Some(name), None) => {
            let scene = make_scene(&preset_spec(name, seed, s.frames)?)?;
            Ok(scene.triplets()?.iter().map(FitTriplet::from_synth).collect())
        }
        (None, Some(path)) => {
            let m = TripletManifest::read(path).with_context(|| format!("reading {}", path.display()))?;
            Ok(m.load()?)
        }
        _ => Err(usage("give either --preset or --manifest")),
    }
}

/// Output file names for each triplet's depth and class map, matching the ground-truth names
/// where the source provides them so a fit directory evaluates against the data directory.
fn output_names(s: &Source, count: usize) -> anyhow::Result<Vec<(PathBuf, PathBuf)>> {
    let indexed = |f: usize| (PathBuf::from(format!("depth_{f:03}.png")), PathBuf::from(format!("seg_{f:03}.png")));
    let Some(path) = &s.manifest else {
        return Ok((1..=count).map(indexed).collect());
    };
    let m = TripletManifest::read(path)?;
    Ok(m.records
        .iter()
        .map(|r| {
            let stem = r.target.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let file = |p: &Option<PathBuf>, kind: &str| match p.as_ref().and_then(|p| p.file_name()) {
                Some(n) => PathBuf::from(n),
                None => PathBuf::from(format!("{kind}_{stem}.png")),
            };
            (file(&r.depth, "depth"), file(&r.seg_target, "seg"))
        })
        .collect())
}

fn synth(a: SynthArgs, seed: u64) -> anyhow::Result<()> {
    let spec = match (&a.preset, &a.spec) {
        (Some(name), None) => preset_spec(name, seed, a.frames)?,
        (None, Some(path)) => SceneSpec::from_toml(&fs::read_to_string(path)?)?,
        _ => return Err(usage("give either --preset or --spec")),
    };
    let scene = make_scene(&spec)?;
    fs::create_dir_all(&a.out)?;
    for f in 0..scene.frames() {
        let r = scene.render_frame(f)?;
        write_image_png(&a.out.join(format!("frame_{f:03}.png")), &r.image)?;
        write_depth_png(&a.out.join(format!("depth_{f:03}.png")), &r.depth)?;
        write_seg_png(&a.out.join(format!("seg_{f:03}.png")), &r.seg)?;
    }
    scene.intrinsics.write(&a.out.join("intrinsics.txt"))?;
    let name = |kind: &str, f: usize| PathBuf::from(format!("{kind}_{f:03}.png"));
    let records = (1..scene.frames().saturating_sub(1))
        .map(|t| ManifestRecord {
            prev: name("frame", t - 1),
            target: name("frame", t),
            next: name("frame", t + 1),
            intrinsics: "intrinsics.txt".into(),
            seg_prev: Some(name("seg", t - 1)),
            seg_target: Some(name("seg", t)),
            seg_next: Some(name("seg", t + 1)),
            depth: Some(name("depth", t)),
            pose_prev: Some(scene.relative_pose(t, t - 1).to_string()),
            pose_next: Some(scene.relative_pose(t, t + 1).to_string()),
        })
        .collect();
    TripletManifest {
        base: a.out.clone(),
        records,
    }
    .write(&a.out.join("manifest.csv"))?;
    Ok(())
}

fn fit(a: FitArgs, seed: u64) -> anyhow::Result<()> {
    let mut cfg = FitConfig::default();
    if let Some(path) = &a.config {
        apply_fit_config(&mut cfg, &read_key_values(path)?)?;
    }
    cfg.seed = seed;
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    cfg.semantic_masking |= a.semantic_masking;
    cfg.joint |= a.joint;
    cfg.freeze_pose |= a.freeze_pose;
    let data = load_source(&a.source, seed)?;
    let result = fit_depth(&data, &cfg)?;

    let names = output_names(&a.source, data.len())?;
    fs::create_dir_all(&a.out)?;
    for (d, (name, _)) in result.depths.iter().zip(&names) {
        write_depth_png(&a.out.join(name), d)?;
    }
    if let Some(segs) = &result.segmentation {
        for (s, (_, name)) in segs.iter().zip(&names) {
            write_seg_png(&a.out.join(name), s)?;
        }
    }
    let mut loss = String::from("step,loss\n");
    for (i, l) in result.history.iter().enumerate() {
        loss.push_str(&format!("{i},{l}\n"));
    }
    fs::write(a.out.join("loss.csv"), loss)?;
    let mut poses = String::from("triplet,pose_prev,pose_next\n");
    for (i, p) in result.poses.iter().enumerate() {
        poses.push_str(&format!("{i},{},{}\n", p[0], p[1]));
    }
    fs::write(a.out.join("poses.csv"), poses)?;
    if !result.epochs.is_empty() {
        let mut ep = String::from("epoch,epsilon,theta,triplet,lambda_bar,masked\n");
        for e in &result.epochs {
            for (i, (l, m)) in e.lambda_bar.iter().zip(&e.masked).enumerate() {
                ep.push_str(&format!("{},{},{},{i},{l},{m}\n", e.epoch, e.epsilon, e.theta));
            }
        }
        fs::write(a.out.join("epochs.csv"), ep)?;
    }
    Ok(())
}

/// Depth and poses to warp with: an explicit depth file or the supplied depth, and the supplied poses.
fn geometry(t: &FitTriplet, depth: Option<&Path>) -> anyhow::Result<(DepthMap, [semdepth::geometry::Pose6DoF; 2])> {
    let d = match depth {
        Some(p) => {
            let s = read_depth_png(p)?;
            if s.valid().count() != s.height() * s.width() {
                bail!(Error::Invalid(format!("{}: depth must be dense", p.display())));
            }
            DepthMap::new(s.values().clone())?
        }
        None => t.depth.clone().ok_or_else(|| Error::Invalid("triplet has no depth; pass --depth".into()))?,
    };
    let poses = t.poses.ok_or_else(|| Error::Invalid("triplet has no poses".into()))?;
    Ok((d, poses))
}

fn mask(a: GeometryArgs, seed: u64) -> anyhow::Result<()> {
    let data = load_source(&a.source, seed)?;
    if a.depth.is_some() && data.len() != 1 {
        return Err(usage("--depth applies to a single triplet"));
    }
    fs::create_dir_all(&a.out)?;
    for (i, t) in data.iter().enumerate() {
        let (d, poses) = geometry(t, a.depth.as_deref())?;
        let (mu, _) = triplet_guidance(t, &d, &poses, &ClassSet::cityscapes())?;
        write_mask_png(&a.out.join(format!("mask_{i:03}.png")), &mu)?;
    }
    Ok(())
}

fn motion(a: MotionArgs, seed: u64) -> anyhow::Result<()> {
    if !(0.0..=1.0).contains(&a.epsilon) {
        return Err(usage("--epsilon must lie in [0, 1]"));
    }
    let data = load_source(&a.source, seed)?;
    let mut bars = Vec::with_capacity(data.len());
    for t in &data {
        let (d, poses) = geometry(t, None)?;
        bars.push(triplet_guidance(t, &d, &poses, &ClassSet::cityscapes())?.1.mean);
    }
    let theta = select_threshold(&bars, a.epsilon)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "triplet,lambda_bar,theta,masked")?;
    for (i, l) in bars.iter().enumerate() {
        writeln!(out, "{i},{l},{theta},{}", uses_masked_branch(*l, theta))?;
    }
    Ok(())
}

/// Pairs files by name when both paths are directories.
/// In directory mode only files starting with `prefix` are paired, so depth and class maps can share a directory.
fn pair_paths(pred: &Path, gt: &Path, prefix: &str) -> anyhow::Result<Vec<(String, PathBuf, PathBuf)>> {
    if pred.is_dir() != gt.is_dir() {
        return Err(usage("--pred and --gt must both be files or both be directories"));
    }
    if !pred.is_dir() {
        let name = pred.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        return Ok(vec![(name, pred.to_path_buf(), gt.to_path_buf())]);
    }
    let mut names: Vec<String> = fs::read_dir(pred)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with(prefix) && n.ends_with(".png") && gt.join(n).is_file())
        .collect();
    names.sort();
    if names.is_empty() {
        bail!(Error::Invalid("no PNG names are shared by the two directories".into()));
    }
    Ok(names.into_iter().map(|n| (n.clone(), pred.join(&n), gt.join(&n))).collect())
}

fn csv_sink(out: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(fs::File::create(p)?),
        None => Box::new(std::io::stdout()),
    })
}

fn eval_depth(a: EvalDepthArgs) -> anyhow::Result<()> {
    let cfg = DepthEvalConfig {
        scaling: match a.scaling {
            ScalingArg::Median => Scaling::MedianPerImage,
            ScalingArg::Global => Scaling::GlobalFactor,
            ScalingArg::None => Scaling::None,
        },
        crop: a.crop.as_deref().map(CropRect::preset).transpose().map_err(|e| usage(e.to_string()))?,
        clamp: a.min_depth.zip(a.max_depth),
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let files = pair_paths(&a.pred, &a.gt, "depth")?;
    let mut preds = Vec::with_capacity(files.len());
    let mut gts = Vec::with_capacity(files.len());
    for (_, p, g) in &files {
        let sp = read_depth_png(p)?;
        if sp.valid().count() != sp.height() * sp.width() {
            bail!(Error::Invalid(format!("{}: prediction has missing pixels", p.display())));
        }
        preds.push(DepthMap::new(sp.values().clone())?);
        gts.push(read_depth_png(g)?);
    }
    let pairs: Vec<(&DepthMap, &SparseDepth)> = preds.iter().zip(&gts).collect();
    let reports = evaluate_depth_set(&pairs, &cfg)?;
    let rows: Vec<(String, _)> = files.into_iter().map(|(n, _, _)| n).zip(reports).collect();
    write_metrics_csv(csv_sink(a.out.as_deref())?, &rows)?;
    Ok(())
}

fn eval_seg(a: EvalSegArgs) -> anyhow::Result<()> {
    let mut acc = ConfusionAccumulator::new(a.classes, Some(a.ignore)).map_err(|e| usage(e.to_string()))?;
    for (_, p, g) in pair_paths(&a.pred, &a.gt, "seg")? {
        acc.add(&read_seg_png(&p)?, &read_seg_png(&g)?)?;
    }
    let (mean, per_class) = miou(&acc)?;
    let mut out = csv_sink(a.out.as_deref())?;
    writeln!(out, "class,iou")?;
    for (c, iou) in per_class.iter().enumerate() {
        match iou {
            Some(v) => writeln!(out, "{c},{v:.6}")?,
            None => writeln!(out, "{c},")?,
        }
    }
    writeln!(out, "mean,{mean:.6}")?;
    Ok(())
}

fn losses(a: LossesArgs, seed: u64) -> anyhow::Result<()> {
    let data = load_source(&a.source, seed)?;
    let t = data
        .get(a.index)
        .ok_or_else(|| usage(format!("triplet index {} out of range (have {})", a.index, data.len())))?;
    let (d, poses) = geometry(t, a.depth.as_deref())?;
    let cfg = LossConfig::default();
    let mut warped: Vec<Image> = Vec::with_capacity(2);
    for (src, pose) in [(&t.images[0], &poses[0]), (&t.images[2], &poses[1])] {
        warped.push(bilinear_warp(src, &project_coords(&d, &t.intrinsics, pose)?)?.0);
    }
    let target = &t.images[1];
    let auto = auto_mask(target, &[t.images[0].clone(), t.images[2].clone()], &warped, cfg.alpha)?;
    let j_ph = photometric_loss(target, &warped, cfg.alpha, Some(&auto))?;
    let (mu, indicator) = match t.segs {
        Some(_) => {
            let (mu, ind) = triplet_guidance(t, &d, &poses, &ClassSet::cityscapes())?;
            (mu, Some(ind))
        }
        None => (BinaryMask::filled(t.height(), t.width(), true), None),
    };
    let j_phm = photometric_loss(target, &warped, cfg.alpha, Some(&mu.and(&auto)?))?;
    let j_sm = smoothness_loss(&d, target)?;
    let lambda_bar = indicator.map_or(1.0, |i| i.mean);
    let total = total_loss(j_ph, j_phm, None, j_sm, lambda_bar, a.theta, cfg.beta);
    let mut out = std::io::stdout().lock();
    writeln!(out, "photometric = {j_ph}")?;
    writeln!(out, "photometric_masked = {j_phm}")?;
    writeln!(out, "smoothness = {j_sm}")?;
    writeln!(out, "lambda_bar = {lambda_bar}")?;
    writeln!(out, "theta = {}", a.theta)?;
    writeln!(out, "masked_branch = {}", uses_masked_branch(lambda_bar, a.theta))?;
    writeln!(out, "total = {total}")?;
    if !total.is_finite() {
        bail!(Error::NonFinite { op: "total_loss" });
    }
    Ok(())
}
