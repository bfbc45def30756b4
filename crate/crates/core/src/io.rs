//! PNG containers, triplet manifests and key-value configuration files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{Intrinsics, Pose6DoF};
use crate::metrics::SparseDepth;
use crate::optim::{FitConfig, FitTriplet, Init};
use crate::tensor::{BinaryMask, DepthMap, Image, SegMask, Shape, Tensor};

/// Stored depth units per meter.
pub const DEPTH_SCALE: f64 = 256.0;

/// Converts 16-bit depth codes to meters; code 0 marks a missing value.
pub fn depth_from_codes(height: usize, width: usize, codes: &[u16]) -> Result<SparseDepth> {
    if codes.len() != height * width {
        return invalid("depth code count does not match the image size");
    }
    let values = codes.iter().map(|&c| f64::from(c) / DEPTH_SCALE).collect();
    SparseDepth::from_dense(Tensor::from_vec(Shape::plane(height, width), values)?)
}

/// Encodes valid depths as `round(d·256)`; missing pixels become 0.
pub fn depth_to_codes(depth: &SparseDepth) -> Result<Vec<u16>> {
    let max = f64::from(u16::MAX) / DEPTH_SCALE;
    depth
        .values()
        .data()
        .iter()
        .zip(depth.valid().bits())
        .map(|(&d, &ok)| {
            if !ok {
                return Ok(0);
            }
            if d > max {
                return invalid(format!("depth {d} m exceeds the 16-bit range ({max} m)"));
            }
            Ok(((d * DEPTH_SCALE).round() as u16).max(1))
        })
        .collect()
}

pub fn read_depth_png(path: &Path) -> Result<SparseDepth> {
    match image::open(path)? {
        DynamicImage::ImageLuma16(buf) => {
            let (w, h) = buf.dimensions();
            depth_from_codes(h as usize, w as usize, buf.as_raw())
        }
        other => Err(Error::Format(format!(
            "{}: depth must be a 16-bit single-channel PNG, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

pub fn write_sparse_depth_png(path: &Path, depth: &SparseDepth) -> Result<()> {
    let codes = depth_to_codes(depth)?;
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(depth.width() as u32, depth.height() as u32, codes).expect("buffer size");
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn write_depth_png(path: &Path, depth: &DepthMap) -> Result<()> {
    write_sparse_depth_png(path, &SparseDepth::from_depth(depth))
}

/// Reads an 8-bit PNG as a one-channel (gray) or three-channel image.
pub fn read_image_png(path: &Path) -> Result<Image> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        Image::from_u8(Shape::new(h, w, 3), img.to_rgb8().as_raw())
    } else {
        Image::from_u8(Shape::new(h, w, 1), img.to_luma8().as_raw())
    }
}

pub fn write_image_png(path: &Path, image: &Image) -> Result<()> {
    let bytes: Vec<u8> = image.data().iter().map(|v| (v * 255.0).round() as u8).collect();
    let (w, h) = (image.width() as u32, image.height() as u32);
    match image.channels() {
        1 => GrayImage::from_raw(w, h, bytes).expect("buffer size").save(path)?,
        _ => RgbImage::from_raw(w, h, bytes).expect("buffer size").save(path)?,
    }
    Ok(())
}

fn read_gray8(path: &Path, what: &str) -> Result<GrayImage> {
    match image::open(path)? {
        DynamicImage::ImageLuma8(buf) => Ok(buf),
        other => Err(Error::Format(format!(
            "{}: {what} must be an 8-bit single-channel PNG, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

/// Reads class IDs stored as 8-bit gray values.
pub fn read_seg_png(path: &Path) -> Result<SegMask> {
    let buf = read_gray8(path, "segmentation")?;
    let (w, h) = buf.dimensions();
    SegMask::new(h as usize, w as usize, buf.into_raw())
}

pub fn write_seg_png(path: &Path, seg: &SegMask) -> Result<()> {
    GrayImage::from_raw(seg.width() as u32, seg.height() as u32, seg.ids().to_vec())
        .expect("buffer size")
        .save(path)?;
    Ok(())
}

/// Writes a binary mask as 0/255.
pub fn write_mask_png(path: &Path, mask: &BinaryMask) -> Result<()> {
    let bytes = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    GrayImage::from_raw(mask.width() as u32, mask.height() as u32, bytes)
        .expect("buffer size")
        .save(path)?;
    Ok(())
}

/// Reads a mask; values above 127 are set.
pub fn read_mask_png(path: &Path) -> Result<BinaryMask> {
    let buf = read_gray8(path, "mask")?;
    let (w, h) = buf.dimensions();
    BinaryMask::new(h as usize, w as usize, buf.as_raw().iter().map(|&v| v > 127).collect())
}

/// One manifest row. Paths are relative to the manifest's directory unless absolute.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub prev: PathBuf,
    pub target: PathBuf,
    pub next: PathBuf,
    pub intrinsics: PathBuf,
    #[serde(default)]
    pub seg_prev: Option<PathBuf>,
    #[serde(default)]
    pub seg_target: Option<PathBuf>,
    #[serde(default)]
    pub seg_next: Option<PathBuf>,
    #[serde(default)]
    pub depth: Option<PathBuf>,
    /// `T_{t→t−1}` as `rx ry rz tx ty tz`.
    #[serde(default)]
    pub pose_prev: Option<String>,
    /// `T_{t→t+1}` as `rx ry rz tx ty tz`.
    #[serde(default)]
    pub pose_next: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletManifest {
    pub base: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl TripletManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let records = reader.deserialize().collect::<std::result::Result<Vec<ManifestRecord>, _>>()?;
        if records.is_empty() {
            return invalid(format!("{}: manifest has no records", path.display()));
        }
        for r in &records {
            let segs = [&r.seg_prev, &r.seg_target, &r.seg_next];
            if segs.iter().any(|s| s.is_some()) && segs.iter().any(|s| s.is_none()) {
                return invalid("a manifest record must give all three segmentation paths or none");
            }
            if r.pose_prev.is_some() != r.pose_next.is_some() {
                return invalid("a manifest record must give both poses or none");
            }
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { base, records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    /// Loads every record, checking that referenced files exist and share a resolution.
    pub fn load(&self) -> Result<Vec<FitTriplet>> {
        self.records.iter().map(|r| self.load_record(r)).collect()
    }

    pub fn load_record(&self, r: &ManifestRecord) -> Result<FitTriplet> {
        let frames = [&r.prev, &r.target, &r.next].map(|p| self.resolve(p));
        for f in &frames {
            if !f.exists() {
                return invalid(format!("{}: file not found", f.display()));
            }
        }
        let images = [read_image_png(&frames[0])?, read_image_png(&frames[1])?, read_image_png(&frames[2])?];
        let mut t = FitTriplet::new(images, Intrinsics::read(&self.resolve(&r.intrinsics))?)?;
        let (h, w) = (t.height(), t.width());
        if let (Some(a), Some(b), Some(c)) = (&r.seg_prev, &r.seg_target, &r.seg_next) {
            let segs = [read_seg_png(&self.resolve(a))?, read_seg_png(&self.resolve(b))?, read_seg_png(&self.resolve(c))?];
            if segs.iter().any(|s| !s.same_size(h, w)) {
                return invalid("segmentation and frame sizes differ");
            }
            t.segs = Some(segs);
        }
        if let Some(d) = &r.depth {
            let gt = read_depth_png(&self.resolve(d))?;
            if (gt.height(), gt.width()) != (h, w) {
                return invalid("depth and frame sizes differ");
            }
            // Only fully dense depth can seed a fit.
            if gt.valid().count() == h * w {
                t.depth = Some(DepthMap::new(gt.values().clone())?);
            }
        }
        if let (Some(a), Some(b)) = (&r.pose_prev, &r.pose_next) {
            t.poses = Some([a.parse::<Pose6DoF>()?, b.parse::<Pose6DoF>()?]);
        }
        Ok(t)
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected `key = value`", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Format(format!("line {}: empty key", n + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Format(format!("line {}: duplicate key `{k}`", n + 1)));
        }
    }
    Ok(out)
}

pub fn read_key_values(path: &Path) -> Result<BTreeMap<String, String>> {
    parse_key_values(&std::fs::read_to_string(path)?)
}

/// Keys accepted by [`apply_fit_config`].
pub const FIT_CONFIG_KEYS: [&str; 23] = [
    "alpha",
    "beta",
    "lambda",
    "scales",
    "theta",
    "epsilon_start",
    "epsilon_end",
    "steps",
    "epochs",
    "lr",
    "pose_lr",
    "rotation_scale",
    "lr_decay",
    "lr_decay_epoch",
    "seed",
    "d_min",
    "d_max",
    "use_auto_mask",
    "freeze_pose",
    "semantic_masking",
    "joint",
    "init_logit",
    "init",
];

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| Error::Format(format!("config key `{key}`: cannot parse `{v}`: {e}")))
}

/// Overrides fields of `cfg` from key-value entries. Unknown keys are an error.
pub fn apply_fit_config(cfg: &mut FitConfig, entries: &BTreeMap<String, String>) -> Result<()> {
    for (k, v) in entries {
        let key = k.as_str();
        match key {
            "alpha" => cfg.loss.alpha = parse_value(key, v)?,
            "beta" => cfg.loss.beta = parse_value(key, v)?,
            "lambda" => cfg.multitask.lambda = parse_value(key, v)?,
            "scales" => cfg.loss.scales = parse_value(key, v)?,
            "theta" => cfg.guidance.theta = parse_value(key, v)?,
            "epsilon_start" => cfg.guidance.epoch_start = parse_value(key, v)?,
            "epsilon_end" => cfg.guidance.epoch_end = parse_value(key, v)?,
            "steps" => cfg.steps = parse_value(key, v)?,
            "epochs" => cfg.epochs = parse_value(key, v)?,
            "lr" => cfg.lr = parse_value(key, v)?,
            "pose_lr" => cfg.pose_lr = parse_value(key, v)?,
            "rotation_scale" => cfg.rotation_scale = parse_value(key, v)?,
            "lr_decay" => cfg.lr_decay = parse_value(key, v)?,
            "lr_decay_epoch" => cfg.lr_decay_epoch = parse_value(key, v)?,
            "seed" => cfg.seed = parse_value(key, v)?,
            "d_min" => cfg.activation.d_min = parse_value(key, v)?,
            "d_max" => cfg.activation.d_max = parse_value(key, v)?,
            "use_auto_mask" => cfg.loss.use_auto_mask = parse_value(key, v)?,
            "freeze_pose" => cfg.freeze_pose = parse_value(key, v)?,
            "semantic_masking" => cfg.semantic_masking = parse_value(key, v)?,
            "joint" => cfg.joint = parse_value(key, v)?,
            "init_logit" => cfg.init = Init::Constant(parse_value(key, v)?),
            "init" => {
                cfg.init = match v.as_str() {
                    "gt" => Init::GroundTruth,
                    other => Init::Constant(parse_value(key, other)?),
                }
            }
            _ => return Err(Error::Format(format!("unknown config key `{key}`"))),
        }
    }
    cfg.activation = crate::optim::DepthActivation::new(cfg.activation.d_min, cfg.activation.d_max)?;
    cfg.validate()
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn depth_codes_follow_convention() {
        let d = depth_from_codes(1, 3, &[25600, 0, 256]).unwrap();
        assert_eq!(d.values().data(), &[100.0, 0.0, 1.0]);
        assert_eq!(d.valid().bits(), &[true, false, true]);
        assert_eq!(depth_to_codes(&d).unwrap(), vec![25600, 0, 256]);
    }

    #[test]
    fn depth_png_round_trip() {
        let dir = tempdir().unwrap();
        let codes: Vec<u16> = (0..48u16).map(|i| if i % 5 == 0 { 0 } else { i * 997 }).collect();
        let d = depth_from_codes(6, 8, &codes).unwrap();
        let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
        write_sparse_depth_png(&a, &d).unwrap();
        let back = read_depth_png(&a).unwrap();
        assert_eq!(back, d);
        write_sparse_depth_png(&b, &back).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn dense_depth_round_trip_error_is_bounded() {
        let dir = tempdir().unwrap();
        let t = Tensor::from_fn(Shape::plane(4, 5), |y, x, _| 0.5 + y as f64 * 13.37 + x as f64 * 0.0123);
        let d = DepthMap::new(t.clone()).unwrap();
        let p = dir.path().join("d.png");
        write_depth_png(&p, &d).unwrap();
        let back = read_depth_png(&p).unwrap();
        for (a, b) in back.values().data().iter().zip(t.data()) {
            assert!((a - b).abs() <= 1.0 / 512.0);
        }
    }

    #[test]
    fn wrong_png_kinds_are_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("g.png");
        write_seg_png(&p, &SegMask::filled(3, 3, 4)).unwrap();
        assert!(matches!(read_depth_png(&p), Err(Error::Format(_))));
        let q = dir.path().join("d.png");
        write_depth_png(&q, &DepthMap::constant(3, 3, 2.0).unwrap()).unwrap();
        assert!(matches!(read_seg_png(&q), Err(Error::Format(_))));
    }

    #[test]
    fn image_seg_and_mask_round_trip() {
        let dir = tempdir().unwrap();
        let img = Image::from_u8(Shape::new(3, 4, 3), &(0..36u8).map(|v| v * 7).collect::<Vec<_>>()).unwrap();
        let p = dir.path().join("i.png");
        write_image_png(&p, &img).unwrap();
        assert_eq!(read_image_png(&p).unwrap(), img);

        let seg = SegMask::new(2, 3, vec![0, 13, 255, 2, 2, 18]).unwrap();
        write_seg_png(&p, &seg).unwrap();
        assert_eq!(read_seg_png(&p).unwrap(), seg);

        let mask = BinaryMask::new(2, 2, vec![true, false, false, true]).unwrap();
        write_mask_png(&p, &mask).unwrap();
        assert_eq!(read_mask_png(&p).unwrap(), mask);
        assert_eq!(image::open(&p).unwrap().to_luma8().as_raw(), &[255, 0, 0, 255]);
    }

    #[test]
    fn key_values_parse_and_apply() {
        let m = parse_key_values("# comment\nalpha = 0.5\n\nsteps=10 # trailing\nfreeze_pose = true\n").unwrap();
        let mut cfg = FitConfig::default();
        apply_fit_config(&mut cfg, &m).unwrap();
        assert_eq!(cfg.loss.alpha, 0.5);
        assert_eq!(cfg.steps, 10);
        assert!(cfg.freeze_pose);

        assert!(parse_key_values("alpha 0.5").is_err());
        assert!(parse_key_values("a = 1\na = 2").is_err());
        let bad = parse_key_values("alhpa = 0.5").unwrap();
        assert!(apply_fit_config(&mut FitConfig::default(), &bad).is_err());
        let range = parse_key_values("alpha = 2").unwrap();
        assert!(apply_fit_config(&mut FitConfig::default(), &range).is_err());
    }

    #[test]
    fn manifest_round_trip_and_load() {
        let dir = tempdir().unwrap();
        let img = Image::from_u8(Shape::new(4, 5, 1), &[128; 20]).unwrap();
        for n in ["a.png", "b.png", "c.png"] {
            write_image_png(&dir.path().join(n), &img).unwrap();
        }
        Intrinsics::new(5.0, 5.0, 2.0, 1.5).unwrap().write(&dir.path().join("k.txt")).unwrap();
        let m = TripletManifest {
            base: dir.path().to_path_buf(),
            records: vec![ManifestRecord {
                prev: "a.png".into(),
                target: "b.png".into(),
                next: "c.png".into(),
                intrinsics: "k.txt".into(),
                ..Default::default()
            }],
        };
        let path = dir.path().join("m.csv");
        m.write(&path).unwrap();
        let back = TripletManifest::read(&path).unwrap();
        assert_eq!(back, m);
        let t = back.load().unwrap();
        assert_eq!(t[0].images[1], img);
        assert!(t[0].segs.is_none());

        let mut missing = back.clone();
        missing.records[0].next = "nope.png".into();
        assert!(missing.load().is_err());
    }
}
