//! Ray-traced scenes of textured planes with exact depth, classes and poses.
//!
//! Textures are sums of sinusoids in surface coordinates, so neighbouring
//! views agree up to bilinear interpolation error.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::error::{invalid, Error, Result};
use crate::geometry::{rotation_matrix, Intrinsics, Pose6DoF, SE3Matrix};
use crate::tensor::{BinaryMask, DepthMap, Image, SegMask, Shape, Tensor};

/// Cityscapes train IDs used by the presets.
pub mod class {
    pub const ROAD: u8 = 0;
    pub const BUILDING: u8 = 2;
    pub const CAR: u8 = 13;
}

/// One plane wave `amplitude · sin(2π⟨k, (u, v)⟩/λ + phase)`.
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct Wave {
    /// Wavelength in world units.
    pub wavelength: f64,
    /// Direction of the wave vector in the `(u, v)` plane, radians.
    pub angle: f64,
    pub amplitude: [f64; 3],
    #[serde(default)]
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    pub waves: Vec<Wave>,
}

impl Texture {
    pub const BASE: f64 = 0.5;
    /// Largest total amplitude per channel; keeps intensities inside (0, 1).
    pub const MAX_AMPLITUDE: f64 = 0.45;

    pub fn new(waves: Vec<Wave>) -> Result<Self> {
        for ch in 0..3 {
            let total: f64 = waves.iter().map(|w| w.amplitude[ch].abs()).sum();
            if total > Self::MAX_AMPLITUDE + 1e-12 {
                return invalid(format!("texture amplitudes sum to {total} in channel {ch}"));
            }
        }
        if waves.iter().any(|w| !(w.wavelength > 0.0)) {
            return invalid("wavelengths must be positive");
        }
        Ok(Self { waves })
    }

    /// Random mixture of `count` waves no shorter than `min_wavelength`.
    pub fn random(rng: &mut ChaCha8Rng, count: usize, min_wavelength: f64) -> Self {
        let per_wave = Self::MAX_AMPLITUDE / count.max(1) as f64;
        let waves = (0..count)
            .map(|i| Wave {
                wavelength: min_wavelength * rng.gen_range(1.0..2.0),
                angle: PI * (i as f64 + rng.gen_range(0.0..1.0)) / count as f64,
                amplitude: std::array::from_fn(|_| per_wave * rng.gen_range(0.5..1.0)),
                phase: rng.gen_range(0.0..2.0 * PI),
            })
            .collect();
        Self { waves }
    }

    pub fn sample(&self, u: f64, v: f64) -> [f64; 3] {
        let mut out = [Self::BASE; 3];
        for w in &self.waves {
            let (s, c) = w.angle.sin_cos();
            let arg = 2.0 * PI * (c * u + s * v) / w.wavelength + w.phase;
            let val = arg.sin();
            for ch in 0..3 {
                out[ch] += w.amplitude[ch] * val;
            }
        }
        out
    }
}

/// A textured, optionally bounded plane moving with constant velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub name: String,
    /// Surface origin at frame 0, world coordinates.
    pub origin: Vector3<f64>,
    pub u_axis: Vector3<f64>,
    pub v_axis: Vector3<f64>,
    pub u_range: Option<[f64; 2]>,
    pub v_range: Option<[f64; 2]>,
    pub class_id: u8,
    pub texture: Texture,
    /// World displacement per frame.
    pub motion: Vector3<f64>,
}

impl Plane {
    pub fn normal(&self) -> Vector3<f64> {
        self.u_axis.cross(&self.v_axis)
    }

    pub fn origin_at(&self, frame: usize) -> Vector3<f64> {
        self.origin + self.motion * frame as f64
    }

    pub fn is_moving(&self) -> bool {
        self.motion != Vector3::zeros()
    }

    /// Ray parameter and surface coordinates of the intersection, if any.
    fn intersect(&self, frame: usize, center: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let n = self.normal();
        let denom = n.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let o = self.origin_at(frame);
        let t = n.dot(&(o - center)) / denom;
        if t <= 0.0 {
            return None;
        }
        let rel = center + dir * t - o;
        let (u, v) = (rel.dot(&self.u_axis), rel.dot(&self.v_axis));
        let inside = |r: Option<[f64; 2]>, x: f64| r.is_none_or(|[lo, hi]| x >= lo && x <= hi);
        (inside(self.u_range, u) && inside(self.v_range, v)).then_some((t, u, v))
    }
}

/// Planes, per-frame camera-to-world poses and the camera calibration.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub planes: Vec<Plane>,
    pub cameras: Vec<SE3Matrix>,
    pub intrinsics: Intrinsics,
    pub height: usize,
    pub width: usize,
}

/// Rendered image with exact depth, classes and the index of the visible plane.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedFrame {
    pub image: Image,
    pub depth: DepthMap,
    pub seg: SegMask,
    pub surface: Vec<usize>,
}

/// Frames `t−1, t, t+1` with the relative poses `T_{t→t−1}` and `T_{t→t+1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthTriplet {
    pub prev: RenderedFrame,
    pub target: RenderedFrame,
    pub next: RenderedFrame,
    pub poses: [Pose6DoF; 2],
    pub intrinsics: Intrinsics,
}

impl SynthTriplet {
    pub fn images(&self) -> [&Image; 3] {
        [&self.prev.image, &self.target.image, &self.next.image]
    }
}

/// Renders frame `frame` of `scene` seen from `camera` (camera-to-world).
pub fn render(scene: &Scene, frame: usize, camera: &SE3Matrix, intrinsics: &Intrinsics, height: usize, width: usize) -> Result<RenderedFrame> {
    let r = camera.rotation();
    let center = camera.translation();
    let n = height * width;
    let mut rgb = Vec::with_capacity(n * 3);
    let mut depth = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    let mut surface = Vec::with_capacity(n);
    for y in 0..height {
        for x in 0..width {
            // Camera-frame ray with unit z, so the ray parameter is the z-depth.
            let dir = r * intrinsics.back_project(x as f64, y as f64);
            let hit = scene
                .planes
                .iter()
                .enumerate()
                .filter_map(|(i, p)| p.intersect(frame, &center, &dir).map(|h| (i, h)))
                .min_by(|a, b| a.1 .0.total_cmp(&b.1 .0));
            let Some((i, (t, u, v))) = hit else {
                return Err(Error::RayMiss { x, y });
            };
            let plane = &scene.planes[i];
            rgb.extend(plane.texture.sample(u, v));
            depth.push(t);
            ids.push(plane.class_id);
            surface.push(i);
        }
    }
    Ok(RenderedFrame {
        image: Image::new(Tensor::from_vec(Shape::new(height, width, 3), rgb)?)?,
        depth: DepthMap::new(Tensor::from_vec(Shape::plane(height, width), depth)?)?,
        seg: SegMask::new(height, width, ids)?,
        surface,
    })
}

impl Scene {
    pub fn frames(&self) -> usize {
        self.cameras.len()
    }

    pub fn render_frame(&self, frame: usize) -> Result<RenderedFrame> {
        let cam = self
            .cameras
            .get(frame)
            .ok_or_else(|| Error::Invalid(format!("frame {frame} outside 0..{}", self.frames())))?;
        render(self, frame, cam, &self.intrinsics, self.height, self.width)
    }

    /// Transform from the camera frame of `from` to that of `to`.
    pub fn relative_pose(&self, from: usize, to: usize) -> Pose6DoF {
        self.cameras[to].inverse().compose(&self.cameras[from]).to_pose()
    }

    /// The triplet centred on `center`.
    pub fn triplet(&self, center: usize) -> Result<SynthTriplet> {
        if center == 0 || center + 1 >= self.frames() {
            return invalid(format!("frame {center} has no neighbours on both sides"));
        }
        Ok(SynthTriplet {
            prev: self.render_frame(center - 1)?,
            target: self.render_frame(center)?,
            next: self.render_frame(center + 1)?,
            poses: [self.relative_pose(center, center - 1), self.relative_pose(center, center + 1)],
            intrinsics: self.intrinsics,
        })
    }

    /// All triplets of the sequence in order.
    pub fn triplets(&self) -> Result<Vec<SynthTriplet>> {
        (1..self.frames().saturating_sub(1)).map(|c| self.triplet(c)).collect()
    }

    pub fn has_moving_planes(&self) -> bool {
        self.planes.iter().any(Plane::is_moving)
    }
}

/// Pixels within `radius` (Chebyshev) of a change of visible surface.
pub fn occlusion_edge_mask(surface: &[usize], height: usize, width: usize, radius: usize) -> Result<BinaryMask> {
    if surface.len() != height * width {
        return invalid("surface index map has the wrong size");
    }
    let at = |y: usize, x: usize| surface[y * width + x];
    let mut edge = vec![false; surface.len()];
    for y in 0..height {
        for x in 0..width {
            let right = x + 1 < width && at(y, x) != at(y, x + 1);
            let down = y + 1 < height && at(y, x) != at(y + 1, x);
            if right || down {
                edge[y * width + x] = true;
                if right {
                    edge[y * width + x + 1] = true;
                }
                if down {
                    edge[(y + 1) * width + x] = true;
                }
            }
        }
    }
    let mut out = vec![false; surface.len()];
    for y in 0..height {
        for x in 0..width {
            if !edge[y * width + x] {
                continue;
            }
            for yy in y.saturating_sub(radius)..(y + radius + 1).min(height) {
                for xx in x.saturating_sub(radius)..(x + radius + 1).min(width) {
                    out[yy * width + xx] = true;
                }
            }
        }
    }
    BinaryMask::new(height, width, out)
}

/// Pixels whose 3×3 neighbourhood has a channel-mean standard deviation above `min_std`.
pub fn textured_mask(image: &Image, min_std: f64) -> BinaryMask {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let mut bits = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut std = 0.0;
            for ch in 0..c {
                let (mut s, mut s2, mut n) = (0.0, 0.0, 0.0);
                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                    for xx in x.saturating_sub(1)..(x + 2).min(w) {
                        let v = image.at(yy, xx, ch);
                        s += v;
                        s2 += v * v;
                        n += 1.0;
                    }
                }
                let mean = s / n;
                std += (s2 / n - mean * mean).max(0.0).sqrt();
            }
            bits.push(std / c as f64 > min_std);
        }
    }
    BinaryMask::new(h, w, bits).expect("shape")
}

fn default_wave_count() -> usize {
    3
}

fn default_min_wavelength() -> f64 {
    2.0
}

/// A plane as written in a scene description file.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneSpec {
    pub name: String,
    pub origin: [f64; 3],
    pub u_axis: [f64; 3],
    pub v_axis: [f64; 3],
    pub u_range: Option<[f64; 2]>,
    pub v_range: Option<[f64; 2]>,
    pub class_id: u8,
    #[serde(default)]
    pub motion: [f64; 3],
    /// Explicit texture; when absent one is drawn from the scene seed.
    pub waves: Option<Vec<Wave>>,
    #[serde(default = "default_wave_count")]
    pub wave_count: usize,
    #[serde(default = "default_min_wavelength")]
    pub min_wavelength: f64,
}

/// Scene description: planes, trajectory and calibration.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    #[serde(default)]
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// `fx fy cx cy`; KITTI-like when absent.
    pub intrinsics: Option<[f64; 4]>,
    /// Camera centre at frame 0.
    #[serde(default)]
    pub camera_origin: [f64; 3],
    /// Camera translation per frame, world coordinates.
    pub camera_step: [f64; 3],
    /// Camera rotation per frame (axis-angle, composed each frame).
    #[serde(default)]
    pub camera_rotation_step: [f64; 3],
    pub planes: Vec<PlaneSpec>,
}

impl SceneSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Builds a scene from its description; textures are seeded per plane.
pub fn make_scene(spec: &SceneSpec) -> Result<Scene> {
    if spec.height < 3 || spec.width < 3 {
        return invalid("scene needs at least 3×3 pixels");
    }
    if spec.frames == 0 {
        return invalid("scene needs at least one frame");
    }
    if spec.planes.is_empty() {
        return invalid("scene needs at least one plane");
    }
    let intrinsics = match spec.intrinsics {
        Some([fx, fy, cx, cy]) => Intrinsics::new(fx, fy, cx, cy)?,
        None => Intrinsics::kitti_like(spec.height, spec.width),
    };
    let step = rotation_matrix(&Vector3::from(spec.camera_rotation_step));
    let mut rot = nalgebra::Matrix3::identity();
    let mut cameras = Vec::with_capacity(spec.frames);
    for f in 0..spec.frames {
        let c = Vector3::from(spec.camera_origin) + Vector3::from(spec.camera_step) * f as f64;
        cameras.push(SE3Matrix::from_parts(&rot, &c));
        rot *= step;
    }

    let mut planes = Vec::with_capacity(spec.planes.len());
    for (i, p) in spec.planes.iter().enumerate() {
        let u = Vector3::from(p.u_axis);
        let v = Vector3::from(p.v_axis);
        if (u.norm() - 1.0).abs() > 1e-9 || (v.norm() - 1.0).abs() > 1e-9 || u.dot(&v).abs() > 1e-9 {
            return invalid(format!("plane {:?} needs orthonormal axes", p.name));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
        let texture = match &p.waves {
            Some(w) => Texture::new(w.clone())?,
            None => Texture::random(&mut rng, p.wave_count, p.min_wavelength),
        };
        let plane = Plane {
            name: p.name.clone(),
            origin: Vector3::from(p.origin),
            u_axis: u,
            v_axis: v,
            u_range: p.u_range,
            v_range: p.v_range,
            class_id: p.class_id,
            texture,
            motion: Vector3::from(p.motion),
        };
        // The plane must lie in front of the first camera somewhere along its normal.
        let n = plane.normal();
        let cam0 = cameras[0].translation();
        let forward = cameras[0].rotation().column(2).into_owned();
        let dist = n.dot(&(plane.origin - cam0));
        let ahead = (plane.origin - cam0).dot(&forward) > 0.0 || (n.dot(&forward) != 0.0 && dist / n.dot(&forward) > 0.0);
        if !ahead {
            return invalid(format!("plane {:?} lies behind the camera", p.name));
        }
        planes.push(plane);
    }
    Ok(Scene {
        planes,
        cameras,
        intrinsics,
        height: spec.height,
        width: spec.width,
    })
}

/// Names of the built-in scenes.
pub const PRESETS: [&str; 3] = ["static-street", "moving-car", "wall"];

/// Image size of the built-in scenes.
pub const PRESET_SIZE: (usize, usize) = (64, 192);

fn jitter(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    rng.gen_range(-scale..scale)
}

/// Street-like preset description with `frames` frames; the target of the
/// first triplet is frame 1 at the world origin.
pub fn preset_spec(name: &str, seed: u64, frames: usize) -> Result<SceneSpec> {
    let (height, width) = PRESET_SIZE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
    let step = [0.3 + jitter(&mut rng, 0.05), 0.0, 1.0 + jitter(&mut rng, 0.1)];
    let origin = [-step[0], 0.0, -step[2]];
    let wall_z = 15.0 + jitter(&mut rng, 1.0);
    let wall = PlaneSpec {
        name: "wall".into(),
        origin: [0.0, 0.0, wall_z],
        u_axis: [1.0, 0.0, 0.0],
        v_axis: [0.0, 1.0, 0.0],
        u_range: None,
        v_range: None,
        class_id: class::BUILDING,
        motion: [0.0; 3],
        waves: None,
        wave_count: 3,
        min_wavelength: 2.5,
    };
    let ground = PlaneSpec {
        name: "ground".into(),
        origin: [0.0, 1.5, 0.0],
        u_axis: [1.0, 0.0, 0.0],
        v_axis: [0.0, 0.0, 1.0],
        u_range: None,
        v_range: None,
        class_id: class::ROAD,
        motion: [0.0; 3],
        waves: Some(vec![
            Wave {
                wavelength: 3.0 + jitter(&mut rng, 0.3),
                angle: 0.0,
                amplitude: [0.2, 0.18, 0.15],
                phase: rng.gen_range(0.0..2.0 * PI),
            },
            Wave {
                wavelength: 25.0 + jitter(&mut rng, 3.0),
                angle: PI / 2.0,
                amplitude: [0.15, 0.2, 0.2],
                phase: rng.gen_range(0.0..2.0 * PI),
            },
        ]),
        wave_count: 2,
        min_wavelength: 1.5,
    };
    let car_z = 8.0 + jitter(&mut rng, 0.5);
    let car = |x0: f64, motion: [f64; 3]| PlaneSpec {
        name: "car".into(),
        origin: [x0, -0.5, car_z],
        u_axis: [1.0, 0.0, 0.0],
        v_axis: [0.0, 1.0, 0.0],
        u_range: Some([0.0, 2.5]),
        v_range: Some([0.0, 2.0]),
        class_id: class::CAR,
        motion,
        waves: None,
        wave_count: 3,
        min_wavelength: 1.2,
    };
    let planes = match name {
        "static-street" => vec![wall, ground, car(1.5 + jitter(&mut rng, 0.3), [0.0; 3])],
        // The car covers more than its own width between consecutive frames.
        "moving-car" => {
            let speed = 2.8 + jitter(&mut rng, 0.2);
            vec![wall, ground, car(-1.0 + jitter(&mut rng, 0.3) - speed, [speed, 0.0, 0.0])]
        }
        "wall" => vec![wall],
        other => return invalid(format!("unknown preset {other:?}; expected one of {PRESETS:?}")),
    };
    Ok(SceneSpec {
        seed,
        height,
        width,
        frames,
        intrinsics: None,
        camera_origin: origin,
        camera_step: step,
        camera_rotation_step: [0.0; 3],
        planes,
    })
}

/// Built-in scene with three frames.
pub fn preset(name: &str, seed: u64) -> Result<Scene> {
    make_scene(&preset_spec(name, seed, 3)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project_coords;
    use crate::losses::photometric_loss;
    use crate::warp::bilinear_warp;

    fn fronto(z: f64) -> SceneSpec {
        SceneSpec {
            seed: 1,
            height: 16,
            width: 24,
            frames: 3,
            intrinsics: None,
            camera_origin: [0.0; 3],
            camera_step: [0.2, 0.0, 0.0],
            camera_rotation_step: [0.0; 3],
            planes: vec![PlaneSpec {
                name: "wall".into(),
                origin: [0.0, 0.0, z],
                u_axis: [1.0, 0.0, 0.0],
                v_axis: [0.0, 1.0, 0.0],
                u_range: None,
                v_range: None,
                class_id: 2,
                motion: [0.0; 3],
                waves: None,
                wave_count: 3,
                min_wavelength: 1.0,
            }],
        }
    }

    #[test]
    fn fronto_parallel_plane_has_constant_depth() {
        let scene = make_scene(&fronto(5.0)).unwrap();
        let f = scene.render_frame(0).unwrap();
        assert!(f.depth.data().iter().all(|d| (d - 5.0).abs() < 1e-12));
    }

    #[test]
    fn depth_matches_analytic_ray_plane_distance() {
        let scene = preset("static-street", 3).unwrap();
        let f = scene.render_frame(1).unwrap();
        let k = scene.intrinsics;
        let cam = scene.cameras[1];
        for y in (0..64).step_by(7) {
            for x in (0..192).step_by(11) {
                let p = &scene.planes[f.surface[y * 192 + x]];
                let dir = cam.rotation() * k.back_project(x as f64, y as f64);
                let n = p.normal();
                let t = n.dot(&(p.origin_at(1) - cam.translation())) / n.dot(&dir);
                assert!((f.depth.at(y, x, 0) - t).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn lateral_shift_matches_disparity() {
        // Camera moves 0.2 along x; a plane at depth 5 shifts by fx·0.2/5 pixels.
        let mut spec = fronto(5.0);
        spec.width = 64;
        spec.planes[0].min_wavelength = 4.0;
        let scene = make_scene(&spec).unwrap();
        let a = scene.render_frame(0).unwrap().image;
        let b = scene.render_frame(1).unwrap().image;
        let expected = scene.intrinsics.fx * 0.2 / 5.0;
        // Sum of squared differences over candidate shifts, with linear
        // interpolation along each row; its minimum is the correlation peak.
        let ssd = |s: f64| {
            let mut acc = 0.0;
            for y in 0..16 {
                for x in 8..56 {
                    let xs = x as f64 - s;
                    let x0 = xs.floor() as usize;
                    let f = xs - x0 as f64;
                    for c in 0..3 {
                        let v = (1.0 - f) * b.at(y, x0, c) + f * b.at(y, x0 + 1, c);
                        acc += (a.at(y, x, c) - v).powi(2);
                    }
                }
            }
            acc
        };
        let best = (0..=400).map(|i| i as f64 * 0.01).min_by(|p, q| ssd(*p).total_cmp(&ssd(*q))).unwrap();
        assert!((best - expected).abs() < 0.05, "peak {best} vs {expected}");
    }

    #[test]
    fn relative_pose_maps_points_between_frames() {
        let scene = preset("static-street", 0).unwrap();
        let pose = scene.relative_pose(1, 2);
        let p = Vector3::new(0.3, -0.2, 7.0);
        let world = scene.cameras[1].transform_point(&p);
        let direct = scene.cameras[2].inverse().transform_point(&world);
        let via = pose.matrix().transform_point(&p);
        assert!((direct - via).norm() < 1e-12);
    }

    #[test]
    fn warp_consistency_at_ground_truth() {
        for seed in 0..2 {
            let scene = preset("static-street", seed).unwrap();
            let t = scene.triplet(1).unwrap();
            let mut projected = Vec::new();
            for (src, pose) in [(&t.prev, t.poses[0]), (&t.next, t.poses[1])] {
                let coords = project_coords(&t.target.depth, &t.intrinsics, &pose).unwrap();
                projected.push(bilinear_warp(&src.image, &coords).unwrap().0);
            }
            let edges = occlusion_edge_mask(&t.target.surface, 64, 192, 2).unwrap();
            let loss = photometric_loss(&t.target.image, &projected, 0.85, Some(&edges.not())).unwrap();
            assert!(loss < 1e-3, "seed {seed}: {loss}");
        }
    }

    #[test]
    fn presets_render_and_differ_by_seed() {
        for name in PRESETS {
            let a = preset(name, 1).unwrap().render_frame(1).unwrap();
            let b = preset(name, 2).unwrap().render_frame(1).unwrap();
            assert_ne!(a.image, b.image);
            assert!(a.depth.data().iter().all(|d| (0.1..=100.0).contains(d)));
        }
        assert_eq!(preset("wall", 4).unwrap(), preset("wall", 4).unwrap());
        assert!(preset("nope", 0).is_err());
    }

    #[test]
    fn ray_miss_is_reported() {
        let mut spec = fronto(5.0);
        spec.planes[0].u_range = Some([-0.1, 0.1]);
        let scene = make_scene(&spec).unwrap();
        assert!(matches!(scene.render_frame(0), Err(Error::RayMiss { .. })));
    }

    #[test]
    fn plane_behind_camera_is_rejected() {
        assert!(make_scene(&fronto(-5.0)).is_err());
    }

    #[test]
    fn edge_mask_dilates_by_radius() {
        let mut surface = vec![0usize; 7 * 9];
        for y in 0..7 {
            surface[y * 9 + 8] = 1;
        }
        let m = occlusion_edge_mask(&surface, 7, 9, 2).unwrap();
        for y in 0..7 {
            for x in 0..9 {
                assert_eq!(m.at(y, x), x >= 5, "({y}, {x})");
            }
        }
    }

    #[test]
    fn scene_spec_parses_from_toml() {
        let text = r#"
            seed = 3
            height = 8
            width = 12
            frames = 3
            camera_step = [0.1, 0.0, 0.5]
            [[planes]]
            name = "wall"
            origin = [0.0, 0.0, 6.0]
            u_axis = [1.0, 0.0, 0.0]
            v_axis = [0.0, 1.0, 0.0]
            class_id = 2
            waves = [{ wavelength = 2.0, angle = 0.5, amplitude = [0.1, 0.2, 0.3] }]
        "#;
        let spec = SceneSpec::from_toml(text).unwrap();
        let scene = make_scene(&spec).unwrap();
        assert_eq!(scene.planes[0].texture.waves.len(), 1);
        assert!(SceneSpec::from_toml("height = 1\nbogus = 2").is_err());
    }
}
