//! Pinhole intrinsics, axis-angle poses and the depth-driven reprojection of
//! target pixels into a neighbouring view.
//!
//! Pixel coordinates are `u = (x, y, 1)` with `x` along the width and
//! `K = [[fx, 0, cx], [0, fy, cy], [0, 0, 1]]`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};

use crate::autodiff::{Graph, Op, Var};
use crate::error::{invalid, Error, Result};
use crate::tensor::{CoordinateField, DepthMap, Shape, Tensor};

/// Transformed points closer than this to the camera plane are out of view.
pub const MIN_VIEW_DEPTH: f64 = 1e-9;

/// Below this rotation angle the Rodrigues coefficients use their Taylor series.
const SMALL_ANGLE: f64 = 1e-6;

/// Below this angle the derivative coefficients use their Taylor series.
const SMALL_ANGLE_DERIV: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    /// KITTI-like calibration for a `height × width` image.
    pub fn kitti_like(height: usize, width: usize) -> Self {
        Self {
            fx: 0.58 * width as f64,
            fy: 1.92 * height as f64,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all_finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !all_finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return invalid(format!("intrinsics {self} need finite values and positive focal lengths"));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// `K⁻¹ u` for pixel `(x, y)`.
    #[inline]
    pub fn back_project(&self, x: f64, y: f64) -> Vector3<f64> {
        Vector3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0)
    }

    /// Intrinsics for an image resized by `(sx, sy)`.
    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        std::fs::read_to_string(path)?.parse()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, format!("{self}\n"))?;
        Ok(())
    }
}

impl fmt::Display for Intrinsics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {}", self.fx, self.fy, self.cx, self.cy)
    }
}

impl FromStr for Intrinsics {
    type Err = Error;

    /// Four whitespace-separated reals: `fx fy cx cy`.
    fn from_str(s: &str) -> Result<Self> {
        let vals: Vec<f64> = s
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| Error::Format(format!("intrinsics value `{t}`: {e}"))))
            .collect::<Result<_>>()?;
        if vals.len() != 4 {
            return Err(Error::Format(format!("intrinsics need 4 values, found {}", vals.len())));
        }
        Self::new(vals[0], vals[1], vals[2], vals[3])
    }
}

/// Minimal relative camera motion: axis-angle rotation (radians) and translation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Pose6DoF {
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
}

impl Pose6DoF {
    pub const IDENTITY: Pose6DoF = Pose6DoF {
        rotation: [0.0; 3],
        translation: [0.0; 3],
    };

    pub fn new(rotation: [f64; 3], translation: [f64; 3]) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: [f64; 3]) -> Self {
        Self::new([0.0; 3], t)
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().chain(&self.translation).all(|v| v.is_finite())
    }

    /// `1×1×6` parameter vector `[rx, ry, rz, tx, ty, tz]`.
    pub fn to_tensor(&self) -> Tensor {
        let r = self.rotation;
        let t = self.translation;
        Tensor::vector(&[r[0], r[1], r[2], t[0], t[1], t[2]])
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let d = t.data();
        if d.len() != 6 {
            return invalid(format!("pose vector needs 6 values, got {}", d.len()));
        }
        Ok(Self::new([d[0], d[1], d[2]], [d[3], d[4], d[5]]))
    }

    pub fn with_scaled_translation(&self, s: f64) -> Self {
        Self::new(self.rotation, self.translation.map(|v| v * s))
    }

    pub fn matrix(&self) -> SE3Matrix {
        pose_to_matrix(self)
    }
}

impl fmt::Display for Pose6DoF {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = self.rotation;
        let t = self.translation;
        write!(f, "{} {} {} {} {} {}", r[0], r[1], r[2], t[0], t[1], t[2])
    }
}

impl FromStr for Pose6DoF {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let vals: Vec<f64> = s
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| Error::Format(format!("pose value `{t}`: {e}"))))
            .collect::<Result<_>>()?;
        if vals.len() != 6 {
            return Err(Error::Format(format!("pose needs 6 values, found {}", vals.len())));
        }
        Ok(Self::new([vals[0], vals[1], vals[2]], [vals[3], vals[4], vals[5]]))
    }
}

/// A rigid transform as a homogeneous 4×4 matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SE3Matrix(pub Matrix4<f64>);

impl SE3Matrix {
    pub fn identity() -> Self {
        Self(Matrix4::identity())
    }

    pub fn from_parts(r: &Matrix3<f64>, t: &Vector3<f64>) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(t);
        Self(m)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.0.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation().transpose();
        Self::from_parts(&rt, &(-rt * self.translation()))
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &SE3Matrix) -> Self {
        Self(self.0 * other.0)
    }

    /// Orthonormal rotation block with determinant +1 and bottom row `(0, 0, 0, 1)`.
    pub fn is_valid(&self, tol: f64) -> bool {
        let r = self.rotation();
        let orth = (r.transpose() * r - Matrix3::identity()).abs().max() <= tol;
        let det = (r.determinant() - 1.0).abs() <= tol;
        let row = self.0.row(3);
        let bottom = row[0] == 0.0 && row[1] == 0.0 && row[2] == 0.0 && row[3] == 1.0;
        orth && det && bottom && self.0.iter().all(|v| v.is_finite())
    }

    /// Axis-angle and translation of this transform.
    pub fn to_pose(&self) -> Pose6DoF {
        let rot = Rotation3::from_matrix_unchecked(self.rotation());
        let w = rot.scaled_axis();
        let t = self.translation();
        Pose6DoF::new([w.x, w.y, w.z], [t.x, t.y, t.z])
    }
}

#[inline]
fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// `A = sin θ / θ` and `B = (1 − cos θ) / θ²` of the Rodrigues formula.
fn rodrigues_coeffs(theta: f64) -> (f64, f64) {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0)
    } else {
        let half = (0.5 * theta).sin();
        (theta.sin() / theta, 2.0 * half * half / (theta * theta))
    }
}

/// `C = A'(θ)/θ` and `D = B'(θ)/θ`, used by the rotation Jacobian.
fn rodrigues_deriv_coeffs(theta: f64) -> (f64, f64) {
    let t2 = theta * theta;
    if theta < SMALL_ANGLE_DERIV {
        (
            -1.0 / 3.0 + t2 / 30.0 - t2 * t2 / 840.0,
            -1.0 / 12.0 + t2 / 180.0 - t2 * t2 / 6720.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let half = (0.5 * theta).sin();
        (
            (theta * c - s) / (t2 * theta),
            (theta * s - 4.0 * half * half) / (t2 * t2),
        )
    }
}

/// Rotation matrix of an axis-angle vector.
pub fn rotation_matrix(w: &Vector3<f64>) -> Matrix3<f64> {
    let (a, b) = rodrigues_coeffs(w.norm());
    let k = skew(w);
    Matrix3::identity() + k * a + k * k * b
}

/// `∂R/∂w_k` for `k = 0, 1, 2`.
pub fn rotation_jacobian(w: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    let theta = w.norm();
    let (a, b) = rodrigues_coeffs(theta);
    let (c, d) = rodrigues_deriv_coeffs(theta);
    let k = skew(w);
    let k2 = k * k;
    std::array::from_fn(|i| {
        let e = skew(&Vector3::ith(i, 1.0));
        k * (c * w[i]) + e * a + k2 * (d * w[i]) + (e * k + k * e) * b
    })
}

/// Rodrigues exponential of the rotation; the translation is copied.
pub fn pose_to_matrix(pose: &Pose6DoF) -> SE3Matrix {
    let w = Vector3::from(pose.rotation);
    SE3Matrix::from_parts(&rotation_matrix(&w), &Vector3::from(pose.translation))
}

/// Reprojects every target pixel into the view reached by `pose`.
///
/// Each pixel is lifted to `d · K⁻¹ u`, moved by the pose, projected with
/// `K` and divided by its third homogeneous component. Points that land at
/// or behind the camera plane are flagged out of view.
pub fn project_coords(depth: &DepthMap, intrinsics: &Intrinsics, pose: &Pose6DoF) -> Result<CoordinateField> {
    let mut g = Graph::new();
    let d = g.constant(depth.tensor().clone());
    let p = g.constant(pose.to_tensor());
    let (c, in_view) = g.project(d, p, intrinsics)?;
    CoordinateField::new(g.value(c).clone(), in_view)
}

/// Placeholder coordinate written for out-of-view pixels; the samplers clamp it.
const OUT_OF_VIEW: f64 = -1.0;

fn project_forward(depth: &Tensor, pose: &Tensor, k: &Intrinsics) -> (Tensor, Vec<bool>) {
    let s = depth.shape();
    let p = pose.data();
    let r = rotation_matrix(&Vector3::new(p[0], p[1], p[2]));
    let t = Vector3::new(p[3], p[4], p[5]);
    let mut out = Vec::with_capacity(s.pixels() * 2);
    let mut in_view = Vec::with_capacity(s.pixels());
    // The identity transform maps every pixel onto itself; skipping the
    // round trip through K⁻¹ keeps the grid exact.
    let identity = p.iter().all(|v| *v == 0.0);
    for y in 0..s.height {
        for x in 0..s.width {
            if identity {
                out.push(x as f64);
                out.push(y as f64);
                in_view.push(true);
                continue;
            }
            let ray = k.back_project(x as f64, y as f64);
            let q = r * (ray * depth.at(y, x, 0)) + t;
            if q.z > MIN_VIEW_DEPTH {
                out.push(k.fx * q.x / q.z + k.cx);
                out.push(k.fy * q.y / q.z + k.cy);
                in_view.push(true);
            } else {
                out.push(OUT_OF_VIEW);
                out.push(OUT_OF_VIEW);
                in_view.push(false);
            }
        }
    }
    let t = Tensor::from_vec(Shape::new(s.height, s.width, 2), out).expect("shape");
    (t, in_view)
}

/// Vector-Jacobian products of the projection w.r.t. depth and the 6 pose parameters.
pub(crate) fn project_adjoint(
    depth: &Tensor,
    pose: &Tensor,
    k: &Intrinsics,
    in_view: &[bool],
    g: &[f64],
    want_depth: bool,
    want_pose: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let s = depth.shape();
    let p = pose.data();
    let w = Vector3::new(p[0], p[1], p[2]);
    let r = rotation_matrix(&w);
    let t = Vector3::new(p[3], p[4], p[5]);
    let mut gd = want_depth.then(|| vec![0.0; s.pixels()]);
    let mut gt = Vector3::zeros();
    // Σ gQ Pᵀ, contracted with ∂R/∂w_k at the end.
    let mut outer = Matrix3::zeros();
    for y in 0..s.height {
        for x in 0..s.width {
            let i = y * s.width + x;
            if !in_view[i] {
                continue;
            }
            let (gx, gy) = (g[2 * i], g[2 * i + 1]);
            if gx == 0.0 && gy == 0.0 {
                continue;
            }
            let ray = k.back_project(x as f64, y as f64);
            let pt = ray * depth.at(y, x, 0);
            let q = r * pt + t;
            let iz = 1.0 / q.z;
            let gq = Vector3::new(
                gx * k.fx * iz,
                gy * k.fy * iz,
                -(gx * k.fx * q.x + gy * k.fy * q.y) * iz * iz,
            );
            if let Some(gd) = gd.as_mut() {
                gd[i] += gq.dot(&(r * ray));
            }
            if want_pose {
                gt += gq;
                outer += gq * pt.transpose();
            }
        }
    }
    let gp = want_pose.then(|| {
        let jac = rotation_jacobian(&w);
        let mut v = vec![0.0; 6];
        for (kk, j) in jac.iter().enumerate() {
            v[kk] = j.component_mul(&outer).sum();
        }
        v[3] = gt.x;
        v[4] = gt.y;
        v[5] = gt.z;
        v
    });
    (gd, gp)
}

impl Graph {
    /// Differentiable reprojection of a `H×W×1` depth node under a `1×1×6` pose node.
    ///
    /// Returns the `H×W×2` coordinate node and the per-pixel in-view flags.
    pub fn project(&mut self, depth: Var, pose: Var, intrinsics: &Intrinsics) -> Result<(Var, Vec<bool>)> {
        let (td, tp) = (self.value(depth), self.value(pose));
        if td.shape().channels != 1 || tp.shape().len() != 6 {
            return Err(Error::Shape {
                op: "project_coords",
                lhs: td.shape(),
                rhs: tp.shape(),
            });
        }
        let (value, in_view) = project_forward(td, tp, intrinsics);
        let op = Op::Project {
            depth: depth.0,
            pose: pose.0,
            intrinsics: *intrinsics,
            in_view: in_view.clone(),
        };
        Ok((self.push(value, op, &[depth.0, pose.0]), in_view))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn k() -> Intrinsics {
        Intrinsics::new(50.0, 45.0, 8.0, 6.0).unwrap()
    }

    #[test]
    fn zero_pose_is_identity() {
        let m = pose_to_matrix(&Pose6DoF::IDENTITY);
        assert_eq!(m.0, Matrix4::identity());
    }

    #[test]
    fn half_turn_about_z() {
        let m = pose_to_matrix(&Pose6DoF::new([0.0, 0.0, PI], [0.0; 3]));
        // Independent evaluation: R = I + sinθ K + (1 − cosθ) K² with unit axis z.
        let kz = skew(&Vector3::z());
        let expected = Matrix3::identity() + kz * PI.sin() + kz * kz * (1.0 - PI.cos());
        assert!((m.rotation() - expected).abs().max() < 1e-12);
        let diag = Matrix3::from_diagonal(&Vector3::new(-1.0, -1.0, 1.0));
        assert!((m.rotation() - diag).abs().max() < 1e-12);
        assert!(m.is_valid(1e-9));
    }

    #[test]
    fn tiny_rotation_uses_small_angle_branch() {
        let m = pose_to_matrix(&Pose6DoF::new([1e-12, 0.0, 0.0], [0.0; 3]));
        assert!(m.0.iter().all(|v| v.is_finite()));
        assert!((m.rotation() - Matrix3::identity()).abs().max() < 1e-11);
        assert!(m.is_valid(1e-9));
    }

    #[test]
    fn matrix_round_trips_through_log() {
        let pose = Pose6DoF::new([0.1, -0.3, 0.2], [1.0, 2.0, -0.5]);
        let back = pose.matrix().to_pose();
        for i in 0..3 {
            assert!((back.rotation[i] - pose.rotation[i]).abs() < 1e-12);
            assert!((back.translation[i] - pose.translation[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_jacobian_matches_finite_differences() {
        for w in [
            Vector3::new(0.3, -0.2, 0.5),
            Vector3::new(1e-3, 2e-3, -1e-3),
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(2.5, 0.4, -1.0),
        ] {
            let jac = rotation_jacobian(&w);
            for (kk, j) in jac.iter().enumerate() {
                let h = 1e-6;
                let mut wp = w;
                wp[kk] += h;
                let mut wm = w;
                wm[kk] -= h;
                let fd = (rotation_matrix(&wp) - rotation_matrix(&wm)) / (2.0 * h);
                assert!((fd - j).abs().max() < 1e-8, "w={w:?} k={kk}");
            }
        }
    }

    #[test]
    fn identity_pose_reproduces_grid() {
        let d = DepthMap::constant(5, 7, 3.3).unwrap();
        let c = project_coords(&d, &k(), &Pose6DoF::IDENTITY).unwrap();
        for y in 0..5 {
            for x in 0..7 {
                assert_eq!(c.at(y, x), (x as f64, y as f64));
            }
        }
    }

    #[test]
    fn lateral_translation_shifts_by_disparity() {
        let (tx, depth) = (0.2, 4.0);
        let d = DepthMap::constant(5, 7, depth).unwrap();
        let c = project_coords(&d, &k(), &Pose6DoF::from_translation([tx, 0.0, 0.0])).unwrap();
        for y in 0..5 {
            for x in 0..7 {
                let (px, py) = c.at(y, x);
                assert!((px - (x as f64 + k().fx * tx / depth)).abs() < 1e-12);
                assert!((py - y as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn point_behind_camera_is_out_of_view() {
        let d = DepthMap::constant(3, 3, 1.0).unwrap();
        let c = project_coords(&d, &k(), &Pose6DoF::from_translation([0.0, 0.0, -2.0])).unwrap();
        assert!(c.in_view().iter().all(|v| !v));
    }

    #[test]
    fn intrinsics_text_round_trip() {
        let k: Intrinsics = "718.5 718.5 607.2 185.2".parse().unwrap();
        assert_eq!(k.fx, 718.5);
        assert_eq!(k.to_string().parse::<Intrinsics>().unwrap(), k);
        assert!("1 2 3".parse::<Intrinsics>().is_err());
        assert!("-1 2 3 4".parse::<Intrinsics>().is_err());
    }
}
