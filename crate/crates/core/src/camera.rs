//! Pinhole camera model, rigid camera poses and the line-projection matrix.
//!
//! Poses are stored as world-to-camera transforms `X_c = R·X_w + t`. Tangent
//! increments are ordered `(ω, ρ)` (rotation first) and applied on the left:
//! `retract(T, δ) = exp(δ)·T`. The Jacobians in [`crate::ba`] use the same
//! layout.

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlamError};

/// Camera-frame depths at or below this value count as behind the camera.
pub const MIN_DEPTH: f64 = 1e-9;

const ORTHO_DRIFT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let all_finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite());
        if !all_finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(SlamError::InvalidInput(format!(
                "intrinsics must be finite with positive focal lengths, got {self:?}"
            )));
        }
        Ok(())
    }

    /// The 3×3 calibration matrix `K`.
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

impl PixelPoint {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn homogeneous(&self) -> Vector3<f64> {
        Vector3::new(self.u, self.v, 1.0)
    }
}

/// Skew-symmetric matrix `[v]ₓ` with `[v]ₓ·w = v × w`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues exponential map on SO(3).
pub fn so3_exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let k = skew(omega);
    let (a, b) = if theta2 < 1e-16 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Logarithm map on SO(3), valid on the full rotation range including π.
pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos_theta = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    let vee = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    if theta < 1e-8 {
        return vee * 0.5 * (1.0 + theta * theta / 6.0);
    }
    if std::f64::consts::PI - theta < 1e-6 {
        // Near π the antisymmetric part vanishes; read the axis from R + I.
        let b = (r + Matrix3::identity()) * 0.5;
        let diag = b.diagonal();
        let i = diag.imax();
        let mut axis = b.column(i).into_owned() / diag[i].max(1e-300).sqrt();
        axis.normalize_mut();
        if axis.dot(&vee) < 0.0 {
            axis = -axis;
        }
        return axis * theta;
    }
    vee * (theta / (2.0 * theta.sin()))
}

/// Left Jacobian of SO(3), the `V` matrix of the SE(3) exponential.
pub fn so3_left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let k = skew(omega);
    let (b, c) = if theta2 < 1e-16 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() + k * b + k * k * c
}

/// Projects a near-rotation onto SO(3) by polar decomposition.
pub fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut out = u * v_t;
    if out.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        out = u2 * v_t;
    }
    out
}

fn rotation_drift(r: &Matrix3<f64>) -> f64 {
    let e = r.transpose() * r - Matrix3::identity();
    e.abs().max().max((r.determinant() - 1.0).abs())
}

/// Rigid world-to-camera transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseSE3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, re-orthonormalizing the rotation if it drifted.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rotation = if rotation_drift(&rotation) > ORTHO_DRIFT_TOL {
            orthonormalize(&rotation)
        } else {
            rotation
        };
        Self {
            rotation,
            translation,
        }
    }

    /// Pose of a camera centred at `center` looking at `target`, with the image
    /// `-y` axis aligned to `up` as far as possible.
    pub fn look_at(center: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> Self {
        let z = (target - center).normalize();
        let mut x = z.cross(up);
        if x.norm() < 1e-9 {
            x = z.cross(&Vector3::new(1.0, 0.0, 0.0));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        // Rows of R_cw are the camera axes expressed in the world frame.
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let r = orthonormalize(&r);
        Self::new(r, -(r * center))
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// `[R | t]` as a 3×4 matrix.
    pub fn extrinsic(&self) -> Matrix3x4<f64> {
        let mut m = Matrix3x4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Camera projection matrix `P = K·[R | t]`.
    pub fn projection_matrix(&self, k: &CameraIntrinsics) -> Matrix3x4<f64> {
        k.matrix() * self.extrinsic()
    }

    /// SE(3) exponential of a `(ω, ρ)` increment.
    pub fn exp(delta: &Vector6<f64>) -> Self {
        let omega = delta.fixed_rows::<3>(0).into_owned();
        let rho = delta.fixed_rows::<3>(3).into_owned();
        Self {
            rotation: so3_exp(&omega),
            translation: so3_left_jacobian(&omega) * rho,
        }
    }

    /// SE(3) logarithm, inverse of [`PoseSE3::exp`].
    pub fn log(&self) -> Vector6<f64> {
        let omega = so3_log(&self.rotation);
        let v = so3_left_jacobian(&omega);
        let rho = v
            .lu()
            .solve(&self.translation)
            .unwrap_or(self.translation);
        let mut out = Vector6::zeros();
        out.fixed_rows_mut::<3>(0).copy_from(&omega);
        out.fixed_rows_mut::<3>(3).copy_from(&rho);
        out
    }

    /// Orthonormality error of the stored rotation.
    pub fn drift(&self) -> f64 {
        rotation_drift(&self.rotation)
    }
}

/// Applies `b` first, then `a`.
pub fn compose(a: &PoseSE3, b: &PoseSE3) -> PoseSE3 {
    PoseSE3::new(
        a.rotation * b.rotation,
        a.rotation * b.translation + a.translation,
    )
}

/// Left-multiplicative update `exp(δ)·pose`; a zero increment returns `pose` unchanged.
pub fn se3_retract(pose: &PoseSE3, delta: &Vector6<f64>) -> PoseSE3 {
    if delta.iter().all(|v| *v == 0.0) {
        return *pose;
    }
    compose(&PoseSE3::exp(delta), pose)
}

pub fn project_point(
    pose: &PoseSE3,
    k: &CameraIntrinsics,
    x_world: &Vector3<f64>,
) -> Result<PixelPoint> {
    project_camera_point(k, &pose.transform_point(x_world))
}

pub fn project_camera_point(k: &CameraIntrinsics, xc: &Vector3<f64>) -> Result<PixelPoint> {
    if xc.z <= MIN_DEPTH {
        return Err(SlamError::BehindCamera { depth: xc.z });
    }
    Ok(PixelPoint::new(
        k.fx * xc.x / xc.z + k.cx,
        k.fy * xc.y / xc.z + k.cy,
    ))
}

/// The matrix `K_L` mapping a camera-frame line moment to its image line.
pub fn line_intrinsics(k: &CameraIntrinsics) -> Matrix3<f64> {
    Matrix3::new(
        k.fy,
        0.0,
        0.0,
        0.0,
        k.fx,
        0.0,
        -k.fy * k.cx,
        -k.fx * k.cy,
        k.fx * k.fy,
    )
}

/// Linear multi-view triangulation of a point from two or more pixel observations.
pub fn triangulate_point(k: &CameraIntrinsics, poses: &[PoseSE3], pixels: &[PixelPoint]) -> Result<Vector3<f64>> {
    if poses.len() != pixels.len() || poses.len() < 2 {
        return Err(SlamError::InsufficientObservations {
            have: poses.len().min(pixels.len()),
            need: 2,
        });
    }
    let mut a = nalgebra::DMatrix::<f64>::zeros(2 * poses.len(), 4);
    for (i, (pose, px)) in poses.iter().zip(pixels).enumerate() {
        let p = pose.projection_matrix(k);
        for c in 0..4 {
            a[(2 * i, c)] = px.u * p[(2, c)] - p[(0, c)];
            a[(2 * i + 1, c)] = px.v * p[(2, c)] - p[(1, c)];
        }
    }
    // Row scaling keeps the smallest singular vector well conditioned.
    for mut row in a.row_iter_mut() {
        let n = row.norm();
        if n > 0.0 {
            row /= n;
        }
    }
    let svd = a.svd(false, true);
    let i = svd.singular_values.imin();
    let h = svd.v_t.expect("requested V").row(i).transpose();
    if h[3].abs() < 1e-12 * h.norm() {
        return Err(SlamError::DegenerateConfiguration("point at infinity"));
    }
    let x = Vector3::new(h[0], h[1], h[2]) / h[3];
    for pose in poses {
        let depth = pose.transform_point(&x).z;
        if depth <= MIN_DEPTH {
            return Err(SlamError::BehindCamera { depth });
        }
    }
    Ok(x)
}
