//! 3D line representations and the operations that move lines between them.
//!
//! A [`PlueckerLine`] `(m, d)` stores the moment `m = p × d` for any point `p`
//! on the line, so the Plücker matrix built from two homogeneous points
//! `X₁X₂ᵀ − X₂X₁ᵀ` has the block form `[[m]ₓ, d; −dᵀ, 0]` with `d = X₁ − X₂`,
//! and the dual matrix of two planes `π₁π₂ᵀ − π₂π₁ᵀ` has the form
//! `[[d]ₓ, m; −mᵀ, 0]`. The rigid transform acting on `(m, d)` is
//! `[[R, [t]ₓR], [0, R]]`.
//!
//! [`OrthonormalLine`] is the minimal 4-DOF parameterization used inside the
//! solver; [`LineSegment3`] carries finite endpoints for display and matching.

use nalgebra::{Matrix2, Matrix3, Matrix3x4, Matrix4, Matrix6, Vector2, Vector3, Vector4, Vector6};
use serde::{Deserialize, Serialize};

use crate::camera::{line_intrinsics, orthonormalize, skew, so3_exp, CameraIntrinsics, PixelPoint, PoseSE3};
use crate::error::{Result, SlamError};

const KLEIN_EPS: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlueckerLine {
    pub m: Vector3<f64>,
    pub d: Vector3<f64>,
}

impl PlueckerLine {
    pub fn new(m: Vector3<f64>, d: Vector3<f64>) -> Self {
        Self { m, d }
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            m: v.fixed_rows::<3>(0).into_owned(),
            d: v.fixed_rows::<3>(3).into_owned(),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.m);
        v.fixed_rows_mut::<3>(3).copy_from(&self.d);
        v
    }

    /// Normalized Klein quadric residual `|m·d| / (‖m‖‖d‖)`.
    pub fn klein_residual(&self) -> f64 {
        self.m.dot(&self.d).abs() / (self.m.norm() * self.d.norm()).max(KLEIN_EPS)
    }

    /// Rescaled to unit 6-norm.
    pub fn normalized(&self) -> Self {
        let n = (self.m.norm_squared() + self.d.norm_squared()).sqrt();
        Self {
            m: self.m / n,
            d: self.d / n,
        }
    }

    /// Cosine between the two 6-vectors; `1` for the same oriented line.
    pub fn cosine(&self, other: &PlueckerLine) -> f64 {
        let a = self.to_vector();
        let b = other.to_vector();
        a.dot(&b) / (a.norm() * b.norm())
    }

    /// Closest point of the line to the origin.
    pub fn closest_point_to_origin(&self) -> Vector3<f64> {
        self.d.cross(&self.m) / self.d.norm_squared()
    }

    /// Primal Plücker matrix `[[m]ₓ, d; −dᵀ, 0]`.
    pub fn primal_matrix(&self) -> Matrix4<f64> {
        let mut l = Matrix4::zeros();
        l.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&self.m));
        l.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.d);
        l.fixed_view_mut::<1, 3>(3, 0).copy_from(&(-self.d.transpose()));
        l
    }

    /// Dual Plücker matrix `[[d]ₓ, m; −mᵀ, 0]`.
    pub fn dual_matrix(&self) -> Matrix4<f64> {
        let mut l = Matrix4::zeros();
        l.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&self.d));
        l.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.m);
        l.fixed_view_mut::<1, 3>(3, 0).copy_from(&(-self.m.transpose()));
        l
    }

    /// Distance from a point to the infinite line.
    pub fn distance_to_point(&self, x: &Vector3<f64>) -> f64 {
        let p = self.closest_point_to_origin();
        (x - p).cross(&self.d).norm() / self.d.norm()
    }
}

/// Line through two points, with `d = X₁ − X₂` and `m = X₁ × d = X₂ × X₁`.
pub fn pluecker_from_endpoints(x1: &Vector3<f64>, x2: &Vector3<f64>) -> Result<PlueckerLine> {
    let d = x1 - x2;
    if d.norm() < 1e-12 {
        return Err(SlamError::DegenerateLine("coincident endpoints"));
    }
    Ok(PlueckerLine { m: x2.cross(x1), d })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrthonormalLine {
    pub u: Matrix3<f64>,
    pub w: Matrix2<f64>,
}

impl OrthonormalLine {
    pub fn identity() -> Self {
        Self {
            u: Matrix3::identity(),
            w: Matrix2::identity(),
        }
    }

    /// `(ω₁, ω₂)`, the first column of `W`.
    pub fn omega(&self) -> (f64, f64) {
        (self.w[(0, 0)], self.w[(1, 0)])
    }

    pub fn drift(&self) -> f64 {
        let eu = (self.u.transpose() * self.u - Matrix3::identity()).abs().max();
        let ew = (self.w.transpose() * self.w - Matrix2::identity()).abs().max();
        eu.max(ew)
            .max((self.u.determinant() - 1.0).abs())
            .max((self.w.determinant() - 1.0).abs())
    }
}

fn any_orthogonal(v: &Vector3<f64>) -> Vector3<f64> {
    let a = if v.x.abs() <= v.y.abs() && v.x.abs() <= v.z.abs() {
        Vector3::x()
    } else if v.y.abs() <= v.z.abs() {
        Vector3::y()
    } else {
        Vector3::z()
    };
    v.cross(&a).normalize()
}

pub fn to_orthonormal(line: &PlueckerLine) -> Result<OrthonormalLine> {
    let mn = line.m.norm();
    let dn = line.d.norm();
    if dn < 1e-300 && mn < 1e-300 {
        return Err(SlamError::DegenerateLine("zero Plücker vector"));
    }
    if dn < 1e-300 {
        return Err(SlamError::DegenerateLine("zero direction"));
    }
    let u2 = line.d / dn;
    // A line through the origin has no moment direction; any unit vector
    // orthogonal to d completes the frame.
    let u1 = if mn <= 1e-14 * dn {
        any_orthogonal(&u2)
    } else {
        // Gram-Schmidt against d absorbs small Klein violations.
        let v = line.m - u2 * line.m.dot(&u2);
        if v.norm() <= 1e-14 * mn {
            return Err(SlamError::DegenerateLine("moment parallel to direction"));
        }
        v.normalize()
    };
    let u3 = u1.cross(&u2);
    let mut u = Matrix3::from_columns(&[u1, u2, u3]);
    if (u.transpose() * u - Matrix3::identity()).abs().max() > 1e-12 {
        u = orthonormalize(&u);
    }
    let s = (mn * mn + dn * dn).sqrt();
    let (c, sn) = (mn / s, dn / s);
    Ok(OrthonormalLine {
        u,
        w: Matrix2::new(c, -sn, sn, c),
    })
}

pub fn from_orthonormal(o: &OrthonormalLine) -> PlueckerLine {
    let (w1, w2) = o.omega();
    PlueckerLine {
        m: o.u.column(0) * w1,
        d: o.u.column(1) * w2,
    }
}

fn so2(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// `U ← U·R(θ⃗)`, `W ← W·R(θ)` for `delta = (θ⃗, θ)`.
pub fn update_orthonormal(o: &OrthonormalLine, delta: &Vector4<f64>) -> OrthonormalLine {
    if delta.iter().all(|v| *v == 0.0) {
        return *o;
    }
    let mut u = o.u * so3_exp(&Vector3::new(delta[0], delta[1], delta[2]));
    let mut w = o.w * so2(delta[3]);
    if (u.transpose() * u - Matrix3::identity()).abs().max() > 1e-12 {
        u = orthonormalize(&u);
    }
    if (w.transpose() * w - Matrix2::identity()).abs().max() > 1e-12 {
        let angle = w[(1, 0)].atan2(w[(0, 0)]);
        w = so2(angle);
    }
    OrthonormalLine { u, w }
}

/// The 6×6 matrix `[[R, [t]ₓR], [0, R]]` acting on world-frame Plücker vectors.
pub fn line_transform_matrix(pose: &PoseSE3) -> Matrix6<f64> {
    let r = pose.rotation;
    let mut t = Matrix6::zeros();
    t.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    t.fixed_view_mut::<3, 3>(0, 3).copy_from(&(skew(&pose.translation) * r));
    t.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
    t
}

pub fn transform_line(pose: &PoseSE3, line: &PlueckerLine) -> PlueckerLine {
    let rd = pose.rotation * line.d;
    PlueckerLine {
        m: pose.rotation * line.m + pose.translation.cross(&rd),
        d: rd,
    }
}

/// Image line `l = K_L·m_c` of a camera-frame line.
pub fn project_line(k: &CameraIntrinsics, line_c: &PlueckerLine) -> Result<Vector3<f64>> {
    if line_c.m.norm() <= 1e-12 {
        return Err(SlamError::DegenerateProjection("line passes through the camera centre"));
    }
    Ok(line_intrinsics(k) * line_c.m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageLineSegment {
    pub start: PixelPoint,
    pub end: PixelPoint,
}

impl ImageLineSegment {
    pub fn new(start: PixelPoint, end: PixelPoint) -> Self {
        Self { start, end }
    }

    /// Homogeneous image line `x_s × x_e`.
    pub fn line(&self) -> Vector3<f64> {
        self.start.homogeneous().cross(&self.end.homogeneous())
    }

    pub fn length(&self) -> f64 {
        ((self.start.u - self.end.u).powi(2) + (self.start.v - self.end.v).powi(2)).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSegment3 {
    pub start: Vector3<f64>,
    pub end: Vector3<f64>,
}

impl LineSegment3 {
    pub fn new(start: Vector3<f64>, end: Vector3<f64>) -> Self {
        Self { start, end }
    }

    pub fn pluecker(&self) -> Result<PlueckerLine> {
        pluecker_from_endpoints(&self.start, &self.end)
    }

    pub fn midpoint(&self) -> Vector3<f64> {
        (self.start + self.end) * 0.5
    }
}

/// Signed endpoint distances to `l`: `(x_sᵀl, x_eᵀl) / √(l₁² + l₂²)`.
pub fn line_reprojection_error(l: &Vector3<f64>, seg: &ImageLineSegment) -> Result<Vector2<f64>> {
    let n2 = l.x * l.x + l.y * l.y;
    if n2 <= 1e-18 {
        return Err(SlamError::DegenerateProjection("image line at infinity"));
    }
    let n = n2.sqrt();
    Ok(Vector2::new(
        seg.start.homogeneous().dot(l) / n,
        seg.end.homogeneous().dot(l) / n,
    ))
}

/// Interpretation plane `Pᵀl` of an image line.
pub fn back_project_line(p: &Matrix3x4<f64>, l: &Vector3<f64>) -> Vector4<f64> {
    p.transpose() * l
}

/// Image line of a world line under a projection matrix, read from `P·L·Pᵀ = [l]ₓ`.
pub fn image_line_from_projection(p: &Matrix3x4<f64>, line: &PlueckerLine) -> Vector3<f64> {
    let m = p * line.primal_matrix() * p.transpose();
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Minimum angle between interpretation-plane normals accepted by
/// [`triangulate_two_view`].
pub const MIN_PLANE_ANGLE: f64 = 1e-6;

/// Intersects the interpretation planes of two image lines.
///
/// The sign of the result is fixed so that it reprojects into the first view
/// as a positive multiple of `l1`.
pub fn triangulate_two_view(
    l1: &Vector3<f64>,
    p1: &Matrix3x4<f64>,
    l2: &Vector3<f64>,
    p2: &Matrix3x4<f64>,
) -> Result<PlueckerLine> {
    line_from_planes(&back_project_line(p1, l1), &back_project_line(p2, l2), l1, p1)
}

/// Line spanned by two planes, signed to reproject onto `l_ref` in `p_ref`.
fn line_from_planes(
    pi1: &Vector4<f64>,
    pi2: &Vector4<f64>,
    l_ref: &Vector3<f64>,
    p_ref: &Matrix3x4<f64>,
) -> Result<PlueckerLine> {
    let n1 = pi1.fixed_rows::<3>(0).into_owned();
    let n2 = pi2.fixed_rows::<3>(0).into_owned();
    let (a, b) = (n1.norm(), n2.norm());
    if a < 1e-300 || b < 1e-300 {
        return Err(SlamError::DegenerateProjection("interpretation plane at infinity"));
    }
    let angle = (n1.cross(&n2).norm() / (a * b)).clamp(0.0, 1.0).asin();
    if angle < MIN_PLANE_ANGLE {
        return Err(SlamError::NearEpipolarPlane { angle });
    }
    let dual = pi1 * pi2.transpose() - pi2 * pi1.transpose();
    let d = Vector3::new(dual[(2, 1)], dual[(0, 2)], dual[(1, 0)]);
    let m = dual.fixed_view::<3, 1>(0, 3).into_owned();
    Ok(finish_line(PlueckerLine { m, d }, l_ref, p_ref))
}

/// Normalizes, removes rounding-level Klein violation and orients the line
/// so that it reprojects onto `l_ref` with positive sign.
fn finish_line(line: PlueckerLine, l_ref: &Vector3<f64>, p_ref: &Matrix3x4<f64>) -> PlueckerLine {
    let mut line = line.normalized();
    let dn2 = line.d.norm_squared();
    line.m -= line.d * (line.m.dot(&line.d) / dn2);
    if image_line_from_projection(p_ref, &line).dot(l_ref) < 0.0 {
        line = PlueckerLine {
            m: -line.m,
            d: -line.d,
        };
    }
    line
}

/// Least-squares intersection of the interpretation planes of several views.
///
/// Each plane is scaled to a unit normal so that its residual is a metric
/// point-to-plane distance. The line joins the two homogeneous points given by
/// the right singular vectors with the smallest singular values; with two
/// views this equals [`triangulate_two_view`] up to scale.
pub fn triangulate_multi_view(lines: &[Vector3<f64>], projections: &[Matrix3x4<f64>]) -> Result<PlueckerLine> {
    if lines.len() != projections.len() {
        return Err(SlamError::InvalidInput(format!(
            "{} image lines for {} projections",
            lines.len(),
            projections.len()
        )));
    }
    if lines.len() < 2 {
        return Err(SlamError::InsufficientObservations {
            have: lines.len(),
            need: 2,
        });
    }
    let rows = lines.len().max(4);
    let mut a = nalgebra::DMatrix::<f64>::zeros(rows, 4);
    for (i, (l, p)) in lines.iter().zip(projections).enumerate() {
        let pi = back_project_line(p, l);
        let n = pi.fixed_rows::<3>(0).norm();
        if n < 1e-300 {
            return Err(SlamError::DegenerateProjection("interpretation plane at infinity"));
        }
        a.row_mut(i).copy_from(&(pi / n).transpose());
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let spread = svd.singular_values[order[2]] / svd.singular_values[order[3]];
    if !(spread >= MIN_PLANE_ANGLE) {
        return Err(SlamError::NearEpipolarPlane { angle: spread });
    }
    // The null space of the stacked planes holds the points of the line.
    let x: Vector4<f64> = v_t.row(order[0]).transpose().fixed_rows::<4>(0).into_owned();
    let y: Vector4<f64> = v_t.row(order[1]).transpose().fixed_rows::<4>(0).into_owned();
    let (xv, yv) = (x.fixed_rows::<3>(0).into_owned(), y.fixed_rows::<3>(0).into_owned());
    let line = PlueckerLine {
        m: yv.cross(&xv),
        d: xv * y[3] - yv * x[3],
    };
    Ok(finish_line(line, &lines[0], &projections[0]))
}

/// Foot of the perpendicular from an image point onto `l`.
pub fn perpendicular_foot(l: &Vector3<f64>, x: &PixelPoint) -> PixelPoint {
    let n2 = l.x * l.x + l.y * l.y;
    let k = x.homogeneous().dot(l) / n2;
    PixelPoint::new(x.u - k * l.x, x.v - k * l.y)
}

/// Recovers finite 3D endpoints for an infinite line from an observed segment.
///
/// Each 2D endpoint is dropped onto the reprojected line; the image line
/// through that foot perpendicular to `l` is back-projected to a plane and
/// intersected with the 3D line via `X = L·π`.
pub fn trim_endpoints(
    line: &PlueckerLine,
    seg: &ImageLineSegment,
    pose: &PoseSE3,
    k: &CameraIntrinsics,
) -> Result<LineSegment3> {
    let line_c = transform_line(pose, line);
    let l = project_line(k, &line_c)?;
    if l.x * l.x + l.y * l.y <= 1e-18 {
        return Err(SlamError::DegenerateProjection("image line at infinity"));
    }
    let p = pose.projection_matrix(k);
    let primal = line.primal_matrix();
    let normal = Vector3::new(l.x, l.y, 0.0);
    let mut out = [Vector3::zeros(); 2];
    for (slot, x) in out.iter_mut().zip([seg.start, seg.end]) {
        let foot = perpendicular_foot(&l, &x).homogeneous();
        let l_perp = foot.cross(&normal);
        let plane = p.transpose() * l_perp;
        let xh = primal * plane;
        if xh.w.abs() < 1e-15 * xh.fixed_rows::<3>(0).norm().max(1e-300) {
            return Err(SlamError::DegenerateProjection("viewing plane parallel to the line"));
        }
        let xw = xh.fixed_rows::<3>(0) / xh.w;
        let depth = pose.transform_point(&xw).z;
        if depth <= 0.0 {
            return Err(SlamError::BehindCamera { depth });
        }
        *slot = xw;
    }
    Ok(LineSegment3::new(out[0], out[1]))
}
