//! Central finite differences of the reprojection residuals, evaluated in
//! double-double arithmetic so that rounding noise stays far below the
//! truncation error even for pixel-scale residuals and a 1e-6 step.

use std::ops::{Add, Div, Mul, Neg, Sub};

use nalgebra::{Matrix2x3, Matrix2x4, Vector3};

use super::jacobians::Matrix2x6;
use crate::camera::{CameraIntrinsics, PixelPoint, PoseSE3};
use crate::line::{ImageLineSegment, OrthonormalLine};

/// Unevaluated sum `hi + lo` with `|lo| ≤ ulp(hi)/2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoubleDouble {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> DoubleDouble {
    let s = a + b;
    DoubleDouble { hi: s, lo: b - (s - a) }
}

impl DoubleDouble {
    pub const ZERO: Self = Self { hi: 0.0, lo: 0.0 };

    pub fn new(x: f64) -> Self {
        Self { hi: x, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub fn sqrt(self) -> Self {
        if self.hi <= 0.0 {
            return Self::ZERO;
        }
        let y = Self::new(self.hi.sqrt());
        y + (self - y * y) / (y * 2.0)
    }
}

impl From<f64> for DoubleDouble {
    fn from(x: f64) -> Self {
        Self::new(x)
    }
}

impl Add for DoubleDouble {
    type Output = Self;
    fn add(self, b: Self) -> Self {
        let (s, e) = two_sum(self.hi, b.hi);
        let (t, f) = two_sum(self.lo, b.lo);
        let r = quick_two_sum(s, e + t);
        quick_two_sum(r.hi, r.lo + f)
    }
}

impl Neg for DoubleDouble {
    type Output = Self;
    fn neg(self) -> Self {
        Self {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for DoubleDouble {
    type Output = Self;
    fn sub(self, b: Self) -> Self {
        self + (-b)
    }
}

impl Mul for DoubleDouble {
    type Output = Self;
    fn mul(self, b: Self) -> Self {
        let p = self.hi * b.hi;
        let e = self.hi.mul_add(b.hi, -p) + (self.hi * b.lo + self.lo * b.hi);
        quick_two_sum(p, e)
    }
}

impl Mul<f64> for DoubleDouble {
    type Output = Self;
    fn mul(self, b: f64) -> Self {
        self * Self::new(b)
    }
}

impl Div for DoubleDouble {
    type Output = Self;
    fn div(self, b: Self) -> Self {
        let q1 = self.hi / b.hi;
        let r = self - b * q1;
        let q2 = r.hi / b.hi;
        let r = r - b * q2;
        let q3 = r.hi / b.hi;
        quick_two_sum(q1, q2) + Self::new(q3)
    }
}

type V3 = [DoubleDouble; 3];
type M3 = [[DoubleDouble; 3]; 3];

fn v3(v: &Vector3<f64>) -> V3 {
    [v.x.into(), v.y.into(), v.z.into()]
}

fn m3(m: &nalgebra::Matrix3<f64>) -> M3 {
    let mut out = [[DoubleDouble::ZERO; 3]; 3];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, x) in row.iter_mut().enumerate() {
            *x = m[(r, c)].into();
        }
    }
    out
}

fn dot(a: &V3, b: &V3) -> DoubleDouble {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: &V3, b: &V3) -> V3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn add3(a: &V3, b: &V3) -> V3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn scale3(a: &V3, s: DoubleDouble) -> V3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn matvec(m: &M3, v: &V3) -> V3 {
    [dot(&m[0], v), dot(&m[1], v), dot(&m[2], v)]
}

fn matmul(a: &M3, b: &M3) -> M3 {
    let mut out = [[DoubleDouble::ZERO; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c] + a[r][2] * b[2][c];
        }
    }
    out
}

fn column(m: &M3, c: usize) -> V3 {
    [m[0][c], m[1][c], m[2][c]]
}

fn skew(w: &V3) -> M3 {
    let z = DoubleDouble::ZERO;
    [[z, -w[2], w[1]], [w[2], z, -w[0]], [-w[1], w[0], z]]
}

/// Series coefficients valid for the tiny angles used by the differencer.
fn small_angle_coeffs(theta2: DoubleDouble) -> (DoubleDouble, DoubleDouble, DoubleDouble) {
    let one = DoubleDouble::new(1.0);
    let t4 = theta2 * theta2;
    let a = one - theta2 / 6.0.into() + t4 / 120.0.into();
    let b = DoubleDouble::new(0.5) - theta2 / 24.0.into() + t4 / 720.0.into();
    let c = one / 6.0.into() - theta2 / 120.0.into() + t4 / 5040.0.into();
    (a, b, c)
}

/// `(Exp(ω), V(ω))` for small `ω`.
fn so3_exp_small(w: &V3) -> (M3, M3) {
    let (a, b, c) = small_angle_coeffs(dot(w, w));
    let k = skew(w);
    let k2 = matmul(&k, &k);
    let mut r = [[DoubleDouble::ZERO; 3]; 3];
    let mut v = [[DoubleDouble::ZERO; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let id = DoubleDouble::new(if i == j { 1.0 } else { 0.0 });
            r[i][j] = id + k[i][j] * a + k2[i][j] * b;
            v[i][j] = id + k[i][j] * b + k2[i][j] * c;
        }
    }
    (r, v)
}

fn perturbed_pose(pose: &PoseSE3, delta: &[f64; 6]) -> (M3, V3) {
    let w = [delta[0].into(), delta[1].into(), delta[2].into()];
    let rho = [delta[3].into(), delta[4].into(), delta[5].into()];
    let (re, v) = so3_exp_small(&w);
    let r = matmul(&re, &m3(&pose.rotation));
    let t = add3(&matvec(&re, &v3(&pose.translation)), &matvec(&v, &rho));
    (r, t)
}

fn line_residual_dd(
    k: &CameraIntrinsics,
    pose: &PoseSE3,
    orth: &OrthonormalLine,
    seg: &ImageLineSegment,
    dpose: &[f64; 6],
    dline: &[f64; 4],
) -> [DoubleDouble; 2] {
    let (re, _) = so3_exp_small(&[dline[0].into(), dline[1].into(), dline[2].into()]);
    let u = matmul(&m3(&orth.u), &re);
    let th = DoubleDouble::new(dline[3]);
    let th2 = th * th;
    let (a, b, _) = small_angle_coeffs(th2);
    let (sin, cos) = (th * a, DoubleDouble::new(1.0) - th2 * b);
    let (w00, w10) = (DoubleDouble::new(orth.w[(0, 0)]), DoubleDouble::new(orth.w[(1, 0)]));
    let (w01, w11) = (DoubleDouble::new(orth.w[(0, 1)]), DoubleDouble::new(orth.w[(1, 1)]));
    let w1 = w00 * cos + w01 * sin;
    let w2 = w10 * cos + w11 * sin;
    let m = scale3(&column(&u, 0), w1);
    let d = scale3(&column(&u, 1), w2);

    let (r, t) = perturbed_pose(pose, dpose);
    let rd = matvec(&r, &d);
    let mc = add3(&matvec(&r, &m), &cross(&t, &rd));
    let [fx, fy, cx, cy] = [k.fx, k.fy, k.cx, k.cy].map(DoubleDouble::new);
    let l = [
        mc[0] * fy,
        mc[1] * fx,
        -(fy * cx) * mc[0] - (fx * cy) * mc[1] + fx * fy * mc[2],
    ];
    let n = (l[0] * l[0] + l[1] * l[1]).sqrt();
    let e = |p: &PixelPoint| (l[0] * p.u + l[1] * p.v + l[2]) / n;
    [e(&seg.start), e(&seg.end)]
}

fn point_residual_dd(
    k: &CameraIntrinsics,
    pose: &PoseSE3,
    x: &Vector3<f64>,
    observed: &PixelPoint,
    dpose: &[f64; 6],
    dpoint: &[f64; 3],
) -> [DoubleDouble; 2] {
    let (r, t) = perturbed_pose(pose, dpose);
    let xp = add3(&v3(x), &[dpoint[0].into(), dpoint[1].into(), dpoint[2].into()]);
    let xc = add3(&matvec(&r, &xp), &t);
    let u = DoubleDouble::new(k.fx) * xc[0] / xc[2] + k.cx.into();
    let v = DoubleDouble::new(k.fy) * xc[1] / xc[2] + k.cy.into();
    [DoubleDouble::new(observed.u) - u, DoubleDouble::new(observed.v) - v]
}

fn central<const N: usize>(h: f64, mut f: impl FnMut(&[f64; N]) -> [DoubleDouble; 2]) -> [[f64; 2]; N] {
    let mut out = [[0.0; 2]; N];
    for (i, col) in out.iter_mut().enumerate() {
        let mut d = [0.0; N];
        d[i] = h;
        let ep = f(&d);
        d[i] = -h;
        let em = f(&d);
        for r in 0..2 {
            col[r] = ((ep[r] - em[r]) / DoubleDouble::new(2.0 * h)).to_f64();
        }
    }
    out
}

/// Finite-difference `(J_θ, J_ξ)` of a line observation.
pub fn numeric_line_jacobians(
    k: &CameraIntrinsics,
    pose: &PoseSE3,
    orth: &OrthonormalLine,
    seg: &ImageLineSegment,
    h: f64,
) -> (Matrix2x4<f64>, Matrix2x6) {
    let jt = central::<4>(h, |d| line_residual_dd(k, pose, orth, seg, &[0.0; 6], d));
    let jx = central::<6>(h, |d| line_residual_dd(k, pose, orth, seg, d, &[0.0; 4]));
    (
        Matrix2x4::from_fn(|r, c| jt[c][r]),
        Matrix2x6::from_fn(|r, c| jx[c][r]),
    )
}

/// Finite-difference `(J_point, J_ξ)` of a point observation.
pub fn numeric_point_jacobians(
    k: &CameraIntrinsics,
    pose: &PoseSE3,
    x: &Vector3<f64>,
    observed: &PixelPoint,
    h: f64,
) -> (Matrix2x3<f64>, Matrix2x6) {
    let jp = central::<3>(h, |d| point_residual_dd(k, pose, x, observed, &[0.0; 6], d));
    let jx = central::<6>(h, |d| point_residual_dd(k, pose, x, observed, d, &[0.0; 3]));
    (
        Matrix2x3::from_fn(|r, c| jp[c][r]),
        Matrix2x6::from_fn(|r, c| jx[c][r]),
    )
}

/// `max |a − b| / max(|a|, |b|, floor)` over all entries.
pub fn max_relative_error<'a>(
    a: impl IntoIterator<Item = &'a f64>,
    b: impl IntoIterator<Item = &'a f64>,
    floor: f64,
) -> f64 {
    a.into_iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Outcome of [`jacobian_check`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct JacobianCheck {
    pub trials: usize,
    pub line_max_rel_error: f64,
    pub point_max_rel_error: f64,
}

impl JacobianCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.line_max_rel_error.max(self.point_max_rel_error)
    }
}

/// Compares analytic line and point Jacobians with central differences over
/// `trials` random camera/landmark configurations each.
pub fn jacobian_check(k: &CameraIntrinsics, trials: usize, seed: u64, h: f64) -> JacobianCheck {
    use crate::ba::jacobians::{line_residual_and_jacobians, point_residual_and_jacobians};
    use crate::camera::project_point;
    use crate::line::{from_orthonormal, pluecker_from_endpoints, to_orthonormal};
    use nalgebra::Vector6;
    use rand::{Rng, SeedableRng};

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let pose = |rng: &mut rand_chacha::ChaCha8Rng| {
        let mut d = Vector6::zeros();
        for i in 0..3 {
            d[i] = rng.random_range(-0.3..0.3);
            d[i + 3] = rng.random_range(-0.5..0.5);
        }
        PoseSE3::exp(&d)
    };
    let mut out = JacobianCheck {
        trials,
        line_max_rel_error: 0.0,
        point_max_rel_error: 0.0,
    };
    let mut done = 0;
    while done < trials {
        let p = pose(&mut rng);
        let inv = p.inverse();
        let ahead = |rng: &mut rand_chacha::ChaCha8Rng| {
            inv.transform_point(&Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(2.0..6.0),
            ))
        };
        let (a, b) = (ahead(&mut rng), ahead(&mut rng));
        let jitter = |rng: &mut rand_chacha::ChaCha8Rng, q: PixelPoint| {
            PixelPoint::new(q.u + rng.random_range(-3.0..3.0), q.v + rng.random_range(-3.0..3.0))
        };
        let case = (|| {
            let orth = to_orthonormal(&pluecker_from_endpoints(&a, &b).ok()?).ok()?;
            let pa = project_point(&p, k, &a).ok()?;
            let pb = project_point(&p, k, &b).ok()?;
            Some((orth, pa, pb))
        })();
        let Some((orth, pa, pb)) = case else { continue };
        let seg = ImageLineSegment::new(jitter(&mut rng, pa), jitter(&mut rng, pb));
        if seg.length() < 20.0 {
            continue;
        }
        let Ok((_, jt, jx)) = line_residual_and_jacobians(k, &p, &orth, &from_orthonormal(&orth), &seg) else { continue };
        let (nt, nx) = numeric_line_jacobians(k, &p, &orth, &seg, h);
        out.line_max_rel_error = out
            .line_max_rel_error
            .max(max_relative_error(jt.iter(), nt.iter(), 1e-8))
            .max(max_relative_error(jx.iter(), nx.iter(), 1e-8));

        let x = ahead(&mut rng);
        let obs = PixelPoint::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
        let Ok((_, jp, jxp)) = point_residual_and_jacobians(k, &p, &x, &obs) else { continue };
        let (np, nxp) = numeric_point_jacobians(k, &p, &x, &obs, h);
        out.point_max_rel_error = out
            .point_max_rel_error
            .max(max_relative_error(jp.iter(), np.iter(), 1e-8))
            .max(max_relative_error(jxp.iter(), nxp.iter(), 1e-8));
        done += 1;
    }
    out
}
