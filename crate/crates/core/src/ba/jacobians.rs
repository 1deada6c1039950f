use nalgebra::{Matrix2x3, Matrix2x4, Matrix3, Matrix3x6, Matrix6x4, SMatrix, Vector2, Vector3};

use super::{BaProblem, Measurement, Observation};
use crate::camera::{line_intrinsics, skew, CameraIntrinsics, PoseSE3, MIN_DEPTH};
use crate::error::{Result, SlamError};
use crate::line::{line_reprojection_error, transform_line, ImageLineSegment, OrthonormalLine, PlueckerLine};

pub type Matrix2x6 = SMatrix<f64, 2, 6>;

/// `∂L_w/∂δ_θ` for the update `U ← U·Exp(θ⃗)`, `W ← W·R(θ)`.
pub fn orthonormal_jacobian(o: &OrthonormalLine) -> Matrix6x4<f64> {
    let (w1, w2) = o.omega();
    let u1 = o.u.column(0).into_owned();
    let u2 = o.u.column(1).into_owned();
    let u3 = o.u.column(2).into_owned();
    let mut j = Matrix6x4::zeros();
    j.fixed_view_mut::<3, 1>(0, 1).copy_from(&(-w1 * u3));
    j.fixed_view_mut::<3, 1>(0, 2).copy_from(&(w1 * u2));
    j.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-w2 * u1));
    j.fixed_view_mut::<3, 1>(3, 0).copy_from(&(w2 * u3));
    j.fixed_view_mut::<3, 1>(3, 2).copy_from(&(-w2 * u1));
    j.fixed_view_mut::<3, 1>(3, 3).copy_from(&(w1 * u2));
    j
}

/// Derivative of the camera-frame moment `m_c` under a left pose increment
/// `(ω, ρ)`. Only the moment reaches the image line, so the direction rows of
/// the full 6×6 block are not needed.
pub fn pose_line_jacobian(line_c: &PlueckerLine) -> Matrix3x6<f64> {
    let mut j = Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&line_c.m)));
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&line_c.d)));
    j
}

/// `∂e/∂l` for the endpoint-distance residual.
fn residual_line_derivative(l: &Vector3<f64>, seg: &ImageLineSegment) -> Result<SMatrix<f64, 2, 3>> {
    let n2 = l.x * l.x + l.y * l.y;
    if n2 <= 1e-18 {
        return Err(SlamError::DegenerateProjection("image line at infinity"));
    }
    let n = n2.sqrt();
    let grad = Vector3::new(l.x, l.y, 0.0);
    let mut out = SMatrix::<f64, 2, 3>::zeros();
    for (row, x) in [seg.start, seg.end].iter().enumerate() {
        let x = x.homogeneous();
        let g = x / n - grad * (x.dot(l) / (n * n2));
        out.set_row(row, &g.transpose());
    }
    Ok(out)
}

/// Residual and `(J_θ, J_ξ)` of a line observation.
pub fn line_residual_and_jacobians(
    k: &CameraIntrinsics,
    pose: &PoseSE3,
    orth: &OrthonormalLine,
    line_w: &PlueckerLine,
    seg: &ImageLineSegment,
) -> Result<(Vector2<f64>, Matrix2x4<f64>, Matrix2x6)> {
    let line_c = transform_line(pose, line_w);
    if line_c.m.norm() <= 1e-12 {
        return Err(SlamError::DegenerateProjection("line passes through the camera centre"));
    }
    let kl = line_intrinsics(k);
    let l = kl * line_c.m;
    let e = line_reprojection_error(&l, seg)?;
    let de_dm = residual_line_derivative(&l, seg)? * kl;
    // Moment rows of the line transform [[R, [t]×R], [0, R]].
    let r = pose.rotation;
    let mut tm = Matrix3x6::zeros();
    tm.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    tm.fixed_view_mut::<3, 3>(0, 3).copy_from(&(skew(&pose.translation) * r));
    let j_theta = de_dm * tm * orthonormal_jacobian(orth);
    let j_xi = de_dm * pose_line_jacobian(&line_c);
    Ok((e, j_theta, j_xi))
}

/// Residual and `(J_point, J_ξ)` of a point observation; the residual is
/// observed minus predicted.
pub fn point_residual_and_jacobians(
    k: &CameraIntrinsics,
    pose: &PoseSE3,
    x: &Vector3<f64>,
    observed: &crate::camera::PixelPoint,
) -> Result<(Vector2<f64>, Matrix2x3<f64>, Matrix2x6)> {
    let xc = pose.transform_point(x);
    if xc.z <= MIN_DEPTH {
        return Err(SlamError::BehindCamera { depth: xc.z });
    }
    let iz = 1.0 / xc.z;
    let u = k.fx * xc.x * iz + k.cx;
    let v = k.fy * xc.y * iz + k.cy;
    let e = Vector2::new(observed.u - u, observed.v - v);
    let dpi = Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * xc.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * xc.y * iz * iz,
    );
    let j_point = -dpi * pose.rotation;
    let mut dxc = Matrix3x6::zeros();
    dxc.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&xc)));
    dxc.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    let j_xi = -dpi * dxc;
    Ok((e, j_point, j_xi))
}

fn expect_kind(obs: &Observation, line: bool) -> Result<()> {
    if obs.is_line() != line {
        let want = if line { "line" } else { "point" };
        return Err(SlamError::InvalidInput(format!("expected a {want} observation")));
    }
    Ok(())
}

/// `(J_θ, J_ξ)` of a line observation in `problem`.
pub fn line_jacobians(problem: &BaProblem, obs: &Observation) -> Result<(Matrix2x4<f64>, Matrix2x6)> {
    expect_kind(obs, true)?;
    let Measurement::Line { landmark, segment } = obs.measurement else {
        unreachable!()
    };
    let lm = &problem.lines[landmark];
    let pose = &problem.keyframes[obs.keyframe].pose;
    let (_, jt, jx) =
        line_residual_and_jacobians(&problem.intrinsics, pose, lm.orthonormal(), lm.pluecker(), &segment)?;
    Ok((jt, jx))
}

/// `(J_point, J_ξ)` of a point observation in `problem`.
pub fn point_jacobians(problem: &BaProblem, obs: &Observation) -> Result<(Matrix2x3<f64>, Matrix2x6)> {
    expect_kind(obs, false)?;
    let Measurement::Point { landmark, pixel } = obs.measurement else {
        unreachable!()
    };
    let pose = &problem.keyframes[obs.keyframe].pose;
    let (_, jp, jx) =
        point_residual_and_jacobians(&problem.intrinsics, pose, &problem.points[landmark].position, &pixel)?;
    Ok((jp, jx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{se3_retract, PixelPoint};
    use crate::ba::numdiff::{max_relative_error, numeric_line_jacobians, numeric_point_jacobians};
    use crate::line::{from_orthonormal, pluecker_from_endpoints, project_line, to_orthonormal, update_orthonormal};
    use nalgebra::{Vector4, Vector6};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const H: f64 = 1e-6;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(520.0, 510.0, 318.0, 242.0).unwrap()
    }

    fn rv(rng: &mut ChaCha8Rng, s: f64) -> Vector3<f64> {
        Vector3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> PoseSE3 {
        let mut d = Vector6::zeros();
        for i in 0..3 {
            d[i] = rng.random_range(-0.3..0.3);
            d[i + 3] = rng.random_range(-0.5..0.5);
        }
        PoseSE3::exp(&d)
    }

    /// A world line in front of `pose` with a noisy observed segment.
    fn random_line_case(rng: &mut ChaCha8Rng, pose: &PoseSE3) -> Option<(OrthonormalLine, ImageLineSegment)> {
        let inv = pose.inverse();
        let a = inv.transform_point(&Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(2.0..6.0)));
        let b = inv.transform_point(&Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(2.0..6.0)));
        let line = pluecker_from_endpoints(&a, &b).ok()?;
        let orth = to_orthonormal(&line).ok()?;
        let pa = crate::camera::project_point(pose, &k(), &a).ok()?;
        let pb = crate::camera::project_point(pose, &k(), &b).ok()?;
        let seg = ImageLineSegment::new(
            PixelPoint::new(pa.u + rng.random_range(-3.0..3.0), pa.v + rng.random_range(-3.0..3.0)),
            PixelPoint::new(pb.u + rng.random_range(-3.0..3.0), pb.v + rng.random_range(-3.0..3.0)),
        );
        if seg.length() < 20.0 {
            return None;
        }
        Some((orth, seg))
    }

    fn line_res(pose: &PoseSE3, o: &OrthonormalLine, seg: &ImageLineSegment) -> Vector2<f64> {
        let lc = transform_line(pose, &from_orthonormal(o));
        line_reprojection_error(&project_line(&k(), &lc).unwrap(), seg).unwrap()
    }

    #[test]
    fn line_jacobians_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        let mut worst: f64 = 0.0;
        while checked < 1000 {
            let pose = random_pose(&mut rng);
            let Some((orth, seg)) = random_line_case(&mut rng, &pose) else { continue };
            let lw = from_orthonormal(&orth);
            let (_, jt, jx) = line_residual_and_jacobians(&k(), &pose, &orth, &lw, &seg).unwrap();
            let (nt, nx) = numeric_line_jacobians(&k(), &pose, &orth, &seg, H);
            worst = worst
                .max(max_relative_error(jt.iter(), nt.iter(), 1e-8))
                .max(max_relative_error(jx.iter(), nx.iter(), 1e-8));
            checked += 1;
        }
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn line_pose_jacobian_has_rank_two_at_incidence() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let pose = random_pose(&mut rng);
            let Some((orth, _)) = random_line_case(&mut rng, &pose) else { continue };
            let lw = from_orthonormal(&orth);
            let l = project_line(&k(), &transform_line(&pose, &lw)).unwrap();
            // Two exact points on the projected line.
            let n = Vector3::new(l.x, l.y, 0.0).normalize();
            let foot = crate::line::perpendicular_foot(&l, &PixelPoint::new(300.0, 200.0));
            let seg = ImageLineSegment::new(
                PixelPoint::new(foot.u - 80.0 * n.y, foot.v + 80.0 * n.x),
                PixelPoint::new(foot.u + 80.0 * n.y, foot.v - 80.0 * n.x),
            );
            let (e, _, jx) = line_residual_and_jacobians(&k(), &pose, &orth, &lw, &seg).unwrap();
            assert!(e.norm() < 1e-9);
            let sv = jx.svd(false, false).singular_values;
            assert!(sv[1] > 1e-6 * sv[0], "{sv:?}");
        }
    }

    #[test]
    fn line_taylor_remainder_is_second_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pose = random_pose(&mut rng);
        let (orth, seg) = loop {
            if let Some(c) = random_line_case(&mut rng, &pose) {
                break c;
            }
        };
        let lw = from_orthonormal(&orth);
        let (e0, jt, jx) = line_residual_and_jacobians(&k(), &pose, &orth, &lw, &seg).unwrap();
        let dir_x = Vector6::new(0.3, -0.2, 0.5, 0.1, 0.4, -0.3);
        let dir_t = Vector4::new(-0.2, 0.4, 0.1, 0.3);
        let rem = |s: f64| {
            let e = line_res(&se3_retract(&pose, &(dir_x * s)), &update_orthonormal(&orth, &(dir_t * s)), &seg);
            (e - e0 - jx * dir_x * s - jt * dir_t * s).norm()
        };
        let (r1, r2) = (rem(1e-3), rem(5e-4));
        assert!(r1 < 1e-2);
        let ratio = r1 / r2;
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
        let (e, _, _) = line_residual_and_jacobians(&k(), &se3_retract(&pose, &Vector6::zeros()), &orth, &lw, &seg).unwrap();
        assert_eq!(e, e0);
    }

    #[test]
    fn point_jacobians_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let pose = random_pose(&mut rng);
            let x = pose.inverse().transform_point(&Vector3::new(
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.0..1.0),
                rng.random_range(1.0..8.0),
            ));
            let obs = PixelPoint::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            let (_, jp, jx) = point_residual_and_jacobians(&k(), &pose, &x, &obs).unwrap();
            let (np, nx) = numeric_point_jacobians(&k(), &pose, &x, &obs, H);
            worst = worst
                .max(max_relative_error(jp.iter(), np.iter(), 1e-8))
                .max(max_relative_error(jx.iter(), nx.iter(), 1e-8));
        }
        assert!(worst < 1e-6, "worst relative error {worst}");
    }

    #[test]
    fn principal_axis_point_derivative() {
        let (_, jp, _) = point_residual_and_jacobians(
            &k(),
            &PoseSE3::identity(),
            &Vector3::new(0.0, 0.0, 2.0),
            &PixelPoint::new(318.0, 242.0),
        )
        .unwrap();
        // Residual is observed minus predicted, so ∂e/∂X = −∂u/∂X.
        assert!((-jp[(0, 0)] - 520.0 / 2.0).abs() < 1e-12);
        assert!((-jp[(1, 1)] - 510.0 / 2.0).abs() < 1e-12);
        assert_eq!(jp[(0, 2)], 0.0);
    }

    #[test]
    fn translation_columns_equal_point_jacobian_through_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let pose = random_pose(&mut rng);
            let x = pose.inverse().transform_point(&(Vector3::new(0.2, -0.1, 3.0) + rv(&mut rng, 0.5)));
            let (_, jp, jx) = point_residual_and_jacobians(&k(), &pose, &x, &PixelPoint::new(0.0, 0.0)).unwrap();
            let jt = jp * pose.rotation.transpose();
            let diff = (jx.fixed_view::<2, 3>(0, 3) - jt).abs().max();
            assert!(diff < 1e-9);
        }
    }

    #[test]
    fn jacobian_rejects_wrong_kind() {
        let mut p = BaProblem::new(k());
        p.keyframes.push(super::super::Keyframe {
            pose: PoseSE3::identity(),
            fixed: true,
        });
        p.points.push(super::super::PointLandmark::new(Vector3::new(0.0, 0.0, 2.0), 0));
        let o = Observation::point(0, 0, PixelPoint::new(1.0, 2.0));
        assert!(point_jacobians(&p, &o).is_ok());
        assert!(line_jacobians(&p, &o).is_err());
    }
}
