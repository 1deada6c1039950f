//! Closed-form least-squares similarity alignment of point sets.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Result, SlamError};
use crate::sim3::Sim3Transform;

/// Returns `S` minimizing `Σ‖dst_i − S·src_i‖²`; with `with_scale == false`
/// the scale is fixed to 1.
pub fn umeyama_align(src: &[Vector3<f64>], dst: &[Vector3<f64>], with_scale: bool) -> Result<Sim3Transform> {
    if src.len() != dst.len() {
        return Err(SlamError::LengthMismatch {
            est: src.len(),
            gt: dst.len(),
        });
    }
    if src.len() < 3 {
        return Err(SlamError::DegenerateTrajectory("fewer than three positions"));
    }
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut cov_s = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        let (a, b) = (s - mu_s, d - mu_d);
        cov += b * a.transpose();
        cov_s += a * a.transpose();
    }
    cov /= n;
    cov_s /= n;
    let var_s = cov_s.trace();
    let mut ev: Vec<f64> = cov_s.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if var_s <= 1e-300 || ev[1] <= 1e-12 * ev[0] {
        return Err(SlamError::DegenerateTrajectory("positions are collinear"));
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut sign = Matrix3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let r = u * sign * v_t;
    let scale = if with_scale {
        (Matrix3::from_diagonal(&svd.singular_values) * sign).trace() / var_s
    } else {
        1.0
    };
    let t = mu_d - r * mu_s * scale;
    Sim3Transform::new(scale, r, t)
}
