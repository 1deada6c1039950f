use nalgebra::{DMatrix, Matrix3, Matrix3x4, Vector3};
use serde::{Deserialize, Serialize};

use super::solver::solve_motion_only;
use super::{BaProblem, Keyframe, Observation, RobustKernel, SolverReport, CHI2_2DOF_95};
use crate::camera::{orthonormalize, CameraIntrinsics, PixelPoint, PoseSE3};
use crate::error::{Result, SlamError};
use crate::line::ImageLineSegment;

/// A 2D point matched to point landmark `landmark`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointMatch {
    pub landmark: usize,
    pub pixel: PixelPoint,
}

/// A 2D segment matched to line landmark `landmark`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineMatch {
    pub landmark: usize,
    pub segment: ImageLineSegment,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RelocalizationConfig {
    pub kernel: RobustKernel,
    pub max_iters: usize,
    pub chi2_threshold: f64,
}

impl Default for RelocalizationConfig {
    fn default() -> Self {
        Self {
            kernel: RobustKernel::default(),
            max_iters: 100,
            chi2_threshold: CHI2_2DOF_95,
        }
    }
}

/// Linear pose from at least six 3D–2D point correspondences.
pub fn dlt_pnp(k: &CameraIntrinsics, world: &[Vector3<f64>], pixels: &[PixelPoint]) -> Result<PoseSE3> {
    if world.len() != pixels.len() {
        return Err(SlamError::InvalidInput("world and pixel lists differ in length".into()));
    }
    if world.len() < 6 {
        return Err(SlamError::InsufficientObservations {
            have: world.len(),
            need: 6,
        });
    }
    let k_inv = k
        .matrix()
        .try_inverse()
        .ok_or(SlamError::DegenerateConfiguration("singular intrinsics"))?;
    // Centre and scale the 3D points for conditioning.
    let centroid = world.iter().sum::<Vector3<f64>>() / world.len() as f64;
    let spread = world.iter().map(|x| (x - centroid).norm()).sum::<f64>() / world.len() as f64;
    if spread < 1e-12 {
        return Err(SlamError::DegenerateConfiguration("coincident points"));
    }
    let mut a = DMatrix::zeros(2 * world.len(), 12);
    for (i, (x, px)) in world.iter().zip(pixels).enumerate() {
        let xn = (x - centroid) / spread;
        let xh = [xn.x, xn.y, xn.z, 1.0];
        let ray = k_inv * px.homogeneous();
        let (u, v) = (ray.x / ray.z, ray.y / ray.z);
        for j in 0..4 {
            a[(2 * i, j)] = xh[j];
            a[(2 * i, 8 + j)] = -u * xh[j];
            a[(2 * i + 1, 4 + j)] = xh[j];
            a[(2 * i + 1, 8 + j)] = -v * xh[j];
        }
    }
    let svd = (a.transpose() * &a).symmetric_eigen();
    let (min_idx, _) = svd
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .ok_or(SlamError::DegenerateConfiguration("empty system"))?;
    let sol = svd.eigenvectors.column(min_idx);
    let mut p = Matrix3x4::from_fn(|r, c| sol[r * 4 + c]);
    let mut m: Matrix3<f64> = p.fixed_view::<3, 3>(0, 0).into_owned();
    if m.determinant() < 0.0 {
        p = -p;
        m = -m;
    }
    let s = m.svd(false, false).singular_values.mean();
    if s < 1e-12 {
        return Err(SlamError::DegenerateConfiguration("rank-deficient DLT solution"));
    }
    let r = orthonormalize(&(m / s));
    // Undo the normalization: x_c ∝ R (X − c)/σ + t  ⇒  t_world = σ t − R c.
    let t_norm = p.column(3) / s;
    let t = t_norm * spread - r * centroid;
    Ok(PoseSE3::new(r, t))
}

/// Refines a camera pose against fixed map landmarks with motion-only BA over
/// point and line matches, gating outliers with a χ² test between two solves.
pub fn relocalize(
    map: &BaProblem,
    points: &[PointMatch],
    lines: &[LineMatch],
    init: Option<PoseSE3>,
    cfg: &RelocalizationConfig,
) -> Result<(PoseSE3, SolverReport)> {
    let total = points.len() + lines.len();
    if total < 6 {
        return Err(SlamError::InsufficientObservations { have: total, need: 6 });
    }
    let mut problem = BaProblem::new(map.intrinsics);
    problem.points = map.points.clone();
    problem.lines = map.lines.clone();
    for p in &mut problem.points {
        p.fixed = true;
    }
    for l in &mut problem.lines {
        l.fixed = true;
    }
    let pose = match init {
        Some(p) => p,
        None => {
            let world: Vec<Vector3<f64>> = points
                .iter()
                .map(|m| map.points.get(m.landmark).map(|p| p.position))
                .collect::<Option<_>>()
                .ok_or_else(|| SlamError::InvalidInput("point match references missing landmark".into()))?;
            let px: Vec<PixelPoint> = points.iter().map(|m| m.pixel).collect();
            dlt_pnp(&map.intrinsics, &world, &px)?
        }
    };
    problem.keyframes.push(Keyframe { pose, fixed: false });
    for m in points {
        problem.observations.push(Observation::point(0, m.landmark, m.pixel));
    }
    for m in lines {
        problem.observations.push(Observation::line(0, m.landmark, m.segment));
    }
    problem.validate()?;

    let mut report = solve_motion_only(&mut problem, &cfg.kernel, cfg.max_iters)?;
    for round in 0..2 {
        for id in 0..problem.observations.len() {
            let o = problem.observations[id];
            if !o.active {
                continue;
            }
            let keep = problem
                .residual(&o)
                .map(|e| (e.transpose() * o.information * e)[0] <= cfg.chi2_threshold)
                .unwrap_or(false);
            if !keep {
                problem.observations[id].active = false;
                report.rejected_observations.push(id);
            }
        }
        if round == 0 {
            let live = problem.observations.iter().filter(|o| o.active).count();
            if live < 4 {
                return Err(SlamError::InsufficientObservations { have: live, need: 4 });
            }
            let second = solve_motion_only(&mut problem, &cfg.kernel, cfg.max_iters)?;
            report.iterations += second.iterations;
            report.cost_trace.extend(second.cost_trace.iter().skip(1));
            report.final_cost = second.final_cost;
            report.converged = second.converged;
        }
    }
    report.inliers = problem.observations.iter().filter(|o| o.active).count();
    Ok((problem.keyframes[0].pose, report))
}
