use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::scene::TimedPose;
use crate::align::umeyama_align;
use crate::camera::PoseSE3;
use crate::error::{Result, SlamError};
use crate::sim3::Sim3Transform;

pub const TRAJECTORY_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentMode {
    Sim3,
    Se3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMetrics {
    pub mode: AlignmentMode,
    pub ate_rmse: f64,
    pub mean_ape: f64,
    /// Per-frame translational error after alignment.
    pub ape: Vec<f64>,
    pub alignment: Sim3Transform,
}

/// Camera-centre trajectory file used by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFile {
    pub version: u32,
    pub poses: Vec<TimedPose>,
}

impl TrajectoryFile {
    pub fn new(poses: Vec<TimedPose>) -> Self {
        Self {
            version: TRAJECTORY_SCHEMA_VERSION,
            poses,
        }
    }

    pub fn centers(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(|p| p.pose.center()).collect()
    }
}

/// Absolute trajectory error of `est` against timestamp-matched `gt` positions.
pub fn compute_ate(est: &[Vector3<f64>], gt: &[Vector3<f64>], mode: AlignmentMode) -> Result<TrajectoryMetrics> {
    if est.len() != gt.len() {
        return Err(SlamError::LengthMismatch {
            est: est.len(),
            gt: gt.len(),
        });
    }
    let alignment = umeyama_align(est, gt, mode == AlignmentMode::Sim3)?;
    let ape: Vec<f64> = est
        .iter()
        .zip(gt)
        .map(|(e, g)| (alignment.apply_point(e) - g).norm())
        .collect();
    let n = ape.len() as f64;
    let ate_rmse = (ape.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let mean_ape = ape.iter().sum::<f64>() / n;
    Ok(TrajectoryMetrics {
        mode,
        ate_rmse,
        mean_ape,
        ape,
        alignment,
    })
}

pub fn compute_ate_poses(est: &[PoseSE3], gt: &[PoseSE3], mode: AlignmentMode) -> Result<TrajectoryMetrics> {
    let e: Vec<_> = est.iter().map(|p| p.center()).collect();
    let g: Vec<_> = gt.iter().map(|p| p.center()).collect();
    compute_ate(&e, &g, mode)
}
