//! Robust bundle adjustment over keyframe poses, point landmarks and line
//! landmarks.
//!
//! The cost is `Σ ρ(eᵀΩe)` over point reprojection errors (observed minus
//! predicted pixel) and line reprojection errors (signed endpoint distances to
//! the reprojected line). Lines are optimized in the 4-DOF orthonormal
//! parameterization; poses with left `(ω, ρ)` increments.

mod jacobians;
pub mod numdiff;
mod reloc;
mod solver;

pub use jacobians::{
    line_jacobians, line_residual_and_jacobians, Matrix2x6, orthonormal_jacobian, point_jacobians,
    point_residual_and_jacobians, pose_line_jacobian,
};
pub use reloc::{dlt_pnp, relocalize, LineMatch, PointMatch, RelocalizationConfig};
pub use solver::{
    mean_reprojection_error, median_depth_for_keyframe, optimize, solve_local_ba, solve_motion_only,
    LmConfig, LocalBaConfig,
};

use nalgebra::{Matrix2, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::{project_point, CameraIntrinsics, PixelPoint, PoseSE3};
use crate::error::{Result, SlamError};
use crate::line::{
    from_orthonormal, line_reprojection_error, project_line, to_orthonormal, transform_line,
    ImageLineSegment, LineSegment3, OrthonormalLine, PlueckerLine,
};
use crate::plane::PointStore;

/// 95% quantile of χ² with two degrees of freedom.
pub const CHI2_2DOF_95: f64 = 5.991;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub pose: PoseSE3,
    pub fixed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointLandmark {
    pub position: Vector3<f64>,
    pub reference_kf: usize,
    pub fixed: bool,
    pub active: bool,
}

impl PointLandmark {
    pub fn new(position: Vector3<f64>, reference_kf: usize) -> Self {
        Self {
            position,
            reference_kf,
            fixed: false,
            active: true,
        }
    }
}

/// Line landmark: orthonormal state plus a Plücker cache kept in sync with it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineLandmark {
    orth: OrthonormalLine,
    pluecker: PlueckerLine,
    pub endpoints: Option<LineSegment3>,
    pub reference_kf: usize,
    pub fixed: bool,
    pub active: bool,
}

impl LineLandmark {
    pub fn new(line: &PlueckerLine, reference_kf: usize) -> Result<Self> {
        let orth = to_orthonormal(line)?;
        Ok(Self {
            orth,
            pluecker: from_orthonormal(&orth),
            endpoints: None,
            reference_kf,
            fixed: false,
            active: true,
        })
    }

    pub fn orthonormal(&self) -> &OrthonormalLine {
        &self.orth
    }

    /// Unit-norm Plücker coordinates of the current state.
    pub fn pluecker(&self) -> &PlueckerLine {
        &self.pluecker
    }

    pub fn set_orthonormal(&mut self, orth: OrthonormalLine) {
        self.orth = orth;
        self.pluecker = from_orthonormal(&orth);
    }

    pub fn set_pluecker(&mut self, line: &PlueckerLine) -> Result<()> {
        self.set_orthonormal(to_orthonormal(line)?);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Measurement {
    Point { landmark: usize, pixel: PixelPoint },
    Line { landmark: usize, segment: ImageLineSegment },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub keyframe: usize,
    pub measurement: Measurement,
    /// Information matrix `Ω`.
    pub information: Matrix2<f64>,
    pub active: bool,
}

impl Observation {
    pub fn point(keyframe: usize, landmark: usize, pixel: PixelPoint) -> Self {
        Self {
            keyframe,
            measurement: Measurement::Point { landmark, pixel },
            information: Matrix2::identity(),
            active: true,
        }
    }

    pub fn line(keyframe: usize, landmark: usize, segment: ImageLineSegment) -> Self {
        Self {
            keyframe,
            measurement: Measurement::Line { landmark, segment },
            information: Matrix2::identity(),
            active: true,
        }
    }

    pub fn is_line(&self) -> bool {
        matches!(self.measurement, Measurement::Line { .. })
    }
}

/// Poses, landmarks and observations of one optimization problem.
///
/// Observation ids are indices into `observations`; residuals are always
/// produced in that order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaProblem {
    pub intrinsics: CameraIntrinsics,
    pub keyframes: Vec<Keyframe>,
    pub points: Vec<PointLandmark>,
    pub lines: Vec<LineLandmark>,
    pub observations: Vec<Observation>,
}

impl BaProblem {
    pub fn new(intrinsics: CameraIntrinsics) -> Self {
        Self {
            intrinsics,
            keyframes: Vec::new(),
            points: Vec::new(),
            lines: Vec::new(),
            observations: Vec::new(),
        }
    }

    /// Checks references and information matrices.
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        for (i, o) in self.observations.iter().enumerate() {
            if o.keyframe >= self.keyframes.len() {
                return Err(SlamError::InvalidInput(format!("observation {i} references missing keyframe")));
            }
            let ok = match o.measurement {
                Measurement::Point { landmark, .. } => landmark < self.points.len(),
                Measurement::Line { landmark, .. } => landmark < self.lines.len(),
            };
            if !ok {
                return Err(SlamError::InvalidInput(format!("observation {i} references missing landmark")));
            }
            let om = o.information;
            let symmetric = (om[(0, 1)] - om[(1, 0)]).abs() <= 1e-12 * om.abs().max();
            if !symmetric || om[(0, 0)] <= 0.0 || om.determinant() <= 0.0 {
                return Err(SlamError::InvalidInput(format!(
                    "observation {i} information is not symmetric positive definite"
                )));
            }
        }
        Ok(())
    }

    /// Whether an observation takes part in the cost.
    pub fn is_live(&self, obs: &Observation) -> bool {
        obs.active
            && match obs.measurement {
                Measurement::Point { landmark, .. } => self.points[landmark].active,
                Measurement::Line { landmark, .. } => self.lines[landmark].active,
            }
    }

    /// Residual of one observation.
    pub fn residual(&self, obs: &Observation) -> Result<Vector2<f64>> {
        let pose = &self.keyframes[obs.keyframe].pose;
        match obs.measurement {
            Measurement::Point { landmark, pixel } => {
                let p = project_point(pose, &self.intrinsics, &self.points[landmark].position)?;
                Ok(Vector2::new(pixel.u - p.u, pixel.v - p.v))
            }
            Measurement::Line { landmark, segment } => {
                let lc = transform_line(pose, self.lines[landmark].pluecker());
                let l = project_line(&self.intrinsics, &lc)?;
                line_reprojection_error(&l, &segment)
            }
        }
    }

    /// Residuals of all live observations in id order. Observations that fail
    /// to evaluate (e.g. behind the camera) are listed separately.
    pub fn residuals(&self) -> Residuals {
        let mut out = Residuals::default();
        for (id, obs) in self.observations.iter().enumerate() {
            if !self.is_live(obs) {
                continue;
            }
            match self.residual(obs) {
                Ok(e) => out.values.push((id, e)),
                Err(_) => out.invalid.push(id),
            }
        }
        out
    }

    /// Robust cost `Σ ρ(eᵀΩe)` over live, evaluable observations.
    pub fn cost(&self, kernel: &RobustKernel) -> f64 {
        self.residuals()
            .values
            .iter()
            .map(|(id, e)| kernel.rho((e.transpose() * self.observations[*id].information * e)[0]))
            .sum()
    }

    pub fn has_fixed_pose(&self) -> bool {
        self.keyframes.iter().any(|k| k.fixed)
    }
}

impl PointStore for Vec<PointLandmark> {
    fn position(&self, id: usize) -> Option<Vector3<f64>> {
        self.get(id).map(|p| p.position)
    }

    fn position_mut(&mut self, id: usize) -> Option<&mut Vector3<f64>> {
        self.get_mut(id).map(|p| &mut p.position)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Residuals {
    pub values: Vec<(usize, Vector2<f64>)>,
    pub invalid: Vec<usize>,
}

impl Residuals {
    /// Stacked residual vector in observation order.
    pub fn stacked(&self) -> Vec<f64> {
        self.values.iter().flat_map(|(_, e)| [e.x, e.y]).collect()
    }
}

/// Huber kernel on the squared whitened residual `s = eᵀΩe`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustKernel {
    pub delta: f64,
}

impl Default for RobustKernel {
    fn default() -> Self {
        Self {
            delta: CHI2_2DOF_95.sqrt(),
        }
    }
}

impl RobustKernel {
    pub fn new(delta: f64) -> Result<Self> {
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(SlamError::InvalidInput(format!("Huber delta must be positive, got {delta}")));
        }
        Ok(Self { delta })
    }

    /// `ρ(s) = s` for `s ≤ δ²`, else `2δ√s − δ²`.
    pub fn rho(&self, s: f64) -> f64 {
        let d2 = self.delta * self.delta;
        if s <= d2 {
            s
        } else {
            2.0 * self.delta * s.sqrt() - d2
        }
    }

    /// `ρ'(s)`, the IRLS weight.
    pub fn weight(&self, s: f64) -> f64 {
        if s <= self.delta * self.delta {
            1.0
        } else {
            self.delta / s.sqrt()
        }
    }
}

/// Outcome of a solve.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    /// Accepted LM steps.
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Cost after each accepted step, starting with the initial cost.
    pub cost_trace: Vec<f64>,
    pub rejected_observations: Vec<usize>,
    pub rejected_lines: Vec<usize>,
    /// Observations skipped because they could not be evaluated.
    pub invalid_observations: Vec<usize>,
    pub inliers: usize,
    pub converged: bool,
}
