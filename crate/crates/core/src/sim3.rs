//! Similarity transforms `x ↦ s·R·x + t`.

use nalgebra::{Matrix3, Matrix4, Matrix6, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::{skew, so3_exp, so3_log, PoseSE3};
use crate::error::{Result, SlamError};
use crate::line::PlueckerLine;

pub type Vector7 = SVector<f64, 7>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sim3Transform {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Sim3Transform {
    fn default() -> Self {
        Self::identity()
    }
}

impl Sim3Transform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(scale: f64, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(SlamError::InvalidInput(format!("Sim(3) scale must be positive, got {scale}")));
        }
        let pose = PoseSE3::new(rotation, translation);
        Ok(Self {
            scale,
            rotation: pose.rotation,
            translation,
        })
    }

    pub fn from_pose(pose: &PoseSE3) -> Self {
        Self {
            scale: 1.0,
            rotation: pose.rotation,
            translation: pose.translation,
        }
    }

    /// Rigid camera pose represented by a world→camera similarity: the
    /// rotation is kept and the translation divided by the scale.
    pub fn to_pose(&self) -> PoseSE3 {
        PoseSE3::new(self.rotation, self.translation / self.scale)
    }

    pub fn apply_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x * self.scale + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation * self.scale + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            scale: 1.0 / self.scale,
            rotation: rt,
            translation: -(rt * self.translation) / self.scale,
        }
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(self.rotation * self.scale));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// `[[sR, [t]ₓR], [0, R]]` acting on `(m, d)` Plücker vectors.
    pub fn line_matrix(&self) -> Matrix6<f64> {
        let mut m = Matrix6::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(self.rotation * self.scale));
        m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(skew(&self.translation) * self.rotation));
        m.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.rotation);
        m
    }

    pub fn apply_line(&self, line: &PlueckerLine) -> PlueckerLine {
        PlueckerLine::from_vector(&(self.line_matrix() * line.to_vector()))
    }

    /// `(ω, t, ln s)`.
    pub fn log(&self) -> Vector7 {
        let w = so3_log(&self.rotation);
        Vector7::from_column_slice(&[
            w.x,
            w.y,
            w.z,
            self.translation.x,
            self.translation.y,
            self.translation.z,
            self.scale.ln(),
        ])
    }

    /// Inverse of [`Sim3Transform::log`].
    pub fn exp(v: &Vector7) -> Self {
        Self {
            scale: v[6].exp(),
            rotation: so3_exp(&Vector3::new(v[0], v[1], v[2])),
            translation: Vector3::new(v[3], v[4], v[5]),
        }
    }

    /// Left update `Exp(δ) ∘ self`.
    pub fn retract(&self, delta: &Vector7) -> Self {
        Self::exp(delta).compose(self)
    }
}
