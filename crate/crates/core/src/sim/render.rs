use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scene::SyntheticScene;
use crate::camera::PixelPoint;
use crate::error::{Result, SlamError};
use crate::line::ImageLineSegment;

pub const OBSERVATION_SCHEMA_VERSION: u32 = 1;

/// Label used for points that belong to no segmented plane.
pub const NO_PLANE: i64 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    /// Standard deviation of the Gaussian pixel noise.
    pub noise_px: f64,
    /// Probability that a point observation is associated with a wrong landmark.
    pub point_outlier_rate: f64,
    /// Probability that a line observation is associated with a wrong landmark.
    pub line_outlier_rate: f64,
    /// Per-frame probability of merging two plane masks, and separately of
    /// splitting one mask in two.
    pub mask_corruption_rate: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            noise_px: 0.0,
            point_outlier_rate: 0.0,
            line_outlier_rate: 0.0,
            mask_corruption_rate: 0.0,
        }
    }
}

impl RenderConfig {
    pub fn uniform(noise_px: f64, outlier_rate: f64, mask_corruption_rate: f64) -> Self {
        Self {
            noise_px,
            point_outlier_rate: outlier_rate,
            line_outlier_rate: outlier_rate,
            mask_corruption_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [self.point_outlier_rate, self.line_outlier_rate, self.mask_corruption_rate];
        if !(self.noise_px >= 0.0 && self.noise_px.is_finite()) || rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(SlamError::InvalidInput(format!("invalid render configuration {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointObservation {
    /// Associated landmark id, possibly wrong when `outlier` is set.
    pub landmark: usize,
    pub true_landmark: usize,
    pub pixel: PixelPoint,
    /// Segmentation label: a plane mask id or [`NO_PLANE`].
    pub label: i64,
    pub outlier: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineObservation {
    pub landmark: usize,
    pub true_landmark: usize,
    pub segment: ImageLineSegment,
    pub outlier: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameObservations {
    pub keyframe: usize,
    pub points: Vec<PointObservation>,
    pub lines: Vec<LineObservation>,
    pub mask_merged: bool,
    pub mask_split: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    pub version: u32,
    pub seed: u64,
    pub config: RenderConfig,
    pub frames: Vec<FrameObservations>,
}

impl ObservationSet {
    pub fn point_count(&self) -> usize {
        self.frames.iter().map(|f| f.points.len()).sum()
    }

    pub fn line_count(&self) -> usize {
        self.frames.iter().map(|f| f.lines.len()).sum()
    }

    pub fn outlier_count(&self) -> usize {
        self.frames
            .iter()
            .map(|f| f.points.iter().filter(|o| o.outlier).count() + f.lines.iter().filter(|o| o.outlier).count())
            .sum()
    }
}

fn reassign(rng: &mut ChaCha8Rng, truth: usize, n: usize) -> usize {
    let k = rng.random_range(0..n - 1);
    if k >= truth {
        k + 1
    } else {
        k
    }
}

/// Synthesizes per-keyframe observations of every visible landmark.
pub fn render_observations(scene: &SyntheticScene, cfg: &RenderConfig, seed: u64) -> Result<ObservationSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.noise_px.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let jitter = |rng: &mut ChaCha8Rng, p: PixelPoint| {
        if cfg.noise_px == 0.0 {
            p
        } else {
            PixelPoint::new(p.u + noise.sample(rng), p.v + noise.sample(rng))
        }
    };
    let n_planes = scene.planes.len();
    let (n_pts, n_lines) = (scene.points.len(), scene.lines.len());
    let mut frames = Vec::with_capacity(scene.trajectory.len());
    for kf in 0..scene.trajectory.len() {
        let mut labels: Vec<i64> = (0..n_planes as i64).collect();
        let mut split: Option<(usize, nalgebra::Vector3<f64>)> = None;
        let mask_merged = n_planes >= 2 && rng.random_bool(cfg.mask_corruption_rate);
        if mask_merged {
            let idx: Vec<usize> = (0..n_planes).collect();
            let pair: Vec<usize> = idx.choose_multiple(&mut rng, 2).copied().collect();
            let (keep, gone) = (pair[0].min(pair[1]), pair[0].max(pair[1]));
            labels[gone] = keep as i64;
        }
        let mask_split = n_planes >= 1 && rng.random_bool(cfg.mask_corruption_rate);
        if mask_split {
            let k = rng.random_range(0..n_planes);
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            let p = &scene.planes[k];
            split = Some((k, p.axes[0] * a.cos() + p.axes[1] * a.sin()));
        }

        let mut points = Vec::new();
        for (id, pt) in scene.points.iter().enumerate() {
            let Some(px) = scene.visible_pixel(kf, &pt.position) else { continue };
            let pixel = jitter(&mut rng, px);
            let outlier = n_pts > 1 && rng.random_bool(cfg.point_outlier_rate);
            let landmark = if outlier { reassign(&mut rng, id, n_pts) } else { id };
            let label = match pt.plane {
                None => NO_PLANE,
                Some(k) => match split {
                    Some((sk, dir)) if sk == k && (pt.position - scene.planes[k].center).dot(&dir) > 0.0 => {
                        (n_planes + k) as i64
                    }
                    _ => labels[k],
                },
            };
            points.push(PointObservation {
                landmark,
                true_landmark: id,
                pixel,
                label,
                outlier,
            });
        }
        let mut lines = Vec::new();
        for (id, l) in scene.lines.iter().enumerate() {
            let Some((a, b)) = scene.visible_segment(kf, l) else { continue };
            let segment = ImageLineSegment::new(jitter(&mut rng, a), jitter(&mut rng, b));
            let outlier = n_lines > 1 && rng.random_bool(cfg.line_outlier_rate);
            let landmark = if outlier { reassign(&mut rng, id, n_lines) } else { id };
            lines.push(LineObservation {
                landmark,
                true_landmark: id,
                segment,
                outlier,
            });
        }
        frames.push(FrameObservations {
            keyframe: kf,
            points,
            lines,
            mask_merged,
            mask_split,
        });
    }
    Ok(ObservationSet {
        version: OBSERVATION_SCHEMA_VERSION,
        seed,
        config: *cfg,
        frames,
    })
}
