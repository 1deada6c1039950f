use std::f64::consts::{PI, TAU};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{project_point, CameraIntrinsics, PixelPoint, PoseSE3};
use crate::error::{Result, SlamError};
use crate::plane::Plane3;

pub const SCENE_SCHEMA_VERSION: u32 = 1;

const MAX_PLACEMENT_ATTEMPTS: usize = 2000;
const MIN_SEGMENT_PX: f64 = 20.0;
const MAX_DEPTH: f64 = 20.0;
const MIN_VIEW_DEPTH: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    /// Cameras circle the content and look at its centre.
    Orbit,
    /// Cameras travel a closed circuit inside a room and look at the walls;
    /// the last keyframe coincides with the first.
    CorridorLoop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub trajectory: TrajectoryKind,
    pub keyframes: usize,
    pub planes: usize,
    /// Total point landmarks, planar and free.
    pub points: usize,
    /// Fraction of `points` placed on planes.
    pub planar_fraction: f64,
    pub lines: usize,
    /// Fraction of `lines` lying on planes.
    pub planar_line_fraction: f64,
    /// Room side length in metres.
    pub room_size: f64,
    /// Orbit arc in degrees; ignored for loops.
    pub arc_deg: f64,
    pub intrinsics: CameraIntrinsics,
    pub width: u32,
    pub height: u32,
    pub min_views: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            trajectory: TrajectoryKind::Orbit,
            keyframes: 20,
            planes: 3,
            points: 200,
            planar_fraction: 0.75,
            lines: 50,
            planar_line_fraction: 0.5,
            room_size: 8.0,
            arc_deg: 360.0,
            intrinsics: CameraIntrinsics {
                fx: 500.0,
                fy: 500.0,
                cx: 320.0,
                cy: 240.0,
            },
            width: 640,
            height: 480,
            min_views: 2,
        }
    }
}

impl SceneConfig {
    /// Few points, many lines: the setting where line features matter most.
    pub fn low_texture() -> Self {
        Self {
            keyframes: 10,
            planes: 2,
            points: 14,
            planar_fraction: 0.5,
            lines: 40,
            arc_deg: 90.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics
            .validate()
            .map_err(|e| SlamError::InfeasibleConfig(e.to_string()))?;
        let bad = |msg: &str| Err(SlamError::InfeasibleConfig(msg.to_string()));
        if self.keyframes < 3 {
            return bad("at least three keyframes are required");
        }
        if self.min_views < 2 || self.min_views > self.keyframes {
            return bad("min_views must lie in [2, keyframes]");
        }
        if !(0.0..=1.0).contains(&self.planar_fraction) || !(0.0..=1.0).contains(&self.planar_line_fraction) {
            return bad("fractions must lie in [0, 1]");
        }
        if !(self.room_size >= 2.0 && self.room_size <= 100.0) {
            return bad("room_size must lie in [2, 100] m");
        }
        if self.width < 16 || self.height < 16 {
            return bad("image is too small");
        }
        if !(self.arc_deg > 0.0 && self.arc_deg <= 360.0) {
            return bad("arc_deg must lie in (0, 360]");
        }
        let planar_pts = self.planar_point_count();
        if planar_pts > 0 && self.planes == 0 {
            return bad("planar points requested without planes");
        }
        if self.trajectory == TrajectoryKind::CorridorLoop && self.planes > 6 {
            return bad("a room has at most six planes");
        }
        Ok(())
    }

    pub fn planar_point_count(&self) -> usize {
        (self.points as f64 * self.planar_fraction).round() as usize
    }

    fn planar_line_count(&self) -> usize {
        if self.planes == 0 {
            0
        } else {
            (self.lines as f64 * self.planar_line_fraction).round() as usize
        }
    }
}

/// Rectangular planar patch `center + a·axes[0] + b·axes[1]`, `|a|,|b| ≤ half_extent`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePlane {
    pub plane: Plane3,
    pub center: Vector3<f64>,
    pub axes: [Vector3<f64>; 2],
    pub half_extent: [f64; 2],
}

impl ScenePlane {
    fn new(center: Vector3<f64>, normal: Vector3<f64>, u: Vector3<f64>, half_extent: [f64; 2]) -> Result<Self> {
        let n = normal.normalize();
        let u = (u - n * n.dot(&u)).normalize();
        let v = n.cross(&u);
        Ok(Self {
            plane: Plane3::new(n, -n.dot(&center))?,
            center,
            axes: [u, v],
            half_extent,
        })
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vector3<f64> {
        let a = rng.random_range(-self.half_extent[0]..=self.half_extent[0]);
        let b = rng.random_range(-self.half_extent[1]..=self.half_extent[1]);
        self.center + self.axes[0] * a + self.axes[1] * b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenePoint {
    pub position: Vector3<f64>,
    pub plane: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneLine {
    pub start: Vector3<f64>,
    pub end: Vector3<f64>,
    pub plane: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedPose {
    pub timestamp: f64,
    pub pose: PoseSE3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub version: u32,
    pub seed: u64,
    pub config: SceneConfig,
    pub planes: Vec<ScenePlane>,
    pub points: Vec<ScenePoint>,
    pub lines: Vec<SceneLine>,
    pub trajectory: Vec<TimedPose>,
    /// Keyframe pairs `(i, j)` that close a loop.
    pub loops: Vec<(usize, usize)>,
}

impl SyntheticScene {
    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.config.intrinsics
    }

    pub fn poses(&self) -> Vec<PoseSE3> {
        self.trajectory.iter().map(|t| t.pose).collect()
    }

    pub fn in_image(&self, px: &PixelPoint) -> bool {
        px.u >= 0.0 && px.v >= 0.0 && px.u < self.config.width as f64 && px.v < self.config.height as f64
    }

    /// Pixel of `x` in keyframe `kf`, if it lies in front of the camera and inside the image.
    pub fn visible_pixel(&self, kf: usize, x: &Vector3<f64>) -> Option<PixelPoint> {
        visible_pixel(&self.config, &self.trajectory[kf].pose, x)
    }

    pub fn visible_segment(&self, kf: usize, line: &SceneLine) -> Option<(PixelPoint, PixelPoint)> {
        segment_view(&self.config, &self.trajectory[kf].pose, line)
    }

    /// Distance between the first and last camera centre of a loop trajectory.
    pub fn closure_gap(&self) -> f64 {
        let a = self.trajectory.first().map(|t| t.pose.center());
        let b = self.trajectory.last().map(|t| t.pose.center());
        match (a, b) {
            (Some(a), Some(b)) => (a - b).norm(),
            _ => 0.0,
        }
    }
}

fn visible_pixel(cfg: &SceneConfig, pose: &PoseSE3, x: &Vector3<f64>) -> Option<PixelPoint> {
    let depth = pose.transform_point(x).z;
    if !(MIN_VIEW_DEPTH..=MAX_DEPTH).contains(&depth) {
        return None;
    }
    let px = project_point(pose, &cfg.intrinsics, x).ok()?;
    (px.u >= 0.0 && px.v >= 0.0 && px.u < cfg.width as f64 && px.v < cfg.height as f64).then_some(px)
}

fn segment_view(cfg: &SceneConfig, pose: &PoseSE3, line: &SceneLine) -> Option<(PixelPoint, PixelPoint)> {
    let a = visible_pixel(cfg, pose, &line.start)?;
    let b = visible_pixel(cfg, pose, &line.end)?;
    ((a.u - b.u).hypot(a.v - b.v) >= MIN_SEGMENT_PX).then_some((a, b))
}

fn trajectory(cfg: &SceneConfig) -> Vec<TimedPose> {
    let n = cfg.keyframes;
    let up = Vector3::new(0.0, 0.0, 1.0);
    (0..n)
        .map(|i| {
            let pose = match cfg.trajectory {
                TrajectoryKind::Orbit => {
                    let arc = cfg.arc_deg.to_radians();
                    let span = if cfg.arc_deg >= 360.0 { TAU * (n - 1) as f64 / n as f64 } else { arc };
                    let th = span * i as f64 / (n - 1) as f64;
                    let r = cfg.room_size * 0.5;
                    let c = Vector3::new(r * th.cos(), r * th.sin(), 0.25 * (2.0 * th).sin());
                    PoseSE3::look_at(&c, &Vector3::zeros(), &up)
                }
                TrajectoryKind::CorridorLoop => {
                    let th = TAU * i as f64 / (n - 1) as f64;
                    let r = cfg.room_size * 0.25;
                    let c = Vector3::new(r * th.cos(), r * th.sin(), 0.0);
                    // Look outward and slightly ahead along the direction of travel.
                    let dir = Vector3::new((th + 0.35).cos(), (th + 0.35).sin(), 0.0);
                    PoseSE3::look_at(&c, &(c + dir), &up)
                }
            };
            TimedPose {
                timestamp: i as f64 * 0.1,
                pose,
            }
        })
        .collect()
}

fn scene_planes(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<Vec<ScenePlane>> {
    let mut out = Vec::with_capacity(cfg.planes);
    match cfg.trajectory {
        TrajectoryKind::Orbit => {
            // A floor patch below the content, then vertical panels on a ring
            // that face outward towards the cameras.
            for k in 0..cfg.planes {
                if k == 0 {
                    let c = Vector3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), -1.0);
                    out.push(ScenePlane::new(c, Vector3::z(), Vector3::x(), [1.3, 1.3])?);
                    continue;
                }
                let vertical = cfg.planes - 1;
                let phi = TAU * (k - 1) as f64 / vertical as f64 + rng.random_range(-0.1..0.1);
                let n = Vector3::new(phi.cos(), phi.sin(), 0.0);
                let half_width = if vertical <= 2 { 0.7 } else { (0.9 * (PI / vertical as f64).tan()).min(0.7) };
                out.push(ScenePlane::new(n * 1.0, n, Vector3::z(), [0.85, half_width])?);
            }
        }
        TrajectoryKind::CorridorLoop => {
            let h = cfg.room_size * 0.5;
            let walls = [
                (Vector3::new(h, 0.0, 0.0), -Vector3::x(), Vector3::y(), [h * 0.95, 1.2]),
                (Vector3::new(0.0, h, 0.0), -Vector3::y(), Vector3::x(), [h * 0.95, 1.2]),
                (Vector3::new(-h, 0.0, 0.0), Vector3::x(), Vector3::y(), [h * 0.95, 1.2]),
                (Vector3::new(0.0, -h, 0.0), Vector3::y(), Vector3::x(), [h * 0.95, 1.2]),
                (Vector3::new(0.0, 0.0, -1.3), Vector3::z(), Vector3::x(), [h * 0.9, h * 0.9]),
                (Vector3::new(0.0, 0.0, 1.6), -Vector3::z(), Vector3::x(), [h * 0.9, h * 0.9]),
            ];
            for (c, n, u, e) in walls.into_iter().take(cfg.planes) {
                out.push(ScenePlane::new(c, n, u, e)?);
            }
        }
    }
    Ok(out)
}

fn free_point(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vector3<f64> {
    match cfg.trajectory {
        TrajectoryKind::Orbit => {
            let b = cfg.room_size * 0.2;
            Vector3::new(rng.random_range(-b..b), rng.random_range(-b..b), rng.random_range(-1.0..1.0))
        }
        TrajectoryKind::CorridorLoop => {
            let h = cfg.room_size * 0.5;
            let r = rng.random_range(0.65 * h..0.9 * h);
            let th = rng.random_range(0.0..TAU);
            Vector3::new(r * th.cos(), r * th.sin(), rng.random_range(-1.0..1.2))
        }
    }
}

fn view_count(traj: &[TimedPose], f: impl Fn(&PoseSE3) -> bool) -> usize {
    traj.iter().filter(|t| f(&t.pose)).count()
}

/// Builds a deterministic synthetic scene from `config` and `seed`.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<SyntheticScene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let traj = trajectory(config);
    let planes = scene_planes(config, &mut rng)?;

    let planar_pts = config.planar_point_count();
    let mut points = Vec::with_capacity(config.points);
    for i in 0..config.points {
        let plane = (i < planar_pts).then(|| i % planes.len());
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let x = match plane {
                Some(k) => planes[k].sample(&mut rng),
                None => free_point(config, &mut rng),
            };
            if view_count(&traj, |p| visible_pixel(config, p, &x).is_some()) >= config.min_views {
                placed = Some(x);
                break;
            }
        }
        let position = placed.ok_or_else(|| {
            SlamError::InfeasibleConfig(format!("point {i} cannot be made visible from {} views", config.min_views))
        })?;
        points.push(ScenePoint { position, plane });
    }

    let planar_lines = config.planar_line_count();
    let mut lines = Vec::with_capacity(config.lines);
    for i in 0..config.lines {
        let plane = (i < planar_lines).then(|| i % planes.len());
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let (a, b) = match plane {
                Some(k) => (planes[k].sample(&mut rng), planes[k].sample(&mut rng)),
                None => {
                    let a = free_point(config, &mut rng);
                    let dir = Vector3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    );
                    if dir.norm() < 1e-3 {
                        continue;
                    }
                    (a, a + dir.normalize() * rng.random_range(0.4..1.5))
                }
            };
            if (a - b).norm() < 0.3 {
                continue;
            }
            let line = SceneLine { start: a, end: b, plane };
            if view_count(&traj, |p| segment_view(config, p, &line).is_some()) >= config.min_views {
                placed = Some(line);
                break;
            }
        }
        lines.push(placed.ok_or_else(|| {
            SlamError::InfeasibleConfig(format!("line {i} cannot be made visible from {} views", config.min_views))
        })?);
    }

    let loops = match config.trajectory {
        TrajectoryKind::CorridorLoop => vec![(config.keyframes - 1, 0)],
        TrajectoryKind::Orbit => Vec::new(),
    };
    Ok(SyntheticScene {
        version: SCENE_SCHEMA_VERSION,
        seed,
        config: config.clone(),
        planes,
        points,
        lines,
        trajectory: traj,
        loops,
    })
}
