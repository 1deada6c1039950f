//! End-to-end experiment: generate → render → triangulate → loop correction →
//! local BA → plane fitting → metrics.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::{compute_ate_poses, AlignmentMode};
use super::render::{render_observations, ObservationSet, RenderConfig};
use super::scene::{generate_scene, SyntheticScene, TimedPose};
use crate::align::umeyama_align;
use crate::ba::{
    mean_reprojection_error, median_depth_for_keyframe, relocalize, solve_local_ba, BaProblem, Keyframe, LineLandmark,
    LineMatch, LocalBaConfig, Observation, PointLandmark, PointMatch, RelocalizationConfig, RobustKernel,
    CHI2_2DOF_95,
};
use crate::camera::{project_point, se3_retract, triangulate_point, PoseSE3};
use crate::error::{Result, SlamError};
use crate::line::{
    back_project_line, image_line_from_projection, line_reprojection_error, pluecker_from_endpoints, transform_line, triangulate_multi_view,
    triangulate_two_view, trim_endpoints, PlueckerLine,
};
use crate::loop_closure::{correct_map, fuse_points, optimize_pose_graph, EdgeKind, PoseGraph, PoseGraphEdge};
use crate::map::MapStore;
use crate::plane::{
    adaptive_thresholds, sequential_ransac_planes, try_merge, AdaptiveCoefficients, CandidateSet,
    GeometricThresholds, Plane3, RansacConfig,
};
use crate::sim::scene::SceneConfig;
use crate::sim3::Sim3Transform;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const RUNS_SCHEMA_VERSION: u32 = 1;

/// Which landmark types the back end uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PipelineMode {
    #[serde(rename = "P")]
    Points,
    #[serde(rename = "PL")]
    PointsLines,
    #[serde(rename = "PLP")]
    PointsLinesPlanes,
}

impl PipelineMode {
    pub fn uses_lines(self) -> bool {
        !matches!(self, PipelineMode::Points)
    }

    pub fn uses_planes(self) -> bool {
        matches!(self, PipelineMode::PointsLinesPlanes)
    }

    pub fn label(self) -> &'static str {
        match self {
            PipelineMode::Points => "P",
            PipelineMode::PointsLines => "PL",
            PipelineMode::PointsLinesPlanes => "PLP",
        }
    }
}

/// Perturbation of the initial keyframe poses handed to the back end.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub rot_deg: f64,
    pub trans_m: f64,
    /// Total odometry scale growth over the trajectory (0.1 = 10%).
    pub scale_drift: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            rot_deg: 1.0,
            trans_m: 0.05,
            scale_drift: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    pub enabled: bool,
    /// Weight of loop edges relative to chain edges.
    pub weight: f64,
    /// Noise (m) on the 3D-3D matches behind the loop similarity estimate.
    pub match_noise_m: f64,
    pub max_iters: usize,
    pub fuse: bool,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            weight: 10.0,
            match_noise_m: 0.0,
            max_iters: 100,
            fuse: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlaneSettings {
    pub thresholds: GeometricThresholds,
    pub adaptive: bool,
    pub coefficients: AdaptiveCoefficients,
    pub ransac: RansacConfig,
}

impl Default for PlaneSettings {
    fn default() -> Self {
        Self {
            thresholds: GeometricThresholds::default(),
            adaptive: true,
            coefficients: AdaptiveCoefficients::default(),
            ransac: RansacConfig::default(),
        }
    }
}

/// Landmark initialization from the observations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingSettings {
    /// Reprojection gate (px) for views agreeing with a two-view hypothesis.
    pub consensus_px: f64,
    /// Lines whose interpretation planes never open wider than this are not
    /// triangulated.
    pub min_line_parallax_deg: f64,
}

impl Default for MappingSettings {
    fn default() -> Self {
        Self {
            consensus_px: 25.0,
            min_line_parallax_deg: 15.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub huber_delta: f64,
    pub local_ba: LocalBaConfig,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            huber_delta: CHI2_2DOF_95.sqrt(),
            local_ba: LocalBaConfig::default(),
        }
    }
}

/// Pose-only relocalization trial run against the ground-truth map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelocalizationTrial {
    pub enabled: bool,
    pub rot_deg: f64,
    pub trans_m: f64,
}

impl Default for RelocalizationTrial {
    fn default() -> Self {
        Self {
            enabled: false,
            rot_deg: 5.0,
            trans_m: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub scene: SceneConfig,
    pub render: RenderConfig,
    pub modes: Vec<PipelineMode>,
    pub seeds: Vec<u64>,
    pub init: InitConfig,
    pub mapping: MappingSettings,
    pub solver: SolverSettings,
    pub planes: PlaneSettings,
    pub loop_closure: LoopConfig,
    pub relocalization: RelocalizationTrial,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_SCHEMA_VERSION,
            scene: SceneConfig::default(),
            render: RenderConfig::default(),
            modes: vec![PipelineMode::PointsLinesPlanes],
            seeds: vec![0],
            init: InitConfig::default(),
            mapping: MappingSettings::default(),
            solver: SolverSettings::default(),
            planes: PlaneSettings::default(),
            loop_closure: LoopConfig::default(),
            relocalization: RelocalizationTrial::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| SlamError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SlamError::Config(m));
        if self.version != CONFIG_SCHEMA_VERSION {
            return bad(format!("unsupported config version {}", self.version));
        }
        if self.modes.is_empty() || self.seeds.is_empty() {
            return bad("modes and seeds must be non-empty".into());
        }
        let mut modes = self.modes.clone();
        modes.sort();
        modes.dedup();
        if modes.len() != self.modes.len() {
            return bad("modes must not repeat".into());
        }
        self.scene.validate().map_err(|e| SlamError::Config(e.to_string()))?;
        self.render.validate().map_err(|e| SlamError::Config(e.to_string()))?;
        self.planes.thresholds.validate().map_err(|e| SlamError::Config(e.to_string()))?;
        let i = &self.init;
        if !(i.rot_deg >= 0.0 && i.trans_m >= 0.0 && i.scale_drift > -0.5 && i.scale_drift < 10.0) {
            return bad(format!("invalid init perturbation {i:?}"));
        }
        if !(self.solver.huber_delta > 0.0) || !(self.loop_closure.weight > 0.0) {
            return bad("kernel width and loop weight must be positive".into());
        }
        let m = &self.mapping;
        if !(m.consensus_px > 0.0) || !(0.0..90.0).contains(&m.min_line_parallax_deg) {
            return bad(format!("invalid mapping settings {m:?}"));
        }
        Ok(())
    }

    /// Hex SHA-256 prefix of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub seed: u64,
    pub mode: PipelineMode,
    pub config_hash: String,
    pub ate_rmse_m: f64,
    pub mean_ape_m: f64,
    pub initial_ate_m: f64,
    pub rejected_outliers: usize,
    pub injected_outliers: usize,
    pub caught_outliers: usize,
    pub false_rejections: usize,
    pub mean_reprojection_px: f64,
    pub planes: usize,
    pub iterations: usize,
    pub loop_closed: bool,
    pub reloc_mean_ape_m: Option<f64>,
    /// Wall-clock time; zero in deterministic mode.
    pub runtime_ms: u64,
}

/// Fixed CSV columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub run_id: String,
    pub seed: u64,
    pub config_hash: String,
    pub ate_rmse_m: f64,
    pub mean_ape_m: f64,
    pub rejected_outliers: usize,
}

impl From<&RunRecord> for CsvRow {
    fn from(r: &RunRecord) -> Self {
        Self {
            run_id: r.run_id.clone(),
            seed: r.seed,
            config_hash: r.config_hash.clone(),
            ate_rmse_m: r.ate_rmse_m,
            mean_ape_m: r.mean_ape_m,
            rejected_outliers: r.rejected_outliers,
        }
    }
}

/// Everything a single run produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub record: RunRecord,
    pub scene: SyntheticScene,
    pub observations: ObservationSet,
    pub map: MapStore,
    pub initial_poses: Vec<PoseSE3>,
    /// Per problem observation: whether the simulator injected it as an outlier.
    pub outlier_flags: Vec<bool>,
}

impl RunOutcome {
    pub fn trajectory(&self) -> Vec<TimedPose> {
        self.scene
            .trajectory
            .iter()
            .zip(&self.map.problem.keyframes)
            .map(|(t, k)| TimedPose {
                timestamp: t.timestamp,
                pose: k.pose,
            })
            .collect()
    }
}

/// Independent stream `k` derived from a run seed.
pub fn sub_seed(seed: u64, k: u64) -> u64 {
    let mut z = seed ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v = Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng));
        if v.norm() > 1e-6 {
            return v.normalize();
        }
    }
}

/// Applies a rotation of `rot` rad about a random axis and a random
/// camera-centre shift of `trans` m.
pub fn perturb_pose(pose: &PoseSE3, rng: &mut ChaCha8Rng, rot: f64, trans: f64) -> PoseSE3 {
    let c = pose.center() + random_unit(rng) * trans * rng.random_range(0.5..1.0);
    let mut d = Vector6::zeros();
    d.fixed_rows_mut::<3>(0)
        .copy_from(&(random_unit(rng) * rot * rng.random_range(0.5..1.0)));
    let r = se3_retract(pose, &d).rotation;
    PoseSE3::new(r, -(r * c))
}

/// Local scale of the drifted odometry at each keyframe.
fn drift_scales(n: usize, drift: f64) -> Vec<f64> {
    (0..n)
        .map(|i| (1.0 + drift).powf(i as f64 / (n - 1).max(1) as f64))
        .collect()
}

/// Initial poses: the first two keyframes are exact anchors, the rest follow
/// scale-drifted odometry and then receive random perturbations.
pub fn initial_poses(gt: &[PoseSE3], init: &InitConfig, seed: u64) -> Vec<PoseSE3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = drift_scales(gt.len(), init.scale_drift);
    let mut centers = vec![gt[0].center()];
    for i in 1..gt.len() {
        let step = gt[i].center() - gt[i - 1].center();
        let prev = centers[i - 1];
        centers.push(if i == 1 { gt[1].center() } else { prev + step * k[i] });
    }
    gt.iter()
        .zip(centers)
        .enumerate()
        .map(|(i, (g, c))| {
            if i < 2 {
                return *g;
            }
            let drifted = PoseSE3::new(g.rotation, -(g.rotation * c));
            perturb_pose(&drifted, &mut rng, init.rot_deg.to_radians(), init.trans_m)
        })
        .collect()
}

struct Built {
    map: MapStore,
    outlier: Vec<bool>,
    point_index: Vec<Option<usize>>,
}

/// Largest angle between interpretation-plane normals over all view pairs.
fn line_parallax(lines: &[Vector3<f64>], projections: &[nalgebra::Matrix3x4<f64>]) -> f64 {
    let normals: Vec<Vector3<f64>> = lines
        .iter()
        .zip(projections)
        .map(|(l, p)| back_project_line(p, l).fixed_rows::<3>(0).normalize())
        .collect();
    let mut best = 0.0f64;
    for (i, a) in normals.iter().enumerate() {
        for b in &normals[i + 1..] {
            best = best.max(a.cross(b).norm().clamp(0.0, 1.0).asin());
        }
    }
    best
}

/// Two-view hypothesis with the most views within `gate_px`; ties go to the
/// widest baseline. `hypothesis(a, b)` returns per-view pixel errors.
fn best_pair(
    views: &[(usize, usize)],
    poses: &[PoseSE3],
    gate_px: f64,
    mut hypothesis: impl FnMut(usize, usize) -> Option<Vec<f64>>,
) -> Option<((usize, usize), Vec<f64>)> {
    let mut pairs = Vec::new();
    for a in 0..views.len() {
        for b in a + 1..views.len() {
            if views[a].0 != views[b].0 {
                pairs.push((a, b, (poses[views[a].0].center() - poses[views[b].0].center()).norm()));
            }
        }
    }
    pairs.sort_by(|x, y| y.2.total_cmp(&x.2));
    let mut best: Option<((usize, usize), Vec<f64>, usize)> = None;
    for (a, b, _) in pairs {
        let Some(errors) = hypothesis(a, b) else { continue };
        let support = errors.iter().filter(|e| **e < gate_px).count();
        if best.as_ref().is_none_or(|(_, _, s)| support > *s) {
            best = Some(((a, b), errors, support));
        }
    }
    best.map(|(pair, errors, _)| (pair, errors))
}

fn build_map(
    scene: &SyntheticScene,
    obs: &ObservationSet,
    poses: &[PoseSE3],
    mode: PipelineMode,
    settings: &MappingSettings,
) -> Built {
    let k = *scene.intrinsics();
    let mut map = MapStore::new(k);
    for (i, p) in poses.iter().enumerate() {
        map.problem.keyframes.push(Keyframe { pose: *p, fixed: i < 2 });
    }

    let mut point_views: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    let mut line_views: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for f in &obs.frames {
        for (j, o) in f.points.iter().enumerate() {
            point_views.entry(o.landmark).or_default().push((f.keyframe, j));
        }
        if mode.uses_lines() {
            for (j, o) in f.lines.iter().enumerate() {
                line_views.entry(o.landmark).or_default().push((f.keyframe, j));
            }
        }
    }

    let mut outlier = Vec::new();
    let mut point_index = vec![None; scene.points.len()];
    for (&id, views) in &point_views {
        let px: Vec<_> = views.iter().map(|(kf, j)| obs.frames[*kf].points[*j].pixel).collect();
        let errors = |x: &Vector3<f64>| -> Vec<f64> {
            views
                .iter()
                .zip(&px)
                .map(|((kf, _), p)| project_point(&poses[*kf], &k, x).map_or(f64::INFINITY, |q| (q.u - p.u).hypot(q.v - p.v)))
                .collect()
        };
        let Some(seed) = best_pair(views, poses, settings.consensus_px, |a, b| {
            let x = triangulate_point(&k, &[poses[views[a].0], poses[views[b].0]], &[px[a], px[b]]).ok()?;
            Some(errors(&x))
        }) else {
            continue;
        };
        let consensus: Vec<usize> = (0..views.len()).filter(|&v| seed.1[v] < settings.consensus_px).collect();
        let ps: Vec<PoseSE3> = consensus.iter().map(|&v| poses[views[v].0]).collect();
        let cpx: Vec<_> = consensus.iter().map(|&v| px[v]).collect();
        let Ok(x) = triangulate_point(&k, &ps, &cpx) else { continue };
        let idx = map.problem.points.len();
        map.problem.points.push(PointLandmark::new(x, views[consensus[0]].0));
        point_index[id] = Some(idx);
        for (kf, j) in views {
            let o = &obs.frames[*kf].points[*j];
            map.problem.observations.push(Observation::point(*kf, idx, o.pixel));
            outlier.push(o.outlier);
        }
    }

    for views in line_views.values() {
        let segs: Vec<_> = views.iter().map(|(kf, j)| obs.frames[*kf].lines[*j].segment).collect();
        let projections: Vec<_> = views.iter().map(|(kf, _)| poses[*kf].projection_matrix(&k)).collect();
        let mut hypotheses = BTreeMap::new();
        let Some(((a, b), errors)) = best_pair(views, poses, settings.consensus_px, |a, b| {
            let line = triangulate_two_view(&segs[a].line(), &projections[a], &segs[b].line(), &projections[b]).ok()?;
            let errors = segs
                .iter()
                .zip(&projections)
                .map(|(s, p)| {
                    line_reprojection_error(&image_line_from_projection(p, &line), s).map_or(f64::INFINITY, |e| e.abs().max())
                })
                .collect();
            hypotheses.insert((a, b), line);
            Some(errors)
        }) else {
            continue;
        };
        let consensus: Vec<usize> = (0..views.len()).filter(|&v| errors[v] < settings.consensus_px).collect();
        let cl: Vec<_> = consensus.iter().map(|&v| segs[v].line()).collect();
        let cp: Vec<_> = consensus.iter().map(|&v| projections[v]).collect();
        if line_parallax(&cl, &cp) < settings.min_line_parallax_deg.to_radians() {
            continue;
        }
        let ka = views[a].0;
        let line = match triangulate_multi_view(&cl, &cp) {
            Ok(l) if l.cosine(&hypotheses[&(a, b)]) > 0.0 => l,
            Ok(l) => PlueckerLine::new(-l.m, -l.d),
            Err(_) => hypotheses[&(a, b)],
        };
        let Ok(mut lm) = LineLandmark::new(&line, ka) else { continue };
        let Ok(endpoints) = trim_endpoints(&line, &segs[a], &poses[ka], &k) else { continue };
        lm.endpoints = Some(endpoints);
        let idx = map.problem.lines.len();
        map.problem.lines.push(lm);
        for (kf, j) in views {
            let o = &obs.frames[*kf].lines[*j];
            map.problem.observations.push(Observation::line(*kf, idx, o.segment));
            outlier.push(o.outlier);
        }
    }
    Built {
        map,
        outlier,
        point_index,
    }
}

/// Loop similarity from 3D-3D matches of landmarks seen by both keyframes.
///
/// The camera-frame coordinates carry each keyframe's local drift scale,
/// which is what a monocular system would measure.
fn estimate_loop(scene: &SyntheticScene, scales: &[f64], i: usize, j: usize, noise: f64, rng: &mut ChaCha8Rng) -> Result<Sim3Transform> {
    let gt = scene.poses();
    let (si, sj) = (scales[i], scales[j]);
    let mut src = Vec::new();
    let mut dst = Vec::new();
    let n = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("finite sigma");
    for p in &scene.points {
        if scene.visible_pixel(i, &p.position).is_none() || scene.visible_pixel(j, &p.position).is_none() {
            continue;
        }
        let mut a = gt[j].transform_point(&p.position) * sj;
        let mut b = gt[i].transform_point(&p.position) * si;
        if noise > 0.0 {
            a += Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng));
            b += Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng));
        }
        src.push(a);
        dst.push(b);
    }
    umeyama_align(&src, &dst, true)
}

fn close_loops(
    problem: &mut BaProblem,
    scene: &SyntheticScene,
    cfg: &ExperimentConfig,
    rng: &mut ChaCha8Rng,
    eps_fuse: f64,
) -> Result<bool> {
    if scene.loops.is_empty() || !cfg.loop_closure.enabled {
        return Ok(false);
    }
    let n = problem.keyframes.len();
    let scales = drift_scales(n, cfg.init.scale_drift);
    let old: Vec<Sim3Transform> = problem.keyframes.iter().map(|k| Sim3Transform::from_pose(&k.pose)).collect();
    let mut graph = PoseGraph::new(old.clone());
    for (f, kf) in graph.fixed.iter_mut().zip(&problem.keyframes) {
        *f = kf.fixed;
    }
    for i in 1..n {
        graph
            .edges
            .push(PoseGraphEdge::from_nodes(&old, i, i - 1, 1.0, EdgeKind::Chain));
    }
    for &(i, j) in &scene.loops {
        graph.edges.push(PoseGraphEdge {
            i,
            j,
            measurement: estimate_loop(scene, &scales, i, j, cfg.loop_closure.match_noise_m, rng)?,
            weight: cfg.loop_closure.weight,
            kind: EdgeKind::Loop,
        });
    }
    optimize_pose_graph(&mut graph, cfg.loop_closure.max_iters)?;
    let corrections: Vec<_> = old.into_iter().zip(graph.nodes).collect();
    correct_map(problem, &corrections)?;
    if cfg.loop_closure.fuse {
        fuse_points(problem, eps_fuse);
    }
    Ok(true)
}

fn scene_median_depth(problem: &BaProblem) -> Option<f64> {
    let mut d: Vec<f64> = (0..problem.keyframes.len())
        .filter_map(|k| median_depth_for_keyframe(problem, k))
        .collect();
    if d.is_empty() {
        return None;
    }
    d.sort_by(f64::total_cmp);
    Some(d[d.len() / 2])
}

/// Fits planes to the current map using the segmentation labels seen in
/// each landmark's reference keyframe, then merges duplicates.
fn fit_planes(map: &MapStore, obs: &ObservationSet, point_index: &[Option<usize>], settings: &PlaneSettings, seed: u64) -> Result<(Vec<Plane3>, GeometricThresholds)> {
    let th = match (settings.adaptive, scene_median_depth(&map.problem)) {
        (true, Some(depth)) => adaptive_thresholds(depth, &settings.thresholds, &settings.coefficients)?,
        _ => settings.thresholds,
    };
    let mut groups: BTreeMap<i64, (Vec<usize>, Vec<Vector3<f64>>)> = BTreeMap::new();
    for (id, idx) in point_index.iter().enumerate() {
        let Some(idx) = *idx else { continue };
        let p = &map.problem.points[idx];
        if !p.active {
            continue;
        }
        let label = obs.frames[p.reference_kf]
            .points
            .iter()
            .find(|o| o.landmark == id)
            .map(|o| o.label);
        if let Some(label) = label.filter(|l| *l >= 0) {
            let g = groups.entry(label).or_default();
            g.0.push(idx);
            g.1.push(p.position);
        }
    }
    let sets: Vec<CandidateSet> = groups.into_values().map(|(ids, pts)| CandidateSet::new(ids, pts)).collect();
    let found = match sequential_ransac_planes(&sets, &th, &settings.ransac, seed) {
        Ok(p) => p,
        Err(SlamError::NoModelFound { .. }) => Vec::new(),
        Err(e) => return Err(e),
    };
    let mut planes: Vec<Plane3> = Vec::new();
    'next: for p in found {
        for q in planes.iter_mut() {
            if let Some(m) = try_merge(q, &p, &th, &map.problem.points) {
                *q = m;
                continue 'next;
            }
        }
        planes.push(p);
    }
    Ok((planes, th))
}

/// Runs one `(mode, seed)` cell of an experiment.
pub fn run_single(cfg: &ExperimentConfig, mode: PipelineMode, seed: u64) -> Result<RunOutcome> {
    let start = Instant::now();
    let scene = generate_scene(&cfg.scene, seed)?;
    let observations = render_observations(&scene, &cfg.render, sub_seed(seed, 1))?;
    let gt = scene.poses();
    let init = initial_poses(&gt, &cfg.init, sub_seed(seed, 2));
    let Built {
        mut map,
        outlier,
        point_index,
    } = build_map(&scene, &observations, &init, mode, &cfg.mapping);
    map.problem.validate()?;
    let kernel = RobustKernel::new(cfg.solver.huber_delta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 3));

    let loop_closed = close_loops(&mut map.problem, &scene, cfg, &mut rng, cfg.planes.thresholds.eps_d)?;
    let mut report = solve_local_ba(&mut map.problem, &kernel, &cfg.solver.local_ba)?;
    if mode.uses_planes() {
        let (planes, _) = fit_planes(&map, &observations, &point_index, &cfg.planes, sub_seed(seed, 4))?;
        map.planes = planes;
        map.apply_point_plane_step();
        let second = solve_local_ba(&mut map.problem, &kernel, &cfg.solver.local_ba)?;
        report.iterations += second.iterations;
    }

    let est: Vec<PoseSE3> = map.problem.keyframes.iter().map(|k| k.pose).collect();
    let metrics = compute_ate_poses(&est, &gt, AlignmentMode::Sim3)?;
    let initial = compute_ate_poses(&init, &gt, AlignmentMode::Sim3)?;
    let mut rejected = 0;
    let mut caught = 0;
    for (o, &bad) in map.problem.observations.iter().zip(&outlier) {
        if !map.problem.is_live(o) {
            rejected += 1;
            caught += bad as usize;
        }
    }
    let reloc = if cfg.relocalization.enabled {
        Some(relocalization_ape(&scene, &observations, mode.uses_lines(), &cfg.relocalization, sub_seed(seed, 5))?)
    } else {
        None
    };
    let hash = cfg.hash();
    let record = RunRecord {
        run_id: format!("{}-{}-{}", &hash[..8], mode.label(), seed),
        seed,
        mode,
        config_hash: hash,
        ate_rmse_m: metrics.ate_rmse,
        mean_ape_m: metrics.mean_ape,
        initial_ate_m: initial.ate_rmse,
        rejected_outliers: rejected,
        injected_outliers: outlier.iter().filter(|b| **b).count(),
        caught_outliers: caught,
        false_rejections: rejected - caught,
        mean_reprojection_px: mean_reprojection_error(&map.problem),
        planes: map.planes.len(),
        iterations: report.iterations,
        loop_closed,
        reloc_mean_ape_m: reloc,
        runtime_ms: start.elapsed().as_millis() as u64,
    };
    Ok(RunOutcome {
        record,
        scene,
        observations,
        map,
        initial_poses: init,
        outlier_flags: outlier,
    })
}

/// Relocalizes every keyframe against the ground-truth map from a perturbed
/// guess and returns the mean camera-centre error.
pub fn relocalization_ape(
    scene: &SyntheticScene,
    obs: &ObservationSet,
    use_lines: bool,
    trial: &RelocalizationTrial,
    seed: u64,
) -> Result<f64> {
    let k = *scene.intrinsics();
    let mut map = BaProblem::new(k);
    for p in &scene.points {
        let mut lm = PointLandmark::new(p.position, 0);
        lm.fixed = true;
        map.points.push(lm);
    }
    for l in &scene.lines {
        let mut lm = LineLandmark::new(&pluecker_from_endpoints(&l.start, &l.end)?, 0)?;
        lm.fixed = true;
        map.lines.push(lm);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = RelocalizationConfig::default();
    let mut total = 0.0;
    for f in &obs.frames {
        let gt = scene.trajectory[f.keyframe].pose;
        let guess = perturb_pose(&gt, &mut rng, trial.rot_deg.to_radians(), trial.trans_m);
        let points: Vec<PointMatch> = f
            .points
            .iter()
            .map(|o| PointMatch {
                landmark: o.landmark,
                pixel: o.pixel,
            })
            .collect();
        let lines: Vec<LineMatch> = if use_lines {
            f.lines
                .iter()
                .filter(|o| transform_line(&gt, map.lines[o.landmark].pluecker()).d.norm() > 0.0)
                .map(|o| LineMatch {
                    landmark: o.landmark,
                    segment: o.segment,
                })
                .collect()
        } else {
            Vec::new()
        };
        let pose = relocalize(&map, &points, &lines, Some(guess), &cfg)
            .map(|(p, _)| p)
            .unwrap_or(guess);
        total += (pose.center() - gt.center()).norm();
    }
    Ok(total / obs.frames.len().max(1) as f64)
}

/// Runs every `(seed, mode)` cell, in parallel, and returns records sorted by
/// seed then mode.
pub fn run_experiment(cfg: &ExperimentConfig, threads: Option<usize>, deterministic: bool) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let mut jobs: Vec<(u64, PipelineMode)> = cfg
        .seeds
        .iter()
        .flat_map(|s| cfg.modes.iter().map(move |m| (*s, *m)))
        .collect();
    jobs.sort();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder.build().map_err(|e| SlamError::Config(e.to_string()))?;
    let results: Vec<Result<RunRecord>> = pool.install(|| {
        jobs.par_iter()
            .map(|(seed, mode)| {
                log::info!("run seed={seed} mode={}", mode.label());
                run_single(cfg, *mode, *seed).map(|o| o.record)
            })
            .collect()
    });
    let mut out = results.into_iter().collect::<Result<Vec<_>>>()?;
    if deterministic {
        for r in &mut out {
            r.runtime_ms = 0;
        }
    }
    Ok(out)
}

/// Writes `metrics.csv` and `runs.json` into `dir`.
pub fn write_artifacts(dir: &std::path::Path, cfg: &ExperimentConfig, records: &[RunRecord]) -> Result<()> {
    let io = |e: std::io::Error| SlamError::Io(e.to_string());
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut w = csv::Writer::from_path(dir.join("metrics.csv")).map_err(|e| SlamError::Io(e.to_string()))?;
    for r in records {
        w.serialize(CsvRow::from(r)).map_err(|e| SlamError::Io(e.to_string()))?;
    }
    w.flush().map_err(io)?;
    let doc = serde_json::json!({
        "version": RUNS_SCHEMA_VERSION,
        "config_hash": cfg.hash(),
        "config": cfg,
        "runs": records,
    });
    let text = serde_json::to_string_pretty(&doc).map_err(|e| SlamError::Io(e.to_string()))?;
    std::fs::write(dir.join("runs.json"), text + "\n").map_err(io)
}

/// One-sided paired sign test: probability of at least `wins` successes out
/// of `wins + losses` fair coin flips.
pub fn sign_test_p(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let mut p = 0.0;
    let mut c = 1.0f64;
    for k in 0..=n {
        if k > 0 {
            c *= (n - k + 1) as f64 / k as f64;
        }
        if k >= wins {
            p += c;
        }
    }
    p * 0.5f64.powi(n as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            scene: SceneConfig {
                keyframes: 8,
                points: 60,
                lines: 20,
                arc_deg: 90.0,
                ..SceneConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn noiseless_run_recovers_truth() {
        let out = run_single(&small(), PipelineMode::PointsLines, 3).unwrap();
        assert!(out.record.initial_ate_m > 1e-3);
        assert!(out.record.ate_rmse_m < 1e-6, "{:?}", out.record);
        assert!(out.record.mean_reprojection_px < 1e-8);
        assert_eq!(out.record.rejected_outliers, 0);
    }

    #[test]
    fn plane_mode_finds_planes() {
        let mut cfg = small();
        cfg.scene.points = 200;
        cfg.render.noise_px = 0.5;
        let out = run_single(&cfg, PipelineMode::PointsLinesPlanes, 4).unwrap();
        assert!(out.record.planes >= 2, "{:?}", out.record);
        assert!(out.map.planar_term() < 1.0);
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = small();
        let mut b = small();
        assert_eq!(a.hash(), b.hash());
        b.seeds = vec![1, 2];
        assert_ne!(a.hash(), b.hash());
        assert!(matches!(ExperimentConfig::from_json("{ not json"), Err(SlamError::Config(_))));
        assert!(matches!(ExperimentConfig::from_json(r#"{"modes": []}"#), Err(SlamError::Config(_))));
        let parsed = ExperimentConfig::from_json(r#"{"seeds": [4, 5], "modes": ["P", "PL"]}"#).unwrap();
        assert_eq!(parsed.seeds, vec![4, 5]);
    }

    #[test]
    fn records_are_sorted_and_reproducible() {
        let mut cfg = small();
        cfg.seeds = vec![2, 1];
        cfg.modes = vec![PipelineMode::PointsLines, PipelineMode::Points];
        let a = run_experiment(&cfg, Some(3), true).unwrap();
        let keys: Vec<_> = a.iter().map(|r| (r.seed, r.mode)).collect();
        assert_eq!(
            keys,
            vec![(1, PipelineMode::Points), (1, PipelineMode::PointsLines), (2, PipelineMode::Points), (2, PipelineMode::PointsLines)]
        );
        let b = run_experiment(&cfg, Some(1), true).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn sign_test_values() {
        assert!((sign_test_p(1, 0) - 0.5).abs() < 1e-15);
        assert!((sign_test_p(2, 0) - 0.25).abs() < 1e-15);
        assert!((sign_test_p(0, 3) - 1.0).abs() < 1e-15);
        // 20 of 30: upper tail 0.0494.
        assert!((sign_test_p(20, 10) - 0.049_368_573_352_694_5).abs() < 1e-12);
    }
}
