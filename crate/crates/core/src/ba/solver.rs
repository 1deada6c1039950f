use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2, Vector3, Vector4, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::jacobians::{line_residual_and_jacobians, point_residual_and_jacobians};
use super::{BaProblem, Measurement, RobustKernel, SolverReport, CHI2_2DOF_95};
use crate::camera::se3_retract;
use crate::error::{Result, SlamError};
use crate::line::{trim_endpoints, update_orthonormal, LineSegment3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub max_iters: usize,
    /// Stop when an accepted step changes the cost by less than this fraction.
    pub relative_tolerance: f64,
    pub initial_damping_scale: f64,
    pub max_damping: f64,
    /// Per-residual cost below which the problem counts as solved.
    pub cost_floor: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            relative_tolerance: 1e-8,
            initial_damping_scale: 1e-4,
            max_damping: 1e12,
            cost_floor: 1e-24,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalBaConfig {
    pub lm: LmConfig,
    pub chi2_threshold: f64,
    /// Maximum endpoint displacement between rounds, as a fraction of the
    /// reference keyframe's median depth.
    pub trim_ratio: f64,
}

impl Default for LocalBaConfig {
    fn default() -> Self {
        Self {
            lm: LmConfig::default(),
            chi2_threshold: CHI2_2DOF_95,
            trim_ratio: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum LandmarkRef {
    Point(usize),
    Line(usize),
}

impl LandmarkRef {
    fn dim(self) -> usize {
        match self {
            LandmarkRef::Point(_) => 3,
            LandmarkRef::Line(_) => 4,
        }
    }
}

struct Layout {
    pose_slot: Vec<Option<usize>>,
    pose_count: usize,
    point_slot: Vec<Option<usize>>,
    line_slot: Vec<Option<usize>>,
    landmarks: Vec<LandmarkRef>,
}

impl Layout {
    fn new(problem: &BaProblem, with_landmarks: bool) -> Self {
        let mut pose_slot = vec![None; problem.keyframes.len()];
        let mut pose_count = 0;
        for (i, kf) in problem.keyframes.iter().enumerate() {
            if !kf.fixed {
                pose_slot[i] = Some(pose_count);
                pose_count += 1;
            }
        }
        let mut point_slot = vec![None; problem.points.len()];
        let mut line_slot = vec![None; problem.lines.len()];
        let mut landmarks = Vec::new();
        if with_landmarks {
            let mut seen_p = vec![false; problem.points.len()];
            let mut seen_l = vec![false; problem.lines.len()];
            for o in problem.observations.iter().filter(|o| problem.is_live(o)) {
                match o.measurement {
                    Measurement::Point { landmark, .. } => seen_p[landmark] = true,
                    Measurement::Line { landmark, .. } => seen_l[landmark] = true,
                }
            }
            for (i, p) in problem.points.iter().enumerate() {
                if seen_p[i] && !p.fixed {
                    point_slot[i] = Some(landmarks.len());
                    landmarks.push(LandmarkRef::Point(i));
                }
            }
            for (i, l) in problem.lines.iter().enumerate() {
                if seen_l[i] && !l.fixed {
                    line_slot[i] = Some(landmarks.len());
                    landmarks.push(LandmarkRef::Line(i));
                }
            }
        }
        Self {
            pose_slot,
            pose_count,
            point_slot,
            line_slot,
            landmarks,
        }
    }
}

struct Contribution {
    pose: Option<usize>,
    landmark: Option<usize>,
    jp: DMatrix<f64>,
    jl: DMatrix<f64>,
    info: Matrix2<f64>,
    e: Vector2<f64>,
}

struct NormalEquations {
    hpp: DMatrix<f64>,
    gp: DVector<f64>,
    hll: Vec<DMatrix<f64>>,
    gl: Vec<DVector<f64>>,
    hpl: Vec<BTreeMap<usize, DMatrix<f64>>>,
}

fn linearize(problem: &BaProblem, layout: &Layout, kernel: &RobustKernel) -> NormalEquations {
    let k = &problem.intrinsics;
    let contributions: Vec<Option<Contribution>> = problem
        .observations
        .par_iter()
        .map(|o| {
            if !problem.is_live(o) {
                return None;
            }
            let pose = &problem.keyframes[o.keyframe].pose;
            let (e, jl, jp, landmark) = match o.measurement {
                Measurement::Point { landmark, pixel } => {
                    let (e, jl, jp) = point_residual_and_jacobians(k, pose, &problem.points[landmark].position, &pixel).ok()?;
                    (e, DMatrix::from_column_slice(2, 3, jl.as_slice()), jp, layout.point_slot[landmark])
                }
                Measurement::Line { landmark, segment } => {
                    let lm = &problem.lines[landmark];
                    let (e, jl, jp) =
                        line_residual_and_jacobians(k, pose, lm.orthonormal(), lm.pluecker(), &segment).ok()?;
                    (e, DMatrix::from_column_slice(2, 4, jl.as_slice()), jp, layout.line_slot[landmark])
                }
            };
            let pose_slot = layout.pose_slot[o.keyframe];
            if pose_slot.is_none() && landmark.is_none() {
                return None;
            }
            let s = (e.transpose() * o.information * e)[0];
            Some(Contribution {
                pose: pose_slot,
                landmark,
                jp: DMatrix::from_column_slice(2, 6, jp.as_slice()),
                jl,
                info: o.information * kernel.weight(s),
                e,
            })
        })
        .collect();

    let np = layout.pose_count * 6;
    let mut ne = NormalEquations {
        hpp: DMatrix::zeros(np, np),
        gp: DVector::zeros(np),
        hll: layout.landmarks.iter().map(|l| DMatrix::zeros(l.dim(), l.dim())).collect(),
        gl: layout.landmarks.iter().map(|l| DVector::zeros(l.dim())).collect(),
        hpl: vec![BTreeMap::new(); layout.landmarks.len()],
    };
    let info_dyn = |m: &Matrix2<f64>| DMatrix::from_column_slice(2, 2, m.as_slice());
    for c in contributions.into_iter().flatten() {
        let w = info_dyn(&c.info);
        let e = DVector::from_column_slice(c.e.as_slice());
        let we = &w * &e;
        if let Some(p) = c.pose {
            let jpt_w = c.jp.transpose() * &w;
            let mut block = ne.hpp.view_mut((p * 6, p * 6), (6, 6));
            block += &jpt_w * &c.jp;
            let mut g = ne.gp.rows_mut(p * 6, 6);
            g += c.jp.transpose() * &we;
            if let Some(l) = c.landmark {
                let cross = jpt_w * &c.jl;
                ne.hpl[l]
                    .entry(p)
                    .and_modify(|m: &mut DMatrix<f64>| *m += &cross)
                    .or_insert(cross);
            }
        }
        if let Some(l) = c.landmark {
            ne.hll[l] += c.jl.transpose() * &w * &c.jl;
            ne.gl[l] += c.jl.transpose() * &we;
        }
    }
    ne
}

/// Solves the damped system by eliminating landmarks. Returns `None` when a
/// block is not positive definite at this damping.
fn solve_damped(ne: &NormalEquations, mu: f64) -> Option<(DVector<f64>, Vec<DVector<f64>>)> {
    let np = ne.gp.len();
    let mut s = ne.hpp.clone();
    for i in 0..np {
        s[(i, i)] += mu;
    }
    let mut rhs = -&ne.gp;
    let mut cinv = Vec::with_capacity(ne.hll.len());
    for (j, h) in ne.hll.iter().enumerate() {
        let mut c = h.clone();
        for i in 0..c.nrows() {
            c[(i, i)] += mu;
        }
        let inv = c.cholesky()?.inverse();
        for (&a, ba) in &ne.hpl[j] {
            let ba_cinv = ba * &inv;
            let mut r = rhs.rows_mut(a * 6, 6);
            r += &ba_cinv * &ne.gl[j];
            for (&b, bb) in &ne.hpl[j] {
                let mut blk = s.view_mut((a * 6, b * 6), (6, 6));
                blk -= &ba_cinv * bb.transpose();
            }
        }
        cinv.push(inv);
    }
    let dp = if np > 0 { s.cholesky()?.solve(&rhs) } else { DVector::zeros(0) };
    let dl = cinv
        .iter()
        .enumerate()
        .map(|(j, inv)| {
            let mut r = -&ne.gl[j];
            for (&a, ba) in &ne.hpl[j] {
                r -= ba.transpose() * dp.rows(a * 6, 6);
            }
            inv * r
        })
        .collect();
    Some((dp, dl))
}

fn apply_step(problem: &BaProblem, layout: &Layout, dp: &DVector<f64>, dl: &[DVector<f64>]) -> BaProblem {
    let mut out = problem.clone();
    for (i, slot) in layout.pose_slot.iter().enumerate() {
        if let Some(p) = slot {
            let d = Vector6::from_iterator(dp.rows(p * 6, 6).iter().cloned());
            out.keyframes[i].pose = se3_retract(&problem.keyframes[i].pose, &d);
        }
    }
    for (j, lm) in layout.landmarks.iter().enumerate() {
        match *lm {
            LandmarkRef::Point(i) => out.points[i].position += Vector3::from_iterator(dl[j].iter().cloned()),
            LandmarkRef::Line(i) => {
                let d = Vector4::from_iterator(dl[j].iter().cloned());
                let o = update_orthonormal(problem.lines[i].orthonormal(), &d);
                out.lines[i].set_orthonormal(o);
            }
        }
    }
    out
}

/// Robust cost plus the number of live observations that could not be evaluated.
fn evaluate(problem: &BaProblem, kernel: &RobustKernel) -> (f64, usize, usize) {
    let terms: Vec<Option<f64>> = problem
        .observations
        .par_iter()
        .map(|o| {
            if !problem.is_live(o) {
                return Some(f64::NAN);
            }
            problem
                .residual(o)
                .ok()
                .map(|e| kernel.rho((e.transpose() * o.information * e)[0]))
        })
        .collect();
    let mut cost = 0.0;
    let (mut invalid, mut valid) = (0, 0);
    for t in terms {
        match t {
            Some(v) if v.is_nan() => {}
            Some(v) => {
                cost += v;
                valid += 1;
            }
            None => invalid += 1,
        }
    }
    (cost, invalid, valid)
}

/// Levenberg–Marquardt over all free poses and, if `with_landmarks`, every
/// free landmark with at least one live observation.
pub fn optimize(
    problem: &mut BaProblem,
    kernel: &RobustKernel,
    cfg: &LmConfig,
    with_landmarks: bool,
) -> Result<SolverReport> {
    let layout = Layout::new(problem, with_landmarks);
    let (mut cost, invalid, valid) = evaluate(problem, kernel);
    let mut report = SolverReport {
        initial_cost: cost,
        final_cost: cost,
        cost_trace: vec![cost],
        invalid_observations: problem.residuals().invalid,
        ..Default::default()
    };
    let floor = cfg.cost_floor * valid.max(1) as f64;
    if layout.pose_count == 0 && layout.landmarks.is_empty() || cost <= floor {
        report.converged = true;
        return Ok(report);
    }
    let mut ne = linearize(problem, &layout, kernel);
    let max_diag = ne
        .hll
        .iter()
        .flat_map(|h| h.diagonal().iter().copied().collect::<Vec<_>>())
        .chain(ne.hpp.diagonal().iter().copied())
        .fold(0.0f64, f64::max);
    let mu_floor = max_diag.max(1e-300) * 1e-15;
    let mut mu = (cfg.initial_damping_scale * max_diag).max(mu_floor);
    let mut steps = 0;
    while steps < cfg.max_iters {
        steps += 1;
        let mut accepted = None;
        if let Some((dp, dl)) = solve_damped(&ne, mu) {
            let t = apply_step(problem, &layout, &dp, &dl);
            let (c, inv, _) = evaluate(&t, kernel);
            if inv <= invalid && c < cost {
                accepted = Some((t, c));
            } else if inv <= invalid && (c - cost).abs() <= 1e-12 * cost {
                // The step no longer changes the cost: a minimum within rounding.
                report.converged = true;
                break;
            }
        }
        match accepted {
            Some((t, c)) => {
                *problem = t;
                let rel = (cost - c) / cost;
                cost = c;
                report.iterations += 1;
                report.cost_trace.push(c);
                mu = (mu / 10.0).max(mu_floor);
                if rel < cfg.relative_tolerance || cost <= floor {
                    report.converged = true;
                    break;
                }
                ne = linearize(problem, &layout, kernel);
            }
            None => {
                mu *= 10.0;
                if mu > cfg.max_damping * max_diag.max(1.0) {
                    return Err(SlamError::DivergedSolve { damping: mu });
                }
            }
        }
    }
    report.final_cost = cost;
    report.inliers = valid;
    Ok(report)
}

/// Optimizes free keyframe poses with all landmarks held fixed.
pub fn solve_motion_only(problem: &mut BaProblem, kernel: &RobustKernel, max_iters: usize) -> Result<SolverReport> {
    problem.validate()?;
    let mut counts = vec![0usize; problem.keyframes.len()];
    for o in problem.observations.iter().filter(|o| problem.is_live(o)) {
        counts[o.keyframe] += 1;
    }
    for (i, kf) in problem.keyframes.iter().enumerate() {
        if !kf.fixed && counts[i] < 4 {
            return Err(SlamError::InsufficientObservations { have: counts[i], need: 4 });
        }
    }
    let cfg = LmConfig {
        max_iters,
        ..Default::default()
    };
    optimize(problem, kernel, &cfg, false)
}

/// Median camera-frame depth of the active points in front of keyframe `kf`.
pub fn median_depth_for_keyframe(problem: &BaProblem, kf: usize) -> Option<f64> {
    let pose = &problem.keyframes.get(kf)?.pose;
    let mut depths: Vec<f64> = problem
        .points
        .iter()
        .filter(|p| p.active)
        .map(|p| pose.transform_point(&p.position).z)
        .filter(|z| *z > 0.0)
        .collect();
    if depths.is_empty() {
        depths = problem
            .lines
            .iter()
            .filter_map(|l| l.endpoints.filter(|_| l.active))
            .flat_map(|s| [pose.transform_point(&s.start).z, pose.transform_point(&s.end).z])
            .filter(|z| *z > 0.0)
            .collect();
    }
    if depths.is_empty() {
        return None;
    }
    depths.sort_by(f64::total_cmp);
    let n = depths.len();
    Some(if n % 2 == 1 {
        depths[n / 2]
    } else {
        0.5 * (depths[n / 2 - 1] + depths[n / 2])
    })
}

/// Mean Euclidean norm of the live residuals.
pub fn mean_reprojection_error(problem: &BaProblem) -> f64 {
    let r = problem.residuals();
    if r.values.is_empty() {
        return 0.0;
    }
    r.values.iter().map(|(_, e)| e.norm()).sum::<f64>() / r.values.len() as f64
}

/// Trims line `id` against its reference keyframe observation.
fn trim_line(problem: &BaProblem, id: usize) -> Option<crate::Result<LineSegment3>> {
    let line = &problem.lines[id];
    let obs = problem
        .observations
        .iter()
        .filter(|o| problem.is_live(o))
        .filter_map(|o| match o.measurement {
            Measurement::Line { landmark, segment } if landmark == id => Some((o.keyframe, segment)),
            _ => None,
        })
        .min_by_key(|(kf, _)| (*kf != line.reference_kf, *kf))?;
    let pose = &problem.keyframes[obs.0].pose;
    Some(trim_endpoints(line.pluecker(), &obs.1, pose, &problem.intrinsics))
}

fn gate(problem: &mut BaProblem, threshold: f64, report: &mut SolverReport) {
    for id in 0..problem.observations.len() {
        let o = problem.observations[id];
        if !problem.is_live(&o) {
            continue;
        }
        let bad = match problem.residual(&o) {
            Ok(e) => (e.transpose() * o.information * e)[0] > threshold,
            Err(_) => true,
        };
        if bad {
            problem.observations[id].active = false;
            report.rejected_observations.push(id);
        }
    }
}

/// Final χ² decision over every observation of an active landmark, so that
/// observations excluded from the second round are re-admitted when they fit.
fn regate(problem: &mut BaProblem, threshold: f64, report: &mut SolverReport) {
    report.rejected_observations.clear();
    for id in 0..problem.observations.len() {
        let o = problem.observations[id];
        let landmark_active = match o.measurement {
            Measurement::Point { landmark, .. } => problem.points[landmark].active,
            Measurement::Line { landmark, .. } => problem.lines[landmark].active,
        };
        if !landmark_active {
            continue;
        }
        let ok = problem
            .residual(&o)
            .is_ok_and(|e| (e.transpose() * o.information * e)[0] <= threshold);
        problem.observations[id].active = ok;
        if !ok {
            report.rejected_observations.push(id);
        }
    }
}

fn endpoints_in_front(problem: &BaProblem, id: usize, seg: &LineSegment3) -> bool {
    problem
        .observations
        .iter()
        .filter(|o| problem.is_live(o) && matches!(o.measurement, Measurement::Line { landmark, .. } if landmark == id))
        .all(|o| {
            let pose = &problem.keyframes[o.keyframe].pose;
            pose.transform_point(&seg.start).z > 0.0 && pose.transform_point(&seg.end).z > 0.0
        })
}

/// Two-round local bundle adjustment with χ² gating and line culling between
/// rounds.
pub fn solve_local_ba(problem: &mut BaProblem, kernel: &RobustKernel, cfg: &LocalBaConfig) -> Result<SolverReport> {
    problem.validate()?;
    if !problem.has_fixed_pose() {
        return Err(SlamError::GaugeUnderconstrained);
    }
    let before: Vec<Option<LineSegment3>> = (0..problem.lines.len())
        .map(|i| {
            if !problem.lines[i].active {
                return None;
            }
            problem.lines[i]
                .endpoints
                .or_else(|| trim_line(problem, i).and_then(|r| r.ok()))
        })
        .collect();
    let depths: Vec<Option<f64>> = (0..problem.keyframes.len())
        .map(|k| median_depth_for_keyframe(problem, k))
        .collect();

    let mut report = optimize(problem, kernel, &cfg.lm, true)?;
    gate(problem, cfg.chi2_threshold, &mut report);

    for i in 0..problem.lines.len() {
        if !problem.lines[i].active {
            continue;
        }
        let cull = match trim_line(problem, i) {
            None => false,
            Some(Err(_)) => true,
            Some(Ok(seg)) => {
                let moved = match (before[i], depths.get(problem.lines[i].reference_kf).copied().flatten()) {
                    (Some(b), Some(depth)) => {
                        let ds = (seg.start - b.start).norm();
                        let de = (seg.end - b.end).norm();
                        ds.max(de) / depth >= cfg.trim_ratio
                    }
                    _ => false,
                };
                moved || !endpoints_in_front(problem, i, &seg)
            }
        };
        if cull {
            problem.lines[i].active = false;
            report.rejected_lines.push(i);
        }
    }

    let second = optimize(problem, kernel, &cfg.lm, true)?;
    report.iterations += second.iterations;
    report.cost_trace.extend(second.cost_trace.iter().skip(1));
    report.final_cost = second.final_cost;
    report.converged = second.converged;
    regate(problem, cfg.chi2_threshold, &mut report);

    for i in 0..problem.lines.len() {
        if problem.lines[i].active {
            if let Some(Ok(seg)) = trim_line(problem, i) {
                problem.lines[i].endpoints = Some(seg);
            }
        }
    }
    report.final_cost = evaluate(problem, kernel).0;
    report.inliers = problem.observations.iter().filter(|o| problem.is_live(o)).count();
    report.invalid_observations = problem.residuals().invalid;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ba::{Keyframe, LineLandmark, Observation, PointLandmark};
    use crate::camera::{project_point, CameraIntrinsics, PixelPoint, PoseSE3};
    use crate::line::{pluecker_from_endpoints, ImageLineSegment};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap()
    }

    fn seg_obs(pose: &PoseSE3, a: &Vector3<f64>, b: &Vector3<f64>) -> Option<ImageLineSegment> {
        let pa = project_point(pose, &k(), a).ok()?;
        let pb = project_point(pose, &k(), b).ok()?;
        Some(ImageLineSegment::new(pa, pb))
    }

    struct Truth {
        poses: Vec<PoseSE3>,
        points: Vec<Vector3<f64>>,
        lines: Vec<(Vector3<f64>, Vector3<f64>)>,
    }

    fn world(rng: &mut ChaCha8Rng, n_kf: usize, n_pts: usize, n_lines: usize) -> Truth {
        let poses = (0..n_kf)
            .map(|i| {
                let c = Vector3::new(-0.5 + 0.12 * i as f64, 0.05 * (i as f64).sin(), 0.0);
                PoseSE3::look_at(&c, &Vector3::new(0.0, 0.0, 4.0), &Vector3::new(0.0, -1.0, 0.0))
            })
            .collect();
        let mut r = |a: f64, b: f64| rng.random_range(a..b);
        let points = (0..n_pts).map(|_| Vector3::new(r(-1.5, 1.5), r(-1.0, 1.0), r(3.0, 5.0))).collect();
        let lines = (0..n_lines)
            .map(|_| {
                let a = Vector3::new(r(-1.2, 1.2), r(-0.9, 0.9), r(3.0, 5.0));
                let b = Vector3::new(r(-1.2, 1.2), r(-0.9, 0.9), r(3.0, 5.0));
                (a, b)
            })
            .collect();
        Truth { poses, points, lines }
    }

    fn build(t: &Truth, noise: f64, rng: &mut ChaCha8Rng) -> BaProblem {
        let n = Normal::new(0.0, noise.max(1e-300)).unwrap();
        let mut jitter = |p: PixelPoint| {
            if noise == 0.0 {
                p
            } else {
                PixelPoint::new(p.u + n.sample(rng), p.v + n.sample(rng))
            }
        };
        let mut p = BaProblem::new(k());
        for pose in &t.poses {
            p.keyframes.push(Keyframe { pose: *pose, fixed: false });
        }
        for x in &t.points {
            p.points.push(PointLandmark::new(*x, 0));
        }
        for (a, b) in &t.lines {
            p.lines.push(LineLandmark::new(&pluecker_from_endpoints(a, b).unwrap(), 0).unwrap());
        }
        for (ki, pose) in t.poses.iter().enumerate() {
            for (i, x) in t.points.iter().enumerate() {
                let px = project_point(pose, &k(), x).unwrap();
                p.observations.push(Observation::point(ki, i, jitter(px)));
            }
            for (i, (a, b)) in t.lines.iter().enumerate() {
                let s = seg_obs(pose, a, b).unwrap();
                p.observations.push(Observation::line(ki, i, ImageLineSegment::new(jitter(s.start), jitter(s.end))));
            }
        }
        p
    }

    fn perturb(pose: &PoseSE3, rng: &mut ChaCha8Rng, rot: f64, trans: f64) -> PoseSE3 {
        let mut d = Vector6::zeros();
        let w = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize() * rot;
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize() * trans;
        d.fixed_rows_mut::<3>(0).copy_from(&w);
        let mut out = se3_retract(pose, &d);
        out.translation += v;
        out
    }

    fn pose_error(a: &PoseSE3, b: &PoseSE3) -> (f64, f64) {
        let r = crate::camera::so3_log(&(a.rotation * b.rotation.transpose())).norm();
        (r, (a.center() - b.center()).norm())
    }

    fn motion_problem(rng: &mut ChaCha8Rng, n_pts: usize, n_lines: usize) -> (BaProblem, PoseSE3) {
        let t = world(rng, 1, n_pts, n_lines);
        let mut p = build(&t, 0.0, rng);
        for pt in &mut p.points {
            pt.fixed = true;
        }
        for l in &mut p.lines {
            l.fixed = true;
        }
        (p, t.poses[0])
    }

    #[test]
    fn noiseless_residuals_vanish_at_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = world(&mut rng, 4, 30, 10);
        let p = build(&t, 0.0, &mut rng);
        let r = p.residuals();
        assert!(r.invalid.is_empty());
        assert!(r.values.iter().all(|(_, e)| e.norm() < 1e-9));
        let ids: Vec<usize> = r.values.iter().map(|(i, _)| *i).collect();
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn motion_only_at_truth_takes_no_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mut p, gt) = motion_problem(&mut rng, 50, 20);
        let rep = solve_motion_only(&mut p, &RobustKernel::default(), 20).unwrap();
        assert_eq!(rep.iterations, 0);
        assert_eq!(rep.initial_cost, rep.final_cost);
        assert_eq!(p.keyframes[0].pose, gt);
    }

    #[test]
    fn motion_only_recovers_perturbed_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut p, gt) = motion_problem(&mut rng, 50, 20);
        p.keyframes[0].pose = perturb(&gt, &mut rng, 5f64.to_radians(), 0.1);
        let rep = solve_motion_only(&mut p, &RobustKernel::default(), 100).unwrap();
        assert!(rep.cost_trace.windows(2).all(|w| w[1] < w[0]));
        let (r, t) = pose_error(&p.keyframes[0].pose, &gt);
        assert!(r < 1e-6 && t < 1e-6, "{r} {t}");
    }

    #[test]
    fn motion_only_lines_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mut p, gt) = motion_problem(&mut rng, 0, 10);
        p.keyframes[0].pose = perturb(&gt, &mut rng, 3f64.to_radians(), 0.05);
        solve_motion_only(&mut p, &RobustKernel::default(), 200).unwrap();
        let (r, t) = pose_error(&p.keyframes[0].pose, &gt);
        assert!(r < 1e-5 && t < 1e-5, "{r} {t}");
    }

    #[test]
    fn motion_only_needs_four_observations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut p, _) = motion_problem(&mut rng, 3, 0);
        assert!(matches!(
            solve_motion_only(&mut p, &RobustKernel::default(), 10),
            Err(SlamError::InsufficientObservations { have: 3, need: 4 })
        ));
    }

    #[test]
    fn local_ba_requires_fixed_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = world(&mut rng, 3, 20, 5);
        let mut p = build(&t, 0.0, &mut rng);
        assert_eq!(
            solve_local_ba(&mut p, &RobustKernel::default(), &LocalBaConfig::default()),
            Err(SlamError::GaugeUnderconstrained)
        );
    }

    #[test]
    fn local_ba_noiseless_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = world(&mut rng, 10, 60, 20);
        let mut p = build(&t, 0.0, &mut rng);
        p.keyframes[0].fixed = true;
        p.keyframes[1].fixed = true;
        for i in 2..10 {
            p.keyframes[i].pose = perturb(&t.poses[i], &mut rng, 1f64.to_radians(), 0.03);
        }
        let rep = solve_local_ba(&mut p, &RobustKernel::default(), &LocalBaConfig::default()).unwrap();
        assert!(rep.rejected_observations.is_empty() && rep.rejected_lines.is_empty());
        assert!(rep.cost_trace.windows(2).all(|w| w[1] <= w[0]));
        let mre = mean_reprojection_error(&p);
        assert!(mre < 1e-8, "mean reprojection error {mre}");
        for i in 2..10 {
            let (r, tt) = pose_error(&p.keyframes[i].pose, &t.poses[i]);
            assert!(r < 1e-6 && tt < 1e-6);
        }
    }

    #[test]
    fn local_ba_rejects_mismatched_lines() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = world(&mut rng, 10, 80, 40);
        let mut p = build(&t, 1.0, &mut rng);
        // Anchoring both ends of the window pins the monocular scale.
        p.keyframes[0].fixed = true;
        p.keyframes[9].fixed = true;
        // Swap 10% of the line observations onto wrong landmarks.
        let line_obs: Vec<usize> = (0..p.observations.len()).filter(|&i| p.observations[i].is_line()).collect();
        let mut injected = Vec::new();
        for &i in line_obs.iter().step_by(10) {
            if let Measurement::Line { landmark, segment } = p.observations[i].measurement {
                p.observations[i].measurement = Measurement::Line {
                    landmark: (landmark + 17) % t.lines.len(),
                    segment,
                };
                injected.push(i);
            }
        }
        let mut initial_err = 0.0;
        for i in 1..9 {
            p.keyframes[i].pose = perturb(&t.poses[i], &mut rng, 2f64.to_radians(), 0.1);
            initial_err += (p.keyframes[i].pose.center() - t.poses[i].center()).norm_squared();
        }
        let rep = solve_local_ba(&mut p, &RobustKernel::default(), &LocalBaConfig::default()).unwrap();
        let caught = injected
            .iter()
            .filter(|i| {
                let Measurement::Line { landmark, .. } = p.observations[**i].measurement else { unreachable!() };
                rep.rejected_observations.contains(i) || !p.lines[landmark].active
            })
            .count();
        assert!(caught as f64 >= 0.9 * injected.len() as f64, "{caught}/{}", injected.len());
        let final_err: f64 = (1..9).map(|i| (p.keyframes[i].pose.center() - t.poses[i].center()).norm_squared()).sum();
        assert!(final_err.sqrt() * 5.0 <= initial_err.sqrt(), "{} vs {}", final_err.sqrt(), initial_err.sqrt());
    }

    #[test]
    fn local_ba_culls_line_that_slides() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let target = Vector3::new(0.0, 0.0, 4.0);
        let up = Vector3::new(0.0, -1.0, 0.0);
        let centers = [
            Vector3::new(-0.3, 0.0, 0.0),
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(-0.2, 0.5, 0.1),
            Vector3::new(0.2, -0.5, 0.1),
        ];
        let mut t = world(&mut rng, 0, 40, 0);
        t.poses = centers.iter().map(|c| PoseSE3::look_at(c, &target, &up)).collect();
        let mut p = build(&t, 0.0, &mut rng);
        p.keyframes[0].fixed = true;
        p.keyframes[1].fixed = true;
        // Nearly contained in the epipolar plane of the first two views.
        let (c0, c1) = (centers[0], centers[1]);
        let a = Vector3::new(0.3, 0.2, 4.0);
        let b = a + (c1 - c0).normalize() * 1.5 + Vector3::new(0.0, 0.0, 0.02);
        // Same image line in the first view, but at 70% of the true depth.
        let (a0, b0) = (c0 + (a - c0) * 0.7, c0 + (b - c0) * 0.7);
        let mut lm = LineLandmark::new(&pluecker_from_endpoints(&a0, &b0).unwrap(), 0).unwrap();
        lm.endpoints = Some(LineSegment3::new(a0, b0));
        p.lines.push(lm);
        for (ki, pose) in t.poses.iter().enumerate() {
            p.observations.push(Observation::line(ki, 0, seg_obs(pose, &a, &b).unwrap()));
        }
        let rep = solve_local_ba(&mut p, &RobustKernel::default(), &LocalBaConfig::default()).unwrap();
        assert_eq!(rep.rejected_lines, vec![0]);
        assert!(rep.rejected_observations.is_empty());
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let t = world(&mut rng, 5, 40, 10);
        let mut base = build(&t, 0.5, &mut rng);
        base.keyframes[0].fixed = true;
        base.keyframes[1].fixed = true;
        for i in 2..5 {
            base.keyframes[i].pose = perturb(&t.poses[i], &mut rng, 0.01, 0.02);
        }
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            let mut p = base.clone();
            pool.install(|| solve_local_ba(&mut p, &RobustKernel::default(), &LocalBaConfig::default()).unwrap());
            p
        };
        assert_eq!(run(1), run(4));
    }
}
