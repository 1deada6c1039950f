//! Infinite-plane landmarks and robust plane extraction.
//!
//! Planes are fitted by sequential RANSAC over candidate point sets (one per
//! segmentation mask). Each hypothesis labels points as inlier/outlier by
//! minimizing a unary-plus-Potts energy over a radius neighborhood graph,
//! solved exactly with an s-t min cut.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::{DMatrix, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlamError};
use crate::maxflow::FlowNetwork;

/// Plane `nᵀx + d = 0` with unit normal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plane3 {
    pub normal: Vector3<f64>,
    pub offset: f64,
    #[serde(default)]
    pub member_ids: BTreeSet<usize>,
}

impl Plane3 {
    /// Builds a plane, normalizing `(n, d)` so that `‖n‖ = 1`.
    pub fn new(normal: Vector3<f64>, offset: f64) -> Result<Self> {
        let n = normal.norm();
        if !(n > 1e-300) || !offset.is_finite() || !n.is_finite() {
            return Err(SlamError::InvalidInput("plane normal must be non-zero and finite".into()));
        }
        Ok(Self {
            normal: normal / n,
            offset: offset / n,
            member_ids: BTreeSet::new(),
        })
    }

    pub fn with_members(mut self, ids: impl IntoIterator<Item = usize>) -> Self {
        self.member_ids = ids.into_iter().collect();
        self
    }

    pub fn signed_distance(&self, v: &Vector3<f64>) -> f64 {
        self.normal.dot(v) + self.offset
    }

    /// Same plane with the normal flipped so that the offset is non-positive.
    pub fn canonical(mut self) -> Self {
        if self.offset > 0.0 {
            self.normal = -self.normal;
            self.offset = -self.offset;
        }
        self
    }

    /// Angle between normals, ignoring orientation.
    pub fn normal_angle(&self, other: &Plane3) -> f64 {
        self.normal.dot(&other.normal).abs().min(1.0).acos()
    }
}

/// `|nᵀv + d| / ‖n‖`.
pub fn point_plane_distance(v: &Vector3<f64>, plane: &Plane3) -> f64 {
    (plane.normal.dot(v) + plane.offset).abs() / plane.normal.norm()
}

/// Thresholds controlling labeling, stopping and merging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeometricThresholds {
    /// Inlier distance (m).
    pub eps_d: f64,
    /// Merge threshold on `|cos θ|` between normals.
    pub t_theta: f64,
    /// Merge threshold on the offset difference (m).
    pub t_d: f64,
    /// Model residual at which RANSAC may stop (m).
    pub eps_pi: f64,
    /// Potts weight.
    pub lambda: f64,
}

impl Default for GeometricThresholds {
    fn default() -> Self {
        Self {
            eps_d: 0.02,
            t_theta: 0.8,
            t_d: 0.04,
            eps_pi: 0.01,
            lambda: 0.6,
        }
    }
}

impl GeometricThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_d > 0.0) || !(self.t_theta > 0.0 && self.t_theta < 1.0) || !(self.lambda >= 0.0) {
            return Err(SlamError::InvalidInput(format!("invalid geometric thresholds {self:?}")));
        }
        Ok(())
    }

    /// Neighborhood radius `r = 2·ε_d`.
    pub fn radius(&self) -> f64 {
        2.0 * self.eps_d
    }
}

/// Per-metre coefficients for depth-adaptive thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptiveCoefficients {
    pub c_d: f64,
    pub c_t: f64,
    pub c_p: f64,
}

impl Default for AdaptiveCoefficients {
    fn default() -> Self {
        Self {
            c_d: 0.02,
            c_t: 0.04,
            c_p: 0.01,
        }
    }
}

/// Scales `ε_d`, `T_d` and `ε_Π` linearly with the median scene depth.
pub fn adaptive_thresholds(
    median_scene_depth: f64,
    base: &GeometricThresholds,
    coeffs: &AdaptiveCoefficients,
) -> Result<GeometricThresholds> {
    if !(median_scene_depth > 0.0) || !median_scene_depth.is_finite() {
        return Err(SlamError::InvalidInput(format!(
            "median scene depth must be positive, got {median_scene_depth}"
        )));
    }
    Ok(GeometricThresholds {
        eps_d: coeffs.c_d * median_scene_depth,
        t_d: coeffs.c_t * median_scene_depth,
        eps_pi: coeffs.c_p * median_scene_depth,
        ..*base
    })
}

/// Least-squares plane through a point set.
pub fn fit_plane_svd(points: &[Vector3<f64>]) -> Result<Plane3> {
    if points.len() < 3 {
        return Err(SlamError::DegenerateConfiguration("fewer than three points"));
    }
    let centroid = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let centered = DMatrix::from_fn(points.len(), 3, |r, c| points[r][c] - centroid[c]);
    let svd = centered.svd(false, true);
    let v_t = svd.v_t.expect("svd v_t");
    let sv = &svd.singular_values;
    // nalgebra sorts singular values in descending order.
    let (s0, s1) = (sv[0], sv[1]);
    if s0 <= 0.0 || s1 < 1e-12 * s0 {
        return Err(SlamError::DegenerateConfiguration("points are collinear"));
    }
    let n = v_t.row(2).transpose();
    let n = Vector3::new(n[0], n[1], n[2]).normalize();
    Ok(Plane3 {
        normal: n,
        offset: -n.dot(&centroid),
        member_ids: BTreeSet::new(),
    }
    .canonical())
}

/// Undirected radius graph over a point list.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodGraph {
    pub vertices: Vec<Vector3<f64>>,
    /// Sorted `(i, j)` pairs with `i < j`.
    pub edges: Vec<(usize, usize)>,
    pub radius: f64,
}

impl NeighborhoodGraph {
    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Connected components as a component index per vertex.
    pub fn components(&self) -> Vec<usize> {
        let mut parent: Vec<usize> = (0..self.len()).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for &(a, b) in &self.edges {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
        (0..self.len()).map(|i| find(&mut parent, i)).collect()
    }
}

/// Exact radius neighborhoods using a uniform grid with cell size `r`.
pub fn build_neighborhood_graph(points: &[Vector3<f64>], r: f64) -> Result<NeighborhoodGraph> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(SlamError::InvalidInput(format!("radius must be positive, got {r}")));
    }
    let cell = |p: &Vector3<f64>| {
        (
            (p.x / r).floor() as i64,
            (p.y / r).floor() as i64,
            (p.z / r).floor() as i64,
        )
    };
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(cell(p)).or_default().push(i);
    }
    let r2 = r * r;
    let mut edges = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let (cx, cy, cz) = cell(p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(bucket) = grid.get(&(cx + dx, cy + dy, cz + dz)) {
                        for &j in bucket {
                            if j > i && (points[j] - p).norm_squared() <= r2 {
                                edges.push((i, j));
                            }
                        }
                    }
                }
            }
        }
    }
    edges.sort_unstable();
    Ok(NeighborhoodGraph {
        vertices: points.to_vec(),
        edges,
        radius: r,
    })
}

fn unary_cost(dist: f64, inlier: bool, eps_d: f64) -> f64 {
    let close = dist < eps_d;
    if inlier == close {
        0.0
    } else {
        1.0
    }
}

/// `E(Π) = Σ_v ‖Π_v‖ + λ·Σ_{(u,v)} δ(Π_u ≠ Π_v)` with 0-1 unary costs.
pub fn labeling_energy(
    labels: &[bool],
    plane: &Plane3,
    graph: &NeighborhoodGraph,
    th: &GeometricThresholds,
) -> Result<f64> {
    if labels.len() != graph.len() {
        return Err(SlamError::InvalidInput(format!(
            "{} labels for {} vertices",
            labels.len(),
            graph.len()
        )));
    }
    let unary: f64 = graph
        .vertices
        .iter()
        .zip(labels)
        .map(|(v, &l)| unary_cost(point_plane_distance(v, plane), l, th.eps_d))
        .sum();
    let cut = graph.edges.iter().filter(|(a, b)| labels[*a] != labels[*b]).count();
    Ok(unary + th.lambda * cut as f64)
}

/// Globally optimal inlier labeling for a fixed plane via s-t min cut.
///
/// Source side is the inlier label. Ties resolve towards outlier.
pub fn graphcut_labels(plane: &Plane3, graph: &NeighborhoodGraph, th: &GeometricThresholds) -> Vec<bool> {
    let n = graph.len();
    let (s, t) = (n, n + 1);
    let mut net = FlowNetwork::new(n + 2);
    for (i, v) in graph.vertices.iter().enumerate() {
        let dist = point_plane_distance(v, plane);
        let cost_outlier = unary_cost(dist, false, th.eps_d);
        let cost_inlier = unary_cost(dist, true, th.eps_d);
        if cost_outlier > 0.0 {
            net.add_edge(s, i, cost_outlier, 0.0);
        }
        if cost_inlier > 0.0 {
            net.add_edge(i, t, cost_inlier, 0.0);
        }
    }
    if th.lambda > 0.0 {
        for &(a, b) in &graph.edges {
            net.add_edge(a, b, th.lambda, th.lambda);
        }
    }
    net.max_flow(s, t);
    let mut side = net.source_side(s);
    side.truncate(n);
    side
}

/// Sampling and stopping limits for [`sequential_ransac_planes`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub max_hypotheses: usize,
    pub min_inliers: usize,
    /// Confidence for the adaptive hypothesis count.
    pub confidence: f64,
    /// Local-optimization rounds of refit → relabel.
    pub max_local_rounds: usize,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_hypotheses: 200,
            min_inliers: 20,
            confidence: 0.99,
            max_local_rounds: 10,
        }
    }
}

/// Points believed to lie on one plane (typically one segmentation mask).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub ids: Vec<usize>,
    pub points: Vec<Vector3<f64>>,
}

impl CandidateSet {
    pub fn new(ids: Vec<usize>, points: Vec<Vector3<f64>>) -> Self {
        assert_eq!(ids.len(), points.len());
        Self { ids, points }
    }
}

fn plane_from_sample(a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> Option<Plane3> {
    let n = (b - a).cross(&(c - a));
    let scale = (b - a).norm() * (c - a).norm();
    if n.norm() <= 1e-9 * scale || scale == 0.0 {
        return None;
    }
    Plane3::new(n, -n.dot(a)).ok()
}

fn rms_residual(plane: &Plane3, pts: &[Vector3<f64>], labels: &[bool]) -> f64 {
    let (sum, cnt) = pts
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .fold((0.0, 0usize), |(s, c), (p, _)| (s + plane.signed_distance(p).powi(2), c + 1));
    if cnt == 0 {
        f64::INFINITY
    } else {
        (sum / cnt as f64).sqrt()
    }
}

struct Model {
    plane: Plane3,
    labels: Vec<bool>,
    inliers: usize,
}

/// Graph-cut labeling alternated with least-squares refits until the labels settle.
fn local_optimize(
    mut plane: Plane3,
    graph: &NeighborhoodGraph,
    th: &GeometricThresholds,
    rounds: usize,
) -> Model {
    let mut labels = graphcut_labels(&plane, graph, th);
    for _ in 0..rounds {
        let inlier_pts: Vec<_> = graph
            .vertices
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| l)
            .map(|(p, _)| *p)
            .collect();
        let Ok(refit) = fit_plane_svd(&inlier_pts) else { break };
        let new_labels = graphcut_labels(&refit, graph, th);
        let old_count = labels.iter().filter(|l| **l).count();
        let new_count = new_labels.iter().filter(|l| **l).count();
        if new_count < old_count {
            break;
        }
        let settled = new_labels == labels;
        plane = refit;
        labels = new_labels;
        if settled {
            break;
        }
    }
    let inliers = labels.iter().filter(|l| **l).count();
    Model {
        plane,
        labels,
        inliers,
    }
}

fn adaptive_hypotheses(inlier_ratio: f64, confidence: f64) -> f64 {
    let w3 = inlier_ratio.clamp(0.0, 1.0).powi(3);
    if w3 >= 1.0 {
        return 1.0;
    }
    if w3 <= 0.0 {
        return f64::INFINITY;
    }
    (1.0 - confidence).ln() / (1.0 - w3).ln()
}

/// Greedy extraction of every plane supported by one candidate set.
pub fn extract_planes(
    set: &CandidateSet,
    th: &GeometricThresholds,
    cfg: &RansacConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<Plane3> {
    let mut remaining: Vec<usize> = (0..set.points.len()).collect();
    let mut planes = Vec::new();
    let min_inliers = cfg.min_inliers.max(3);
    while remaining.len() >= min_inliers {
        let pts: Vec<_> = remaining.iter().map(|&i| set.points[i]).collect();
        let graph = build_neighborhood_graph(&pts, th.radius()).expect("validated radius");
        let mut best: Option<Model> = None;
        for h in 0..cfg.max_hypotheses {
            let idx = sample(rng, pts.len(), 3);
            let Some(hyp) = plane_from_sample(&pts[idx.index(0)], &pts[idx.index(1)], &pts[idx.index(2)]) else {
                continue;
            };
            let quick = pts.iter().filter(|p| point_plane_distance(p, &hyp) < th.eps_d).count();
            if quick < 3 || best.as_ref().is_some_and(|b| quick <= b.inliers / 2) {
                continue;
            }
            let model = local_optimize(hyp, &graph, th, cfg.max_local_rounds);
            if best.as_ref().is_none_or(|b| model.inliers > b.inliers) {
                best = Some(model);
            }
            if let Some(b) = &best {
                let needed = adaptive_hypotheses(b.inliers as f64 / pts.len() as f64, cfg.confidence);
                let converged = rms_residual(&b.plane, &pts, &b.labels) < th.eps_pi;
                if converged && (h + 1) as f64 >= needed {
                    break;
                }
            }
        }
        let Some(model) = best.filter(|m| m.inliers >= min_inliers) else { break };
        let members: Vec<usize> = remaining
            .iter()
            .zip(&model.labels)
            .filter(|(_, &l)| l)
            .map(|(&i, _)| i)
            .collect();
        planes.push(model.plane.with_members(members.iter().map(|&i| set.ids[i])));
        let taken: BTreeSet<usize> = members.into_iter().collect();
        remaining.retain(|i| !taken.contains(i));
    }
    planes
}

/// Sequential RANSAC with graph-cut local optimization over every candidate set.
///
/// A set may yield zero planes (pure clutter), one, or several (an
/// under-segmented mask covering multiple planes).
pub fn sequential_ransac_planes(
    sets: &[CandidateSet],
    th: &GeometricThresholds,
    cfg: &RansacConfig,
    seed: u64,
) -> Result<Vec<Plane3>> {
    th.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let planes: Vec<Plane3> = sets
        .iter()
        .flat_map(|set| extract_planes(set, th, cfg, &mut rng))
        .collect();
    if planes.is_empty() {
        return Err(SlamError::NoModelFound {
            min_inliers: cfg.min_inliers,
        });
    }
    Ok(planes)
}

/// Id-addressed access to point landmark positions.
pub trait PointStore {
    fn position(&self, id: usize) -> Option<Vector3<f64>>;
    fn position_mut(&mut self, id: usize) -> Option<&mut Vector3<f64>>;
}

impl PointStore for BTreeMap<usize, Vector3<f64>> {
    fn position(&self, id: usize) -> Option<Vector3<f64>> {
        self.get(&id).copied()
    }

    fn position_mut(&mut self, id: usize) -> Option<&mut Vector3<f64>> {
        self.get_mut(&id)
    }
}

/// Merges two planes with nearly parallel normals and close offsets.
///
/// The merged equation is refit on the union of members (looked up in
/// `points`) and accepted only when its RMS residual is below `ε_Π`. Without
/// enough member points the sign-aligned mean equation is used.
pub fn try_merge<S: PointStore + ?Sized>(
    pi: &Plane3,
    pj: &Plane3,
    th: &GeometricThresholds,
    points: &S,
) -> Option<Plane3> {
    let ni = pi.normal / pi.normal.norm();
    let nj = pj.normal / pj.normal.norm();
    let di = pi.offset / pi.normal.norm();
    let dj = pj.offset / pj.normal.norm();
    let cos = ni.dot(&nj);
    if cos.abs() <= th.t_theta {
        return None;
    }
    let (nj, dj) = if cos < 0.0 { (-nj, -dj) } else { (nj, dj) };
    if (di - dj).abs() >= th.t_d {
        return None;
    }
    let members: BTreeSet<usize> = pi.member_ids.union(&pj.member_ids).copied().collect();
    let pts: Vec<_> = members.iter().filter_map(|id| points.position(*id)).collect();
    let merged = if pts.len() >= 3 {
        let refit = fit_plane_svd(&pts).ok()?;
        let rms = (pts.iter().map(|p| refit.signed_distance(p).powi(2)).sum::<f64>() / pts.len() as f64).sqrt();
        if rms >= th.eps_pi {
            return None;
        }
        refit
    } else {
        Plane3::new(ni + nj, di + dj).ok()?.canonical()
    };
    Some(merged.with_members(members))
}

/// Moves every member point onto the plane along the normal (signed distance).
///
/// Returns the number of points moved.
pub fn refine_members<S: PointStore + ?Sized>(plane: &Plane3, points: &mut S) -> usize {
    let n = plane.normal / plane.normal.norm();
    let d = plane.offset / plane.normal.norm();
    let mut moved = 0;
    for id in &plane.member_ids {
        if let Some(v) = points.position_mut(*id) {
            let s = n.dot(v) + d;
            if s != 0.0 {
                *v -= n * s;
                moved += 1;
            }
        }
    }
    moved
}
