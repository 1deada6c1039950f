//! Loop correction: similarity pose-graph optimization and map re-expression.

use nalgebra::{DMatrix, DVector, Matrix6, SMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::ba::{BaProblem, Measurement};
use crate::camera::PoseSE3;
use crate::error::{Result, SlamError};
use crate::line::trim_endpoints;
pub use crate::sim3::{Sim3Transform, Vector7};

pub fn sim3_apply_point(s: &Sim3Transform, x: &Vector3<f64>) -> Vector3<f64> {
    s.apply_point(x)
}

pub fn sim3_line_matrix(s: &Sim3Transform) -> Matrix6<f64> {
    s.line_matrix()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdgeKind {
    Chain,
    Loop,
}

/// Relative constraint `measurement ≈ S_i · S_j⁻¹`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseGraphEdge {
    pub i: usize,
    pub j: usize,
    pub measurement: Sim3Transform,
    pub weight: f64,
    pub kind: EdgeKind,
}

impl PoseGraphEdge {
    /// Edge whose measurement is read off the current node states.
    pub fn from_nodes(nodes: &[Sim3Transform], i: usize, j: usize, weight: f64, kind: EdgeKind) -> Self {
        Self {
            i,
            j,
            measurement: nodes[i].compose(&nodes[j].inverse()),
            weight,
            kind,
        }
    }
}

/// Graph over world→camera similarities of keyframes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseGraph {
    pub nodes: Vec<Sim3Transform>,
    pub fixed: Vec<bool>,
    pub edges: Vec<PoseGraphEdge>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseGraphReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub cost_trace: Vec<f64>,
    /// Largest residual norm over loop edges after optimization.
    pub loop_residual: f64,
    pub converged: bool,
}

/// `log(M_ij · S_j · S_i⁻¹)`.
pub fn edge_residual(edge: &PoseGraphEdge, si: &Sim3Transform, sj: &Sim3Transform) -> Vector7 {
    edge.measurement.compose(sj).compose(&si.inverse()).log()
}

impl PoseGraph {
    pub fn new(nodes: Vec<Sim3Transform>) -> Self {
        let n = nodes.len();
        Self {
            nodes,
            fixed: vec![false; n],
            edges: Vec::new(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.fixed.len() != self.nodes.len() {
            return Err(SlamError::InvalidInput("fixed flags do not match node count".into()));
        }
        if !self.fixed.iter().any(|f| *f) {
            return Err(SlamError::Underconstrained("pose graph has no fixed node"));
        }
        for e in &self.edges {
            if e.i >= self.nodes.len() || e.j >= self.nodes.len() || e.i == e.j {
                return Err(SlamError::InvalidInput(format!("invalid edge {} -> {}", e.i, e.j)));
            }
            if !(e.weight > 0.0) {
                return Err(SlamError::InvalidInput("edge weight must be positive".into()));
            }
        }
        // Every node must reach a fixed node.
        let mut parent: Vec<usize> = (0..self.nodes.len()).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for e in &self.edges {
            let (a, b) = (find(&mut parent, e.i), find(&mut parent, e.j));
            parent[a] = b;
        }
        let anchored: Vec<usize> = (0..self.nodes.len())
            .filter(|&i| self.fixed[i])
            .map(|i| find(&mut parent, i))
            .collect();
        for i in 0..self.nodes.len() {
            let root = find(&mut parent, i);
            if !anchored.contains(&root) {
                return Err(SlamError::Underconstrained("pose graph is disconnected from every fixed node"));
            }
        }
        Ok(())
    }

    pub fn cost(&self) -> f64 {
        self.edges
            .iter()
            .map(|e| e.weight * edge_residual(e, &self.nodes[e.i], &self.nodes[e.j]).norm_squared())
            .sum()
    }

    pub fn loop_residual(&self) -> f64 {
        self.edges
            .iter()
            .filter(|e| e.kind == EdgeKind::Loop)
            .map(|e| edge_residual(e, &self.nodes[e.i], &self.nodes[e.j]).norm())
            .fold(0.0, f64::max)
    }
}

type Matrix7 = SMatrix<f64, 7, 7>;

fn numeric_edge_jacobians(edge: &PoseGraphEdge, si: &Sim3Transform, sj: &Sim3Transform) -> (Matrix7, Matrix7) {
    const H: f64 = 1e-7;
    let mut ji = Matrix7::zeros();
    let mut jj = Matrix7::zeros();
    for k in 0..7 {
        let mut d = Vector7::zeros();
        d[k] = H;
        let rp = edge_residual(edge, &si.retract(&d), sj);
        let rm = edge_residual(edge, &si.retract(&-d), sj);
        ji.set_column(k, &((rp - rm) / (2.0 * H)));
        let rp = edge_residual(edge, si, &sj.retract(&d));
        let rm = edge_residual(edge, si, &sj.retract(&-d));
        jj.set_column(k, &((rp - rm) / (2.0 * H)));
    }
    (ji, jj)
}

/// Levenberg–Marquardt over the free node similarities.
pub fn optimize_pose_graph(graph: &mut PoseGraph, max_iters: usize) -> Result<PoseGraphReport> {
    graph.validate()?;
    let mut slot = vec![None; graph.nodes.len()];
    let mut n_free = 0;
    for (i, f) in graph.fixed.iter().enumerate() {
        if !f {
            slot[i] = Some(n_free);
            n_free += 1;
        }
    }
    let mut cost = graph.cost();
    let mut report = PoseGraphReport {
        initial_cost: cost,
        cost_trace: vec![cost],
        ..Default::default()
    };
    let dim = 7 * n_free;
    let mut mu = -1.0;
    let mut iters = 0;
    'outer: while iters < max_iters && n_free > 0 {
        if cost <= 1e-24 * graph.edges.len() as f64 {
            report.converged = true;
            break;
        }
        let mut h = DMatrix::<f64>::zeros(dim, dim);
        let mut g = DVector::<f64>::zeros(dim);
        for e in &graph.edges {
            let (si, sj) = (&graph.nodes[e.i], &graph.nodes[e.j]);
            let r = edge_residual(e, si, sj);
            let (ji, jj) = numeric_edge_jacobians(e, si, sj);
            let blocks = [(slot[e.i], ji), (slot[e.j], jj)];
            for (a, ja) in &blocks {
                let Some(a) = a else { continue };
                let mut gv = g.rows_mut(a * 7, 7);
                gv += ja.transpose() * r * e.weight;
                for (b, jb) in &blocks {
                    let Some(b) = b else { continue };
                    let mut hv = h.view_mut((a * 7, b * 7), (7, 7));
                    hv += ja.transpose() * jb * e.weight;
                }
            }
        }
        if mu < 0.0 {
            mu = 1e-6 * h.diagonal().max().max(1e-12);
        }
        loop {
            iters += 1;
            let mut damped = h.clone();
            for k in 0..dim {
                damped[(k, k)] += mu;
            }
            let step = damped.cholesky().map(|c| c.solve(&-&g));
            if let Some(step) = step {
                let mut trial = graph.nodes.clone();
                for (i, s) in slot.iter().enumerate() {
                    if let Some(s) = s {
                        let d = Vector7::from_iterator(step.rows(s * 7, 7).iter().cloned());
                        trial[i] = graph.nodes[i].retract(&d);
                    }
                }
                let old = std::mem::replace(&mut graph.nodes, trial);
                let c = graph.cost();
                if c < cost {
                    let rel = (cost - c) / cost;
                    cost = c;
                    report.iterations += 1;
                    report.cost_trace.push(c);
                    mu = (mu / 10.0).max(1e-15);
                    if rel < 1e-12 {
                        report.converged = true;
                        break 'outer;
                    }
                    continue 'outer;
                }
                graph.nodes = old;
                if (c - cost).abs() <= 1e-14 * cost.max(1e-300) {
                    report.converged = true;
                    break 'outer;
                }
            }
            mu *= 10.0;
            if mu > 1e12 {
                return Err(SlamError::DivergedSolve { damping: mu });
            }
            if iters >= max_iters {
                break 'outer;
            }
        }
    }
    if n_free == 0 {
        report.converged = true;
    }
    report.final_cost = cost;
    report.loop_residual = graph.loop_residual();
    Ok(report)
}

/// Re-expresses landmarks after a loop correction and moves the keyframes.
///
/// `corrections[k] = (S_old, S_new)` for keyframe `k`, both world→camera.
/// Each landmark follows its reference keyframe: points via `S_new⁻¹·S_old`,
/// lines via the matching 6×6 line matrices, after which line endpoints are
/// re-trimmed against the reference observation.
pub fn correct_map(map: &mut BaProblem, corrections: &[(Sim3Transform, Sim3Transform)]) -> Result<()> {
    if corrections.len() != map.keyframes.len() {
        return Err(SlamError::InvalidInput(format!(
            "{} corrections for {} keyframes",
            corrections.len(),
            map.keyframes.len()
        )));
    }
    let deltas: Vec<Sim3Transform> = corrections.iter().map(|(old, new)| new.inverse().compose(old)).collect();
    for (id, p) in map.points.iter().enumerate() {
        if p.reference_kf >= deltas.len() {
            return Err(SlamError::MissingReference { landmark: id });
        }
    }
    for (id, l) in map.lines.iter().enumerate() {
        if l.reference_kf >= deltas.len() {
            return Err(SlamError::MissingReference { landmark: id });
        }
    }
    for p in &mut map.points {
        p.position = deltas[p.reference_kf].apply_point(&p.position);
    }
    for l in &mut map.lines {
        let moved = deltas[l.reference_kf].apply_line(l.pluecker());
        l.set_pluecker(&moved.normalized())?;
    }
    for (kf, (_, new)) in map.keyframes.iter_mut().zip(corrections) {
        kf.pose = new.to_pose();
    }
    for id in 0..map.lines.len() {
        let reference = map.lines[id].reference_kf;
        let seg = map.observations.iter().find_map(|o| match o.measurement {
            Measurement::Line { landmark, segment } if landmark == id && o.keyframe == reference && o.active => {
                Some(segment)
            }
            _ => None,
        });
        if let Some(seg) = seg {
            let pose = map.keyframes[reference].pose;
            map.lines[id].endpoints = trim_endpoints(map.lines[id].pluecker(), &seg, &pose, &map.intrinsics).ok();
        }
    }
    Ok(())
}

/// Merges point landmarks whose positions coincide within `eps` and that are
/// never observed together in one keyframe. Observations of the duplicate are
/// redirected to the lower id and the duplicate is deactivated. Returns the
/// number of merged landmarks.
pub fn fuse_points(map: &mut BaProblem, eps: f64) -> usize {
    let n = map.points.len();
    let mut seen_in: Vec<Vec<usize>> = vec![Vec::new(); n];
    for o in &map.observations {
        if let Measurement::Point { landmark, .. } = o.measurement {
            seen_in[landmark].push(o.keyframe);
        }
    }
    for v in &mut seen_in {
        v.sort_unstable();
        v.dedup();
    }
    let mut target: Vec<usize> = (0..n).collect();
    let mut merged = 0;
    for j in 0..n {
        if !map.points[j].active {
            continue;
        }
        for i in 0..j {
            if !map.points[i].active || target[i] != i {
                continue;
            }
            if (map.points[i].position - map.points[j].position).norm() > eps {
                continue;
            }
            let shared = seen_in[i].iter().any(|k| seen_in[j].binary_search(k).is_ok());
            if shared {
                continue;
            }
            target[j] = i;
            map.points[j].active = false;
            let moved = std::mem::take(&mut seen_in[j]);
            seen_in[i].extend(moved);
            seen_in[i].sort_unstable();
            seen_in[i].dedup();
            merged += 1;
            break;
        }
    }
    for o in &mut map.observations {
        if let Measurement::Point { landmark, .. } = &mut o.measurement {
            *landmark = target[*landmark];
        }
    }
    merged
}

/// Builds a loop graph over `poses` whose odometry silently grows in scale.
///
/// The local map scale at keyframe `i` is `total^(i/(n-1))`. Chain edges carry
/// the drifted relative motion with unit relative scale, the loop edge between
/// the last and first keyframe is exact, and nodes start at the integrated
/// odometry. Returns the graph and the drift-consistent target states, whose
/// rigid parts equal `poses`.
pub fn simulate_scale_drift(poses: &[PoseSE3], total: f64, loop_weight: f64) -> Result<(PoseGraph, Vec<Sim3Transform>)> {
    let n = poses.len();
    if n < 3 || !(total > 0.0) {
        return Err(SlamError::InvalidInput("scale drift needs three poses and a positive scale".into()));
    }
    let truth: Vec<Sim3Transform> = poses
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let k = total.powf(i as f64 / (n - 1) as f64);
            Sim3Transform::new(k, p.rotation, p.translation * k)
        })
        .collect::<Result<_>>()?;
    let odometry: Vec<Sim3Transform> = (1..n)
        .map(|i| {
            let rel = truth[i].compose(&truth[i - 1].inverse());
            Sim3Transform { scale: 1.0, ..rel }
        })
        .collect();
    let mut nodes = vec![Sim3Transform::from_pose(&poses[0])];
    for m in &odometry {
        let prev = *nodes.last().expect("non-empty");
        nodes.push(m.compose(&prev));
    }
    let mut graph = PoseGraph::new(nodes);
    graph.fixed[0] = true;
    for (k, m) in odometry.into_iter().enumerate() {
        graph.edges.push(PoseGraphEdge {
            i: k + 1,
            j: k,
            measurement: m,
            weight: 1.0,
            kind: EdgeKind::Chain,
        });
    }
    graph
        .edges
        .push(PoseGraphEdge::from_nodes(&truth, n - 1, 0, loop_weight, EdgeKind::Loop));
    Ok((graph, truth))
}
