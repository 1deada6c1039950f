//! Map state shared by the pipeline stages: the bundle-adjustment problem
//! (keyframes, point and line landmarks, observations) plus fitted planes.

use serde::{Deserialize, Serialize};

use crate::ba::BaProblem;
use crate::camera::CameraIntrinsics;
use crate::plane::{point_plane_distance, refine_members, Plane3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapStore {
    pub problem: BaProblem,
    pub planes: Vec<Plane3>,
}

impl MapStore {
    pub fn new(intrinsics: CameraIntrinsics) -> Self {
        Self {
            problem: BaProblem::new(intrinsics),
            planes: Vec::new(),
        }
    }

    /// Projects every plane's member points onto that plane. Runs between BA
    /// rounds, outside the normal equations. Returns the number of points moved.
    pub fn apply_point_plane_step(&mut self) -> usize {
        let mut moved = 0;
        for plane in &self.planes {
            moved += refine_members(plane, &mut self.problem.points);
        }
        moved
    }

    /// `Σ dist(X_j, π_k)` over plane memberships of active points.
    pub fn planar_term(&self) -> f64 {
        self.planes
            .iter()
            .flat_map(|pl| pl.member_ids.iter().map(move |id| (pl, *id)))
            .filter_map(|(pl, id)| self.problem.points.get(id).filter(|p| p.active).map(|p| (pl, p)))
            .map(|(pl, p)| point_plane_distance(&p.position, pl))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ba::PointLandmark;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn members_land_on_planes_and_others_stay() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut map = MapStore::new(CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap());
        for _ in 0..300 {
            let p = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            map.problem.points.push(PointLandmark::new(p, 0));
        }
        map.planes.push(
            Plane3::new(Vector3::new(0.1, 0.2, 1.0), -0.4)
                .unwrap()
                .with_members(0..100),
        );
        map.planes.push(
            Plane3::new(Vector3::new(1.0, -0.3, 0.05), 0.7)
                .unwrap()
                .with_members(100..200),
        );
        let before: Vec<_> = map.problem.points.iter().map(|p| p.position).collect();
        assert!(map.planar_term() > 1.0);
        let moved = map.apply_point_plane_step();
        assert_eq!(moved, 200);
        for pl in &map.planes {
            for id in &pl.member_ids {
                assert!(point_plane_distance(&map.problem.points[*id].position, pl) <= 1e-10);
            }
        }
        assert!(map.planar_term() <= 1e-10);
        for (i, p) in map.problem.points.iter().enumerate().skip(200) {
            assert_eq!(p.position, before[i]);
        }
    }
}
