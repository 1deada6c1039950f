//! Structural SLAM backend: point, line and plane landmarks, robust bundle
//! adjustment with analytic line Jacobians, graph-cut RANSAC plane fitting,
//! Sim(3) loop correction, and a synthetic experiment harness.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod ba;
pub mod camera;
pub mod error;
pub mod line;
pub mod loop_closure;
pub mod map;
pub mod maxflow;
pub mod plane;
pub mod sim;
pub mod sim3;

pub use error::{Result, SlamError};
