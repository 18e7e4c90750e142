//! Landmark SLAM for mapping individual trees in orchard rows.
//!
//! The crate is organised along the processing chain:
//!
//! - [`geometry`]: SE(2) poses, relative motion and range-bearing geometry.
//! - [`perception`]: trunk centre estimation from point clouds, ground
//!   projection and per-frame duplicate filtering with DBSCAN.
//! - [`assignment`]: rectangular Hungarian solver.
//! - [`association`]: three-stage detection-to-track association.
//! - [`graph`]: factor graph with a Levenberg-Marquardt solver.
//! - [`simulator`]: deterministic synthetic orchard scenarios.
//! - [`eval`]: gated map matching, metrics and the clustering baseline.
//! - [`pipeline`]: the per-frame loop tying everything together.
//! - [`nav`]: odometry/GPS Kalman filter used by the baseline.
//! - [`io`]: frame logs, CSV/JSON artifacts and SVG overlays.

// `!(x > 0.0)` style checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assignment;
pub mod association;
pub mod eval;
pub mod geometry;
pub mod graph;
pub mod io;
pub mod nav;
pub mod perception;
pub mod pipeline;
pub mod simulator;

pub use association::{AssociationConfig, AssociationResult, MatchStage, Track, Tracker};
pub use eval::{EvalReport, TreeMap};
pub use geometry::{GeometryError, Point2, Pose2, Pose2Delta};
pub use graph::{FactorGraph, FactorKind, GraphError, SolveMode, SolveReport, VariableKey};
pub use io::FrameRecord;
pub use perception::{BBox, Detection};
pub use pipeline::{run_baseline, run_pipeline, PipelineConfig, PipelineError, PipelineOutput, Toggles};
pub use simulator::{Scenario, SimOutput};
