//! The per-frame mapping loop: detections in, tree map and trajectory out.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::{AssociationConfig, MatchStage, TrackId, Tracker};
use crate::eval::{baseline_map, evaluate, EvalReport, TreeMap};
use crate::geometry::{Point2, Pose2, Pose2Delta};
use crate::graph::{FactorGraph, FactorKind, GraphError, LmParams, SolveMode, VariableKey};
use crate::io::{DetectionRecord, FrameRecord};
use crate::nav::{NavConfig, NavFilter};
use crate::perception::{
    camera_to_robot_plane, centroid_estimate, estimate_trunk_center, filter_detections_with, right_facing_camera,
    Detection, FilterConfig, TrunkPointCloud,
};
use crate::simulator::{Scenario, SimError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("frame {frame}: {msg}")]
    Frame { frame: u64, msg: String },
    #[error("frame {frame}: {source}")]
    Graph { frame: u64, source: GraphError },
    #[error("final solve: {0}")]
    Final(GraphError),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Components that can be swapped for their simple fallback.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    /// PCA trunk centre; off uses the plain cloud centroid.
    pub pca: bool,
    /// Cascade association stage.
    pub cascade: bool,
    /// Distance factors between trees seen in the same frame.
    pub inter_distance: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            pca: true,
            cascade: true,
            inter_distance: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub odom_sigma: [f64; 3],
    /// Used for fixes that carry no sigma.
    pub gps_sigma: f64,
    pub range_sigma: f64,
    pub bearing_sigma: f64,
    pub inter_distance_sigma: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            odom_sigma: [0.02, 0.02, 0.01],
            gps_sigma: 0.30,
            range_sigma: 0.10,
            bearing_sigma: 0.05,
            inter_distance_sigma: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub planting_distance: f64,
    pub toggles: Toggles,
    pub noise: NoiseConfig,
    /// Association gates; derived from the planting distance when absent.
    pub association: Option<AssociationConfig>,
    pub filter: FilterConfig,
    pub initial_heading: f64,
    pub initial_heading_sigma: f64,
    /// Camera height above the ground, for trunk clouds.
    pub camera_height: f64,
    /// Tracks observed fewer times than this are left out of the map.
    pub min_track_hits: u32,
    /// Huber threshold on whitened residual norms; off when absent.
    pub huber: Option<f64>,
    pub solver: LmParams,
    pub baseline_eps: f64,
    pub baseline_min_samples: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            planting_distance: 1.1,
            toggles: Toggles::default(),
            noise: NoiseConfig::default(),
            association: None,
            filter: FilterConfig::default(),
            initial_heading: 0.0,
            initial_heading_sigma: 0.05,
            camera_height: 0.5,
            min_track_hits: 3,
            huber: None,
            solver: LmParams::default(),
            baseline_eps: crate::eval::BASELINE_EPS,
            baseline_min_samples: crate::eval::BASELINE_MIN_SAMPLES,
        }
    }
}

impl PipelineConfig {
    /// Settings matching a simulated scenario whose robot starts with
    /// `initial_heading`.
    pub fn for_scenario(scn: &Scenario, initial_heading: f64) -> Self {
        Self {
            planting_distance: scn.orchard.planting_distance,
            initial_heading,
            camera_height: scn.camera.mount_height,
            ..Self::default()
        }
    }

    pub fn association_config(&self) -> AssociationConfig {
        let mut a = self
            .association
            .unwrap_or_else(|| AssociationConfig::for_planting_distance(self.planting_distance));
        a.cascade = a.cascade && self.toggles.cascade;
        a
    }

    pub fn nav_config(&self) -> NavConfig {
        NavConfig {
            odom_sigma: self.noise.odom_sigma,
            gps_sigma: self.noise.gps_sigma,
            initial_heading: self.initial_heading,
            initial_heading_sigma: self.initial_heading_sigma,
            ..NavConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if !(self.planting_distance > 0.0) || !self.planting_distance.is_finite() {
            return bad("planting_distance: must be positive");
        }
        let n = &self.noise;
        let [a, b, c] = n.odom_sigma;
        let sigmas = [
            a,
            b,
            c,
            n.gps_sigma,
            n.range_sigma,
            n.bearing_sigma,
            n.inter_distance_sigma,
        ];
        if sigmas.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return bad("noise: every sigma must be positive");
        }
        if !(self.initial_heading_sigma > 0.0) || !self.initial_heading.is_finite() {
            return bad("initial_heading_sigma: must be positive");
        }
        if !(self.filter.eps_fraction > 0.0) || self.filter.min_pts == 0 {
            return bad("filter: eps_fraction must be positive and min_pts at least 1");
        }
        if !(self.baseline_eps > 0.0) || self.baseline_min_samples == 0 {
            return bad("baseline_eps must be positive and baseline_min_samples at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveSummary {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub frames: usize,
    pub gps_fixes: usize,
    pub detections_logged: usize,
    pub detections_used: usize,
    pub matches_iou: usize,
    pub matches_cascade: usize,
    pub matches_global: usize,
    pub tracks: usize,
    pub landmarks_exported: usize,
    pub factors: BTreeMap<String, usize>,
    /// Largest per-variable gap between the incremental and batch estimates.
    pub incremental_vs_batch_position: f64,
    pub incremental_vs_batch_angle: f64,
    pub batch: SolveSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssociationRecord {
    pub frame: u64,
    /// Index into the frame's logged detections.
    pub detection: usize,
    pub track: TrackId,
    /// `None` when the detection started the track.
    pub stage: Option<MatchStage>,
    /// Where the detection landed given the pose estimate at the time.
    pub world: Point2,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub map: TreeMap,
    /// Batch-optimized pose per frame.
    pub trajectory: Vec<(u64, Pose2)>,
    /// Pose each frame's detections were placed with, as known at the time.
    pub online_trajectory: Vec<(u64, Pose2)>,
    /// Holds the batch estimate.
    pub graph: FactorGraph,
    /// One entry per detection that reached the graph.
    pub associations: Vec<AssociationRecord>,
    pub stats: RunStats,
}

fn diag3(s: [f64; 3]) -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::new(s[0] * s[0], s[1] * s[1], s[2] * s[2]))
}

/// Robot-frame range and bearing of a detection: from its trunk cloud when
/// it has one, else as logged.
fn measure(d: &DetectionRecord, cfg: &PipelineConfig) -> (f64, f64) {
    let Some(points) = &d.cloud else {
        return (d.range, d.bearing);
    };
    let cloud = TrunkPointCloud {
        points: points.iter().map(|p| Vector3::new(p[0], p[1], p[2])).collect(),
        camera_origin: Vector3::zeros(),
    };
    let center = if cfg.toggles.pca {
        estimate_trunk_center(&cloud).map(|e| e.center3d)
    } else {
        centroid_estimate(&cloud)
    };
    match center {
        Ok(c) => {
            let p = camera_to_robot_plane(&c, &right_facing_camera(cfg.camera_height));
            let r = p.x.hypot(p.y);
            if r > 1e-6 {
                (r, p.y.atan2(p.x))
            } else {
                (d.range, d.bearing)
            }
        }
        Err(_) => (d.range, d.bearing),
    }
}

/// Start position for a log whose first frame has no GPS fix: the first
/// later fix, carried back to frame 0 along the odometry. The sigma grows
/// with the number of odometry steps bridged.
fn anchor_from_later_fix(frames: &[FrameRecord], cfg: &PipelineConfig) -> Option<(Point2, f64)> {
    let k = frames.iter().position(|f| f.gps.is_some())?;
    let g = frames[k].gps.expect("found above");
    let mut pose = Pose2::new(0.0, 0.0, cfg.initial_heading);
    for f in &frames[1..=k] {
        pose = pose.compose(&Pose2Delta::from(f.odom));
    }
    let start = Point2::new(g.x - pose.x, g.y - pose.y);
    let step = cfg.noise.odom_sigma[0].max(cfg.noise.odom_sigma[1]);
    let sigma = g.sigma.unwrap_or(cfg.noise.gps_sigma) + step * (k as f64).sqrt();
    Some((start, sigma))
}

fn graph_err(frame: u64) -> impl FnOnce(GraphError) -> PipelineError {
    move |source| PipelineError::Graph { frame, source }
}

/// Runs the full mapping loop over a frame log.
pub fn run_pipeline(frames: &[FrameRecord], cfg: &PipelineConfig) -> Result<PipelineOutput, PipelineError> {
    cfg.validate()?;
    let mut prev_frame = None;
    for f in frames {
        f.validate()
            .map_err(|msg| PipelineError::Frame { frame: f.frame, msg })?;
        if prev_frame.is_some_and(|p| f.frame <= p) {
            return Err(PipelineError::Frame {
                frame: f.frame,
                msg: "frame numbers must strictly increase".into(),
            });
        }
        prev_frame = Some(f.frame);
    }

    let mut graph = FactorGraph::with_params(cfg.solver);
    graph.set_huber(cfg.huber);
    let mut tracker = Tracker::new(cfg.association_config());
    let odom_cov = diag3(cfg.noise.odom_sigma);
    let n = &cfg.noise;
    let mut stats = RunStats {
        frames: frames.len(),
        ..RunStats::default()
    };
    let mut trajectory_frames = Vec::with_capacity(frames.len());
    let mut online_trajectory = Vec::with_capacity(frames.len());
    let mut associations = Vec::new();

    for (i, f) in frames.iter().enumerate() {
        let err = graph_err(f.frame);
        let gps = f.gps.map(|g| (Point2::new(g.x, g.y), g.sigma.unwrap_or(n.gps_sigma)));
        stats.gps_fixes += gps.is_some() as usize;
        let pose_key = if i == 0 {
            let (p, s) = gps
                .or_else(|| anchor_from_later_fix(frames, cfg))
                .unwrap_or((Point2::new(0.0, 0.0), 1e-3));
            let cov = diag3([s, s, cfg.initial_heading_sigma]);
            graph
                .initialize(Pose2::new(p.x, p.y, cfg.initial_heading), &cov)
                .map_err(err)?
        } else {
            let key = graph.add_pose(Pose2Delta::from(f.odom), &odom_cov).map_err(err)?;
            if let Some((p, s)) = gps {
                graph.add_gps(key, p, s, None).map_err(graph_err(f.frame))?;
            }
            key
        };
        trajectory_frames.push(f.frame);
        let pose = graph.estimate().pose(pose_key.index).expect("pose just added");
        online_trajectory.push((f.frame, pose));

        stats.detections_logged += f.detections.len();
        let mut dets = Vec::new();
        let mut source = Vec::new();
        for (k, d) in f
            .detections
            .iter()
            .enumerate()
            .filter(|(_, d)| d.conf >= cfg.filter.confidence_floor)
        {
            let (range, bearing) = measure(d, cfg);
            dets.push(Detection {
                bbox: d.bbox(),
                confidence: d.conf,
                world_pos: pose.project_range_bearing(range, bearing),
                range,
                bearing,
            });
            source.push(k);
        }
        let kept = filter_detections_with(&dets, cfg.planting_distance, &cfg.filter);
        let source: Vec<usize> = kept
            .iter()
            .map(|d| source[dets.iter().position(|x| x == d).expect("filter keeps input detections")])
            .collect();
        let dets = kept;
        stats.detections_used += dets.len();

        let result = tracker.step(&dets, f.frame);
        let mut observed: Vec<(TrackId, usize, Option<MatchStage>)> = Vec::with_capacity(dets.len());
        for m in &result.matches {
            match m.stage {
                MatchStage::Iou => stats.matches_iou += 1,
                MatchStage::Cascade => stats.matches_cascade += 1,
                MatchStage::Global => stats.matches_global += 1,
            }
            observed.push((m.track, m.detection, Some(m.stage)));
        }
        for &j in &result.new_track_detections {
            observed.push((tracker.spawn(&dets[j], f.frame), j, None));
        }
        observed.sort_unstable();
        for &(id, j, stage) in &observed {
            let d = &dets[j];
            associations.push(AssociationRecord {
                frame: f.frame,
                detection: source[j],
                track: id,
                stage,
                world: d.world_pos,
            });
            graph
                .add_observation(
                    pose_key,
                    VariableKey::landmark(id),
                    d.range,
                    d.bearing,
                    n.range_sigma,
                    n.bearing_sigma,
                )
                .map_err(graph_err(f.frame))?;
        }
        if cfg.toggles.inter_distance {
            for (a, &(ia, ja, _)) in observed.iter().enumerate() {
                for &(ib, jb, _) in &observed[a + 1..] {
                    let delta = dets[ja].world_pos.distance(&dets[jb].world_pos);
                    graph
                        .add_inter_distance(
                            VariableKey::landmark(ia),
                            VariableKey::landmark(ib),
                            delta,
                            n.inter_distance_sigma,
                        )
                        .map_err(graph_err(f.frame))?;
                }
            }
        }

        graph.optimize(SolveMode::Incremental).map_err(graph_err(f.frame))?;
        for (&id, p) in &graph.estimate().landmarks {
            tracker.set_world_pos(id, *p);
        }
    }

    if frames.is_empty() {
        return Ok(PipelineOutput {
            map: TreeMap::new("world"),
            trajectory: Vec::new(),
            online_trajectory,
            graph,
            associations,
            stats,
        });
    }

    let incremental = graph.estimate().clone();
    let report = graph.optimize(SolveMode::Batch).map_err(PipelineError::Final)?;
    let (dp, da) = incremental.max_difference(graph.estimate());
    stats.incremental_vs_batch_position = dp;
    stats.incremental_vs_batch_angle = da;
    stats.batch = SolveSummary {
        iterations: report.iterations,
        initial_cost: report.initial_cost,
        final_cost: report.final_cost,
        converged: report.converged,
    };
    stats.tracks = tracker.tracks().len();
    for kind in [
        FactorKind::Prior,
        FactorKind::Odometry,
        FactorKind::Gps,
        FactorKind::RangeBearing,
        FactorKind::InterDistance,
    ] {
        let name = serde_json::to_value(kind)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default();
        stats.factors.insert(name, graph.num_factors(kind));
    }

    let est = graph.estimate();
    let mut map = TreeMap::new("world");
    for (id, t) in tracker.tracks() {
        if t.hits >= cfg.min_track_hits {
            if let Some(p) = est.landmark(*id) {
                map.push(*id, p).expect("track ids are unique");
            }
        }
    }
    stats.landmarks_exported = map.len();
    let trajectory = trajectory_frames
        .iter()
        .enumerate()
        .map(|(i, &fr)| (fr, est.pose(i as u64).expect("every frame has a pose")))
        .collect();
    Ok(PipelineOutput {
        map,
        trajectory,
        online_trajectory,
        graph,
        associations,
        stats,
    })
}

/// World positions of every logged detection above the confidence floor.
/// Positions already in the log are used as they are; otherwise the robot
/// is localized from odometry and GPS alone.
pub fn accumulate_detections(frames: &[FrameRecord], cfg: &PipelineConfig) -> Vec<Point2> {
    let all_logged = frames.iter().flat_map(|f| &f.detections).all(|d| d.world.is_some());
    let mut nav = NavFilter::new(cfg.nav_config());
    let mut out = Vec::new();
    for f in frames {
        let pose = nav.step(
            &Pose2Delta::from(f.odom),
            f.gps.map(|g| (Point2::new(g.x, g.y), g.sigma)),
        );
        for d in f.detections.iter().filter(|d| d.conf >= cfg.filter.confidence_floor) {
            let p = match d.world {
                Some(w) if all_logged => Point2::new(w[0], w[1]),
                _ => pose.project_range_bearing(d.range, d.bearing),
            };
            out.push(p);
        }
    }
    out
}

/// Clustering map over all accumulated detections.
pub fn run_baseline(frames: &[FrameRecord], cfg: &PipelineConfig) -> TreeMap {
    baseline_map(
        &accumulate_detections(frames, cfg),
        cfg.baseline_eps,
        cfg.baseline_min_samples,
    )
}

/// Simulates `scn`, maps it with the given components switched, and scores
/// the map against the surveyed trees at half the planting distance.
pub fn ablation_run(scn: &Scenario, toggles: Toggles) -> Result<EvalReport, PipelineError> {
    let sim = scn.run()?;
    let heading = sim.true_poses.first().map_or(0.0, |p| p.theta);
    let cfg = PipelineConfig {
        toggles,
        ..PipelineConfig::for_scenario(scn, heading)
    };
    let out = run_pipeline(&sim.frames, &cfg)?;
    let pd = scn.orchard.planting_distance;
    Ok(evaluate(&out.map, &sim.surveyed, 0.5 * pd, pd))
}
