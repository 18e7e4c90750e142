//! Synthetic single-row orchard scenarios: ground-truth trees, a robot path
//! and the noisy frame log a pipeline would ingest.

mod cloud;
mod trajectory;

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cloud::{sample_cylinder_cloud, CloudConfig};
pub use trajectory::{generate_trajectory, PathKind, TrajectoryConfig};

use crate::eval::TreeMap;
use crate::geometry::{wrap, Point2, Pose2, Pose2Delta};
use crate::io::{DetectionRecord, FrameRecord, GpsRecord, OdomRecord};
use crate::nav::{NavConfig, NavFilter};
use crate::perception::BBox;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("{field}: {msg}")]
    Config { field: String, msg: String },
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
}

fn config_err<T>(field: &str, msg: impl Into<String>) -> Result<T, SimError> {
    Err(SimError::Config {
        field: field.to_string(),
        msg: msg.into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrchardConfig {
    pub n_trees: usize,
    pub planting_distance: f64,
    pub row_heading: f64,
    pub position_jitter_sigma: f64,
    pub trunk_radius: f64,
    pub trunk_height: f64,
    pub row_origin: Point2,
}

impl Default for OrchardConfig {
    fn default() -> Self {
        Self {
            n_trees: 135,
            planting_distance: 1.1,
            row_heading: 0.0,
            position_jitter_sigma: 0.03,
            trunk_radius: 0.08,
            trunk_height: 1.0,
            row_origin: Point2::new(0.0, 0.0),
        }
    }
}

impl OrchardConfig {
    /// Distance between the first and last nominal tree positions.
    pub fn row_length(&self) -> f64 {
        (self.n_trees.saturating_sub(1)) as f64 * self.planting_distance
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_trees < 1 {
            return config_err("orchard.n_trees", "must be at least 1");
        }
        if !(self.planting_distance > 0.0) || !self.planting_distance.is_finite() {
            return config_err("orchard.planting_distance", "must be positive");
        }
        if !(self.position_jitter_sigma >= 0.0) {
            return config_err("orchard.position_jitter_sigma", "must be non-negative");
        }
        if !(self.trunk_radius > 0.0) || !(self.trunk_height > 0.0) {
            return config_err("orchard.trunk_radius", "trunk radius and height must be positive");
        }
        if !self.row_heading.is_finite() || !self.row_origin.is_finite() {
            return config_err("orchard.row_origin", "must be finite");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfidenceModel {
    pub tree_min: f64,
    pub tree_max: f64,
    pub false_positive_min: f64,
    pub false_positive_max: f64,
}

impl Default for ConfidenceModel {
    fn default() -> Self {
        Self {
            tree_min: 0.4,
            tree_max: 0.95,
            false_positive_min: 0.1,
            false_positive_max: 0.35,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorConfig {
    /// Per-frame odometry noise (forward m, lateral m, heading rad).
    pub odom_sigma: [f64; 3],
    pub gps_sigma: f64,
    pub gps_dropout_prob: f64,
    /// Per-frame innovation of the slowly varying GPS bias (m).
    pub gps_bias_walk_sigma: f64,
    /// Correlation time of the GPS bias in frames; infinite gives a pure
    /// random walk.
    pub gps_bias_correlation_frames: f64,
    pub detection_range: f64,
    /// Full horizontal field of view around the right-facing axis (rad).
    pub detection_fov: f64,
    pub miss_prob: f64,
    /// Mean number of false positives per frame.
    pub false_positive_rate: f64,
    pub range_sigma: f64,
    pub bearing_sigma: f64,
    /// Noise on each bounding box edge (px).
    pub bbox_sigma: f64,
    pub confidence_model: ConfidenceModel,
    pub seed: u64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            odom_sigma: [0.01, 0.01, 0.005],
            gps_sigma: 0.30,
            gps_dropout_prob: 0.1,
            gps_bias_walk_sigma: 0.0,
            gps_bias_correlation_frames: 100.0,
            detection_range: 3.0,
            detection_fov: FRAC_PI_2,
            miss_prob: 0.03,
            false_positive_rate: 0.2,
            range_sigma: 0.05,
            bearing_sigma: 0.02,
            bbox_sigma: 2.0,
            confidence_model: ConfidenceModel::default(),
            seed: 0,
        }
    }
}

impl SensorConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let sigmas = [
            ("odom_sigma", self.odom_sigma.iter().all(|s| *s >= 0.0 && s.is_finite())),
            ("gps_sigma", self.gps_sigma >= 0.0 && self.gps_sigma.is_finite()),
            (
                "gps_bias_walk_sigma",
                self.gps_bias_walk_sigma >= 0.0 && self.gps_bias_walk_sigma.is_finite(),
            ),
            ("range_sigma", self.range_sigma >= 0.0 && self.range_sigma.is_finite()),
            (
                "bearing_sigma",
                self.bearing_sigma >= 0.0 && self.bearing_sigma.is_finite(),
            ),
            ("bbox_sigma", self.bbox_sigma >= 0.0 && self.bbox_sigma.is_finite()),
        ];
        for (name, ok) in sigmas {
            if !ok {
                return config_err(&format!("sensors.{name}"), "must be finite and non-negative");
            }
        }
        for (name, p) in [
            ("gps_dropout_prob", self.gps_dropout_prob),
            ("miss_prob", self.miss_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return config_err(&format!("sensors.{name}"), "must be in [0, 1]");
            }
        }
        if !(self.gps_bias_correlation_frames > 0.0) {
            return config_err("sensors.gps_bias_correlation_frames", "must be positive");
        }
        if !(self.detection_range > 0.0) || !self.detection_range.is_finite() {
            return config_err("sensors.detection_range", "must be positive");
        }
        if !(self.detection_fov > 0.0 && self.detection_fov < PI) {
            return config_err("sensors.detection_fov", "must be in (0, π)");
        }
        if !(self.false_positive_rate >= 0.0) || !self.false_positive_rate.is_finite() {
            return config_err("sensors.false_positive_rate", "must be non-negative");
        }
        let c = &self.confidence_model;
        for (name, lo, hi) in [
            ("tree", c.tree_min, c.tree_max),
            ("false_positive", c.false_positive_min, c.false_positive_max),
        ] {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return config_err(&format!("sensors.confidence_model.{name}"), "need 0 ≤ min ≤ max ≤ 1");
            }
        }
        Ok(())
    }
}

/// Pinhole colour camera on the robot's right side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraModel {
    pub width: f64,
    pub height: f64,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Height of the optical centre above the ground (m).
    pub mount_height: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            width: 1280.0,
            height: 720.0,
            fx: 640.0,
            fy: 640.0,
            cx: 640.0,
            cy: 360.0,
            mount_height: 0.5,
        }
    }
}

impl CameraModel {
    /// Image box of a vertical cylinder standing on the ground at robot-frame
    /// position `rel`, clipped to the image. `None` if it is behind the
    /// camera or entirely outside the image.
    pub fn project_cylinder(&self, rel: Point2, radius: f64, height: f64) -> Option<BBox> {
        let (x, z) = (-rel.x, -rel.y);
        let d = (x * x + z * z).sqrt();
        if z <= 0.05 || d <= radius {
            return None;
        }
        let alpha = x.atan2(z);
        let half = (radius / d).asin();
        if (alpha - half).abs() >= FRAC_PI_2 || (alpha + half).abs() >= FRAC_PI_2 {
            return None;
        }
        let u0 = self.cx + self.fx * (alpha - half).tan();
        let u1 = self.cx + self.fx * (alpha + half).tan();
        let v0 = self.cy + self.fy * (self.mount_height - height) / z;
        let v1 = self.cy + self.fy * self.mount_height / z;
        let b = BBox::new(u0.max(0.0), v0.max(0.0), u1.min(self.width), v1.min(self.height));
        b.is_valid().then_some(b)
    }
}

/// Everything needed to regenerate one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub orchard: OrchardConfig,
    pub trajectory: TrajectoryConfig,
    pub sensors: SensorConfig,
    pub camera: CameraModel,
    /// Attach sampled trunk clouds to detections when set.
    pub clouds: Option<CloudConfig>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            name: "pear-row".into(),
            orchard: OrchardConfig::default(),
            trajectory: TrajectoryConfig::default(),
            sensors: SensorConfig::default(),
            camera: CameraModel::default(),
            clouds: None,
        }
    }
}

pub const PRESETS: &[&str] = &[
    "pear-row",
    "pear-row-degraded",
    "pear-row-intermittent",
    "pear-loop",
    "pear-row-clouds",
    "apple-row-degraded",
    "noiseless",
];

impl Scenario {
    pub fn preset(name: &str) -> Result<Scenario, SimError> {
        let base = Scenario {
            name: name.to_string(),
            ..Scenario::default()
        };
        let s = match name {
            "pear-row" => base,
            "pear-row-degraded" => Scenario {
                sensors: SensorConfig {
                    gps_bias_walk_sigma: 0.05,
                    ..base.sensors
                },
                ..base
            },
            "pear-row-intermittent" => Scenario {
                sensors: SensorConfig {
                    miss_prob: 0.5,
                    ..base.sensors
                },
                ..base
            },
            "pear-loop" => Scenario {
                trajectory: TrajectoryConfig {
                    path: PathKind::FullLoop,
                    ..base.trajectory
                },
                ..base
            },
            "pear-row-clouds" => Scenario {
                orchard: OrchardConfig {
                    n_trees: 40,
                    ..base.orchard
                },
                trajectory: TrajectoryConfig {
                    path: PathKind::Straight,
                    ..base.trajectory
                },
                clouds: Some(CloudConfig::default()),
                ..base
            },
            "apple-row-degraded" => Scenario {
                orchard: OrchardConfig {
                    n_trees: 120,
                    planting_distance: 1.2,
                    trunk_radius: 0.05,
                    ..base.orchard
                },
                sensors: SensorConfig {
                    gps_bias_walk_sigma: 0.05,
                    miss_prob: 0.2,
                    ..base.sensors
                },
                ..base
            },
            "noiseless" => Scenario {
                orchard: OrchardConfig {
                    n_trees: 30,
                    position_jitter_sigma: 0.0,
                    ..base.orchard
                },
                sensors: SensorConfig {
                    odom_sigma: [0.0; 3],
                    gps_sigma: 0.0,
                    gps_dropout_prob: 0.0,
                    gps_bias_walk_sigma: 0.0,
                    miss_prob: 0.0,
                    false_positive_rate: 0.0,
                    range_sigma: 0.0,
                    bearing_sigma: 0.0,
                    bbox_sigma: 0.0,
                    ..base.sensors
                },
                ..base
            },
            other => return Err(SimError::UnknownPreset(other.to_string())),
        };
        Ok(s)
    }

    pub fn with_seed(mut self, seed: u64) -> Scenario {
        self.sensors.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.orchard.validate()?;
        self.trajectory.validate(&self.orchard)?;
        self.sensors.validate()?;
        let c = &self.camera;
        if ![c.width, c.height, c.fx, c.fy]
            .iter()
            .all(|v| *v > 0.0 && v.is_finite())
        {
            return config_err("camera", "width, height, fx, fy must be positive");
        }
        if let Some(cl) = &self.clouds {
            if cl.points < 3 || !(cl.depth_sigma >= 0.0) || !(cl.min_height < cl.max_height) {
                return config_err("clouds", "need points ≥ 3, depth_sigma ≥ 0, min_height < max_height");
            }
        }
        Ok(())
    }

    /// Localization settings that match this scenario's sensors.
    pub fn nav_config(&self, initial_heading: f64) -> NavConfig {
        let s = &self.sensors;
        NavConfig {
            odom_sigma: s.odom_sigma.map(|v| v.max(1e-3)),
            gps_sigma: reported_gps_sigma(s),
            initial_heading,
            ..NavConfig::default()
        }
    }

    pub fn run(&self) -> Result<SimOutput, SimError> {
        self.validate()?;
        let trees = generate_orchard(&self.orchard, self.sensors.seed);
        let poses = generate_trajectory(&self.orchard, &self.trajectory)?;
        simulate(self, &trees, &poses)
    }
}

fn reported_gps_sigma(s: &SensorConfig) -> f64 {
    s.gps_sigma.max(0.01)
}

/// Independent random stream `stream` of the scenario seed.
fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("validated sigma")
}

/// Trees at `origin + k·PD` along the row heading, each jittered.
pub fn generate_orchard(cfg: &OrchardConfig, seed: u64) -> TreeMap {
    let mut rng = stream(seed, 1);
    let jitter = normal(cfg.position_jitter_sigma.max(0.0));
    let (s, c) = cfg.row_heading.sin_cos();
    let mut map = TreeMap::new("world");
    for k in 0..cfg.n_trees {
        let along = k as f64 * cfg.planting_distance;
        let (jx, jy) = (jitter.sample(&mut rng), jitter.sample(&mut rng));
        let p = Point2::new(cfg.row_origin.x + along * c + jx, cfg.row_origin.y + along * s + jy);
        map.push(k as u64, p).expect("sequential ids");
    }
    map
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub frames: Vec<FrameRecord>,
    pub true_poses: Vec<Pose2>,
    pub trees: TreeMap,
    /// Trees inside the sensing wedge of at least one true pose.
    pub surveyed: TreeMap,
    /// Ground-truth tree id of every logged detection (`None` for false
    /// positives), parallel to `frames[k].detections`.
    pub labels: Vec<Vec<Option<u64>>>,
    pub nav: NavConfig,
}

/// Inside the range limit and the field of view around the right-facing axis.
pub fn in_sensing_wedge(pose: &Pose2, p: &Point2, range: f64, fov: f64) -> bool {
    match pose.range_bearing(p) {
        Ok((r, b)) => r <= range && wrap(b + FRAC_PI_2).abs() <= 0.5 * fov,
        Err(_) => false,
    }
}

pub fn simulate(scn: &Scenario, trees: &TreeMap, poses: &[Pose2]) -> Result<SimOutput, SimError> {
    scn.validate()?;
    let s = &scn.sensors;
    let cam = &scn.camera;
    let mut rng = stream(s.seed, 2);
    let odom_noise = s.odom_sigma.map(normal);
    let gps_noise = normal(s.gps_sigma);
    let range_noise = normal(s.range_sigma);
    let bearing_noise = normal(s.bearing_sigma);
    let bbox_noise = normal(s.bbox_sigma);
    let bias_step = normal(s.gps_bias_walk_sigma);
    let fp_count = (s.false_positive_rate > 0.0).then(|| Poisson::new(s.false_positive_rate).expect("validated rate"));
    let decay = (-1.0 / s.gps_bias_correlation_frames).exp();
    let bias_stationary = if decay < 1.0 {
        s.gps_bias_walk_sigma / (1.0 - decay * decay).sqrt()
    } else {
        0.0
    };
    let bias_init = normal(bias_stationary);

    let initial_heading = poses.first().map_or(0.0, |p| p.theta);
    let nav_cfg = scn.nav_config(initial_heading);
    let mut nav = NavFilter::new(nav_cfg);
    let conf = s.confidence_model;
    let tree_pts: Vec<(u64, Point2)> = trees.trees.iter().map(|t| (t.id, t.position())).collect();
    let mut surveyed = vec![false; tree_pts.len()];

    let mut bias = (bias_init.sample(&mut rng), bias_init.sample(&mut rng));
    let mut frames = Vec::with_capacity(poses.len());
    let mut labels = Vec::with_capacity(poses.len());
    for (k, truth) in poses.iter().enumerate() {
        let odom = if k == 0 {
            OdomRecord {
                dx: 0.0,
                dy: 0.0,
                dtheta: 0.0,
            }
        } else {
            let d = poses[k - 1].between(truth);
            OdomRecord {
                dx: d.dx + odom_noise[0].sample(&mut rng),
                dy: d.dy + odom_noise[1].sample(&mut rng),
                dtheta: d.dtheta + odom_noise[2].sample(&mut rng),
            }
        };
        if k > 0 {
            bias = (
                decay * bias.0 + bias_step.sample(&mut rng),
                decay * bias.1 + bias_step.sample(&mut rng),
            );
        }
        let dropped = rng.random::<f64>() < s.gps_dropout_prob;
        let gps = (!dropped).then(|| GpsRecord {
            x: truth.x + bias.0 + gps_noise.sample(&mut rng),
            y: truth.y + bias.1 + gps_noise.sample(&mut rng),
            sigma: Some(reported_gps_sigma(s)),
        });
        let nav_pose = nav.step(&Pose2Delta::from(odom), gps.map(|g| (Point2::new(g.x, g.y), g.sigma)));

        let mut dets: Vec<(DetectionRecord, Option<u64>)> = Vec::new();
        for (i, &(id, p)) in tree_pts.iter().enumerate() {
            if !in_sensing_wedge(truth, &p, s.detection_range, s.detection_fov) {
                continue;
            }
            let rel = truth.inverse_transform_point(&p);
            let Some(bbox) = cam.project_cylinder(rel, scn.orchard.trunk_radius, scn.orchard.trunk_height) else {
                continue;
            };
            surveyed[i] = true;
            if rng.random::<f64>() < s.miss_prob {
                continue;
            }
            let (r, b) = truth.range_bearing(&p).expect("inside wedge");
            let range = (r + range_noise.sample(&mut rng)).max(0.05);
            let bearing = wrap(b + bearing_noise.sample(&mut rng));
            let c = rng.random_range(conf.tree_min..=conf.tree_max);
            let bbox = jitter_bbox(&mut rng, bbox, &bbox_noise);
            let cloud = scn
                .clouds
                .as_ref()
                .map(|cl| cloud_record(&mut rng, rel, scn.orchard.trunk_radius, cam, cl));
            let w = nav_pose.project_range_bearing(range, bearing);
            dets.push((
                DetectionRecord {
                    bbox,
                    conf: c,
                    range,
                    bearing,
                    world: Some([w.x, w.y]),
                    cloud,
                },
                Some(id),
            ));
        }
        let n_fp = fp_count.as_ref().map_or(0, |d| d.sample(&mut rng) as usize);
        for _ in 0..n_fp {
            let r0 = 0.5f64.min(s.detection_range);
            let r = (r0 * r0 + (s.detection_range.powi(2) - r0 * r0) * rng.random::<f64>()).sqrt();
            let b = -FRAC_PI_2 + s.detection_fov * (rng.random::<f64>() - 0.5);
            let rel = Point2::new(r * b.cos(), r * b.sin());
            let Some(bbox) = cam.project_cylinder(rel, FALSE_POSITIVE_RADIUS, scn.orchard.trunk_height) else {
                continue;
            };
            let c = rng.random_range(conf.false_positive_min..=conf.false_positive_max);
            let cloud = scn
                .clouds
                .as_ref()
                .map(|cl| cloud_record(&mut rng, rel, FALSE_POSITIVE_RADIUS, cam, cl));
            let w = nav_pose.project_range_bearing(r, b);
            dets.push((
                DetectionRecord {
                    bbox: bbox.into(),
                    conf: c,
                    range: r,
                    bearing: b,
                    world: Some([w.x, w.y]),
                    cloud,
                },
                None,
            ));
        }
        dets.sort_by(|a, b| a.0.bbox[0].total_cmp(&b.0.bbox[0]));
        let (records, ids): (Vec<_>, Vec<_>) = dets.into_iter().unzip();
        frames.push(FrameRecord {
            frame: k as u64,
            odom,
            gps,
            detections: records,
        });
        labels.push(ids);
    }

    let mut surveyed_map = TreeMap::new("world");
    for (i, &(id, p)) in tree_pts.iter().enumerate() {
        if surveyed[i] {
            surveyed_map.push(id, p).expect("ids from a valid map");
        }
    }
    Ok(SimOutput {
        frames,
        true_poses: poses.to_vec(),
        trees: trees.clone(),
        surveyed: surveyed_map,
        labels,
        nav: nav_cfg,
    })
}

/// Radius of the thin posts and weeds that show up as false positives.
const FALSE_POSITIVE_RADIUS: f64 = 0.03;

fn jitter_bbox<R: Rng>(rng: &mut R, b: BBox, noise: &Normal<f64>) -> [f64; 4] {
    let mut e = [b.x_min, b.y_min, b.x_max, b.y_max];
    for v in &mut e {
        *v += noise.sample(rng);
    }
    // keep a valid box however large the noise
    if e[2] <= e[0] {
        let m = 0.5 * (e[0] + e[2]);
        e[0] = m - 0.5;
        e[2] = m + 0.5;
    }
    if e[3] <= e[1] {
        let m = 0.5 * (e[1] + e[3]);
        e[1] = m - 0.5;
        e[3] = m + 0.5;
    }
    e
}

fn cloud_record<R: Rng>(rng: &mut R, rel: Point2, radius: f64, cam: &CameraModel, cfg: &CloudConfig) -> Vec<[f64; 3]> {
    sample_cylinder_cloud(rng, -rel.x, -rel.y, radius, cam, cfg)
        .into_iter()
        .map(|p: Vector3<f64>| [p.x, p.y, p.z])
        .collect()
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}
