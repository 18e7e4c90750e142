//! Trunk localization from segmented point clouds and per-frame detection
//! filtering.

use std::collections::HashMap;

use nalgebra::{Isometry3, Matrix3, Rotation3, SymmetricEigen, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Point2, Pose2};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PerceptionError {
    #[error("point cloud has {0} points, at least 3 are required")]
    TooFewPoints(usize),
    #[error("point cloud is degenerate (collinear or coincident points)")]
    DegenerateCloud,
    #[error("point cloud contains non-finite coordinates")]
    NonFinite,
}

/// Axis-aligned image rectangle in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center_x(&self) -> f64 {
        0.5 * (self.x_min + self.x_max)
    }

    pub fn shifted_x(&self, dx: f64) -> BBox {
        BBox::new(self.x_min + dx, self.y_min, self.x_max + dx, self.y_max)
    }
}

/// One per-frame trunk observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub confidence: f64,
    /// World position computed through the robot pose of the detection's frame.
    pub world_pos: Point2,
    pub range: f64,
    pub bearing: f64,
}

/// Points of one segmented trunk, in the camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TrunkPointCloud {
    pub points: Vec<Vector3<f64>>,
    pub camera_origin: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrunkEstimate {
    pub center3d: Vector3<f64>,
    pub width: f64,
    /// First principal component (unit length).
    pub axis: Vector3<f64>,
}

fn centroid_of(points: &[Vector3<f64>]) -> Vector3<f64> {
    let sum: Vector3<f64> = points.iter().sum();
    sum / points.len() as f64
}

fn check_cloud(cloud: &TrunkPointCloud) -> Result<(), PerceptionError> {
    if cloud.points.len() < 3 {
        return Err(PerceptionError::TooFewPoints(cloud.points.len()));
    }
    let finite = |v: &Vector3<f64>| v.iter().all(|c| c.is_finite());
    if !cloud.points.iter().all(finite) || !finite(&cloud.camera_origin) {
        return Err(PerceptionError::NonFinite);
    }
    Ok(())
}

/// Plain centroid of the cloud; the fallback when PCA is disabled.
pub fn centroid_estimate(cloud: &TrunkPointCloud) -> Result<Vector3<f64>, PerceptionError> {
    check_cloud(cloud)?;
    Ok(centroid_of(&cloud.points))
}

/// Estimates the trunk centre with PCA and pushes the surface centroid back
/// by half the trunk width, away from the camera and perpendicular to the
/// trunk axis.
pub fn estimate_trunk_center(cloud: &TrunkPointCloud) -> Result<TrunkEstimate, PerceptionError> {
    check_cloud(cloud)?;
    let centroid = centroid_of(&cloud.points);
    let n = cloud.points.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in &cloud.points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    cov /= n;

    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let (l0, l1) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    // Rank ≤ 1 covariance: every point on one line (or all coincident).
    if l0 <= 0.0 || l1 <= l0 * 1e-12 {
        return Err(PerceptionError::DegenerateCloud);
    }
    let axis = eig.eigenvectors.column(order[0]).normalize();
    let pc2 = eig.eigenvectors.column(order[1]).normalize();
    let pc3 = eig.eigenvectors.column(order[2]).normalize();

    let extent = |dir: &Vector3<f64>| {
        let (lo, hi) = cloud
            .points
            .iter()
            .map(|p| p.dot(dir))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        hi - lo
    };
    let width = extent(&pc2).max(extent(&pc3));

    let view = centroid - cloud.camera_origin;
    let perp = view - axis * view.dot(&axis);
    let norm = perp.norm();
    let center3d = if norm < 1e-9 {
        centroid
    } else {
        centroid + perp * (0.5 * width / norm)
    };
    Ok(TrunkEstimate { center3d, width, axis })
}

/// Camera-to-robot transform.
pub type SensorExtrinsics = Isometry3<f64>;

/// Camera looking out of the robot's right side (robot -y), optical axis
/// level, mounted `mount_height` above the ground. Camera axes: x right,
/// y down, z forward.
pub fn right_facing_camera(mount_height: f64) -> SensorExtrinsics {
    let rot = Rotation3::from_matrix_unchecked(Matrix3::new(-1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, -1.0, 0.0));
    Isometry3::from_parts(
        Translation3::new(0.0, 0.0, mount_height),
        UnitQuaternion::from_rotation_matrix(&rot),
    )
}

/// Robot-frame ground point of a camera-frame 3D point; height is dropped.
pub fn camera_to_robot_plane(center3d: &Vector3<f64>, extrinsics: &SensorExtrinsics) -> Point2 {
    let p = extrinsics.transform_point(&(*center3d).into());
    Point2::new(p.x, p.y)
}

pub fn project_to_ground(center3d: &Vector3<f64>, robot_pose: &Pose2, extrinsics: &SensorExtrinsics) -> Point2 {
    robot_pose.transform_point(&camera_to_robot_plane(center3d, extrinsics))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClusterLabel {
    Noise,
    Cluster(usize),
}

impl ClusterLabel {
    pub fn cluster(&self) -> Option<usize> {
        match self {
            ClusterLabel::Cluster(c) => Some(*c),
            ClusterLabel::Noise => None,
        }
    }
}

/// Uniform grid over the plane with cell size `eps`, used for radius queries.
struct Grid {
    cell: f64,
    cells: HashMap<(i64, i64), Vec<usize>>,
}

impl Grid {
    fn new(points: &[Point2], cell: f64) -> Self {
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, cell)).or_default().push(i);
        }
        Self { cell, cells }
    }

    fn key(p: &Point2, cell: f64) -> (i64, i64) {
        ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64)
    }

    /// Indices within `eps` of `points[i]` (inclusive), ascending.
    fn neighbors(&self, points: &[Point2], i: usize, eps: f64) -> Vec<usize> {
        let (cx, cy) = Self::key(&points[i], self.cell);
        let mut out = Vec::new();
        for gx in cx - 1..=cx + 1 {
            for gy in cy - 1..=cy + 1 {
                if let Some(members) = self.cells.get(&(gx, gy)) {
                    out.extend(
                        members
                            .iter()
                            .copied()
                            .filter(|&j| points[i].distance(&points[j]) <= eps),
                    );
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// Density-based clustering. A point is core when at least `min_pts` points
/// (itself included) lie within distance `eps`. Clusters are numbered in the
/// order their first core point appears in the input; a border point joins
/// the first cluster that reaches it.
pub fn dbscan(points: &[Point2], eps: f64, min_pts: usize) -> Vec<ClusterLabel> {
    assert!(eps > 0.0 && eps.is_finite(), "eps must be positive");
    assert!(min_pts >= 1, "min_pts must be at least 1");
    let n = points.len();
    let mut labels = vec![ClusterLabel::Noise; n];
    if n == 0 {
        return labels;
    }
    let grid = Grid::new(points, eps);
    let mut visited = vec![false; n];
    let mut next_cluster = 0;
    let mut queue = std::collections::VecDeque::new();

    for i in 0..n {
        if visited[i] {
            continue;
        }
        visited[i] = true;
        let nbrs = grid.neighbors(points, i, eps);
        if nbrs.len() < min_pts {
            continue;
        }
        let c = next_cluster;
        next_cluster += 1;
        labels[i] = ClusterLabel::Cluster(c);
        queue.extend(nbrs);
        while let Some(j) = queue.pop_front() {
            if labels[j] == ClusterLabel::Noise {
                labels[j] = ClusterLabel::Cluster(c);
            }
            if visited[j] {
                continue;
            }
            visited[j] = true;
            let nn = grid.neighbors(points, j, eps);
            if nn.len() >= min_pts {
                queue.extend(nn);
            }
        }
    }
    labels
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// Neighbourhood radius as a fraction of the planting distance.
    pub eps_fraction: f64,
    pub min_pts: usize,
    /// Keep DBSCAN noise points (only relevant when `min_pts > 1`).
    pub keep_noise: bool,
    pub confidence_floor: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            eps_fraction: 0.6,
            min_pts: 1,
            keep_noise: true,
            confidence_floor: 0.1,
        }
    }
}

/// Collapses spatially clustered detections of one frame to their most
/// confident member. Survivors keep their input order.
pub fn filter_detections(dets: &[Detection], planting_distance: f64) -> Vec<Detection> {
    filter_detections_with(dets, planting_distance, &FilterConfig::default())
}

pub fn filter_detections_with(dets: &[Detection], planting_distance: f64, cfg: &FilterConfig) -> Vec<Detection> {
    assert!(planting_distance > 0.0, "planting distance must be positive");
    let points: Vec<Point2> = dets.iter().map(|d| d.world_pos).collect();
    let labels = dbscan(&points, cfg.eps_fraction * planting_distance, cfg.min_pts);

    let mut best: HashMap<usize, usize> = HashMap::new();
    let mut keep = vec![false; dets.len()];
    for (i, label) in labels.iter().enumerate() {
        match label {
            ClusterLabel::Noise => keep[i] = cfg.keep_noise,
            ClusterLabel::Cluster(c) => {
                let slot = best.entry(*c).or_insert(i);
                if better(&dets[i], &dets[*slot]) {
                    *slot = i;
                }
            }
        }
    }
    for &i in best.values() {
        keep[i] = true;
    }
    dets.iter().zip(keep).filter_map(|(d, k)| k.then_some(*d)).collect()
}

/// Higher confidence wins; ties go to the lexicographically smaller position.
fn better(a: &Detection, b: &Detection) -> bool {
    match a.confidence.total_cmp(&b.confidence) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => (a.world_pos.x, a.world_pos.y) < (b.world_pos.x, b.world_pos.y),
    }
}
