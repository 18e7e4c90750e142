//! Detection-to-track association.
//!
//! Three stages run per frame:
//!
//! - image-space matching of Kalman-predicted boxes against detection boxes
//!   (IoU cost) for tracks seen recently;
//! - a cascade in world coordinates that grows outward from the stage-1
//!   matches, pairing the unmatched neighbours of each matched track with
//!   nearby detections;
//! - if stage 1 matched nothing, a global Euclidean assignment over all
//!   unmatched tracks and detections.
//!
//! Whatever is left over seeds new tracks.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use nalgebra::{DMatrix, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::assignment::hungarian_gated;
use crate::geometry::Point2;
use crate::perception::{BBox, Detection};

pub type TrackId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssociationConfig {
    /// Minimum IoU for an image-space match.
    pub iou_gate: f64,
    /// Maximum world distance (m) for cascade and global matches.
    pub euclid_gate: f64,
    /// Neighbourhood radius (m) of the cascade stage.
    pub neighbor_radius: f64,
    /// Tracks unseen for longer than this many frames skip stage 1.
    pub max_stage1_age: u64,
    /// Continuous white-noise acceleration intensity (px²/frame³).
    pub process_noise: f64,
    /// Variance of the measured box centre (px²).
    pub measurement_noise: f64,
    /// Velocity variance of a freshly spawned track (px²/frame²).
    pub initial_velocity_var: f64,
    /// Run stage 2a. Disabling it sends stage-1 leftovers straight to spawning.
    pub cascade: bool,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        Self::for_planting_distance(1.1)
    }
}

impl AssociationConfig {
    pub fn for_planting_distance(pd: f64) -> Self {
        Self {
            iou_gate: 0.3,
            euclid_gate: 0.5 * pd,
            neighbor_radius: 1.5 * pd,
            max_stage1_age: 5,
            process_noise: 1.0,
            measurement_noise: 4.0,
            initial_velocity_var: 1.0e4,
            cascade: true,
        }
    }
}

/// Constant-velocity filter on the box centre's image x coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XVelocityState {
    pub x: f64,
    pub vx: f64,
    pub cov: Matrix2<f64>,
}

impl XVelocityState {
    pub fn new(x: f64, cfg: &AssociationConfig) -> Self {
        Self {
            x,
            vx: 0.0,
            cov: Matrix2::new(cfg.measurement_noise, 0.0, 0.0, cfg.initial_velocity_var),
        }
    }

    pub fn predicted(&self, dt: f64, q: f64) -> XVelocityState {
        let f = Matrix2::new(1.0, dt, 0.0, 1.0);
        let qm = Matrix2::new(dt.powi(3) / 3.0, dt.powi(2) / 2.0, dt.powi(2) / 2.0, dt) * q;
        let s = f * Vector2::new(self.x, self.vx);
        XVelocityState {
            x: s.x,
            vx: s.y,
            cov: f * self.cov * f.transpose() + qm,
        }
    }

    pub fn updated(&self, z: f64, r: f64) -> XVelocityState {
        let innovation_var = self.cov[(0, 0)] + r;
        let gain = Vector2::new(self.cov[(0, 0)], self.cov[(1, 0)]) / innovation_var;
        let y = z - self.x;
        let h = nalgebra::RowVector2::new(1.0, 0.0);
        let cov = (Matrix2::identity() - gain * h) * self.cov;
        XVelocityState {
            x: self.x + gain.x * y,
            vx: self.vx + gain.y * y,
            cov: 0.5 * (cov + cov.transpose()),
        }
    }
}

/// A persistent tree identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub id: TrackId,
    pub last_bbox: BBox,
    pub x_state: XVelocityState,
    /// Map position; owned by the factor graph and refreshed after each solve.
    pub world_pos: Point2,
    pub last_seen_frame: u64,
    pub hits: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MatchStage {
    Iou,
    Cascade,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Match {
    pub track: TrackId,
    pub detection: usize,
    pub stage: MatchStage,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AssociationResult {
    pub matches: Vec<Match>,
    pub new_track_detections: Vec<usize>,
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Box predicted `elapsed` frames after the track's last observation: the
/// centre x follows the velocity filter, size and vertical extent are kept.
pub fn kalman_predict_bbox(track: &Track, elapsed: u64) -> BBox {
    let predicted_x = track.x_state.x + track.x_state.vx * elapsed as f64;
    track.last_bbox.shifted_x(predicted_x - track.last_bbox.center_x())
}

/// Stage 1: image-space matching for tracks seen within `max_stage1_age`
/// frames.
pub fn associate_stage1(
    tracks: &[&Track],
    detections: &[Detection],
    frame: u64,
    cfg: &AssociationConfig,
) -> Vec<Match> {
    let eligible: Vec<&Track> = tracks
        .iter()
        .copied()
        .filter(|t| frame.saturating_sub(t.last_seen_frame) <= cfg.max_stage1_age)
        .collect();
    if eligible.is_empty() || detections.is_empty() {
        return Vec::new();
    }
    let predicted: Vec<BBox> = eligible
        .iter()
        .map(|t| kalman_predict_bbox(t, frame.saturating_sub(t.last_seen_frame)))
        .collect();
    let cost = DMatrix::from_fn(eligible.len(), detections.len(), |k, i| {
        1.0 - iou(&predicted[k], &detections[i].bbox)
    });
    hungarian_gated(&cost, 1.0 - cfg.iou_gate)
        .into_iter()
        .map(|(k, i)| Match {
            track: eligible[k].id,
            detection: i,
            stage: MatchStage::Iou,
        })
        .collect()
}

fn euclid_assign(
    tracks: &[&Track],
    det_idx: &[usize],
    detections: &[Detection],
    gate: f64,
    stage: MatchStage,
) -> Vec<Match> {
    if tracks.is_empty() || det_idx.is_empty() {
        return Vec::new();
    }
    let cost = DMatrix::from_fn(tracks.len(), det_idx.len(), |k, i| {
        tracks[k].world_pos.distance(&detections[det_idx[i]].world_pos)
    });
    hungarian_gated(&cost, gate)
        .into_iter()
        .map(|(k, i)| Match {
            track: tracks[k].id,
            detection: det_idx[i],
            stage,
        })
        .collect()
}

/// Stage 2a: breadth-first propagation from matched tracks. Each frontier
/// track (ascending id within a generation) offers its unmatched
/// neighbouring tracks within `radius` and the unmatched detections within
/// `radius` of itself to a gated Euclidean assignment; newly matched tracks
/// join the frontier.
pub fn associate_cascade(
    tracks: &BTreeMap<TrackId, Track>,
    matched: &[TrackId],
    unassoc_tracks: &[TrackId],
    unassoc_dets: &[usize],
    detections: &[Detection],
    radius: f64,
    dist_gate: f64,
) -> Vec<Match> {
    let mut free_tracks: BTreeSet<TrackId> = unassoc_tracks.iter().copied().collect();
    let mut free_dets: BTreeSet<usize> = unassoc_dets.iter().copied().collect();
    let mut seeds: Vec<TrackId> = matched.to_vec();
    seeds.sort_unstable();
    let mut frontier: VecDeque<TrackId> = seeds.into();
    let mut out = Vec::new();

    while let Some(id) = frontier.pop_front() {
        if free_tracks.is_empty() || free_dets.is_empty() {
            break;
        }
        let center = tracks[&id].world_pos;
        let nbr_tracks: Vec<&Track> = free_tracks
            .iter()
            .map(|k| &tracks[k])
            .filter(|t| t.world_pos.distance(&center) < radius)
            .collect();
        let nbr_dets: Vec<usize> = free_dets
            .iter()
            .copied()
            .filter(|&i| detections[i].world_pos.distance(&center) < radius)
            .collect();
        let mut found = euclid_assign(&nbr_tracks, &nbr_dets, detections, dist_gate, MatchStage::Cascade);
        found.sort_by_key(|m| m.track);
        for m in found {
            free_tracks.remove(&m.track);
            free_dets.remove(&m.detection);
            frontier.push_back(m.track);
            out.push(m);
        }
    }
    out
}

/// Stage 2b: gated Euclidean assignment over everything still unmatched.
pub fn associate_global(
    unassoc_tracks: &[&Track],
    unassoc_dets: &[usize],
    detections: &[Detection],
    dist_gate: f64,
) -> Vec<Match> {
    euclid_assign(unassoc_tracks, unassoc_dets, detections, dist_gate, MatchStage::Global)
}

/// Owns every track of a run. Tracks are never deleted.
#[derive(Debug, Clone)]
pub struct Tracker {
    cfg: AssociationConfig,
    tracks: BTreeMap<TrackId, Track>,
    next_id: TrackId,
    /// Median image velocity of established tracks matched in the last step.
    scene_vx: Option<f64>,
}

impl Tracker {
    pub fn new(cfg: AssociationConfig) -> Self {
        Self {
            cfg,
            tracks: BTreeMap::new(),
            next_id: 0,
            scene_vx: None,
        }
    }

    pub fn config(&self) -> &AssociationConfig {
        &self.cfg
    }

    pub fn tracks(&self) -> &BTreeMap<TrackId, Track> {
        &self.tracks
    }

    pub fn track(&self, id: TrackId) -> Option<&Track> {
        self.tracks.get(&id)
    }

    pub fn set_world_pos(&mut self, id: TrackId, p: Point2) {
        if let Some(t) = self.tracks.get_mut(&id) {
            if p.is_finite() {
                t.world_pos = p;
            }
        }
    }

    /// Starts a new track from `det` and returns its id.
    pub fn spawn(&mut self, det: &Detection, frame: u64) -> TrackId {
        let id = self.next_id;
        self.next_id += 1;
        let mut x_state = XVelocityState::new(det.bbox.center_x(), &self.cfg);
        // static trees share the image motion of the ones already tracked
        x_state.vx = self.scene_vx.unwrap_or(0.0);
        self.tracks.insert(
            id,
            Track {
                id,
                last_bbox: det.bbox,
                x_state,
                world_pos: det.world_pos,
                last_seen_frame: frame,
                hits: 1,
            },
        );
        id
    }

    /// Associates one frame of filtered detections and updates the velocity
    /// filters of every matched track. Unmatched detections are reported in
    /// `new_track_detections`; the caller spawns them.
    pub fn step(&mut self, detections: &[Detection], frame: u64) -> AssociationResult {
        let all: Vec<&Track> = self.tracks.values().collect();
        let mut matches = associate_stage1(&all, detections, frame, &self.cfg);

        let matched_ids: BTreeSet<TrackId> = matches.iter().map(|m| m.track).collect();
        let used: BTreeSet<usize> = matches.iter().map(|m| m.detection).collect();
        let free_tracks: Vec<TrackId> = self
            .tracks
            .keys()
            .copied()
            .filter(|id| !matched_ids.contains(id))
            .collect();
        let free_dets: Vec<usize> = (0..detections.len()).filter(|i| !used.contains(i)).collect();

        if !matches.is_empty() {
            if self.cfg.cascade {
                let seeds: Vec<TrackId> = matched_ids.iter().copied().collect();
                matches.extend(associate_cascade(
                    &self.tracks,
                    &seeds,
                    &free_tracks,
                    &free_dets,
                    detections,
                    self.cfg.neighbor_radius,
                    self.cfg.euclid_gate,
                ));
            }
        } else {
            let free: Vec<&Track> = free_tracks.iter().map(|k| &self.tracks[k]).collect();
            matches.extend(associate_global(&free, &free_dets, detections, self.cfg.euclid_gate));
        }

        let used: BTreeSet<usize> = matches.iter().map(|m| m.detection).collect();
        let new_track_detections = (0..detections.len()).filter(|i| !used.contains(i)).collect();

        for m in &matches {
            let det = &detections[m.detection];
            let t = self.tracks.get_mut(&m.track).expect("matched track exists");
            let gap = frame.saturating_sub(t.last_seen_frame);
            t.x_state = if gap > self.cfg.max_stage1_age {
                // re-acquired in world space: the old image motion is stale
                let mut s = XVelocityState::new(det.bbox.center_x(), &self.cfg);
                s.vx = self.scene_vx.unwrap_or(0.0);
                s
            } else {
                t.x_state
                    .predicted(gap as f64, self.cfg.process_noise)
                    .updated(det.bbox.center_x(), self.cfg.measurement_noise)
            };
            t.last_bbox = det.bbox;
            t.last_seen_frame = frame;
            t.hits += 1;
        }
        let mut vx: Vec<f64> = matches
            .iter()
            .map(|m| &self.tracks[&m.track])
            .filter(|t| t.hits >= 3)
            .map(|t| t.x_state.vx)
            .collect();
        if !vx.is_empty() {
            vx.sort_by(f64::total_cmp);
            self.scene_vx = Some(vx[vx.len() / 2]);
        }

        AssociationResult {
            matches,
            new_track_detections,
        }
    }
}
