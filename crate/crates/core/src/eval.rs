//! Map scoring and the detection-clustering baseline.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::assignment::hungarian_gated;
use crate::geometry::Point2;
use crate::perception::{dbscan, ClusterLabel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub id: u64,
    pub x: f64,
    pub y: f64,
}

impl Tree {
    pub fn position(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }
}

/// A set of tree positions in the local metric frame.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TreeMap {
    pub frame: String,
    pub trees: Vec<Tree>,
}

impl TreeMap {
    pub fn new(frame: impl Into<String>) -> Self {
        Self {
            frame: frame.into(),
            trees: Vec::new(),
        }
    }

    pub fn from_points(frame: impl Into<String>, points: impl IntoIterator<Item = Point2>) -> Self {
        let trees = points
            .into_iter()
            .enumerate()
            .map(|(i, p)| Tree {
                id: i as u64,
                x: p.x,
                y: p.y,
            })
            .collect();
        Self {
            frame: frame.into(),
            trees,
        }
    }

    /// Adds a tree; fails if the id is taken.
    pub fn push(&mut self, id: u64, p: Point2) -> Result<(), u64> {
        if self.trees.iter().any(|t| t.id == id) {
            return Err(id);
        }
        self.trees.push(Tree { id, x: p.x, y: p.y });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.trees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trees.is_empty()
    }

    pub fn points(&self) -> Vec<Point2> {
        self.trees.iter().map(Tree::position).collect()
    }

    /// True when no id repeats.
    pub fn ids_unique(&self) -> bool {
        let mut seen = BTreeSet::new();
        self.trees.iter().all(|t| seen.insert(t.id))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// (prediction index, ground-truth index, distance)
    pub matches: Vec<(usize, usize, f64)>,
    pub false_positives: Vec<usize>,
    pub false_negatives: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mean_tp_error: f64,
    pub pct_within_half_pd: f64,
    pub gate: f64,
}

/// Minimum-cost one-to-one matching on Euclidean distance with pairs at
/// distance `≥ gate` excluded from the cost matrix: the most pairs under the
/// gate, then the least total distance. Unmatched trees on either side count
/// as FP / FN.
///
/// Gating the matrix matters when the maps differ in size: an ungated
/// optimum will shift a whole stretch of a row by one tree to reach a spare
/// prediction, and every shifted pair would then fail the gate.
pub fn match_maps(pred: &TreeMap, gt: &TreeMap, gate: f64) -> MatchResult {
    assert!(gate > 0.0, "gate must be positive");
    let p = pred.points();
    let g = gt.points();
    let cost = DMatrix::from_fn(p.len(), g.len(), |i, j| {
        let d = p[i].distance(&g[j]);
        if d < gate {
            d
        } else {
            f64::INFINITY
        }
    });
    let mut matches = Vec::new();
    let mut pred_used = vec![false; p.len()];
    let mut gt_used = vec![false; g.len()];
    for (i, j) in hungarian_gated(&cost, f64::MAX) {
        let d = cost[(i, j)];
        if d < gate {
            matches.push((i, j, d));
            pred_used[i] = true;
            gt_used[j] = true;
        }
    }
    matches.sort_by_key(|m| (m.0, m.1));
    MatchResult {
        matches,
        false_positives: (0..p.len()).filter(|&i| !pred_used[i]).collect(),
        false_negatives: (0..g.len()).filter(|&j| !gt_used[j]).collect(),
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn report_from(m: &MatchResult, gate: f64, pct_within_half_pd: f64) -> EvalReport {
    let tp = m.matches.len();
    let fp = m.false_positives.len();
    let fn_ = m.false_negatives.len();
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let mean_tp_error = if tp == 0 {
        0.0
    } else {
        m.matches.iter().map(|x| x.2).sum::<f64>() / tp as f64
    };
    EvalReport {
        tp,
        fp,
        fn_,
        precision,
        recall,
        f1,
        mean_tp_error,
        pct_within_half_pd,
        gate,
    }
}

/// Full metric suite at `gate`; the within-PD/2 percentage comes from a
/// separate matching at `planting_distance / 2`.
pub fn evaluate(pred: &TreeMap, gt: &TreeMap, gate: f64, planting_distance: f64) -> EvalReport {
    let half = match_maps(pred, gt, planting_distance / 2.0);
    let within = ratio(half.matches.len(), gt.len());
    report_from(&match_maps(pred, gt, gate), gate, within)
}

pub fn sweep_thresholds(pred: &TreeMap, gt: &TreeMap, gates: &[f64], planting_distance: f64) -> Vec<EvalReport> {
    debug_assert!(gates.windows(2).all(|w| w[0] <= w[1]), "gates must be ascending");
    let half = match_maps(pred, gt, planting_distance / 2.0);
    let within = ratio(half.matches.len(), gt.len());
    gates
        .iter()
        .map(|&g| report_from(&match_maps(pred, gt, g), g, within))
        .collect()
}

/// `n` evenly spaced gates from `lo` to `hi` inclusive.
pub fn gate_range(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect(),
    }
}

pub const BASELINE_EPS: f64 = 0.5;
pub const BASELINE_MIN_SAMPLES: usize = 5;

/// Clusters every accumulated detection position and reports one tree per
/// cluster at its centroid. Noise points are dropped.
pub fn baseline_map(detections: &[Point2], eps: f64, min_samples: usize) -> TreeMap {
    let labels = dbscan(detections, eps, min_samples);
    let n_clusters = labels
        .iter()
        .filter_map(ClusterLabel::cluster)
        .max()
        .map_or(0, |m| m + 1);
    let mut sums = vec![(0.0, 0.0, 0usize); n_clusters];
    for (p, l) in detections.iter().zip(&labels) {
        if let Some(c) = l.cluster() {
            sums[c].0 += p.x;
            sums[c].1 += p.y;
            sums[c].2 += 1;
        }
    }
    TreeMap::from_points(
        "world",
        sums.into_iter()
            .map(|(x, y, n)| Point2::new(x / n as f64, y / n as f64)),
    )
}
