//! Pose/landmark factor graph.
//!
//! Variables are robot poses (`x, y, θ`) and tree landmarks (`x, y`). The
//! graph keeps two sets of values: the value each variable was given when it
//! was inserted (`initial`) and the latest solution (`estimate`). A batch
//! solve starts from `initial`, an incremental solve from `estimate`.

mod factor;
mod solver;
mod sparse;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, Matrix3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Point2, Pose2, Pose2Delta};

pub use factor::{factor_jacobian, factor_residual, Factor, FactorKind, NoiseModel};
pub use solver::{LmParams, SolveReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VariableKind {
    Pose,
    Landmark,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VariableKey {
    pub kind: VariableKind,
    pub index: u64,
}

impl VariableKey {
    pub const fn pose(index: u64) -> Self {
        Self {
            kind: VariableKind::Pose,
            index,
        }
    }

    pub const fn landmark(index: u64) -> Self {
        Self {
            kind: VariableKind::Landmark,
            index,
        }
    }

    /// Degrees of freedom of the variable.
    pub fn dof(&self) -> usize {
        match self.kind {
            VariableKind::Pose => 3,
            VariableKind::Landmark => 2,
        }
    }
}

impl std::fmt::Display for VariableKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.kind {
            VariableKind::Pose => write!(f, "x{}", self.index),
            VariableKind::Landmark => write!(f, "l{}", self.index),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Variable {
    Pose(Pose2),
    Landmark(Point2),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("unknown variable {0}")]
    MissingKey(VariableKey),
    #[error("variable {0} has the wrong kind for this factor")]
    WrongKind(VariableKey),
    #[error("degenerate geometry at {0}")]
    Degenerate(VariableKey),
    #[error("invalid noise model: {0}")]
    InvalidNoise(String),
    #[error("invalid measurement: {0}")]
    InvalidMeasurement(String),
    #[error("{kind:?} factor needs {} keys, got {got}", kind.arity())]
    Arity { kind: FactorKind, got: usize },
    #[error("factor connects {0} to itself")]
    IdenticalKeys(VariableKey),
    #[error("graph has no prior or GPS factor to fix the gauge")]
    NoGauge,
    #[error("graph is not initialized")]
    NotInitialized,
    #[error("normal equations are not positive definite")]
    NumericalFailure,
}

/// Pose and landmark values keyed by index.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Values {
    pub poses: BTreeMap<u64, Pose2>,
    pub landmarks: BTreeMap<u64, Point2>,
}

impl Values {
    pub fn get(&self, k: VariableKey) -> Option<Variable> {
        match k.kind {
            VariableKind::Pose => self.poses.get(&k.index).copied().map(Variable::Pose),
            VariableKind::Landmark => self.landmarks.get(&k.index).copied().map(Variable::Landmark),
        }
    }

    pub fn contains(&self, k: VariableKey) -> bool {
        match k.kind {
            VariableKind::Pose => self.poses.contains_key(&k.index),
            VariableKind::Landmark => self.landmarks.contains_key(&k.index),
        }
    }

    pub fn insert_pose(&mut self, index: u64, p: Pose2) {
        self.poses.insert(index, p);
    }

    pub fn insert_landmark(&mut self, index: u64, p: Point2) {
        self.landmarks.insert(index, p);
    }

    pub fn pose(&self, index: u64) -> Option<Pose2> {
        self.poses.get(&index).copied()
    }

    pub fn landmark(&self, index: u64) -> Option<Point2> {
        self.landmarks.get(&index).copied()
    }

    pub fn len(&self) -> usize {
        self.poses.len() + self.landmarks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn keys(&self) -> impl Iterator<Item = VariableKey> + '_ {
        self.poses
            .keys()
            .map(|&i| VariableKey::pose(i))
            .chain(self.landmarks.keys().map(|&i| VariableKey::landmark(i)))
    }

    /// Largest per-variable difference: (position metres, heading radians).
    pub fn max_difference(&self, other: &Values) -> (f64, f64) {
        let mut pos: f64 = 0.0;
        let mut ang: f64 = 0.0;
        for (i, p) in &self.poses {
            if let Some(q) = other.poses.get(i) {
                pos = pos.max(p.position().distance(&q.position()));
                ang = ang.max(crate::geometry::wrap(p.theta - q.theta).abs());
            } else {
                pos = f64::INFINITY;
            }
        }
        for (i, l) in &self.landmarks {
            match other.landmarks.get(i) {
                Some(m) => pos = pos.max(l.distance(m)),
                None => pos = f64::INFINITY,
            }
        }
        if other.len() != self.len() {
            pos = f64::INFINITY;
        }
        (pos, ang)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SolveMode {
    /// Levenberg-Marquardt from the insertion-time values.
    Batch,
    /// Levenberg-Marquardt warm-started from the previous estimate.
    Incremental,
}

#[derive(Debug, Clone, Default)]
pub struct FactorGraph {
    factors: Vec<Factor>,
    initial: Values,
    estimate: Values,
    last_pose: Option<u64>,
    params: LmParams,
    huber: Option<f64>,
}

impl FactorGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_params(params: LmParams) -> Self {
        Self {
            params,
            ..Self::default()
        }
    }

    /// Enables a Huber loss on the whitened residual norm with threshold `k`.
    pub fn set_huber(&mut self, k: Option<f64>) {
        self.huber = k.filter(|k| *k > 0.0);
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn estimate(&self) -> &Values {
        &self.estimate
    }

    pub fn initial(&self) -> &Values {
        &self.initial
    }

    pub fn last_pose(&self) -> Option<VariableKey> {
        self.last_pose.map(VariableKey::pose)
    }

    pub fn num_factors(&self, kind: FactorKind) -> usize {
        self.factors.iter().filter(|f| f.kind == kind).count()
    }

    fn insert_variable(&mut self, k: VariableKey, v: Variable) {
        match v {
            Variable::Pose(p) => {
                self.initial.insert_pose(k.index, p);
                self.estimate.insert_pose(k.index, p);
            }
            Variable::Landmark(l) => {
                self.initial.insert_landmark(k.index, l);
                self.estimate.insert_landmark(k.index, l);
            }
        }
    }

    /// Adds a factor whose keys already exist.
    pub fn add_factor(&mut self, f: Factor) -> Result<(), GraphError> {
        for &k in &f.keys {
            if !self.estimate.contains(k) {
                return Err(GraphError::MissingKey(k));
            }
        }
        self.factors.push(f);
        Ok(())
    }

    /// Creates pose 0 at `pose` and anchors it with a full-pose prior.
    pub fn initialize(&mut self, pose: Pose2, cov: &Matrix3<f64>) -> Result<VariableKey, GraphError> {
        if !pose.is_finite() {
            return Err(GraphError::InvalidMeasurement("non-finite initial pose".into()));
        }
        let k = VariableKey::pose(0);
        let noise = NoiseModel::from_covariance(&DMatrix::from_iterator(3, 3, cov.iter().copied()))?;
        let f = Factor::new(FactorKind::Prior, vec![k], vec![pose.x, pose.y, pose.theta], noise)?;
        self.factors.clear();
        self.initial = Values::default();
        self.estimate = Values::default();
        self.insert_variable(k, Variable::Pose(pose));
        self.factors.push(f);
        self.last_pose = Some(0);
        Ok(k)
    }

    /// Appends the next pose, initialized by composing `delta` onto the latest
    /// estimate of the previous pose, and links it with an odometry factor.
    pub fn add_pose(&mut self, delta: Pose2Delta, cov: &Matrix3<f64>) -> Result<VariableKey, GraphError> {
        let prev = self.last_pose.ok_or(GraphError::NotInitialized)?;
        let noise = NoiseModel::from_covariance(&DMatrix::from_iterator(3, 3, cov.iter().copied()))?;
        let a = VariableKey::pose(prev);
        let b = VariableKey::pose(prev + 1);
        let f = Factor::new(
            FactorKind::Odometry,
            vec![a, b],
            vec![delta.dx, delta.dy, delta.dtheta],
            noise,
        )?;
        let start = self.estimate.pose(prev).expect("last pose present");
        self.insert_variable(b, Variable::Pose(start.compose(&delta)));
        self.factors.push(f);
        self.last_pose = Some(prev + 1);
        Ok(b)
    }

    /// Absolute position fix, optionally with a heading and its sigma.
    pub fn add_gps(
        &mut self,
        pose: VariableKey,
        position: Point2,
        sigma: f64,
        heading: Option<(f64, f64)>,
    ) -> Result<(), GraphError> {
        if pose.kind != VariableKind::Pose {
            return Err(GraphError::WrongKind(pose));
        }
        let (z, noise) = match heading {
            None => (
                vec![position.x, position.y],
                NoiseModel::diagonal_sigmas(&[sigma, sigma])?,
            ),
            Some((h, hs)) => (
                vec![position.x, position.y, h],
                NoiseModel::diagonal_sigmas(&[sigma, sigma, hs])?,
            ),
        };
        self.add_factor(Factor::new(FactorKind::Gps, vec![pose], z, noise)?)
    }

    /// Range-bearing observation. A landmark seen for the first time is
    /// initialized by projecting the measurement from the pose estimate.
    pub fn add_observation(
        &mut self,
        pose: VariableKey,
        landmark: VariableKey,
        range: f64,
        bearing: f64,
        sigma_range: f64,
        sigma_bearing: f64,
    ) -> Result<(), GraphError> {
        if !(range > 0.0) || !bearing.is_finite() {
            return Err(GraphError::InvalidMeasurement(format!(
                "range {range}, bearing {bearing}"
            )));
        }
        if landmark.kind != VariableKind::Landmark {
            return Err(GraphError::WrongKind(landmark));
        }
        let p = self.estimate.pose(pose.index).ok_or(GraphError::MissingKey(pose))?;
        let noise = NoiseModel::diagonal_sigmas(&[sigma_range, sigma_bearing])?;
        let f = Factor::new(
            FactorKind::RangeBearing,
            vec![pose, landmark],
            vec![range, bearing],
            noise,
        )?;
        if !self.estimate.contains(landmark) {
            self.insert_variable(landmark, Variable::Landmark(p.project_range_bearing(range, bearing)));
        }
        self.factors.push(f);
        Ok(())
    }

    pub fn add_inter_distance(
        &mut self,
        a: VariableKey,
        b: VariableKey,
        distance: f64,
        sigma: f64,
    ) -> Result<(), GraphError> {
        if a == b {
            return Err(GraphError::IdenticalKeys(a));
        }
        if !(distance >= 0.0) {
            return Err(GraphError::InvalidMeasurement(format!("distance {distance}")));
        }
        let noise = NoiseModel::diagonal_sigmas(&[sigma])?;
        self.add_factor(Factor::new(
            FactorKind::InterDistance,
            vec![a, b],
            vec![distance],
            noise,
        )?)
    }

    /// Drops every factor of `kind`.
    pub fn remove_factors(&mut self, kind: FactorKind) {
        self.factors.retain(|f| f.kind != kind);
    }

    /// Sum of squared whitened residuals (no robust loss) at `v`.
    pub fn cost(&self, v: &Values) -> Result<f64, GraphError> {
        self.factors.iter().map(|f| f.cost(v)).sum()
    }

    pub fn optimize(&mut self, mode: SolveMode) -> Result<SolveReport, GraphError> {
        if !self
            .factors
            .iter()
            .any(|f| matches!(f.kind, FactorKind::Prior | FactorKind::Gps))
        {
            return Err(GraphError::NoGauge);
        }
        let start = match mode {
            SolveMode::Batch => &self.initial,
            SolveMode::Incremental => &self.estimate,
        };
        let report = solver::levenberg_marquardt(&self.factors, start, &self.params, self.huber)?;
        self.estimate = report.estimates.clone();
        Ok(report)
    }

    /// Solves from the insertion-time values without touching the graph.
    pub fn solve_from_initial(&self) -> Result<SolveReport, GraphError> {
        solver::levenberg_marquardt(&self.factors, &self.initial, &self.params, self.huber)
    }

    pub fn snapshot(&self) -> GraphSnapshot {
        let mut variables = Vec::new();
        for k in self.estimate.keys() {
            variables.push(VariableEntry {
                key: k,
                initial: self.initial.get(k).expect("initial value"),
                estimate: self.estimate.get(k).expect("estimate"),
            });
        }
        let factors = self
            .factors
            .iter()
            .map(|f| {
                let c = f.noise.covariance();
                FactorEntry {
                    kind: f.kind,
                    keys: f.keys.clone(),
                    measurement: f.measurement.clone(),
                    covariance: c.row_iter().map(|r| r.iter().copied().collect()).collect(),
                }
            })
            .collect();
        GraphSnapshot { variables, factors }
    }

    pub fn from_snapshot(s: &GraphSnapshot) -> Result<Self, GraphError> {
        let mut g = FactorGraph::new();
        for v in &s.variables {
            match (v.key.kind, v.initial, v.estimate) {
                (VariableKind::Pose, Variable::Pose(a), Variable::Pose(b)) => {
                    g.initial.insert_pose(v.key.index, a);
                    g.estimate.insert_pose(v.key.index, b);
                    g.last_pose = Some(g.last_pose.map_or(v.key.index, |p| p.max(v.key.index)));
                }
                (VariableKind::Landmark, Variable::Landmark(a), Variable::Landmark(b)) => {
                    g.initial.insert_landmark(v.key.index, a);
                    g.estimate.insert_landmark(v.key.index, b);
                }
                _ => return Err(GraphError::WrongKind(v.key)),
            }
        }
        for f in &s.factors {
            let n = f.covariance.len();
            if f.covariance.iter().any(|r| r.len() != n) {
                return Err(GraphError::InvalidNoise("covariance rows differ in length".into()));
            }
            let cov = DMatrix::from_fn(n, n, |i, j| f.covariance[i][j]);
            let noise = NoiseModel::from_covariance(&cov)?;
            g.add_factor(Factor::new(f.kind, f.keys.clone(), f.measurement.clone(), noise)?)?;
        }
        Ok(g)
    }
}

/// JSON form of a graph: every variable with its initial and current value,
/// and every factor with its keys, measurement and covariance (row-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSnapshot {
    pub variables: Vec<VariableEntry>,
    pub factors: Vec<FactorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableEntry {
    pub key: VariableKey,
    pub initial: Variable,
    pub estimate: Variable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorEntry {
    pub kind: FactorKind,
    pub keys: Vec<VariableKey>,
    pub measurement: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}
