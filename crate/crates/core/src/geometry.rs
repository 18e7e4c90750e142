//! Planar rigid-body math.
//!
//! Headings are a single wrapped scalar in `(-π, π]`. Every operation that
//! produces a heading re-normalizes it.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("non-finite value: {0}")]
    NonFinite(f64),
    #[error("degenerate geometry: point coincides with pose position")]
    Coincident,
}

/// Wraps an angle into `(-π, π]`.
pub fn normalize_angle(a: f64) -> Result<f64, GeometryError> {
    if !a.is_finite() {
        return Err(GeometryError::NonFinite(a));
    }
    Ok(wrap(a))
}

/// Infallible wrap for values already known to be finite.
#[inline]
pub(crate) fn wrap(a: f64) -> f64 {
    let mut r = a.rem_euclid(TAU);
    if r > PI {
        r -= TAU;
    }
    // rem_euclid maps -π to π already; guard against r == -π from rounding
    if r <= -PI {
        r += TAU;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// Robot pose on the ground plane: east, north, heading.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

/// Relative motion expressed in the source pose's frame (forward, left, turn).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2Delta {
    pub dx: f64,
    pub dy: f64,
    pub dtheta: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap(theta),
        }
    }

    pub fn position(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }

    /// Applies `d` in this pose's frame.
    pub fn compose(&self, d: &Pose2Delta) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(
            self.x + c * d.dx - s * d.dy,
            self.y + s * d.dx + c * d.dy,
            self.theta + d.dtheta,
        )
    }

    /// `other` expressed relative to `self`.
    pub fn between(&self, other: &Pose2) -> Pose2Delta {
        let (s, c) = self.theta.sin_cos();
        let ex = other.x - self.x;
        let ey = other.y - self.y;
        Pose2Delta::new(c * ex + s * ey, -s * ex + c * ey, other.theta - self.theta)
    }

    /// Maps a point from this pose's body frame into the world frame.
    pub fn transform_point(&self, p: &Point2) -> Point2 {
        let (s, c) = self.theta.sin_cos();
        Point2::new(self.x + c * p.x - s * p.y, self.y + s * p.x + c * p.y)
    }

    /// Maps a world point into this pose's body frame.
    pub fn inverse_transform_point(&self, p: &Point2) -> Point2 {
        let (s, c) = self.theta.sin_cos();
        let (ex, ey) = (p.x - self.x, p.y - self.y);
        Point2::new(c * ex + s * ey, -s * ex + c * ey)
    }

    /// World point of a range-bearing measurement taken from this pose.
    pub fn project_range_bearing(&self, range: f64, bearing: f64) -> Point2 {
        let a = self.theta + bearing;
        Point2::new(self.x + range * a.cos(), self.y + range * a.sin())
    }

    /// Range and bearing (relative to heading) from this pose to `l`.
    pub fn range_bearing(&self, l: &Point2) -> Result<(f64, f64), GeometryError> {
        range_bearing(self, l)
    }
}

impl Pose2Delta {
    pub fn new(dx: f64, dy: f64, dtheta: f64) -> Self {
        Self {
            dx,
            dy,
            dtheta: wrap(dtheta),
        }
    }

    pub fn identity() -> Self {
        Self::default()
    }
}

pub fn pose_compose(a: &Pose2, d: &Pose2Delta) -> Pose2 {
    a.compose(d)
}

pub fn pose_between(a: &Pose2, b: &Pose2) -> Pose2Delta {
    a.between(b)
}

/// Minimum separation below which a range-bearing measurement is undefined.
pub const MIN_RANGE: f64 = 1e-9;

pub fn range_bearing(p: &Pose2, l: &Point2) -> Result<(f64, f64), GeometryError> {
    let dx = l.x - p.x;
    let dy = l.y - p.y;
    let r = dx.hypot(dy);
    if !r.is_finite() {
        return Err(GeometryError::NonFinite(r));
    }
    if r <= MIN_RANGE {
        return Err(GeometryError::Coincident);
    }
    Ok((r, wrap(dy.atan2(dx) - p.theta)))
}
