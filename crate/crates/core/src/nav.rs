//! GPS/odometry extended Kalman filter.
//!
//! This is the localization a detection-clustering map relies on: wheel
//! odometry for prediction, GPS position fixes for correction, no landmarks.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::{wrap, Point2, Pose2, Pose2Delta};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NavConfig {
    /// Per-step odometry sigmas (forward m, lateral m, heading rad).
    pub odom_sigma: [f64; 3],
    /// Used when a fix carries no sigma of its own.
    pub gps_sigma: f64,
    pub initial_heading: f64,
    pub initial_heading_sigma: f64,
    /// Position sigma when the first frame has no fix.
    pub initial_position_sigma: f64,
}

impl Default for NavConfig {
    fn default() -> Self {
        Self {
            odom_sigma: [0.02, 0.02, 0.01],
            gps_sigma: 0.30,
            initial_heading: 0.0,
            initial_heading_sigma: 0.05,
            initial_position_sigma: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NavFilter {
    cfg: NavConfig,
    pose: Pose2,
    cov: Matrix3<f64>,
    started: bool,
}

impl NavFilter {
    pub fn new(cfg: NavConfig) -> Self {
        Self {
            cfg,
            pose: Pose2::new(0.0, 0.0, cfg.initial_heading),
            cov: Matrix3::zeros(),
            started: false,
        }
    }

    pub fn pose(&self) -> Pose2 {
        self.pose
    }

    pub fn covariance(&self) -> &Matrix3<f64> {
        &self.cov
    }

    /// Processes one frame: the first call initializes from the fix (or the
    /// origin), later calls predict with `odom` then correct with `gps`.
    pub fn step(&mut self, odom: &Pose2Delta, gps: Option<(Point2, Option<f64>)>) -> Pose2 {
        if !self.started {
            self.started = true;
            let (p, s) = match gps {
                Some((p, s)) => (p, s.unwrap_or(self.cfg.gps_sigma)),
                None => (Point2::new(0.0, 0.0), self.cfg.initial_position_sigma),
            };
            self.pose = Pose2::new(p.x, p.y, self.cfg.initial_heading);
            self.cov = Matrix3::from_diagonal(&Vector3::new(s * s, s * s, self.cfg.initial_heading_sigma.powi(2)));
            return self.pose;
        }
        self.predict(odom);
        if let Some((p, s)) = gps {
            self.correct(p, s.unwrap_or(self.cfg.gps_sigma));
        }
        self.pose
    }

    pub fn predict(&mut self, d: &Pose2Delta) {
        let (s, c) = self.pose.theta.sin_cos();
        let f = Matrix3::new(
            1.0,
            0.0,
            -s * d.dx - c * d.dy,
            0.0,
            1.0,
            c * d.dx - s * d.dy,
            0.0,
            0.0,
            1.0,
        );
        let g = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        let [sx, sy, st] = self.cfg.odom_sigma;
        let q = Matrix3::from_diagonal(&Vector3::new(sx * sx, sy * sy, st * st));
        self.pose = self.pose.compose(d);
        self.cov = f * self.cov * f.transpose() + g * q * g.transpose();
    }

    pub fn correct(&mut self, z: Point2, sigma: f64) {
        let h = Matrix2x3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0);
        let s = h * self.cov * h.transpose() + Matrix2::identity() * (sigma * sigma);
        let Some(s_inv) = s.try_inverse() else { return };
        let k = self.cov * h.transpose() * s_inv;
        let y = Vector2::new(z.x - self.pose.x, z.y - self.pose.y);
        let dx = k * y;
        self.pose = Pose2::new(self.pose.x + dx.x, self.pose.y + dx.y, wrap(self.pose.theta + dx.z));
        // Joseph form keeps the covariance symmetric positive semi-definite
        let i_kh = Matrix3::identity() - k * h;
        self.cov = i_kh * self.cov * i_kh.transpose() + k * (sigma * sigma) * k.transpose();
    }
}
