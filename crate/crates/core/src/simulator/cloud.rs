//! Surface points of a vertical cylinder as a depth camera would return them.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::CameraModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CloudConfig {
    pub points: usize,
    /// Noise along each pixel ray (m).
    pub depth_sigma: f64,
    /// Height band of the sampled trunk section above the ground (m).
    pub min_height: f64,
    pub max_height: f64,
}

impl Default for CloudConfig {
    fn default() -> Self {
        Self {
            points: 500,
            depth_sigma: 0.003,
            min_height: 0.2,
            max_height: 0.8,
        }
    }
}

/// Samples the camera-facing half of a vertical cylinder whose axis passes
/// through `(center_x, center_z)` in the camera's horizontal plane.
///
/// Points are uniform over image columns spanned by the silhouette and over
/// the height band, which is how a pixel grid samples the surface. Each point
/// is pushed along its ray by Gaussian depth noise. Returns camera-frame
/// points (x right, y down, z forward); empty if the camera is inside the
/// cylinder.
pub fn sample_cylinder_cloud<R: Rng + ?Sized>(
    rng: &mut R,
    center_x: f64,
    center_z: f64,
    radius: f64,
    camera: &CameraModel,
    cfg: &CloudConfig,
) -> Vec<Vector3<f64>> {
    let d2 = center_x * center_x + center_z * center_z;
    let d = d2.sqrt();
    if d <= radius || center_z <= 0.0 {
        return Vec::new();
    }
    let alpha = center_x.atan2(center_z);
    let half = (radius / d).asin();
    let (lo, hi) = ((alpha - half).tan(), (alpha + half).tan());
    let noise = Normal::new(0.0, cfg.depth_sigma.max(0.0)).expect("finite sigma");
    let mut out = Vec::with_capacity(cfg.points);
    while out.len() < cfg.points {
        // uniform in tan(angle) is uniform in pixel column
        let t = lo + (hi - lo) * rng.random::<f64>();
        let dir_len = (1.0 + t * t).sqrt();
        let (dx, dz) = (t / dir_len, 1.0 / dir_len);
        let along = dx * center_x + dz * center_z;
        let disc = radius * radius - (d2 - along * along);
        let height = cfg.min_height + (cfg.max_height - cfg.min_height) * rng.random::<f64>();
        if disc < 0.0 {
            // silhouette edge rounding
            continue;
        }
        let s = along - disc.sqrt();
        let p = Vector3::new(s * dx, camera.mount_height - height, s * dz);
        let scale = 1.0 + noise.sample(rng) / p.norm();
        out.push(p * scale);
    }
    out
}
