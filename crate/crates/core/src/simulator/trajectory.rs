//! Robot paths around a single row, built from straight and circular pieces
//! and sampled at a fixed arc-length step.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use super::{OrchardConfig, SimError};
use crate::geometry::{wrap, Point2, Pose2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PathKind {
    /// Start part-way along one side, drive to the far end, turn, and drive
    /// the whole other side.
    UShape,
    /// Both sides and both ends, closing at the start.
    FullLoop,
    /// One pass along one side.
    Straight,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    pub path: PathKind,
    /// Distance from the row line to the robot on straight segments (m).
    pub lateral_offset: f64,
    /// Arc length travelled per frame (m).
    pub speed: f64,
    /// Radius of the two quarter arcs of an end turn (m), at most the offset.
    pub turn_radius: f64,
    /// Where along the row (0 first tree, 1 last tree) the U-shape starts.
    pub start_fraction: f64,
    /// Distance driven past the first/last tree before turning (m).
    pub end_margin: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            path: PathKind::UShape,
            lateral_offset: 1.5,
            speed: 0.25,
            turn_radius: 1.5,
            start_fraction: 0.5,
            end_margin: 1.0,
        }
    }
}

impl TrajectoryConfig {
    pub fn validate(&self, orchard: &OrchardConfig) -> Result<(), SimError> {
        let bad = |field: &str, msg: String| {
            Err(SimError::Config {
                field: format!("trajectory.{field}"),
                msg,
            })
        };
        if !(self.lateral_offset > orchard.trunk_radius) {
            return bad(
                "lateral_offset",
                format!("must exceed trunk_radius {}", orchard.trunk_radius),
            );
        }
        if !(self.speed > 0.0) || !self.speed.is_finite() {
            return bad("speed", "must be positive".into());
        }
        if !(self.turn_radius > 0.0) || self.turn_radius > self.lateral_offset {
            return bad("turn_radius", "must be in (0, lateral_offset]".into());
        }
        if !(0.0..=1.0).contains(&self.start_fraction) {
            return bad("start_fraction", "must be in [0, 1]".into());
        }
        if !(self.end_margin >= 0.0) || !self.end_margin.is_finite() {
            return bad("end_margin", "must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Segment {
    Line {
        start: Point2,
        heading: f64,
        length: f64,
    },
    /// Counter-clockwise when `sweep > 0`.
    Arc {
        center: Point2,
        radius: f64,
        start_angle: f64,
        sweep: f64,
    },
}

impl Segment {
    fn length(&self) -> f64 {
        match *self {
            Segment::Line { length, .. } => length,
            Segment::Arc { radius, sweep, .. } => radius * sweep.abs(),
        }
    }

    fn at(&self, s: f64) -> Pose2 {
        match *self {
            Segment::Line { start, heading, .. } => {
                Pose2::new(start.x + s * heading.cos(), start.y + s * heading.sin(), heading)
            }
            Segment::Arc {
                center,
                radius,
                start_angle,
                sweep,
            } => {
                let a = start_angle + sweep.signum() * s / radius;
                let heading = a + sweep.signum() * FRAC_PI_2;
                Pose2::new(center.x + radius * a.cos(), center.y + radius * a.sin(), wrap(heading))
            }
        }
    }
}

/// Clockwise end turn from `(x, from_y)` heading `h` to `(x, -from_y)`
/// heading `h + π`, made of two quarter arcs joined by a straight piece.
/// `dir` is +1 at the far end (moving +x) and -1 at the near end.
fn end_turn(x: f64, offset: f64, radius: f64, dir: f64) -> Vec<Segment> {
    let side = dir; // the robot is on the +y side at the far end, -y at the near end
    let first_center = Point2::new(x, side * (offset - radius));
    let a0 = side * FRAC_PI_2;
    let mut out = vec![Segment::Arc {
        center: first_center,
        radius,
        start_angle: a0,
        sweep: -FRAC_PI_2,
    }];
    let mid_start = Point2::new(x + dir * radius, side * (offset - radius));
    let mid_len = 2.0 * (offset - radius);
    if mid_len > 0.0 {
        out.push(Segment::Line {
            start: mid_start,
            heading: -side * FRAC_PI_2,
            length: mid_len,
        });
    }
    let second_center = Point2::new(x, -side * (offset - radius));
    out.push(Segment::Arc {
        center: second_center,
        radius,
        start_angle: a0 - FRAC_PI_2,
        sweep: -FRAC_PI_2,
    });
    out
}

fn segments(orchard: &OrchardConfig, cfg: &TrajectoryConfig) -> Vec<Segment> {
    let row_len = orchard.row_length();
    let off = cfg.lateral_offset;
    let far = row_len + cfg.end_margin;
    let near = -cfg.end_margin;
    let start_x = cfg.start_fraction * row_len;
    let r = cfg.turn_radius;
    let mut out = Vec::new();
    match cfg.path {
        PathKind::Straight => {
            out.push(Segment::Line {
                start: Point2::new(near, off),
                heading: 0.0,
                length: far - near,
            });
        }
        PathKind::UShape | PathKind::FullLoop => {
            out.push(Segment::Line {
                start: Point2::new(start_x, off),
                heading: 0.0,
                length: far - start_x,
            });
            out.extend(end_turn(far, off, r, 1.0));
            out.push(Segment::Line {
                start: Point2::new(far, -off),
                heading: PI,
                length: far - near,
            });
            if cfg.path == PathKind::FullLoop {
                out.extend(end_turn(near, off, r, -1.0));
                out.push(Segment::Line {
                    start: Point2::new(near, off),
                    heading: 0.0,
                    length: start_x - near,
                });
            }
        }
    }
    out
}

/// True robot poses in the world frame, one per frame.
pub fn generate_trajectory(orchard: &OrchardConfig, cfg: &TrajectoryConfig) -> Result<Vec<Pose2>, SimError> {
    orchard.validate()?;
    cfg.validate(orchard)?;
    let segs = segments(orchard, cfg);
    let total: f64 = segs.iter().map(Segment::length).sum();
    let n = (total / cfg.speed).floor() as usize + 1;
    let to_world = Pose2::new(orchard.row_origin.x, orchard.row_origin.y, orchard.row_heading);
    let mut poses = Vec::with_capacity(n);
    let mut seg = 0;
    let mut seg_start = 0.0;
    for k in 0..n {
        let s = k as f64 * cfg.speed;
        while seg + 1 < segs.len() && s > seg_start + segs[seg].length() {
            seg_start += segs[seg].length();
            seg += 1;
        }
        let local = segs[seg].at((s - seg_start).min(segs[seg].length()));
        let p = to_world.transform_point(&local.position());
        poses.push(Pose2::new(p.x, p.y, local.theta + orchard.row_heading));
    }
    Ok(poses)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn orchard(n: usize) -> OrchardConfig {
        OrchardConfig {
            n_trees: n,
            ..OrchardConfig::default()
        }
    }

    #[test]
    fn full_loop_closes() {
        let o = orchard(20);
        let cfg = TrajectoryConfig {
            path: PathKind::FullLoop,
            ..TrajectoryConfig::default()
        };
        let p = generate_trajectory(&o, &cfg).unwrap();
        let (a, b) = (p[0], *p.last().unwrap());
        assert!(a.position().distance(&b.position()) <= 2.0 * cfg.speed);
    }

    #[test]
    fn u_shape_reverses_heading() {
        let o = orchard(20);
        let cfg = TrajectoryConfig::default();
        let p = generate_trajectory(&o, &cfg).unwrap();
        assert!(wrap(p.last().unwrap().theta - p[0].theta).abs() > PI - 1e-9);
        // first and last pose on opposite sides of the row
        assert!(p[0].y > 0.0 && p.last().unwrap().y < 0.0);
    }

    #[test]
    fn straight_segments_keep_offset() {
        for path in [PathKind::UShape, PathKind::FullLoop, PathKind::Straight] {
            for (r, off) in [(1.5, 1.5), (0.8, 1.5), (1.0, 2.0)] {
                let o = OrchardConfig {
                    n_trees: 15,
                    row_heading: 0.4,
                    row_origin: Point2::new(3.0, -2.0),
                    ..OrchardConfig::default()
                };
                let cfg = TrajectoryConfig {
                    path,
                    turn_radius: r,
                    lateral_offset: off,
                    ..TrajectoryConfig::default()
                };
                let p = generate_trajectory(&o, &cfg).unwrap();
                let (s, c) = o.row_heading.sin_cos();
                for q in &p {
                    let along = c * (q.x - 3.0) + s * (q.y + 2.0);
                    let across = -s * (q.x - 3.0) + c * (q.y + 2.0);
                    if along >= -cfg.end_margin + 1e-9 && along <= o.row_length() + cfg.end_margin - 1e-9 {
                        assert!(across.abs() >= off - 1e-6, "{path:?} {q:?}");
                    }
                    // never crosses the row within the tree span
                    assert!(across.abs() >= off - 1e-6 || along < 0.0 || along > o.row_length());
                }
                // constant spacing: consecutive samples one speed apart along the path
                for w in p.windows(2) {
                    assert!(w[0].position().distance(&w[1].position()) <= cfg.speed + 1e-9);
                }
            }
        }
    }

    #[test]
    fn heading_is_tangent() {
        let o = orchard(10);
        let cfg = TrajectoryConfig {
            turn_radius: 1.0,
            ..TrajectoryConfig::default()
        };
        let p = generate_trajectory(&o, &cfg).unwrap();
        for w in p.windows(2) {
            let d = (w[1].y - w[0].y).atan2(w[1].x - w[0].x);
            // chord direction lies between the two tangents
            let turn = wrap(w[1].theta - w[0].theta);
            let mid = w[0].theta + 0.5 * turn;
            assert!(wrap(d - mid).abs() <= 0.5 * turn.abs() + 1e-9, "{w:?}");
        }
    }

    #[test]
    fn rejects_bad_config() {
        let o = orchard(10);
        let cfg = TrajectoryConfig {
            turn_radius: 2.0,
            lateral_offset: 1.5,
            ..TrajectoryConfig::default()
        };
        assert!(generate_trajectory(&o, &cfg).is_err());
        let cfg = TrajectoryConfig {
            lateral_offset: 0.01,
            turn_radius: 0.01,
            ..TrajectoryConfig::default()
        };
        assert!(generate_trajectory(&o, &cfg).is_err());
    }
}
