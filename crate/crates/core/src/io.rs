//! File formats.
//!
//! Frame log: JSON Lines, one object per frame:
//!
//! ```text
//! {"frame":0,"odom":{"dx":0,"dy":0,"dtheta":0},"gps":{"x":1.0,"y":2.0,"sigma":0.3},
//!  "detections":[{"bbox":[x0,y0,x1,y1],"conf":0.8,"range":1.6,"bearing":-1.5}]}
//! ```
//!
//! `gps` may be `null` and `sigma` may be omitted. A detection may carry
//! `world` (`[x, y]`, the position a GPS/odometry-only localizer assigns it)
//! and `cloud` (camera-frame trunk points `[[x, y, z], ...]`). Frame numbers
//! must strictly increase.
//!
//! Tree maps are CSV with header `id,x,y`; trajectories `frame,x,y,theta`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{EvalReport, Tree, TreeMap};
use crate::geometry::{Point2, Pose2, Pose2Delta};
use crate::perception::BBox;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("frame {frame}: {msg}")]
    Schema { frame: u64, msg: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdomRecord {
    pub dx: f64,
    pub dy: f64,
    pub dtheta: f64,
}

impl From<OdomRecord> for Pose2Delta {
    fn from(o: OdomRecord) -> Self {
        Pose2Delta::new(o.dx, o.dy, o.dtheta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpsRecord {
    pub x: f64,
    pub y: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub bbox: [f64; 4],
    pub conf: f64,
    pub range: f64,
    pub bearing: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub world: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cloud: Option<Vec<[f64; 3]>>,
}

impl DetectionRecord {
    pub fn bbox(&self) -> BBox {
        BBox::new(self.bbox[0], self.bbox[1], self.bbox[2], self.bbox[3])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub frame: u64,
    pub odom: OdomRecord,
    pub gps: Option<GpsRecord>,
    pub detections: Vec<DetectionRecord>,
}

impl FrameRecord {
    pub fn validate(&self) -> Result<(), String> {
        let finite = |v: f64| v.is_finite();
        if ![self.odom.dx, self.odom.dy, self.odom.dtheta].into_iter().all(finite) {
            return Err("odom: non-finite value".into());
        }
        if let Some(g) = &self.gps {
            if !finite(g.x) || !finite(g.y) {
                return Err("gps: non-finite position".into());
            }
            if let Some(s) = g.sigma {
                if !(s > 0.0) || !finite(s) {
                    return Err(format!("gps.sigma: must be positive, got {s}"));
                }
            }
        }
        for (i, d) in self.detections.iter().enumerate() {
            let b = d.bbox();
            if !b.is_valid() {
                return Err(format!(
                    "detections[{i}].bbox: need finite x0 < x1, y0 < y1, got {:?}",
                    d.bbox
                ));
            }
            if !(0.0..=1.0).contains(&d.conf) {
                return Err(format!("detections[{i}].conf: must be in [0, 1], got {}", d.conf));
            }
            if !(d.range > 0.0) || !finite(d.range) {
                return Err(format!("detections[{i}].range: must be positive, got {}", d.range));
            }
            if !finite(d.bearing) {
                return Err(format!("detections[{i}].bearing: non-finite"));
            }
            if let Some(w) = d.world {
                if !w.into_iter().all(finite) {
                    return Err(format!("detections[{i}].world: non-finite"));
                }
            }
            if let Some(c) = &d.cloud {
                if c.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(format!("detections[{i}].cloud: non-finite point"));
                }
            }
        }
        Ok(())
    }
}

pub fn parse_frame_log(reader: impl BufRead) -> Result<Vec<FrameRecord>, IoError> {
    let mut out: Vec<FrameRecord> = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| IoError::Parse {
            line: n + 1,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FrameRecord = serde_json::from_str(&line).map_err(|e| IoError::Parse {
            line: n + 1,
            msg: e.to_string(),
        })?;
        rec.validate()
            .map_err(|msg| IoError::Schema { frame: rec.frame, msg })?;
        if let Some(prev) = out.last() {
            if rec.frame <= prev.frame {
                return Err(IoError::Schema {
                    frame: rec.frame,
                    msg: format!("frame numbers must strictly increase (previous {})", prev.frame),
                });
            }
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_frame_log(path: &Path) -> Result<Vec<FrameRecord>, IoError> {
    let f = File::open(path).map_err(file_err(path))?;
    parse_frame_log(BufReader::new(f))
}

pub fn write_frame_log(path: &Path, frames: &[FrameRecord]) -> Result<(), IoError> {
    let f = File::create(path).map_err(file_err(path))?;
    let mut w = BufWriter::new(f);
    for rec in frames {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n").map_err(file_err(path))?;
    }
    w.flush().map_err(file_err(path))
}

pub fn write_tree_map(path: &Path, map: &TreeMap) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path)?;
    for t in &map.trees {
        w.serialize(t)?;
    }
    w.flush().map_err(file_err(path))
}

pub fn read_tree_map(path: &Path) -> Result<TreeMap, IoError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut map = TreeMap::new("world");
    for (n, row) in r.deserialize::<Tree>().enumerate() {
        let t = row?;
        if !t.x.is_finite() || !t.y.is_finite() {
            return Err(IoError::Parse {
                line: n + 2,
                msg: "non-finite coordinate".into(),
            });
        }
        map.push(t.id, t.position()).map_err(|id| IoError::Parse {
            line: n + 2,
            msg: format!("duplicate tree id {id}"),
        })?;
    }
    Ok(map)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub frame: u64,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

pub fn write_trajectory(path: &Path, poses: &[(u64, Pose2)]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path)?;
    for &(frame, p) in poses {
        w.serialize(TrajectoryRow {
            frame,
            x: p.x,
            y: p.y,
            theta: p.theta,
        })?;
    }
    w.flush().map_err(file_err(path))
}

pub fn read_trajectory(path: &Path) -> Result<Vec<(u64, Pose2)>, IoError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize::<TrajectoryRow>() {
        let t = row?;
        out.push((t.frame, Pose2::new(t.x, t.y, t.theta)));
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let f = File::create(path).map_err(file_err(path))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(file_err(path))?;
    w.flush().map_err(file_err(path))
}

pub fn write_sweep_csv(path: &Path, reports: &[EvalReport]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["gate", "tp", "fp", "fn", "precision", "recall", "f1", "mean_tp_error"])?;
    for r in reports {
        w.write_record([
            r.gate.to_string(),
            r.tp.to_string(),
            r.fp.to_string(),
            r.fn_.to_string(),
            r.precision.to_string(),
            r.recall.to_string(),
            r.f1.to_string(),
            r.mean_tp_error.to_string(),
        ])?;
    }
    w.flush().map_err(file_err(path))
}

/// Top-down plot of predicted (filled) against ground-truth (hollow) trees,
/// with TP pairs joined by a line.
pub fn render_overlay_svg(pred: &TreeMap, gt: &TreeMap, matches: &[(usize, usize, f64)], gate: f64) -> String {
    let all: Vec<Point2> = pred.points().into_iter().chain(gt.points()).collect();
    let (mut x0, mut y0, mut x1, mut y1) = (0.0f64, 0.0f64, 1.0f64, 1.0f64);
    if let Some(first) = all.first() {
        (x0, y0, x1, y1) = (first.x, first.y, first.x, first.y);
        for p in &all {
            x0 = x0.min(p.x);
            y0 = y0.min(p.y);
            x1 = x1.max(p.x);
            y1 = y1.max(p.y);
        }
    }
    let margin = 1.0;
    let scale = 40.0;
    let w = (x1 - x0 + 2.0 * margin) * scale;
    let h = (y1 - y0 + 2.0 * margin) * scale;
    // flip y so north is up
    let tx = |x: f64| (x - x0 + margin) * scale;
    let ty = |y: f64| (y1 + margin - y) * scale;
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.1}\" height=\"{h:.1}\" viewBox=\"0 0 {w:.1} {h:.1}\">\n"
    ));
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    let gate_r = gate * scale;
    for t in &gt.trees {
        s.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"{gate_r:.2}\" fill=\"none\" stroke=\"#bbbbbb\" stroke-dasharray=\"3,3\"/>\n",
            tx(t.x),
            ty(t.y)
        ));
        s.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"5\" fill=\"none\" stroke=\"#1b7f3a\" stroke-width=\"2\"><title>gt {}</title></circle>\n",
            tx(t.x),
            ty(t.y),
            t.id
        ));
    }
    for &(i, j, _) in matches {
        let (p, g) = (pred.trees[i], gt.trees[j]);
        s.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#555555\"/>\n",
            tx(p.x),
            ty(p.y),
            tx(g.x),
            ty(g.y)
        ));
    }
    for t in &pred.trees {
        s.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"#c0392b\"><title>pred {}</title></circle>\n",
            tx(t.x),
            ty(t.y),
            t.id
        ));
    }
    s.push_str("</svg>\n");
    s
}
