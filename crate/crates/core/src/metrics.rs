//! Pose accuracy metrics and evaluation reports.
//!
//! MPJPE is measured in the world frame with no alignment of any kind. JAE
//! compares parent→child bone directions after replacing both root
//! orientations by the identity, so it ignores the global pose.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use thiserror::Error;

use crate::skeleton::{forward_kinematics, MotionSequence, PoseFrame, SkeletonModel};
use crate::so3::Rotation;
use crate::stream::{synchronize, SyncError};

pub const REPORT_FORMAT: &str = "bodyfuse-report";
pub const REPORT_VERSION: u32 = 1;

/// Bones shorter than this have no direction.
const DEGENERATE_BONE_M: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no valid frame pairs to evaluate")]
    NoValidPairs,
    #[error("skeleton mismatch: {0}")]
    SkeletonMismatch(String),
    #[error("frame pair out of range: {0}")]
    BadPair(String),
    #[error("alignment failed: {0}")]
    Alignment(#[from] SyncError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FramePair {
    pub truth: usize,
    /// `None` when no prediction exists for this evaluation frame.
    pub pred: Option<usize>,
}

/// Evaluation frames (one per truth frame) and their matched predictions.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Alignment {
    pub pairs: Vec<FramePair>,
}

impl Alignment {
    /// Truth frame `k` paired with prediction `k`.
    pub fn identity(n: usize) -> Self {
        Self {
            pairs: (0..n).map(|k| FramePair { truth: k, pred: Some(k) }).collect(),
        }
    }

    /// Nearest-in-time prediction for every truth timestamp.
    pub fn from_timestamps(pred: &[i64], truth: &[i64], max_gap_ms: i64) -> Result<Self, MetricsError> {
        if truth.is_empty() {
            return Ok(Self::default());
        }
        let frames = synchronize(&[truth, pred], 0, max_gap_ms)?;
        Ok(Self {
            pairs: frames
                .iter()
                .enumerate()
                .map(|(k, f)| FramePair { truth: k, pred: f.entries[1].index() })
                .collect(),
        })
    }

    pub fn between(pred: &MotionSequence, truth: &MotionSequence, max_gap_ms: i64) -> Result<Self, MetricsError> {
        Self::from_timestamps(&pred.timestamps(), &truth.timestamps(), max_gap_ms)
    }

    /// Drops evaluation frames whose truth timestamp lies in any `[start, end]`.
    pub fn excluding(&self, truth_timestamps: &[i64], ranges: &[(i64, i64)]) -> Self {
        Self {
            pairs: self
                .pairs
                .iter()
                .filter(|p| {
                    let t = truth_timestamps[p.truth];
                    !ranges.iter().any(|&(a, b)| a <= t && t <= b)
                })
                .copied()
                .collect(),
        }
    }

    pub fn valid(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pairs.iter().filter_map(|p| p.pred.map(|q| (q, p.truth)))
    }

    pub fn valid_count(&self) -> usize {
        self.valid().count()
    }
}

fn check_skeletons(pred: &MotionSequence, truth: &MotionSequence) -> Result<(), MetricsError> {
    let (a, b) = (pred.skeleton.joints(), truth.skeleton.joints());
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.name != y.name || x.parent != y.parent) {
        return Err(MetricsError::SkeletonMismatch(format!(
            "{} ({} joints) vs {} ({} joints)",
            pred.skeleton.name,
            a.len(),
            truth.skeleton.name,
            b.len()
        )));
    }
    Ok(())
}

fn checked_pairs<'a>(
    pred: &'a MotionSequence,
    truth: &'a MotionSequence,
    alignment: &'a Alignment,
) -> Result<Vec<(&'a PoseFrame, &'a PoseFrame)>, MetricsError> {
    check_skeletons(pred, truth)?;
    let pairs: Vec<_> = alignment
        .valid()
        .map(|(p, t)| match (pred.frames().get(p), truth.frames().get(t)) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => Err(MetricsError::BadPair(format!("pred {p}, truth {t}"))),
        })
        .collect::<Result<_, _>>()?;
    if pairs.is_empty() {
        return Err(MetricsError::NoValidPairs);
    }
    Ok(pairs)
}

fn positions(skeleton: &SkeletonModel, pose: &PoseFrame) -> Result<Vec<Vector3<f64>>, MetricsError> {
    forward_kinematics(skeleton, pose)
        .map(|k| k.positions)
        .map_err(|e| MetricsError::SkeletonMismatch(e.to_string()))
}

/// Mean world-frame joint position error over valid pairs and all joints, cm.
pub fn mpjpe(pred: &MotionSequence, truth: &MotionSequence, alignment: &Alignment) -> Result<f64, MetricsError> {
    let pairs = checked_pairs(pred, truth, alignment)?;
    let mut sum = 0.0;
    for (p, t) in &pairs {
        let (a, b) = (positions(&pred.skeleton, p)?, positions(&truth.skeleton, t)?);
        sum += a.iter().zip(&b).map(|(x, y)| (x - y).norm()).sum::<f64>() / a.len() as f64;
    }
    Ok(100.0 * sum / pairs.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct JaeResult {
    pub degrees: f64,
    /// Child joints of bones left out for having no length.
    pub excluded_bones: Vec<String>,
}

/// Bone directions with the root orientation and position removed.
fn bone_directions(skeleton: &SkeletonModel, pose: &PoseFrame, bones: &[(usize, usize)]) -> Result<Vec<Vector3<f64>>, MetricsError> {
    let mut local = pose.clone();
    local.root_orientation = Rotation::identity();
    local.root_position = Vector3::zeros();
    let p = positions(skeleton, &local)?;
    Ok(bones.iter().map(|&(a, b)| (p[b] - p[a]).normalize()).collect())
}

/// Mean angle between predicted and true parent→child directions, degrees.
pub fn jae(pred: &MotionSequence, truth: &MotionSequence, alignment: &Alignment) -> Result<JaeResult, MetricsError> {
    let pairs = checked_pairs(pred, truth, alignment)?;
    let s = &truth.skeleton;
    let mut bones = Vec::new();
    let mut excluded_bones = Vec::new();
    for (j, joint) in s.joints().iter().enumerate() {
        let Some(parent) = joint.parent else { continue };
        let short = [&pred.skeleton, s].iter().any(|sk| sk.joints()[j].offset.norm() < DEGENERATE_BONE_M);
        if short {
            excluded_bones.push(joint.name.clone());
        } else {
            bones.push((parent, j));
        }
    }
    if bones.is_empty() {
        return Err(MetricsError::SkeletonMismatch("no bone has a direction".into()));
    }
    let mut sum = 0.0;
    for (p, t) in &pairs {
        let a = bone_directions(&pred.skeleton, p, &bones)?;
        let b = bone_directions(s, t, &bones)?;
        // atan2 stays accurate for nearly parallel vectors
        sum += a.iter().zip(&b).map(|(x, y)| x.cross(y).norm().atan2(x.dot(y))).sum::<f64>() / bones.len() as f64;
    }
    Ok(JaeResult {
        degrees: (sum / pairs.len() as f64).to_degrees(),
        excluded_bones,
    })
}

/// Fraction of evaluation frames with a prediction. An empty alignment has
/// recall 0 by convention.
pub fn recall(alignment: &Alignment) -> f64 {
    if alignment.pairs.is_empty() {
        return 0.0;
    }
    alignment.valid_count() as f64 / alignment.pairs.len() as f64
}

#[derive(Clone, Debug)]
pub struct EvalClip {
    pub name: String,
    pub pred: MotionSequence,
    pub truth: MotionSequence,
    /// Truth-time ranges left out of evaluation, e.g. the calibration segment.
    pub exclude: Vec<(i64, i64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipMetrics {
    pub name: String,
    /// Evaluation frames after exclusions.
    pub frames: usize,
    pub valid_frames: usize,
    pub excluded_frames: usize,
    pub recall: f64,
    pub mpjpe_cm: f64,
    pub jae_deg: f64,
    pub excluded_bones: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub clips: Vec<ClipMetrics>,
    /// MPJPE and JAE weighted by valid frames, recall by evaluation frames.
    pub aggregate: ClipMetrics,
}

pub fn evaluate_clip(clip: &EvalClip, max_gap_ms: i64) -> Result<ClipMetrics, MetricsError> {
    let truth_ts = clip.truth.timestamps();
    let full = Alignment::between(&clip.pred, &clip.truth, max_gap_ms)?;
    let alignment = full.excluding(&truth_ts, &clip.exclude);
    let j = jae(&clip.pred, &clip.truth, &alignment)?;
    Ok(ClipMetrics {
        name: clip.name.clone(),
        frames: alignment.pairs.len(),
        valid_frames: alignment.valid_count(),
        excluded_frames: full.pairs.len() - alignment.pairs.len(),
        recall: recall(&alignment),
        mpjpe_cm: mpjpe(&clip.pred, &clip.truth, &alignment)?,
        jae_deg: j.degrees,
        excluded_bones: j.excluded_bones,
    })
}

pub fn build_report(clips: &[EvalClip], max_gap_ms: i64) -> Result<EvalReport, MetricsError> {
    let clips: Vec<ClipMetrics> = clips.iter().map(|c| evaluate_clip(c, max_gap_ms)).collect::<Result<_, _>>()?;
    let frames: usize = clips.iter().map(|c| c.frames).sum();
    let valid: usize = clips.iter().map(|c| c.valid_frames).sum();
    let weighted = |f: fn(&ClipMetrics) -> f64| {
        if valid == 0 {
            0.0
        } else {
            clips.iter().map(|c| f(c) * c.valid_frames as f64).sum::<f64>() / valid as f64
        }
    };
    let mut excluded_bones: Vec<String> = clips.iter().flat_map(|c| c.excluded_bones.clone()).collect();
    excluded_bones.sort();
    excluded_bones.dedup();
    let aggregate = ClipMetrics {
        name: "ALL".into(),
        frames,
        valid_frames: valid,
        excluded_frames: clips.iter().map(|c| c.excluded_frames).sum(),
        recall: if frames == 0 { 0.0 } else { valid as f64 / frames as f64 },
        mpjpe_cm: weighted(|c| c.mpjpe_cm),
        jae_deg: weighted(|c| c.jae_deg),
        excluded_bones,
    };
    Ok(EvalReport { clips, aggregate })
}

const COLUMNS: [&str; 7] = ["clip", "frames", "valid_frames", "excluded_frames", "recall", "mpjpe_cm", "jae_deg"];

impl EvalReport {
    fn rows(&self) -> impl Iterator<Item = &ClipMetrics> {
        self.clips.iter().chain(std::iter::once(&self.aggregate))
    }

    /// Versioned CSV; fixed-precision numbers keep output byte-stable.
    pub fn to_csv(&self) -> String {
        let mut s = format!("# {REPORT_FORMAT} v{REPORT_VERSION}\n{}\n", COLUMNS.join(","));
        for c in self.rows() {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.6},{:.6},{:.6}",
                c.name, c.frames, c.valid_frames, c.excluded_frames, c.recall, c.mpjpe_cm, c.jae_deg
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let cells: Vec<[String; 7]> = self
            .rows()
            .map(|c| {
                [
                    c.name.clone(),
                    c.frames.to_string(),
                    c.valid_frames.to_string(),
                    c.excluded_frames.to_string(),
                    format!("{:.3}", c.recall),
                    format!("{:.3}", c.mpjpe_cm),
                    format!("{:.3}", c.jae_deg),
                ]
            })
            .collect();
        let header = ["clip", "frames", "valid", "excluded", "recall", "MPJPE (cm)", "JAE (deg)"];
        let width: Vec<usize> = (0..7)
            .map(|i| cells.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap())
            .collect();
        let line = |r: &[String]| {
            let mut out = format!("{:<w$}", r[0], w = width[0]);
            for i in 1..7 {
                let _ = write!(out, "  {:>w$}", r[i], w = width[i]);
            }
            out.push('\n');
            out
        };
        let mut s = line(&header.map(String::from));
        s.push_str(&"-".repeat(width.iter().sum::<usize>() + 12));
        s.push('\n');
        let n = cells.len();
        for (k, r) in cells.iter().enumerate() {
            if k + 1 == n && n > 1 {
                s.push_str(&"-".repeat(width.iter().sum::<usize>() + 12));
                s.push('\n');
            }
            s.push_str(&line(r));
        }
        if !self.aggregate.excluded_bones.is_empty() {
            let _ = writeln!(s, "bones without direction: {}", self.aggregate.excluded_bones.join(", "));
        }
        s
    }

    /// Writes `report.csv` and `report.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf), MetricsError> {
        let io = |path: &Path, source| MetricsError::Io { path: path.to_path_buf(), source };
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let csv = dir.join("report.csv");
        let txt = dir.join("report.txt");
        std::fs::write(&csv, self.to_csv()).map_err(|e| io(&csv, e))?;
        std::fs::write(&txt, self.to_text()).map_err(|e| io(&txt, e))?;
        Ok((csv, txt))
    }
}
