//! Runtime fusion: bone tracking, root anchoring and the windowed
//! constraint-guided pose solve.
//!
//! The solve estimates rotation vectors of the hips, knees, shoulders and
//! elbows. Root pose comes from the anchor; every other joint stays at rest.

mod anchor;
mod contact;
mod problem;
mod solver;
mod track;

use std::collections::BTreeMap;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::Vector3;
use thiserror::Error;

use crate::calib::CalibrationResult;
use crate::skeleton::{MotionSequence, PoseFrame, SkeletonModel};
use crate::so3::Rotation;
use crate::stream::{HeadPose, SensorStreams, TimedSample};

pub use anchor::{anchor_root, head_offset, RootAnchor};
pub use contact::{detect_contact, foot_positions, ContactFlags, ContactOptions, FOOT_JOINTS};
pub use problem::{ContactTerm, PoseProblem, Term, TermCosts, DIRECT_PAIRS, RELATIVE_PAIRS};
pub use solver::{solve, BandMatrix, SolveReport, SolverOptions};
pub use track::{track_bones, TrackedBones, TrackedFrame, STALE_AFTER_MS, STALE_ZERO_MS};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("no calibration for tracker {0}, which is present in the stream")]
    MissingCalibration(&'static str),
    #[error("invalid guidance weights: {0}")]
    Weights(String),
    #[error("window of {0} frames is too short (need at least 2)")]
    WindowTooShort(usize),
    #[error("solver did not converge in the window starting at {window_start_ms} ms after {iterations} iterations (last step {last_step:.3e}; {costs})")]
    NotConverged {
        window_start_ms: i64,
        iterations: usize,
        last_step: f64,
        costs: TermCosts,
        best: Vec<PoseFrame>,
    },
}

/// Nonnegative weights of the guidance terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidanceWeights {
    pub direct: f64,
    pub relative: f64,
    pub temporal: f64,
    pub contact: f64,
    /// Joint-angle second differences; stands in for a learned motion prior.
    pub smooth: f64,
}

impl Default for GuidanceWeights {
    fn default() -> Self {
        Self {
            direct: 1.0,
            relative: 1.0,
            temporal: 1.0,
            contact: 0.1,
            smooth: 1e-4,
        }
    }
}

impl GuidanceWeights {
    pub fn only_smooth(w: f64) -> Self {
        Self {
            direct: 0.0,
            relative: 0.0,
            temporal: 0.0,
            contact: 0.0,
            smooth: w,
        }
    }

    fn as_array(&self) -> [f64; 5] {
        [self.direct, self.relative, self.temporal, self.contact, self.smooth]
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        let a = self.as_array();
        if a.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(FusionError::Weights(format!("weights must be finite and nonnegative: {self}")));
        }
        if a.iter().all(|w| *w == 0.0) {
            return Err(FusionError::Weights("at least one weight must be positive".into()));
        }
        Ok(())
    }
}

impl std::fmt::Display for GuidanceWeights {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "direct={},relative={},temporal={},contact={},smooth={}",
            self.direct, self.relative, self.temporal, self.contact, self.smooth
        )
    }
}

/// Parses `key=value` pairs separated by commas; unnamed keys keep defaults.
impl FromStr for GuidanceWeights {
    type Err = FusionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut w = Self::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| FusionError::Weights(format!("expected key=value, got {part:?}")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| FusionError::Weights(format!("{v:?} is not a number")))?;
            let slot = match k.trim() {
                "direct" => &mut w.direct,
                "relative" => &mut w.relative,
                "temporal" => &mut w.temporal,
                "contact" => &mut w.contact,
                "smooth" => &mut w.smooth,
                other => return Err(FusionError::Weights(format!("unknown weight {other:?}"))),
            };
            *slot = v;
        }
        w.validate()?;
        Ok(w)
    }
}

/// Joints estimated by default: each is bounded by two trackers.
pub const DEFAULT_JOINT_MASK: [&str; 8] = [
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
];

#[derive(Clone, Debug, PartialEq)]
pub struct FusionOptions {
    pub window: usize,
    pub overlap: usize,
    /// Already solved frames carried into a window as fixed context.
    pub context_frames: usize,
    pub joint_mask: Vec<String>,
    /// Trackers (by id) that get the consecutive-frame term.
    pub temporal_mask: [bool; 9],
    /// `None` disables contact detection and the contact term.
    pub contact: Option<ContactOptions>,
    pub solver: SolverOptions,
}

impl Default for FusionOptions {
    fn default() -> Self {
        let mut temporal_mask = [true; 9];
        temporal_mask[0] = false;
        Self {
            window: 30,
            overlap: 10,
            context_frames: 2,
            joint_mask: DEFAULT_JOINT_MASK.iter().map(|s| s.to_string()).collect(),
            temporal_mask,
            contact: Some(ContactOptions::default()),
            solver: SolverOptions::default(),
        }
    }
}

impl FusionOptions {
    fn mask(&self, skeleton: &SkeletonModel) -> Result<Vec<usize>, FusionError> {
        self.joint_mask
            .iter()
            .map(|n| skeleton.joint_index(n).map_err(|e| FusionError::Input(e.to_string())))
            .collect()
    }

    fn validate(&self) -> Result<(), FusionError> {
        if self.window < 2 {
            return Err(FusionError::WindowTooShort(self.window));
        }
        if self.overlap >= self.window {
            return Err(FusionError::Input(format!(
                "overlap {} must be below the window length {}",
                self.overlap, self.window
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowDiagnostics {
    pub start_ms: i64,
    pub frames: usize,
    pub iterations: usize,
    pub costs: TermCosts,
    /// Objective after every accepted step.
    pub history: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowResult {
    pub poses: Vec<PoseFrame>,
    pub diagnostics: WindowDiagnostics,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FusionDiagnostics {
    pub windows: Vec<WindowDiagnostics>,
    pub passes: usize,
}

impl FusionDiagnostics {
    pub fn iterations(&self) -> usize {
        self.windows.iter().map(|w| w.iterations).sum()
    }

    pub fn costs(&self) -> TermCosts {
        let mut c = TermCosts::default();
        for w in &self.windows {
            c.accumulate(&w.costs);
        }
        c
    }
}

#[derive(Clone, Debug)]
pub struct FusionOutput {
    pub motion: MotionSequence,
    pub anchors: Vec<RootAnchor>,
    pub contact: Option<ContactFlags>,
    pub diagnostics: FusionDiagnostics,
}

fn root_pose(skeleton: &SkeletonModel, anchor: &RootAnchor) -> PoseFrame {
    let mut p = skeleton.rest_pose(anchor.timestamp_ms);
    p.root_orientation = anchor.pelvis_orientation;
    p.root_position = anchor.pelvis_position;
    p
}

struct Window<'a> {
    skeleton: &'a SkeletonModel,
    mask: &'a [usize],
    weights: GuidanceWeights,
    opts: &'a FusionOptions,
}

impl Window<'_> {
    /// Solves frames `[start, end)` with `context` fixed rotation vectors for
    /// the frames right before `start`.
    #[allow(clippy::too_many_arguments)]
    fn solve(
        &self,
        frames: &[TrackedFrame],
        base: Vec<PoseFrame>,
        context: Vec<Vec<Vector3<f64>>>,
        init: &[Vec<Vector3<f64>>],
        contact: Option<ContactTerm>,
    ) -> Result<(Vec<Vec<Vector3<f64>>>, Vec<PoseFrame>, WindowDiagnostics), FusionError> {
        let fixed = context.len();
        let problem = PoseProblem::new(
            self.skeleton,
            frames,
            base,
            self.mask,
            context,
            self.weights,
            self.opts.temporal_mask,
            contact,
        )?;
        let report = solve(&problem, problem.pack(init), &self.opts.solver);
        let poses = problem.poses(&report.x);
        let costs = problem.term_costs(&report.x);
        let start_ms = frames[fixed].timestamp_ms;
        if !report.converged {
            return Err(FusionError::NotConverged {
                window_start_ms: start_ms,
                iterations: report.iterations,
                last_step: report.last_step,
                costs,
                best: poses[fixed..].to_vec(),
            });
        }
        let vecs = (fixed..frames.len()).map(|t| problem.vectors_at(&report.x, t)).collect();
        let diagnostics = WindowDiagnostics {
            start_ms,
            frames: frames.len() - fixed,
            iterations: report.iterations,
            costs,
            history: report.history,
        };
        Ok((vecs, poses[fixed..].to_vec(), diagnostics))
    }
}

fn vectors_of(pose: &PoseFrame, mask: &[usize]) -> Vec<Vector3<f64>> {
    mask.iter().map(|&j| pose.local_rotation(j).log().0).collect()
}

/// Solves one window with the root fixed to `anchors` and every joint
/// initialized from `init`. Unmasked joints keep their `init` value.
pub fn optimize_pose(
    tracked: &[TrackedFrame],
    anchors: &[RootAnchor],
    skeleton: &SkeletonModel,
    weights: &GuidanceWeights,
    init: &[PoseFrame],
    opts: &FusionOptions,
    contact: Option<&ContactFlags>,
) -> Result<WindowResult, FusionError> {
    let k = tracked.len();
    if k < 2 {
        return Err(FusionError::WindowTooShort(k));
    }
    if anchors.len() != k || init.len() != k {
        return Err(FusionError::Input(format!(
            "{k} tracked frames, {} anchors, {} initial poses",
            anchors.len(),
            init.len()
        )));
    }
    weights.validate()?;
    let mask = opts.mask(skeleton)?;
    let base: Vec<PoseFrame> = init
        .iter()
        .zip(anchors)
        .map(|(p, a)| {
            let mut p = p.clone();
            p.timestamp_ms = a.timestamp_ms;
            p.root_orientation = a.pelvis_orientation;
            p.root_position = a.pelvis_position;
            p
        })
        .collect();
    let vecs: Vec<_> = init.iter().map(|p| vectors_of(p, &mask)).collect();
    let contact = contact.map(|c| ContactTerm { ground: c.ground, flags: c.flags.clone() });
    let w = Window { skeleton, mask: &mask, weights: *weights, opts };
    let (_, poses, diagnostics) = w.solve(tracked, base, Vec::new(), &vecs, contact)?;
    Ok(WindowResult { poses, diagnostics })
}

/// Sequential overlapping windows over the whole sequence. Each frame keeps
/// the value from the last window that contains it.
fn solve_sequence(
    tracked: &TrackedBones,
    anchors: &[RootAnchor],
    skeleton: &SkeletonModel,
    weights: GuidanceWeights,
    opts: &FusionOptions,
    contact: Option<&ContactFlags>,
) -> Result<(Vec<PoseFrame>, Vec<WindowDiagnostics>), FusionError> {
    let frames = &tracked.frames;
    let n = frames.len();
    if n < 2 {
        return Err(FusionError::WindowTooShort(n));
    }
    let mask = opts.mask(skeleton)?;
    let k = opts.window.min(n);
    let w = Window { skeleton, mask: &mask, weights, opts };
    let mut vecs = vec![vec![Vector3::zeros(); mask.len()]; n];
    let mut poses: Vec<PoseFrame> = anchors.iter().map(|a| root_pose(skeleton, a)).collect();
    let mut diagnostics = Vec::new();
    let mut solved = 0;
    let mut start = 0;
    loop {
        let end = (start + k).min(n);
        let start_w = end - k;
        let ctx = opts.context_frames.min(start_w);
        for t in solved.max(start_w)..end {
            if solved > 0 {
                vecs[t] = vecs[solved - 1].clone();
            }
        }
        let lo = start_w - ctx;
        let base = anchors[lo..end].iter().map(|a| root_pose(skeleton, a)).collect();
        let c = contact.map(|c| ContactTerm { ground: c.ground, flags: c.flags[lo..end].to_vec() });
        let (v, p, d) = w.solve(&frames[lo..end], base, vecs[lo..start_w].to_vec(), &vecs[start_w..end], c)?;
        for (i, (v, p)) in v.into_iter().zip(p).enumerate() {
            vecs[start_w + i] = v;
            poses[start_w + i] = p;
        }
        diagnostics.push(d);
        solved = end;
        if end == n {
            break;
        }
        start = end - opts.overlap;
    }
    Ok((poses, diagnostics))
}

fn rate_of(timestamps: &[i64]) -> f64 {
    let mut d: Vec<i64> = timestamps.windows(2).map(|w| w[1] - w[0]).collect();
    if d.is_empty() {
        return 1.0;
    }
    d.sort_unstable();
    1000.0 / d[d.len() / 2] as f64
}

/// Full-sequence fusion. With contact enabled, a first pass without contact
/// feeds contact detection and pose-dependent anchoring for a second pass.
pub fn fuse(
    tracked: &TrackedBones,
    slam: &[TimedSample<HeadPose>],
    skeleton: Arc<SkeletonModel>,
    weights: &GuidanceWeights,
    opts: &FusionOptions,
) -> Result<FusionOutput, FusionError> {
    weights.validate()?;
    opts.validate()?;
    let mut anchors = anchor_root(slam, tracked, &skeleton, None)?;
    let contact_pass = opts.contact.as_ref().filter(|_| weights.contact > 0.0);
    let first_weights = GuidanceWeights {
        contact: if contact_pass.is_some() { 0.0 } else { weights.contact },
        ..*weights
    };
    let mut contact = None;
    let mut passes = 1;
    let (mut poses, mut windows) = if first_weights.as_array().iter().any(|w| *w > 0.0) {
        solve_sequence(tracked, &anchors, &skeleton, first_weights, opts, None)?
    } else {
        // contact alone: start from the anchored rest pose
        (anchors.iter().map(|a| root_pose(&skeleton, a)).collect(), Vec::new())
    };
    if let Some(copts) = contact_pass {
        let flags = detect_contact(&poses, &skeleton, copts)?;
        anchors = anchor_root(slam, tracked, &skeleton, Some(&poses))?;
        (poses, windows) = solve_sequence(tracked, &anchors, &skeleton, *weights, opts, Some(&flags))?;
        contact = Some(flags);
        passes = 2;
    }
    let rate = rate_of(&tracked.timestamps());
    let motion = MotionSequence::new(skeleton, poses, rate).map_err(|e| FusionError::Input(e.to_string()))?;
    Ok(FusionOutput {
        motion,
        anchors,
        contact,
        diagnostics: FusionDiagnostics { windows, passes },
    })
}

/// Tracks, anchors and fuses a sensor bundle. Only the IMU and SLAM streams
/// are read; camera observations matter only to calibration.
pub fn fuse_sensors(
    sensors: &SensorStreams,
    calib: &CalibrationResult,
    skeleton: Arc<SkeletonModel>,
    weights: &GuidanceWeights,
    opts: &FusionOptions,
) -> Result<FusionOutput, FusionError> {
    let tracked = track_bones(&sensors.imu, calib)?;
    fuse(&tracked, &sensors.slam, skeleton, weights, opts)
}

/// Per-joint geodesic error of the local rotations, rad.
pub fn joint_angle_errors(a: &PoseFrame, b: &PoseFrame, joints: &[usize]) -> BTreeMap<usize, f64> {
    joints
        .iter()
        .map(|&j| (j, a.local_rotation(j).geodesic_distance(&b.local_rotation(j))))
        .collect()
}

/// Rotates every world-frame input by `q` about the vertical.
pub fn rotate_inputs(tracked: &TrackedBones, anchors: &[RootAnchor], q: &Rotation) -> (TrackedBones, Vec<RootAnchor>) {
    let tracked = TrackedBones {
        frames: tracked
            .frames
            .iter()
            .map(|f| TrackedFrame {
                bones: f.bones.iter().map(|b| b.map(|b| *q * b)).collect(),
                ..f.clone()
            })
            .collect(),
    };
    let anchors = anchors
        .iter()
        .map(|a| RootAnchor {
            head: HeadPose { orientation: *q * a.head.orientation, position: q.apply(&a.head.position) },
            pelvis_orientation: *q * a.pelvis_orientation,
            pelvis_position: q.apply(&a.pelvis_position),
            ..a.clone()
        })
        .collect();
    (tracked, anchors)
}
