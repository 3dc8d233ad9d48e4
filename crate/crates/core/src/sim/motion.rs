//! Scripted ground-truth motions.
//!
//! Only hips, knees, shoulders and elbows move; spine, neck, collar and ankle
//! joints stay at identity. Legs are solved with planar two-link IK in the
//! sagittal plane so stance feet stay fixed in the world.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{Vector2, Vector3};

use super::SimError;
use crate::skeleton::{MotionSequence, PoseFrame, SkeletonModel};
use crate::so3::Rotation;
use crate::stream::{motion_from_recording, read_recording};

/// Default clip start, UTC ms.
pub const DEFAULT_START_MS: i64 = 1_700_000_000_000;

#[derive(Clone, Debug, PartialEq)]
pub enum MotionKind {
    WalkCycle,
    Squat,
    ArmWave,
    ScriptedFile(PathBuf),
}

impl FromStr for MotionKind {
    type Err = SimError;

    /// `walk-cycle`, `squat`, `arm-wave` or `scripted-file:<path>`.
    fn from_str(s: &str) -> Result<Self, SimError> {
        match s {
            "walk-cycle" => Ok(MotionKind::WalkCycle),
            "squat" => Ok(MotionKind::Squat),
            "arm-wave" => Ok(MotionKind::ArmWave),
            _ => match s.strip_prefix("scripted-file:") {
                Some(p) if !p.is_empty() => Ok(MotionKind::ScriptedFile(PathBuf::from(p))),
                _ => Err(SimError::UnknownMotion(s.to_string())),
            },
        }
    }
}

impl std::fmt::Display for MotionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MotionKind::WalkCycle => f.write_str("walk-cycle"),
            MotionKind::Squat => f.write_str("squat"),
            MotionKind::ArmWave => f.write_str("arm-wave"),
            MotionKind::ScriptedFile(p) => write!(f, "scripted-file:{}", p.display()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionOptions {
    pub rate_hz: f64,
    pub start_ms: i64,
    /// Forward root speed of the walk, m/s.
    pub walk_speed: f64,
    /// Gait cycle period, s.
    pub walk_period: f64,
    /// Fraction of the gait cycle each foot is planted.
    pub stance_fraction: f64,
    pub squat_frequency: f64,
    /// Pelvis drop at the bottom of a squat, m.
    pub squat_depth: f64,
}

impl Default for MotionOptions {
    fn default() -> Self {
        Self {
            rate_hz: 100.0,
            start_ms: DEFAULT_START_MS,
            walk_speed: 0.8,
            walk_period: 1.2,
            stance_fraction: 0.6,
            squat_frequency: 0.4,
            squat_depth: 0.35,
        }
    }
}

/// A motion plus the per-frame `[left, right]` stance flags where the
/// generator scripts them.
#[derive(Clone, Debug)]
pub struct GeneratedMotion {
    pub motion: MotionSequence,
    pub stance: Option<Vec<[bool; 2]>>,
}

pub fn generate_motion(
    kind: &MotionKind,
    duration_s: f64,
    skeleton: Arc<SkeletonModel>,
) -> Result<MotionSequence, SimError> {
    Ok(generate_motion_with(kind, duration_s, skeleton, &MotionOptions::default())?.motion)
}

pub fn generate_motion_with(
    kind: &MotionKind,
    duration_s: f64,
    skeleton: Arc<SkeletonModel>,
    opts: &MotionOptions,
) -> Result<GeneratedMotion, SimError> {
    if !(duration_s > 0.0) || !duration_s.is_finite() {
        return Err(SimError::Config(format!("duration {duration_s} s must be positive")));
    }
    if !(opts.rate_hz > 0.0) {
        return Err(SimError::Config(format!("motion rate {} Hz must be positive", opts.rate_hz)));
    }
    let n = (duration_s * opts.rate_hz).round().max(1.0) as usize;
    let times: Vec<f64> = (0..n).map(|k| k as f64 / opts.rate_hz).collect();
    let stamp = |k: usize| opts.start_ms + (k as f64 * 1000.0 / opts.rate_hz).round() as i64;

    if let MotionKind::ScriptedFile(path) = kind {
        let frames = resample_script(path, &skeleton, n, opts.rate_hz)?;
        let motion = MotionSequence::new(skeleton, frames, opts.rate_hz)
            .map_err(|e| SimError::Script(e.to_string()))?;
        return Ok(GeneratedMotion { motion, stance: None });
    }

    let rig = Rig::new(&skeleton)?;
    let mut frames = Vec::with_capacity(n);
    let mut stance = Vec::with_capacity(n);
    for (k, &t) in times.iter().enumerate() {
        let mut f = skeleton.rest_pose(stamp(k));
        match kind {
            MotionKind::WalkCycle => stance.push(rig.walk(&mut f, t, opts)?),
            MotionKind::Squat => rig.squat(&mut f, t, opts)?,
            MotionKind::ArmWave => rig.arm_wave(&mut f, t)?,
            MotionKind::ScriptedFile(_) => unreachable!(),
        }
        frames.push(f);
    }
    let motion = MotionSequence::new(skeleton, frames, opts.rate_hz)
        .map_err(|e| SimError::Config(e.to_string()))?;
    let stance = (*kind == MotionKind::WalkCycle).then_some(stance);
    Ok(GeneratedMotion { motion, stance })
}

/// Rotates `(x, z)` counterclockwise by `phi`; `Ry(a)` acts on the sagittal
/// plane as a rotation by `-a`.
fn rot2(phi: f64, v: Vector2<f64>) -> Vector2<f64> {
    let (s, c) = phi.sin_cos();
    Vector2::new(c * v.x - s * v.y, s * v.x + c * v.y)
}

fn angle2(v: Vector2<f64>) -> f64 {
    v.y.atan2(v.x)
}

/// Two-link sagittal IK. Returns `(world hip pitch, knee pitch)` such that
/// `Ry(a)·(l1 + Ry(b)·l2)` reaches `d`, with the knee flexing backwards.
pub(crate) fn leg_ik(l1: Vector2<f64>, l2: Vector2<f64>, d: Vector2<f64>) -> Result<(f64, f64), SimError> {
    let (n1, n2, r) = (l1.norm(), l2.norm(), d.norm());
    if r > n1 + n2 || r < (n1 - n2).abs() {
        return Err(SimError::Config(format!("foot target at {r:.3} m is out of leg reach")));
    }
    let c = ((r * r - n1 * n1 - n2 * n2) / (2.0 * n1 * n2)).clamp(-1.0, 1.0);
    let alpha0 = angle2(l2) - angle2(l1);
    let phi2 = -c.acos() - alpha0;
    let v = l1 + rot2(phi2, l2);
    let phi1 = angle2(d) - angle2(v);
    Ok((-phi1, -phi2))
}

struct Rig {
    hip: [usize; 2],
    knee: [usize; 2],
    shoulder: [usize; 2],
    elbow: [usize; 2],
    hip_offset: [Vector3<f64>; 2],
    l1: Vector2<f64>,
    l2: Vector2<f64>,
    /// Pelvis height with straight rest legs and feet on the ground.
    rest_height: f64,
}

impl Rig {
    fn new(s: &SkeletonModel) -> Result<Self, SimError> {
        let j = |n: &str| s.joint_index(n).map_err(|e| SimError::Config(e.to_string()));
        let hip = [j("left_hip")?, j("right_hip")?];
        let knee = [j("left_knee")?, j("right_knee")?];
        let ankle = j("left_ankle")?;
        let foot = j("left_foot")?;
        let joints = s.joints();
        let o = |i: usize| joints[i].offset;
        let shank = o(ankle) + o(foot);
        let rest_height = -(o(hip[0]).z + o(knee[0]).z + shank.z);
        Ok(Self {
            hip,
            knee,
            shoulder: [j("left_shoulder")?, j("right_shoulder")?],
            elbow: [j("left_elbow")?, j("right_elbow")?],
            hip_offset: [o(hip[0]), o(hip[1])],
            l1: Vector2::new(o(knee[0]).x, o(knee[0]).z),
            l2: Vector2::new(shank.x, shank.z),
            rest_height,
        })
    }

    /// Places leg `side` so its foot joint lands on `target` (world), given
    /// the root pitch about y.
    fn place_leg(&self, f: &mut PoseFrame, side: usize, pitch: f64, target: Vector3<f64>) -> Result<(), SimError> {
        let hip = f.root_position + Rotation::ry(pitch).apply(&self.hip_offset[side]);
        let d = Vector2::new(target.x - hip.x, target.z - hip.z);
        let (a, b) = leg_ik(self.l1, self.l2, d)?;
        f.set_local_rotation(self.hip[side], Rotation::ry(a - pitch));
        f.set_local_rotation(self.knee[side], Rotation::ry(b));
        Ok(())
    }

    /// Left shoulder frame; the right side mirrors it through the sagittal
    /// plane (negate x- and z-rotation angles).
    fn set_arm(&self, f: &mut PoseFrame, side: usize, pitch: f64, raise: f64, yaw: f64, elbow: f64) {
        let m = if side == 0 { 1.0 } else { -1.0 };
        let shoulder = Rotation::ry(pitch) * Rotation::rz(m * yaw) * Rotation::rx(m * raise);
        f.set_local_rotation(self.shoulder[side], shoulder);
        f.set_local_rotation(self.elbow[side], Rotation::rz(-m * elbow));
    }

    fn walk(&self, f: &mut PoseFrame, t: f64, o: &MotionOptions) -> Result<[bool; 2], SimError> {
        let (v, period, beta) = (o.walk_speed, o.walk_period, o.stance_fraction);
        if !(0.0..1.0).contains(&beta) || beta <= 0.0 || period <= 0.0 {
            return Err(SimError::Config("walk period and stance fraction out of range".into()));
        }
        let stride = v * period;
        let half = 0.5 * v * beta * period;
        f.root_position = Vector3::new(v * t, 0.0, 0.93 * self.rest_height);
        let mut stance = [false; 2];
        for side in 0..2 {
            let p = (t / period + 0.5 * side as f64).fract();
            let (rel, lift) = if p < beta {
                stance[side] = true;
                (half - v * p * period, 0.0)
            } else {
                let s = (p - beta) / (1.0 - beta);
                let rel = -half + stride * 0.5 * (1.0 - (PI * s).cos()) - v * s * (1.0 - beta) * period;
                (rel, 0.10 * (PI * s).sin().powi(2))
            };
            let target = Vector3::new(v * t + rel, self.hip_offset[side].y, lift);
            self.place_leg(f, side, 0.0, target)?;
            let w = 2.0 * PI * (t / period + 0.5 * side as f64);
            self.set_arm(f, side, 0.35 * w.sin(), -80f64.to_radians(), 0.0, 0.3 + 0.15 * w.sin());
        }
        Ok(stance)
    }

    fn squat(&self, f: &mut PoseFrame, t: f64, o: &MotionOptions) -> Result<(), SimError> {
        let s = 0.5 * (1.0 - (2.0 * PI * o.squat_frequency * t).cos());
        let pitch = 0.6 * s;
        f.root_orientation = Rotation::ry(pitch);
        f.root_position = Vector3::new(-0.12 * s, 0.0, 0.96 * self.rest_height - o.squat_depth * s);
        for side in 0..2 {
            let target = Vector3::new(0.0, self.hip_offset[side].y, 0.0);
            self.place_leg(f, side, pitch, target)?;
            // arms reach forward and stay level
            self.set_arm(f, side, -pitch, 0.1 * s, -PI / 2.0, 0.2 + 0.4 * s);
        }
        Ok(())
    }

    fn arm_wave(&self, f: &mut PoseFrame, t: f64) -> Result<(), SimError> {
        f.root_position = Vector3::new(0.0, 0.0, 0.96 * self.rest_height);
        for side in 0..2 {
            let target = Vector3::new(0.0, self.hip_offset[side].y, 0.0);
            self.place_leg(f, side, 0.0, target)?;
            let ph = 0.5 * PI * side as f64;
            let raise = -0.4 + 0.9 * (2.0 * PI * 0.5 * t + ph).sin();
            let pitch = 0.25 * (2.0 * PI * 0.25 * t + ph).sin();
            let yaw = 0.3 * (2.0 * PI * 0.2 * t).sin();
            let elbow = 0.7 + 0.5 * (2.0 * PI * 1.0 * t + ph).sin();
            self.set_arm(f, side, pitch, raise, yaw, elbow);
        }
        Ok(())
    }
}

fn resample_script(
    path: &Path,
    skeleton: &Arc<SkeletonModel>,
    n: usize,
    rate_hz: f64,
) -> Result<Vec<PoseFrame>, SimError> {
    let rec = read_recording(path).map_err(|e| SimError::Script(format!("{}: {e}", path.display())))?;
    let keys = motion_from_recording(&rec, skeleton.clone())
        .map_err(|e| SimError::Script(format!("{}: {e}", path.display())))?
        .into_frames();
    let (first, last) = match (keys.first(), keys.last()) {
        (Some(a), Some(b)) => (a.timestamp_ms, b.timestamp_ms),
        _ => return Err(SimError::Script(format!("{}: no keyframes", path.display()))),
    };
    let mut out = Vec::with_capacity(n);
    let mut k = 0usize;
    for i in 0..n {
        let t = first + (i as f64 * 1000.0 / rate_hz).round() as i64;
        if t > last {
            return Err(SimError::Script(format!(
                "{}: script covers {} ms, shorter than the requested duration",
                path.display(),
                last - first
            )));
        }
        while keys[k].timestamp_ms < t && keys[k + 1].timestamp_ms <= t {
            k += 1;
        }
        let a = &keys[k];
        if a.timestamp_ms == t {
            out.push(a.clone());
            continue;
        }
        let b = &keys[k + 1];
        let u = (t - a.timestamp_ms) as f64 / (b.timestamp_ms - a.timestamp_ms) as f64;
        out.push(PoseFrame {
            timestamp_ms: t,
            root_orientation: a.root_orientation.slerp(&b.root_orientation, u),
            root_position: a.root_position.lerp(&b.root_position, u),
            joint_rotations: a
                .joint_rotations
                .iter()
                .zip(&b.joint_rotations)
                .map(|(x, y)| x.slerp(y, u))
                .collect(),
        });
    }
    Ok(out)
}
