//! Root trajectory from the head-mounted SLAM pose.

use nalgebra::Vector3;

use super::{FusionError, TrackedBones};
use crate::skeleton::{forward_kinematics, PoseFrame, SkeletonModel, TrackedBone};
use crate::so3::{yaw_project, Rotation};
use crate::stream::{HeadPose, TimedSample};

#[derive(Clone, Debug, PartialEq)]
pub struct RootAnchor {
    pub timestamp_ms: i64,
    /// SLAM pose interpolated to this instant.
    pub head: HeadPose,
    pub pelvis_orientation: Rotation,
    pub pelvis_position: Vector3<f64>,
    /// Pelvis-to-head vector in the pelvis frame.
    pub head_offset: Vector3<f64>,
    /// Whether the torso came from the tracked pelvis (else head yaw).
    pub from_pelvis_tracker: bool,
}

/// Linear pose interpolation in SLAM time. Past either end the nearest pair
/// is extrapolated for at most one sample interval, then held.
fn interpolate(slam: &[TimedSample<HeadPose>], cursor: &mut usize, t: i64) -> HeadPose {
    if slam.len() == 1 {
        return slam[0].payload;
    }
    while *cursor + 2 < slam.len() && slam[*cursor + 1].timestamp_ms <= t {
        *cursor += 1;
    }
    let (a, b) = (&slam[*cursor], &slam[*cursor + 1]);
    if t == a.timestamp_ms {
        return a.payload;
    }
    if t == b.timestamp_ms {
        return b.payload;
    }
    let span = (b.timestamp_ms - a.timestamp_ms) as f64;
    let u = ((t - a.timestamp_ms) as f64 / span).clamp(-1.0, 2.0);
    HeadPose {
        orientation: a.payload.orientation.slerp(&b.payload.orientation, u),
        position: a.payload.position.lerp(&b.payload.position, u),
    }
}

/// Pelvis-frame vector from the root to the head joint for a pose.
pub fn head_offset(skeleton: &SkeletonModel, pose: &PoseFrame) -> Result<Vector3<f64>, FusionError> {
    let head = skeleton.joint_index("head").map_err(|e| FusionError::Input(e.to_string()))?;
    let mut local = pose.clone();
    local.root_orientation = Rotation::identity();
    local.root_position = Vector3::zeros();
    let kin = forward_kinematics(skeleton, &local).map_err(|e| FusionError::Input(e.to_string()))?;
    Ok(kin.positions[head])
}

/// Places the pelvis below the head for every tracked frame.
///
/// The torso orientation is the tracked pelvis bone mapped back to the root
/// frame, or the head yaw when the pelvis is unavailable. The head offset is
/// taken from `pose_estimate` (rest pose if absent), so bending the spine in
/// the estimate moves the anchor.
pub fn anchor_root(
    slam: &[TimedSample<HeadPose>],
    tracked: &TrackedBones,
    skeleton: &SkeletonModel,
    pose_estimate: Option<&[PoseFrame]>,
) -> Result<Vec<RootAnchor>, FusionError> {
    if slam.is_empty() {
        return Err(FusionError::Input("SLAM stream is empty".into()));
    }
    if let Some(k) = slam.windows(2).position(|w| w[1].timestamp_ms <= w[0].timestamp_ms) {
        return Err(FusionError::Input(format!("SLAM stream is not time-ordered at sample {}", k + 1)));
    }
    if let Some(p) = pose_estimate {
        if p.len() != tracked.frames.len() {
            return Err(FusionError::Input(format!(
                "{} pose estimates for {} frames",
                p.len(),
                tracked.frames.len()
            )));
        }
    }
    let pelvis_rest = skeleton.tracked(TrackedBone::Pelvis).rest;
    let rest_offset = head_offset(skeleton, &skeleton.rest_pose(0))?;
    let mut cursor = 0;
    tracked
        .frames
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let head = interpolate(slam, &mut cursor, f.timestamp_ms);
            let offset = match pose_estimate {
                Some(p) => head_offset(skeleton, &p[k])?,
                None => rest_offset,
            };
            let norm = offset.norm();
            if !(0.3..=1.0).contains(&norm) {
                return Err(FusionError::Input(format!("head-to-pelvis offset {norm:.3} m is implausible")));
            }
            let (torso, from_pelvis) = match f.bone(TrackedBone::Pelvis) {
                Some(b) if f.weight(TrackedBone::Pelvis) > 0.0 => (b * pelvis_rest.inverse(), true),
                _ => (yaw_project(&head.orientation, &Vector3::z()).rotation, false),
            };
            Ok(RootAnchor {
                timestamp_ms: f.timestamp_ms,
                head,
                pelvis_orientation: torso,
                pelvis_position: head.position - torso.apply(&offset),
                head_offset: offset,
                from_pelvis_tracker: from_pelvis,
            })
        })
        .collect()
}
