//! Foot-ground contact from a pose sequence.

use nalgebra::Vector3;

use super::FusionError;
use crate::skeleton::{forward_kinematics, PoseFrame, SkeletonModel};

#[derive(Clone, Debug, PartialEq)]
pub struct ContactOptions {
    /// Contact band above the ground plane, m.
    pub height_m: f64,
    /// Largest foot speed still counted as planted, m/s.
    pub speed_m_s: f64,
    /// The ground plane is the lowest foot height over this leading span.
    pub ground_window_ms: i64,
}

impl Default for ContactOptions {
    fn default() -> Self {
        Self {
            height_m: 0.05,
            speed_m_s: 0.2,
            ground_window_ms: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContactFlags {
    pub ground: f64,
    /// `[left, right]` per frame.
    pub flags: Vec<[bool; 2]>,
}

pub const FOOT_JOINTS: [&str; 2] = ["left_foot", "right_foot"];

pub fn foot_positions(skeleton: &SkeletonModel, poses: &[PoseFrame]) -> Result<Vec<[Vector3<f64>; 2]>, FusionError> {
    let feet = FOOT_JOINTS.map(|n| skeleton.joint_index(n));
    let [Ok(l), Ok(r)] = feet else {
        return Err(FusionError::Input("skeleton has no foot joints".into()));
    };
    poses
        .iter()
        .map(|p| {
            let k = forward_kinematics(skeleton, p).map_err(|e| FusionError::Input(e.to_string()))?;
            Ok([k.positions[l], k.positions[r]])
        })
        .collect()
}

/// A foot is in contact when it is within `height_m` of the ground and
/// slower than `speed_m_s` (central differences in time).
pub fn detect_contact(
    poses: &[PoseFrame],
    skeleton: &SkeletonModel,
    opts: &ContactOptions,
) -> Result<ContactFlags, FusionError> {
    if poses.is_empty() {
        return Ok(ContactFlags {
            ground: 0.0,
            flags: Vec::new(),
        });
    }
    let feet = foot_positions(skeleton, poses)?;
    let t0 = poses[0].timestamp_ms;
    let ground = feet
        .iter()
        .zip(poses)
        .filter(|(_, p)| p.timestamp_ms - t0 < opts.ground_window_ms)
        .flat_map(|(f, _)| [f[0].z, f[1].z])
        .fold(f64::INFINITY, f64::min);
    let n = poses.len();
    let flags = (0..n)
        .map(|k| {
            let (a, b) = (k.saturating_sub(1), (k + 1).min(n - 1));
            let dt = (poses[b].timestamp_ms - poses[a].timestamp_ms) as f64 / 1000.0;
            [0, 1].map(|s| {
                let speed = if dt > 0.0 { (feet[b][s] - feet[a][s]).norm() / dt } else { 0.0 };
                feet[k][s].z < ground + opts.height_m && speed < opts.speed_m_s
            })
        })
        .collect();
    Ok(ContactFlags { ground, flags })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_motion_with, MotionKind, MotionOptions};
    use crate::skeleton::default_skeleton;
    use std::sync::Arc;

    #[test]
    fn standing_is_in_contact() {
        let s = default_skeleton();
        let poses: Vec<_> = (0..50).map(|k| s.rest_pose(k * 10)).collect();
        let c = detect_contact(&poses, &s, &ContactOptions::default()).unwrap();
        assert!(c.flags.iter().all(|f| f[0] && f[1]));
    }

    #[test]
    fn airborne_is_not() {
        let s = default_skeleton();
        let mut poses: Vec<_> = (0..100).map(|k| s.rest_pose(k * 10)).collect();
        // ground learned in the first second, then lift off by 30 cm
        for p in poses.iter_mut().skip(60) {
            p.root_position.z = 0.3;
        }
        let opts = ContactOptions { ground_window_ms: 500, ..ContactOptions::default() };
        let c = detect_contact(&poses, &s, &opts).unwrap();
        assert!(c.flags[62..].iter().all(|f| !f[0] && !f[1]));
        assert!(c.flags[..58].iter().all(|f| f[0] && f[1]));
    }

    #[test]
    fn walk_duty_cycle_matches_script() {
        let s = Arc::new(default_skeleton());
        let g = generate_motion_with(&MotionKind::WalkCycle, 12.0, s.clone(), &MotionOptions::default()).unwrap();
        let c = detect_contact(g.motion.frames(), &s, &ContactOptions::default()).unwrap();
        let stance = g.stance.unwrap();
        for side in 0..2 {
            let script = stance.iter().filter(|f| f[side]).count() as f64;
            let found = c.flags.iter().filter(|f| f[side]).count() as f64;
            assert!((found - script).abs() / script < 0.10, "side {side}: {found} vs {script}");
        }
        // alternating single support exists
        assert!(c.flags.iter().any(|f| f[0] && !f[1]) && c.flags.iter().any(|f| !f[0] && f[1]));
    }
}
