//! Per-frame bone orientations in the pelvis world:
//! `W_p R_B_i = W_p R_W_i · W_i R_S_i · (B_i R_S_i)ᵀ`.

use super::FusionError;
use crate::calib::CalibrationResult;
use crate::skeleton::TrackedBone;
use crate::so3::Rotation;
use crate::stream::TimedSample;

/// A held sample older than this is stale.
pub const STALE_AFTER_MS: i64 = 50;
/// Staleness at which a held sample stops counting at all.
pub const STALE_ZERO_MS: i64 = 500;

#[derive(Clone, Debug, PartialEq)]
pub struct TrackedFrame {
    pub timestamp_ms: i64,
    /// `W_p R_B_i` per tracker id; `None` before the first sample or for an
    /// absent tracker.
    pub bones: Vec<Option<Rotation>>,
    /// Age of the held sample, ms.
    pub staleness_ms: Vec<Option<i64>>,
}

impl TrackedFrame {
    pub fn bone(&self, t: TrackedBone) -> Option<Rotation> {
        self.bones[t.id() as usize]
    }

    pub fn is_stale(&self, t: TrackedBone) -> bool {
        self.staleness_ms[t.id() as usize].is_none_or(|s| s > STALE_AFTER_MS)
    }

    /// Residual weight: 1 while fresh, falling linearly to 0 at
    /// [`STALE_ZERO_MS`].
    pub fn weight(&self, t: TrackedBone) -> f64 {
        match self.staleness_ms[t.id() as usize] {
            None => 0.0,
            Some(s) if s <= STALE_AFTER_MS => 1.0,
            Some(s) => ((STALE_ZERO_MS - s) as f64 / (STALE_ZERO_MS - STALE_AFTER_MS) as f64).max(0.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackedBones {
    pub frames: Vec<TrackedFrame>,
}

impl TrackedBones {
    pub fn timestamps(&self) -> Vec<i64> {
        self.frames.iter().map(|f| f.timestamp_ms).collect()
    }
}

/// Applies the calibration to every IMU stream, sample-and-hold on the union
/// of all IMU timestamps.
pub fn track_bones(
    imu: &[Vec<TimedSample<Rotation>>],
    calib: &CalibrationResult,
) -> Result<TrackedBones, FusionError> {
    let n = TrackedBone::ALL.len();
    if imu.len() != n {
        return Err(FusionError::Input(format!("{} IMU streams, expected {n}", imu.len())));
    }
    let mut correction: Vec<Option<(Rotation, Rotation)>> = vec![None; n];
    for t in TrackedBone::ALL {
        let i = t.id() as usize;
        if imu[i].is_empty() {
            continue;
        }
        if let Some(k) = imu[i].windows(2).position(|w| w[1].timestamp_ms <= w[0].timestamp_ms) {
            return Err(FusionError::Input(format!(
                "imu/{} is not time-ordered at sample {}",
                t.name(),
                k + 1
            )));
        }
        let c = calib.get(t).ok_or(FusionError::MissingCalibration(t.name()))?;
        correction[i] = Some((c.heading, c.bone_to_sensor.inverse()));
    }
    let mut timeline: Vec<i64> = imu.iter().flatten().map(|s| s.timestamp_ms).collect();
    timeline.sort_unstable();
    timeline.dedup();
    if timeline.is_empty() {
        return Err(FusionError::Input("no IMU samples".into()));
    }

    let mut cursor = vec![0usize; n];
    let frames = timeline
        .iter()
        .map(|&t| {
            let mut bones = vec![None; n];
            let mut staleness = vec![None; n];
            for i in 0..n {
                let (Some((heading, sensor_to_bone)), s) = (correction[i], &imu[i]) else {
                    continue;
                };
                while cursor[i] + 1 < s.len() && s[cursor[i] + 1].timestamp_ms <= t {
                    cursor[i] += 1;
                }
                let held = &s[cursor[i]];
                if held.timestamp_ms <= t {
                    bones[i] = Some(heading * held.payload * sensor_to_bone);
                    staleness[i] = Some(t - held.timestamp_ms);
                }
            }
            TrackedFrame {
                timestamp_ms: t,
                bones,
                staleness_ms: staleness,
            }
        })
        .collect();
    Ok(TrackedBones { frames })
}
