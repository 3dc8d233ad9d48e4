//! The per-session sensor set and its mapping onto recording streams.

use std::collections::BTreeMap;

use super::recording::{Recording, RecordingError, Stream, StreamData};
use super::{HeadPose, TimedSample};
use crate::skeleton::TrackedBone;
use crate::so3::Rotation;

pub const META_CALIBRATION_START: &str = "calibration.start_ms";
pub const META_CALIBRATION_END: &str = "calibration.end_ms";
pub const SLAM_STREAM: &str = "slam";
pub const CAMERA_SOURCE: u16 = 100;
pub const GLASSES_SOURCE: u16 = 200;

const TRACKERS: usize = TrackedBone::ALL.len();

/// Everything a capture session produces, indexed by tracker id.
///
/// `imu[i]` holds `W_i R_S_i`, `tags[i]` holds `C_s R_T_i`, `bones[i]`
/// holds the vision estimate `C_s R_B_i`. Tag and bone samples share the
/// phone clock; calibration markers are on that clock too.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorStreams {
    pub imu: Vec<Vec<TimedSample<Rotation>>>,
    pub tags: Vec<Vec<TimedSample<Rotation>>>,
    pub bones: Vec<Vec<TimedSample<Rotation>>>,
    pub slam: Vec<TimedSample<HeadPose>>,
    /// Fixed tag-to-IMU mounting rotation `T_i R_S_i`, when known.
    pub tag_to_sensor: Vec<Option<Rotation>>,
    pub calibration_window: Option<(i64, i64)>,
    pub meta: BTreeMap<String, String>,
}

impl Default for SensorStreams {
    fn default() -> Self {
        Self {
            imu: vec![Vec::new(); TRACKERS],
            tags: vec![Vec::new(); TRACKERS],
            bones: vec![Vec::new(); TRACKERS],
            slam: Vec::new(),
            tag_to_sensor: vec![None; TRACKERS],
            calibration_window: None,
            meta: BTreeMap::new(),
        }
    }
}

fn quat_text(r: &Rotation) -> String {
    let [w, x, y, z] = r.wxyz();
    format!("{w:?} {x:?} {y:?} {z:?}")
}

fn parse_quat(text: &str) -> Option<Rotation> {
    let v: Vec<f64> = text.split_whitespace().map(|t| t.parse().ok()).collect::<Option<_>>()?;
    if v.len() != 4 {
        return None;
    }
    Rotation::from_unit_components(v[0], v[1], v[2], v[3]).ok()
}

impl SensorStreams {
    pub fn to_recording(&self) -> Recording {
        let mut meta = self.meta.clone();
        if let Some((a, b)) = self.calibration_window {
            meta.insert(META_CALIBRATION_START.into(), a.to_string());
            meta.insert(META_CALIBRATION_END.into(), b.to_string());
        }
        let mut streams = Vec::new();
        for bone in TrackedBone::ALL {
            let i = bone.id() as usize;
            if let Some(r) = &self.tag_to_sensor[i] {
                meta.insert(format!("tag_to_sensor.{}", bone.name()), quat_text(r));
            }
            for (prefix, data, source) in [
                ("imu", &self.imu[i], bone.id() as u16),
                ("tag", &self.tags[i], CAMERA_SOURCE),
                ("bone", &self.bones[i], CAMERA_SOURCE),
            ] {
                if !data.is_empty() {
                    streams.push(Stream {
                        name: format!("{prefix}/{}", bone.name()),
                        source,
                        data: StreamData::Rotation(data.clone()),
                    });
                }
            }
        }
        if !self.slam.is_empty() {
            streams.push(Stream {
                name: SLAM_STREAM.into(),
                source: GLASSES_SOURCE,
                data: StreamData::Pose(self.slam.clone()),
            });
        }
        Recording { meta, streams }
    }

    /// Absent streams come back empty; unknown streams are ignored.
    pub fn from_recording(rec: &Recording) -> Result<Self, RecordingError> {
        let bad = |m: String| RecordingError::Schema { offset: 0, message: m };
        let mut out = SensorStreams::default();
        for bone in TrackedBone::ALL {
            let i = bone.id() as usize;
            let get = |prefix: &str| -> Result<Vec<TimedSample<Rotation>>, RecordingError> {
                let name = format!("{prefix}/{}", bone.name());
                match rec.stream(&name).map(|s| &s.data) {
                    None => Ok(Vec::new()),
                    Some(StreamData::Rotation(v)) => Ok(v.clone()),
                    Some(_) => Err(bad(format!("stream `{name}` is not a rotation stream"))),
                }
            };
            out.imu[i] = get("imu")?;
            out.tags[i] = get("tag")?;
            out.bones[i] = get("bone")?;
            let key = format!("tag_to_sensor.{}", bone.name());
            if let Some(text) = rec.meta.get(&key) {
                out.tag_to_sensor[i] =
                    Some(parse_quat(text).ok_or_else(|| bad(format!("bad quaternion in `{key}`")))?);
            }
        }
        out.slam = match rec.stream(SLAM_STREAM).map(|s| &s.data) {
            None => Vec::new(),
            Some(StreamData::Pose(v)) => v.clone(),
            Some(_) => return Err(bad("stream `slam` is not a pose stream".into())),
        };
        out.calibration_window = match (rec.meta.get(META_CALIBRATION_START), rec.meta.get(META_CALIBRATION_END)) {
            (None, None) => None,
            (Some(a), Some(b)) => match (a.parse(), b.parse()) {
                (Ok(a), Ok(b)) if a <= b => Some((a, b)),
                _ => return Err(bad("malformed calibration window markers".into())),
            },
            _ => return Err(bad("calibration window needs both start and end markers".into())),
        };
        out.meta = rec
            .meta
            .iter()
            .filter(|(k, _)| !k.starts_with("tag_to_sensor.") && !k.starts_with("calibration."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Ok(out)
    }
}
