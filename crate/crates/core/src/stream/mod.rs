//! Sensor stream plumbing: timestamped samples, the tracker wire format,
//! nearest-neighbor synchronization and the recording container.

mod packet;
mod recording;
mod sensors;
mod sync;

pub use packet::{crc16_ccitt, decode_packet, encode_packet, PacketError, TrackerPacket, PACKET_LEN, PACKET_MAGIC};
pub use recording::{
    motion_from_recording, motion_to_recording, read_recording, write_recording, Recording,
    RecordingError, Stream, StreamData, MOTION_STREAM, RECORDING_MAGIC, RECORDING_VERSION,
};
pub use sensors::{
    SensorStreams, CAMERA_SOURCE, GLASSES_SOURCE, META_CALIBRATION_END, META_CALIBRATION_START,
    SLAM_STREAM,
};
pub use sync::{synchronize, AlignedFrame, SyncEntry, SyncError, DEFAULT_MAX_GAP_MS};

use nalgebra::Vector3;

use crate::so3::Rotation;

/// A payload stamped with UTC milliseconds.
#[derive(Clone, Debug, PartialEq)]
pub struct TimedSample<T> {
    pub timestamp_ms: i64,
    pub source: u16,
    pub payload: T,
}

impl<T> TimedSample<T> {
    pub fn new(timestamp_ms: i64, source: u16, payload: T) -> Self {
        Self {
            timestamp_ms,
            source,
            payload,
        }
    }
}

/// Head-mounted device pose in the SLAM world frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadPose {
    pub orientation: Rotation,
    pub position: Vector3<f64>,
}

pub fn timestamps<T>(samples: &[TimedSample<T>]) -> Vec<i64> {
    samples.iter().map(|s| s.timestamp_ms).collect()
}
