//! Recording container: a text header block followed by length-prefixed
//! little-endian binary records. See `docs/formats.md` for the layout.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use nalgebra::Vector3;
use thiserror::Error;

use super::{HeadPose, TimedSample};
use crate::skeleton::{MotionSequence, PoseFrame, SkeletonModel};
use crate::so3::Rotation;

pub const RECORDING_MAGIC: &str = "bodyfuse-recording";
pub const RECORDING_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RecordingError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a recording file (missing `{RECORDING_MAGIC}` header)")]
    NotARecording,
    #[error("unsupported recording version {found} (this build reads version {RECORDING_VERSION})")]
    UnsupportedVersion { found: String },
    #[error("file truncated at byte offset {offset}")]
    Truncated { offset: usize },
    #[error("schema violation at byte offset {offset}: {message}")]
    Schema { offset: usize, message: String },
    #[error("cannot write recording: {0}")]
    Invalid(String),
}

fn schema(offset: usize, message: impl Into<String>) -> RecordingError {
    RecordingError::Schema {
        offset,
        message: message.into(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StreamData {
    Rotation(Vec<TimedSample<Rotation>>),
    Pose(Vec<TimedSample<HeadPose>>),
    Scalar(Vec<TimedSample<f64>>),
    /// Full body poses; `joint_rotations.len()` is fixed per stream.
    Joints(Vec<PoseFrame>),
}

impl StreamData {
    fn kind(&self) -> String {
        match self {
            StreamData::Rotation(_) => "rotation".into(),
            StreamData::Pose(_) => "pose".into(),
            StreamData::Scalar(_) => "scalar".into(),
            StreamData::Joints(f) => format!("joints:{}", f.first().map_or(0, |p| p.joint_rotations.len())),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            StreamData::Rotation(v) => v.len(),
            StreamData::Pose(v) => v.len(),
            StreamData::Scalar(v) => v.len(),
            StreamData::Joints(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn timestamps(&self) -> Vec<i64> {
        match self {
            StreamData::Rotation(v) => super::timestamps(v),
            StreamData::Pose(v) => super::timestamps(v),
            StreamData::Scalar(v) => super::timestamps(v),
            StreamData::Joints(v) => v.iter().map(|f| f.timestamp_ms).collect(),
        }
    }

    fn encode_payload(&self, i: usize, out: &mut Vec<u8>) {
        let mut put = |x: f64| out.extend_from_slice(&x.to_le_bytes());
        match self {
            StreamData::Rotation(v) => v[i].payload.wxyz().into_iter().for_each(&mut put),
            StreamData::Pose(v) => {
                v[i].payload.orientation.wxyz().into_iter().for_each(&mut put);
                v[i].payload.position.iter().for_each(|x| put(*x));
            }
            StreamData::Scalar(v) => put(v[i].payload),
            StreamData::Joints(v) => {
                let f = &v[i];
                f.root_orientation.wxyz().into_iter().for_each(&mut put);
                f.root_position.iter().for_each(|x| put(*x));
                for r in &f.joint_rotations {
                    r.wxyz().into_iter().for_each(&mut put);
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stream {
    pub name: String,
    pub source: u16,
    pub data: StreamData,
}

/// A set of named streams plus free-form metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Recording {
    pub meta: BTreeMap<String, String>,
    pub streams: Vec<Stream>,
}

impl Recording {
    pub fn stream(&self, name: &str) -> Option<&Stream> {
        self.streams.iter().find(|s| s.name == name)
    }

    pub fn rotation_stream(&self, name: &str) -> Option<&[TimedSample<Rotation>]> {
        match self.stream(name).map(|s| &s.data) {
            Some(StreamData::Rotation(v)) => Some(v),
            _ => None,
        }
    }

    pub fn pose_stream(&self, name: &str) -> Option<&[TimedSample<HeadPose>]> {
        match self.stream(name).map(|s| &s.data) {
            Some(StreamData::Pose(v)) => Some(v),
            _ => None,
        }
    }

    pub fn meta_i64(&self, key: &str) -> Option<i64> {
        self.meta.get(key).and_then(|v| v.parse().ok())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, RecordingError> {
        let mut out = Vec::new();
        out.extend_from_slice(format!("{RECORDING_MAGIC}\nversion {RECORDING_VERSION}\n").as_bytes());
        for (k, v) in &self.meta {
            if k.is_empty() || !k.chars().all(|c| c.is_ascii_alphanumeric() || "_.:/-".contains(c)) {
                return Err(RecordingError::Invalid(format!("bad meta key `{k}`")));
            }
            if v.contains('\n') {
                return Err(RecordingError::Invalid(format!("meta value for `{k}` contains a newline")));
            }
            out.extend_from_slice(format!("meta {k} {v}\n").as_bytes());
        }
        for (i, s) in self.streams.iter().enumerate() {
            if s.name.is_empty() || s.name.chars().any(char::is_whitespace) {
                return Err(RecordingError::Invalid(format!("bad stream name `{}`", s.name)));
            }
            if let StreamData::Joints(f) = &s.data {
                if f.iter().any(|p| p.joint_rotations.len() != f[0].joint_rotations.len()) {
                    return Err(RecordingError::Invalid(format!(
                        "stream `{}` mixes joint counts",
                        s.name
                    )));
                }
            }
            let ts = s.data.timestamps();
            if ts.windows(2).any(|w| w[1] <= w[0]) || ts.first().is_some_and(|t| *t < 0) {
                return Err(RecordingError::Invalid(format!(
                    "stream `{}` timestamps must be nonnegative and strictly increasing",
                    s.name
                )));
            }
            out.extend_from_slice(format!("stream {i} {} {} {}\n", s.data.kind(), s.source, s.name).as_bytes());
        }
        out.extend_from_slice(b"end\n");

        // Records interleaved by (timestamp, stream index).
        let mut order: Vec<(i64, usize, usize)> = self
            .streams
            .iter()
            .enumerate()
            .flat_map(|(si, s)| s.data.timestamps().into_iter().enumerate().map(move |(k, t)| (t, si, k)))
            .collect();
        order.sort_unstable();
        let mut payload = Vec::new();
        for (t, si, k) in order {
            payload.clear();
            self.streams[si].data.encode_payload(k, &mut payload);
            let len = (2 + 8 + payload.len()) as u32;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(&(si as u16).to_le_bytes());
            out.extend_from_slice(&t.to_le_bytes());
            out.extend_from_slice(&payload);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RecordingError> {
        let mut pos = 0usize;
        let next_line = |pos: &mut usize| -> Result<(usize, String), RecordingError> {
            let start = *pos;
            let rel = bytes[start..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or(RecordingError::Truncated { offset: bytes.len() })?;
            *pos = start + rel + 1;
            let line = std::str::from_utf8(&bytes[start..start + rel])
                .map_err(|_| schema(start, "header is not UTF-8"))?;
            Ok((start, line.to_string()))
        };

        let (_, magic) = next_line(&mut pos).map_err(|_| RecordingError::NotARecording)?;
        if magic != RECORDING_MAGIC {
            return Err(RecordingError::NotARecording);
        }
        let (off, version) = next_line(&mut pos)?;
        match version.strip_prefix("version ") {
            Some(v) if v == RECORDING_VERSION.to_string() => {}
            Some(v) => return Err(RecordingError::UnsupportedVersion { found: v.to_string() }),
            None => return Err(schema(off, "expected `version` line")),
        }

        let mut rec = Recording::default();
        let mut joint_counts = Vec::new();
        loop {
            let (off, line) = next_line(&mut pos)?;
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                rec.meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = line.strip_prefix("stream ") {
                let parts: Vec<&str> = rest.splitn(4, ' ').collect();
                if parts.len() != 4 {
                    return Err(schema(off, format!("malformed stream line `{line}`")));
                }
                let index: usize = parts[0].parse().map_err(|_| schema(off, "bad stream index"))?;
                if index != rec.streams.len() {
                    return Err(schema(off, format!("stream index {index} out of sequence")));
                }
                let source: u16 = parts[2].parse().map_err(|_| schema(off, "bad source id"))?;
                let (data, joints) = match parts[1] {
                    "rotation" => (StreamData::Rotation(Vec::new()), 0),
                    "pose" => (StreamData::Pose(Vec::new()), 0),
                    "scalar" => (StreamData::Scalar(Vec::new()), 0),
                    k => match k.strip_prefix("joints:").and_then(|n| n.parse::<usize>().ok()) {
                        Some(n) => (StreamData::Joints(Vec::new()), n),
                        None => return Err(schema(off, format!("unknown stream kind `{k}`"))),
                    },
                };
                joint_counts.push(joints);
                rec.streams.push(Stream {
                    name: parts[3].to_string(),
                    source,
                    data,
                });
            } else {
                return Err(schema(off, format!("unexpected header line `{line}`")));
            }
        }

        let mut last_ts: Vec<Option<i64>> = vec![None; rec.streams.len()];
        while pos < bytes.len() {
            let start = pos;
            if bytes.len() - pos < 4 {
                return Err(RecordingError::Truncated { offset: start });
            }
            let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes")) as usize;
            pos += 4;
            if bytes.len() - pos < len {
                return Err(RecordingError::Truncated { offset: start });
            }
            if len < 10 {
                return Err(schema(start, format!("record length {len} too short")));
            }
            let body = &bytes[pos..pos + len];
            pos += len;
            let si = u16::from_le_bytes([body[0], body[1]]) as usize;
            let t = i64::from_le_bytes(body[2..10].try_into().expect("8 bytes"));
            let payload = &body[10..];
            let Some(stream) = rec.streams.get_mut(si) else {
                return Err(schema(start, format!("record for unknown stream {si}")));
            };
            if t < 0 || last_ts[si].is_some_and(|p| t <= p) {
                return Err(schema(start, format!("stream `{}` timestamps not increasing", stream.name)));
            }
            last_ts[si] = Some(t);
            if payload.len() % 8 != 0 {
                return Err(schema(start, "payload is not a whole number of f64"));
            }
            let f: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let rot = |c: &[f64]| {
                Rotation::from_unit_components(c[0], c[1], c[2], c[3])
                    .map_err(|e| schema(start, e.to_string()))
            };
            let expect = |n: usize| {
                if f.len() == n {
                    Ok(())
                } else {
                    Err(schema(start, format!("payload has {} values, kind needs {n}", f.len())))
                }
            };
            let source = stream.source;
            match &mut stream.data {
                StreamData::Rotation(v) => {
                    expect(4)?;
                    v.push(TimedSample::new(t, source, rot(&f)?));
                }
                StreamData::Pose(v) => {
                    expect(7)?;
                    v.push(TimedSample::new(
                        t,
                        source,
                        HeadPose {
                            orientation: rot(&f[..4])?,
                            position: Vector3::new(f[4], f[5], f[6]),
                        },
                    ));
                }
                StreamData::Scalar(v) => {
                    expect(1)?;
                    v.push(TimedSample::new(t, source, f[0]));
                }
                StreamData::Joints(v) => {
                    let n = joint_counts[si];
                    expect(7 + 4 * n)?;
                    let joint_rotations = f[7..]
                        .chunks_exact(4)
                        .map(rot)
                        .collect::<Result<Vec<_>, _>>()?;
                    v.push(PoseFrame {
                        timestamp_ms: t,
                        root_orientation: rot(&f[..4])?,
                        root_position: Vector3::new(f[4], f[5], f[6]),
                        joint_rotations,
                    });
                }
            }
        }
        Ok(rec)
    }
}

pub fn write_recording(rec: &Recording, path: &Path) -> Result<(), RecordingError> {
    let bytes = rec.to_bytes()?;
    std::fs::write(path, bytes).map_err(|source| RecordingError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_recording(path: &Path) -> Result<Recording, RecordingError> {
    let bytes = std::fs::read(path).map_err(|source| RecordingError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Recording::from_bytes(&bytes)
}

pub const MOTION_STREAM: &str = "motion";

/// Wraps a motion sequence as a single-stream recording.
pub fn motion_to_recording(motion: &MotionSequence, mut meta: BTreeMap<String, String>) -> Recording {
    meta.insert("content".into(), "motion".into());
    meta.insert("rate_hz".into(), motion.rate_hz.to_string());
    meta.insert("skeleton.name".into(), motion.skeleton.name.clone());
    meta.insert("skeleton.version".into(), motion.skeleton.version.to_string());
    Recording {
        meta,
        streams: vec![Stream {
            name: MOTION_STREAM.into(),
            source: 0,
            data: StreamData::Joints(motion.frames().to_vec()),
        }],
    }
}

pub fn motion_from_recording(
    rec: &Recording,
    skeleton: Arc<SkeletonModel>,
) -> Result<MotionSequence, RecordingError> {
    let bad = |m: String| schema(0, m);
    match rec.meta.get("skeleton.name") {
        Some(n) if *n == skeleton.name => {}
        other => return Err(bad(format!("motion skeleton {other:?} does not match `{}`", skeleton.name))),
    }
    if rec.meta.get("skeleton.version") != Some(&skeleton.version.to_string()) {
        return Err(bad("skeleton version mismatch".into()));
    }
    let rate: f64 = rec
        .meta
        .get("rate_hz")
        .and_then(|r| r.parse().ok())
        .ok_or_else(|| bad("missing rate_hz".into()))?;
    let frames = match rec.stream(MOTION_STREAM).map(|s| &s.data) {
        Some(StreamData::Joints(f)) => f.clone(),
        _ => return Err(bad("missing `motion` joints stream".into())),
    };
    MotionSequence::new(skeleton, frames, rate).map_err(|e| bad(e.to_string()))
}
