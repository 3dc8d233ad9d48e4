//! Ground-truth motion plus a seeded corruption model for every sensor.
//!
//! The simulated world frame doubles as the pelvis IMU world `W_p` and the
//! SLAM world `W_c`. Each tracker reads
//! `W_i R_S_i(t) = Rz(drift·t) · (W_p R_W_i)ᵀ · B_i(t) · B_i R_S_i · exp(n)`,
//! each tag `C_s R_T_i = C_s R_W · B_i · B_i R_S_i · (T_i R_S_i)ᵀ · exp(n)`
//! and each vision bone `C_s R_B_i = C_s R_W · B_i · exp(n)`.

mod motion;

pub use motion::{
    generate_motion, generate_motion_with, GeneratedMotion, MotionKind, MotionOptions, DEFAULT_START_MS,
};

use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::skeleton::{forward_kinematics, MotionSequence, TrackedBone};
use crate::so3::{Rotation, RotationVector};
use crate::stream::{HeadPose, SensorStreams, TimedSample};

pub const SIM_CONFIG_VERSION: u32 = 1;
const TRACKERS: usize = TrackedBone::ALL.len();

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("unknown motion kind `{0}` (expected walk-cycle, squat, arm-wave or scripted-file:<path>)")]
    UnknownMotion(String),
    #[error("scripted motion: {0}")]
    Script(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClockOffsets {
    /// Tracker hub clock minus true time, ms.
    pub imu: i64,
    pub phone: i64,
    pub glasses: i64,
}

/// The rotations a real session would have to discover, plus the camera pose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    /// `B_i R_S_i` per tracker id.
    pub bone_to_sensor: Vec<Rotation>,
    /// `T_i R_S_i` per tracker id.
    pub tag_to_sensor: Vec<Rotation>,
    /// `W_p R_W_i` per tracker id, rotations about z; the pelvis entry is I.
    pub heading: Vec<Rotation>,
    /// `C_s R_W` during calibration.
    pub camera: Rotation,
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        if let Ok(r) = Rotation::from_quaternion(q[0], q[1], q[2], q[3]) {
            return r;
        }
    }
}

fn gaussian_vector(rng: &mut ChaCha8Rng, sigma: f64) -> RotationVector {
    let v: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
    RotationVector(Vector3::new(v[0], v[1], v[2]) * sigma)
}

/// Isotropic tangent-space perturbation `exp(n)`, `n ~ N(0, σ²I)`.
pub fn perturbation(rng: &mut ChaCha8Rng, sigma: f64) -> Rotation {
    Rotation::exp(&gaussian_vector(rng, sigma))
}

/// Independent generator for one noise source of one seed.
pub fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// stream ids of the noise sources
const S_TRUTH: u64 = 1;
const S_IMU: u64 = 100;
const S_TAG: u64 = 200;
const S_DROPOUT: u64 = 300;
const S_BONE: u64 = 400;
const S_RECALL: u64 = 500;
const S_SLAM: u64 = 600;
const S_JITTER: u64 = 700;

impl GroundTruth {
    pub fn random(seed: u64) -> Self {
        let mut rng = seeded_stream(seed, S_TRUTH);
        let bone_to_sensor = (0..TRACKERS).map(|_| random_rotation(&mut rng)).collect();
        let tag_to_sensor = (0..TRACKERS).map(|_| random_rotation(&mut rng)).collect();
        let heading = (0..TRACKERS)
            .map(|i| {
                let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                if i == TrackedBone::Pelvis.id() as usize {
                    Rotation::identity()
                } else {
                    Rotation::rz(yaw)
                }
            })
            .collect();
        let camera = random_rotation(&mut rng);
        Self {
            bone_to_sensor,
            tag_to_sensor,
            heading,
            camera,
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        for (name, v) in [
            ("bone_to_sensor", &self.bone_to_sensor),
            ("tag_to_sensor", &self.tag_to_sensor),
            ("heading", &self.heading),
        ] {
            if v.len() != TRACKERS {
                return Err(SimError::Config(format!("truth.{name} needs {TRACKERS} entries, has {}", v.len())));
            }
        }
        for (i, h) in self.heading.iter().enumerate() {
            let q = h.canonical_quaternion();
            if q.i.hypot(q.j) > 1e-9 {
                return Err(SimError::Config(format!("truth.heading[{i}] is not a rotation about z")));
            }
        }
        if self.heading[TrackedBone::Pelvis.id() as usize].angle() > 1e-12 {
            return Err(SimError::Config("truth.heading of the pelvis must be the identity".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub version: u32,
    pub seed: u64,
    pub imu_rate_hz: f64,
    /// Shared by camera detections and SLAM poses.
    pub camera_rate_hz: f64,
    pub imu_noise_rad: f64,
    /// Heading drift about gravity, the same for every tracker.
    pub imu_drift_rad_per_s: f64,
    pub tag_noise_rad: f64,
    pub tag_dropout: f64,
    pub bone_noise_rad: f64,
    /// Probability a camera frame yields a body estimate.
    pub bone_recall: f64,
    pub slam_drift_m_per_s: f64,
    /// Per-frame handheld camera wobble.
    pub camera_jitter_rad: f64,
    pub calibration_start_s: f64,
    pub calibration_duration_s: f64,
    pub clock_offset_ms: ClockOffsets,
    /// Drawn from the seed when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth: Option<GroundTruth>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            version: SIM_CONFIG_VERSION,
            seed: 0,
            imu_rate_hz: 100.0,
            camera_rate_hz: 30.0,
            imu_noise_rad: 0.5f64.to_radians(),
            imu_drift_rad_per_s: 0.05f64.to_radians(),
            tag_noise_rad: 1f64.to_radians(),
            tag_dropout: 0.0,
            bone_noise_rad: 2f64.to_radians(),
            bone_recall: 1.0,
            slam_drift_m_per_s: 0.0,
            camera_jitter_rad: 0.0,
            calibration_start_s: 0.0,
            calibration_duration_s: 5.0,
            clock_offset_ms: ClockOffsets::default(),
            truth: None,
        }
    }
}

impl SimConfig {
    /// No noise, drift, dropout or clock offsets.
    pub fn noiseless() -> Self {
        Self {
            imu_noise_rad: 0.0,
            imu_drift_rad_per_s: 0.0,
            tag_noise_rad: 0.0,
            bone_noise_rad: 0.0,
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, SimError> {
        let cfg: SimConfig = toml::from_str(text).map_err(|e| SimError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|source| SimError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let err = |m: String| Err(SimError::Config(m));
        if self.version != SIM_CONFIG_VERSION {
            return err(format!("version {} unsupported (expected {SIM_CONFIG_VERSION})", self.version));
        }
        for (name, v) in [("imu_rate_hz", self.imu_rate_hz), ("camera_rate_hz", self.camera_rate_hz)] {
            if !(v > 0.0 && v.is_finite()) {
                return err(format!("{name} = {v} must be positive"));
            }
        }
        for (name, v) in [
            ("imu_noise_rad", self.imu_noise_rad),
            ("tag_noise_rad", self.tag_noise_rad),
            ("bone_noise_rad", self.bone_noise_rad),
            ("slam_drift_m_per_s", self.slam_drift_m_per_s),
            ("camera_jitter_rad", self.camera_jitter_rad),
            ("calibration_start_s", self.calibration_start_s),
            ("calibration_duration_s", self.calibration_duration_s),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return err(format!("{name} = {v} must be finite and nonnegative"));
            }
        }
        // drift is a signed rate
        if !self.imu_drift_rad_per_s.is_finite() {
            return err("imu_drift_rad_per_s must be finite".into());
        }
        for (name, p) in [("tag_dropout", self.tag_dropout), ("bone_recall", self.bone_recall)] {
            if !(0.0..=1.0).contains(&p) {
                return err(format!("{name} = {p} must be a probability"));
            }
        }
        let o = self.clock_offset_ms;
        for (name, v) in [("imu", o.imu), ("phone", o.phone), ("glasses", o.glasses)] {
            if v.abs() > 100 {
                return err(format!("clock_offset_ms.{name} = {v} is outside ±100 ms"));
            }
        }
        if let Some(t) = &self.truth {
            t.validate()?;
        }
        Ok(())
    }

    pub fn ground_truth(&self) -> GroundTruth {
        self.truth.clone().unwrap_or_else(|| GroundTruth::random(self.seed))
    }
}

/// Simulator output: the truth and everything the sensors reported.
#[derive(Clone, Debug, PartialEq)]
pub struct SimBundle {
    pub motion: MotionSequence,
    pub sensors: SensorStreams,
    pub truth: GroundTruth,
}

/// Frame indices sampled at `rate` from a motion at `motion_rate`, starting
/// at frame `first` and ending before `end`.
fn sample_frames(motion_rate: f64, rate: f64, first: usize, end: usize) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for k in 0.. {
        let f = first + (k as f64 * motion_rate / rate).round() as usize;
        if f >= end {
            break;
        }
        if out.last() != Some(&f) {
            out.push(f);
        }
    }
    out
}

pub fn simulate_sensors(motion: &MotionSequence, cfg: &SimConfig) -> Result<SimBundle, SimError> {
    cfg.validate()?;
    if motion.is_empty() {
        return Err(SimError::Config("motion has no frames".into()));
    }
    let truth = cfg.ground_truth();
    truth.validate()?;
    let skel = &motion.skeleton;
    let head = skel.joint_index("head").map_err(|e| SimError::Config(e.to_string()))?;
    let tracked: Vec<_> = TrackedBone::ALL.iter().map(|b| skel.tracked(*b).clone()).collect();
    let frames = motion.frames();
    let n = frames.len();
    let kin: Vec<_> = frames
        .iter()
        .map(|f| forward_kinematics(skel, f).map_err(|e| SimError::Config(e.to_string())))
        .collect::<Result<_, _>>()?;
    let t0 = frames[0].timestamp_ms;
    let secs = |f: usize| (frames[f].timestamp_ms - t0) as f64 / 1000.0;
    let bone_at = |f: usize, i: usize| kin[f].bone_orientation(&tracked[i]);
    let off = cfg.clock_offset_ms;

    let mut out = SensorStreams::default();
    out.meta.insert("seed".into(), cfg.seed.to_string());
    out.tag_to_sensor = truth.tag_to_sensor.iter().copied().map(Some).collect();

    for i in 0..TRACKERS {
        let mut rng = seeded_stream(cfg.seed, S_IMU + i as u64);
        let to_local = truth.heading[i].inverse();
        out.imu[i] = sample_frames(motion.rate_hz, cfg.imu_rate_hz, 0, n)
            .into_iter()
            .map(|f| {
                let drift = Rotation::rz(cfg.imu_drift_rad_per_s * secs(f));
                let noise = perturbation(&mut rng, cfg.imu_noise_rad);
                let r = drift * to_local * bone_at(f, i) * truth.bone_to_sensor[i] * noise;
                TimedSample::new(frames[f].timestamp_ms + off.imu, i as u16, r)
            })
            .collect();
    }

    // camera detections inside the calibration window
    let first = (cfg.calibration_start_s * motion.rate_hz).round() as usize;
    let last = ((cfg.calibration_start_s + cfg.calibration_duration_s) * motion.rate_hz).round() as usize;
    let cam_frames = sample_frames(motion.rate_hz, cfg.camera_rate_hz, first, (last + 1).min(n));
    let mut jitter_rng = seeded_stream(cfg.seed, S_JITTER);
    let mut recall_rng = seeded_stream(cfg.seed, S_RECALL);
    let mut tag_rng: Vec<_> = (0..TRACKERS).map(|i| seeded_stream(cfg.seed, S_TAG + i as u64)).collect();
    let mut drop_rng: Vec<_> = (0..TRACKERS).map(|i| seeded_stream(cfg.seed, S_DROPOUT + i as u64)).collect();
    let mut bone_rng: Vec<_> = (0..TRACKERS).map(|i| seeded_stream(cfg.seed, S_BONE + i as u64)).collect();
    let tag_from_sensor: Vec<Rotation> = truth.tag_to_sensor.iter().map(|r| r.inverse()).collect();
    for &f in &cam_frames {
        let camera = truth.camera * perturbation(&mut jitter_rng, cfg.camera_jitter_rad);
        let seen = recall_rng.random::<f64>() < cfg.bone_recall;
        let ts = frames[f].timestamp_ms + off.phone;
        for i in 0..TRACKERS {
            let b = bone_at(f, i);
            let tag_noise = perturbation(&mut tag_rng[i], cfg.tag_noise_rad);
            let dropped = drop_rng[i].random::<f64>() < cfg.tag_dropout;
            let bone_noise = perturbation(&mut bone_rng[i], cfg.bone_noise_rad);
            if !dropped {
                let tag = camera * b * truth.bone_to_sensor[i] * tag_from_sensor[i] * tag_noise;
                out.tags[i].push(TimedSample::new(ts, crate::stream::CAMERA_SOURCE, tag));
            }
            if seen {
                out.bones[i].push(TimedSample::new(ts, crate::stream::CAMERA_SOURCE, camera * b * bone_noise));
            }
        }
    }
    if !cam_frames.is_empty() {
        let start = t0 + (cfg.calibration_start_s * 1000.0).round() as i64 + off.phone;
        let end = t0 + ((cfg.calibration_start_s + cfg.calibration_duration_s) * 1000.0).round() as i64 + off.phone;
        out.calibration_window = Some((start, end));
    }

    // head-mounted SLAM over the whole clip
    let mut slam_rng = seeded_stream(cfg.seed, S_SLAM);
    let heading: f64 = slam_rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let drift_dir = Vector3::new(heading.cos(), heading.sin(), 0.0);
    out.slam = sample_frames(motion.rate_hz, cfg.camera_rate_hz, 0, n)
        .into_iter()
        .map(|f| {
            let pose = HeadPose {
                orientation: kin[f].orientations[head],
                position: kin[f].positions[head] + drift_dir * (cfg.slam_drift_m_per_s * secs(f)),
            };
            TimedSample::new(frames[f].timestamp_ms + off.glasses, crate::stream::GLASSES_SOURCE, pose)
        })
        .collect();

    Ok(SimBundle {
        motion: motion.clone(),
        sensors: out,
        truth,
    })
}
