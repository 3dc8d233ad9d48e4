//! On-body calibration from tag detections, vision bone estimates and IMU
//! readings.
//!
//! Per frame, `B_i R_S_i = (C_s R_B_i)ᵀ · C_s R_T_i · T_i R_S_i` and
//! `C_s R_W_i = C_s R_T_i · T_i R_S_i · (W_i R_S_i)ᵀ`. Both are averaged with
//! the Karcher mean; the heading offset is `(C_s R̄_W_p)ᵀ · C_s R̄_W_i`,
//! projected onto rotations about gravity by default.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::skeleton::TrackedBone;
use crate::so3::{karcher_mean, yaw_project, KarcherDiagnostics, KarcherOptions, Rotation, So3Error};
use crate::stream::{synchronize, SensorStreams, SyncEntry, TimedSample, DEFAULT_MAX_GAP_MS};

pub const CALIBRATION_FORMAT: &str = "bodyfuse-calibration";
pub const CALIBRATION_VERSION: u32 = 1;
pub const DEFAULT_MIN_SAMPLES: usize = 30;
/// Tag and bone samples come from the same camera frame, so they pair only
/// when their stamps agree to within this.
pub const SAME_FRAME_TOLERANCE_MS: i64 = 1;

const TRACKERS: usize = TrackedBone::ALL.len();

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("{tracker}: {found} usable frames, need at least {required}")]
    TooFewSamples {
        tracker: &'static str,
        found: usize,
        required: usize,
    },
    #[error("{0}: tag-to-sensor mounting rotation is unknown")]
    MissingTagToSensor(&'static str),
    #[error("{tracker}: rotation average failed: {source}")]
    Average {
        tracker: &'static str,
        source: So3Error,
    },
    #[error("pelvis calibration failed, so no tracker can be aligned to the pelvis world: {0}")]
    PelvisFailed(String),
    #[error("recording has no calibration window (missing `calibration.start_ms` / `calibration.end_ms` markers)")]
    MissingWindow,
    #[error("calibration document: {0}")]
    Document(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Clone, Debug)]
pub struct CalibrationOptions {
    pub min_samples: usize,
    pub karcher: KarcherOptions,
    /// Keep only the rotation about gravity of the heading offset.
    pub yaw_only: bool,
    /// Gravity direction in the IMU world frames.
    pub gravity: Vector3<f64>,
    /// Largest tag-to-IMU pairing skew, ms.
    pub max_gap_ms: i64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            min_samples: DEFAULT_MIN_SAMPLES,
            karcher: KarcherOptions::default(),
            yaw_only: true,
            gravity: Vector3::z(),
            max_gap_ms: DEFAULT_MAX_GAP_MS,
        }
    }
}

/// Synchronized observations of one tracker during the calibration window.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrackerInput {
    pub tag_to_sensor: Option<Rotation>,
    /// `(C_s R_T_i, C_s R_B_i)` from frames with both a tag and a bone.
    pub tag_bone: Vec<(Rotation, Rotation)>,
    /// `(C_s R_T_i, W_i R_S_i)` from frames with a tag and a nearby IMU sample.
    pub tag_imu: Vec<(Rotation, Rotation)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationInput {
    /// Indexed by tracker id.
    pub trackers: Vec<TrackerInput>,
}

impl CalibrationInput {
    /// Pairs tag detections inside the calibration window with same-frame
    /// bone estimates and with the nearest IMU sample.
    pub fn from_sensors(sensors: &SensorStreams, opts: &CalibrationOptions) -> Result<Self, CalibError> {
        let (start, end) = sensors.calibration_window.ok_or(CalibError::MissingWindow)?;
        let mut trackers = Vec::with_capacity(TRACKERS);
        for i in 0..TRACKERS {
            let tags: Vec<&TimedSample<Rotation>> = sensors.tags[i]
                .iter()
                .filter(|s| (start..=end).contains(&s.timestamp_ms))
                .collect();
            let mut input = TrackerInput {
                tag_to_sensor: sensors.tag_to_sensor[i],
                ..TrackerInput::default()
            };
            if !tags.is_empty() {
                let tag_ts: Vec<i64> = tags.iter().map(|s| s.timestamp_ms).collect();
                let bone_ts: Vec<i64> = sensors.bones[i].iter().map(|s| s.timestamp_ms).collect();
                let imu_ts: Vec<i64> = sensors.imu[i].iter().map(|s| s.timestamp_ms).collect();
                let by_bone = synchronize(&[&tag_ts, &bone_ts], 0, SAME_FRAME_TOLERANCE_MS)
                    .map_err(|e| CalibError::Document(e.to_string()))?;
                let by_imu = synchronize(&[&tag_ts, &imu_ts], 0, opts.max_gap_ms)
                    .map_err(|e| CalibError::Document(e.to_string()))?;
                for (k, tag) in tags.iter().enumerate() {
                    if let SyncEntry::Matched { index, .. } = by_bone[k].entries[1] {
                        input.tag_bone.push((tag.payload, sensors.bones[i][index].payload));
                    }
                    if let SyncEntry::Matched { index, .. } = by_imu[k].entries[1] {
                        input.tag_imu.push((tag.payload, sensors.imu[i][index].payload));
                    }
                }
            }
            trackers.push(input);
        }
        Ok(Self { trackers })
    }

    fn tracker(&self, t: TrackedBone) -> &TrackerInput {
        &self.trackers[t.id() as usize]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Estimate {
    pub rotation: Rotation,
    pub samples: usize,
    pub diagnostics: KarcherDiagnostics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldAlignment {
    /// `W_p R_W_i`, yaw-projected when requested.
    pub rotation: Rotation,
    /// The unprojected composition.
    pub full: Rotation,
    /// Tilt removed by the projection, rad.
    pub tilt_discarded: f64,
    pub yaw_ambiguous: bool,
    pub samples: usize,
    pub diagnostics: KarcherDiagnostics,
}

fn average(tracker: TrackedBone, samples: &[Rotation], opts: &CalibrationOptions) -> Result<Estimate, CalibError> {
    if samples.len() < opts.min_samples.max(1) {
        return Err(CalibError::TooFewSamples {
            tracker: tracker.name(),
            found: samples.len(),
            required: opts.min_samples.max(1),
        });
    }
    let m = karcher_mean(samples, &opts.karcher).map_err(|source| CalibError::Average {
        tracker: tracker.name(),
        source,
    })?;
    Ok(Estimate {
        rotation: m.mean,
        samples: samples.len(),
        diagnostics: m.diagnostics,
    })
}

/// Per-frame `B_i R_S_i` samples.
pub fn bone_to_sensor_samples(input: &CalibrationInput, tracker: TrackedBone) -> Result<Vec<Rotation>, CalibError> {
    let t = input.tracker(tracker);
    let mount = t.tag_to_sensor.ok_or(CalibError::MissingTagToSensor(tracker.name()))?;
    Ok(t.tag_bone.iter().map(|(tag, bone)| bone.inverse() * *tag * mount).collect())
}

/// Per-frame `C_s R_W_i` samples.
pub fn camera_world_samples(input: &CalibrationInput, tracker: TrackedBone) -> Result<Vec<Rotation>, CalibError> {
    let t = input.tracker(tracker);
    let mount = t.tag_to_sensor.ok_or(CalibError::MissingTagToSensor(tracker.name()))?;
    Ok(t.tag_imu.iter().map(|(tag, imu)| *tag * mount * imu.inverse()).collect())
}

pub fn estimate_bone_to_sensor(
    input: &CalibrationInput,
    tracker: TrackedBone,
    opts: &CalibrationOptions,
) -> Result<Estimate, CalibError> {
    average(tracker, &bone_to_sensor_samples(input, tracker)?, opts)
}

/// Mean `C_s R̄_W_i` of one tracker.
pub fn estimate_camera_world(
    input: &CalibrationInput,
    tracker: TrackedBone,
    opts: &CalibrationOptions,
) -> Result<Estimate, CalibError> {
    average(tracker, &camera_world_samples(input, tracker)?, opts)
}

fn align(pelvis: &Estimate, tracker: &Estimate, opts: &CalibrationOptions) -> WorldAlignment {
    let full = pelvis.rotation.inverse() * tracker.rotation;
    let (rotation, ambiguous) = if opts.yaw_only {
        let p = yaw_project(&full, &opts.gravity);
        (p.rotation, p.ambiguous)
    } else {
        (full, false)
    };
    WorldAlignment {
        rotation,
        full,
        tilt_discarded: rotation.geodesic_distance(&full),
        yaw_ambiguous: ambiguous,
        samples: tracker.samples,
        diagnostics: tracker.diagnostics.clone(),
    }
}

pub fn estimate_world_alignment(
    input: &CalibrationInput,
    tracker: TrackedBone,
    pelvis: TrackedBone,
    opts: &CalibrationOptions,
) -> Result<WorldAlignment, CalibError> {
    let p = estimate_camera_world(input, pelvis, opts)?;
    let t = if tracker == pelvis {
        p.clone()
    } else {
        estimate_camera_world(input, tracker, opts)?
    };
    Ok(align(&p, &t, opts))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackerDiagnostics {
    /// Frames used for the bone-to-sensor average.
    pub samples: usize,
    /// Frames used for the world alignment.
    pub alignment_samples: usize,
    /// Largest distance from the bone-to-sensor mean to a retained frame, rad.
    pub spread_rad: f64,
    pub alignment_spread_rad: f64,
    pub trimmed: usize,
    pub iterations: usize,
    pub tilt_discarded_rad: f64,
    pub yaw_ambiguous: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerCalibration {
    /// `B_i R̄_S_i`.
    pub bone_to_sensor: Rotation,
    /// `W_p R_W_i`.
    pub heading: Rotation,
    pub diagnostics: TrackerDiagnostics,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrackerStatus {
    Calibrated(TrackerCalibration),
    Failed(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationResult {
    /// Indexed by tracker id.
    pub trackers: Vec<TrackerStatus>,
    pub yaw_only: bool,
}

impl CalibrationResult {
    /// A result holding known rotations, e.g. simulator truth.
    pub fn from_rotations(bone_to_sensor: &[Rotation], heading: &[Rotation]) -> Self {
        let trackers = bone_to_sensor
            .iter()
            .zip(heading)
            .map(|(b, h)| {
                TrackerStatus::Calibrated(TrackerCalibration {
                    bone_to_sensor: *b,
                    heading: *h,
                    diagnostics: TrackerDiagnostics {
                        samples: 0,
                        alignment_samples: 0,
                        spread_rad: 0.0,
                        alignment_spread_rad: 0.0,
                        trimmed: 0,
                        iterations: 0,
                        tilt_discarded_rad: 0.0,
                        yaw_ambiguous: false,
                    },
                })
            })
            .collect();
        Self { trackers, yaw_only: true }
    }

    pub fn get(&self, tracker: TrackedBone) -> Option<&TrackerCalibration> {
        match self.trackers.get(tracker.id() as usize) {
            Some(TrackerStatus::Calibrated(c)) => Some(c),
            _ => None,
        }
    }

    pub fn failures(&self) -> Vec<(TrackedBone, &str)> {
        TrackedBone::ALL
            .iter()
            .zip(&self.trackers)
            .filter_map(|(t, s)| match s {
                TrackerStatus::Failed(r) => Some((*t, r.as_str())),
                _ => None,
            })
            .collect()
    }
}

/// Calibrates every tracker. Individual trackers may fail; the pelvis may not.
pub fn calibrate(input: &CalibrationInput, opts: &CalibrationOptions) -> Result<CalibrationResult, CalibError> {
    let pelvis = TrackedBone::Pelvis;
    let pelvis_world = estimate_camera_world(input, pelvis, opts).map_err(|e| CalibError::PelvisFailed(e.to_string()))?;
    let mut trackers = Vec::with_capacity(TRACKERS);
    for t in TrackedBone::ALL {
        let run = || -> Result<TrackerCalibration, CalibError> {
            let b = estimate_bone_to_sensor(input, t, opts)?;
            let w = if t == pelvis {
                pelvis_world.clone()
            } else {
                estimate_camera_world(input, t, opts)?
            };
            let a = align(&pelvis_world, &w, opts);
            Ok(TrackerCalibration {
                bone_to_sensor: b.rotation,
                heading: a.rotation,
                diagnostics: TrackerDiagnostics {
                    samples: b.samples,
                    alignment_samples: a.samples,
                    spread_rad: b.diagnostics.max_residual,
                    alignment_spread_rad: a.diagnostics.max_residual,
                    trimmed: b.diagnostics.trimmed + a.diagnostics.trimmed,
                    iterations: b.diagnostics.iterations + a.diagnostics.iterations,
                    tilt_discarded_rad: a.tilt_discarded,
                    yaw_ambiguous: a.yaw_ambiguous,
                },
            })
        };
        match run() {
            Ok(c) => trackers.push(TrackerStatus::Calibrated(c)),
            Err(e) if t == pelvis => return Err(CalibError::PelvisFailed(e.to_string())),
            Err(e) => trackers.push(TrackerStatus::Failed(e.to_string())),
        }
    }
    Ok(CalibrationResult {
        trackers,
        yaw_only: opts.yaw_only,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    format: String,
    version: u32,
    yaw_only: bool,
    tracker: Vec<DocEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DocEntry {
    name: String,
    status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bone_to_sensor: Option<Rotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    heading: Option<Rotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    diagnostics: Option<TrackerDiagnostics>,
}

impl CalibrationResult {
    pub fn to_toml_string(&self) -> String {
        let tracker = TrackedBone::ALL
            .iter()
            .zip(&self.trackers)
            .map(|(t, s)| match s {
                TrackerStatus::Calibrated(c) => DocEntry {
                    name: t.name().into(),
                    status: "ok".into(),
                    reason: None,
                    bone_to_sensor: Some(c.bone_to_sensor),
                    heading: Some(c.heading),
                    diagnostics: Some(c.diagnostics.clone()),
                },
                TrackerStatus::Failed(r) => DocEntry {
                    name: t.name().into(),
                    status: "failed".into(),
                    reason: Some(r.clone()),
                    bone_to_sensor: None,
                    heading: None,
                    diagnostics: None,
                },
            })
            .collect();
        let doc = Document {
            format: CALIBRATION_FORMAT.into(),
            version: CALIBRATION_VERSION,
            yaw_only: self.yaw_only,
            tracker,
        };
        toml::to_string(&doc).expect("calibration serializes")
    }

    pub fn from_toml_str(text: &str) -> Result<Self, CalibError> {
        let bad = |m: String| CalibError::Document(m);
        let doc: Document = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        if doc.format != CALIBRATION_FORMAT {
            return Err(bad(format!("format `{}` is not `{CALIBRATION_FORMAT}`", doc.format)));
        }
        if doc.version != CALIBRATION_VERSION {
            return Err(bad(format!("unsupported version {}", doc.version)));
        }
        let mut trackers: Vec<Option<TrackerStatus>> = vec![None; TRACKERS];
        for e in doc.tracker {
            let t = TrackedBone::ALL
                .iter()
                .find(|t| t.name() == e.name)
                .ok_or_else(|| bad(format!("unknown tracker `{}`", e.name)))?;
            let slot = &mut trackers[t.id() as usize];
            if slot.is_some() {
                return Err(bad(format!("tracker `{}` listed twice", e.name)));
            }
            *slot = Some(match (e.status.as_str(), e.bone_to_sensor, e.heading, e.diagnostics) {
                ("ok", Some(b), Some(h), Some(d)) => TrackerStatus::Calibrated(TrackerCalibration {
                    bone_to_sensor: b,
                    heading: h,
                    diagnostics: d,
                }),
                ("failed", None, None, None) => TrackerStatus::Failed(e.reason.unwrap_or_default()),
                _ => return Err(bad(format!("tracker `{}` has an inconsistent entry", e.name))),
            });
        }
        let trackers = trackers
            .into_iter()
            .zip(TrackedBone::ALL)
            .map(|(s, t)| s.ok_or_else(|| bad(format!("tracker `{}` missing", t.name()))))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            trackers,
            yaw_only: doc.yaw_only,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CalibError> {
        std::fs::write(path, self.to_toml_string()).map_err(|source| CalibError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CalibError> {
        let text = std::fs::read_to_string(path).map_err(|source| CalibError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_motion, perturbation, seeded_stream, simulate_sensors, GroundTruth, MotionKind, SimConfig};
    use crate::skeleton::default_skeleton;
    use crate::so3::RotationVector;
    use std::f64::consts::PI;
    use std::sync::Arc;

    const DEG: f64 = PI / 180.0;

    fn bundle(cfg: &SimConfig) -> crate::sim::SimBundle {
        let m = generate_motion(&MotionKind::ArmWave, 6.0, Arc::new(default_skeleton())).unwrap();
        simulate_sensors(&m, cfg).unwrap()
    }

    #[test]
    fn noiseless_recovers_truth() {
        let mut cfg = SimConfig::noiseless();
        let mut truth = GroundTruth::random(5);
        truth.heading[TrackedBone::LeftForearm.id() as usize] = Rotation::rz(25.0 * DEG);
        cfg.truth = Some(truth.clone());
        let b = bundle(&cfg);
        let input = CalibrationInput::from_sensors(&b.sensors, &CalibrationOptions::default()).unwrap();
        let opts = CalibrationOptions::default();
        let res = calibrate(&input, &opts).unwrap();
        for t in TrackedBone::ALL {
            let i = t.id() as usize;
            let c = res.get(t).unwrap();
            assert!(c.bone_to_sensor.geodesic_distance(&truth.bone_to_sensor[i]) < 1e-8, "{}", t.name());
            assert!(c.heading.geodesic_distance(&truth.heading[i]) < 1e-8, "{}", t.name());
            assert_eq!(c.diagnostics.samples, 151);
        }
        let pelvis = estimate_world_alignment(&input, TrackedBone::Pelvis, TrackedBone::Pelvis, &opts).unwrap();
        assert!(pelvis.rotation.angle() < 1e-12);
        let a = estimate_world_alignment(&input, TrackedBone::LeftForearm, TrackedBone::Pelvis, &opts).unwrap();
        assert!(a.rotation.geodesic_distance(&Rotation::rz(25.0 * DEG)) < 1e-8);
    }

    #[test]
    fn camera_frame_cancels() {
        let b = bundle(&SimConfig { seed: 3, ..SimConfig::default() });
        let input = CalibrationInput::from_sensors(&b.sensors, &CalibrationOptions::default()).unwrap();
        let q = Rotation::from_quaternion(0.2, -0.7, 0.4, 0.5).unwrap();
        let mut moved = input.clone();
        for t in &mut moved.trackers {
            for (tag, bone) in &mut t.tag_bone {
                *tag = q * *tag;
                *bone = q * *bone;
            }
            for (tag, _) in &mut t.tag_imu {
                *tag = q * *tag;
            }
        }
        let opts = CalibrationOptions::default();
        let a = calibrate(&input, &opts).unwrap();
        let b = calibrate(&moved, &opts).unwrap();
        for t in TrackedBone::ALL {
            let (x, y) = (a.get(t).unwrap(), b.get(t).unwrap());
            assert!(x.bone_to_sensor.geodesic_distance(&y.bone_to_sensor) < 1e-8);
            assert!(x.heading.geodesic_distance(&y.heading) < 1e-8);
        }
    }

    #[test]
    fn yaw_only_result_commutes_with_gravity_rotations() {
        let b = bundle(&SimConfig { seed: 8, ..SimConfig::default() });
        let input = CalibrationInput::from_sensors(&b.sensors, &CalibrationOptions::default()).unwrap();
        let res = calibrate(&input, &CalibrationOptions::default()).unwrap();
        let full = calibrate(&input, &CalibrationOptions { yaw_only: false, ..CalibrationOptions::default() }).unwrap();
        for t in TrackedBone::ALL {
            let h = res.get(t).unwrap().heading;
            for a in [0.3, -1.2, 2.9] {
                let g = Rotation::rz(a);
                assert!((g * h).geodesic_distance(&(h * g)) < 1e-9);
            }
            // the projection only removes tilt
            let f = full.get(t).unwrap().heading;
            assert!(h.geodesic_distance(&f) < 2.0 * DEG);
        }
    }

    #[test]
    fn failures_are_reported() {
        let mut cfg = SimConfig::noiseless();
        cfg.seed = 4;
        let b = bundle(&cfg);
        let mut sensors = b.sensors.clone();
        // keep one tag frame in ten on the left forearm
        let lf = TrackedBone::LeftForearm.id() as usize;
        sensors.tags[lf] = sensors.tags[lf].iter().step_by(10).cloned().collect();
        let input = CalibrationInput::from_sensors(&sensors, &CalibrationOptions::default()).unwrap();
        let res = calibrate(&input, &CalibrationOptions::default()).unwrap();
        let failed = res.failures();
        assert_eq!(failed.len(), 1);
        assert_eq!(failed[0].0, TrackedBone::LeftForearm);
        assert!(failed[0].1.contains("16 usable frames"), "{}", failed[0].1);

        sensors.tags[0].clear();
        let input = CalibrationInput::from_sensors(&sensors, &CalibrationOptions::default()).unwrap();
        assert!(matches!(
            calibrate(&input, &CalibrationOptions::default()),
            Err(CalibError::PelvisFailed(_))
        ));

        sensors.calibration_window = None;
        assert!(matches!(CalibrationInput::from_sensors(&sensors, &CalibrationOptions::default()), Err(CalibError::MissingWindow)));
    }

    #[test]
    fn document_round_trip() {
        let b = bundle(&SimConfig { seed: 1, ..SimConfig::default() });
        let mut sensors = b.sensors.clone();
        sensors.tags[2].clear();
        let input = CalibrationInput::from_sensors(&sensors, &CalibrationOptions::default()).unwrap();
        let res = calibrate(&input, &CalibrationOptions::default()).unwrap();
        let text = res.to_toml_string();
        assert_eq!(CalibrationResult::from_toml_str(&text).unwrap(), res);
        assert!(CalibrationResult::from_toml_str(&text.replace("version = 1", "version = 9")).is_err());
        assert!(CalibrationResult::from_toml_str("format = \"x\"").is_err());
    }

    /// Synthetic input built directly from truth and noise, with `n` frames.
    fn synthetic(truth: &GroundTruth, n: usize, seed: u64, outliers: f64) -> CalibrationInput {
        let mut rng = seeded_stream(seed, 9);
        let trackers = (0..TRACKERS)
            .map(|i| {
                let mut t = TrackerInput { tag_to_sensor: Some(truth.tag_to_sensor[i]), ..Default::default() };
                for k in 0..n {
                    let b = perturbation(&mut rng, 1.0);
                    let tag = truth.camera * b * truth.bone_to_sensor[i] * truth.tag_to_sensor[i].inverse()
                        * perturbation(&mut rng, 1.0 * DEG);
                    let mut bone_noise = perturbation(&mut rng, 2.0 * DEG);
                    if (k as f64) < outliers * n as f64 {
                        bone_noise = Rotation::exp(&RotationVector::new(30.0 * DEG, 0.0, 0.0));
                    }
                    t.tag_bone.push((tag, truth.camera * b * bone_noise));
                    let imu = truth.heading[i].inverse() * b * truth.bone_to_sensor[i] * perturbation(&mut rng, 0.5 * DEG);
                    t.tag_imu.push((tag, imu));
                }
                t
            })
            .collect();
        CalibrationInput { trackers }
    }

    fn median(mut v: Vec<f64>) -> f64 {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    }

    #[test]
    fn error_shrinks_with_more_frames() {
        let truth = GroundTruth::random(21);
        let t = TrackedBone::RightShank;
        let opts = CalibrationOptions { min_samples: 1, ..CalibrationOptions::default() };
        let medians: Vec<f64> = [10, 30, 100, 300]
            .iter()
            .map(|&n| {
                median(
                    (0..40)
                        .map(|s| {
                            let input = synthetic(&truth, n, 1000 + s, 0.0);
                            estimate_bone_to_sensor(&input, t, &opts)
                                .unwrap()
                                .rotation
                                .geodesic_distance(&truth.bone_to_sensor[t.id() as usize])
                        })
                        .collect(),
                )
            })
            .collect();
        assert!(medians.windows(2).all(|w| w[1] <= w[0]), "{medians:?}");
        assert!(medians[2] < 0.5 * DEG);
    }

    #[test]
    fn trimming_contains_outliers() {
        let truth = GroundTruth::random(22);
        let t = TrackedBone::LeftUpperArm;
        let i = t.id() as usize;
        let trimmed = CalibrationOptions {
            karcher: KarcherOptions::trimmed(KarcherOptions::DEFAULT_TRIM),
            ..CalibrationOptions::default()
        };
        let err = |input: &CalibrationInput, o: &CalibrationOptions| {
            estimate_bone_to_sensor(input, t, o).unwrap().rotation.geodesic_distance(&truth.bone_to_sensor[i])
        };
        let clean: Vec<f64> = (0..30).map(|s| err(&synthetic(&truth, 100, s, 0.0), &CalibrationOptions::default())).collect();
        let dirty: Vec<f64> = (0..30).map(|s| err(&synthetic(&truth, 100, s, 0.2), &trimmed)).collect();
        let tol = {
            let mut c = clean.clone();
            c.sort_by(f64::total_cmp);
            c[(0.95 * c.len() as f64) as usize]
        };
        assert!(median(dirty) <= 2.0 * tol, "trimmed median above twice the clean 95th percentile");
    }
}
