//! File-based batch commands: simulate, calibrate, track, fuse, eval and
//! their composition.
//!
//! Every command reads and writes only recording files, calibration
//! documents and report tables, so `roundtrip` is literally the five
//! commands run back to back on one output directory.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calib::{calibrate, CalibError, CalibrationInput, CalibrationOptions, CalibrationResult};
use crate::fusion::{fuse, track_bones, FusionError, FusionOptions, GuidanceWeights, TrackedBones};
use crate::metrics::{build_report, EvalClip, EvalReport, MetricsError};
use crate::sim::{generate_motion, simulate_sensors, MotionKind, SimConfig, SimError};
use crate::skeleton::{default_skeleton, SkeletonError, SkeletonModel, TrackedBone};
use crate::stream::{
    motion_from_recording, motion_to_recording, read_recording, write_recording, Recording, RecordingError,
    SensorStreams, Stream, StreamData, TimedSample, DEFAULT_MAX_GAP_MS, META_CALIBRATION_END, META_CALIBRATION_START,
};

pub const PIPELINE_CONFIG_VERSION: u32 = 1;

pub const RECORDING_FILE: &str = "recording.bfr";
pub const TRUTH_FILE: &str = "truth.bfr";
pub const CALIBRATION_FILE: &str = "calibration.toml";
pub const TRACKED_FILE: &str = "tracked.bfr";
pub const MOTION_FILE: &str = "motion.bfr";

/// Stage counters for seed derivation; appending a stage leaves earlier
/// streams untouched.
pub const STAGE_SIM: u64 = 1;

/// Failure classes with their process exit codes.
#[derive(Debug)]
pub enum PipelineError {
    /// Exit code 2.
    Config(String),
    /// Exit code 3.
    Data(String),
    /// Exit code 4.
    Convergence(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Data(_) => 3,
            PipelineError::Convergence(_) => 4,
        }
    }
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PipelineError::Config(m) => write!(f, "config error: {m}"),
            PipelineError::Data(m) => write!(f, "data error: {m}"),
            PipelineError::Convergence(m) => write!(f, "convergence error: {m}"),
        }
    }
}

impl std::error::Error for PipelineError {}

impl From<SimError> for PipelineError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(_) | SimError::UnknownMotion(_) => PipelineError::Config(format!("sim: {e}")),
            _ => PipelineError::Data(format!("sim: {e}")),
        }
    }
}

impl From<RecordingError> for PipelineError {
    fn from(e: RecordingError) -> Self {
        PipelineError::Data(format!("stream: {e}"))
    }
}

impl From<CalibError> for PipelineError {
    fn from(e: CalibError) -> Self {
        PipelineError::Data(format!("calibration: {e}"))
    }
}

impl From<FusionError> for PipelineError {
    fn from(e: FusionError) -> Self {
        match e {
            FusionError::NotConverged { .. } => PipelineError::Convergence(format!("fusion: {e}")),
            FusionError::Weights(_) | FusionError::WindowTooShort(_) => PipelineError::Config(format!("fusion: {e}")),
            _ => PipelineError::Data(format!("fusion: {e}")),
        }
    }
}

impl From<MetricsError> for PipelineError {
    fn from(e: MetricsError) -> Self {
        PipelineError::Data(format!("metrics: {e}"))
    }
}

impl From<SkeletonError> for PipelineError {
    fn from(e: SkeletonError) -> Self {
        PipelineError::Config(format!("skeleton: {e}"))
    }
}

/// Independent 64-bit seed for `stage`, derived by hashing.
pub fn derive_seed(seed: u64, stage: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(b"bodyfuse-seed");
    h.update(seed.to_le_bytes());
    h.update(stage.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionSection {
    pub window: usize,
    pub overlap: usize,
    pub contact: bool,
}

impl Default for FusionSection {
    fn default() -> Self {
        let d = FusionOptions::default();
        Self {
            window: d.window,
            overlap: d.overlap,
            contact: d.contact.is_some(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub version: u32,
    pub seed: u64,
    pub out: PathBuf,
    /// Motion kind, e.g. `walk-cycle` or `scripted-file:<path>`.
    pub motion: String,
    pub duration_s: f64,
    pub max_gap_ms: i64,
    /// `key=value` list; unnamed weights keep their defaults.
    pub weights: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skeleton: Option<PathBuf>,
    pub sim: SimConfig,
    pub fusion: FusionSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            version: PIPELINE_CONFIG_VERSION,
            seed: 0,
            out: PathBuf::from("out"),
            motion: "walk-cycle".into(),
            duration_s: 30.0,
            max_gap_ms: DEFAULT_MAX_GAP_MS,
            weights: String::new(),
            skeleton: None,
            sim: SimConfig::default(),
            fusion: FusionSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(format!("pipeline config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.version != PIPELINE_CONFIG_VERSION {
            return Err(PipelineError::Config(format!(
                "pipeline config version {} is not supported (expected {PIPELINE_CONFIG_VERSION})",
                self.version
            )));
        }
        if !(self.duration_s > 0.0) {
            return Err(PipelineError::Config(format!("duration_s {} must be positive", self.duration_s)));
        }
        if self.max_gap_ms < 0 {
            return Err(PipelineError::Config("max_gap_ms must be nonnegative".into()));
        }
        self.motion_kind()?;
        self.guidance_weights()?;
        self.sim.validate()?;
        Ok(())
    }

    pub fn motion_kind(&self) -> Result<MotionKind, PipelineError> {
        Ok(self.motion.parse::<MotionKind>()?)
    }

    pub fn guidance_weights(&self) -> Result<GuidanceWeights, PipelineError> {
        Ok(self.weights.parse::<GuidanceWeights>()?)
    }

    pub fn skeleton_model(&self) -> Result<Arc<SkeletonModel>, PipelineError> {
        Ok(Arc::new(match &self.skeleton {
            Some(p) => SkeletonModel::load(p)?,
            None => default_skeleton(),
        }))
    }

    pub fn fusion_options(&self) -> FusionOptions {
        let d = FusionOptions::default();
        FusionOptions {
            window: self.fusion.window,
            overlap: self.fusion.overlap,
            contact: if self.fusion.contact { d.contact.clone() } else { None },
            ..d
        }
    }

    /// Simulator settings with the seed fanned out from the pipeline seed.
    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            seed: derive_seed(self.seed, STAGE_SIM),
            ..self.sim.clone()
        }
    }

    fn out_path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn ensure_dir(dir: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(|e| PipelineError::Data(format!("cannot create {}: {e}", dir.display())))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulateOutput {
    pub recording: PathBuf,
    pub truth: PathBuf,
}

/// Writes the sensor recording and the ground-truth motion. The truth file
/// carries the calibration window in motion time for evaluation.
pub fn cmd_simulate(cfg: &PipelineConfig) -> Result<SimulateOutput, PipelineError> {
    cfg.validate()?;
    let skeleton = cfg.skeleton_model()?;
    let motion = generate_motion(&cfg.motion_kind()?, cfg.duration_s, skeleton)?;
    let sim = cfg.sim_config();
    let bundle = simulate_sensors(&motion, &sim)?;
    ensure_dir(&cfg.out)?;
    let recording = cfg.out_path(RECORDING_FILE);
    write_recording(&bundle.sensors.to_recording(), &recording)?;
    let t0 = motion.frames().first().map_or(0, |f| f.timestamp_ms);
    let start = t0 + (sim.calibration_start_s * 1000.0).round() as i64;
    let end = start + (sim.calibration_duration_s * 1000.0).round() as i64;
    let mut meta = BTreeMap::new();
    meta.insert(META_CALIBRATION_START.to_string(), start.to_string());
    meta.insert(META_CALIBRATION_END.to_string(), end.to_string());
    meta.insert("motion".into(), cfg.motion.clone());
    meta.insert("seed".into(), sim.seed.to_string());
    let truth = cfg.out_path(TRUTH_FILE);
    write_recording(&motion_to_recording(&motion, meta), &truth)?;
    Ok(SimulateOutput { recording, truth })
}

fn load_sensors(recording: &Path) -> Result<SensorStreams, PipelineError> {
    Ok(SensorStreams::from_recording(&read_recording(recording)?)?)
}

/// Calibrates from the recording's calibration window, or from `window`
/// (phone-clock ms) when given.
pub fn cmd_calibrate(
    cfg: &PipelineConfig,
    recording: &Path,
    window: Option<(i64, i64)>,
) -> Result<PathBuf, PipelineError> {
    let mut sensors = load_sensors(recording)?;
    if let Some((a, b)) = window {
        if b <= a {
            return Err(PipelineError::Config(format!("calibration window {a}..{b} is empty")));
        }
        sensors.calibration_window = Some((a, b));
    }
    let opts = CalibrationOptions {
        max_gap_ms: cfg.max_gap_ms,
        ..CalibrationOptions::default()
    };
    let input = CalibrationInput::from_sensors(&sensors, &opts)?;
    let result = calibrate(&input, &opts)?;
    ensure_dir(&cfg.out)?;
    let path = cfg.out_path(CALIBRATION_FILE);
    result.save(&path)?;
    Ok(path)
}

/// Tracked bones as a recording: `tracked/<bone>` orientations and
/// `staleness/<bone>` ages in ms, on every frame where the bone is known.
pub fn tracked_to_recording(t: &TrackedBones) -> Recording {
    let mut meta = BTreeMap::new();
    meta.insert("content".into(), "tracked".into());
    let mut streams = Vec::new();
    for bone in TrackedBone::ALL {
        let i = bone.id() as usize;
        let mut rot = Vec::new();
        let mut age = Vec::new();
        for f in &t.frames {
            if let (Some(r), Some(s)) = (f.bones[i], f.staleness_ms[i]) {
                rot.push(TimedSample::new(f.timestamp_ms, i as u16, r));
                age.push(TimedSample::new(f.timestamp_ms, i as u16, s as f64));
            }
        }
        streams.push(Stream { name: format!("tracked/{}", bone.name()), source: i as u16, data: StreamData::Rotation(rot) });
        streams.push(Stream { name: format!("staleness/{}", bone.name()), source: i as u16, data: StreamData::Scalar(age) });
    }
    Recording { meta, streams }
}

fn load_calibration(path: &Path) -> Result<CalibrationResult, PipelineError> {
    Ok(CalibrationResult::load(path)?)
}

pub fn cmd_track(cfg: &PipelineConfig, recording: &Path, calibration: &Path) -> Result<PathBuf, PipelineError> {
    let sensors = load_sensors(recording)?;
    let tracked = track_bones(&sensors.imu, &load_calibration(calibration)?)?;
    ensure_dir(&cfg.out)?;
    let path = cfg.out_path(TRACKED_FILE);
    write_recording(&tracked_to_recording(&tracked), &path)?;
    Ok(path)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FuseSummary {
    pub motion: PathBuf,
    pub frames: usize,
    pub windows: usize,
    pub iterations: usize,
}

pub fn cmd_fuse(cfg: &PipelineConfig, recording: &Path, calibration: &Path) -> Result<FuseSummary, PipelineError> {
    let sensors = load_sensors(recording)?;
    let calib = load_calibration(calibration)?;
    let tracked = track_bones(&sensors.imu, &calib)?;
    let out = fuse(&tracked, &sensors.slam, cfg.skeleton_model()?, &cfg.guidance_weights()?, &cfg.fusion_options())?;
    ensure_dir(&cfg.out)?;
    let path = cfg.out_path(MOTION_FILE);
    let mut meta = BTreeMap::new();
    meta.insert("weights".into(), cfg.guidance_weights()?.to_string());
    write_recording(&motion_to_recording(&out.motion, meta), &path)?;
    Ok(FuseSummary {
        motion: path,
        frames: out.motion.len(),
        windows: out.diagnostics.windows.len(),
        iterations: out.diagnostics.iterations(),
    })
}

/// Evaluates one predicted motion against the truth, leaving out the
/// calibration window recorded in the truth file.
pub fn cmd_eval(cfg: &PipelineConfig, pred: &Path, truth: &Path) -> Result<EvalReport, PipelineError> {
    let skeleton = cfg.skeleton_model()?;
    let truth_rec = read_recording(truth)?;
    let pred_m = motion_from_recording(&read_recording(pred)?, skeleton.clone())?;
    let truth_m = motion_from_recording(&truth_rec, skeleton)?;
    let exclude = match (truth_rec.meta_i64(META_CALIBRATION_START), truth_rec.meta_i64(META_CALIBRATION_END)) {
        (Some(a), Some(b)) => vec![(a, b)],
        _ => Vec::new(),
    };
    let name = truth_rec.meta.get("motion").cloned().unwrap_or_else(|| "clip".into());
    let report = build_report(&[EvalClip { name, pred: pred_m, truth: truth_m, exclude }], cfg.max_gap_ms)?;
    report.write(&cfg.out)?;
    Ok(report)
}

/// simulate → calibrate → track → fuse → eval in `cfg.out`.
pub fn cmd_roundtrip(cfg: &PipelineConfig) -> Result<EvalReport, PipelineError> {
    let sim = cmd_simulate(cfg)?;
    let calib = cmd_calibrate(cfg, &sim.recording, None)?;
    cmd_track(cfg, &sim.recording, &calib)?;
    let fused = cmd_fuse(cfg, &sim.recording, &calib)?;
    cmd_eval(cfg, &fused.motion, &sim.truth)
}
