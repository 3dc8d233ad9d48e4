use std::path::Path;

use bodyfuse_core::pipeline::{
    cmd_calibrate, cmd_eval, cmd_fuse, cmd_roundtrip, cmd_simulate, cmd_track, PipelineConfig, CALIBRATION_FILE,
    MOTION_FILE, RECORDING_FILE, TRACKED_FILE, TRUTH_FILE,
};
use bodyfuse_core::sim::SimConfig;
use bodyfuse_core::stream::read_recording;

fn config(dir: &Path, motion: &str, seed: u64) -> PipelineConfig {
    PipelineConfig {
        out: dir.to_path_buf(),
        motion: motion.into(),
        duration_s: 12.0,
        seed,
        ..PipelineConfig::default()
    }
}

const OUTPUTS: [&str; 7] = [RECORDING_FILE, TRUTH_FILE, CALIBRATION_FILE, TRACKED_FILE, MOTION_FILE, "report.csv", "report.txt"];

#[test]
fn roundtrip_equals_the_five_commands() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let whole = cmd_roundtrip(&config(a.path(), "squat", 5)).unwrap();

    let cfg = config(b.path(), "squat", 5);
    let sim = cmd_simulate(&cfg).unwrap();
    let calib = cmd_calibrate(&cfg, &sim.recording, None).unwrap();
    cmd_track(&cfg, &sim.recording, &calib).unwrap();
    let fused = cmd_fuse(&cfg, &sim.recording, &calib).unwrap();
    let parts = cmd_eval(&cfg, &fused.motion, &sim.truth).unwrap();

    assert_eq!(whole, parts);
    for f in OUTPUTS {
        assert!(
            std::fs::read(a.path().join(f)).unwrap() == std::fs::read(b.path().join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn seed_changes_the_recording() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    cmd_simulate(&config(a.path(), "walk-cycle", 1)).unwrap();
    cmd_simulate(&config(b.path(), "walk-cycle", 2)).unwrap();
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_ne!(read(a.path(), RECORDING_FILE), read(b.path(), RECORDING_FILE));
    // the truth motion does not depend on the noise seed
    let motion = |d: &Path| read_recording(&d.join(TRUTH_FILE)).unwrap().streams;
    assert_eq!(motion(a.path()), motion(b.path()));
}

/// Default sensor noise still gives centimeter-level reconstructions.
#[test]
fn noisy_roundtrip_is_accurate() {
    for motion in ["walk-cycle", "squat", "arm-wave"] {
        let d = tempfile::tempdir().unwrap();
        let r = cmd_roundtrip(&config(d.path(), motion, 3)).unwrap();
        let a = &r.aggregate;
        assert_eq!(a.recall, 1.0);
        assert!(a.mpjpe_cm < 3.0, "{motion}: {}", r.to_text());
        assert!(a.jae_deg < 5.0, "{motion}: {}", r.to_text());
    }
}

/// Offsets are bounded and uncorrected: they cost accuracy but never break
/// pairing.
#[test]
fn clock_offsets_are_tolerated() {
    let d = tempfile::tempdir().unwrap();
    let mut sim = SimConfig::noiseless();
    sim.clock_offset_ms.imu = 37;
    sim.clock_offset_ms.phone = -12;
    sim.clock_offset_ms.glasses = 20;
    let cfg = PipelineConfig { sim, ..config(d.path(), "arm-wave", 0) };
    let r = cmd_roundtrip(&cfg).unwrap();
    assert_eq!(r.aggregate.recall, 1.0);
    assert!(r.aggregate.mpjpe_cm < 3.0, "{}", r.to_text());
    assert!(r.aggregate.jae_deg < 5.0, "{}", r.to_text());
}

#[test]
fn corrupted_recording_is_a_data_error() {
    let d = tempfile::tempdir().unwrap();
    let cfg = config(d.path(), "walk-cycle", 0);
    let sim = cmd_simulate(&cfg).unwrap();
    let bytes = std::fs::read(&sim.recording).unwrap();
    let cut = d.path().join("cut.bfr");
    std::fs::write(&cut, &bytes[..bytes.len() - 7]).unwrap();
    let e = cmd_calibrate(&cfg, &cut, None).unwrap_err();
    assert_eq!(e.exit_code(), 3);
    assert!(e.to_string().contains("stream:"), "{e}");
}
