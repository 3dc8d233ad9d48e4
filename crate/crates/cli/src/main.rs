use std::path::PathBuf;
use std::process::ExitCode;

use bodyfuse_core::pipeline::{
    cmd_calibrate, cmd_eval, cmd_fuse, cmd_roundtrip, cmd_simulate, cmd_track, PipelineConfig, PipelineError,
};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bodyfuse", version, about = "Full-body motion capture from sparse IMUs and a head-mounted SLAM pose")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration (TOML); defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Maximum timestamp gap in ms for stream alignment.
    #[arg(long = "max-gap", global = true)]
    max_gap: Option<i64>,
    /// Guidance weights as `key=value,...`.
    #[arg(long, global = true)]
    weights: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a motion and its simulated sensor recording.
    Simulate {
        /// Motion kind: walk-cycle, squat, arm-wave or scripted-file:<path>.
        #[arg(long)]
        motion: Option<String>,
        /// Clip length in seconds.
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Estimate per-tracker alignment from the calibration window.
    Calibrate {
        #[arg(long)]
        recording: PathBuf,
        /// Explicit window `START_MS:END_MS` in recording time.
        #[arg(long, value_parser = parse_window)]
        window: Option<(i64, i64)>,
    },
    /// Write per-frame bone orientations from the IMUs.
    Track {
        #[arg(long)]
        recording: PathBuf,
        #[arg(long)]
        calibration: PathBuf,
    },
    /// Solve for the full-body motion.
    Fuse {
        #[arg(long)]
        recording: PathBuf,
        #[arg(long)]
        calibration: PathBuf,
    },
    /// Compare a predicted motion with the truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// simulate, calibrate, track, fuse and eval in one output directory.
    Roundtrip,
}

fn parse_window(s: &str) -> Result<(i64, i64), String> {
    let (a, b) = s.split_once(':').ok_or("expected START_MS:END_MS")?;
    let a = a.trim().parse::<i64>().map_err(|e| format!("start: {e}"))?;
    let b = b.trim().parse::<i64>().map_err(|e| format!("end: {e}"))?;
    Ok((a, b))
}

fn config(common: &Common) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    if let Some(g) = common.max_gap {
        cfg.max_gap_ms = g;
    }
    if let Some(w) = &common.weights {
        cfg.weights = w.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut cfg = config(&cli.common)?;
    match cli.command {
        Command::Simulate { motion, duration } => {
            if let Some(m) = motion {
                cfg.motion = m;
            }
            if let Some(d) = duration {
                cfg.duration_s = d;
            }
            let out = cmd_simulate(&cfg)?;
            println!("{}\n{}", out.recording.display(), out.truth.display());
        }
        Command::Calibrate { recording, window } => {
            cfg.validate()?;
            println!("{}", cmd_calibrate(&cfg, &recording, window)?.display());
        }
        Command::Track { recording, calibration } => {
            cfg.validate()?;
            println!("{}", cmd_track(&cfg, &recording, &calibration)?.display());
        }
        Command::Fuse { recording, calibration } => {
            cfg.validate()?;
            let s = cmd_fuse(&cfg, &recording, &calibration)?;
            eprintln!("{} frames, {} windows, {} iterations", s.frames, s.windows, s.iterations);
            println!("{}", s.motion.display());
        }
        Command::Eval { pred, truth } => {
            cfg.validate()?;
            print!("{}", cmd_eval(&cfg, &pred, &truth)?.to_text());
        }
        Command::Roundtrip => print!("{}", cmd_roundtrip(&cfg)?.to_text()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bodyfuse: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
