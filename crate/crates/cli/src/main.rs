//! `sofas`: synthesize, segment, evaluate and render event streams.

mod commands;
mod error;
mod render;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;
use crate::settings::Settings;

#[derive(Debug, Parser)]
#[command(name = "sofas", version, about = "Event-camera optical flow and segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options every subcommand takes. Flags override the config file, and
/// `--set` overrides both.
#[derive(Debug, Args)]
struct Common {
    /// Flat `key = value` settings; a manifest replays its run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one setting, `key=value`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic event stream and its ground truth.
    Synth {
        /// circle, hexagon, rectangle or bar.
        #[arg(long)]
        shape: Option<String>,
        /// Extent in pixels; the diameter for circles, the length for bars.
        #[arg(long)]
        width: Option<f64>,
        /// Rectangle height or bar thickness.
        #[arg(long)]
        height: Option<f64>,
        /// Constant flow `v_u,v_v` in px/s.
        #[arg(long, allow_hyphen_values = true)]
        vel: Option<String>,
        /// constant, pendulum or rotation.
        #[arg(long)]
        motion: Option<String>,
        /// Duration in seconds.
        #[arg(long)]
        dur: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Event file to write; the ground truth goes to `<out>.gt`.
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Label a stream with the segmentation engine.
    Run {
        input: Option<PathBuf>,
        /// Labeled events; snapshots and manifest are written alongside.
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Label a stream with the Lucas-Kanade baseline.
    Lk {
        input: Option<PathBuf>,
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare a labeled stream with ground truth.
    Eval {
        /// Output of `run` or `lk`.
        input: Option<PathBuf>,
        /// Ground-truth sidecar from `synth`.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Ignore events before this many seconds.
        #[arg(long)]
        since: Option<f64>,
        /// Summary file; standard output when absent.
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Write PPM frames of a labeled stream.
    Render {
        input: Option<PathBuf>,
        /// Directory for `frame_NNNNN.ppm`.
        #[arg(long, short)]
        out: Option<PathBuf>,
        /// flow or segment.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        frame_us: Option<u64>,
        #[arg(long)]
        v_sat: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Measure engine throughput.
    Bench {
        /// Event file; a synthetic hexagon when absent.
        input: Option<PathBuf>,
        #[arg(long)]
        repeat: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
}

fn path_str(p: Option<PathBuf>) -> Option<String> {
    p.map(|p| p.display().to_string())
}

fn settings(common: &Common, flags: &[(&str, Option<String>)]) -> Result<Settings, CliError> {
    let mut s = Settings::load(common.config.as_deref())?;
    for (key, value) in flags {
        s.set_opt(key, value.clone());
    }
    s.apply_overrides(&common.set)?;
    Ok(s)
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    let s = |v: Option<f64>| v.map(|x| x.to_string());
    match cmd {
        Command::Synth { shape, width, height, vel, motion, dur, seed, out, common } => {
            let flags = [
                ("shape", shape),
                ("width", s(width)),
                ("height", s(height)),
                ("vel", vel),
                ("motion", motion),
                ("duration", s(dur)),
                ("seed", seed.map(|x| x.to_string())),
                ("output", path_str(out)),
            ];
            commands::synth(&settings(&common, &flags)?)
        }
        Command::Run { input, out, common } => {
            commands::run(&settings(&common, &[("input", path_str(input)), ("output", path_str(out))])?)
        }
        Command::Lk { input, out, common } => {
            commands::lk(&settings(&common, &[("input", path_str(input)), ("output", path_str(out))])?)
        }
        Command::Eval { input, gt, since, out, common } => {
            let flags =
                [("input", path_str(input)), ("gt", path_str(gt)), ("since", s(since)), ("output", path_str(out))];
            commands::eval(&settings(&common, &flags)?)
        }
        Command::Render { input, out, mode, frame_us, v_sat, common } => {
            let flags = [
                ("input", path_str(input)),
                ("output", path_str(out)),
                ("render.mode", mode),
                ("render.frame_us", frame_us.map(|x| x.to_string())),
                ("render.v_sat", s(v_sat)),
            ];
            commands::render(&settings(&common, &flags)?)
        }
        Command::Bench { input, repeat, common } => {
            let flags = [("input", path_str(input)), ("repeat", repeat.map(|x| x.to_string()))];
            commands::bench(&settings(&common, &flags)?)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    // A panic inside the library is a broken invariant, not bad input.
    let outcome = std::panic::catch_unwind(|| dispatch(cli.command))
        .unwrap_or_else(|_| Err(CliError::Internal("panic while processing".into())));
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sofas: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
