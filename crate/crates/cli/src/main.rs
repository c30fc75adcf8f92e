//! `rgae`: train the toy model, trace generations and explain them.

mod commands;
mod run_dir;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use rgae_core::compressor::PoolMode;
use rgae_core::model::TraceMode;
use rgae_core::rgae::CrossRule;
use rgae_core::trace_io::RunConfig;

use commands::*;
use run_dir::RunDir;

/// Exit status for configuration and input errors.
const EXIT_INVALID: u8 = 3;
/// Exit status when a named input file does not exist.
const EXIT_MISSING: u8 = 4;

#[derive(Parser)]
#[command(name = "rgae", version, about = "Relevance maps for compressive projectors in a toy vision-language model")]
struct Cli {
    /// Output root; each run writes to `<out>/<subcommand>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    TeacherForced,
    Greedy,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    Simple,
    Normalized,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolArg {
    Avg,
    Max,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    RawAttn,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus the loss curve.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the number of training stages (1 or 2).
        #[arg(long)]
        stages: Option<u8>,
    },
    /// Trace one generation and compute its relevance maps.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Synthetic sample as `color,row,col`.
        #[arg(long, conflicts_with = "image")]
        sample: Option<String>,
        /// Image cells as CSV, one patch per row.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Caption to teacher-force.
        #[arg(long)]
        text: Option<String>,
        #[arg(long, value_enum, default_value = "teacher-forced")]
        mode: ModeArg,
        #[arg(long, value_enum, default_value = "normalized")]
        rule: RuleArg,
        /// Also compute a raw-attention baseline.
        #[arg(long, value_enum)]
        baseline: Option<BaselineArg>,
        #[arg(long, default_value_t = 16)]
        cell_pixels: usize,
    },
    /// Adaptively pool a patch-token tensor.
    Pool {
        /// A `.csv` matrix or a trace file.
        #[arg(long)]
        input: PathBuf,
        /// Record name inside a trace file.
        #[arg(long)]
        name: Option<String>,
        #[arg(long, value_enum, default_value = "avg")]
        mode: PoolArg,
        #[arg(long)]
        out_side: usize,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = rgae_core::gradcheck::DEFAULT_TOLERANCE)]
        tolerance: f64,
        #[arg(long, default_value_t = rgae_core::gradcheck::DEFAULT_STEP)]
        step: f64,
    },
    /// Train every projector over a sweep of output sizes.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Stage-1 steps per run.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        eval_samples: Option<usize>,
    },
    /// Render a map as a PGM/PPM heatmap.
    Render {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        name: Option<String>,
        /// File name inside the run directory (a directory with `--grid`).
        #[arg(long, default_value = "map.pgm")]
        output: String,
        #[arg(long, default_value_t = 16)]
        cell_pixels: usize,
        /// Treat the input as a query-to-patch matrix and draw every row.
        #[arg(long)]
        grid: bool,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Explain { .. } => "explain",
            Command::Pool { .. } => "pool",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Compare { .. } => "compare",
            Command::Render { .. } => "render",
        }
    }

    fn config_path(&self) -> Option<&Path> {
        match self {
            Command::Train { config, .. } | Command::Gradcheck { config, .. } | Command::Compare { config, .. } => {
                config.as_deref()
            }
            _ => None,
        }
    }
}

/// `--out`, then the config's `output_dir`, then `RGAE_OUT`, then `runs`.
fn output_root(cli: &Cli) -> Result<PathBuf> {
    if let Some(out) = &cli.out {
        return Ok(out.clone());
    }
    if let Some(path) = cli.command.config_path() {
        require(path)?;
        if let Some(dir) = RunConfig::load(path)?.output_dir {
            return Ok(dir);
        }
    }
    Ok(std::env::var_os("RGAE_OUT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs")))
}

fn run(cli: Cli) -> Result<()> {
    let root = output_root(&cli)?.join(cli.command.name());
    let line: Vec<String> = std::env::args().collect();
    let mut dir = RunDir::create(root, line.join(" "))?;
    match cli.command {
        Command::Train { config, stages } => cmd_train(&mut dir, &TrainArgs { config, stages })?,
        Command::Explain {
            checkpoint,
            sample,
            image,
            text,
            mode,
            rule,
            baseline,
            cell_pixels,
        } => cmd_explain(
            &mut dir,
            &ExplainArgs {
                checkpoint,
                sample,
                image,
                text,
                mode: match mode {
                    ModeArg::TeacherForced => TraceMode::TeacherForced,
                    ModeArg::Greedy => TraceMode::Greedy,
                },
                rule: match rule {
                    RuleArg::Simple => CrossRule::Simple,
                    RuleArg::Normalized => CrossRule::Normalized,
                },
                baseline: baseline.is_some(),
                cell_pixels,
            },
        )?,
        Command::Pool {
            input,
            name,
            mode,
            out_side,
        } => cmd_pool(
            &mut dir,
            &PoolArgs {
                input,
                name,
                mode: match mode {
                    PoolArg::Avg => PoolMode::Avg,
                    PoolArg::Max => PoolMode::Max,
                },
                out_side,
            },
        )?,
        Command::Gradcheck { config, tolerance, step } => {
            // The report is an artifact even when the check fails.
            let outcome = cmd_gradcheck(&mut dir, &GradcheckArgs { config, tolerance, step });
            dir.finish()?;
            return outcome;
        }
        Command::Compare {
            config,
            steps,
            eval_samples,
        } => cmd_compare(
            &mut dir,
            &CompareArgs {
                config,
                steps,
                eval_samples,
            },
        )?,
        Command::Render {
            input,
            name,
            output,
            cell_pixels,
            grid,
        } => cmd_render(
            &mut dir,
            &RenderArgs {
                input,
                name,
                output,
                cell_pixels,
                grid,
            },
        )?,
    }
    let manifest = dir.finish()?;
    println!("manifest: {}", manifest.display());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use rgae_core::Error as E;
    for cause in err.chain() {
        if cause.is::<MissingFile>() {
            return EXIT_MISSING;
        }
        if cause.is::<InvalidInput>() {
            return EXIT_INVALID;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING,
                E::Config(_)
                | E::Parse { .. }
                | E::Upsample { .. }
                | E::InvalidShape(_)
                | E::TokenOutOfVocab { .. }
                | E::InvalidName(_)
                | E::MissingRecord(_)
                | E::BadMagic
                | E::UnsupportedVersion(_)
                | E::Truncated(_) => EXIT_INVALID,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
