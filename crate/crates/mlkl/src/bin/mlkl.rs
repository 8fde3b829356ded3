//! Command-line front end over the library pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mlkl::app::commands::{
    cmd_detect, cmd_fit, cmd_sequence, cmd_simulate, DetectOptions, FitOptions, SequenceOptions,
    SimulateOptions,
};
use mlkl::app::AppError;
use mlkl::config::{FilterConfig, TailMode, ThresholdMode};

#[derive(Parser)]
#[command(
    name = "mlkl",
    version,
    about = "Multilevel KL anomaly filter for raster stacks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the KL spectrum and multilevel filter from training frames.
    Fit {
        /// Input stack (MLAF).
        #[arg(long)]
        input: PathBuf,
        /// Training frames as START..END (half open); defaults to all.
        #[arg(long, value_parser = parse_range)]
        train_range: Option<(usize, usize)>,
        /// KL truncation order.
        #[arg(long = "M")]
        truncation: usize,
        /// kd-tree leaf capacity.
        #[arg(long, default_value_t = 8)]
        n0: usize,
        /// Relative singular-value cutoff for local ranks.
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        #[arg(long, value_enum, default_value_t = TailModeArg::DataDriven)]
        tail_mode: TailModeArg,
        /// Measure (area) of one cell.
        #[arg(long, default_value_t = 1.0)]
        cell_measure: f64,
        /// Output filter file (MLKF).
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a stack against a fitted filter.
    Detect {
        #[arg(long)]
        filter: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Significance level; defaults to the fitted configuration.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, value_enum)]
        threshold_mode: Option<ThresholdModeArg>,
        #[arg(long)]
        outdir: PathBuf,
    },
    /// Track one pixel's anomaly over time with robust smoothing.
    Sequence {
        #[arg(long)]
        filter: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Pixel as ROW,COL.
        #[arg(long, value_parser = parse_pixel)]
        pixel: (usize, usize),
        /// Smoother span fraction; defaults to the fitted configuration.
        #[arg(long)]
        span: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic stack from a JSON spec.
    Simulate {
        #[arg(long)]
        spec: PathBuf,
        /// Override the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum TailModeArg {
    DataDriven,
    LambdaFloor,
}

impl From<TailModeArg> for TailMode {
    fn from(v: TailModeArg) -> Self {
        match v {
            TailModeArg::DataDriven => TailMode::DataDriven,
            TailModeArg::LambdaFloor => TailMode::LambdaFloor,
        }
    }
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ThresholdModeArg {
    Chebyshev,
    PaperLiteral,
}

impl From<ThresholdModeArg> for ThresholdMode {
    fn from(v: ThresholdModeArg) -> Self {
        match v {
            ThresholdModeArg::Chebyshev => ThresholdMode::Chebyshev,
            ThresholdModeArg::PaperLiteral => ThresholdMode::PaperLiteral,
        }
    }
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once("..").ok_or("expected START..END")?;
    let start = a
        .trim()
        .parse()
        .map_err(|_| format!("bad range start {a:?}"))?;
    let end = b
        .trim()
        .parse()
        .map_err(|_| format!("bad range end {b:?}"))?;
    Ok((start, end))
}

fn parse_pixel(s: &str) -> Result<(usize, usize), String> {
    let (r, c) = s.split_once(',').ok_or("expected ROW,COL")?;
    let row = r.trim().parse().map_err(|_| format!("bad row {r:?}"))?;
    let col = c.trim().parse().map_err(|_| format!("bad col {c:?}"))?;
    Ok((row, col))
}

fn run(cli: Cli) -> Result<(), AppError> {
    match cli.command {
        Command::Fit {
            input,
            train_range,
            truncation,
            n0,
            tol,
            tail_mode,
            cell_measure,
            out,
        } => {
            let config = FilterConfig {
                truncation,
                leaf_capacity: n0,
                rank_tol: tol,
                tail_mode: tail_mode.into(),
                ..FilterConfig::default()
            };
            let report = cmd_fit(&FitOptions {
                input,
                out,
                train_range,
                config,
                cell_measure,
            })?;
            println!("trained on {} frames", report.training_frames);
            println!("spectrum:");
            for (k, l) in report.lambdas.iter().enumerate() {
                println!("  lambda_{:<3} = {:.6e}", k + 1, l);
            }
            println!("tail sum t_M      = {:.6e}", report.tail_sum);
            println!("tail root sum s_M = {:.6e}", report.tail_root_sum);
            println!("basis functions   = {}", report.basis_functions);
        }
        Command::Detect {
            filter,
            input,
            alpha,
            threshold_mode,
            outdir,
        } => {
            let summaries = cmd_detect(&DetectOptions {
                filter,
                input,
                outdir,
                alpha,
                threshold_mode: threshold_mode.map(Into::into),
            })?;
            println!("day,norm,rejected_cells,cells_used");
            for s in &summaries {
                println!(
                    "{},{:.6e},{},{}",
                    s.day, s.norm, s.rejected_cells, s.cells_used
                );
            }
        }
        Command::Sequence {
            filter,
            input,
            pixel,
            span,
            out,
        } => {
            cmd_sequence(&SequenceOptions {
                filter,
                input,
                out: out.clone(),
                pixel,
                span,
            })?;
            println!("sequence written to {}", out.display());
        }
        Command::Simulate { spec, seed, out } => {
            let frames = cmd_simulate(&SimulateOptions {
                spec,
                out: out.clone(),
                seed,
            })?;
            println!("{frames} frames written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("MLKL_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
            _ => eprintln!("mlkl: ignoring invalid MLKL_THREADS={threads}"),
        }
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mlkl: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
