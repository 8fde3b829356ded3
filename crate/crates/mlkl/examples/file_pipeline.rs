//! The on-disk pipeline end to end, exactly as the CLI drives it:
//! simulate a stack, fit and serialize a filter, detect over the stack,
//! and track one pixel — all through files in a temp directory.
//!
//! ```bash
//! cargo run --release --example file_pipeline
//! ```

use mlkl::app::commands::{
    cmd_detect, cmd_fit, cmd_sequence, cmd_simulate, DetectOptions, FitOptions, SequenceOptions,
    SimulateOptions,
};
use mlkl::app::simulate::{AnomalyProfile, AnomalySpec, CoefficientDist, SimSpec, SpectrumSpec};
use mlkl::config::FilterConfig;

fn main() {
    let dir = std::env::temp_dir().join("mlkl_file_pipeline");
    std::fs::create_dir_all(&dir).expect("temp dir");
    let spec_path = dir.join("scenario.json");
    let stack_path = dir.join("stack.mlaf");
    let filter_path = dir.join("filter.mlkf");
    let outdir = dir.join("reports");
    let seq_path = dir.join("sequence.csv");

    let spec = SimSpec {
        rows: 15,
        cols: 15,
        bands: 3,
        frames: 70,
        cell_measure: 1.0,
        spectrum: SpectrumSpec::Power {
            count: 24,
            scale: 1.0,
            exponent: 2.0,
        },
        coefficients: CoefficientDist::Gaussian,
        mean_level: 8.0,
        seed: 99,
        day_start: 100,
        day_step: 16,
        anomalies: vec![AnomalySpec {
            profile: AnomalyProfile::Step { amplitude: 4.0 },
            frames: [55, 64],
            rect: [4, 4, 8, 8],
            bands: vec![0, 1],
        }],
        masked_frames: vec![],
    };
    std::fs::write(
        &spec_path,
        serde_json::to_string_pretty(&spec).expect("json"),
    )
    .expect("write");

    let frames = cmd_simulate(&SimulateOptions {
        spec: spec_path.clone(),
        out: stack_path.clone(),
        seed: None,
    })
    .expect("simulate");
    println!("simulated {frames} frames -> {}", stack_path.display());

    let config = FilterConfig {
        truncation: 16,
        leaf_capacity: 4,
        ..FilterConfig::default()
    };
    let fit = cmd_fit(&FitOptions {
        input: stack_path.clone(),
        out: filter_path.clone(),
        train_range: Some((0, 50)),
        config,
        cell_measure: 1.0,
    })
    .expect("fit");
    println!(
        "fitted M = {} modes on {} frames; lambda_1 = {:.4}, t_M = {:.3e}",
        fit.lambdas.len(),
        fit.training_frames,
        fit.lambdas[0],
        fit.tail_sum
    );

    let summaries = cmd_detect(&DetectOptions {
        filter: filter_path.clone(),
        input: stack_path.clone(),
        outdir: outdir.clone(),
        alpha: Some(0.01),
        threshold_mode: None,
    })
    .expect("detect");
    println!("\nper-frame reports in {}:", outdir.display());
    println!("{:>6}  {:>12}  {:>9}", "day", "norm", "rejected");
    for s in summaries
        .iter()
        .filter(|s| s.rejected_cells > 0 || s.day % 160 == 100)
    {
        println!("{:>6}  {:>12.4e}  {:>9}", s.day, s.norm, s.rejected_cells);
    }

    cmd_sequence(&SequenceOptions {
        filter: filter_path,
        input: stack_path,
        out: seq_path.clone(),
        pixel: (6, 6),
        span: Some(0.25),
    })
    .expect("sequence");
    println!("\npixel (6,6) time series -> {}", seq_path.display());
    let text = std::fs::read_to_string(&seq_path).expect("read");
    for line in text.lines().take(8) {
        println!("  {line}");
    }
    println!("  ...");
}
