//! Fit a truncated KL basis from synthetic snapshots and inspect the
//! recovered spectrum against the generating one.
//!
//! ```bash
//! cargo run --release --example fit_kl_spectrum
//! ```

use mlkl::app::simulate::{simulate, CoefficientDist, SimSpec, SpectrumSpec};
use mlkl::geometry::{build_grid_domain, inner_product};
use mlkl::spectral::{fit_snapshots, kl_coefficients, SnapshotSet};

fn main() {
    let spec = SimSpec {
        rows: 16,
        cols: 16,
        bands: 1,
        frames: 400,
        cell_measure: 1.0,
        spectrum: SpectrumSpec::Geometric {
            count: 8,
            scale: 1.0,
            ratio: 0.5,
        },
        coefficients: CoefficientDist::Gaussian,
        mean_level: 3.0,
        seed: 7,
        day_start: 1,
        day_step: 1,
        anomalies: vec![],
        masked_frames: vec![],
    };
    let (stack, model) = simulate(&spec).expect("simulation");
    let domain = build_grid_domain(16, 16, 1.0, 1).expect("domain");
    let frames: Vec<_> = (0..stack.frames().len())
        .map(|i| stack.field(&domain, i).expect("field"))
        .collect();
    let snapshots = SnapshotSet::new(frames).expect("snapshots");

    let m = 6;
    let basis = fit_snapshots(&snapshots, m).expect("fit");

    println!(
        "fitted {m} of {} generating modes from {} snapshots\n",
        model.lambdas.len(),
        spec.frames
    );
    println!(
        "{:>4}  {:>12}  {:>12}  {:>8}",
        "k", "lambda_hat", "lambda_true", "rel err"
    );
    for k in 0..m {
        let hat = basis.lambdas()[k];
        let truth = model.lambdas[k];
        println!(
            "{:>4}  {:>12.6}  {:>12.6}  {:>7.2}%",
            k + 1,
            hat,
            truth,
            100.0 * (hat - truth).abs() / truth
        );
    }
    println!("\ntail sum t_M      = {:.6e}", basis.tail_sum());
    println!("tail root sum s_M = {:.6e}", basis.tail_root_sum());

    // eigenfields are orthonormal under the domain inner product
    let mut max_dev = 0.0f64;
    for (i, a) in basis.eigenfields().iter().enumerate() {
        for (j, b) in basis.eigenfields().iter().enumerate() {
            let want = if i == j { 1.0 } else { 0.0 };
            max_dev = max_dev.max((inner_product(a, b).expect("same domain") - want).abs());
        }
    }
    println!("eigenfield gram deviation: {max_dev:.2e}");

    // normalized coefficients of one snapshot
    let y = kl_coefficients(&snapshots.frames()[0], &basis).expect("coefficients");
    let y: Vec<f64> = y.into_iter().map(|c| c.unwrap_or(0.0)).collect();
    println!(
        "Y(first snapshot) = {:?}",
        y.iter()
            .map(|v| (v * 100.0).round() / 100.0)
            .collect::<Vec<_>>()
    );
}
