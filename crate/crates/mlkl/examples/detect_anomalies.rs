//! Fit a filter on nominal snapshots, inject a localized anomaly into a new
//! frame, and walk the detection output: per-cell energies, hypothesis
//! tests, the anomaly map and the norm bounds.
//!
//! ```bash
//! cargo run --release --example detect_anomalies
//! ```

use mlkl::app::simulate::{simulate, CoefficientDist, SimSpec, SpectrumSpec};
use mlkl::config::FilterConfig;
use mlkl::detect::{region_p_value, AnomalyFilter};
use mlkl::geometry::build_grid_domain;
use mlkl::spectral::SnapshotSet;

fn main() {
    let rows = 20;
    let cols = 20;
    let spec = SimSpec {
        rows,
        cols,
        bands: 1,
        frames: 80,
        cell_measure: 1.0,
        spectrum: SpectrumSpec::Power {
            count: 30,
            scale: 1.0,
            exponent: 2.0,
        },
        coefficients: CoefficientDist::Gaussian,
        mean_level: 10.0,
        seed: 21,
        day_start: 1,
        day_step: 1,
        anomalies: vec![],
        masked_frames: vec![],
    };
    let (stack, _) = simulate(&spec).expect("simulation");
    let domain = build_grid_domain(rows, cols, 1.0, 1).expect("domain");
    let frames: Vec<_> = (0..stack.frames().len())
        .map(|i| stack.field(&domain, i).expect("field"))
        .collect();
    let snapshots = SnapshotSet::new(frames).expect("snapshots");

    let config = FilterConfig {
        truncation: 20,
        leaf_capacity: 4,
        alpha: 1e-2,
        ..FilterConfig::default()
    };
    let filter = AnomalyFilter::fit(&snapshots, config).expect("fit");
    println!(
        "filter: M = {}, t_M = {:.3e}, {} detail functions",
        filter.kl().truncation_order(),
        filter.kl().tail_sum(),
        filter.basis().detail_count()
    );

    // a nominal frame first
    let nominal = filter
        .score(&snapshots.frames()[3], Some(0))
        .expect("score");
    println!(
        "\nnominal frame:   ||w|| = {:.3e}, rejected cells: {}",
        nominal.norm,
        nominal.scores.iter().filter(|s| s.reject).count()
    );

    // then the same frame with a 3x3 bump injected
    let mut bumped = snapshots.frames()[3].clone();
    for r in 8..11 {
        for c in 8..11 {
            bumped.values_mut()[(r * cols + c, 0)] += 2.0;
        }
    }
    let report = filter.score(&bumped, Some(1)).expect("score");
    println!(
        "injected bump:   ||w|| = {:.3e}, rejected cells: {}",
        report.norm,
        report.scores.iter().filter(|s| s.reject).count()
    );
    println!(
        "norm bound interval for the expected energy: [{:.3e}, {:.3e}]",
        report.lower, report.upper
    );

    println!("\nrejected cells (level, k, energy, p):");
    for s in report.scores.iter().filter(|s| s.reject) {
        println!(
            "  ({:>2}, {:>3})  energy {:>9.3e}  p {:>9.3e}",
            s.level, s.cell_index, s.energy, s.p_value
        );
    }

    // region test around the bump and far away from it
    let around: Vec<usize> = (7..12)
        .flat_map(|r| (7..12).map(move |c| r * cols + c))
        .collect();
    let far: Vec<usize> = (0..3)
        .flat_map(|r| (15..18).map(move |c| r * cols + c))
        .collect();
    let p_around = region_p_value(&report.anomaly, &around, filter.kl(), 0.01).expect("region");
    let p_far = region_p_value(&report.anomaly, &far, filter.kl(), 0.01).expect("region");
    println!("\nregion p-value around the bump: {p_around:.3e}");
    println!("region p-value far away:        {p_far:.3e}");

    // the anomaly map concentrates on the injected pixels
    let peak = (0..domain.len())
        .max_by(|&a, &b| {
            report
                .anomaly
                .value(a, 0)
                .abs()
                .total_cmp(&report.anomaly.value(b, 0).abs())
        })
        .unwrap();
    println!(
        "anomaly map peak at pixel (row {}, col {})",
        peak / cols,
        peak % cols
    );
}
