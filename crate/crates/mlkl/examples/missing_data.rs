//! Score frames with missing cells (cloud cover): the filter restricts the
//! domain to the valid cells and rebuilds itself there instead of
//! zero-filling, so masked pixels cannot manufacture anomalies.
//!
//! ```bash
//! cargo run --release --example missing_data
//! ```

use mlkl::app::simulate::{simulate, CoefficientDist, SimSpec, SpectrumSpec};
use mlkl::config::FilterConfig;
use mlkl::detect::AnomalyFilter;
use mlkl::geometry::build_grid_domain;
use mlkl::spectral::SnapshotSet;

fn main() {
    let rows = 12;
    let cols = 12;
    let spec = SimSpec {
        rows,
        cols,
        bands: 2,
        frames: 50,
        cell_measure: 1.0,
        spectrum: SpectrumSpec::Power {
            count: 20,
            scale: 1.0,
            exponent: 2.0,
        },
        coefficients: CoefficientDist::Gaussian,
        mean_level: 6.0,
        seed: 55,
        day_start: 1,
        day_step: 1,
        anomalies: vec![],
        masked_frames: vec![],
    };
    let (stack, _) = simulate(&spec).expect("simulation");
    let domain = build_grid_domain(rows, cols, 1.0, 2).expect("domain");
    let frames: Vec<_> = (0..stack.frames().len())
        .map(|i| stack.field(&domain, i).expect("field"))
        .collect();
    let snapshots = SnapshotSet::new(frames.clone()).expect("snapshots");

    let config = FilterConfig {
        truncation: 12,
        leaf_capacity: 4,
        ..FilterConfig::default()
    };
    let filter = AnomalyFilter::fit(&snapshots, config).expect("fit");

    // a "cloud" obscures the top-left quadrant of an otherwise nominal frame
    let mut mask = vec![true; domain.len()];
    for r in 0..6 {
        for c in 0..6 {
            mask[r * cols + c] = false;
        }
    }
    let observed = &frames[10];

    let full = filter.score(observed, Some(1)).expect("score");
    let masked = filter
        .score_masked(observed, &mask, Some(1))
        .expect("masked score");
    println!(
        "full-domain scoring:   {} cells, {} coefficients, ||w|| = {:.3e}",
        full.cells_used,
        full.table.len(),
        full.norm
    );
    println!(
        "masked scoring:        {} cells, {} coefficients, ||w|| = {:.3e}",
        masked.cells_used,
        masked.table.len(),
        masked.norm
    );

    // the restricted rebuild is cached per mask
    let a = filter.restricted(&mask).expect("restricted");
    let b = filter.restricted(&mask).expect("restricted");
    println!(
        "restricted rebuild cached: {}",
        std::sync::Arc::ptr_eq(&a, &b)
    );

    // what zero-filling would have done instead: a large fake anomaly
    let mut zero_filled = observed.clone();
    for (cell, &valid) in mask.iter().enumerate() {
        if !valid {
            for h in 0..2 {
                zero_filled.values_mut()[(cell, h)] = 0.0;
            }
        }
    }
    let fake = filter.score(&zero_filled, Some(1)).expect("score");
    println!(
        "\nzero-filling the cloud instead would report ||w|| = {:.3e} with {} rejected cells",
        fake.norm,
        fake.scores.iter().filter(|s| s.reject).count()
    );
    println!(
        "domain restriction reports ||w|| = {:.3e} with {} rejected cells",
        masked.norm,
        masked.scores.iter().filter(|s| s.reject).count()
    );
}
