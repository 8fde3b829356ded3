//! Build the multilevel basis over a kd-tree and inspect its structure:
//! detail counts per level, orthogonality residuals and the split-count
//! work bound.
//!
//! ```bash
//! cargo run --release --example multilevel_construction
//! ```

use mlkl::app::simulate::random_orthonormal_fields;
use mlkl::geometry::{build_grid_domain, IndicatorBasis, PiecewiseField};
use mlkl::multilevel::{build_multilevel, DEFAULT_RANK_TOL};
use mlkl::partition::make_tree;
use mlkl::spectral::KLBasis;
use rand::SeedableRng;

fn main() {
    let rows = 25;
    let cols = 18;
    let q = 1;
    let m = 40;

    let domain = build_grid_domain(rows, cols, 900.0, q).expect("domain");
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let fields = random_orthonormal_fields(&domain, m, &mut rng);
    let lambdas: Vec<f64> = (1..=m).map(|k| (k as f64).powi(-2)).collect();
    let kl = KLBasis::from_parts(
        PiecewiseField::zeros(domain.clone()),
        lambdas,
        fields,
        1e-3,
        0.05,
    )
    .expect("kl");

    let n0 = 8;
    let tree = make_tree(&domain, n0).expect("tree");
    let basis = build_multilevel(
        &tree,
        &IndicatorBasis::new(domain.clone()),
        &kl,
        DEFAULT_RANK_TOL,
    )
    .expect("basis");

    println!("{rows}x{cols} grid, q = {q}, M = {m}, n0 = {n0}");
    println!(
        "tree: {} nodes over levels 0..={}",
        tree.nodes().len(),
        tree.depth()
    );
    println!(
        "splits performed: {} (bound 2N-1 = {})\n",
        basis.split_call_count(),
        2 * domain.len() - 1
    );

    println!("{:>6}  {:>6}  {:>8}", "level", "cells", "details");
    for level in 0..basis.level_count() {
        let details = basis.level_details(level);
        let cells: std::collections::BTreeSet<usize> =
            details.iter().map(|d| d.cell_index).collect();
        println!("{:>6}  {:>6}  {:>8}", level, cells.len(), details.len());
    }
    println!(
        "\nroot carried (spans the KL subspace): {}\ntotal functions: {} = N*q = {}",
        basis.root_carried().len(),
        basis.total_function_count(),
        domain.function_count()
    );

    // residuals: how orthonormal is the output, how orthogonal to the KL
    let funcs: Vec<_> = basis
        .details()
        .map(|d| &d.function)
        .chain(basis.root_carried().iter())
        .collect();
    let mut gram_dev = 0.0f64;
    for (i, f) in funcs.iter().enumerate() {
        for (j, g) in funcs.iter().enumerate().skip(i) {
            if f.support().end <= g.support().start || g.support().end <= f.support().start {
                continue;
            }
            let want = if i == j { 1.0 } else { 0.0 };
            gram_dev = gram_dev.max((f.dot(g) - want).abs());
        }
    }
    let coords: Vec<Vec<f64>> = kl
        .eigenfields()
        .iter()
        .map(|p| basis.layout().field_coords(p))
        .collect();
    let mut moment = 0.0f64;
    for d in basis.details() {
        for c in &coords {
            moment = moment.max(d.function.dot_coords(c).abs());
        }
    }
    println!("gram deviation from identity: {gram_dev:.2e}");
    println!("max detail moment against eigenfields: {moment:.2e}");
}
