//! The filter on a non-grid domain: user-supplied cells with uneven
//! measures and scattered barycenters, the way a triangulated surface
//! enters (each cell = one simplex: id, measure, barycenter).
//!
//! ```bash
//! cargo run --release --example simplicial_domain
//! ```

use std::sync::Arc;

use mlkl::app::simulate::random_orthonormal_fields;
use mlkl::config::FilterConfig;
use mlkl::detect::AnomalyFilter;
use mlkl::geometry::{Cell, PiecewiseField, SimplicialDomain};
use mlkl::spectral::SnapshotSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);

    // an irregular "mesh": 120 cells with random areas and positions
    let cells: Vec<Cell> = (0..120)
        .map(|i| {
            let area = 0.2 + 1.8 * rng.random::<f64>();
            let bary = vec![rng.random::<f64>() * 10.0, rng.random::<f64>() * 10.0];
            Cell::new(i, area, bary).expect("cell")
        })
        .collect();
    let domain: Arc<SimplicialDomain> = SimplicialDomain::new(cells, 2).expect("domain");
    println!(
        "domain: {} cells, total measure {:.2}, q = {}",
        domain.len(),
        domain.total_measure(),
        domain.band_count()
    );

    // nominal field model on this mesh
    let m_gen = 15;
    let fields = random_orthonormal_fields(&domain, m_gen, &mut rng);
    let lambdas: Vec<f64> = (1..=m_gen).map(|k| (k as f64).powi(-2)).collect();
    let normal = Normal::new(0.0, 1.0).expect("normal");
    let mean = PiecewiseField::constant(domain.clone(), 1.0);
    let draw = |rng: &mut ChaCha8Rng| {
        let mut v = mean.clone();
        for (phi, &l) in fields.iter().zip(&lambdas) {
            v.add_scaled(phi, l.sqrt() * normal.sample(rng))
                .expect("same domain");
        }
        v
    };
    let snapshots: Vec<PiecewiseField> = (0..60).map(|_| draw(&mut rng)).collect();
    let set = SnapshotSet::new(snapshots).expect("snapshots");

    let config = FilterConfig {
        truncation: 10,
        leaf_capacity: 4,
        ..FilterConfig::default()
    };
    let filter = AnomalyFilter::fit(&set, config).expect("fit");
    println!(
        "filter over the mesh: {} detail functions across {} levels, root carries {}",
        filter.basis().detail_count(),
        filter.basis().level_count(),
        filter.basis().root_carried().len()
    );

    // disturb a spatial cluster of cells (whatever lies near (3, 3))
    let mut observed = draw(&mut rng);
    let mut touched = 0;
    for (i, cell) in domain.cells().iter().enumerate() {
        let dx = cell.barycenter[0] - 3.0;
        let dy = cell.barycenter[1] - 3.0;
        if dx * dx + dy * dy < 2.0 {
            for h in 0..2 {
                observed.values_mut()[(i, h)] += 1.5;
            }
            touched += 1;
        }
    }
    let report = filter.score(&observed, None).expect("score");
    println!("\ndisturbed {touched} cells near (3, 3)");
    println!(
        "||w|| = {:.3e}, rejected cells at alpha = {}: {}",
        report.norm,
        report.config.alpha,
        report.scores.iter().filter(|s| s.reject).count()
    );

    // rejected tree cells localize around the disturbance
    for s in report.scores.iter().filter(|s| s.reject) {
        let node = filter.tree().levels()[s.level]
            .iter()
            .map(|&idx| filter.tree().node(idx))
            .find(|n| n.index == s.cell_index)
            .expect("node");
        let (mut bx, mut by) = (0.0, 0.0);
        for &id in &node.member_ids {
            bx += domain.cells()[id].barycenter[0];
            by += domain.cells()[id].barycenter[1];
        }
        let k = node.member_ids.len() as f64;
        println!(
            "  level {:>2} cell {:>3}: {:>3} cells centered ({:>4.1}, {:>4.1}), energy {:.2e}",
            s.level,
            s.cell_index,
            node.member_ids.len(),
            bx / k,
            by / k,
            s.energy
        );
    }
}
