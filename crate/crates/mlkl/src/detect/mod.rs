//! Scoring observed fields against a fitted multilevel filter.
//!
//! An observation is centered by the training mean and projected on the
//! detail functions; the coefficients feed per-cell anomaly energies,
//! distribution-free Chebyshev hypothesis tests, a reconstructed anomaly
//! map, and norm bounds from the spectral tail. Missing data is handled by
//! restricting the domain and rebuilding the filter on the valid cells,
//! cached per mask.

mod smooth;

pub use smooth::robust_smooth;

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::config::{ConfigError, FilterConfig, TailMode, ThresholdMode};
use crate::geometry::{
    restrict, GeometryError, IndicatorBasis, PiecewiseField, RestrictMap, SimplicialDomain,
};
use crate::multilevel::{build_multilevel, MultilevelBasis, MultilevelError};
use crate::partition::{make_tree, PartitionError, PartitionTree};
use crate::spectral::{fit_snapshots, KLBasis, SnapshotSet, SpectralError};

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("coefficient table does not match the basis: {0}")]
    TableMismatch(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Multilevel(#[from] MultilevelError),
}

/// One projection coefficient `d` tagged by its detail function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficient {
    pub level: usize,
    pub cell_index: usize,
    pub detail_index: usize,
    pub value: f64,
}

/// All projection coefficients of one observation, ordered by
/// (level, cell, index).
#[derive(Debug, Clone)]
pub struct CoefficientTable {
    label: Option<i64>,
    entries: Vec<Coefficient>,
}

impl CoefficientTable {
    pub fn label(&self) -> Option<i64> {
        self.label
    }

    pub fn with_label(mut self, label: i64) -> Self {
        self.label = Some(label);
        self
    }

    pub fn entries(&self) -> &[Coefficient] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sum of squared coefficients; by Parseval this is the squared norm of
    /// the anomaly component.
    pub fn sum_of_squares(&self) -> f64 {
        self.entries.iter().map(|c| c.value * c.value).sum()
    }
}

/// Project a centered observation on every detail function.
pub fn project(
    field: &PiecewiseField,
    basis: &MultilevelBasis,
    kl: &KLBasis,
) -> Result<CoefficientTable, DetectError> {
    if field.domain() != basis.domain() && !Arc::ptr_eq(field.domain(), basis.domain()) {
        return Err(GeometryError::DomainMismatch.into());
    }
    let mut coords = basis.layout().field_coords(field);
    let mean_coords = basis.layout().field_coords(kl.mean());
    for (c, m) in coords.iter_mut().zip(&mean_coords) {
        *c -= m;
    }
    let entries = basis
        .details()
        .map(|d| Coefficient {
            level: d.level,
            cell_index: d.cell_index,
            detail_index: d.detail_index,
            value: d.function.dot_coords(&coords),
        })
        .collect();
    Ok(CoefficientTable {
        label: None,
        entries,
    })
}

/// Per-cell anomaly score: energy and the minimum hypothesis-test p-value
/// over the cell's coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellScore {
    pub level: usize,
    pub cell_index: usize,
    /// sqrt of the summed squared coefficients in this cell.
    pub energy: f64,
    pub p_value: f64,
    pub reject: bool,
}

/// Distribution-free p-value for one coefficient under the variance bound
/// `Var(d) <= t_M`.
pub fn coefficient_p_value(value: f64, tail_sum: f64, mode: ThresholdMode) -> f64 {
    if value == 0.0 {
        return 1.0;
    }
    let p = match mode {
        ThresholdMode::Chebyshev => tail_sum / (value * value),
        ThresholdMode::PaperLiteral => (tail_sum / value.abs()).powi(2),
    };
    p.min(1.0)
}

/// Score every cell that carries coefficients: energy, minimum p-value, and
/// the rejection decision at level `alpha` (strict `p < alpha`).
pub fn cell_scores(
    table: &CoefficientTable,
    kl: &KLBasis,
    alpha: f64,
    mode: ThresholdMode,
) -> Result<Vec<CellScore>, DetectError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(DetectError::InvalidArgument(format!(
            "alpha must lie in (0, 1], got {alpha}"
        )));
    }
    let t = kl.tail_sum();
    let mut scores: Vec<CellScore> = Vec::new();
    for c in table.entries() {
        let p = coefficient_p_value(c.value, t, mode);
        match scores.last_mut() {
            Some(s) if s.level == c.level && s.cell_index == c.cell_index => {
                s.energy += c.value * c.value;
                s.p_value = s.p_value.min(p);
            }
            _ => scores.push(CellScore {
                level: c.level,
                cell_index: c.cell_index,
                energy: c.value * c.value,
                p_value: p,
                reject: false,
            }),
        }
    }
    for s in &mut scores {
        s.energy = s.energy.sqrt();
        s.reject = s.p_value < alpha;
    }
    Ok(scores)
}

/// Synthesize the anomaly field `w = sum d * psi` from a coefficient table.
pub fn anomaly_map(
    table: &CoefficientTable,
    basis: &MultilevelBasis,
) -> Result<PiecewiseField, DetectError> {
    if table.len() != basis.detail_count() {
        return Err(DetectError::TableMismatch(format!(
            "{} coefficients for {} details",
            table.len(),
            basis.detail_count()
        )));
    }
    let mut coords = vec![0.0; basis.layout().len()];
    for (c, d) in table.entries().iter().zip(basis.details()) {
        if c.level != d.level || c.cell_index != d.cell_index || c.detail_index != d.detail_index {
            return Err(DetectError::TableMismatch(format!(
                "entry ({}, {}, {}) does not match detail ({}, {}, {})",
                c.level, c.cell_index, c.detail_index, d.level, d.cell_index, d.detail_index
            )));
        }
        for (i, &w) in d.function.weights().iter().enumerate() {
            coords[d.function.support().start + i] += c.value * w;
        }
    }
    let domain = basis.domain();
    let mut field = PiecewiseField::zeros(domain.clone());
    for (coord, &v) in coords.iter().enumerate() {
        let (cell, band) = basis.layout().cell_band(coord);
        field.values_mut()[(cell, band)] = v / domain.measure(cell).sqrt();
    }
    Ok(field)
}

/// Anomaly norm together with the spectral-tail sandwich around the expected
/// coefficient energy: `norm^2 (1 -/+ 2 s_M) + t_M`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormBounds {
    pub norm: f64,
    pub lower: f64,
    pub upper: f64,
}

pub fn anomaly_norm_bounds(table: &CoefficientTable, kl: &KLBasis) -> NormBounds {
    let ss = table.sum_of_squares();
    let norm = ss.sqrt();
    let s_m = kl.tail_root_sum();
    let t_m = kl.tail_sum();
    NormBounds {
        norm,
        lower: ss * (1.0 - 2.0 * s_m) + t_m,
        upper: ss * (1.0 + 2.0 * s_m) + t_m,
    }
}

/// Chebyshev p-value for the integrated anomaly over a region of cells.
///
/// The variance of the region integral is bounded by
/// `t_M * sum of region measures`. The bound is conservative: the exact
/// expression would weight each tail mode by its energy over the region,
/// but those modes are not observable past the truncation, while this bound
/// needs only the tail sum and the region geometry.
pub fn region_p_value(
    w_field: &PiecewiseField,
    region: &[usize],
    kl: &KLBasis,
    alpha: f64,
) -> Result<f64, DetectError> {
    if region.is_empty() {
        return Err(DetectError::InvalidArgument("empty region".into()));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(DetectError::InvalidArgument(format!(
            "alpha must lie in (0, 1], got {alpha}"
        )));
    }
    let domain = w_field.domain();
    let q = domain.band_count() as f64;
    let mut integral = 0.0;
    let mut region_measure = 0.0;
    for &i in region {
        if i >= domain.len() {
            return Err(DetectError::InvalidArgument(format!(
                "cell {i} out of range"
            )));
        }
        let band_mean = (0..domain.band_count())
            .map(|h| w_field.value(i, h))
            .sum::<f64>()
            / q;
        integral += domain.measure(i) * band_mean;
        region_measure += domain.measure(i);
    }
    let s2 = integral * integral;
    let variance_bound = kl.tail_sum() * region_measure;
    Ok(if s2 == 0.0 {
        1.0
    } else {
        (variance_bound / s2).min(1.0)
    })
}

/// Anomaly values of one pixel across a frame sequence: per-band values plus
/// the joint magnitude, `None` for frames that could not be scored.
#[derive(Debug, Clone, PartialEq)]
pub struct SequencePoint {
    pub frame: usize,
    pub per_band: Option<Vec<f64>>,
    pub joint: Option<f64>,
}

/// Track a pixel's anomaly through a sequence of frames on the filter's
/// domain. Frames that fail to project (wrong domain) become gap markers.
pub fn anomaly_sequence(
    frames: &[PiecewiseField],
    basis: &MultilevelBasis,
    kl: &KLBasis,
    pixel: usize,
) -> Result<Vec<SequencePoint>, DetectError> {
    if pixel >= basis.domain().len() {
        return Err(DetectError::InvalidArgument(format!(
            "unknown pixel id {pixel}"
        )));
    }
    let q = basis.domain().band_count();
    Ok(frames
        .iter()
        .enumerate()
        .map(
            |(idx, f)| match project(f, basis, kl).and_then(|t| anomaly_map(&t, basis)) {
                Ok(w) => {
                    let per_band: Vec<f64> = (0..q).map(|h| w.value(pixel, h)).collect();
                    let joint = per_band.iter().map(|v| v * v).sum::<f64>().sqrt();
                    SequencePoint {
                        frame: idx,
                        per_band: Some(per_band),
                        joint: Some(joint),
                    }
                }
                Err(_) => SequencePoint {
                    frame: idx,
                    per_band: None,
                    joint: None,
                },
            },
        )
        .collect())
}

/// Full per-frame detection output.
#[derive(Debug, Clone)]
pub struct DetectionReport {
    pub label: Option<i64>,
    pub table: CoefficientTable,
    pub scores: Vec<CellScore>,
    /// Reconstructed anomaly field on the scoring domain.
    pub anomaly: PiecewiseField,
    pub norm: f64,
    pub lower: f64,
    pub upper: f64,
    pub config: FilterConfig,
    /// Cells that actually entered the projection (fewer than the full
    /// domain when the frame carried a mask).
    pub cells_used: usize,
    /// For masked frames: scoring-domain cell id -> original cell id.
    pub cell_map: Option<Vec<usize>>,
}

/// A fitted multilevel anomaly filter: domain, KL truncation, tree and
/// multilevel basis, plus a cache of mask-restricted rebuilds.
#[derive(Debug)]
pub struct AnomalyFilter {
    domain: Arc<SimplicialDomain>,
    kl: KLBasis,
    tree: PartitionTree,
    basis: MultilevelBasis,
    config: FilterConfig,
    restricted: Mutex<HashMap<Vec<u8>, Arc<RestrictedFilter>>>,
}

/// Filter rebuilt on the valid sub-domain of a masked frame. The restricted
/// eigenfields are no longer orthonormal, but details stay orthogonal to
/// them and the coefficient variance bound survives restriction, so the
/// hypothesis tests keep their guarantee.
#[derive(Debug)]
pub struct RestrictedFilter {
    pub map: RestrictMap,
    pub kl: KLBasis,
    pub basis: MultilevelBasis,
}

impl AnomalyFilter {
    /// Fit the filter from training snapshots.
    pub fn fit(snapshots: &SnapshotSet, config: FilterConfig) -> Result<Self, DetectError> {
        config.validate()?;
        let mut kl = fit_snapshots(snapshots, config.truncation)?;
        if config.tail_mode == TailMode::LambdaFloor {
            kl = kl.with_lambda_floor_tail();
        }
        Self::from_kl(kl, config)
    }

    /// Assemble the filter around an existing KL basis (deserialized or
    /// synthetic); tree and multilevel basis are rebuilt deterministically.
    pub fn from_kl(kl: KLBasis, config: FilterConfig) -> Result<Self, DetectError> {
        config.validate()?;
        let domain = kl.domain().clone();
        let tree = make_tree(&domain, config.leaf_capacity)?;
        let basis = build_multilevel(
            &tree,
            &IndicatorBasis::new(domain.clone()),
            &kl,
            config.rank_tol,
        )?;
        Ok(AnomalyFilter {
            domain,
            kl,
            tree,
            basis,
            config,
            restricted: Mutex::new(HashMap::new()),
        })
    }

    pub fn domain(&self) -> &Arc<SimplicialDomain> {
        &self.domain
    }

    pub fn kl(&self) -> &KLBasis {
        &self.kl
    }

    pub fn tree(&self) -> &PartitionTree {
        &self.tree
    }

    pub fn basis(&self) -> &MultilevelBasis {
        &self.basis
    }

    pub fn config(&self) -> &FilterConfig {
        &self.config
    }

    /// Score an unmasked frame.
    pub fn score(
        &self,
        field: &PiecewiseField,
        label: Option<i64>,
    ) -> Result<DetectionReport, DetectError> {
        let mut table = project(field, &self.basis, &self.kl)?;
        if let Some(l) = label {
            table = table.with_label(l);
        }
        let scores = cell_scores(
            &table,
            &self.kl,
            self.config.alpha,
            self.config.threshold_mode,
        )?;
        let anomaly = anomaly_map(&table, &self.basis)?;
        let nb = anomaly_norm_bounds(&table, &self.kl);
        Ok(DetectionReport {
            label,
            table,
            scores,
            anomaly,
            norm: nb.norm,
            lower: nb.lower,
            upper: nb.upper,
            config: self.config.clone(),
            cells_used: self.domain.len(),
            cell_map: None,
        })
    }

    /// Score a frame with a validity mask: zero-filling missing cells would
    /// manufacture anomalies, so the filter is rebuilt on the valid
    /// sub-domain instead (cached per mask).
    pub fn score_masked(
        &self,
        field: &PiecewiseField,
        mask: &[bool],
        label: Option<i64>,
    ) -> Result<DetectionReport, DetectError> {
        if mask.len() != self.domain.len() {
            return Err(DetectError::InvalidArgument(format!(
                "mask length {} does not match cell count {}",
                mask.len(),
                self.domain.len()
            )));
        }
        if mask.iter().all(|&m| m) {
            return self.score(field, label);
        }
        let restricted = self.restricted(mask)?;
        let sub_field = field.restrict(&restricted.map)?;
        let mut table = project(&sub_field, &restricted.basis, &restricted.kl)?;
        if let Some(l) = label {
            table = table.with_label(l);
        }
        let scores = cell_scores(
            &table,
            &restricted.kl,
            self.config.alpha,
            self.config.threshold_mode,
        )?;
        let anomaly = anomaly_map(&table, &restricted.basis)?;
        let nb = anomaly_norm_bounds(&table, &restricted.kl);
        let sub_len = restricted.map.restricted().len();
        let cell_map = (0..sub_len).map(|i| restricted.map.old_id(i)).collect();
        Ok(DetectionReport {
            label,
            table,
            scores,
            anomaly,
            norm: nb.norm,
            lower: nb.lower,
            upper: nb.upper,
            config: self.config.clone(),
            cells_used: sub_len,
            cell_map: Some(cell_map),
        })
    }

    /// The mask-restricted rebuild for a validity mask, built once per
    /// distinct mask and shared afterwards.
    pub fn restricted(&self, mask: &[bool]) -> Result<Arc<RestrictedFilter>, DetectError> {
        let key = pack_mask(mask);
        let mut cache = self.restricted.lock().expect("cache lock");
        if let Some(hit) = cache.get(&key) {
            return Ok(hit.clone());
        }
        let map = restrict(&self.domain, mask)?;
        let kl = self.kl.restrict(&map)?;
        let sub = map.restricted().clone();
        let tree = make_tree(&sub, self.config.leaf_capacity)?;
        let basis = build_multilevel(
            &tree,
            &IndicatorBasis::new(sub.clone()),
            &kl,
            self.config.rank_tol,
        )?;
        let built = Arc::new(RestrictedFilter { map, kl, basis });
        cache.insert(key, built.clone());
        Ok(built)
    }
}

fn pack_mask(mask: &[bool]) -> Vec<u8> {
    let mut bytes = vec![0u8; mask.len().div_ceil(8)];
    for (i, &m) in mask.iter().enumerate() {
        if m {
            bytes[i / 8] |= 1 << (i % 8);
        }
    }
    bytes
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_grid_domain;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} != {b} (tol {tol})");
    }

    fn random_field(domain: &Arc<SimplicialDomain>, rng: &mut impl Rng) -> PiecewiseField {
        let values = DMatrix::from_fn(domain.len(), domain.band_count(), |_, _| {
            rng.random::<f64>() - 0.5
        });
        PiecewiseField::new(domain.clone(), values).unwrap()
    }

    /// Small fitted filter over synthetic snapshots.
    fn small_filter(seed: u64) -> AnomalyFilter {
        let domain = build_grid_domain(6, 6, 1.0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames: Vec<PiecewiseField> =
            (0..24).map(|_| random_field(&domain, &mut rng)).collect();
        let set = SnapshotSet::new(frames).unwrap();
        let config = FilterConfig {
            truncation: 5,
            leaf_capacity: 3,
            ..FilterConfig::default()
        };
        AnomalyFilter::fit(&set, config).unwrap()
    }

    #[test]
    fn projecting_the_mean_gives_zero() {
        let filter = small_filter(1);
        let table = project(filter.kl().mean(), filter.basis(), filter.kl()).unwrap();
        for c in table.entries() {
            approx(c.value, 0.0, 1e-10);
        }
    }

    #[test]
    fn projecting_a_detail_gives_a_unit_coefficient() {
        let filter = small_filter(2);
        let detail = filter.basis().details().nth(3).unwrap().clone();
        let psi = detail
            .function
            .to_field(filter.basis().layout(), filter.domain());
        let mut field = filter.kl().mean().clone();
        field.add_scaled(&psi, 1.0).unwrap();
        let table = project(&field, filter.basis(), filter.kl()).unwrap();
        for c in table.entries() {
            let want = if c.level == detail.level
                && c.cell_index == detail.cell_index
                && c.detail_index == detail.detail_index
            {
                1.0
            } else {
                0.0
            };
            approx(c.value, want, 1e-10);
        }
    }

    #[test]
    fn projecting_kl_signal_stays_in_the_null_space() {
        let filter = small_filter(3);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        // v_M built from the fitted eigenfields
        let mut field = filter.kl().mean().clone();
        for (k, phi) in filter.kl().eigenfields().iter().enumerate() {
            let y: f64 = rng.random::<f64>() - 0.5;
            field
                .add_scaled(phi, filter.kl().lambdas()[k].sqrt() * y)
                .unwrap();
        }
        let table = project(&field, filter.basis(), filter.kl()).unwrap();
        for c in table.entries() {
            assert!(c.value.abs() <= 1e-8, "coefficient {} too large", c.value);
        }
    }

    #[test]
    fn projection_is_linear_after_centering() {
        let filter = small_filter(4);
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let u = random_field(filter.domain(), &mut rng);
        let v = random_field(filter.domain(), &mut rng);
        let (a, b) = (1.7, -0.6);

        let mut fu = filter.kl().mean().clone();
        fu.add_scaled(&u, 1.0).unwrap();
        let mut fv = filter.kl().mean().clone();
        fv.add_scaled(&v, 1.0).unwrap();
        let mut fab = filter.kl().mean().clone();
        fab.add_scaled(&u, a).unwrap();
        fab.add_scaled(&v, b).unwrap();

        let tu = project(&fu, filter.basis(), filter.kl()).unwrap();
        let tv = project(&fv, filter.basis(), filter.kl()).unwrap();
        let tab = project(&fab, filter.basis(), filter.kl()).unwrap();
        for ((cu, cv), cab) in tu.entries().iter().zip(tv.entries()).zip(tab.entries()) {
            approx(cab.value, a * cu.value + b * cv.value, 1e-9);
        }
    }

    #[test]
    fn parseval_on_detail_span_fields() {
        let filter = small_filter(5);
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let details: Vec<_> = filter.basis().details().collect();
        let mut w_coords = vec![0.0; filter.basis().layout().len()];
        let mut want_ss = 0.0;
        for d in details.iter().step_by(3) {
            let c: f64 = rng.random::<f64>() * 2.0 - 1.0;
            want_ss += c * c;
            for (i, &w) in d.function.weights().iter().enumerate() {
                w_coords[d.function.support().start + i] += c * w;
            }
        }
        // mean + w
        let w = field_from_layout_coords(filter.basis(), &w_coords);
        let mut field = filter.kl().mean().clone();
        field.add_scaled(&w, 1.0).unwrap();
        let table = project(&field, filter.basis(), filter.kl()).unwrap();
        approx(table.sum_of_squares(), want_ss, 1e-10 * want_ss.max(1.0));
    }

    fn field_from_layout_coords(basis: &MultilevelBasis, coords: &[f64]) -> PiecewiseField {
        let domain = basis.domain();
        let mut f = PiecewiseField::zeros(domain.clone());
        for (coord, &v) in coords.iter().enumerate() {
            let (cell, band) = basis.layout().cell_band(coord);
            f.values_mut()[(cell, band)] = v / domain.measure(cell).sqrt();
        }
        f
    }

    #[test]
    fn scores_of_zero_table_do_not_reject() {
        let filter = small_filter(6);
        let table = project(filter.kl().mean(), filter.basis(), filter.kl()).unwrap();
        let scores = cell_scores(&table, filter.kl(), 0.01, ThresholdMode::Chebyshev).unwrap();
        assert!(!scores.is_empty());
        for s in &scores {
            approx(s.energy, 0.0, 1e-9);
            approx(s.p_value, 1.0, 0.0);
            assert!(!s.reject);
        }
    }

    #[test]
    fn boundary_coefficient_is_not_rejected_under_strict_inequality() {
        // d^2 = 100 t_M at alpha = 0.01 gives p = alpha exactly
        let t: f64 = 0.37;
        let d = (100.0 * t).sqrt();
        let p = coefficient_p_value(d, t, ThresholdMode::Chebyshev);
        approx(p, 0.01, 1e-15);
        assert!(!(p < 0.01));
    }

    #[test]
    fn p_value_is_monotone_in_magnitude() {
        let t = 0.5;
        let mut last = 1.0;
        for k in 1..50 {
            let p = coefficient_p_value(0.1 * k as f64, t, ThresholdMode::Chebyshev);
            assert!(p <= last + 1e-15);
            last = p;
        }
    }

    #[test]
    fn paper_literal_threshold_matches_printed_form() {
        // rejection at |d| >= t_M / sqrt(alpha)
        let t = 2.0;
        let alpha: f64 = 0.04;
        let d_at = t / alpha.sqrt();
        let p = coefficient_p_value(d_at, t, ThresholdMode::PaperLiteral);
        approx(p, alpha, 1e-12);
        assert!(coefficient_p_value(d_at * 1.01, t, ThresholdMode::PaperLiteral) < alpha);
    }

    #[test]
    fn anomaly_map_round_trips_detail_fields() {
        let filter = small_filter(7);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        // random combination of 20 detail functions
        let details: Vec<_> = filter.basis().details().collect();
        let mut w_coords = vec![0.0; filter.basis().layout().len()];
        for d in details.iter().take(20) {
            let c: f64 = rng.random::<f64>() * 2.0 - 1.0;
            for (i, &w) in d.function.weights().iter().enumerate() {
                w_coords[d.function.support().start + i] += c * w;
            }
        }
        let w = field_from_layout_coords(filter.basis(), &w_coords);
        let mut field = filter.kl().mean().clone();
        field.add_scaled(&w, 1.0).unwrap();
        let table = project(&field, filter.basis(), filter.kl()).unwrap();
        let recon = anomaly_map(&table, filter.basis()).unwrap();
        let diff = recon.sub(&w).unwrap();
        assert!(diff.norm() <= 1e-9 * w.norm().max(1.0));
    }

    #[test]
    fn zero_table_maps_to_zero_field_and_tail_interval() {
        let filter = small_filter(8);
        let table = project(filter.kl().mean(), filter.basis(), filter.kl()).unwrap();
        let w = anomaly_map(&table, filter.basis()).unwrap();
        assert!(w.norm() <= 1e-10);
        let nb = anomaly_norm_bounds(&table, filter.kl());
        let t = filter.kl().tail_sum();
        approx(nb.norm, 0.0, 1e-10);
        approx(nb.lower, t, 1e-12 * t.max(1.0));
        approx(nb.upper, t, 1e-12 * t.max(1.0));
    }

    #[test]
    fn bounds_collapse_without_tail_roots() {
        let domain = build_grid_domain(2, 2, 1.0, 1).unwrap();
        let phi = PiecewiseField::constant(domain.clone(), 0.5);
        let kl = KLBasis::from_parts(
            PiecewiseField::zeros(domain.clone()),
            vec![1.0],
            vec![phi],
            0.3,
            0.0, // s_M = 0: exact finite field
        )
        .unwrap();
        let table = CoefficientTable {
            label: None,
            entries: vec![Coefficient {
                level: 0,
                cell_index: 0,
                detail_index: 0,
                value: 2.0,
            }],
        };
        let nb = anomaly_norm_bounds(&table, &kl);
        approx(nb.norm, 2.0, 0.0);
        approx(nb.lower, 4.0 + 0.3, 1e-12);
        approx(nb.upper, 4.0 + 0.3, 1e-12);
    }

    #[test]
    fn region_p_values() {
        let filter = small_filter(9);
        let zero = PiecewiseField::zeros(filter.domain().clone());
        approx(
            region_p_value(&zero, &[0, 1, 2], filter.kl(), 0.05).unwrap(),
            1.0,
            0.0,
        );
        assert!(region_p_value(&zero, &[], filter.kl(), 0.05).is_err());

        // single unit cell with s^2 = 100 * V_region
        let domain = build_grid_domain(2, 2, 1.0, 1).unwrap();
        let kl = KLBasis::from_parts(
            PiecewiseField::zeros(domain.clone()),
            vec![1.0],
            vec![PiecewiseField::constant(domain.clone(), 0.5)],
            0.04,
            0.2,
        )
        .unwrap();
        let v_region: f64 = 0.04; // t_M * measure
        let s = (100.0 * v_region).sqrt();
        let mut w = PiecewiseField::zeros(domain.clone());
        w.values_mut()[(2, 0)] = s; // measure 1, band mean = s
        approx(region_p_value(&w, &[2], &kl, 0.05).unwrap(), 0.01, 1e-12);
    }

    #[test]
    fn region_test_is_calibrated_under_h0() {
        // H0 anomaly maps (pure KL tail) on random single-pixel regions
        // reject at most alpha + binomial slack
        use rand_distr::{Distribution, Normal};
        let domain = build_grid_domain(8, 8, 1.0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(171);
        let k_total = 12;
        let mut fields =
            crate::app::simulate::random_orthonormal_fields(&domain, k_total, &mut rng);
        let lambdas: Vec<f64> = (1..=k_total).map(|k| (k as f64).powi(-2)).collect();
        let m = 6;
        let kl = KLBasis::from_parts(
            PiecewiseField::zeros(domain.clone()),
            lambdas[..m].to_vec(),
            fields.drain(..m).collect(),
            lambdas[m..].iter().sum(),
            lambdas[m..].iter().map(|l| l.sqrt()).sum(),
        )
        .unwrap();
        let filter = AnomalyFilter::from_kl(
            kl,
            FilterConfig { truncation: m, leaf_capacity: 4, ..FilterConfig::default() },
        )
        .unwrap();

        let normal = Normal::new(0.0, 1.0).unwrap();
        let alpha = 0.05;
        let trials = 2000;
        let mut rejections = 0usize;
        for _ in 0..trials {
            let mut v = PiecewiseField::zeros(domain.clone());
            for (j, phi) in filter.kl().eigenfields().iter().enumerate() {
                v.add_scaled(phi, lambdas[j].sqrt() * normal.sample(&mut rng)).unwrap();
            }
            // tail modes live past the truncation
            for (j, l) in lambdas.iter().enumerate().skip(m) {
                let phi = &fields[j - m];
                v.add_scaled(phi, l.sqrt() * normal.sample(&mut rng)).unwrap();
            }
            let report = filter.score(&v, None).unwrap();
            let pixel = rng.random_range(0..domain.len());
            let p = region_p_value(&report.anomaly, &[pixel], filter.kl(), alpha).unwrap();
            if p < alpha {
                rejections += 1;
            }
        }
        let rate = rejections as f64 / trials as f64;
        let slack = 3.0 * (alpha * (1.0 - alpha) / trials as f64).sqrt();
        assert!(rate <= alpha + slack, "region rejection rate {rate}");
    }

    #[test]
    fn sequence_tracks_injected_spike() {
        let filter = small_filter(10);
        let pixel = 14;
        // find a detail supported on the pixel so the spike lands there
        let layout = filter.basis().layout();
        let coord = layout.coord(pixel, 0);
        let detail = filter
            .basis()
            .details()
            .find(|d| {
                d.function.support().contains(&coord) && d.function.weight_at(coord).abs() > 0.2
            })
            .expect("detail covering pixel")
            .clone();
        let psi = detail.function.to_field(layout, filter.domain());

        let c = 3.0;
        let mut frames = vec![filter.kl().mean().clone(); 5];
        frames[2].add_scaled(&psi, c).unwrap();
        let seq = anomaly_sequence(&frames, filter.basis(), filter.kl(), pixel).unwrap();
        for (i, pt) in seq.iter().enumerate() {
            let want = if i == 2 { c * psi.value(pixel, 0) } else { 0.0 };
            approx(pt.per_band.as_ref().unwrap()[0], want, 1e-9);
        }
    }

    #[test]
    fn sequence_rejects_unknown_pixel() {
        let filter = small_filter(11);
        let frames = vec![filter.kl().mean().clone()];
        assert!(anomaly_sequence(&frames, filter.basis(), filter.kl(), 9999).is_err());
    }

    #[test]
    fn sequence_marks_bad_frames_as_gaps() {
        let filter = small_filter(12);
        let other = build_grid_domain(3, 3, 1.0, 1).unwrap();
        let frames = vec![filter.kl().mean().clone(), PiecewiseField::zeros(other)];
        let seq = anomaly_sequence(&frames, filter.basis(), filter.kl(), 0).unwrap();
        assert!(seq[0].per_band.is_some());
        assert!(seq[1].per_band.is_none());
    }

    #[test]
    fn masked_scoring_restricts_the_domain() {
        let filter = small_filter(13);
        let mut rng = ChaCha8Rng::seed_from_u64(131);
        let field = random_field(filter.domain(), &mut rng);
        let mut mask = vec![true; filter.domain().len()];
        mask[0] = false;
        mask[17] = false;
        let report = filter.score_masked(&field, &mask, Some(5)).unwrap();
        assert_eq!(report.cells_used, filter.domain().len() - 2);
        let map = report.cell_map.as_ref().unwrap();
        assert_eq!(map.len(), report.cells_used);
        assert!(!map.contains(&0));
        assert!(!map.contains(&17));

        // details of the restricted basis stay orthogonal to the restricted
        // eigenfields, so a restricted KL signal projects to zero
        let restricted = filter.restricted(&mask).unwrap();
        let mut v = restricted.kl.mean().clone();
        for (k, phi) in restricted.kl.eigenfields().iter().enumerate() {
            v.add_scaled(phi, restricted.kl.lambdas()[k].sqrt() * 0.3)
                .unwrap();
        }
        let table = project(&v, &restricted.basis, &restricted.kl).unwrap();
        for c in table.entries() {
            assert!(c.value.abs() <= 1e-8);
        }

        // cache: same mask returns the same rebuild
        let again = filter.restricted(&mask).unwrap();
        assert!(Arc::ptr_eq(&restricted, &again));
    }

    #[test]
    fn null_distribution_respects_chebyshev_under_heavy_tails() {
        // p-value validity sanity check at module scale: scaled Student-t(3)
        // coefficients with variance below t_M reject at most alpha + slack.
        use rand_distr::{Distribution, StudentT};
        let filter = small_filter(14);
        let kl = filter.kl();
        let t_m = kl.tail_sum();
        let mut rng = ChaCha8Rng::seed_from_u64(141);
        let student = StudentT::new(3.0).unwrap();
        let alpha = 0.05;
        let trials = 4000;
        let mut rejections = 0usize;
        let scale = (t_m / 3.0).sqrt(); // Var(t_3) = 3
        for _ in 0..trials {
            let d: f64 = student.sample(&mut rng) * scale;
            if coefficient_p_value(d, t_m, ThresholdMode::Chebyshev) < alpha {
                rejections += 1;
            }
        }
        let rate = rejections as f64 / trials as f64;
        let slack = 3.0 * (alpha * (1.0 - alpha) / trials as f64).sqrt();
        assert!(
            rate <= alpha + slack,
            "rate {rate} exceeds {alpha} + {slack}"
        );
    }

    #[test]
    fn alpha_out_of_range_is_rejected() {
        let filter = small_filter(15);
        let table = project(filter.kl().mean(), filter.basis(), filter.kl()).unwrap();
        assert!(cell_scores(&table, filter.kl(), 0.0, ThresholdMode::Chebyshev).is_err());
        assert!(cell_scores(&table, filter.kl(), 1.1, ThresholdMode::Chebyshev).is_err());
    }

    #[test]
    fn energies_square_sum_to_the_norm() {
        let filter = small_filter(16);
        let mut rng = ChaCha8Rng::seed_from_u64(161);
        let field = random_field(filter.domain(), &mut rng);
        let report = filter.score(&field, None).unwrap();
        let energy_ss: f64 = report.scores.iter().map(|s| s.energy * s.energy).sum();
        approx(
            energy_ss,
            report.norm * report.norm,
            1e-10 * energy_ss.max(1.0),
        );
    }
}
