//! Domain geometry: measured cells, piecewise-constant vector fields and the
//! `L²(U; R^q)` inner product.
//!
//! A domain is a flat list of cells (grid pixels or user-supplied simplices),
//! each carrying a positive measure and a barycenter. Fields are piecewise
//! constant over the cells with one value per spectral band, so every inner
//! product reduces to a measure-weighted sum over cells and bands. The
//! per-cell, per-band normalized indicator functions form an orthonormal
//! basis of this field space; everything downstream is expressed in it.

use std::sync::Arc;

use nalgebra::DMatrix;
use thiserror::Error;

/// Errors from domain construction and field operations.
#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("fields live on different domains")]
    DomainMismatch,
    #[error("restriction mask selects no cells")]
    EmptyDomain,
}

/// A measured cell of the domain: a grid pixel or a k-simplex reduced to the
/// data the filter needs (id, measure, barycenter).
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub id: usize,
    pub measure: f64,
    pub barycenter: Vec<f64>,
}

impl Cell {
    pub fn new(id: usize, measure: f64, barycenter: Vec<f64>) -> Result<Self, GeometryError> {
        if measure <= 0.0 || !measure.is_finite() {
            return Err(GeometryError::InvalidArgument(format!(
                "cell {id}: measure must be positive and finite, got {measure}"
            )));
        }
        if barycenter.is_empty() || barycenter.iter().any(|x| !x.is_finite()) {
            return Err(GeometryError::InvalidArgument(format!(
                "cell {id}: barycenter must be nonempty and finite"
            )));
        }
        Ok(Cell {
            id,
            measure,
            barycenter,
        })
    }
}

/// The domain `U` as an ordered collection of measured cells, together with
/// the number of spectral bands `q` carried by fields on it.
///
/// Cell ids are always `0..N-1` in storage order. Mesh topology is not
/// represented: all downstream constructions consume only measures,
/// barycenters and inner products.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplicialDomain {
    cells: Vec<Cell>,
    spatial_dim: usize,
    band_count: usize,
}

impl SimplicialDomain {
    pub fn new(cells: Vec<Cell>, band_count: usize) -> Result<Arc<Self>, GeometryError> {
        if cells.is_empty() {
            return Err(GeometryError::InvalidArgument(
                "domain needs at least one cell".into(),
            ));
        }
        if band_count == 0 {
            return Err(GeometryError::InvalidArgument(
                "band count must be >= 1".into(),
            ));
        }
        let spatial_dim = cells[0].barycenter.len();
        for (i, c) in cells.iter().enumerate() {
            if c.id != i {
                return Err(GeometryError::InvalidArgument(format!(
                    "cell ids must be 0..N-1 in order; cell at position {i} has id {}",
                    c.id
                )));
            }
            if c.barycenter.len() != spatial_dim {
                return Err(GeometryError::InvalidArgument(format!(
                    "cell {i}: barycenter dimension {} differs from {spatial_dim}",
                    c.barycenter.len()
                )));
            }
        }
        Ok(Arc::new(SimplicialDomain {
            cells,
            spatial_dim,
            band_count,
        }))
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn spatial_dim(&self) -> usize {
        self.spatial_dim
    }

    pub fn band_count(&self) -> usize {
        self.band_count
    }

    pub fn measure(&self, cell: usize) -> f64 {
        self.cells[cell].measure
    }

    pub fn total_measure(&self) -> f64 {
        self.cells.iter().map(|c| c.measure).sum()
    }

    /// Number of indicator basis functions, `N * q`.
    pub fn function_count(&self) -> usize {
        self.cells.len() * self.band_count
    }
}

fn same_domain(a: &Arc<SimplicialDomain>, b: &Arc<SimplicialDomain>) -> bool {
    Arc::ptr_eq(a, b) || a == b
}

/// Build a regular `rows x cols` grid domain in row-major cell order.
///
/// Every cell gets `cell_measure`; barycenters sit at pixel centers with
/// spacing `sqrt(cell_measure)`, x along columns and y along rows.
pub fn build_grid_domain(
    rows: usize,
    cols: usize,
    cell_measure: f64,
    band_count: usize,
) -> Result<Arc<SimplicialDomain>, GeometryError> {
    if rows == 0 || cols == 0 {
        return Err(GeometryError::InvalidArgument(format!(
            "grid dimensions must be positive, got {rows}x{cols}"
        )));
    }
    if cell_measure <= 0.0 || !cell_measure.is_finite() {
        return Err(GeometryError::InvalidArgument(format!(
            "cell measure must be positive and finite, got {cell_measure}"
        )));
    }
    let spacing = cell_measure.sqrt();
    let mut cells = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let id = r * cols + c;
            let bary = vec![(c as f64 + 0.5) * spacing, (r as f64 + 0.5) * spacing];
            cells.push(Cell {
                id,
                measure: cell_measure,
                barycenter: bary,
            });
        }
    }
    SimplicialDomain::new(cells, band_count)
}

/// The orthonormal vector indicator basis over a domain: one function per
/// (cell, band) pair, normalized by `measure^{-1/2}` with positive sign.
#[derive(Debug, Clone)]
pub struct IndicatorBasis {
    domain: Arc<SimplicialDomain>,
}

impl IndicatorBasis {
    pub fn new(domain: Arc<SimplicialDomain>) -> Self {
        IndicatorBasis { domain }
    }

    pub fn domain(&self) -> &Arc<SimplicialDomain> {
        &self.domain
    }

    /// Normalization coefficient of the indicator on `cell` (any band).
    pub fn coefficient(&self, cell: usize) -> f64 {
        1.0 / self.domain.measure(cell).sqrt()
    }

    /// The indicator function for (cell, band) as a field.
    pub fn function(&self, cell: usize, band: usize) -> PiecewiseField {
        let mut f = PiecewiseField::zeros(self.domain.clone());
        f.values[(cell, band)] = self.coefficient(cell);
        f
    }
}

/// A piecewise-constant vector field: one `q`-vector per cell, stored as an
/// `N x q` matrix (row = cell, column = band).
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseField {
    domain: Arc<SimplicialDomain>,
    values: DMatrix<f64>,
}

impl PiecewiseField {
    pub fn new(domain: Arc<SimplicialDomain>, values: DMatrix<f64>) -> Result<Self, GeometryError> {
        if values.nrows() != domain.len() || values.ncols() != domain.band_count() {
            return Err(GeometryError::InvalidArgument(format!(
                "field shape {}x{} does not match domain {}x{}",
                values.nrows(),
                values.ncols(),
                domain.len(),
                domain.band_count()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidArgument(
                "field contains non-finite values".into(),
            ));
        }
        Ok(PiecewiseField { domain, values })
    }

    pub fn zeros(domain: Arc<SimplicialDomain>) -> Self {
        let values = DMatrix::zeros(domain.len(), domain.band_count());
        PiecewiseField { domain, values }
    }

    /// Constant field with the same value on every cell and band.
    pub fn constant(domain: Arc<SimplicialDomain>, value: f64) -> Self {
        let values = DMatrix::from_element(domain.len(), domain.band_count(), value);
        PiecewiseField { domain, values }
    }

    pub fn domain(&self) -> &Arc<SimplicialDomain> {
        &self.domain
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.values
    }

    pub fn value(&self, cell: usize, band: usize) -> f64 {
        self.values[(cell, band)]
    }

    pub fn same_domain_as(&self, other: &PiecewiseField) -> bool {
        same_domain(&self.domain, &other.domain)
    }

    /// Coordinates of the field in the indicator basis: entry for
    /// (cell, band) is `sqrt(measure) * value`, cells outer, bands inner.
    pub fn indicator_coords(&self) -> Vec<f64> {
        let q = self.domain.band_count();
        let mut coords = Vec::with_capacity(self.domain.function_count());
        for (i, cell) in self.domain.cells().iter().enumerate() {
            let w = cell.measure.sqrt();
            for h in 0..q {
                coords.push(w * self.values[(i, h)]);
            }
        }
        coords
    }

    /// Inverse of [`indicator_coords`](Self::indicator_coords).
    pub fn from_indicator_coords(
        domain: Arc<SimplicialDomain>,
        coords: &[f64],
    ) -> Result<Self, GeometryError> {
        if coords.len() != domain.function_count() {
            return Err(GeometryError::InvalidArgument(format!(
                "coordinate length {} does not match N*q = {}",
                coords.len(),
                domain.function_count()
            )));
        }
        let q = domain.band_count();
        let mut values = DMatrix::zeros(domain.len(), q);
        for (i, cell) in domain.cells().iter().enumerate() {
            let w = cell.measure.sqrt();
            for h in 0..q {
                values[(i, h)] = coords[i * q + h] / w;
            }
        }
        Ok(PiecewiseField { domain, values })
    }

    pub fn scaled(&self, factor: f64) -> PiecewiseField {
        PiecewiseField {
            domain: self.domain.clone(),
            values: &self.values * factor,
        }
    }

    pub fn add_scaled(&mut self, other: &PiecewiseField, factor: f64) -> Result<(), GeometryError> {
        if !self.same_domain_as(other) {
            return Err(GeometryError::DomainMismatch);
        }
        self.values += &other.values * factor;
        Ok(())
    }

    pub fn sub(&self, other: &PiecewiseField) -> Result<PiecewiseField, GeometryError> {
        if !self.same_domain_as(other) {
            return Err(GeometryError::DomainMismatch);
        }
        Ok(PiecewiseField {
            domain: self.domain.clone(),
            values: &self.values - &other.values,
        })
    }

    pub fn norm(&self) -> f64 {
        inner_product(self, self).expect("same domain").sqrt()
    }

    /// Restrict the field to a sub-domain produced by [`restrict`].
    pub fn restrict(&self, map: &RestrictMap) -> Result<PiecewiseField, GeometryError> {
        if !same_domain(&self.domain, &map.source) {
            return Err(GeometryError::DomainMismatch);
        }
        let q = self.domain.band_count();
        let mut values = DMatrix::zeros(map.restricted.len(), q);
        for (old, new) in map.forward.iter().enumerate() {
            if let Some(new) = new {
                for h in 0..q {
                    values[(*new, h)] = self.values[(old, h)];
                }
            }
        }
        Ok(PiecewiseField {
            domain: map.restricted.clone(),
            values,
        })
    }
}

/// The `L²(U; R^q)` inner product of two piecewise-constant fields:
/// `sum_i measure(cell_i) * row_i(u) . row_i(v)`.
pub fn inner_product(u: &PiecewiseField, v: &PiecewiseField) -> Result<f64, GeometryError> {
    if !u.same_domain_as(v) {
        return Err(GeometryError::DomainMismatch);
    }
    let q = u.domain.band_count();
    let mut acc = 0.0;
    for (i, cell) in u.domain.cells().iter().enumerate() {
        let mut dot = 0.0;
        for h in 0..q {
            dot += u.values[(i, h)] * v.values[(i, h)];
        }
        acc += cell.measure * dot;
    }
    Ok(acc)
}

/// Result of restricting a domain to a subset of valid cells: the sub-domain
/// plus the old-id -> new-id map.
#[derive(Debug, Clone)]
pub struct RestrictMap {
    source: Arc<SimplicialDomain>,
    restricted: Arc<SimplicialDomain>,
    forward: Vec<Option<usize>>,
    backward: Vec<usize>,
}

impl RestrictMap {
    pub fn source(&self) -> &Arc<SimplicialDomain> {
        &self.source
    }

    pub fn restricted(&self) -> &Arc<SimplicialDomain> {
        &self.restricted
    }

    /// New id of an old cell, or `None` if it was masked out.
    pub fn new_id(&self, old_id: usize) -> Option<usize> {
        self.forward.get(old_id).copied().flatten()
    }

    /// Old id of a cell in the restricted domain.
    pub fn old_id(&self, new_id: usize) -> usize {
        self.backward[new_id]
    }

    pub fn forward(&self) -> &[Option<usize>] {
        &self.forward
    }
}

/// Keep only the cells where `valid_mask` is true, renumbering ids `0..` in
/// the original order. Measures and barycenters are unchanged; field support
/// changes per frame when data goes missing.
pub fn restrict(
    domain: &Arc<SimplicialDomain>,
    valid_mask: &[bool],
) -> Result<RestrictMap, GeometryError> {
    if valid_mask.len() != domain.len() {
        return Err(GeometryError::InvalidArgument(format!(
            "mask length {} does not match cell count {}",
            valid_mask.len(),
            domain.len()
        )));
    }
    if !valid_mask.iter().any(|&m| m) {
        return Err(GeometryError::EmptyDomain);
    }
    let mut forward = vec![None; domain.len()];
    let mut backward = Vec::new();
    let mut cells = Vec::new();
    for (old, cell) in domain.cells().iter().enumerate() {
        if valid_mask[old] {
            let new = cells.len();
            forward[old] = Some(new);
            backward.push(old);
            cells.push(Cell {
                id: new,
                measure: cell.measure,
                barycenter: cell.barycenter.clone(),
            });
        }
    }
    let restricted = SimplicialDomain::new(cells, domain.band_count())?;
    Ok(RestrictMap {
        source: domain.clone(),
        restricted,
        forward,
        backward,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} != {b} (tol {tol})");
    }

    #[test]
    fn grid_2x2_barycenters() {
        let d = build_grid_domain(2, 2, 1.0, 1).unwrap();
        assert_eq!(d.len(), 4);
        let expect = [[0.5, 0.5], [1.5, 0.5], [0.5, 1.5], [1.5, 1.5]];
        for (cell, e) in d.cells().iter().zip(expect) {
            assert_eq!(cell.barycenter, e.to_vec());
            assert_eq!(cell.measure, 1.0);
        }
    }

    #[test]
    fn grid_landsat_slice() {
        let d = build_grid_domain(25, 18, 900.0, 1).unwrap();
        assert_eq!(d.len(), 450);
        assert_eq!(d.cells()[0].barycenter, vec![15.0, 15.0]);
        assert_eq!(d.total_measure(), 450.0 * 900.0);
    }

    #[test]
    fn grid_single_cell_indicator_coefficient() {
        let d = build_grid_domain(1, 1, 4.0, 3).unwrap();
        assert_eq!(d.len(), 1);
        let basis = IndicatorBasis::new(d.clone());
        for band in 0..3 {
            approx(basis.coefficient(0), 0.5, 0.0);
            let f = basis.function(0, band);
            approx(f.value(0, band), 0.5, 0.0);
        }
    }

    #[test]
    fn grid_rejects_bad_arguments() {
        assert!(build_grid_domain(0, 3, 1.0, 1).is_err());
        assert!(build_grid_domain(3, 0, 1.0, 1).is_err());
        assert!(build_grid_domain(2, 2, 0.0, 1).is_err());
        assert!(build_grid_domain(2, 2, -1.0, 1).is_err());
        assert!(build_grid_domain(2, 2, 1.0, 0).is_err());
    }

    #[test]
    fn inner_product_all_ones() {
        let d = build_grid_domain(2, 2, 1.0, 1).unwrap();
        let u = PiecewiseField::constant(d.clone(), 1.0);
        approx(inner_product(&u, &u).unwrap(), 4.0, 0.0);
    }

    #[test]
    fn indicators_different_bands_orthogonal() {
        let d = build_grid_domain(2, 2, 1.0, 2).unwrap();
        let basis = IndicatorBasis::new(d.clone());
        let a = basis.function(1, 0);
        let b = basis.function(1, 1);
        approx(inner_product(&a, &b).unwrap(), 0.0, 0.0);
    }

    #[test]
    fn inner_product_matches_brute_force() {
        // 3 cells with measures {1, 2, 0.5}, q = 2, fixed values.
        let cells = vec![
            Cell::new(0, 1.0, vec![0.0]).unwrap(),
            Cell::new(1, 2.0, vec![1.0]).unwrap(),
            Cell::new(2, 0.5, vec![2.0]).unwrap(),
        ];
        let d = SimplicialDomain::new(cells, 2).unwrap();
        let uv = DMatrix::from_row_slice(3, 2, &[0.3, -1.2, 2.0, 0.7, -0.4, 1.1]);
        let vv = DMatrix::from_row_slice(3, 2, &[1.5, 0.25, -0.6, 2.2, 0.9, -3.0]);
        let u = PiecewiseField::new(d.clone(), uv.clone()).unwrap();
        let v = PiecewiseField::new(d.clone(), vv.clone()).unwrap();

        // independent scalar triple loop
        let mut want = 0.0;
        for i in 0..3 {
            for h in 0..2 {
                want += d.measure(i) * uv[(i, h)] * vv[(i, h)];
            }
        }
        approx(inner_product(&u, &v).unwrap(), want, 1e-14);
    }

    #[test]
    fn inner_product_rejects_domain_mismatch() {
        let d1 = build_grid_domain(2, 2, 1.0, 1).unwrap();
        let d2 = build_grid_domain(2, 2, 2.0, 1).unwrap();
        let u = PiecewiseField::constant(d1, 1.0);
        let v = PiecewiseField::constant(d2, 1.0);
        assert!(matches!(
            inner_product(&u, &v),
            Err(GeometryError::DomainMismatch)
        ));
    }

    #[test]
    fn indicator_gram_is_identity() {
        let d = build_grid_domain(3, 4, 0.7, 2).unwrap();
        let basis = IndicatorBasis::new(d.clone());
        let n = d.len();
        let q = d.band_count();
        let mut funcs = Vec::new();
        for i in 0..n {
            for h in 0..q {
                funcs.push(basis.function(i, h));
            }
        }
        for (a, fa) in funcs.iter().enumerate() {
            for (b, fb) in funcs.iter().enumerate() {
                let want = if a == b { 1.0 } else { 0.0 };
                approx(inner_product(fa, fb).unwrap(), want, 1e-12);
            }
        }
    }

    #[test]
    fn restrict_identity_mask() {
        let d = build_grid_domain(2, 2, 1.0, 1).unwrap();
        let map = restrict(&d, &[true; 4]).unwrap();
        assert_eq!(map.restricted().len(), 4);
        for i in 0..4 {
            assert_eq!(map.new_id(i), Some(i));
        }
    }

    #[test]
    fn restrict_drops_masked_cells() {
        let d = build_grid_domain(2, 2, 1.0, 1).unwrap();
        let map = restrict(&d, &[true, false, true, true]).unwrap();
        assert_eq!(map.restricted().len(), 3);
        assert_eq!(map.new_id(0), Some(0));
        assert_eq!(map.new_id(1), None);
        assert_eq!(map.new_id(2), Some(1));
        assert_eq!(map.new_id(3), Some(2));
        assert_eq!(map.old_id(2), 3);
    }

    #[test]
    fn restrict_rejects_empty_mask() {
        let d = build_grid_domain(2, 2, 1.0, 1).unwrap();
        assert!(matches!(
            restrict(&d, &[false; 4]),
            Err(GeometryError::EmptyDomain)
        ));
    }

    #[test]
    fn restricted_inner_product_equals_masked_sum() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let d = build_grid_domain(75, 75, 1.0, 1).unwrap();
        let n = d.len();
        let mask: Vec<bool> = (0..n).map(|_| rng.random::<f64>() >= 0.10).collect();
        let uv = DMatrix::from_fn(n, 1, |_, _| rng.random::<f64>() - 0.5);
        let vv = DMatrix::from_fn(n, 1, |_, _| rng.random::<f64>() - 0.5);
        let u = PiecewiseField::new(d.clone(), uv.clone()).unwrap();
        let v = PiecewiseField::new(d.clone(), vv.clone()).unwrap();

        let map = restrict(&d, &mask).unwrap();
        let got = inner_product(&u.restrict(&map).unwrap(), &v.restrict(&map).unwrap()).unwrap();

        let want: f64 = (0..n)
            .filter(|&i| mask[i])
            .map(|i| d.measure(i) * uv[(i, 0)] * vv[(i, 0)])
            .sum();
        approx(got, want, 1e-12 * want.abs().max(1.0));
    }
}
