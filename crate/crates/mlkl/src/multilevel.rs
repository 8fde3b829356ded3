//! Multilevel orthonormal basis adapted to the KL eigenfields.
//!
//! Per tree cell, the local functions (indicator functions at the leaves,
//! children's carried functions above) are split by an SVD of their moment
//! matrix against the KL eigenfields: the leading right-singular vectors
//! give carried functions whose span tracks the eigenfields locally, the
//! nullspace gives detail functions exactly orthogonal to every eigenfield.
//! Sweeping the tree bottom-up yields detail spaces W_l per level plus a
//! root carried set spanning the KL subspace; together they form an
//! orthonormal basis of the whole piecewise-constant field space.
//!
//! Functions are stored as coefficient vectors over the indicator basis.
//! The tree orders cells so every node's support is one contiguous
//! coordinate range, which keeps the per-cell splits dense and small while
//! the global basis stays sparse.

use std::ops::Range;
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{GeometryError, IndicatorBasis, PiecewiseField, SimplicialDomain};
use crate::partition::PartitionTree;
use crate::spectral::KLBasis;

/// Inputs to a split must be orthonormal to this tolerance.
const ORTHO_TOL: f64 = 1e-8;

/// Default relative singular-value cutoff for the numerical rank.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum MultilevelError {
    #[error("input functions are not orthonormal: max Gram deviation {deviation:.3e}")]
    NonOrthonormalInput { deviation: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Maps between cell ids and the tree's leaf-order positions, and between
/// (cell, band) pairs and flat coordinates in the indicator basis.
///
/// Coordinates run over cells in leaf order with bands innermost, so the
/// functions of a tree node occupy `members * q` consecutive coordinates.
#[derive(Debug, Clone)]
pub struct CellLayout {
    band_count: usize,
    position_to_cell: Vec<usize>,
    cell_to_position: Vec<usize>,
}

impl CellLayout {
    pub fn from_tree(tree: &PartitionTree) -> Self {
        let position_to_cell = tree.leaf_order().to_vec();
        let mut cell_to_position = vec![0; position_to_cell.len()];
        for (pos, &cell) in position_to_cell.iter().enumerate() {
            cell_to_position[cell] = pos;
        }
        CellLayout {
            band_count: tree.domain().band_count(),
            position_to_cell,
            cell_to_position,
        }
    }

    /// Trivial layout where position == cell id.
    pub fn identity(cell_count: usize, band_count: usize) -> Self {
        CellLayout {
            band_count,
            position_to_cell: (0..cell_count).collect(),
            cell_to_position: (0..cell_count).collect(),
        }
    }

    pub fn band_count(&self) -> usize {
        self.band_count
    }

    pub fn len(&self) -> usize {
        self.position_to_cell.len() * self.band_count
    }

    pub fn is_empty(&self) -> bool {
        self.position_to_cell.is_empty()
    }

    pub fn coord(&self, cell: usize, band: usize) -> usize {
        self.cell_to_position[cell] * self.band_count + band
    }

    pub fn cell_band(&self, coord: usize) -> (usize, usize) {
        (
            self.position_to_cell[coord / self.band_count],
            coord % self.band_count,
        )
    }

    /// A field's coordinates in the indicator basis, permuted to layout
    /// order: entry for (cell, band) is `sqrt(measure) * value`.
    pub fn field_coords(&self, field: &PiecewiseField) -> Vec<f64> {
        let domain = field.domain();
        let q = self.band_count;
        let mut coords = vec![0.0; self.len()];
        for (pos, &cell) in self.position_to_cell.iter().enumerate() {
            let w = domain.measure(cell).sqrt();
            for h in 0..q {
                coords[pos * q + h] = w * field.value(cell, h);
            }
        }
        coords
    }
}

/// A basis function expressed over the indicator functions: a unit-norm
/// coefficient vector supported on one contiguous coordinate range.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseFunction {
    first: usize,
    weights: Vec<f64>,
}

impl SparseFunction {
    pub fn new(first: usize, weights: Vec<f64>) -> Self {
        SparseFunction { first, weights }
    }

    /// The indicator function chi at a single coordinate.
    pub fn indicator(coord: usize) -> Self {
        SparseFunction {
            first: coord,
            weights: vec![1.0],
        }
    }

    /// A field reinterpreted as a (generally full-support) coefficient
    /// vector over the indicator basis.
    pub fn from_field(field: &PiecewiseField, layout: &CellLayout) -> Self {
        SparseFunction {
            first: 0,
            weights: layout.field_coords(field),
        }
    }

    pub fn support(&self) -> Range<usize> {
        self.first..self.first + self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight_at(&self, coord: usize) -> f64 {
        if self.support().contains(&coord) {
            self.weights[coord - self.first]
        } else {
            0.0
        }
    }

    /// Coefficients keyed by (cell, band), in coordinate order.
    pub fn entries<'a>(
        &'a self,
        layout: &'a CellLayout,
    ) -> impl Iterator<Item = ((usize, usize), f64)> + 'a {
        self.weights
            .iter()
            .enumerate()
            .map(move |(i, &w)| (layout.cell_band(self.first + i), w))
    }

    pub fn norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    /// Inner product with another function; indicator orthonormality makes
    /// this the dot product of the coefficient vectors.
    pub fn dot(&self, other: &SparseFunction) -> f64 {
        let lo = self.first.max(other.first);
        let hi = (self.first + self.weights.len()).min(other.first + other.weights.len());
        if lo >= hi {
            return 0.0;
        }
        let mut acc = 0.0;
        for c in lo..hi {
            acc += self.weights[c - self.first] * other.weights[c - other.first];
        }
        acc
    }

    /// Inner product against a field given in layout coordinates.
    pub fn dot_coords(&self, coords: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(&coords[self.first..self.first + self.weights.len()])
            .map(|(w, c)| w * c)
            .sum()
    }

    /// Materialize as a piecewise-constant field.
    pub fn to_field(&self, layout: &CellLayout, domain: &Arc<SimplicialDomain>) -> PiecewiseField {
        let mut f = PiecewiseField::zeros(domain.clone());
        for ((cell, band), w) in self.entries(layout) {
            f.values_mut()[(cell, band)] += w / domain.measure(cell).sqrt();
        }
        f
    }
}

/// Output of one local split: carried functions whose span follows the
/// eigenfields on this cell, and detail functions orthogonal to all of them.
#[derive(Debug, Clone)]
pub struct CellBasis {
    pub level: usize,
    pub cell_index: usize,
    pub carried: Vec<SparseFunction>,
    pub details: Vec<SparseFunction>,
    /// Moments (phi_i, carried_j), M x a; exact by the SVD algebra, reused
    /// by the parent so only leaves ever integrate against eigenfields.
    carried_moments: DMatrix<f64>,
}

impl CellBasis {
    pub fn rank(&self) -> usize {
        self.carried.len()
    }

    pub fn carried_moments(&self) -> &DMatrix<f64> {
        &self.carried_moments
    }
}

/// Moment matrix of a function list against the KL eigenfields:
/// entry (i, j) = (phi_i, f_j).
pub fn local_moment_matrix(
    funcs: &[SparseFunction],
    kl: &KLBasis,
    layout: &CellLayout,
) -> Result<DMatrix<f64>, MultilevelError> {
    if funcs.is_empty() {
        return Err(MultilevelError::InvalidArgument(
            "empty function list".into(),
        ));
    }
    let m = kl.truncation_order();
    let eigencoords: Vec<Vec<f64>> = kl
        .eigenfields()
        .iter()
        .map(|phi| layout.field_coords(phi))
        .collect();
    Ok(DMatrix::from_fn(m, funcs.len(), |i, j| {
        funcs[j].dot_coords(&eigencoords[i])
    }))
}

struct SplitOutput {
    rank: usize,
    /// s x s orthogonal mixing matrix, carried columns first.
    mixing: DMatrix<f64>,
    /// M x rank moments of the carried functions.
    carried_moments: DMatrix<f64>,
}

/// Split `s` orthonormal local functions given their M x s moment matrix.
/// Returns `None` when the rank is zero and inputs pass through as details.
fn split_moments(moments: &DMatrix<f64>, rank_tol: f64) -> Option<SplitOutput> {
    let (m, s) = moments.shape();
    if m == 0 || s == 0 {
        return None;
    }
    let svd = moments.clone().svd(false, true);
    let v_t = svd.v_t.expect("v requested");
    let min = svd.singular_values.len();
    let mut order: Vec<usize> = (0..min).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .expect("finite")
    });
    let top = svd.singular_values[order[0]];
    if top <= 0.0 {
        return None;
    }
    let rank = order
        .iter()
        .take_while(|&&j| svd.singular_values[j] > rank_tol * top)
        .count();
    if rank == 0 {
        return None;
    }

    // mixing = [carried | details]: right-singular vectors for the computed
    // part, then a pivoted Gram-Schmidt completion of the nullspace.
    let mut mixing = DMatrix::zeros(s, s);
    for (col, &j) in order.iter().enumerate() {
        mixing.set_column(col, &v_t.row(j).transpose());
    }
    if min < s {
        // residuals of the identity candidates against the computed columns
        let mut residual = DMatrix::identity(s, s);
        for col in 0..min {
            let b = mixing.column(col);
            let proj = b.transpose() * &residual;
            for c in 0..s {
                let p = proj[(0, c)];
                for r in 0..s {
                    residual[(r, c)] -= b[r] * p;
                }
            }
        }
        let mut used = vec![false; s];
        for col in min..s {
            let mut pick = usize::MAX;
            let mut best = -1.0;
            for c in 0..s {
                if !used[c] {
                    let n = residual.column(c).norm();
                    if n > best {
                        best = n;
                        pick = c;
                    }
                }
            }
            debug_assert!(best > 1e-12, "completion ran out of directions");
            used[pick] = true;
            let mut v = residual.column(pick).clone_owned();
            // one reorthogonalization pass against everything accepted so far
            for prev in 0..col {
                let b = mixing.column(prev);
                let d = b.dot(&v);
                v -= b * d;
            }
            v /= v.norm();
            mixing.set_column(col, &v);
            let proj = v.transpose() * &residual;
            for c in 0..s {
                let p = proj[(0, c)];
                for r in 0..s {
                    residual[(r, c)] -= v[r] * p;
                }
            }
        }
    }

    let carried_moments = moments * mixing.columns(0, rank);
    Some(SplitOutput {
        rank,
        mixing,
        carried_moments,
    })
}

/// Core split on a local dense coefficient matrix. `local` is range_len x s
/// (inputs as columns over the coordinate range starting at `first`); `None`
/// means the inputs are the indicator functions of the range itself.
fn split_local(
    first: usize,
    local: Option<&DMatrix<f64>>,
    inputs: &[SparseFunction],
    moments: &DMatrix<f64>,
    level: usize,
    cell_index: usize,
    rank_tol: f64,
) -> Result<CellBasis, MultilevelError> {
    let s = moments.ncols();
    if let Some(f) = local {
        let gram = f.tr_mul(f);
        let mut dev = 0.0f64;
        for i in 0..s {
            for j in 0..s {
                let want = if i == j { 1.0 } else { 0.0 };
                dev = dev.max((gram[(i, j)] - want).abs());
            }
        }
        if dev > ORTHO_TOL {
            return Err(MultilevelError::NonOrthonormalInput { deviation: dev });
        }
    }

    let m = moments.nrows();
    let Some(split) = split_moments(moments, rank_tol) else {
        // rank zero: every input passes through as a detail unchanged
        return Ok(CellBasis {
            level,
            cell_index,
            carried: Vec::new(),
            details: inputs.to_vec(),
            carried_moments: DMatrix::zeros(m, 0),
        });
    };

    let mixed = match local {
        Some(f) => f * &split.mixing,
        None => split.mixing.clone(),
    };
    let take = |col: usize| SparseFunction::new(first, mixed.column(col).iter().copied().collect());
    let carried = (0..split.rank).map(take).collect();
    let details = (split.rank..s).map(take).collect();
    Ok(CellBasis {
        level,
        cell_index,
        carried,
        details,
        carried_moments: split.carried_moments,
    })
}

/// Split a set of mutually orthonormal functions against the KL eigenfields:
/// SVD the moment matrix, carry the rank-revealing combinations, emit the
/// nullspace combinations as details.
pub fn svd_split(
    funcs: &[SparseFunction],
    kl: &KLBasis,
    layout: &CellLayout,
    rank_tol: f64,
) -> Result<CellBasis, MultilevelError> {
    if funcs.is_empty() {
        return Err(MultilevelError::InvalidArgument(
            "empty function list".into(),
        ));
    }
    let lo = funcs.iter().map(|f| f.support().start).min().unwrap();
    let hi = funcs.iter().map(|f| f.support().end).max().unwrap();
    let mut local = DMatrix::zeros(hi - lo, funcs.len());
    for (j, f) in funcs.iter().enumerate() {
        for (i, &w) in f.weights().iter().enumerate() {
            local[(f.support().start - lo + i, j)] = w;
        }
    }
    let moments = local_moment_matrix(funcs, kl, layout)?;
    split_local(lo, Some(&local), funcs, &moments, 0, 0, rank_tol)
}

/// One detail function with its (level, cell index, within-cell index) tag.
#[derive(Debug, Clone)]
pub struct TaggedDetail {
    pub level: usize,
    pub cell_index: usize,
    pub detail_index: usize,
    pub function: SparseFunction,
}

/// The assembled multilevel basis: detail sets per level plus the root
/// carried functions spanning the KL subspace.
#[derive(Debug, Clone)]
pub struct MultilevelBasis {
    domain: Arc<SimplicialDomain>,
    layout: CellLayout,
    /// Details grouped by level, each level ordered by (cell_index, index).
    levels: Vec<Vec<TaggedDetail>>,
    root_carried: Vec<SparseFunction>,
    split_calls: usize,
}

impl MultilevelBasis {
    pub fn domain(&self) -> &Arc<SimplicialDomain> {
        &self.domain
    }

    pub fn layout(&self) -> &CellLayout {
        &self.layout
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn level_details(&self, level: usize) -> &[TaggedDetail] {
        &self.levels[level]
    }

    /// All details in (level, cell, index) order.
    pub fn details(&self) -> impl Iterator<Item = &TaggedDetail> {
        self.levels.iter().flatten()
    }

    pub fn detail_count(&self) -> usize {
        self.levels.iter().map(|l| l.len()).sum()
    }

    pub fn root_carried(&self) -> &[SparseFunction] {
        &self.root_carried
    }

    /// Details plus root carried; equals `N * q` by construction.
    pub fn total_function_count(&self) -> usize {
        self.detail_count() + self.root_carried.len()
    }

    /// Number of local SVD splits performed during construction.
    pub fn split_call_count(&self) -> usize {
        self.split_calls
    }
}

/// Build the multilevel basis over a partition tree: seed every leaf with
/// its member indicator functions, split, and pass carried functions up
/// until the root is reached.
pub fn build_multilevel(
    tree: &PartitionTree,
    indicator: &IndicatorBasis,
    kl: &KLBasis,
    rank_tol: f64,
) -> Result<MultilevelBasis, MultilevelError> {
    let domain = tree.domain().clone();
    if !Arc::ptr_eq(indicator.domain(), &domain) && indicator.domain() != &domain {
        return Err(GeometryError::DomainMismatch.into());
    }
    if kl.domain() != &domain && kl.truncation_order() > 0 {
        // eigenfields must be representable on this domain
        if kl.domain().len() != domain.len() || kl.domain().band_count() != domain.band_count() {
            return Err(GeometryError::DomainMismatch.into());
        }
    }
    let q = domain.band_count();
    let nq = domain.function_count();
    let m = kl.truncation_order();
    if nq <= m {
        return Err(MultilevelError::InvalidArgument(format!(
            "need N*q > M, got N*q = {nq}, M = {m}"
        )));
    }

    let layout = CellLayout::from_tree(tree);
    // eigenfield coordinates in layout order, M x Nq row-major access
    let eigencoords: Vec<Vec<f64>> = kl
        .eigenfields()
        .iter()
        .map(|phi| layout.field_coords(phi))
        .collect();

    // per-node slot for (carried functions, their moments), filled child-first
    let mut carried_slots: Vec<Option<(Vec<SparseFunction>, DMatrix<f64>)>> =
        (0..tree.nodes().len()).map(|_| None).collect();
    let mut levels: Vec<Vec<TaggedDetail>> = vec![Vec::new(); tree.depth() + 1];
    let mut split_calls = 0usize;

    for level in (0..=tree.depth()).rev() {
        let results: Vec<(usize, CellBasis)> = tree.levels()[level]
            .par_iter()
            .map(|&idx| {
                let node = tree.node(idx);
                let first = node.pos_start * q;
                let basis = if node.is_leaf() {
                    let s = node.pos_len * q;
                    // moment entry (i, j) = (phi_i, chi at coord first+j)
                    let moments = DMatrix::from_fn(m, s, |i, j| eigencoords[i][first + j]);
                    let inputs: Vec<SparseFunction> = (0..s)
                        .map(|j| SparseFunction::indicator(first + j))
                        .collect();
                    split_local(first, None, &inputs, &moments, level, node.index, rank_tol)?
                } else {
                    let (l, r) = node.children.expect("interior node");
                    let (lf, lm) = carried_slots[l].as_ref().expect("child processed");
                    let (rf, rm) = carried_slots[r].as_ref().expect("child processed");
                    let s = lf.len() + rf.len();
                    let mut local = DMatrix::zeros(node.pos_len * q, s);
                    let mut moments = DMatrix::zeros(m, s);
                    for (j, f) in lf.iter().chain(rf.iter()).enumerate() {
                        for (i, &w) in f.weights().iter().enumerate() {
                            local[(f.support().start - first + i, j)] = w;
                        }
                        if j < lf.len() {
                            moments.set_column(j, &lm.column(j));
                        } else {
                            moments.set_column(j, &rm.column(j - lf.len()));
                        }
                    }
                    let inputs: Vec<SparseFunction> = lf.iter().chain(rf.iter()).cloned().collect();
                    split_local(
                        first,
                        Some(&local),
                        &inputs,
                        &moments,
                        level,
                        node.index,
                        rank_tol,
                    )?
                };
                Ok((idx, basis))
            })
            .collect::<Result<Vec<_>, MultilevelError>>()?;

        let mut ordered = results;
        ordered.sort_by_key(|(idx, _)| tree.node(*idx).index);
        for (idx, basis) in ordered {
            split_calls += 1;
            let node = tree.node(idx);
            for (p, f) in basis.details.into_iter().enumerate() {
                levels[level].push(TaggedDetail {
                    level,
                    cell_index: node.index,
                    detail_index: p,
                    function: f,
                });
            }
            carried_slots[idx] = Some((basis.carried, basis.carried_moments));
            // children's carried functions were consumed; free them
            if let Some((l, r)) = node.children {
                carried_slots[l] = None;
                carried_slots[r] = None;
            }
        }
    }

    let (root_carried, _) = carried_slots[0].take().expect("root processed");
    Ok(MultilevelBasis {
        domain,
        layout,
        levels,
        root_carried,
        split_calls,
    })
}
