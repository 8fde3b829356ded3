//! Truncated vector Karhunen-Loeve eigenstructure estimated from snapshots.
//!
//! The fit goes through the S x S Gram matrix of centered snapshots instead
//! of the N*q x N*q covariance matrix: eigenvalues of the Gram (with the 1/S
//! population normalization) coincide with the covariance eigenvalues, and
//! eigenfields are the matching linear combinations of centered snapshots.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::geometry::{inner_product, GeometryError, PiecewiseField, SimplicialDomain};

/// Relative cutoff under which a Gram eigenvalue counts as numerically zero.
const GRAM_RANK_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("requested {requested} modes but the snapshot Gram matrix has rank {achievable}")]
    RankDeficient { requested: usize, achievable: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// A training ensemble: S realizations of the field on one domain, plus
/// their sample mean.
#[derive(Debug, Clone)]
pub struct SnapshotSet {
    domain: Arc<SimplicialDomain>,
    frames: Vec<PiecewiseField>,
    mean: PiecewiseField,
}

impl SnapshotSet {
    pub fn new(frames: Vec<PiecewiseField>) -> Result<Self, SpectralError> {
        if frames.len() < 2 {
            return Err(SpectralError::InvalidArgument(format!(
                "need at least 2 snapshots for covariance estimation, got {}",
                frames.len()
            )));
        }
        let domain = frames[0].domain().clone();
        for f in &frames[1..] {
            if !f.same_domain_as(&frames[0]) {
                return Err(GeometryError::DomainMismatch.into());
            }
        }
        let mut mean = PiecewiseField::zeros(domain.clone());
        let w = 1.0 / frames.len() as f64;
        for f in &frames {
            mean.add_scaled(f, w)?;
        }
        Ok(SnapshotSet {
            domain,
            frames,
            mean,
        })
    }

    pub fn domain(&self) -> &Arc<SimplicialDomain> {
        &self.domain
    }

    pub fn frames(&self) -> &[PiecewiseField] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn mean(&self) -> &PiecewiseField {
        &self.mean
    }
}

/// The fitted truncation: eigenvalues, orthonormal eigenfields, mean, and
/// the spectral tail statistics that drive every detection bound.
#[derive(Debug, Clone)]
pub struct KLBasis {
    domain: Arc<SimplicialDomain>,
    mean: PiecewiseField,
    lambdas: Vec<f64>,
    eigenfields: Vec<PiecewiseField>,
    /// Sum of eigenvalues past the truncation.
    tail_sum: f64,
    /// Sum of square roots of eigenvalues past the truncation.
    tail_root_sum: f64,
}

impl KLBasis {
    /// Assemble a basis from known parts. Intended for synthetic models with
    /// a prescribed spectrum; `fit_snapshots` is the estimation route.
    pub fn from_parts(
        mean: PiecewiseField,
        lambdas: Vec<f64>,
        eigenfields: Vec<PiecewiseField>,
        tail_sum: f64,
        tail_root_sum: f64,
    ) -> Result<Self, SpectralError> {
        if lambdas.len() != eigenfields.len() {
            return Err(SpectralError::InvalidArgument(format!(
                "{} eigenvalues but {} eigenfields",
                lambdas.len(),
                eigenfields.len()
            )));
        }
        for pair in lambdas.windows(2) {
            if pair[1] > pair[0] + 1e-12 {
                return Err(SpectralError::InvalidArgument(
                    "eigenvalues must be nonincreasing".into(),
                ));
            }
        }
        if lambdas.iter().any(|&l| l < 0.0) || tail_sum < 0.0 || tail_root_sum < 0.0 {
            return Err(SpectralError::InvalidArgument(
                "eigenvalues and tail statistics must be nonnegative".into(),
            ));
        }
        let domain = mean.domain().clone();
        for f in &eigenfields {
            if !f.same_domain_as(&mean) {
                return Err(GeometryError::DomainMismatch.into());
            }
        }
        Ok(KLBasis {
            domain,
            mean,
            lambdas,
            eigenfields,
            tail_sum,
            tail_root_sum,
        })
    }

    pub fn domain(&self) -> &Arc<SimplicialDomain> {
        &self.domain
    }

    pub fn truncation_order(&self) -> usize {
        self.lambdas.len()
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn eigenfields(&self) -> &[PiecewiseField] {
        &self.eigenfields
    }

    pub fn mean(&self) -> &PiecewiseField {
        &self.mean
    }

    pub fn tail_sum(&self) -> f64 {
        self.tail_sum
    }

    pub fn tail_root_sum(&self) -> f64 {
        self.tail_root_sum
    }

    /// Replace the tail statistics by their floor at the last retained
    /// eigenvalue. Matches the working assumption that the last retained
    /// mode dominates the unobserved remainder of the spectrum.
    pub fn with_lambda_floor_tail(mut self) -> Self {
        if let Some(&last) = self.lambdas.last() {
            self.tail_sum = self.tail_sum.max(last);
            self.tail_root_sum = self.tail_root_sum.max(last.sqrt());
        }
        self
    }

    /// Restrict mean and eigenfields to a sub-domain. The restricted fields
    /// are no longer orthonormal; they retain the property that matters for
    /// detection, namely that the multilevel construction can orthogonalize
    /// against them on the restricted domain while the coefficient variance
    /// bound `t_M` still applies.
    pub fn restrict(&self, map: &crate::geometry::RestrictMap) -> Result<Self, SpectralError> {
        let mean = self.mean.restrict(map)?;
        let eigenfields = self
            .eigenfields
            .iter()
            .map(|f| f.restrict(map))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(KLBasis {
            domain: map.restricted().clone(),
            mean,
            lambdas: self.lambdas.clone(),
            eigenfields,
            tail_sum: self.tail_sum,
            tail_root_sum: self.tail_root_sum,
        })
    }
}

/// Fit the leading `m` KL modes from a snapshot ensemble.
///
/// Centered snapshots form the Gram matrix `G_st = (1/S) (v_s, v_t)`; its
/// eigenvalues are the KL eigenvalues and its eigenvectors give the
/// eigenfields as combinations of the centered snapshots. Eigenfield signs
/// are fixed so the entry of largest magnitude is positive. The tail
/// statistics sum the remaining positive Gram eigenvalues, falling back to
/// the last retained eigenvalue when the fit exhausts the rank.
pub fn fit_snapshots(snapshots: &SnapshotSet, m: usize) -> Result<KLBasis, SpectralError> {
    if m == 0 {
        return Err(SpectralError::InvalidArgument(
            "truncation order must be >= 1".into(),
        ));
    }
    let s = snapshots.len();
    let domain = snapshots.domain().clone();
    let nq = domain.function_count();

    // centered snapshot coordinates in the indicator basis, one column each
    let mut centered = DMatrix::zeros(nq, s);
    for (j, frame) in snapshots.frames().iter().enumerate() {
        let diff = frame.sub(snapshots.mean())?;
        centered.set_column(j, &DVector::from_vec(diff.indicator_coords()));
    }

    let mut gram = centered.transpose() * &centered;
    gram /= s as f64;
    // symmetrize away accumulation asymmetry
    gram = (&gram + gram.transpose()) * 0.5;

    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite eigenvalues")
    });
    let sorted: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();

    let top = sorted.first().copied().unwrap_or(0.0).max(0.0);
    let rank = sorted
        .iter()
        .take_while(|&&l| l > top * GRAM_RANK_TOL && l > 0.0)
        .count();
    if m > rank {
        return Err(SpectralError::RankDeficient {
            requested: m,
            achievable: rank,
        });
    }

    let mut lambdas = Vec::with_capacity(m);
    let mut eigenfields = Vec::with_capacity(m);
    for k in 0..m {
        let lambda = sorted[k];
        let u = eig.eigenvectors.column(order[k]);
        let mut coords = &centered * u;
        coords /= (s as f64 * lambda).sqrt();
        // deterministic sign: largest-magnitude coordinate positive
        let mut lead = 0;
        for (i, c) in coords.iter().enumerate() {
            if c.abs() > coords[lead].abs() {
                lead = i;
            }
        }
        if coords[lead] < 0.0 {
            coords = -coords;
        }
        lambdas.push(lambda);
        eigenfields.push(PiecewiseField::from_indicator_coords(
            domain.clone(),
            coords.as_slice(),
        )?);
    }

    let mut tail_sum: f64 = sorted[m..rank].iter().sum();
    let mut tail_root_sum: f64 = sorted[m..rank].iter().map(|l| l.sqrt()).sum();
    if tail_sum == 0.0 {
        tail_sum = lambdas[m - 1];
        tail_root_sum = lambdas[m - 1].sqrt();
    }

    Ok(KLBasis {
        domain,
        mean: snapshots.mean().clone(),
        lambdas,
        eigenfields,
        tail_sum,
        tail_root_sum,
    })
}

/// Normalized projection coefficients `Y_k = lambda_k^{-1/2} (field - mean, phi_k)`.
///
/// Modes with a zero eigenvalue carry no normalizable coefficient and are
/// reported as `None`.
pub fn kl_coefficients(
    field: &PiecewiseField,
    basis: &KLBasis,
) -> Result<Vec<Option<f64>>, SpectralError> {
    let centered = field.sub(basis.mean())?;
    basis
        .lambdas
        .iter()
        .zip(&basis.eigenfields)
        .map(|(&lambda, phi)| {
            if lambda > 0.0 {
                Ok(Some(inner_product(&centered, phi)? / lambda.sqrt()))
            } else {
                Ok(None)
            }
        })
        .collect()
}

/// Project a field onto the truncated KL subspace:
/// `mean + sum_k (field - mean, phi_k) phi_k`.
pub fn truncate_reconstruct(
    field: &PiecewiseField,
    basis: &KLBasis,
) -> Result<PiecewiseField, SpectralError> {
    let centered = field.sub(basis.mean())?;
    let mut out = basis.mean().clone();
    for phi in &basis.eigenfields {
        let c = inner_product(&centered, phi)?;
        out.add_scaled(phi, c)?;
    }
    Ok(out)
}
