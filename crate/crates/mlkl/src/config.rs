//! Filter configuration shared by the fitting and detection stages.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
#[error("invalid configuration: {0}")]
pub struct ConfigError(pub String);

/// How the spectral tail statistics `t_M`, `s_M` are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TailMode {
    /// Sum the empirical eigenvalues past the truncation; fall back to the
    /// last retained eigenvalue only when that sum is zero.
    #[default]
    DataDriven,
    /// Additionally floor the tail at the last retained eigenvalue,
    /// matching the assumption that it dominates the unobserved remainder.
    LambdaFloor,
}

/// Which rejection threshold the hypothesis test uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdMode {
    /// `|d| >= sqrt(t_M / alpha)`, the Chebyshev inversion of the
    /// coefficient variance bound `Var(d) <= t_M`.
    #[default]
    Chebyshev,
    /// `|d| >= t_M / sqrt(alpha)`, the threshold exactly as printed in the
    /// source hypothesis test. Provided for comparison; it only coincides
    /// with a Chebyshev guarantee when `t_M >= 1`.
    PaperLiteral,
}

/// All knobs of the multilevel filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    /// Truncation order of the KL expansion.
    pub truncation: usize,
    /// Significance level for the per-coefficient hypothesis tests.
    pub alpha: f64,
    /// kd-tree leaf capacity n0 (leaves hold at most n0 - 1 cells).
    pub leaf_capacity: usize,
    /// Relative singular-value cutoff for local numerical ranks.
    pub rank_tol: f64,
    pub tail_mode: TailMode,
    pub threshold_mode: ThresholdMode,
    /// Span fraction for the robust smoother over anomaly sequences.
    pub smoother_span: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            truncation: 1,
            alpha: 1e-2,
            leaf_capacity: 8,
            rank_tol: crate::multilevel::DEFAULT_RANK_TOL,
            tail_mode: TailMode::DataDriven,
            threshold_mode: ThresholdMode::Chebyshev,
            smoother_span: 0.25,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.truncation < 1 {
            return Err(ConfigError(format!(
                "truncation order must be >= 1, got {}",
                self.truncation
            )));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(ConfigError(format!(
                "alpha must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        if self.leaf_capacity < 2 {
            return Err(ConfigError(format!(
                "leaf capacity must be >= 2, got {}",
                self.leaf_capacity
            )));
        }
        if !(self.rank_tol > 0.0 && self.rank_tol <= 1e-4) {
            return Err(ConfigError(format!(
                "rank tolerance must lie in (0, 1e-4], got {}",
                self.rank_tol
            )));
        }
        if !(self.smoother_span > 0.0 && self.smoother_span <= 1.0) {
            return Err(ConfigError(format!(
                "smoother span must lie in (0, 1], got {}",
                self.smoother_span
            )));
        }
        Ok(())
    }
}
