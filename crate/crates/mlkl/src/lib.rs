//! Multilevel Karhunen-Loeve anomaly detection for vector fields.
//!
//! Given training snapshots of a random vector field over a measured cell
//! domain (raster pixels or simplices), this crate
//!
//! 1. estimates the truncated KL eigenstructure by the method of snapshots
//!    ([`spectral`]),
//! 2. partitions the domain with a kd-tree over cell barycenters
//!    ([`partition`]),
//! 3. builds a multilevel orthonormal basis whose detail functions are
//!    orthogonal to the KL subspace ([`multilevel`]), and
//! 4. scores new fields by their detail coefficients: per-cell anomaly
//!    energies, distribution-free Chebyshev tests, anomaly maps and norm
//!    bounds, and robustly smoothed pixel time series ([`detect`]).
//!
//! The [`app`] module adds the operational shell: frame-stack file formats,
//! filter serialization, synthetic data generation and the `mlkl` CLI.
//! Runnable walkthroughs for each capability live in `examples/`.

pub mod app;
pub mod config;
pub mod detect;
pub mod geometry;
pub mod multilevel;
pub mod partition;
pub mod spectral;

pub use config::{FilterConfig, TailMode, ThresholdMode};
pub use detect::{AnomalyFilter, DetectionReport};
pub use geometry::{build_grid_domain, inner_product, PiecewiseField, SimplicialDomain};
pub use multilevel::{build_multilevel, MultilevelBasis};
pub use partition::{make_tree, PartitionTree};
pub use spectral::{fit_snapshots, KLBasis, SnapshotSet};
