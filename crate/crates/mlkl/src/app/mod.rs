//! Operational shell: frame stacks, on-disk formats, synthetic data and the
//! CLI commands.

pub mod commands;
pub mod filter_io;
pub mod format;
pub mod simulate;

pub use crate::config::{FilterConfig, TailMode, ThresholdMode};
pub use commands::{cmd_detect, cmd_fit, cmd_sequence, cmd_simulate};
pub use format::{
    read_frame_stack, read_frame_stack_csv, write_frame_stack, write_frame_stack_csv, FormatError,
};
pub use simulate::{simulate, SimSpec};

use std::sync::Arc;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::config::ConfigError;
use crate::detect::DetectError;
use crate::geometry::{GeometryError, PiecewiseField, SimplicialDomain};
use crate::spectral::SpectralError;

#[derive(Debug, Error)]
pub enum AppError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<GeometryError> for AppError {
    fn from(e: GeometryError) -> Self {
        AppError::Detect(DetectError::Geometry(e))
    }
}

impl From<SpectralError> for AppError {
    fn from(e: SpectralError) -> Self {
        AppError::Detect(DetectError::Spectral(e))
    }
}

impl AppError {
    /// Process exit code: 2 for format errors, 3 for dimension or rank
    /// errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Format(_) => 2,
            AppError::DimensionMismatch(_) => 3,
            AppError::Detect(DetectError::Spectral(SpectralError::RankDeficient { .. })) => 3,
            AppError::Detect(DetectError::Geometry(GeometryError::DomainMismatch)) => 3,
            _ => 1,
        }
    }
}

/// One observed frame: day label, `N x q` values, optional validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub day: i64,
    pub values: DMatrix<f64>,
    pub mask: Option<Vec<bool>>,
}

impl Frame {
    /// Valid-cell count (all cells when unmasked).
    pub fn valid_cells(&self) -> usize {
        match &self.mask {
            Some(m) => m.iter().filter(|&&b| b).count(),
            None => self.values.nrows(),
        }
    }
}

/// An ordered sequence of frames over one raster grid.
#[derive(Debug, Clone)]
pub struct FrameStack {
    rows: usize,
    cols: usize,
    band_count: usize,
    frames: Vec<Frame>,
}

impl FrameStack {
    pub fn new(
        rows: usize,
        cols: usize,
        band_count: usize,
        frames: Vec<Frame>,
    ) -> Result<Self, AppError> {
        if rows == 0 || cols == 0 || band_count == 0 {
            return Err(AppError::InvalidArgument(format!(
                "stack dimensions must be positive, got {rows}x{cols}x{band_count}"
            )));
        }
        let n = rows * cols;
        let mut last_day = None;
        for (i, f) in frames.iter().enumerate() {
            if f.values.nrows() != n || f.values.ncols() != band_count {
                return Err(AppError::DimensionMismatch(format!(
                    "frame {i}: values are {}x{}, expected {n}x{band_count}",
                    f.values.nrows(),
                    f.values.ncols()
                )));
            }
            if let Some(mask) = &f.mask {
                if mask.len() != n {
                    return Err(AppError::DimensionMismatch(format!(
                        "frame {i}: mask length {} != {n}",
                        mask.len()
                    )));
                }
            }
            if let Some(prev) = last_day {
                if f.day <= prev {
                    return Err(AppError::InvalidArgument(format!(
                        "frame {i}: day {} after {prev}; labels must strictly increase",
                        f.day
                    )));
                }
            }
            last_day = Some(f.day);
        }
        Ok(FrameStack {
            rows,
            cols,
            band_count,
            frames,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn band_count(&self) -> usize {
        self.band_count
    }

    pub fn cell_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    /// A frame's values as a field on `domain`; masked cells are zeroed so
    /// non-finite fill values never reach the numerics (they are excluded by
    /// domain restriction before any inner product).
    pub fn field(
        &self,
        domain: &Arc<SimplicialDomain>,
        index: usize,
    ) -> Result<PiecewiseField, AppError> {
        let frame = &self.frames[index];
        let mut values = frame.values.clone();
        if let Some(mask) = &frame.mask {
            for (cell, &valid) in mask.iter().enumerate() {
                if !valid {
                    for h in 0..self.band_count {
                        values[(cell, h)] = 0.0;
                    }
                }
            }
        }
        Ok(PiecewiseField::new(domain.clone(), values).map_err(DetectError::Geometry)?)
    }
}
