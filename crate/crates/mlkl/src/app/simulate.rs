//! Seeded synthetic frame stacks with a prescribed KL structure.
//!
//! Snapshots are drawn as `mean + sum_k sqrt(lambda_k) Y_k phi_k` with
//! random orthonormal fields and i.i.d. unit-variance coefficients
//! (Gaussian or scaled Student-t(3)). A script can inject step, ramp and
//! spike anomalies on chosen frames and mark rectangles as missing data.
//! Everything is driven by one seed, so stacks are bitwise reproducible.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StudentT};
use serde::{Deserialize, Serialize};

use super::{AppError, Frame, FrameStack};
use crate::geometry::{build_grid_domain, PiecewiseField, SimplicialDomain};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SpectrumSpec {
    /// `lambda_k = scale * k^-exponent`, k = 1..count.
    Power {
        count: usize,
        scale: f64,
        exponent: f64,
    },
    /// `lambda_k = scale * ratio^(k-1)`, k = 1..count.
    Geometric {
        count: usize,
        scale: f64,
        ratio: f64,
    },
    Explicit {
        values: Vec<f64>,
    },
}

impl SpectrumSpec {
    pub fn values(&self) -> Result<Vec<f64>, AppError> {
        let vals = match self {
            SpectrumSpec::Power {
                count,
                scale,
                exponent,
            } => (1..=*count)
                .map(|k| scale * (k as f64).powf(-exponent))
                .collect(),
            SpectrumSpec::Geometric {
                count,
                scale,
                ratio,
            } => (1..=*count)
                .map(|k| scale * ratio.powi(k as i32 - 1))
                .collect(),
            SpectrumSpec::Explicit { values } => values.clone(),
        };
        if vals.is_empty() {
            return Err(AppError::InvalidArgument(
                "spectrum must have at least one mode".into(),
            ));
        }
        for pair in vals.windows(2) {
            if pair[1] > pair[0] {
                return Err(AppError::InvalidArgument(
                    "spectrum must be nonincreasing".into(),
                ));
            }
        }
        if vals.iter().any(|&l| l <= 0.0 || !l.is_finite()) {
            return Err(AppError::InvalidArgument(
                "spectrum values must be positive and finite".into(),
            ));
        }
        Ok(vals)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CoefficientDist {
    #[default]
    Gaussian,
    /// Student-t with 3 degrees of freedom, scaled to unit variance.
    StudentT3,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AnomalyProfile {
    Step { amplitude: f64 },
    Ramp { from: f64, to: f64 },
    Spike { amplitude: f64 },
}

/// One scripted anomaly: a temporal profile applied to a cell rectangle on
/// selected bands.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnomalySpec {
    pub profile: AnomalyProfile,
    /// First and last affected frame index, inclusive.
    pub frames: [usize; 2],
    /// `[row0, col0, row1, col1]`, inclusive.
    pub rect: [usize; 4],
    /// Affected bands; empty means all.
    #[serde(default)]
    pub bands: Vec<usize>,
}

impl AnomalySpec {
    fn amplitude_at(&self, frame: usize) -> Option<f64> {
        let [first, last] = self.frames;
        if frame < first || frame > last {
            return None;
        }
        Some(match self.profile {
            AnomalyProfile::Step { amplitude } | AnomalyProfile::Spike { amplitude } => amplitude,
            AnomalyProfile::Ramp { from, to } => {
                let span = (last - first).max(1) as f64;
                from + (to - from) * (frame - first) as f64 / span
            }
        })
    }
}

/// Mark a rectangle of cells invalid on one frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskSpec {
    pub frame: usize,
    /// `[row0, col0, row1, col1]`, inclusive.
    pub rect: [usize; 4],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimSpec {
    pub rows: usize,
    pub cols: usize,
    pub bands: usize,
    pub frames: usize,
    #[serde(default = "default_measure")]
    pub cell_measure: f64,
    pub spectrum: SpectrumSpec,
    #[serde(default)]
    pub coefficients: CoefficientDist,
    /// Constant training mean on every cell and band.
    #[serde(default)]
    pub mean_level: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_day_start")]
    pub day_start: i64,
    #[serde(default = "default_day_step")]
    pub day_step: i64,
    #[serde(default)]
    pub anomalies: Vec<AnomalySpec>,
    #[serde(default)]
    pub masked_frames: Vec<MaskSpec>,
}

fn default_measure() -> f64 {
    1.0
}

fn default_day_start() -> i64 {
    1
}

fn default_day_step() -> i64 {
    16
}

/// The generating structure behind a simulated stack, for oracle checks.
#[derive(Debug, Clone)]
pub struct SyntheticModel {
    pub domain: Arc<SimplicialDomain>,
    pub mean: PiecewiseField,
    pub lambdas: Vec<f64>,
    pub eigenfields: Vec<PiecewiseField>,
}

/// Random orthonormal fields: Gram-Schmidt on seeded Gaussian coordinate
/// vectors in the indicator basis.
pub fn random_orthonormal_fields(
    domain: &Arc<SimplicialDomain>,
    count: usize,
    rng: &mut impl Rng,
) -> Vec<PiecewiseField> {
    let nq = domain.function_count();
    assert!(
        count <= nq,
        "cannot build {count} orthonormal fields in dimension {nq}"
    );
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut cols: Vec<DVector<f64>> = Vec::with_capacity(count);
    while cols.len() < count {
        let mut v = DVector::from_fn(nq, |_, _| normal.sample(rng));
        for _ in 0..2 {
            for c in &cols {
                let d = c.dot(&v);
                v -= c * d;
            }
        }
        let n = v.norm();
        if n > 1e-8 {
            v /= n;
            cols.push(v);
        }
    }
    cols.into_iter()
        .map(|c| PiecewiseField::from_indicator_coords(domain.clone(), c.as_slice()).unwrap())
        .collect()
}

fn rect_cells(rect: [usize; 4], rows: usize, cols: usize) -> Result<Vec<usize>, AppError> {
    let [r0, c0, r1, c1] = rect;
    if r1 < r0 || c1 < c0 || r1 >= rows || c1 >= cols {
        return Err(AppError::InvalidArgument(format!(
            "rectangle {rect:?} does not fit a {rows}x{cols} grid"
        )));
    }
    let mut cells = Vec::new();
    for r in r0..=r1 {
        for c in c0..=c1 {
            cells.push(r * cols + c);
        }
    }
    Ok(cells)
}

/// Generate a stack (and its generating model) from a spec.
pub fn simulate(spec: &SimSpec) -> Result<(FrameStack, SyntheticModel), AppError> {
    if spec.frames == 0 {
        return Err(AppError::InvalidArgument("need at least one frame".into()));
    }
    if spec.day_step < 1 {
        return Err(AppError::InvalidArgument(format!(
            "day step must be >= 1 to keep labels increasing, got {}",
            spec.day_step
        )));
    }
    let lambdas = spec.spectrum.values()?;
    let domain = build_grid_domain(spec.rows, spec.cols, spec.cell_measure, spec.bands)
        .map_err(crate::detect::DetectError::Geometry)?;
    if lambdas.len() > domain.function_count() {
        return Err(AppError::InvalidArgument(format!(
            "{} modes exceed the field dimension {}",
            lambdas.len(),
            domain.function_count()
        )));
    }
    for a in &spec.anomalies {
        rect_cells(a.rect, spec.rows, spec.cols)?;
        if a.frames[1] < a.frames[0] || a.frames[1] >= spec.frames {
            return Err(AppError::InvalidArgument(format!(
                "anomaly frame range {:?} outside 0..{}",
                a.frames, spec.frames
            )));
        }
        if a.bands.iter().any(|&b| b >= spec.bands) {
            return Err(AppError::InvalidArgument(
                "anomaly band out of range".into(),
            ));
        }
    }
    for mspec in &spec.masked_frames {
        rect_cells(mspec.rect, spec.rows, spec.cols)?;
        if mspec.frame >= spec.frames {
            return Err(AppError::InvalidArgument(format!(
                "mask frame {} outside 0..{}",
                mspec.frame, spec.frames
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let eigenfields = random_orthonormal_fields(&domain, lambdas.len(), &mut rng);
    let mean = PiecewiseField::constant(domain.clone(), spec.mean_level);

    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let student = StudentT::new(3.0).expect("valid student-t");
    // Var(t_3) = 3, so scale to unit variance
    let t_scale = (1.0 / 3.0f64).sqrt();
    let n = spec.rows * spec.cols;

    let mut frames = Vec::with_capacity(spec.frames);
    for f in 0..spec.frames {
        let mut field = mean.clone();
        for (phi, &lambda) in eigenfields.iter().zip(&lambdas) {
            let y = match spec.coefficients {
                CoefficientDist::Gaussian => normal.sample(&mut rng),
                CoefficientDist::StudentT3 => student.sample(&mut rng) * t_scale,
            };
            field
                .add_scaled(phi, lambda.sqrt() * y)
                .map_err(crate::detect::DetectError::Geometry)?;
        }
        let mut values: DMatrix<f64> = field.values().clone();
        for a in &spec.anomalies {
            if let Some(amp) = a.amplitude_at(f) {
                let bands: Vec<usize> = if a.bands.is_empty() {
                    (0..spec.bands).collect()
                } else {
                    a.bands.clone()
                };
                for cell in rect_cells(a.rect, spec.rows, spec.cols)? {
                    for &h in &bands {
                        values[(cell, h)] += amp;
                    }
                }
            }
        }
        let mut mask: Option<Vec<bool>> = None;
        for mspec in spec.masked_frames.iter().filter(|ms| ms.frame == f) {
            let m = mask.get_or_insert_with(|| vec![true; n]);
            for cell in rect_cells(mspec.rect, spec.rows, spec.cols)? {
                m[cell] = false;
            }
        }
        frames.push(Frame {
            day: spec.day_start + spec.day_step * f as i64,
            values,
            mask,
        });
    }

    let stack = FrameStack::new(spec.rows, spec.cols, spec.bands, frames)?;
    Ok((
        stack,
        SyntheticModel {
            domain,
            mean,
            lambdas,
            eigenfields,
        },
    ))
}
