//! The four pipeline commands behind the CLI: fit, detect, sequence,
//! simulate. Each is a plain function over paths and options so the thin
//! binary, tests and examples share one code path.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use super::filter_io::{read_filter, write_filter, FilterHeader};
use super::format::{read_frame_stack, write_frame_stack};
use super::simulate::{simulate, SimSpec};
use super::{AppError, FrameStack};
use crate::config::{FilterConfig, ThresholdMode};
use crate::detect::{robust_smooth, AnomalyFilter, DetectionReport};
use crate::geometry::build_grid_domain;
use crate::spectral::SnapshotSet;

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub input: PathBuf,
    pub out: PathBuf,
    /// Half-open frame range used for training; `None` = all frames.
    pub train_range: Option<(usize, usize)>,
    pub config: FilterConfig,
    pub cell_measure: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub training_frames: usize,
    pub lambdas: Vec<f64>,
    pub tail_sum: f64,
    pub tail_root_sum: f64,
    pub basis_functions: usize,
}

/// Fit the filter on a training slice of a stack and serialize it.
pub fn cmd_fit(opts: &FitOptions) -> Result<FitReport, AppError> {
    opts.config.validate()?;
    let stack = read_frame_stack(&opts.input)?;
    let (start, end) = opts.train_range.unwrap_or((0, stack.frames().len()));
    if start >= end || end > stack.frames().len() {
        return Err(AppError::InvalidArgument(format!(
            "train range {start}..{end} invalid for {} frames",
            stack.frames().len()
        )));
    }
    let domain = build_grid_domain(
        stack.rows(),
        stack.cols(),
        opts.cell_measure,
        stack.band_count(),
    )
    .map_err(crate::detect::DetectError::Geometry)?;
    let mut fields = Vec::with_capacity(end - start);
    for idx in start..end {
        let frame = &stack.frames()[idx];
        if frame.mask.as_ref().is_some_and(|m| m.iter().any(|&v| !v)) {
            return Err(AppError::InvalidArgument(format!(
                "training frame {idx} (day {}) has missing cells; train on unmasked frames",
                frame.day
            )));
        }
        fields.push(stack.field(&domain, idx)?);
    }
    let snapshots = SnapshotSet::new(fields)?;
    let filter = AnomalyFilter::fit(&snapshots, opts.config.clone())?;
    let header = FilterHeader {
        config: opts.config.clone(),
        rows: stack.rows(),
        cols: stack.cols(),
        bands: stack.band_count(),
        cell_measure: opts.cell_measure,
        truncation: opts.config.truncation,
        training_frames: end - start,
    };
    write_filter(&filter, &header, &opts.out)?;
    Ok(FitReport {
        training_frames: end - start,
        lambdas: filter.kl().lambdas().to_vec(),
        tail_sum: filter.kl().tail_sum(),
        tail_root_sum: filter.kl().tail_root_sum(),
        basis_functions: filter.basis().total_function_count(),
    })
}

#[derive(Debug, Clone)]
pub struct DetectOptions {
    pub filter: PathBuf,
    pub input: PathBuf,
    pub outdir: PathBuf,
    pub alpha: Option<f64>,
    pub threshold_mode: Option<ThresholdMode>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FrameSummary {
    pub day: i64,
    pub norm: f64,
    pub lower: f64,
    pub upper: f64,
    pub cells_used: usize,
    pub coefficient_count: usize,
    pub rejected_cells: usize,
    pub config: FilterConfig,
}

fn check_dims(stack: &FrameStack, header: &FilterHeader) -> Result<(), AppError> {
    if stack.rows() != header.rows
        || stack.cols() != header.cols
        || stack.band_count() != header.bands
    {
        return Err(AppError::DimensionMismatch(format!(
            "stack is {}x{}x{} but the filter was fitted on {}x{}x{}",
            stack.rows(),
            stack.cols(),
            stack.band_count(),
            header.rows,
            header.cols,
            header.bands
        )));
    }
    Ok(())
}

fn write_report_files(
    report: &DetectionReport,
    day: i64,
    cols: usize,
    outdir: &Path,
) -> Result<FrameSummary, AppError> {
    let coeff_path = outdir.join(format!("day_{day}_coefficients.csv"));
    let mut w = BufWriter::new(File::create(coeff_path)?);
    writeln!(w, "level,k,p,d")?;
    for c in report.table.entries() {
        writeln!(
            w,
            "{},{},{},{:.16e}",
            c.level, c.cell_index, c.detail_index, c.value
        )?;
    }
    w.flush()?;

    let score_path = outdir.join(format!("day_{day}_scores.csv"));
    let mut w = BufWriter::new(File::create(score_path)?);
    writeln!(w, "level,k,energy,p_value,reject")?;
    for s in &report.scores {
        writeln!(
            w,
            "{},{},{:.16e},{:.16e},{}",
            s.level, s.cell_index, s.energy, s.p_value, s.reject
        )?;
    }
    w.flush()?;

    let map_path = outdir.join(format!("day_{day}_anomaly.csv"));
    let mut w = BufWriter::new(File::create(map_path)?);
    writeln!(w, "row,col,band,w")?;
    let q = report.anomaly.domain().band_count();
    for cell in 0..report.anomaly.domain().len() {
        let original = match &report.cell_map {
            Some(map) => map[cell],
            None => cell,
        };
        let (row, col) = (original / cols, original % cols);
        for h in 0..q {
            writeln!(w, "{row},{col},{h},{:.16e}", report.anomaly.value(cell, h))?;
        }
    }
    w.flush()?;

    let summary = FrameSummary {
        day,
        norm: report.norm,
        lower: report.lower,
        upper: report.upper,
        cells_used: report.cells_used,
        coefficient_count: report.table.len(),
        rejected_cells: report.scores.iter().filter(|s| s.reject).count(),
        config: report.config.clone(),
    };
    let summary_path = outdir.join(format!("day_{day}_summary.json"));
    let mut w = BufWriter::new(File::create(summary_path)?);
    serde_json::to_writer_pretty(&mut w, &summary)?;
    w.flush()?;
    Ok(summary)
}

/// Score every frame of a stack against a serialized filter, emitting one
/// coefficient CSV, score CSV, anomaly-map CSV and JSON summary per frame.
pub fn cmd_detect(opts: &DetectOptions) -> Result<Vec<FrameSummary>, AppError> {
    let (filter, header) = read_filter(&opts.filter)?;
    let stack = read_frame_stack(&opts.input)?;
    check_dims(&stack, &header)?;

    let mut config = filter.config().clone();
    if let Some(alpha) = opts.alpha {
        config.alpha = alpha;
    }
    if let Some(mode) = opts.threshold_mode {
        config.threshold_mode = mode;
    }
    config.validate()?;
    let filter = AnomalyFilter::from_kl(filter.kl().clone(), config)?;

    std::fs::create_dir_all(&opts.outdir)?;
    let domain = filter.domain().clone();
    let summaries: Vec<FrameSummary> = (0..stack.frames().len())
        .into_par_iter()
        .map(|idx| {
            let frame = &stack.frames()[idx];
            let field = stack.field(&domain, idx)?;
            let report = match &frame.mask {
                Some(mask) => filter.score_masked(&field, mask, Some(frame.day))?,
                None => filter.score(&field, Some(frame.day))?,
            };
            write_report_files(&report, frame.day, stack.cols(), &opts.outdir)
        })
        .collect::<Result<Vec<_>, AppError>>()?;
    Ok(summaries)
}

#[derive(Debug, Clone)]
pub struct SequenceOptions {
    pub filter: PathBuf,
    pub input: PathBuf,
    pub out: PathBuf,
    /// (row, col) of the tracked pixel.
    pub pixel: (usize, usize),
    pub span: Option<f64>,
}

/// Track one pixel's anomaly through the stack and smooth it robustly.
/// Emits rows `day,band,anomaly,smoothed` (band -1 carries the joint
/// magnitude across bands); frames where the pixel is masked out produce
/// `nan` gap rows.
pub fn cmd_sequence(opts: &SequenceOptions) -> Result<(), AppError> {
    let (filter, header) = read_filter(&opts.filter)?;
    let stack = read_frame_stack(&opts.input)?;
    check_dims(&stack, &header)?;
    let (row, col) = opts.pixel;
    if row >= stack.rows() || col >= stack.cols() {
        return Err(AppError::InvalidArgument(format!(
            "pixel ({row},{col}) outside a {}x{} grid",
            stack.rows(),
            stack.cols()
        )));
    }
    let pixel = row * stack.cols() + col;
    let span = opts.span.unwrap_or(filter.config().smoother_span);
    if !(span > 0.0 && span <= 1.0) {
        return Err(AppError::InvalidArgument(format!(
            "span must lie in (0, 1], got {span}"
        )));
    }

    let q = stack.band_count();
    let domain = filter.domain().clone();
    // per-frame per-band anomaly value at the pixel; None marks a gap
    let values: Vec<Option<Vec<f64>>> = (0..stack.frames().len())
        .into_par_iter()
        .map(|idx| {
            let frame = &stack.frames()[idx];
            let field = stack.field(&domain, idx)?;
            match &frame.mask {
                Some(mask) if !mask[pixel] => Ok(None),
                Some(mask) => {
                    let report = filter.score_masked(&field, mask, Some(frame.day))?;
                    // an all-true mask degrades to full-domain scoring
                    let sub = match report.cell_map.as_ref() {
                        Some(map) => map
                            .iter()
                            .position(|&old| old == pixel)
                            .expect("pixel is valid under this mask"),
                        None => pixel,
                    };
                    Ok(Some((0..q).map(|h| report.anomaly.value(sub, h)).collect()))
                }
                None => {
                    let report = filter.score(&field, Some(frame.day))?;
                    Ok(Some(
                        (0..q).map(|h| report.anomaly.value(pixel, h)).collect(),
                    ))
                }
            }
        })
        .collect::<Result<Vec<_>, AppError>>()?;

    let days: Vec<i64> = stack.frames().iter().map(|f| f.day).collect();
    // smooth each band (and the joint magnitude) over the non-gap frames
    let mut smoothed: Vec<Vec<Option<f64>>> = vec![vec![None; days.len()]; q + 1];
    for band in 0..=q {
        let series: Vec<(usize, (f64, f64))> = values
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                v.as_ref().map(|bands| {
                    let y = if band < q {
                        bands[band]
                    } else {
                        bands.iter().map(|x| x * x).sum::<f64>().sqrt()
                    };
                    (i, (days[i] as f64, y))
                })
            })
            .collect();
        if series.len() < 3 {
            return Err(AppError::InvalidArgument(format!(
                "only {} valid frames at pixel ({row},{col}); smoothing needs at least 3",
                series.len()
            )));
        }
        let pts: Vec<(f64, f64)> = series.iter().map(|(_, p)| *p).collect();
        let fit = robust_smooth(&pts, span)?;
        for ((i, _), (_, y)) in series.iter().zip(fit) {
            smoothed[band][*i] = Some(y);
        }
    }

    let mut w = BufWriter::new(File::create(&opts.out)?);
    writeln!(w, "day,band,anomaly,smoothed")?;
    let fmt = |v: Option<f64>| match v {
        Some(x) => format!("{x:.16e}"),
        None => "nan".to_string(),
    };
    for (i, &day) in days.iter().enumerate() {
        for band in 0..q {
            let raw = values[i].as_ref().map(|v| v[band]);
            writeln!(w, "{day},{band},{},{}", fmt(raw), fmt(smoothed[band][i]))?;
        }
        let joint = values[i]
            .as_ref()
            .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt());
        writeln!(w, "{day},-1,{},{}", fmt(joint), fmt(smoothed[q][i]))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SimulateOptions {
    pub spec: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
}

/// Generate a stack from a JSON spec file.
pub fn cmd_simulate(opts: &SimulateOptions) -> Result<usize, AppError> {
    let text = std::fs::read_to_string(&opts.spec)?;
    let mut spec: SimSpec = serde_json::from_str(&text)?;
    if let Some(seed) = opts.seed {
        spec.seed = seed;
    }
    let (stack, _) = simulate(&spec)?;
    write_frame_stack(&stack, &opts.out)?;
    Ok(stack.frames().len())
}
