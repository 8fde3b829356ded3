//! Robust local regression for anomaly time series.
//!
//! Standard robust LOWESS recipe: local linear fits over the span-nearest
//! neighbors with tricube distance weights, followed by robustness
//! iterations that reweight points by the bisquare of their residuals on a
//! `6 * median|residual|` scale. Single-frame artifacts (cloud residue in
//! the anomaly sequence) end up with bisquare weight zero and stop
//! influencing the local fits.

use super::DetectError;

const ROBUSTNESS_ITERATIONS: usize = 4;

fn tricube(u: f64) -> f64 {
    let u = u.abs();
    if u >= 1.0 {
        0.0
    } else {
        let t = 1.0 - u * u * u;
        t * t * t
    }
}

fn bisquare(u: f64) -> f64 {
    let u = u.abs();
    if u >= 1.0 {
        0.0
    } else {
        let t = 1.0 - u * u;
        t * t
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite residuals"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Weighted linear fit evaluated at `t0`; falls back to the weighted mean
/// when the window has no spread.
fn local_fit(ts: &[f64], ys: &[f64], weights: &[f64], t0: f64) -> f64 {
    let sw: f64 = weights.iter().sum();
    if sw <= 0.0 {
        // no usable weight; the caller retries without robustness weights
        return f64::NAN;
    }
    let mut st = 0.0;
    let mut sy = 0.0;
    for i in 0..ts.len() {
        st += weights[i] * ts[i];
        sy += weights[i] * ys[i];
    }
    let tbar = st / sw;
    let ybar = sy / sw;
    let mut stt = 0.0;
    let mut sty = 0.0;
    for i in 0..ts.len() {
        let dt = ts[i] - tbar;
        stt += weights[i] * dt * dt;
        sty += weights[i] * dt * (ys[i] - ybar);
    }
    if stt <= f64::EPSILON * sw * (1.0 + tbar * tbar) {
        ybar
    } else {
        ybar + (sty / stt) * (t0 - tbar)
    }
}

/// Robust LOESS over a series of `(t, y)` points.
///
/// `span` is the fraction of points entering each local fit (at least 2).
/// Returns the smoothed value at every input point, in input order.
pub fn robust_smooth(series: &[(f64, f64)], span: f64) -> Result<Vec<(f64, f64)>, DetectError> {
    let n = series.len();
    if n < 3 {
        return Err(DetectError::InvalidArgument(format!(
            "robust smoothing needs at least 3 points, got {n}"
        )));
    }
    if !(span > 0.0 && span <= 1.0) {
        return Err(DetectError::InvalidArgument(format!(
            "span must lie in (0, 1], got {span}"
        )));
    }
    let k = ((span * n as f64).ceil() as usize).clamp(2, n);

    // span-nearest neighbors of every point, by |t_j - t_i| with index ties
    // broken low
    let windows: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| {
                let da = (series[a].0 - series[i].0).abs();
                let db = (series[b].0 - series[i].0).abs();
                da.partial_cmp(&db).expect("finite times").then(a.cmp(&b))
            });
            idx.truncate(k);
            idx
        })
        .collect();

    let base_weights: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let d_max = windows[i]
                .iter()
                .map(|&j| (series[j].0 - series[i].0).abs())
                .fold(0.0f64, f64::max);
            windows[i]
                .iter()
                .map(|&j| {
                    if d_max == 0.0 {
                        1.0
                    } else {
                        tricube((series[j].0 - series[i].0).abs() / d_max)
                    }
                })
                .collect()
        })
        .collect();

    let mut robustness = vec![1.0; n];
    let mut fitted = vec![0.0; n];
    for iteration in 0..=ROBUSTNESS_ITERATIONS {
        for i in 0..n {
            let ts: Vec<f64> = windows[i].iter().map(|&j| series[j].0).collect();
            let ys: Vec<f64> = windows[i].iter().map(|&j| series[j].1).collect();
            let ws: Vec<f64> = windows[i]
                .iter()
                .zip(&base_weights[i])
                .map(|(&j, &w)| w * robustness[j])
                .collect();
            let mut y = local_fit(&ts, &ys, &ws, series[i].0);
            if y.is_nan() {
                // every neighbor was flagged as an outlier; fit without
                // robustness weights rather than produce nothing
                y = local_fit(&ts, &ys, &base_weights[i], series[i].0);
            }
            fitted[i] = y;
        }
        if iteration == ROBUSTNESS_ITERATIONS {
            break;
        }
        let mut abs_res: Vec<f64> = (0..n).map(|i| (series[i].1 - fitted[i]).abs()).collect();
        let mut scale = 6.0 * median(&mut abs_res);
        if scale <= 0.0 {
            // exact fits dominate; keep only the exactly-fitted points
            let y_scale = series.iter().map(|(_, y)| y.abs()).fold(1.0f64, f64::max);
            scale = f64::EPSILON * y_scale;
        }
        for i in 0..n {
            robustness[i] = bisquare((series[i].1 - fitted[i]) / scale);
        }
    }

    Ok(series
        .iter()
        .zip(&fitted)
        .map(|(&(t, _), &y)| (t, y))
        .collect())
}
