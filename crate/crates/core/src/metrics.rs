//! Deformation magnitudes, modeling errors and control summaries.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Task success threshold on the stacked target error (m).
pub const SUCCESS_THRESHOLD: f64 = 0.05;
/// How long the error must stay below the threshold to count as reached (s).
pub const SUCCESS_HOLD: f64 = 1.0;

fn check_pair(a: &[f64], b: &[f64]) -> Result<usize> {
    if a.len() != b.len() || a.len() % 3 != 0 || a.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(a.len() / 3)
}

fn centroid(x: &[f64]) -> [f64; 3] {
    let m = (x.len() / 3) as f64;
    let mut c = [0.0; 3];
    for p in x.chunks_exact(3) {
        for j in 0..3 {
            c[j] += p[j] / m;
        }
    }
    c
}

/// Distance between the feature centroids of two shapes.
pub fn translation(x1: &[f64], x2: &[f64]) -> Result<f64> {
    check_pair(x1, x2)?;
    let (a, b) = (centroid(x1), centroid(x2));
    Ok(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt())
}

/// Mean change of each feature's offset from the centroid.
pub fn relative_deformation(x1: &[f64], x2: &[f64]) -> Result<f64> {
    let m = check_pair(x1, x2)?;
    let (a, b) = (centroid(x1), centroid(x2));
    let total: f64 = x1
        .chunks_exact(3)
        .zip(x2.chunks_exact(3))
        .map(|(p, q)| (0..3).map(|j| ((p[j] - a[j]) - (q[j] - b[j])).powi(2)).sum::<f64>().sqrt())
        .sum();
    Ok(total / m as f64)
}

pub fn shape_prediction_error(x_pred: &[f64], x_true: &[f64]) -> Result<f64> {
    if x_pred.len() != x_true.len() {
        return Err(Error::DimensionMismatch {
            expected: x_true.len(),
            got: x_pred.len(),
        });
    }
    Ok(x_pred.iter().zip(x_true).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
}

/// `‖ẋ − Ĵν‖ / ‖ẋ‖` in percent; `None` when `ẋ = 0`.
pub fn velocity_relative_error(x_dot: &[f64], predicted: &[f64]) -> Result<Option<f64>> {
    if x_dot.len() != predicted.len() {
        return Err(Error::DimensionMismatch {
            expected: x_dot.len(),
            got: predicted.len(),
        });
    }
    let norm = x_dot.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(None);
    }
    let diff = x_dot.iter().zip(predicted).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    Ok(Some(100.0 * diff / norm))
}

/// Median of the finite values; `NaN` when there are none.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        f64::NAN
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// First time the error drops below the threshold and stays there for
/// `SUCCESS_HOLD` seconds (or until the end of the trace).
pub fn time_to_success(trace: &[(f64, f64)]) -> Option<f64> {
    let mut start: Option<f64> = None;
    for &(t, e) in trace {
        if e < SUCCESS_THRESHOLD {
            let s = *start.get_or_insert(t);
            if t - s >= SUCCESS_HOLD - 1e-9 {
                return Some(s);
            }
        } else {
            start = None;
        }
    }
    start
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub final_error: f64,
    pub success: bool,
    pub time_to_success: Option<f64>,
    /// `(t, ‖Δxᶜ‖)` per control step.
    pub trace: Vec<(f64, f64)>,
    pub translation: f64,
    pub relative_deformation: f64,
}

impl EpisodeResult {
    pub fn from_trace(trace: Vec<(f64, f64)>, translation: f64, relative_deformation: f64) -> Self {
        let final_error = trace.last().map_or(f64::NAN, |&(_, e)| e);
        Self {
            final_error,
            success: final_error < SUCCESS_THRESHOLD,
            time_to_success: time_to_success(&trace),
            trace,
            translation,
            relative_deformation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub episodes: usize,
    pub average_error: f64,
    pub success_rate: f64,
    pub successful_error: Option<f64>,
    pub successful_time: Option<f64>,
}

pub fn summarize(results: &[EpisodeResult]) -> Summary {
    let errors: Vec<f64> = results.iter().map(|r| r.final_error).collect();
    let ok: Vec<&EpisodeResult> = results.iter().filter(|r| r.success).collect();
    let times: Vec<f64> = ok.iter().filter_map(|r| r.time_to_success).collect();
    Summary {
        episodes: results.len(),
        average_error: mean(&errors),
        success_rate: if results.is_empty() {
            0.0
        } else {
            ok.len() as f64 / results.len() as f64
        },
        successful_error: (!ok.is_empty()).then(|| mean(&ok.iter().map(|r| r.final_error).collect::<Vec<_>>())),
        successful_time: (!times.is_empty()).then(|| mean(&times)),
    }
}

pub const SUMMARY_COLUMNS: &str = "method,episodes,average_error_m,success_rate,successful_error_m,successful_time_s";

/// One CSV row per labelled summary, with a header.
pub fn summary_csv(rows: &[(String, Summary)]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut out = String::from(SUMMARY_COLUMNS);
    out.push('\n');
    for (label, s) in rows {
        let _ = writeln!(
            out,
            "{label},{},{:.6},{:.4},{},{}",
            s.episodes,
            s.average_error,
            s.success_rate,
            opt(s.successful_error),
            opt(s.successful_time)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deformation_measures() {
        let x = [0.1, 0.2, 0.3, -0.4, 0.5, 0.0, 0.3, 0.3, 0.3];
        let shifted: Vec<f64> = x.iter().enumerate().map(|(i, v)| v + [0.3, -0.4, 0.0][i % 3]).collect();
        assert_eq!(translation(&x, &x).unwrap(), 0.0);
        assert!((translation(&x, &shifted).unwrap() - 0.5).abs() < 1e-12);
        assert!(relative_deformation(&x, &shifted).unwrap() < 1e-12);
        assert_eq!(relative_deformation(&x, &x).unwrap(), 0.0);

        // features at ±d, then ±2d
        let d = 0.1;
        let a = [-d, 0.0, 0.0, d, 0.0, 0.0];
        let b = [-2.0 * d, 0.0, 0.0, 2.0 * d, 0.0, 0.0];
        assert!((relative_deformation(&a, &b).unwrap() - d).abs() < 1e-15);
        assert!(translation(&a, &[0.0; 3]).is_err());
    }

    #[test]
    fn velocity_error_cases() {
        let v = [0.1, -0.2, 0.3];
        assert_eq!(velocity_relative_error(&v, &v).unwrap(), Some(0.0));
        assert_eq!(velocity_relative_error(&v, &[0.0; 3]).unwrap(), Some(100.0));
        let twice: Vec<f64> = v.iter().map(|x| 2.0 * x).collect();
        assert!((velocity_relative_error(&v, &twice).unwrap().unwrap() - 100.0).abs() < 1e-12);
        assert_eq!(velocity_relative_error(&[0.0; 3], &v).unwrap(), None);
        assert!((shape_prediction_error(&[3.0, 0.0], &[0.0, 4.0]).unwrap() - 5.0).abs() < 1e-15);
    }

    #[test]
    fn success_needs_a_held_crossing() {
        let trace: Vec<(f64, f64)> = (0..40)
            .map(|i| {
                let t = i as f64 * 0.1;
                // brief dip at 0.5 s, then settled below from 2.0 s
                let e = if i == 5 || i >= 20 { 0.01 } else { 0.2 };
                (t, e)
            })
            .collect();
        assert!((time_to_success(&trace).unwrap() - 2.0).abs() < 1e-12);
        let r = EpisodeResult::from_trace(trace, 0.0, 0.0);
        assert!(r.success);
        assert_eq!(time_to_success(&[(0.0, 0.2)]), None);
    }

    #[test]
    fn summary_cases() {
        let fail = EpisodeResult::from_trace(vec![(0.0, 0.3), (30.0, 0.2)], 0.0, 0.0);
        let s = summarize(&[fail.clone(), fail.clone()]);
        assert_eq!(s.success_rate, 0.0);
        assert!(s.successful_error.is_none() && s.successful_time.is_none());

        let edge = EpisodeResult::from_trace(vec![(0.0, 0.049)], 0.0, 0.0);
        assert!(edge.success);
        assert_eq!(edge.time_to_success, Some(0.0));

        let good = EpisodeResult::from_trace(vec![(0.0, 0.1), (1.0, 0.02), (2.0, 0.01)], 0.0, 0.0);
        let s = summarize(&[fail, edge, good]);
        assert!((s.success_rate - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.average_error - (0.2 + 0.049 + 0.01) / 3.0).abs() < 1e-12);
        assert!((s.successful_error.unwrap() - (0.049 + 0.01) / 2.0).abs() < 1e-12);
        assert!((s.successful_time.unwrap() - 0.5).abs() < 1e-12);

        let csv = summary_csv(&[("ours".into(), s)]);
        assert!(csv.starts_with(SUMMARY_COLUMNS));
        assert!(csv.lines().nth(1).unwrap().starts_with("ours,3,"));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
