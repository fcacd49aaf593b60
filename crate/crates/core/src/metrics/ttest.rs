//! Independent-samples t-test without the equal-variance assumption.

use serde::{Deserialize, Serialize};

use super::special::student_t_two_tailed;
use super::MetricsError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t_statistic: f64,
    /// Welch–Satterthwaite degrees of freedom.
    pub degrees_of_freedom: f64,
    pub p_two_tailed: f64,
    pub mean_w: f64,
    pub mean_e: f64,
    pub variance_w: f64,
    pub variance_e: f64,
    pub n_w: usize,
    pub n_e: usize,
    /// Both sample variances were zero; t and df are conventions, not estimates.
    #[serde(default)]
    pub degenerate: bool,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, ss / (n - 1.0))
}

/// Welch's t-test of `sample_w` against `sample_e`, unbiased sample variances.
///
/// With both variances zero: equal means give t = 0, p = 1; different means
/// give an infinite t and p = 0. Both set `degenerate` and fall back to
/// df = n_w + n_e − 2.
pub fn welch_t(sample_w: &[f64], sample_e: &[f64]) -> Result<TTestResult, MetricsError> {
    if sample_w.len() < 2 || sample_e.len() < 2 {
        return Err(MetricsError::TooFewSamples {
            n_w: sample_w.len(),
            n_e: sample_e.len(),
        });
    }
    if sample_w.iter().chain(sample_e).any(|x| !x.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let (mean_w, variance_w) = mean_var(sample_w);
    let (mean_e, variance_e) = mean_var(sample_e);
    let (n_w, n_e) = (sample_w.len(), sample_e.len());
    let sw = variance_w / n_w as f64;
    let se = variance_e / n_e as f64;
    let se2 = sw + se;
    let diff = mean_w - mean_e;

    if se2 == 0.0 {
        let (t, p) = if diff == 0.0 {
            (0.0, 1.0)
        } else {
            (diff.signum() * f64::INFINITY, 0.0)
        };
        return Ok(TTestResult {
            t_statistic: t,
            degrees_of_freedom: (n_w + n_e - 2) as f64,
            p_two_tailed: p,
            mean_w,
            mean_e,
            variance_w,
            variance_e,
            n_w,
            n_e,
            degenerate: true,
        });
    }

    let t = diff / se2.sqrt();
    let df = se2 * se2 / (sw * sw / (n_w as f64 - 1.0) + se * se / (n_e as f64 - 1.0));
    Ok(TTestResult {
        t_statistic: t,
        degrees_of_freedom: df,
        p_two_tailed: student_t_two_tailed(t, df),
        mean_w,
        mean_e,
        variance_w,
        variance_e,
        n_w,
        n_e,
        degenerate: false,
    })
}
