//! Resampled paired t-test over per-unit scores of two systems.

use std::collections::BTreeMap;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TTestConfig {
    pub n_subsets: usize,
    /// Units per subset; half the units (at least one) when absent.
    pub subset_size: Option<usize>,
    pub alpha: f64,
}

impl Default for TTestConfig {
    fn default() -> Self {
        TTestConfig {
            n_subsets: 10,
            subset_size: None,
            alpha: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub p_value: f64,
    pub significant: bool,
    /// Mean over subsets of `mean(A) - mean(B)`.
    pub mean_diff: f64,
    pub t: f64,
}

/// Aligns two keyed score tables; the key sets must be identical.
pub fn align_units(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
        return Err(Error::Data("paired test needs both systems scored on the same units".into()));
    }
    Ok((a.values().copied().collect(), b.values().copied().collect()))
}

/// Draws `n_subsets` seeded subsets of units without replacement, takes each
/// system's mean per subset and tests the paired subset differences.
///
/// Subsets overlap, so their spread understates the uncertainty of the overall
/// mean. The variance of the mean difference is inflated by `m / (N - m)` for
/// subsets of `m` out of `N` units, which keeps the test calibrated. When every
/// unit difference is the same constant the p-value is 1 for zero and 0 otherwise.
pub fn resampled_paired_ttest(a: &[f64], b: &[f64], config: &TTestConfig, seed: u64) -> Result<TTestResult> {
    if a.len() != b.len() {
        return Err(Error::Data(format!(
            "paired test needs equal unit counts, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n_units = a.len();
    if n_units == 0 {
        return Err(Error::Data("paired test needs at least one unit".into()));
    }
    if config.n_subsets < 2 {
        return Err(Error::Config("n_subsets must be at least 2".into()));
    }
    if !(config.alpha > 0.0 && config.alpha < 1.0) {
        return Err(Error::Config("alpha must be in (0, 1)".into()));
    }
    let m = config.subset_size.unwrap_or((n_units / 2).max(1));
    if m == 0 || m > n_units {
        return Err(Error::Config(format!("subset_size must be in 1..={n_units}, got {m}")));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("paired test scores".into()));
    }

    let unit_diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mut rng = rng_for(seed, "ttest");
    let diffs: Vec<f64> = (0..config.n_subsets)
        .map(|_| {
            let idx = index::sample(&mut rng, n_units, m);
            let mut sa = 0.0;
            let mut sb = 0.0;
            for i in idx.iter() {
                sa += a[i];
                sb += b[i];
            }
            (sa - sb) / m as f64
        })
        .collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let result = |p_value: f64, t: f64| TTestResult {
        p_value,
        significant: p_value < config.alpha,
        mean_diff: mean,
        t,
    };

    let first = unit_diffs[0];
    if unit_diffs.iter().all(|d| *d == first) {
        return Ok(if first == 0.0 {
            result(1.0, 0.0)
        } else {
            result(0.0, f64::INFINITY.copysign(first))
        });
    }
    if m == n_units {
        // every subset is the whole set; resampling carries no variance information
        return Ok(result(1.0, 0.0));
    }
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
    let scale = var * (1.0 / n + m as f64 / (n_units - m) as f64);
    if scale <= 0.0 {
        return Ok(if mean == 0.0 { result(1.0, 0.0) } else { result(0.0, f64::INFINITY.copysign(mean)) });
    }
    let t = mean / scale.sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok(result(p, t))
}
