//! Pooling conditional estimates across designs.
//!
//! `mean = (1/K)ΣΔ_k`, `within = (1/K)Σσ²_k`, `between = (1/(K−1))Σ(Δ_k − mean)²`,
//! `total = within + (1 + 1/K)·between`. The design-uncertainty share
//! `prop_du = between / (between + within)` carries no `(1 + 1/K)` factor.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::analysis::ConditionalEstimate;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CombinedInference {
    pub mean: f64,
    pub between_var: f64,
    pub within_var: f64,
    pub total_var: f64,
    pub prop_du: f64,
    pub interval: (f64, f64),
    pub level: f64,
    pub k_effective: usize,
}

impl CombinedInference {
    pub fn covers(&self, value: f64) -> bool {
        self.interval.0 <= value && value <= self.interval.1
    }
}

/// Two-sided standard normal quantile for coverage `level`.
pub fn z_quantile(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidConfig(format!("interval level must be in (0, 1), got {level}")));
    }
    Ok(Normal::new(0.0, 1.0).unwrap().inverse_cdf(0.5 + level / 2.0))
}

/// Normal interval `point ± z·√var`.
pub fn normal_interval(point: f64, var: f64, level: f64) -> Result<(f64, f64)> {
    let h = z_quantile(level)? * var.sqrt();
    Ok((point - h, point + h))
}

/// Combines `(Δ_k, σ²_k)` pairs.
pub fn combine_pairs(pairs: &[(f64, f64)], level: f64) -> Result<CombinedInference> {
    let k = pairs.len();
    if k < 2 {
        return Err(Error::Combine(format!("need at least 2 estimates, got {k}")));
    }
    if let Some((i, &(_, v))) = pairs.iter().enumerate().find(|(_, p)| !(p.1 >= 0.0) || !p.1.is_finite()) {
        return Err(Error::Combine(format!("estimate {i} has invalid variance {v}")));
    }
    if let Some((i, &(d, _))) = pairs.iter().enumerate().find(|(_, p)| !p.0.is_finite()) {
        return Err(Error::Combine(format!("estimate {i} has non-finite point {d}")));
    }
    let kf = k as f64;
    // shifted by the first point so identical points give exactly zero spread
    let origin = pairs[0].0;
    let shift = pairs.iter().map(|p| p.0 - origin).sum::<f64>() / kf;
    let mean = origin + shift;
    let within_var = pairs.iter().map(|p| p.1).sum::<f64>() / kf;
    let between_var = pairs.iter().map(|p| (p.0 - origin - shift).powi(2)).sum::<f64>() / (kf - 1.0);
    let total_var = within_var + (1.0 + 1.0 / kf) * between_var;
    let denom = between_var + within_var;
    let prop_du = if denom > 0.0 { between_var / denom } else { 0.0 };
    Ok(CombinedInference {
        mean,
        between_var,
        within_var,
        total_var,
        prop_du,
        interval: normal_interval(mean, total_var, level)?,
        level,
        k_effective: k,
    })
}

pub fn combine(estimates: &[ConditionalEstimate], level: f64) -> Result<CombinedInference> {
    let pairs: Vec<(f64, f64)> = estimates.iter().map(|e| (e.delta, e.sigma2)).collect();
    combine_pairs(&pairs, level)
}
