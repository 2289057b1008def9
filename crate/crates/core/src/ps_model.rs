//! Bayesian logistic propensity-score model.
//!
//! Covariates are standardized internally (mean 0, SD 1) for fitting and
//! sampling; every [`AlphaDraw`] handed out is on the original covariate
//! scale with the intercept first.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{logistic, TreatmentData};
use crate::error::{Error, Result};
use crate::linalg::spd_cholesky;
use crate::rng::{stream_rng, Stream};

/// Which covariates enter the logistic model. An intercept is always
/// included and the link is always logit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PsModelSpec {
    pub covariates: Vec<String>,
}

impl PsModelSpec {
    pub fn new<S: Into<String>>(covariates: impl IntoIterator<Item = S>) -> Self {
        Self {
            covariates: covariates.into_iter().map(Into::into).collect(),
        }
    }

    /// All covariates of `data`, in column order.
    pub fn all(data: &TreatmentData) -> Self {
        Self::new(data.names().iter().cloned())
    }

    /// Covariates whose names start with any of `prefixes` followed by a digit.
    pub fn by_prefixes(data: &TreatmentData, prefixes: &[&str]) -> Self {
        Self::new(
            data.names()
                .iter()
                .filter(|name| {
                    prefixes.iter().any(|p| {
                        name.strip_prefix(p)
                            .is_some_and(|rest| rest.chars().next().is_some_and(|c| c.is_ascii_digit()))
                    })
                })
                .cloned(),
        )
    }

    /// Number of coefficients including the intercept.
    pub fn dim(&self) -> usize {
        1 + self.covariates.len()
    }

    /// Column indices into `data`, in the order listed.
    pub fn resolve(&self, data: &TreatmentData) -> Result<Vec<usize>> {
        let mut idx = Vec::with_capacity(self.covariates.len());
        for (k, name) in self.covariates.iter().enumerate() {
            if self.covariates[..k].contains(name) {
                return Err(Error::DuplicateColumn(name.clone()));
            }
            idx.push(
                data.column_index(name)
                    .ok_or_else(|| Error::UnknownCovariate(name.clone()))?,
            );
        }
        Ok(idx)
    }
}

/// Logistic coefficients on the original covariate scale, intercept first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaDraw(pub Vec<f64>);

impl AlphaDraw {
    pub fn coefficients(&self) -> &[f64] {
        &self.0
    }
}

/// Propensity scores induced by one coefficient draw.
#[derive(Debug, Clone, PartialEq)]
pub struct PsDraw {
    /// `eᵢ`, strictly inside (0, 1).
    pub e: Vec<f64>,
    /// Linear predictor `logit(eᵢ)`.
    pub linear: Vec<f64>,
}

impl PsDraw {
    /// Builds a draw from propensities directly (used by tests and by
    /// callers that already hold scores).
    pub fn from_scores(e: Vec<f64>) -> Result<Self> {
        if let Some(i) = e.iter().position(|&v| !(v > 0.0 && v < 1.0)) {
            return Err(Error::InvalidData(format!(
                "propensity score {} at unit {i} is outside (0, 1)",
                e[i]
            )));
        }
        let linear = e.iter().map(|&v| (v / (1.0 - v)).ln()).collect();
        Ok(Self { e, linear })
    }

    pub fn from_linear(linear: Vec<f64>) -> Self {
        let e = linear.iter().map(|&z| guard_unit(logistic(z))).collect();
        Self { e, linear }
    }

    pub fn n(&self) -> usize {
        self.e.len()
    }
}

/// Moves exact 0/1 to the nearest representable interior value.
fn guard_unit(e: f64) -> f64 {
    if e <= 0.0 {
        f64::MIN_POSITIVE
    } else if e >= 1.0 {
        1.0 - f64::EPSILON / 2.0
    } else {
        e
    }
}

/// Random-walk Metropolis settings and prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSettings {
    /// SD of the independent `N(0, sd²)` prior on each original-scale coefficient.
    pub prior_sd: f64,
    pub burn_in: usize,
    /// Retained draws are every `thin`-th iteration after burn-in.
    pub thin: usize,
    /// Proposal covariance is `scale² / d` times the inverse observed information.
    pub proposal_scale: f64,
    pub min_acceptance: f64,
    pub max_acceptance: f64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            prior_sd: 10.0,
            burn_in: 2000,
            thin: 10,
            proposal_scale: 2.38,
            min_acceptance: 0.1,
            max_acceptance: 0.6,
        }
    }
}

/// Maximum-likelihood fit.
#[derive(Debug, Clone)]
pub struct MleFit {
    pub alpha: AlphaDraw,
    /// Observed information on the standardized scale.
    pub information: DMatrix<f64>,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub log_likelihood: f64,
    std_coef: DVector<f64>,
}

impl MleFit {
    /// Asymptotic covariance of the original-scale coefficients.
    pub fn covariance(&self, model: &PsModel) -> Result<DMatrix<f64>> {
        let inv = spd_cholesky(self.information.clone(), "observed information")?.inverse();
        let a = model.back_transform_matrix();
        Ok(&a * inv * a.transpose())
    }
}

/// Retained posterior draws plus chain diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct PosteriorSample {
    pub draws: Vec<AlphaDraw>,
    pub log_posterior: Vec<f64>,
    pub acceptance_rate: f64,
    /// Smallest per-coefficient effective sample size among the retained draws.
    pub min_ess: f64,
    pub chain_length: usize,
}

/// A propensity model bound to a dataset: resolved columns, raw and
/// standardized design matrices.
#[derive(Debug, Clone)]
pub struct PsModel {
    spec: PsModelSpec,
    treatment: Vec<f64>,
    /// `[1, x_sel]`, n × d
    raw: DMatrix<f64>,
    /// `[1, (x_sel − mean)/sd]`, n × d
    std: DMatrix<f64>,
    means: Vec<f64>,
    sds: Vec<f64>,
}

impl PsModel {
    pub fn new(data: &TreatmentData, spec: &PsModelSpec) -> Result<Self> {
        let cols = spec.resolve(data)?;
        let n = data.n();
        let d = cols.len() + 1;
        let x = data.covariates();
        let mut raw = DMatrix::from_element(n, d, 1.0);
        let mut std = DMatrix::from_element(n, d, 1.0);
        let mut means = Vec::with_capacity(cols.len());
        let mut sds = Vec::with_capacity(cols.len());
        for (k, &j) in cols.iter().enumerate() {
            let col = x.column(j);
            let m = col.mean();
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
            let sd = var.sqrt();
            if !(sd > 0.0) {
                return Err(Error::RankDeficient(format!(
                    "covariate `{}` is constant",
                    spec.covariates[k]
                )));
            }
            for i in 0..n {
                raw[(i, k + 1)] = x[(i, j)];
                std[(i, k + 1)] = (x[(i, j)] - m) / sd;
            }
            means.push(m);
            sds.push(sd);
        }
        Ok(Self {
            spec: spec.clone(),
            treatment: data.treatment().iter().map(|&t| t as u8 as f64).collect(),
            raw,
            std,
            means,
            sds,
        })
    }

    pub fn spec(&self) -> &PsModelSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.raw.ncols()
    }

    pub fn n(&self) -> usize {
        self.raw.nrows()
    }

    /// Linear map from standardized to original-scale coefficients.
    fn back_transform_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut a = DMatrix::identity(d, d);
        for k in 0..d - 1 {
            a[(k + 1, k + 1)] = 1.0 / self.sds[k];
            a[(0, k + 1)] = -self.means[k] / self.sds[k];
        }
        a
    }

    fn to_original(&self, gamma: &DVector<f64>) -> AlphaDraw {
        let d = self.dim();
        let mut alpha = vec![0.0; d];
        alpha[0] = gamma[0];
        for k in 0..d - 1 {
            alpha[k + 1] = gamma[k + 1] / self.sds[k];
            alpha[0] -= gamma[k + 1] * self.means[k] / self.sds[k];
        }
        AlphaDraw(alpha)
    }

    fn log_likelihood(&self, gamma: &DVector<f64>) -> f64 {
        let lp = &self.std * gamma;
        lp.iter()
            .zip(&self.treatment)
            .map(|(&z, &t)| t * z - softplus(z))
            .sum()
    }

    fn log_prior(&self, gamma: &DVector<f64>, prior_sd: f64) -> f64 {
        let alpha = self.to_original(gamma);
        -0.5 * alpha.0.iter().map(|a| (a / prior_sd).powi(2)).sum::<f64>()
    }

    /// Newton–Raphson (equivalently IRLS) on the standardized scale.
    pub fn fit_mle(&self) -> Result<MleFit> {
        const MAX_ITER: usize = 100;
        const GRAD_TOL: f64 = 1e-8;
        // Standardized slopes this large mean fitted probabilities are
        // numerically 0/1 for most units: the MLE does not exist.
        const DIVERGED: f64 = 30.0;

        let (n, d) = (self.n(), self.dim());
        let mut gamma = DVector::<f64>::zeros(d);
        let mut ll = self.log_likelihood(&gamma);
        for iter in 0..MAX_ITER {
            let lp = &self.std * &gamma;
            let mut grad = DVector::<f64>::zeros(d);
            let mut info = DMatrix::<f64>::zeros(d, d);
            for i in 0..n {
                let p = logistic(lp[i]);
                let w = p * (1.0 - p);
                let row = self.std.row(i);
                let r = self.treatment[i] - p;
                for a in 0..d {
                    grad[a] += r * row[a];
                    let wa = w * row[a];
                    for b in 0..=a {
                        info[(a, b)] += wa * row[b];
                    }
                }
            }
            for a in 0..d {
                for b in 0..a {
                    info[(b, a)] = info[(a, b)];
                }
            }
            let gnorm = grad.norm();
            if gnorm <= GRAD_TOL {
                return Ok(MleFit {
                    alpha: self.to_original(&gamma),
                    information: info,
                    iterations: iter,
                    gradient_norm: gnorm,
                    log_likelihood: ll,
                    std_coef: gamma,
                });
            }
            let chol = spd_cholesky(info, "logistic information").map_err(|_| {
                Error::Separation("information matrix became singular (separation or collinearity)".into())
            })?;
            let step = chol.solve(&grad);
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..30 {
                let cand = &gamma + &step * t;
                let cand_ll = self.log_likelihood(&cand);
                if cand_ll.is_finite() && cand_ll >= ll - 1e-12 * ll.abs().max(1.0) {
                    gamma = cand;
                    ll = cand_ll;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                return Err(Error::Separation("line search failed to improve the likelihood".into()));
            }
            if gamma.iter().skip(1).any(|g| g.abs() > DIVERGED) || !gamma.iter().all(|g| g.is_finite()) {
                return Err(Error::Separation(
                    "coefficients diverge; the treatment is (quasi-)perfectly separated".into(),
                ));
            }
        }
        Err(Error::Separation(format!(
            "no convergence after {MAX_ITER} Newton iterations"
        )))
    }

    /// Random-walk Metropolis draws from `f(α | X, T) ∝ L(T | X, α) π(α)`.
    ///
    /// The chain starts at the MLE, proposes with covariance
    /// `(scale²/d)·I⁻¹` (observed information at the MLE, standardized
    /// scale), discards `burn_in` iterations and keeps every `thin`-th
    /// state, so `k` draws come from a chain of `burn_in + thin·k` steps.
    pub fn sample_posterior(&self, k: usize, seed: u64, settings: &SamplerSettings) -> Result<PosteriorSample> {
        if k == 0 {
            return Err(Error::InvalidConfig("K must be ≥ 1".into()));
        }
        if settings.thin == 0 || !(settings.prior_sd > 0.0) {
            return Err(Error::InvalidConfig("thin must be ≥ 1 and prior_sd > 0".into()));
        }
        let mle = self.fit_mle()?;
        self.sample_from(&mle, k, seed, settings)
    }

    pub fn sample_from(&self, mle: &MleFit, k: usize, seed: u64, settings: &SamplerSettings) -> Result<PosteriorSample> {
        let d = self.dim();
        let cov = spd_cholesky(mle.information.clone(), "observed information")?.inverse();
        let scale2 = settings.proposal_scale.powi(2) / d as f64;
        let l = spd_cholesky(cov * scale2, "proposal covariance")?.unpack();

        let mut rng = stream_rng(seed, Stream::Sampler, &[]);
        let log_post = |g: &DVector<f64>| self.log_likelihood(g) + self.log_prior(g, settings.prior_sd);

        let mut state = mle.std_coef.clone();
        let mut lp_state = log_post(&state);
        if !lp_state.is_finite() {
            return Err(Error::Sampler("non-finite log-posterior at the MLE".into()));
        }
        let total = settings.burn_in + settings.thin * k;
        let mut accepted = 0usize;
        let mut draws = Vec::with_capacity(k);
        let mut lps = Vec::with_capacity(k);
        let mut z = DVector::<f64>::zeros(d);
        let mut kept_std: Vec<DVector<f64>> = Vec::with_capacity(k);
        for it in 0..total {
            for v in z.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let prop = &state + &l * &z;
            let lp_prop = log_post(&prop);
            if !lp_prop.is_finite() {
                return Err(Error::Sampler(format!("non-finite log-posterior at iteration {it}")));
            }
            let u: f64 = rng.random();
            if u.ln() < lp_prop - lp_state {
                state = prop;
                lp_state = lp_prop;
                accepted += 1;
            }
            if it >= settings.burn_in && (it - settings.burn_in + 1) % settings.thin == 0 {
                draws.push(self.to_original(&state));
                lps.push(lp_state);
                kept_std.push(state.clone());
            }
        }
        let acceptance_rate = accepted as f64 / total as f64;
        if acceptance_rate < settings.min_acceptance || acceptance_rate > settings.max_acceptance {
            return Err(Error::Sampler(format!(
                "acceptance rate {acceptance_rate:.3} outside [{}, {}]",
                settings.min_acceptance, settings.max_acceptance
            )));
        }
        let min_ess = (0..d)
            .map(|j| {
                let series: Vec<f64> = kept_std.iter().map(|g| g[j]).collect();
                effective_sample_size(&series)
            })
            .fold(f64::INFINITY, f64::min);
        Ok(PosteriorSample {
            draws,
            log_posterior: lps,
            acceptance_rate,
            min_ess,
            chain_length: total,
        })
    }

    /// `eᵢ = logistic(α₀ + αᵀxᵢ)` for every unit.
    pub fn predict(&self, alpha: &AlphaDraw) -> Result<PsDraw> {
        if alpha.0.len() != self.dim() {
            return Err(Error::InvalidConfig(format!(
                "coefficient vector has length {} but the model has {} terms",
                alpha.0.len(),
                self.dim()
            )));
        }
        let a = DVector::from_column_slice(&alpha.0);
        let lp = &self.raw * a;
        Ok(PsDraw::from_linear(lp.iter().cloned().collect()))
    }
}

/// `log(1 + eᶻ)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// ESS via Geyer's initial positive sequence of autocorrelation pair sums.
pub fn effective_sample_size(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 4 {
        return n as f64;
    }
    let m = x.iter().sum::<f64>() / n as f64;
    let c0 = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
    if c0 <= 0.0 {
        return n as f64;
    }
    let acf = |lag: usize| -> f64 {
        (0..n - lag).map(|i| (x[i] - m) * (x[i + lag] - m)).sum::<f64>() / n as f64 / c0
    };
    let mut sum = 0.0;
    let mut lag = 0;
    while lag + 1 < n / 2 {
        let pair = acf(lag) + acf(lag + 1);
        if pair <= 0.0 {
            break;
        }
        sum += pair;
        lag += 2;
    }
    let tau = (2.0 * sum - 1.0).max(1.0 / n as f64);
    (n as f64 / tau).min(n as f64)
}

/// Maximum-likelihood coefficients of the logistic propensity model.
pub fn fit_mle(data: &TreatmentData, spec: &PsModelSpec) -> Result<AlphaDraw> {
    Ok(PsModel::new(data, spec)?.fit_mle()?.alpha)
}

/// `k` posterior draws with the default sampler settings.
pub fn sample_posterior(data: &TreatmentData, spec: &PsModelSpec, k: usize, seed: u64) -> Result<Vec<AlphaDraw>> {
    Ok(PsModel::new(data, spec)?
        .sample_posterior(k, seed, &SamplerSettings::default())?
        .draws)
}

pub fn predict_ps(alpha: &AlphaDraw, data: &TreatmentData, spec: &PsModelSpec) -> Result<PsDraw> {
    PsModel::new(data, spec)?.predict(alpha)
}
