//! Conditional inference for Δ given one design.
//!
//! Stratified designs get a Bayesian linear outcome model (treatment ×
//! stratum interactions, flat prior on β, Jeffreys prior on σ²). Weighted
//! designs (IPW, DR, matching frequency weights) get a point estimator and a
//! variance, which define the normal approximation `N(Q̂(ν), V̂(ν))`.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::design::{Design, DesignPayload, Provenance};
use crate::error::{Error, Result};
use crate::linalg::{mean, ols, sample_var, spd_cholesky};
use crate::ps_model::PsModelSpec;
use crate::rng::{rng_from, stream_seed, Stream};

/// `E(Δ | data, ν)` and `Var(Δ | data, ν)` for one design.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionalEstimate {
    pub delta: f64,
    pub sigma2: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub draws: Option<Vec<f64>>,
    pub provenance: Provenance,
}

impl ConditionalEstimate {
    pub fn new(delta: f64, sigma2: f64) -> Self {
        Self {
            delta,
            sigma2,
            draws: None,
            provenance: Provenance::default(),
        }
    }

    pub fn with_provenance(mut self, p: Provenance) -> Self {
        self.provenance = p;
        self
    }
}

/// Stratum weights used to turn the interacted regression into Δ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StrataContrast {
    /// Pooled stratum shares `n_s / n` for both arms: the stratified ATE
    /// `Σ_s (n_s/n)(m_{s1} − m_{s0})`.
    #[default]
    Pooled,
    /// Arm-specific shares `P_{s1}`, `P_{s0}`: `Σ_s P_{s1} m_{s1} − Σ_s P_{s0} m_{s0}`.
    ArmSpecific,
}

/// Posterior of the interacted outcome model
/// `E(Y) = β₀ + β₁T + Σ_{s≥2}[β₂ₛ 1(ν=s) + β₃ₛ T 1(ν=s)]`.
///
/// Column layout: `[1, T, 1(ν=2), T·1(ν=2), …, 1(ν=Q), T·1(ν=Q)]`.
#[derive(Debug, Clone)]
pub struct StratOutcomePosterior {
    /// Posterior mean of β (the OLS fit under a flat prior).
    pub beta: DVector<f64>,
    /// Residual variance estimate `s²`.
    pub sigma2: f64,
    /// `P_st`: share of arm `t` in stratum `s`, `q × 2` (column 0 controls, 1 treated).
    pub p_st: DMatrix<f64>,
    /// Pooled stratum shares `n_s / n`.
    pub p_s: Vec<f64>,
    contrast: DVector<f64>,
    xtx_inv: DMatrix<f64>,
    dof: usize,
    chol_l: DMatrix<f64>,
}

impl StratOutcomePosterior {
    pub fn fit(data: &Dataset, labels: &[u32], q: u32, contrast: StrataContrast) -> Result<Self> {
        let n = data.n();
        if labels.len() != n {
            return Err(Error::InvalidData(format!("{} labels for {n} units", labels.len())));
        }
        let q = q as usize;
        let t = data.treatment();
        let mut counts = vec![[0usize; 2]; q];
        for (&l, &ti) in labels.iter().zip(t) {
            if l == 0 || l as usize > q {
                return Err(Error::InvalidData(format!("stratum label {l} outside 1..={q}")));
            }
            counts[l as usize - 1][ti as usize] += 1;
        }
        let degenerate: Vec<u32> = (0..q)
            .filter(|&s| counts[s][0] == 0 || counts[s][1] == 0)
            .map(|s| s as u32 + 1)
            .collect();
        if !degenerate.is_empty() {
            return Err(Error::DegenerateStrata { strata: degenerate });
        }
        let p = 2 * q;
        let x = DMatrix::from_fn(n, p, |i, j| {
            let ti = t[i] as u8 as f64;
            match j {
                0 => 1.0,
                1 => ti,
                _ => {
                    let s = (j - 2) / 2 + 2;
                    let ind = (labels[i] as usize == s) as u8 as f64;
                    if (j - 2) % 2 == 0 {
                        ind
                    } else {
                        ti * ind
                    }
                }
            }
        });
        let fit = ols(&x, &DVector::from_column_slice(data.outcome()))?;
        if fit.dof() == 0 {
            return Err(Error::RankDeficient(format!(
                "{n} units leave no residual degrees of freedom for {p} coefficients"
            )));
        }
        let n_arm = [
            counts.iter().map(|c| c[0]).sum::<usize>() as f64,
            counts.iter().map(|c| c[1]).sum::<usize>() as f64,
        ];
        let p_st = DMatrix::from_fn(q, 2, |s, a| counts[s][a] as f64 / n_arm[a]);
        let p_s: Vec<f64> = counts.iter().map(|c| (c[0] + c[1]) as f64 / n as f64).collect();
        let mut c = DVector::zeros(p);
        c[1] = 1.0;
        for s in 2..=q {
            let (w1, w0) = match contrast {
                StrataContrast::Pooled => (p_s[s - 1], p_s[s - 1]),
                StrataContrast::ArmSpecific => (p_st[(s - 1, 1)], p_st[(s - 1, 0)]),
            };
            c[2 + 2 * (s - 2)] = w1 - w0;
            c[3 + 2 * (s - 2)] = w1;
        }
        let chol_l = spd_cholesky(fit.xtx_inv.clone(), "(XᵀX)⁻¹")?.unpack();
        Ok(Self {
            sigma2: fit.sigma2(),
            dof: fit.dof(),
            beta: fit.beta,
            xtx_inv: fit.xtx_inv,
            p_st,
            p_s,
            contrast: c,
            chol_l,
        })
    }

    /// Δ as a linear combination of coefficients.
    pub fn contrast(&self, beta: &DVector<f64>) -> f64 {
        self.contrast.dot(beta)
    }

    pub fn contrast_vector(&self) -> &DVector<f64> {
        &self.contrast
    }

    /// Δ at the posterior mean (equivalently the OLS fit).
    pub fn point(&self) -> f64 {
        self.contrast(&self.beta)
    }

    /// Frequentist variance `s² cᵀ(XᵀX)⁻¹c` of the OLS contrast.
    pub fn ols_variance(&self) -> f64 {
        self.sigma2 * (self.contrast.transpose() * &self.xtx_inv * &self.contrast)[(0, 0)]
    }

    /// One joint draw `(β, σ²)`: `σ² = (n−p)s²/χ²_{n−p}`, `β | σ² ~ N(β̂, σ²(XᵀX)⁻¹)`.
    pub fn draw<R: Rng>(&self, rng: &mut R) -> (DVector<f64>, f64) {
        let chi = ChiSquared::new(self.dof as f64).expect("dof ≥ 1");
        let sigma2 = self.dof as f64 * self.sigma2 / chi.sample(rng);
        let z = DVector::from_fn(self.beta.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let beta = &self.beta + &self.chol_l * z * sigma2.sqrt();
        (beta, sigma2)
    }
}

/// Posterior mean/variance of Δ from `s` draws of the stratified outcome model.
pub fn strat_conditional(
    data: &Dataset,
    design: &Design,
    s: usize,
    seed: u64,
    contrast: StrataContrast,
) -> Result<ConditionalEstimate> {
    let (labels, q) = match &design.payload {
        DesignPayload::Strata { labels, q, .. } => (labels, *q),
        DesignPayload::Weights(_) => {
            return Err(Error::InvalidConfig("stratified analysis needs a stratification design".into()))
        }
    };
    if s == 0 {
        return Err(Error::InvalidConfig("S must be ≥ 1".into()));
    }
    let post = StratOutcomePosterior::fit(data, labels, q, contrast)?;
    let mut rng = rng_from(seed);
    let draws: Vec<f64> = (0..s).map(|_| post.contrast(&post.draw(&mut rng).0)).collect();
    Ok(ConditionalEstimate {
        delta: mean(&draws),
        sigma2: sample_var(&draws),
        draws: Some(draws),
        provenance: design.provenance,
    })
}

fn check_weights(data: &Dataset, w: &[f64]) -> Result<()> {
    if w.len() != data.n() {
        return Err(Error::InvalidData(format!("{} weights for {} units", w.len(), data.n())));
    }
    if w.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
        return Err(Error::InvalidData("weights must be finite and non-negative".into()));
    }
    Ok(())
}

/// Hájek arm means `(μ̂₁, μ̂₀)`.
pub fn hajek_means(data: &Dataset, w: &[f64]) -> Result<(f64, f64)> {
    check_weights(data, w)?;
    let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0.0, 0.0, 0.0);
    for ((&y, &t), &wi) in data.outcome().iter().zip(data.treatment()).zip(w) {
        if t {
            s1 += wi * y;
            n1 += wi;
        } else {
            s0 += wi * y;
            n0 += wi;
        }
    }
    if !(n1 > 0.0) {
        return Err(Error::ZeroArmWeight { arm: "treated" });
    }
    if !(n0 > 0.0) {
        return Err(Error::ZeroArmWeight { arm: "control" });
    }
    Ok((s1 / n1, s0 / n0))
}

/// Hájek ratio estimator `Σ νTY/Σ νT − Σ ν(1−T)Y/Σ ν(1−T)`. Serves IPW and
/// matching frequency weights alike.
pub fn ipw_point(data: &Dataset, w: &[f64]) -> Result<f64> {
    let (m1, m0) = hajek_means(data, w)?;
    Ok(m1 - m0)
}

/// True-propensity variance `(1/n)·(1/n)Σ νᵢ[Tᵢ(Yᵢ−μ̂₁)² + (1−Tᵢ)(Yᵢ−μ̂₀)²]`.
pub fn ipw_var_trueps(data: &Dataset, w: &[f64]) -> Result<f64> {
    let (m1, m0) = hajek_means(data, w)?;
    let n = data.n() as f64;
    let s: f64 = data
        .outcome()
        .iter()
        .zip(data.treatment())
        .zip(w)
        .map(|((&y, &t), &wi)| wi * if t { (y - m1).powi(2) } else { (y - m0).powi(2) })
        .sum();
    Ok(s / n / n)
}

/// Weighted two-group regression `Y ~ 1 + T` with weights ν.
fn wls_two_group(data: &Dataset, w: &[f64]) -> Result<(Matrix2<f64>, Vector2<f64>, Vec<f64>)> {
    check_weights(data, w)?;
    let mut xtwx = Matrix2::zeros();
    let mut xtwy = Vector2::zeros();
    for ((&y, &t), &wi) in data.outcome().iter().zip(data.treatment()).zip(w) {
        let x = Vector2::new(1.0, t as u8 as f64);
        xtwx += x * x.transpose() * wi;
        xtwy += x * (wi * y);
    }
    let inv = xtwx
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::RankDeficient("weighted Y ~ T regression needs weight in both arms".into()))?;
    let beta = inv * xtwy;
    let resid = data
        .outcome()
        .iter()
        .zip(data.treatment())
        .map(|(&y, &t)| y - beta[0] - beta[1] * t as u8 as f64)
        .collect();
    Ok((inv, beta, resid))
}

/// WLS coefficient β̂₁ of `Y ~ 1 + T` with weights ν (equals [`ipw_point`]).
pub fn wls_effect(data: &Dataset, w: &[f64]) -> Result<f64> {
    Ok(wls_two_group(data, w)?.1[1])
}

/// HC0 sandwich variance of β̂₁ from the weighted regression `Y ~ 1 + T`.
pub fn ipw_sandwich_var(data: &Dataset, w: &[f64]) -> Result<f64> {
    let (bread, _, resid) = wls_two_group(data, w)?;
    let mut meat = Matrix2::zeros();
    for ((&t, &wi), &r) in data.treatment().iter().zip(w).zip(&resid) {
        let x = Vector2::new(1.0, t as u8 as f64);
        meat += x * x.transpose() * (wi * wi * r * r);
    }
    Ok((bread * meat * bread)[(1, 1)])
}

/// Model-based variance of β̂₁ from the weighted regression `Y ~ 1 + T`:
/// `σ̂² [(XᵀWX)⁻¹]₁₁` with `σ̂² = Σ νr² / (m − 2)`, `m` the number of units
/// with positive weight.
pub fn wls_model_var(data: &Dataset, w: &[f64]) -> Result<f64> {
    let (inv, _, resid) = wls_two_group(data, w)?;
    let m = w.iter().filter(|&&v| v > 0.0).count();
    if m <= 2 {
        return Err(Error::RankDeficient(format!("{m} weighted units for 2 coefficients")));
    }
    let rss: f64 = w.iter().zip(&resid).map(|(&wi, &r)| wi * r * r).sum();
    Ok(rss / (m - 2) as f64 * inv[(1, 1)])
}

/// Arm-specific outcome regressions for the doubly-robust estimator.
///
/// `Ŷ₁` is fit by OLS on treated units, `Ŷ₀` on controls, both predicted for
/// every unit. They do not depend on the design and can be reused across
/// designs.
#[derive(Debug, Clone)]
pub struct DrOutcomeModel {
    pub yhat1: Vec<f64>,
    pub yhat0: Vec<f64>,
}

/// A variance that may have been floored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlooredVariance {
    pub value: f64,
    pub raw: f64,
    pub floored: bool,
}

pub const DR_VARIANCE_FLOOR: f64 = 1e-12;

impl DrOutcomeModel {
    pub fn fit(data: &Dataset, spec: &PsModelSpec) -> Result<Self> {
        let cols = spec.resolve(data.design_view())?;
        let x = data.covariates();
        let n = data.n();
        let full = DMatrix::from_fn(n, cols.len() + 1, |i, j| if j == 0 { 1.0 } else { x[(i, cols[j - 1])] });
        let mut yhat = [Vec::new(), Vec::new()];
        for arm in [false, true] {
            let rows: Vec<usize> = (0..n).filter(|&i| data.treatment()[i] == arm).collect();
            let xa = full.select_rows(&rows);
            let ya = DVector::from_iterator(rows.len(), rows.iter().map(|&i| data.outcome()[i]));
            let fit = ols(&xa, &ya).map_err(|_| {
                Error::RankDeficient(format!(
                    "outcome regression on the {} arm is rank deficient",
                    if arm { "treated" } else { "control" }
                ))
            })?;
            yhat[arm as usize] = (&full * fit.beta).iter().cloned().collect();
        }
        let [yhat0, yhat1] = yhat;
        Ok(Self { yhat1, yhat0 })
    }

    /// `(μ̂_DR,1, μ̂_DR,0)` with `μ̂_DR,a = (1/n)Σ[νᵢ 1(Tᵢ=a)(Yᵢ − Ŷₐᵢ) + Ŷₐᵢ]`.
    pub fn arm_means(&self, data: &Dataset, w: &[f64]) -> Result<(f64, f64)> {
        check_weights(data, w)?;
        let n = data.n() as f64;
        let (mut m1, mut m0) = (0.0, 0.0);
        for i in 0..data.n() {
            let (y, t) = (data.outcome()[i], data.treatment()[i]);
            m1 += if t { w[i] * (y - self.yhat1[i]) } else { 0.0 } + self.yhat1[i];
            m0 += if t { 0.0 } else { w[i] * (y - self.yhat0[i]) } + self.yhat0[i];
        }
        Ok((m1 / n, m0 / n))
    }

    pub fn point(&self, data: &Dataset, w: &[f64]) -> Result<f64> {
        let (m1, m0) = self.arm_means(data, w)?;
        Ok(m1 - m0)
    }

    /// Difference-of-sums variance display:
    /// `(1/n)[(1/n)Σ(νT(Y−μ̂_IPW,1) − ν(1−T)(Y−μ̂_IPW,0))² − (1/n)Σ((ν−1)^{T−½}(Ŷ₁−μ̂_DR,1) + (ν−1)^{½−T}(Ŷ₀−μ̂_DR,0))²]`,
    /// floored at [`DR_VARIANCE_FLOOR`].
    pub fn projection_variance(&self, data: &Dataset, w: &[f64]) -> Result<FlooredVariance> {
        let (i1, i0) = hajek_means(data, w)?;
        let (d1, d0) = self.arm_means(data, w)?;
        let n = data.n() as f64;
        let (mut first, mut second) = (0.0, 0.0);
        for i in 0..data.n() {
            let (y, t, v) = (data.outcome()[i], data.treatment()[i], w[i]);
            let a = if t { v * (y - i1) } else { -v * (y - i0) };
            first += a * a;
            let root = (v - 1.0).sqrt();
            if !(root > 0.0 && root.is_finite()) {
                return Err(Error::InvalidData(format!(
                    "doubly-robust variance needs inverse-probability weights > 1, got {v} at unit {i}"
                )));
            }
            let (f1, f0) = if t { (root, 1.0 / root) } else { (1.0 / root, root) };
            let b = f1 * (self.yhat1[i] - d1) + f0 * (self.yhat0[i] - d0);
            second += b * b;
        }
        let raw = (first / n - second / n) / n;
        Ok(if raw < DR_VARIANCE_FLOOR {
            FlooredVariance {
                value: DR_VARIANCE_FLOOR,
                raw,
                floored: true,
            }
        } else {
            FlooredVariance {
                value: raw,
                raw,
                floored: false,
            }
        })
    }

    /// Influence-function variance `(1/n²)Σ(ψᵢ − Δ̂)²` with
    /// `ψᵢ = νᵢTᵢ(Yᵢ−Ŷ₁ᵢ) + Ŷ₁ᵢ − νᵢ(1−Tᵢ)(Yᵢ−Ŷ₀ᵢ) − Ŷ₀ᵢ`.
    pub fn influence_variance(&self, data: &Dataset, w: &[f64]) -> Result<f64> {
        check_weights(data, w)?;
        let psi: Vec<f64> = (0..data.n())
            .map(|i| {
                let (y, t, v) = (data.outcome()[i], data.treatment()[i], w[i]);
                let aug = if t { v * (y - self.yhat1[i]) } else { -v * (y - self.yhat0[i]) };
                aug + self.yhat1[i] - self.yhat0[i]
            })
            .collect();
        let m = mean(&psi);
        let n = data.n() as f64;
        Ok(psi.iter().map(|p| (p - m) * (p - m)).sum::<f64>() / n / n)
    }
}

/// Doubly-robust point estimate with outcome regressions on `outcome_spec`.
pub fn dr_point(data: &Dataset, w: &[f64], outcome_spec: &PsModelSpec) -> Result<f64> {
    DrOutcomeModel::fit(data, outcome_spec)?.point(data, w)
}

/// Doubly-robust difference-of-sums variance, floored with a flag.
pub fn dr_var(data: &Dataset, w: &[f64], outcome_spec: &PsModelSpec) -> Result<FlooredVariance> {
    DrOutcomeModel::fit(data, outcome_spec)?.projection_variance(data, w)
}

/// `S` draws from `N(Q̂, V̂)`; the estimate stores `(Q̂, V̂)` exactly.
pub fn asymptotic_conditional(qhat: f64, vhat: f64, s: usize, seed: u64) -> Result<ConditionalEstimate> {
    if !(vhat >= 0.0) || !qhat.is_finite() || !vhat.is_finite() {
        return Err(Error::InvalidData(format!("need finite Q̂ and V̂ ≥ 0, got ({qhat}, {vhat})")));
    }
    let normal = Normal::new(qhat, vhat.sqrt()).expect("finite, non-negative sd");
    let mut rng = rng_from(seed);
    let draws = (0..s).map(|_| normal.sample(&mut rng)).collect();
    Ok(ConditionalEstimate {
        delta: qhat,
        sigma2: vhat,
        draws: Some(draws),
        provenance: Provenance::default(),
    })
}

/// Seed of the analysis stream for design `(k, r)`.
pub fn analysis_seed(seed: u64, k: usize, r: usize) -> u64 {
    stream_seed(seed, Stream::Analysis, &[k as u64, r as u64])
}
