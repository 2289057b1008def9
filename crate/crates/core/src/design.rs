//! Propensity-score implementations: `(PsDraw, T) → ν`.
//!
//! Stratification, nearest-neighbour matching and the two weighting kinds are
//! deterministic (one design per propensity draw). Caliper matching picks
//! matches at random among in-caliper controls and therefore yields a
//! distribution of designs for a fixed propensity draw.
//!
//! Nothing in this module takes outcome data.

use std::io::Write;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TreatmentData;
use crate::error::{Error, Result};
use crate::linalg::sample_sd;
use crate::ps_model::{AlphaDraw, PsDraw, PsModel, PsModelSpec};
use crate::rng::{rng_from, stream_seed, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImplementationKind {
    Stratification,
    NnMatch,
    CaliperMatch,
    Ipw,
    Dr,
}

impl ImplementationKind {
    pub fn is_deterministic(self) -> bool {
        !matches!(self, ImplementationKind::CaliperMatch)
    }

    pub fn is_matching(self) -> bool {
        matches!(self, ImplementationKind::NnMatch | ImplementationKind::CaliperMatch)
    }

    /// Short CLI name.
    pub fn name(self) -> &'static str {
        match self {
            ImplementationKind::Stratification => "strat",
            ImplementationKind::NnMatch => "nn",
            ImplementationKind::CaliperMatch => "caliper",
            ImplementationKind::Ipw => "ipw",
            ImplementationKind::Dr => "dr",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "strat" | "stratification" => ImplementationKind::Stratification,
            "nn" => ImplementationKind::NnMatch,
            "caliper" => ImplementationKind::CaliperMatch,
            "ipw" => ImplementationKind::Ipw,
            "dr" => ImplementationKind::Dr,
            _ => return None,
        })
    }
}

/// Units in which the caliper is expressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CaliperScale {
    /// Distances on the logit scale; width = caliper × SD(logit e).
    #[default]
    LogitSd,
    /// Distances on the propensity scale; width = caliper.
    Propensity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImplementationSpec {
    pub kind: ImplementationKind,
    /// Number of strata `Q`.
    pub strata: usize,
    /// Controls per treated unit.
    pub ratio: usize,
    pub caliper: f64,
    pub caliper_scale: CaliperScale,
    /// Re-draws `R` per propensity draw (probabilistic kinds only).
    pub redraws: usize,
}

impl ImplementationSpec {
    pub fn new(kind: ImplementationKind) -> Self {
        Self {
            kind,
            strata: 5,
            ratio: 1,
            caliper: 0.5,
            caliper_scale: CaliperScale::LogitSd,
            redraws: 1,
        }
    }

    pub fn stratification(q: usize) -> Self {
        Self {
            strata: q,
            ..Self::new(ImplementationKind::Stratification)
        }
    }

    pub fn nn(ratio: usize, caliper: f64) -> Self {
        Self {
            ratio,
            caliper,
            ..Self::new(ImplementationKind::NnMatch)
        }
    }

    pub fn caliper(ratio: usize, caliper: f64, redraws: usize) -> Self {
        Self {
            ratio,
            caliper,
            redraws,
            ..Self::new(ImplementationKind::CaliperMatch)
        }
    }

    pub fn ipw() -> Self {
        Self::new(ImplementationKind::Ipw)
    }

    pub fn dr() -> Self {
        Self::new(ImplementationKind::Dr)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == ImplementationKind::Stratification && self.strata < 2 {
            return Err(Error::InvalidConfig(format!("Q must be ≥ 2, got {}", self.strata)));
        }
        if self.kind.is_matching() {
            if self.ratio < 1 {
                return Err(Error::InvalidConfig("matching ratio must be ≥ 1".into()));
            }
            if !(self.caliper > 0.0 && self.caliper.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "caliper must be a positive number, got {}",
                    self.caliper
                )));
            }
        }
        if self.redraws < 1 {
            return Err(Error::InvalidConfig("R must be ≥ 1".into()));
        }
        Ok(())
    }

    /// `R`, forced to 1 for deterministic kinds.
    pub fn effective_redraws(&self) -> usize {
        if self.kind.is_deterministic() {
            1
        } else {
            self.redraws
        }
    }

    /// Display label such as `"Caliper matching (1-5)"`.
    pub fn label(&self) -> String {
        match self.kind {
            ImplementationKind::Stratification => "Stratification".into(),
            ImplementationKind::NnMatch => "NN matching".into(),
            ImplementationKind::CaliperMatch => format!("Caliper matching (1-{})", self.ratio),
            ImplementationKind::Ipw => "IPW".into(),
            ImplementationKind::Dr => "DR".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ArmCounts {
    pub treated: usize,
    pub control: usize,
}

/// Which posterior draw `k` and re-draw `r` produced a design.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub k: usize,
    pub r: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DesignPayload {
    Strata {
        /// Stratum of each unit, `1..=q`.
        labels: Vec<u32>,
        q: u32,
        /// Strata lacking a treated or a control unit.
        degenerate: Vec<u32>,
    },
    /// Per-unit weights; 0 marks a pruned or unmatched unit.
    Weights(Vec<f64>),
}

/// One realization `ν` of the design stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub kind: ImplementationKind,
    pub payload: DesignPayload,
    /// Units with positive weight (or any stratum) per arm.
    pub included: ArmCounts,
    /// Treated units dropped for lack of in-caliper controls.
    pub pruned_treated: usize,
    pub provenance: Provenance,
}

impl Design {
    pub fn weights(&self) -> Option<&[f64]> {
        match &self.payload {
            DesignPayload::Weights(w) => Some(w),
            DesignPayload::Strata { .. } => None,
        }
    }

    pub fn labels(&self) -> Option<&[u32]> {
        match &self.payload {
            DesignPayload::Strata { labels, .. } => Some(labels),
            DesignPayload::Weights(_) => None,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        matches!(&self.payload, DesignPayload::Strata { degenerate, .. } if !degenerate.is_empty())
    }

    fn with_provenance(mut self, k: usize, r: usize) -> Self {
        self.provenance = Provenance { k, r };
        self
    }
}

/// Type-7 sample quantile of sorted data.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Quantile stratification of the pooled propensity distribution into `q`
/// bins. Bin `s` is `(b_{s−1}, b_s]` with the lowest bin closed on both ends,
/// where `b_s` is the type-7 sample quantile at `s/q`.
///
/// Strata missing an arm are flagged in the payload, not rejected.
pub fn stratify(ps: &PsDraw, treatment: &[bool], q: usize) -> Result<Design> {
    let n = ps.n();
    if q < 2 {
        return Err(Error::InvalidConfig(format!("Q must be ≥ 2, got {q}")));
    }
    if n < q {
        return Err(Error::InvalidConfig(format!("need n ≥ Q, got n={n}, Q={q}")));
    }
    check_len(ps, treatment)?;
    let mut sorted = ps.e.clone();
    sorted.sort_by(f64::total_cmp);
    let bounds: Vec<f64> = (1..q).map(|s| quantile_sorted(&sorted, s as f64 / q as f64)).collect();
    let labels: Vec<u32> = ps
        .e
        .iter()
        .map(|&e| 1 + bounds.partition_point(|&b| b < e) as u32)
        .collect();
    let mut counts = vec![[0usize; 2]; q];
    for (&l, &t) in labels.iter().zip(treatment) {
        counts[l as usize - 1][t as usize] += 1;
    }
    let degenerate = (0..q)
        .filter(|&s| counts[s][0] == 0 || counts[s][1] == 0)
        .map(|s| s as u32 + 1)
        .collect();
    let n_treated = treatment.iter().filter(|&&t| t).count();
    Ok(Design {
        kind: ImplementationKind::Stratification,
        payload: DesignPayload::Strata {
            labels,
            q: q as u32,
            degenerate,
        },
        included: ArmCounts {
            treated: n_treated,
            control: n - n_treated,
        },
        pruned_treated: 0,
        provenance: Provenance::default(),
    })
}

fn check_len(ps: &PsDraw, treatment: &[bool]) -> Result<()> {
    if ps.n() != treatment.len() {
        return Err(Error::InvalidData(format!(
            "{} propensity scores for {} units",
            ps.n(),
            treatment.len()
        )));
    }
    Ok(())
}

/// Coordinate in which matching distances are measured.
pub fn match_coordinate(ps: &PsDraw, scale: CaliperScale) -> &[f64] {
    match scale {
        CaliperScale::LogitSd => &ps.linear,
        CaliperScale::Propensity => &ps.e,
    }
}

/// Absolute caliper width in the matching coordinate.
pub fn caliper_width(ps: &PsDraw, spec: &ImplementationSpec) -> f64 {
    match spec.caliper_scale {
        CaliperScale::LogitSd => spec.caliper * sample_sd(&ps.linear),
        CaliperScale::Propensity => spec.caliper,
    }
}

/// A treated unit and its matched controls; `None` if it was pruned.
pub type MatchedSet = (usize, Option<Vec<usize>>);

/// Controls sorted by matching coordinate, plus the caliper width.
struct ControlPool<'a> {
    ps: &'a PsDraw,
    coord: &'a [f64],
    /// Control unit indices sorted by (coordinate, e, index).
    order: Vec<usize>,
    sorted: Vec<f64>,
    /// Start of the run of equal coordinates containing each sorted position.
    run_start: Vec<usize>,
    width: f64,
}

impl<'a> ControlPool<'a> {
    fn new(ps: &'a PsDraw, treatment: &[bool], spec: &ImplementationSpec) -> Result<Self> {
        check_len(ps, treatment)?;
        let coord = match_coordinate(ps, spec.caliper_scale);
        let width = caliper_width(ps, spec);
        let mut order: Vec<usize> = (0..treatment.len()).filter(|&i| !treatment[i]).collect();
        if order.len() < spec.ratio {
            return Err(Error::EmptyDesign(format!(
                "{} controls available for a 1-{} match",
                order.len(),
                spec.ratio
            )));
        }
        order.sort_by(|&a, &b| {
            coord[a]
                .total_cmp(&coord[b])
                .then(ps.e[a].total_cmp(&ps.e[b]))
                .then(a.cmp(&b))
        });
        let sorted: Vec<f64> = order.iter().map(|&j| coord[j]).collect();
        let mut run_start = vec![0; sorted.len()];
        for j in 1..sorted.len() {
            run_start[j] = if sorted[j] == sorted[j - 1] { run_start[j - 1] } else { j };
        }
        Ok(Self {
            ps,
            coord,
            order,
            sorted,
            run_start,
            width,
        })
    }

    /// Sorted-position range of controls within the caliper of `c`.
    fn window(&self, c: f64) -> (usize, usize) {
        let w = self.width;
        let lo = self.sorted.partition_point(|&x| x < c && c - x > w);
        let hi = self.sorted.partition_point(|&x| x <= c || x - c <= w);
        (lo, hi)
    }

    /// The `ratio` nearest in-caliper controls of treated unit `i`, ordered by
    /// (distance, e, index); `None` if fewer than `ratio` qualify.
    fn nearest(&self, i: usize, ratio: usize, out: &mut Vec<usize>) -> bool {
        out.clear();
        let c = self.coord[i];
        let (lo, hi) = self.window(c);
        if hi - lo < ratio {
            return false;
        }
        let split = self.sorted.partition_point(|&x| x < c).clamp(lo, hi);
        // left frontier walks runs of equal coordinates downward, ascending
        // index within each run
        let mut left: Option<(usize, usize, usize)> = (split > lo).then(|| {
            let top = split - 1;
            let start = self.run_start[top].max(lo);
            (start, top, start)
        });
        let mut right = split;
        while out.len() < ratio {
            let lcand = left.map(|(_, _, cur)| cur);
            let rcand = (right < hi).then_some(right);
            let take_left = match (lcand, rcand) {
                (Some(l), Some(r)) => self.key(c, l) <= self.key(c, r),
                (Some(_), None) => true,
                (None, Some(_)) => false,
                (None, None) => unreachable!("window holds at least `ratio` controls"),
            };
            if take_left {
                let (start, end, cur) = left.expect("left candidate exists");
                out.push(self.order[cur]);
                left = if cur < end {
                    Some((start, end, cur + 1))
                } else if start > lo {
                    let top = start - 1;
                    let s = self.run_start[top].max(lo);
                    Some((s, top, s))
                } else {
                    None
                };
            } else {
                out.push(self.order[right]);
                right += 1;
            }
        }
        true
    }

    fn key(&self, c: f64, pos: usize) -> (f64, f64, usize) {
        let j = self.order[pos];
        ((self.sorted[pos] - c).abs(), self.ps.e[j], j)
    }
}

/// Accumulates match counts into frequency weights.
fn frequency_weights(
    kind: ImplementationKind,
    treatment: &[bool],
    matches: impl Iterator<Item = (usize, Option<Vec<usize>>)>,
    ratio: usize,
) -> Result<Design> {
    let n = treatment.len();
    let mut w = vec![0.0; n];
    let mut pruned = 0;
    let mut matched_treated = 0;
    for (t, controls) in matches {
        match controls {
            Some(cs) => {
                matched_treated += 1;
                w[t] = 1.0;
                for c in cs {
                    w[c] += 1.0 / ratio as f64;
                }
            }
            None => pruned += 1,
        }
    }
    if matched_treated == 0 {
        return Err(Error::EmptyDesign(format!(
            "all {pruned} treated units were pruned by the caliper"
        )));
    }
    let (mut distinct_controls, mut raw_sum) = (0usize, 0.0);
    for i in 0..n {
        if !treatment[i] && w[i] > 0.0 {
            distinct_controls += 1;
            raw_sum += w[i];
        }
    }
    let scale = distinct_controls as f64 / raw_sum;
    for i in 0..n {
        if !treatment[i] {
            w[i] *= scale;
        }
    }
    Ok(Design {
        kind,
        payload: DesignPayload::Weights(w),
        included: ArmCounts {
            treated: matched_treated,
            control: distinct_controls,
        },
        pruned_treated: pruned,
        provenance: Provenance::default(),
    })
}

/// Nearest-neighbour matching with replacement inside a caliper.
///
/// Treated units are processed in ascending index order. Each takes the
/// `ratio` in-caliper controls closest in matching coordinate (ties: smaller
/// e, then smaller index) or is pruned if fewer than `ratio` qualify.
/// Treated weights are 1; control weights are match counts rescaled so they
/// sum to the number of distinct matched controls.
pub fn nn_match(ps: &PsDraw, treatment: &[bool], spec: &ImplementationSpec) -> Result<Design> {
    let sets = nn_match_sets(ps, treatment, spec)?;
    frequency_weights(ImplementationKind::NnMatch, treatment, sets.into_iter(), spec.ratio)
}

/// Matched sets of [`nn_match`], in ascending treated index.
pub fn nn_match_sets(ps: &PsDraw, treatment: &[bool], spec: &ImplementationSpec) -> Result<Vec<MatchedSet>> {
    spec.validate()?;
    let pool = ControlPool::new(ps, treatment, spec)?;
    let mut buf = Vec::with_capacity(spec.ratio);
    Ok((0..treatment.len())
        .filter(|&i| treatment[i])
        .map(|i| {
            let ok = pool.nearest(i, spec.ratio, &mut buf);
            (i, ok.then(|| buf.clone()))
        })
        .collect())
}

/// Caliper matching with replacement: each treated unit draws `ratio`
/// distinct controls uniformly from its in-caliper candidates.
pub fn caliper_match<R: Rng>(ps: &PsDraw, treatment: &[bool], spec: &ImplementationSpec, rng: &mut R) -> Result<Design> {
    let sets = caliper_match_sets(ps, treatment, spec, rng)?;
    frequency_weights(ImplementationKind::CaliperMatch, treatment, sets.into_iter(), spec.ratio)
}

/// Matched sets of [`caliper_match`], in ascending treated index.
pub fn caliper_match_sets<R: Rng>(
    ps: &PsDraw,
    treatment: &[bool],
    spec: &ImplementationSpec,
    rng: &mut R,
) -> Result<Vec<MatchedSet>> {
    spec.validate()?;
    let pool = ControlPool::new(ps, treatment, spec)?;
    Ok((0..treatment.len())
        .filter(|&i| treatment[i])
        .map(|i| {
            let (lo, hi) = pool.window(pool.coord[i]);
            if hi - lo < spec.ratio {
                return (i, None);
            }
            let picks = sample_indices(rng, hi - lo, spec.ratio)
                .into_iter()
                .map(|p| pool.order[lo + p])
                .collect();
            (i, Some(picks))
        })
        .collect())
}

/// Seeded convenience wrapper around [`caliper_match`].
pub fn caliper_match_seeded(ps: &PsDraw, treatment: &[bool], spec: &ImplementationSpec, seed: u64) -> Result<Design> {
    caliper_match(ps, treatment, spec, &mut rng_from(seed))
}

/// `wᵢ = Tᵢ/eᵢ + (1−Tᵢ)/(1−eᵢ)`.
pub fn ipw_weights(ps: &PsDraw, treatment: &[bool]) -> Result<Design> {
    check_len(ps, treatment)?;
    let w: Vec<f64> = ps
        .e
        .iter()
        .zip(treatment)
        .map(|(&e, &t)| if t { 1.0 / e } else { 1.0 / (1.0 - e) })
        .collect();
    let n_treated = treatment.iter().filter(|&&t| t).count();
    Ok(Design {
        kind: ImplementationKind::Ipw,
        payload: DesignPayload::Weights(w),
        included: ArmCounts {
            treated: n_treated,
            control: treatment.len() - n_treated,
        },
        pruned_treated: 0,
        provenance: Provenance::default(),
    })
}

/// Runs one implementation on one propensity draw. `seed` is only consumed
/// by probabilistic kinds.
pub fn implement(ps: &PsDraw, treatment: &[bool], spec: &ImplementationSpec, seed: u64) -> Result<Design> {
    match spec.kind {
        ImplementationKind::Stratification => stratify(ps, treatment, spec.strata),
        ImplementationKind::NnMatch => nn_match(ps, treatment, spec),
        ImplementationKind::CaliperMatch => caliper_match_seeded(ps, treatment, spec, seed),
        ImplementationKind::Ipw => ipw_weights(ps, treatment),
        ImplementationKind::Dr => ipw_weights(ps, treatment).map(|mut d| {
            d.kind = ImplementationKind::Dr;
            d
        }),
    }
}

/// Seed of the `(k, r)` design stream.
pub fn design_seed(seed: u64, k: usize, r: usize) -> u64 {
    stream_seed(seed, Stream::Design, &[k as u64, r as u64])
}

/// Designs for each draw in order: one per draw for deterministic kinds,
/// `R` per draw for caliper matching, each tagged with its `(k, r)`.
pub fn draw_designs(
    alphas: &[AlphaDraw],
    data: &TreatmentData,
    ps_spec: &PsModelSpec,
    impl_spec: &ImplementationSpec,
    seed: u64,
) -> Result<Vec<Design>> {
    let model = PsModel::new(data, ps_spec)?;
    draw_designs_with(alphas, &model, data.treatment(), impl_spec, seed)
}

pub fn draw_designs_with(
    alphas: &[AlphaDraw],
    model: &PsModel,
    treatment: &[bool],
    impl_spec: &ImplementationSpec,
    seed: u64,
) -> Result<Vec<Design>> {
    impl_spec.validate()?;
    let r_count = impl_spec.effective_redraws();
    let nested: Vec<Vec<Design>> = alphas
        .par_iter()
        .enumerate()
        .map(|(k, alpha)| {
            let ps = model.predict(alpha).map_err(|e| e.at_design(k, 0))?;
            (0..r_count)
                .map(|r| {
                    implement(&ps, treatment, impl_spec, design_seed(seed, k, r))
                        .map(|d| d.with_provenance(k, r))
                        .map_err(|e| e.at_design(k, r))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(nested.into_iter().flatten().collect())
}

/// Debug dump: `unit,arm,value` with the stratum label or weight.
pub fn write_design_csv<W: Write>(design: &Design, treatment: &[bool], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["unit", "arm", "value"])?;
    for (i, &t) in treatment.iter().enumerate() {
        let value = match &design.payload {
            DesignPayload::Strata { labels, .. } => labels[i].to_string(),
            DesignPayload::Weights(ws) => ws[i].to_string(),
        };
        w.write_record([i.to_string(), (t as u8).to_string(), value])?;
    }
    w.flush()?;
    Ok(())
}
