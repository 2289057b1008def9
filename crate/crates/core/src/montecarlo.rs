//! BPSA and PSA pipelines, and the replicated simulation study.
//!
//! Seeds: a run with master seed `s` uses `s` for the sampler, design and
//! analysis streams (distinct stream domains keep them independent). In the
//! simulation, replicate `i` gets `stream_seed(s, Replicate, [i])`, from
//! which the dataset, each PS model's chain and each cell's designs derive
//! their own seeds through fixed preset ids. A cell's results therefore do
//! not depend on which other cells run, or on the worker count.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    analysis_seed, asymptotic_conditional, ipw_point, ipw_sandwich_var, ipw_var_trueps, strat_conditional,
    wls_model_var, ConditionalEstimate, DrOutcomeModel, StratOutcomePosterior, StrataContrast,
};
use crate::combine::{combine, normal_interval, CombinedInference};
use crate::data::{generate, roles, Dataset, DgpConfig};
use crate::design::{
    draw_designs_with, implement, design_seed, CaliperScale, Design, DesignPayload, ImplementationKind,
    ImplementationSpec,
};
use crate::error::{Error, Result, Stage, StageExt};
use crate::linalg::{mean, sample_var};
use crate::ps_model::{AlphaDraw, MleFit, PsModel, PsModelSpec, SamplerSettings};
use crate::rng::{derive, stream_seed, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Bpsa,
    Psa,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Bpsa => "BPSA",
            Method::Psa => "PSA",
        }
    }
}

/// Conditional variance for IPW and frequency-weight matching designs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightedVariance {
    /// Model-based WLS variance of β̂₁ in `Y ~ 1 + T`.
    #[default]
    WlsModel,
    /// True-propensity display `(1/n²)Σν[…]`.
    TruePs,
}

/// Conditional variance for DR designs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DrVariance {
    #[default]
    InfluenceFunction,
    /// Difference-of-sums display, floored at 1e-12.
    DifferenceOfSums,
}

/// Knobs of the analysis stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    /// Draws `S` per design.
    pub s: usize,
    pub contrast: StrataContrast,
    pub weighted_variance: WeightedVariance,
    pub dr_variance: DrVariance,
    /// Keep the `S` draws of each conditional estimate.
    pub keep_draws: bool,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            s: 200,
            contrast: StrataContrast::default(),
            weighted_variance: WeightedVariance::default(),
            dr_variance: DrVariance::default(),
            keep_draws: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub ps_spec: PsModelSpec,
    /// `R` lives in `impl_spec.redraws`.
    pub impl_spec: ImplementationSpec,
    pub method: Method,
    pub k: usize,
    pub seed: u64,
    pub level: f64,
    pub sampler: SamplerSettings,
    pub analysis: AnalysisOptions,
}

impl RunConfig {
    pub fn new(ps_spec: PsModelSpec, impl_spec: ImplementationSpec, method: Method) -> Self {
        Self {
            ps_spec,
            impl_spec,
            method,
            k: 1000,
            seed: 0,
            level: 0.95,
            sampler: SamplerSettings::default(),
            analysis: AnalysisOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.impl_spec.validate()?;
        if self.method == Method::Bpsa && self.k < 2 {
            return Err(Error::InvalidConfig(format!("K must be ≥ 2, got {}", self.k)));
        }
        if self.analysis.s < 1 {
            return Err(Error::InvalidConfig("S must be ≥ 1".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidConfig(format!("level must be in (0, 1), got {}", self.level)));
        }
        Ok(())
    }
}

/// Design-stage and analysis-stage diagnostics accumulated over designs.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DesignDiagnostics {
    pub designs: usize,
    pub mean_included_treated: f64,
    pub mean_included_control: f64,
    pub mean_pruned_treated: f64,
    /// Designs whose DR variance was floored.
    pub dr_floored: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct BpsaResult {
    pub combined: CombinedInference,
    pub acceptance_rate: f64,
    pub min_ess: f64,
    pub diagnostics: DesignDiagnostics,
    pub estimates: Vec<ConditionalEstimate>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PsaResult {
    pub point: f64,
    pub variance: f64,
    pub interval: (f64, f64),
    pub level: f64,
    pub diagnostics: DesignDiagnostics,
}

/// Outcome models for DR, fit on the PS-model covariates, when the
/// implementation needs them.
fn dr_model_for(data: &Dataset, spec: &ImplementationSpec, ps_spec: &PsModelSpec) -> Result<Option<DrOutcomeModel>> {
    if spec.kind == ImplementationKind::Dr {
        DrOutcomeModel::fit(data, ps_spec).map(Some)
    } else {
        Ok(None)
    }
}

fn dr_variance(dr: &DrOutcomeModel, data: &Dataset, w: &[f64], rule: DrVariance) -> Result<(f64, bool)> {
    match rule {
        DrVariance::InfluenceFunction => Ok((dr.influence_variance(data, w)?, false)),
        DrVariance::DifferenceOfSums => {
            let v = dr.projection_variance(data, w)?;
            Ok((v.value, v.floored))
        }
    }
}

/// `(Q̂(ν), V̂(ν), floored)` for a weight design.
fn weighted_point_var(
    data: &Dataset,
    design: &Design,
    w: &[f64],
    dr: Option<&DrOutcomeModel>,
    opts: &AnalysisOptions,
) -> Result<(f64, f64, bool)> {
    if design.kind == ImplementationKind::Dr {
        let dr = dr.ok_or_else(|| Error::InvalidConfig("DR design without outcome model".into()))?;
        let (v, floored) = dr_variance(dr, data, w, opts.dr_variance)?;
        return Ok((dr.point(data, w)?, v, floored));
    }
    let v = match opts.weighted_variance {
        WeightedVariance::WlsModel => wls_model_var(data, w)?,
        WeightedVariance::TruePs => ipw_var_trueps(data, w)?,
    };
    Ok((ipw_point(data, w)?, v, false))
}

/// Conditional estimate for one design.
pub fn conditional_estimate(
    data: &Dataset,
    design: &Design,
    dr: Option<&DrOutcomeModel>,
    opts: &AnalysisOptions,
    seed: u64,
) -> Result<(ConditionalEstimate, bool)> {
    let p = design.provenance;
    let aseed = analysis_seed(seed, p.k, p.r);
    let (mut est, floored) = match &design.payload {
        DesignPayload::Strata { .. } => (strat_conditional(data, design, opts.s, aseed, opts.contrast)?, false),
        DesignPayload::Weights(w) => {
            let (q, v, floored) = weighted_point_var(data, design, w, dr, opts)?;
            (asymptotic_conditional(q, v, opts.s, aseed)?, floored)
        }
    };
    est.provenance = p;
    if !opts.keep_draws {
        est.draws = None;
    }
    Ok((est, floored))
}

fn diagnostics(designs: &[Design], floored: usize) -> DesignDiagnostics {
    let n = designs.len().max(1) as f64;
    DesignDiagnostics {
        designs: designs.len(),
        mean_included_treated: designs.iter().map(|d| d.included.treated as f64).sum::<f64>() / n,
        mean_included_control: designs.iter().map(|d| d.included.control as f64).sum::<f64>() / n,
        mean_pruned_treated: designs.iter().map(|d| d.pruned_treated as f64).sum::<f64>() / n,
        dr_floored: floored,
    }
}

/// BPSA downstream of the posterior: one design per draw and redraw, then
/// conditional estimates pooled by the combining rules.
pub fn bpsa_from_draws(
    data: &Dataset,
    model: &PsModel,
    draws: &[AlphaDraw],
    dr: Option<&DrOutcomeModel>,
    impl_spec: &ImplementationSpec,
    opts: &AnalysisOptions,
    seed: u64,
    level: f64,
) -> Result<(CombinedInference, Vec<ConditionalEstimate>, DesignDiagnostics)> {
    let designs = draw_designs_with(draws, model, data.treatment(), impl_spec, seed).stage(Stage::Design)?;
    let analyzed: Vec<(ConditionalEstimate, bool)> = designs
        .par_iter()
        .map(|d| {
            conditional_estimate(data, d, dr, opts, seed).map_err(|e| e.at_design(d.provenance.k, d.provenance.r))
        })
        .collect::<Result<_>>()
        .stage(Stage::Analysis)?;
    let floored = analyzed.iter().filter(|a| a.1).count();
    let estimates: Vec<ConditionalEstimate> = analyzed.into_iter().map(|a| a.0).collect();
    let combined = combine(&estimates, level).stage(Stage::Combine)?;
    Ok((combined, estimates, diagnostics(&designs, floored)))
}

/// Full two-stage BPSA on one dataset.
pub fn run_bpsa(data: &Dataset, config: &RunConfig) -> Result<BpsaResult> {
    config.validate()?;
    let model = PsModel::new(data.design_view(), &config.ps_spec).stage(Stage::PsModel)?;
    let post = model
        .sample_posterior(config.k, config.seed, &config.sampler)
        .stage(Stage::PsModel)?;
    let dr = dr_model_for(data, &config.impl_spec, &config.ps_spec).stage(Stage::Analysis)?;
    let (combined, estimates, diagnostics) = bpsa_from_draws(
        data,
        &model,
        &post.draws,
        dr.as_ref(),
        &config.impl_spec,
        &config.analysis,
        config.seed,
        config.level,
    )?;
    Ok(BpsaResult {
        combined,
        acceptance_rate: post.acceptance_rate,
        min_ess: post.min_ess,
        diagnostics,
        estimates,
    })
}

/// Conventional PSA at the MLE propensity score.
pub fn psa_from_mle(
    data: &Dataset,
    model: &PsModel,
    mle: &MleFit,
    dr: Option<&DrOutcomeModel>,
    impl_spec: &ImplementationSpec,
    opts: &AnalysisOptions,
    seed: u64,
    level: f64,
) -> Result<PsaResult> {
    let ps = model.predict(&mle.alpha).stage(Stage::PsModel)?;
    let design = implement(&ps, data.treatment(), impl_spec, design_seed(seed, 0, 0)).stage(Stage::Design)?;
    let mut floored = false;
    let (point, variance) = match &design.payload {
        DesignPayload::Strata { labels, q, .. } => {
            let post = StratOutcomePosterior::fit(data, labels, *q, opts.contrast).stage(Stage::Analysis)?;
            (post.point(), post.ols_variance())
        }
        DesignPayload::Weights(w) if design.kind == ImplementationKind::Dr => {
            let dr = dr.ok_or_else(|| Error::InvalidConfig("DR design without outcome model".into()))?;
            let (v, f) = dr_variance(dr, data, w, opts.dr_variance).stage(Stage::Analysis)?;
            floored = f;
            (dr.point(data, w).stage(Stage::Analysis)?, v)
        }
        DesignPayload::Weights(w) => (
            ipw_point(data, w).stage(Stage::Analysis)?,
            ipw_sandwich_var(data, w).stage(Stage::Analysis)?,
        ),
    };
    Ok(PsaResult {
        point,
        variance,
        interval: normal_interval(point, variance, level)?,
        level,
        diagnostics: diagnostics(std::slice::from_ref(&design), floored as usize),
    })
}

pub fn run_psa(data: &Dataset, config: &RunConfig) -> Result<PsaResult> {
    config.validate()?;
    let model = PsModel::new(data.design_view(), &config.ps_spec).stage(Stage::PsModel)?;
    let mle = model.fit_mle().stage(Stage::PsModel)?;
    let dr = dr_model_for(data, &config.impl_spec, &config.ps_spec).stage(Stage::Analysis)?;
    psa_from_mle(
        data,
        &model,
        &mle,
        dr.as_ref(),
        &config.impl_spec,
        &config.analysis,
        config.seed,
        config.level,
    )
}

/// The four PS-model specifications, by covariate role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsPreset {
    Confound,
    Instru,
    InstruProg,
    InstruProgNoise,
}

impl PsPreset {
    pub const ALL: [PsPreset; 4] = [
        PsPreset::Confound,
        PsPreset::Instru,
        PsPreset::InstruProg,
        PsPreset::InstruProgNoise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PsPreset::Confound => "confound",
            PsPreset::Instru => "instru",
            PsPreset::InstruProg => "instru_prog",
            PsPreset::InstruProgNoise => "instru_prog_noise",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }

    pub fn prefixes(self) -> &'static [&'static str] {
        use roles::*;
        match self {
            PsPreset::Confound => &[CONFOUNDER],
            PsPreset::Instru => &[CONFOUNDER, INSTRUMENT],
            PsPreset::InstruProg => &[CONFOUNDER, INSTRUMENT, PROGNOSTIC],
            PsPreset::InstruProgNoise => &[CONFOUNDER, INSTRUMENT, PROGNOSTIC, NOISE],
        }
    }

    fn id(self) -> u64 {
        self as u64
    }
}

/// The six implementations of the simulation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImplPreset {
    Stratification,
    Nn,
    Caliper1,
    Caliper5,
    Ipw,
    Dr,
}

impl ImplPreset {
    pub const ALL: [ImplPreset; 6] = [
        ImplPreset::Caliper1,
        ImplPreset::Caliper5,
        ImplPreset::Dr,
        ImplPreset::Ipw,
        ImplPreset::Nn,
        ImplPreset::Stratification,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ImplPreset::Stratification => "strat",
            ImplPreset::Nn => "nn",
            ImplPreset::Caliper1 => "caliper1",
            ImplPreset::Caliper5 => "caliper5",
            ImplPreset::Ipw => "ipw",
            ImplPreset::Dr => "dr",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "caliper" => Some(ImplPreset::Caliper1),
            "stratification" => Some(ImplPreset::Stratification),
            _ => Self::ALL.into_iter().find(|p| p.name() == s),
        }
    }

    pub fn spec(self, knobs: &DesignKnobs) -> ImplementationSpec {
        let mut s = match self {
            ImplPreset::Stratification => ImplementationSpec::stratification(knobs.strata),
            ImplPreset::Nn => ImplementationSpec::nn(1, knobs.caliper),
            ImplPreset::Caliper1 => ImplementationSpec::caliper(1, knobs.caliper, knobs.redraws),
            ImplPreset::Caliper5 => ImplementationSpec::caliper(5, knobs.caliper, knobs.redraws),
            ImplPreset::Ipw => ImplementationSpec::ipw(),
            ImplPreset::Dr => ImplementationSpec::dr(),
        };
        s.caliper_scale = knobs.caliper_scale;
        s
    }

    fn id(self) -> u64 {
        self as u64
    }
}

/// Implementation settings shared by every cell of a simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignKnobs {
    pub strata: usize,
    pub caliper: f64,
    pub caliper_scale: CaliperScale,
    pub redraws: usize,
}

impl Default for DesignKnobs {
    fn default() -> Self {
        Self {
            strata: 5,
            caliper: 0.5,
            caliper_scale: CaliperScale::LogitSd,
            redraws: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub ps_model: PsPreset,
    pub implementation: ImplPreset,
    pub method: Method,
}

impl Cell {
    pub fn new(implementation: ImplPreset, ps_model: PsPreset, method: Method) -> Self {
        Self {
            ps_model,
            implementation,
            method,
        }
    }

    /// `impl:ps_model[:method]`, e.g. `ipw:confound` or `dr:confound:psa`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::InvalidConfig(format!("cannot parse cell `{s}`; expected impl:ps_model[:bpsa|psa]"));
        if !(2..=3).contains(&parts.len()) {
            return Err(bad());
        }
        let implementation = ImplPreset::parse(parts[0]).ok_or_else(bad)?;
        let ps_model = PsPreset::parse(parts[1]).ok_or_else(bad)?;
        let method = match parts.get(2).copied() {
            None | Some("bpsa") => Method::Bpsa,
            Some("psa") => Method::Psa,
            _ => return Err(bad()),
        };
        Ok(Self::new(implementation, ps_model, method))
    }

    pub fn label(&self, knobs: &DesignKnobs) -> String {
        format!(
            "{}/{}/{}",
            self.implementation.spec(knobs).label(),
            self.ps_model.name(),
            self.method.name()
        )
    }
}

/// All 24 implementation × PS-model cells for one method.
pub fn full_grid(method: Method) -> Vec<Cell> {
    ImplPreset::ALL
        .iter()
        .flat_map(|&i| PsPreset::ALL.iter().map(move |&p| Cell::new(i, p, method)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub reps: usize,
    pub seed: u64,
    /// `seed` is ignored; each replicate derives its own.
    pub dgp: DgpConfig,
    pub k: usize,
    pub level: f64,
    pub sampler: SamplerSettings,
    pub analysis: AnalysisOptions,
    pub design: DesignKnobs,
    pub cells: Vec<Cell>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            reps: 100,
            seed: 0,
            dgp: DgpConfig::default(),
            k: 500,
            level: 0.95,
            sampler: SamplerSettings::default(),
            analysis: AnalysisOptions::default(),
            design: DesignKnobs::default(),
            cells: full_grid(Method::Bpsa),
        }
    }
}

/// What one replicate contributes to one cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub point: f64,
    pub total_var: f64,
    pub between_var: Option<f64>,
    pub within_var: Option<f64>,
    pub prop_du: Option<f64>,
    pub covered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub implementation: String,
    pub ps_model: String,
    pub method: String,
    pub replicates: usize,
    pub failures: usize,
    pub empirical_var: f64,
    pub avg_total_var: f64,
    pub avg_between_var: Option<f64>,
    pub avg_within_var: Option<f64>,
    pub bias: f64,
    pub avg_prop_du: Option<f64>,
    pub coverage: f64,
    pub mse: f64,
    /// Distinct failure messages with their counts.
    pub failure_reasons: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationReport {
    pub config: SimulationConfig,
    pub cells: Vec<CellSummary>,
    pub runtime_secs: f64,
    #[serde(skip)]
    pub records: Vec<Vec<ReplicateRecord>>,
}

impl SimulationReport {
    pub fn cell(&self, implementation: ImplPreset, ps_model: PsPreset, method: Method) -> Option<&CellSummary> {
        let want = Cell::new(implementation, ps_model, method);
        self.config
            .cells
            .iter()
            .position(|c| *c == want)
            .map(|i| &self.cells[i])
    }
}

fn replicate_seed(seed: u64, rep: usize) -> u64 {
    stream_seed(seed, Stream::Replicate, &[rep as u64])
}

type CellOutcome = std::result::Result<ReplicateRecord, String>;

/// Runs every cell on replicate `rep`.
fn run_replicate(config: &SimulationConfig, rep: usize) -> Vec<CellOutcome> {
    let rseed = replicate_seed(config.seed, rep);
    let dgp = DgpConfig {
        seed: rseed,
        ..config.dgp.clone()
    };
    let truth = dgp.delta_true;
    let data = match generate(&dgp) {
        Ok(d) => d,
        Err(e) => return vec![Err(e.at(Stage::Data).to_string()); config.cells.len()],
    };

    // PS-model fits shared by the cells of this replicate.
    struct Fitted {
        model: PsModel,
        mle: MleFit,
        draws: Option<std::result::Result<Vec<AlphaDraw>, String>>,
        dr: Option<std::result::Result<DrOutcomeModel, String>>,
    }
    let mut fits: BTreeMap<PsPreset, std::result::Result<Fitted, String>> = BTreeMap::new();
    for preset in PsPreset::ALL {
        let cells: Vec<&Cell> = config.cells.iter().filter(|c| c.ps_model == preset).collect();
        if cells.is_empty() {
            continue;
        }
        let spec = PsModelSpec::by_prefixes(data.design_view(), preset.prefixes());
        let fitted = PsModel::new(data.design_view(), &spec)
            .and_then(|model| model.fit_mle().map(|mle| (model, mle)))
            .map(|(model, mle)| {
                let draws = cells.iter().any(|c| c.method == Method::Bpsa).then(|| {
                    let sseed = derive(rseed, &[preset.id()]);
                    model
                        .sample_from(&mle, config.k, sseed, &config.sampler)
                        .map(|p| p.draws)
                        .map_err(|e| e.at(Stage::PsModel).to_string())
                });
                let dr = cells
                    .iter()
                    .any(|c| c.implementation == ImplPreset::Dr)
                    .then(|| DrOutcomeModel::fit(&data, &spec).map_err(|e| e.at(Stage::Analysis).to_string()));
                Fitted { model, mle, draws, dr }
            })
            .map_err(|e| e.at(Stage::PsModel).to_string());
        fits.insert(preset, fitted);
    }

    config
        .cells
        .iter()
        .map(|cell| {
            let f = fits[&cell.ps_model].as_ref().map_err(Clone::clone)?;
            let spec = cell.implementation.spec(&config.design);
            let cseed = derive(rseed, &[cell.ps_model.id(), cell.implementation.id()]);
            let dr = match &f.dr {
                Some(r) if cell.implementation == ImplPreset::Dr => Some(r.as_ref().map_err(Clone::clone)?),
                _ => None,
            };
            match cell.method {
                Method::Bpsa => {
                    let draws = f.draws.as_ref().expect("draws sampled for BPSA cells");
                    let draws = draws.as_ref().map_err(Clone::clone)?;
                    let (c, _, _) =
                        bpsa_from_draws(&data, &f.model, draws, dr, &spec, &config.analysis, cseed, config.level)
                            .map_err(|e| e.to_string())?;
                    Ok(ReplicateRecord {
                        replicate: rep,
                        point: c.mean,
                        total_var: c.total_var,
                        between_var: Some(c.between_var),
                        within_var: Some(c.within_var),
                        prop_du: Some(c.prop_du),
                        covered: c.covers(truth),
                    })
                }
                Method::Psa => {
                    let r = psa_from_mle(&data, &f.model, &f.mle, dr, &spec, &config.analysis, cseed, config.level)
                        .map_err(|e| e.to_string())?;
                    Ok(ReplicateRecord {
                        replicate: rep,
                        point: r.point,
                        total_var: r.variance,
                        between_var: None,
                        within_var: None,
                        prop_du: None,
                        covered: r.interval.0 <= truth && truth <= r.interval.1,
                    })
                }
            }
        })
        .collect()
}

fn avg_opt(rs: &[ReplicateRecord], f: impl Fn(&ReplicateRecord) -> Option<f64>) -> Option<f64> {
    let v: Option<Vec<f64>> = rs.iter().map(f).collect();
    v.filter(|v| !v.is_empty()).map(|v| mean(&v))
}

/// Aggregates of one cell's successful replicates.
pub fn summarize(
    label: (&str, &str, &str),
    records: &[ReplicateRecord],
    failures: BTreeMap<String, usize>,
    truth: f64,
) -> CellSummary {
    let points: Vec<f64> = records.iter().map(|r| r.point).collect();
    let m = records.len() as f64;
    let nan_if_empty = |v: f64| if records.is_empty() { f64::NAN } else { v };
    CellSummary {
        implementation: label.0.into(),
        ps_model: label.1.into(),
        method: label.2.into(),
        replicates: records.len(),
        failures: failures.values().sum(),
        empirical_var: if records.len() >= 2 { sample_var(&points) } else { f64::NAN },
        avg_total_var: nan_if_empty(records.iter().map(|r| r.total_var).sum::<f64>() / m),
        avg_between_var: avg_opt(records, |r| r.between_var),
        avg_within_var: avg_opt(records, |r| r.within_var),
        bias: nan_if_empty(mean(&points) - truth),
        avg_prop_du: avg_opt(records, |r| r.prop_du),
        coverage: nan_if_empty(records.iter().filter(|r| r.covered).count() as f64 / m),
        mse: nan_if_empty(points.iter().map(|p| (p - truth).powi(2)).sum::<f64>() / m),
        failure_reasons: failures,
    }
}

/// Runs the replicated study. Replicates run in parallel on the current
/// rayon pool; results are collected in replicate order.
pub fn run_simulation(config: &SimulationConfig) -> Result<SimulationReport> {
    if config.reps < 1 {
        return Err(Error::InvalidConfig("reps must be ≥ 1".into()));
    }
    if config.cells.is_empty() {
        return Err(Error::InvalidConfig("no cells selected".into()));
    }
    if config.cells.iter().any(|c| c.method == Method::Bpsa) && config.k < 2 {
        return Err(Error::InvalidConfig(format!("K must be ≥ 2, got {}", config.k)));
    }
    if config.analysis.s < 1 {
        return Err(Error::InvalidConfig("S must be ≥ 1".into()));
    }
    crate::combine::z_quantile(config.level)?;
    config.dgp.validate()?;
    for c in &config.cells {
        c.implementation.spec(&config.design).validate()?;
    }
    let start = Instant::now();
    let per_rep: Vec<Vec<CellOutcome>> = (0..config.reps)
        .into_par_iter()
        .map(|rep| run_replicate(config, rep))
        .collect();

    let mut cells = Vec::with_capacity(config.cells.len());
    let mut records = Vec::with_capacity(config.cells.len());
    for (j, cell) in config.cells.iter().enumerate() {
        let mut ok = Vec::new();
        let mut failures: BTreeMap<String, usize> = BTreeMap::new();
        for outcomes in &per_rep {
            match &outcomes[j] {
                Ok(r) => ok.push(*r),
                Err(msg) => *failures.entry(msg.clone()).or_default() += 1,
            }
        }
        let label = cell.implementation.spec(&config.design).label();
        cells.push(summarize(
            (&label, cell.ps_model.name(), cell.method.name()),
            &ok,
            failures,
            config.dgp.delta_true,
        ));
        records.push(ok);
    }
    Ok(SimulationReport {
        config: config.clone(),
        cells,
        runtime_secs: start.elapsed().as_secs_f64(),
        records,
    })
}

/// Column headers of the results table.
pub const TABLE_COLUMNS: [&str; 13] = [
    "Implementation",
    "PS model",
    "Method",
    "Empirical var",
    "Avg total var",
    "Avg between var",
    "Avg within var",
    "Bias",
    "PROP_DU",
    "Coverage",
    "MSE",
    "Replicates",
    "Failures",
];

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_table_csv<W: Write>(report: &SimulationReport, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(TABLE_COLUMNS)?;
    for c in &report.cells {
        w.write_record([
            c.implementation.clone(),
            c.ps_model.clone(),
            c.method.clone(),
            c.empirical_var.to_string(),
            c.avg_total_var.to_string(),
            fmt_opt(c.avg_between_var),
            fmt_opt(c.avg_within_var),
            c.bias.to_string(),
            fmt_opt(c.avg_prop_du),
            c.coverage.to_string(),
            c.mse.to_string(),
            c.replicates.to_string(),
            c.failures.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Plot-ready rows: one per BPSA cell, `x = prop_du` against log between
/// variance, log within variance and bias.
pub fn write_figure_csv<W: Write>(report: &SimulationReport, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["implementation", "ps_model", "prop_du", "log_between_var", "log_within_var", "bias"])?;
    for c in report.cells.iter().filter(|c| c.avg_prop_du.is_some()) {
        w.write_record([
            c.implementation.clone(),
            c.ps_model.clone(),
            fmt_opt(c.avg_prop_du),
            fmt_opt(c.avg_between_var.map(f64::ln)),
            fmt_opt(c.avg_within_var.map(f64::ln)),
            c.bias.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
