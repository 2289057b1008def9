//! `bpsa` command line: `analyze`, `simulate`, `generate`.
//!
//! Every flag can also be set through an environment variable named
//! `BPSA_<FLAG>` (e.g. `BPSA_K`, `BPSA_SEED`). Exit codes: 0 on success,
//! 1 on a runtime or statistical failure, 2 on a usage error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::analysis::{ConditionalEstimate, StrataContrast};
use crate::combine::CombinedInference;
use crate::data::{generate, load_csv, save_csv, write_csv, DgpConfig};
use crate::design::{CaliperScale, ImplementationKind, ImplementationSpec};
use crate::error::{Error, Result, Stage};
use crate::montecarlo::{
    full_grid, run_bpsa, run_psa, run_simulation, write_figure_csv, write_table_csv, AnalysisOptions, Cell,
    DesignKnobs, DrVariance, Method, RunConfig, SimulationConfig, WeightedVariance,
};
use crate::ps_model::{PsModelSpec, SamplerSettings};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "bpsa", version, about = "Two-stage Bayesian propensity score analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Analyze one dataset with BPSA or PSA and write a JSON report.
    Analyze(AnalyzeArgs),
    /// Run the replicated simulation study.
    Simulate(SimulateArgs),
    /// Write one simulated dataset as CSV.
    Generate(GenerateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ImplArg {
    Strat,
    Nn,
    Caliper,
    Ipw,
    Dr,
}

impl From<ImplArg> for ImplementationKind {
    fn from(a: ImplArg) -> Self {
        match a {
            ImplArg::Strat => ImplementationKind::Stratification,
            ImplArg::Nn => ImplementationKind::NnMatch,
            ImplArg::Caliper => ImplementationKind::CaliperMatch,
            ImplArg::Ipw => ImplementationKind::Ipw,
            ImplArg::Dr => ImplementationKind::Dr,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Bpsa,
    Psa,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CaliperScaleArg {
    LogitSd,
    Ps,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ContrastArg {
    Pooled,
    ArmSpecific,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum WeightedVarArg {
    WlsModel,
    TruePs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DrVarArg {
    InfluenceFunction,
    DifferenceOfSums,
}

/// Settings shared by `analyze` and `simulate`.
#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Posterior draws of the PS coefficients.
    #[arg(long = "K", env = "BPSA_K")]
    pub k: Option<usize>,
    /// Draws per design in the analysis stage.
    #[arg(long = "S", env = "BPSA_S", default_value_t = 200)]
    pub s: usize,
    /// Re-draws per PS draw for caliper matching.
    #[arg(long = "R", env = "BPSA_R", default_value_t = 1)]
    pub r: usize,
    /// Number of strata.
    #[arg(long = "Q", env = "BPSA_Q", default_value_t = 5)]
    pub q: usize,
    #[arg(long, env = "BPSA_CALIPER", default_value_t = 0.5)]
    pub caliper: f64,
    #[arg(long, env = "BPSA_CALIPER_SCALE", value_enum, default_value = "logit-sd")]
    pub caliper_scale: CaliperScaleArg,
    #[arg(long, env = "BPSA_LEVEL", default_value_t = 0.95)]
    pub level: f64,
    #[arg(long, env = "BPSA_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; results do not depend on it.
    #[arg(long, env = "BPSA_WORKERS")]
    pub workers: Option<usize>,
    #[arg(long, env = "BPSA_CONTRAST", value_enum, default_value = "pooled")]
    pub contrast: ContrastArg,
    /// Conditional variance for IPW and matching designs.
    #[arg(long, env = "BPSA_WEIGHTED_VAR", value_enum, default_value = "wls-model")]
    pub weighted_var: WeightedVarArg,
    /// Conditional variance for DR designs.
    #[arg(long, env = "BPSA_DR_VAR", value_enum, default_value = "influence-function")]
    pub dr_var: DrVarArg,
    #[arg(long, env = "BPSA_PRIOR_SD", default_value_t = 10.0)]
    pub prior_sd: f64,
    #[arg(long, env = "BPSA_BURN_IN", default_value_t = 2000)]
    pub burn_in: usize,
    #[arg(long, env = "BPSA_THIN", default_value_t = 10)]
    pub thin: usize,
}

impl CommonArgs {
    fn sampler(&self) -> SamplerSettings {
        SamplerSettings {
            prior_sd: self.prior_sd,
            burn_in: self.burn_in,
            thin: self.thin,
            ..SamplerSettings::default()
        }
    }

    fn analysis(&self, keep_draws: bool) -> AnalysisOptions {
        AnalysisOptions {
            s: self.s,
            contrast: match self.contrast {
                ContrastArg::Pooled => StrataContrast::Pooled,
                ContrastArg::ArmSpecific => StrataContrast::ArmSpecific,
            },
            weighted_variance: match self.weighted_var {
                WeightedVarArg::WlsModel => WeightedVariance::WlsModel,
                WeightedVarArg::TruePs => WeightedVariance::TruePs,
            },
            dr_variance: match self.dr_var {
                DrVarArg::InfluenceFunction => DrVariance::InfluenceFunction,
                DrVarArg::DifferenceOfSums => DrVariance::DifferenceOfSums,
            },
            keep_draws,
        }
    }

    fn caliper_scale(&self) -> CaliperScale {
        match self.caliper_scale {
            CaliperScaleArg::LogitSd => CaliperScale::LogitSd,
            CaliperScaleArg::Ps => CaliperScale::Propensity,
        }
    }
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// CSV with columns `y`, `t` and covariates.
    #[arg(long, env = "BPSA_DATA")]
    pub data: PathBuf,
    #[arg(long = "impl", env = "BPSA_IMPL", value_enum)]
    pub implementation: ImplArg,
    #[arg(long, env = "BPSA_METHOD", value_enum, default_value = "bpsa")]
    pub method: MethodArg,
    /// Comma-separated PS-model covariates; all covariates if omitted.
    #[arg(long, env = "BPSA_PS_COVARIATES", value_delimiter = ',')]
    pub ps_covariates: Option<Vec<String>>,
    /// Controls per treated unit for matching.
    #[arg(long, env = "BPSA_RATIO", default_value_t = 1)]
    pub ratio: usize,
    /// Include every per-design estimate in the report.
    #[arg(long, env = "BPSA_PER_DESIGN")]
    pub per_design: bool,
    /// Report path; stdout if omitted.
    #[arg(long, env = "BPSA_OUT")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Comma-separated cells `impl:ps_model[:bpsa|psa]`, e.g. `ipw:confound`.
    #[arg(long, env = "BPSA_CELLS", value_delimiter = ',')]
    pub cells: Vec<String>,
    /// All 24 BPSA cells.
    #[arg(long, env = "BPSA_FULL_BPSA")]
    pub full_bpsa: bool,
    /// All 24 PSA cells.
    #[arg(long, env = "BPSA_FULL_PSA")]
    pub full_psa: bool,
    #[arg(long, env = "BPSA_REPS", default_value_t = 100)]
    pub reps: usize,
    /// Units per simulated dataset.
    #[arg(long, env = "BPSA_N", default_value_t = 1000)]
    pub n: usize,
    /// Output directory for `report.json`, `table.csv` and `figures.csv`;
    /// the table goes to stdout if omitted.
    #[arg(long, env = "BPSA_OUT")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, env = "BPSA_N", default_value_t = 1000)]
    pub n: usize,
    #[arg(long, env = "BPSA_SEED", default_value_t = 0)]
    pub seed: u64,
    /// True treatment effect.
    #[arg(long, env = "BPSA_DELTA", default_value_t = 1.5)]
    pub delta: f64,
    /// CSV path; stdout if omitted.
    #[arg(long, env = "BPSA_OUT")]
    pub out: Option<PathBuf>,
}

/// Effective configuration and results of `analyze`.
#[derive(Debug, Serialize)]
pub struct AnalysisReport {
    pub config: serde_json::Value,
    pub result: serde_json::Value,
    pub diagnostics: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimates: Option<Vec<ConditionalEstimate>>,
    pub timing_secs: f64,
}

fn combined_json(c: &CombinedInference) -> serde_json::Value {
    json!({
        "point": c.mean,
        "interval": [c.interval.0, c.interval.1],
        "level": c.level,
        "between_var": c.between_var,
        "within_var": c.within_var,
        "total_var": c.total_var,
        "prop_du": c.prop_du,
        "k_effective": c.k_effective,
    })
}

fn with_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match workers {
        Some(0) => Err(Error::InvalidConfig("--workers must be ≥ 1".into())),
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("cannot start {w} workers: {e}")))?
            .install(f),
        None => f(),
    }
}

fn write_out(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => fs::write(p, bytes)?,
        None => std::io::stdout().write_all(bytes)?,
    }
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("report serializes");
    s.push(b'\n');
    s
}

pub fn analyze(args: &AnalyzeArgs) -> Result<()> {
    let start = Instant::now();
    let data = load_csv(&args.data).map_err(|e| e.at(Stage::Data))?;
    let ps_spec = match &args.ps_covariates {
        Some(cols) => PsModelSpec::new(cols.iter().map(|c| c.trim().to_string())),
        None => PsModelSpec::all(data.design_view()),
    };
    let c = &args.common;
    let impl_spec = ImplementationSpec {
        kind: args.implementation.into(),
        strata: c.q,
        ratio: args.ratio,
        caliper: c.caliper,
        caliper_scale: c.caliper_scale(),
        redraws: c.r,
    };
    let method = match args.method {
        MethodArg::Bpsa => Method::Bpsa,
        MethodArg::Psa => Method::Psa,
    };
    let config = RunConfig {
        ps_spec,
        impl_spec,
        method,
        k: c.k.unwrap_or(1000),
        seed: c.seed,
        level: c.level,
        sampler: c.sampler(),
        analysis: c.analysis(false),
    };
    let config_json = json!({
        "data": args.data.display().to_string(),
        "n": data.n(),
        "run": config,
    });
    let report = with_pool(c.workers, || match method {
        Method::Bpsa => {
            let r = run_bpsa(&data, &config)?;
            Ok(AnalysisReport {
                config: config_json,
                result: combined_json(&r.combined),
                diagnostics: json!({
                    "acceptance_rate": r.acceptance_rate,
                    "min_ess": r.min_ess,
                    "designs": r.diagnostics,
                }),
                estimates: args.per_design.then_some(r.estimates),
                timing_secs: 0.0,
            })
        }
        Method::Psa => {
            let r = run_psa(&data, &config)?;
            Ok(AnalysisReport {
                config: config_json,
                result: json!({
                    "point": r.point,
                    "interval": [r.interval.0, r.interval.1],
                    "level": r.level,
                    "variance": r.variance,
                }),
                diagnostics: json!({ "designs": r.diagnostics }),
                estimates: None,
                timing_secs: 0.0,
            })
        }
    })?;
    let report = AnalysisReport {
        timing_secs: start.elapsed().as_secs_f64(),
        ..report
    };
    write_out(args.out.as_deref(), &to_json(&report))
}

pub fn simulate(args: &SimulateArgs) -> Result<()> {
    let mut cells: Vec<Cell> = Vec::new();
    if args.full_bpsa {
        cells.extend(full_grid(Method::Bpsa));
    }
    if args.full_psa {
        cells.extend(full_grid(Method::Psa));
    }
    for s in &args.cells {
        let c = Cell::parse(s.trim())?;
        if !cells.contains(&c) {
            cells.push(c);
        }
    }
    if cells.is_empty() {
        return Err(Error::InvalidConfig("select cells with --cells, --full-bpsa or --full-psa".into()));
    }
    let c = &args.common;
    let config = SimulationConfig {
        reps: args.reps,
        seed: c.seed,
        dgp: DgpConfig {
            n: args.n,
            ..DgpConfig::default()
        },
        k: c.k.unwrap_or(500),
        level: c.level,
        sampler: c.sampler(),
        analysis: c.analysis(false),
        design: DesignKnobs {
            strata: c.q,
            caliper: c.caliper,
            caliper_scale: c.caliper_scale(),
            redraws: c.r,
        },
        cells,
    };
    let report = with_pool(c.workers, || run_simulation(&config))?;
    let mut table = Vec::new();
    write_table_csv(&report, &mut table)?;
    match &args.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("report.json"), to_json(&report))?;
            fs::write(dir.join("table.csv"), &table)?;
            let mut fig = Vec::new();
            write_figure_csv(&report, &mut fig)?;
            fs::write(dir.join("figures.csv"), fig)?;
        }
        None => std::io::stdout().write_all(&table)?,
    }
    Ok(())
}

pub fn generate_cmd(args: &GenerateArgs) -> Result<()> {
    let data = generate(&DgpConfig {
        n: args.n,
        seed: args.seed,
        delta_true: args.delta,
        ..DgpConfig::default()
    })?;
    match &args.out {
        Some(p) => save_csv(&data, p),
        None => write_csv(&data, std::io::stdout().lock()),
    }
}

fn is_usage(e: &Error) -> bool {
    matches!(e.root(), Error::InvalidConfig(_) | Error::UnknownCovariate(_))
}

/// Machine-readable error object written to stderr.
pub fn error_json(e: &Error) -> serde_json::Value {
    json!({
        "error": {
            "stage": e.stage().map(|s| s.to_string()),
            "kind": if is_usage(e) { "usage" } else { "runtime" },
            "message": e.to_string(),
        }
    })
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let res = match &cli.command {
        Command::Analyze(a) => analyze(a),
        Command::Simulate(a) => simulate(a),
        Command::Generate(a) => generate_cmd(a),
    };
    match res {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            if is_usage(&e) {
                EXIT_USAGE
            } else {
                EXIT_FAILURE
            }
        }
    }
}
