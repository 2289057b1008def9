//! Observed data, CSV ingestion and the simulation data generator.
//!
//! A [`Dataset`] owns the outcome vector and a [`TreatmentData`] (treatment
//! indicator plus covariates). Design-stage code only ever receives the
//! latter, so outcome information cannot leak into propensity estimation or
//! design construction.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Treatment assignment and covariates: everything the design stage may see.
#[derive(Debug, Clone, PartialEq)]
pub struct TreatmentData {
    treatment: Vec<bool>,
    covariates: DMatrix<f64>,
    names: Vec<String>,
}

impl TreatmentData {
    pub fn new(treatment: Vec<bool>, covariates: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        let n = treatment.len();
        if n < 2 {
            return Err(Error::InvalidData(format!("need at least 2 units, got {n}")));
        }
        if covariates.nrows() != n {
            return Err(Error::InvalidData(format!(
                "covariate matrix has {} rows but treatment has {n}",
                covariates.nrows()
            )));
        }
        if names.len() != covariates.ncols() {
            return Err(Error::InvalidData(format!(
                "{} covariate names for {} columns",
                names.len(),
                covariates.ncols()
            )));
        }
        for (j, name) in names.iter().enumerate() {
            if names[..j].contains(name) {
                return Err(Error::DuplicateColumn(name.clone()));
            }
        }
        if !treatment.iter().any(|&t| t) || treatment.iter().all(|&t| t) {
            return Err(Error::InvalidData(
                "treatment must contain at least one 0 and at least one 1".into(),
            ));
        }
        if let Some(pos) = covariates.iter().position(|v| !v.is_finite()) {
            let (row, col) = (pos % n, pos / n);
            return Err(Error::InvalidData(format!(
                "non-finite covariate at unit {row}, column `{}`",
                names[col]
            )));
        }
        Ok(Self {
            treatment,
            covariates,
            names,
        })
    }

    pub fn n(&self) -> usize {
        self.treatment.len()
    }

    pub fn p(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn treatment(&self) -> &[bool] {
        &self.treatment
    }

    pub fn treated(&self, i: usize) -> bool {
        self.treatment[i]
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|c| c == name)
    }

    pub fn n_treated(&self) -> usize {
        self.treatment.iter().filter(|&&t| t).count()
    }
}

/// Observed `(Y, T, X)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    outcome: Vec<f64>,
    assignment: TreatmentData,
}

impl Dataset {
    pub fn new(outcome: Vec<f64>, assignment: TreatmentData) -> Result<Self> {
        if outcome.len() != assignment.n() {
            return Err(Error::InvalidData(format!(
                "outcome has {} values but there are {} units",
                outcome.len(),
                assignment.n()
            )));
        }
        if let Some(i) = outcome.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("non-finite outcome at unit {i}")));
        }
        Ok(Self {
            outcome,
            assignment,
        })
    }

    /// Builds a dataset from row-major covariates.
    pub fn from_rows(
        outcome: Vec<f64>,
        treatment: Vec<bool>,
        rows: &[Vec<f64>],
        names: Vec<String>,
    ) -> Result<Self> {
        let p = names.len();
        if let Some(bad) = rows.iter().position(|r| r.len() != p) {
            return Err(Error::InvalidData(format!(
                "covariate row {bad} has {} values, expected {p}",
                rows[bad].len()
            )));
        }
        let x = DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]);
        Self::new(outcome, TreatmentData::new(treatment, x, names)?)
    }

    pub fn n(&self) -> usize {
        self.outcome.len()
    }

    pub fn p(&self) -> usize {
        self.assignment.p()
    }

    pub fn outcome(&self) -> &[f64] {
        &self.outcome
    }

    pub fn treatment(&self) -> &[bool] {
        self.assignment.treatment()
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        self.assignment.covariates()
    }

    pub fn names(&self) -> &[String] {
        self.assignment.names()
    }

    /// The outcome-free view handed to the design stage.
    pub fn design_view(&self) -> &TreatmentData {
        &self.assignment
    }

    /// Same units and covariates with a different outcome vector.
    pub fn with_outcome(&self, outcome: Vec<f64>) -> Result<Self> {
        Self::new(outcome, self.assignment.clone())
    }
}

/// Parameters of the simulation data-generating process.
///
/// Covariates are iid standard normal and named by role: `c*` confounders
/// (affect T and Y), `i*` instruments (T only), `g*` prognostic (Y only),
/// `z*` noise. Treatment follows a logistic model with intercept 0 and slope
/// `ps_coef` on confounders and instruments; the outcome is
/// `1 + delta_true·T + Σ 0.1·j·c_j + prognostic_coef·Σ g_j + ε`, `ε ~ N(0, error_sd²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n: usize,
    pub delta_true: f64,
    pub seed: u64,
    pub confounders: usize,
    pub instruments: usize,
    pub prognostic: usize,
    pub noise: usize,
    pub ps_coef: f64,
    pub prognostic_coef: f64,
    pub error_sd: f64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            delta_true: 1.5,
            seed: 0,
            confounders: 5,
            instruments: 5,
            prognostic: 5,
            noise: 5,
            ps_coef: 0.75,
            prognostic_coef: 0.5,
            error_sd: 1.0,
        }
    }
}

/// Column-name prefixes encoding covariate roles in generated data.
pub mod roles {
    pub const CONFOUNDER: &str = "c";
    pub const INSTRUMENT: &str = "i";
    pub const PROGNOSTIC: &str = "g";
    pub const NOISE: &str = "z";
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidConfig(format!("n must be ≥ 2, got {}", self.n)));
        }
        if self.confounders + self.instruments + self.prognostic + self.noise == 0 {
            return Err(Error::InvalidConfig("at least one covariate is required".into()));
        }
        for (name, v) in [
            ("delta_true", self.delta_true),
            ("ps_coef", self.ps_coef),
            ("prognostic_coef", self.prognostic_coef),
            ("error_sd", self.error_sd),
        ] {
            if !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be finite")));
            }
        }
        if self.error_sd < 0.0 {
            return Err(Error::InvalidConfig("error_sd must be ≥ 0".into()));
        }
        Ok(())
    }

    pub fn p(&self) -> usize {
        self.confounders + self.instruments + self.prognostic + self.noise
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.p());
        for (prefix, count) in [
            (roles::CONFOUNDER, self.confounders),
            (roles::INSTRUMENT, self.instruments),
            (roles::PROGNOSTIC, self.prognostic),
            (roles::NOISE, self.noise),
        ] {
            names.extend((1..=count).map(|j| format!("{prefix}{j}")));
        }
        names
    }

    /// True treatment-model slopes, one per generated column.
    pub fn true_alpha(&self) -> Vec<f64> {
        let mut a = vec![self.ps_coef; self.confounders + self.instruments];
        a.resize(self.p(), 0.0);
        a
    }

    /// True outcome-model slopes, one per generated column.
    pub fn true_beta(&self) -> Vec<f64> {
        let mut b: Vec<f64> = (1..=self.confounders).map(|j| 0.1 * j as f64).collect();
        b.resize(self.confounders + self.instruments, 0.0);
        b.resize(self.confounders + self.instruments + self.prognostic, self.prognostic_coef);
        b.resize(self.p(), 0.0);
        b
    }
}

/// Draws one dataset from the simulation DGP. Pure in `config` (including its seed).
///
/// Units are generated in order; for each unit the covariates are drawn
/// first, then the treatment uniform, then the outcome error, all from the
/// dedicated [`Stream::Dgp`] stream.
pub fn generate(config: &DgpConfig) -> Result<Dataset> {
    config.validate()?;
    let (n, p) = (config.n, config.p());
    let alpha = config.true_alpha();
    let beta = config.true_beta();
    let mut rng = stream_rng(config.seed, Stream::Dgp, &[]);

    let mut x = DMatrix::<f64>::zeros(n, p);
    let mut t = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let mut lp = 0.0;
        let mut mu = 1.0;
        for j in 0..p {
            let v: f64 = rng.sample(StandardNormal);
            x[(i, j)] = v;
            lp += alpha[j] * v;
            mu += beta[j] * v;
        }
        let u: f64 = rng.random();
        let treated = u < logistic(lp);
        let eps: f64 = rng.sample(StandardNormal);
        if treated {
            mu += config.delta_true;
        }
        t.push(treated);
        y.push(mu + config.error_sd * eps);
    }
    Dataset::new(y, TreatmentData::new(t, x, config.column_names())?)
}

pub(crate) fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let ez = z.exp();
        ez / (1.0 + ez)
    }
}

/// Reads a dataset from CSV. See [`read_csv`].
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    read_csv(File::open(path)?)
}

/// Parses CSV with a header row naming `y`, `t` and one or more covariates.
///
/// `t` must be the literal `0` or `1`. Every other column is a covariate,
/// kept in file order. Errors report the 1-based file line (the header is
/// line 1) and the column name.
pub fn read_csv<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        None => return Err(Error::EmptyFile),
        Some(h) => h?,
    };
    let header: Vec<String> = header.iter().map(str::to_string).collect();
    if header.iter().all(|h| h.is_empty()) {
        return Err(Error::EmptyFile);
    }
    for (j, h) in header.iter().enumerate() {
        if header[..j].contains(h) {
            return Err(Error::DuplicateColumn(h.clone()));
        }
    }
    let y_col = header
        .iter()
        .position(|h| h == "y")
        .ok_or_else(|| Error::MissingColumn("y".into()))?;
    let t_col = header
        .iter()
        .position(|h| h == "t")
        .ok_or_else(|| Error::MissingColumn("t".into()))?;
    let x_cols: Vec<usize> = (0..header.len()).filter(|&j| j != y_col && j != t_col).collect();
    if x_cols.is_empty() {
        return Err(Error::MissingColumn("<covariate>".into()));
    }

    let mut y = Vec::new();
    let mut t = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, rec) in records.enumerate() {
        let line = idx + 2;
        let rec = rec?;
        if rec.len() == 1 && rec.get(0) == Some("") {
            continue;
        }
        if rec.len() != header.len() {
            return Err(Error::RaggedRow {
                row: line,
                expected: header.len(),
                found: rec.len(),
            });
        }
        let cell = |j: usize| -> Result<f64> {
            let raw = &rec[j];
            let v: f64 = raw.parse().map_err(|_| Error::Cell {
                row: line,
                column: header[j].clone(),
                message: format!("`{raw}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Cell {
                    row: line,
                    column: header[j].clone(),
                    message: format!("`{raw}` is not finite"),
                });
            }
            Ok(v)
        };
        y.push(cell(y_col)?);
        t.push(match &rec[t_col] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Cell {
                    row: line,
                    column: "t".into(),
                    message: format!("treatment must be 0 or 1, found `{other}`"),
                })
            }
        });
        rows.push(x_cols.iter().map(|&j| cell(j)).collect::<Result<_>>()?);
    }
    if y.is_empty() {
        return Err(Error::InvalidData("no data rows".into()));
    }
    let names = x_cols.iter().map(|&j| header[j].clone()).collect();
    Dataset::from_rows(y, t, &rows, names)
}

/// Writes `y,t,<covariates>` using shortest round-trip float formatting, so
/// reading the file back reproduces the dataset exactly.
pub fn write_csv<W: Write>(data: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["y".to_string(), "t".to_string()];
    header.extend(data.names().iter().cloned());
    w.write_record(&header)?;
    let x = data.covariates();
    let mut rec = Vec::with_capacity(header.len());
    for i in 0..data.n() {
        rec.clear();
        rec.push(data.outcome()[i].to_string());
        rec.push(if data.treatment()[i] { "1" } else { "0" }.to_string());
        rec.extend((0..data.p()).map(|j| x[(i, j)].to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_csv(data, File::create(path)?)
}
