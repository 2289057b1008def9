use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Pipeline stage, attached to errors that cross module boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Data,
    PsModel,
    Design,
    Analysis,
    Combine,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::Data => "data",
            Stage::PsModel => "ps_model",
            Stage::Design => "design",
            Stage::Analysis => "analysis",
            Stage::Combine => "combine",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("input file is empty")]
    EmptyFile,

    #[error("missing required column `{0}`")]
    MissingColumn(String),

    #[error("duplicate column `{0}`")]
    DuplicateColumn(String),

    #[error("row {row}, column `{column}`: {message}")]
    Cell {
        row: usize,
        column: String,
        message: String,
    },

    #[error("row {row}: expected {expected} fields, found {found}")]
    RaggedRow {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown covariate `{0}`")]
    UnknownCovariate(String),

    #[error("logistic fit failed: {0}")]
    Separation(String),

    #[error("design matrix is rank deficient: {0}")]
    RankDeficient(String),

    #[error("sampler failure: {0}")]
    Sampler(String),

    #[error("empty design: {0}")]
    EmptyDesign(String),

    #[error("degenerate strata {strata:?}: each stratum needs at least one treated and one control unit")]
    DegenerateStrata { strata: Vec<u32> },

    #[error("zero total weight in the {arm} arm")]
    ZeroArmWeight { arm: &'static str },

    #[error("cannot combine: {0}")]
    Combine(String),

    #[error("design (k={k}, r={r}): {source}")]
    AtDesign {
        k: usize,
        r: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{stage} stage: {source}")]
    AtStage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn at(self, stage: Stage) -> Self {
        match self {
            e @ Error::AtStage { .. } => e,
            e => Error::AtStage {
                stage,
                source: Box::new(e),
            },
        }
    }

    pub fn at_design(self, k: usize, r: usize) -> Self {
        Error::AtDesign {
            k,
            r,
            source: Box::new(self),
        }
    }

    /// Strips stage/design context.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtStage { source, .. } | Error::AtDesign { source, .. } => source.root(),
            e => e,
        }
    }

    /// Stage name if the error carries one.
    pub fn stage(&self) -> Option<Stage> {
        match self {
            Error::AtStage { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: Stage) -> Result<T> {
        self.map_err(|e| e.at(stage))
    }
}
