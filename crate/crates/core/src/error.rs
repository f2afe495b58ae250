use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // corpus
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("cannot split {0} patient(s): at least 2 are required")]
    SplitInfeasible(usize),
    #[error("description generation failed: {0}")]
    GenerationFailed(String),
    #[error("backend returned an empty description for slice {0}")]
    EmptyDescription(String),
    #[error("unknown slice id in refinement edits: {0}")]
    UnknownSlice(String),
    #[error("manifest parse error at line {line}: {message}")]
    ManifestParseError { line: usize, message: String },
    #[error("duplicate slice id {0}")]
    DuplicateSlice(String),
    #[error("invalid keep-list at line {line}: {message}")]
    KeepListParseError { line: usize, message: String },

    // featurizer
    #[error("invalid window: width must be positive, got {0}")]
    InvalidWindow(f64),
    #[error("invalid resize target {0}")]
    InvalidTarget(usize),
    #[error("image dimensions {got_h}x{got_w} do not match required {want_h}x{want_w}")]
    DimMismatch {
        want_h: usize,
        want_w: usize,
        got_h: usize,
        got_w: usize,
    },
    #[error("feature length mismatch: expected {expected}, found {found}")]
    FeatureDimMismatch { expected: usize, found: usize },
    #[error("duplicate feature record for {0}")]
    DuplicateFeature(String),

    // retriever
    #[error("embedding is degenerate (zero vector before normalization)")]
    DegenerateEmbedding,
    #[error("no valid triplet can be formed: {0}")]
    TripletInfeasible(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },
    #[error("missing feature vector for {0}")]
    MissingFeature(String),
    #[error("index is empty")]
    EmptyIndex,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    // generator
    #[error("no evidence available for generation")]
    NoEvidence,
    #[error("backend unavailable after {attempts} attempt(s): {message}")]
    BackendUnavailable { attempts: usize, message: String },
    #[error("backend rejected request with HTTP status {0}")]
    BackendRejected(u16),
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("environment variable {0} is not set")]
    MissingApiKey(String),

    // orchestrator
    #[error("missing image for {slice_id}: {path}")]
    MissingImage { slice_id: String, path: PathBuf },
    #[error("query {0} is part of the retrieval corpus")]
    QueryInCorpus(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    // eval
    #[error("nothing to evaluate")]
    EmptyEvaluation,
    #[error("train/test leakage: {0}")]
    LeakageError(String),

    // file formats
    #[error("bad file format in {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("png error: {0}")]
    Png(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Wraps the error with the name of the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Variant name of the innermost error, for structured reporting.
    pub fn kind(&self) -> &'static str {
        match self.root() {
            Error::InvalidVolume { .. } => "InvalidVolume",
            Error::SplitInfeasible { .. } => "SplitInfeasible",
            Error::GenerationFailed { .. } => "GenerationFailed",
            Error::EmptyDescription { .. } => "EmptyDescription",
            Error::UnknownSlice { .. } => "UnknownSlice",
            Error::ManifestParseError { .. } => "ManifestParseError",
            Error::DuplicateSlice { .. } => "DuplicateSlice",
            Error::KeepListParseError { .. } => "KeepListParseError",
            Error::InvalidWindow { .. } => "InvalidWindow",
            Error::InvalidTarget { .. } => "InvalidTarget",
            Error::DimMismatch { .. } => "DimMismatch",
            Error::FeatureDimMismatch { .. } => "FeatureDimMismatch",
            Error::DuplicateFeature { .. } => "DuplicateFeature",
            Error::DegenerateEmbedding => "DegenerateEmbedding",
            Error::TripletInfeasible { .. } => "TripletInfeasible",
            Error::EmptyBatch => "EmptyBatch",
            Error::TrainingDiverged { .. } => "TrainingDiverged",
            Error::MissingFeature { .. } => "MissingFeature",
            Error::EmptyIndex => "EmptyIndex",
            Error::InvalidConfig { .. } => "InvalidConfig",
            Error::NoEvidence => "NoEvidence",
            Error::BackendUnavailable { .. } => "BackendUnavailable",
            Error::BackendRejected { .. } => "BackendRejected",
            Error::MalformedResponse { .. } => "MalformedResponse",
            Error::MissingApiKey { .. } => "MissingApiKey",
            Error::MissingImage { .. } => "MissingImage",
            Error::QueryInCorpus { .. } => "QueryInCorpus",
            Error::Stage { .. } => "Stage",
            Error::EmptyEvaluation => "EmptyEvaluation",
            Error::LeakageError { .. } => "LeakageError",
            Error::Format { .. } => "Format",
            Error::Io { .. } => "Io",
            Error::Png { .. } => "Png",
            Error::Json { .. } => "Json",
        }
    }

    /// Innermost error, skipping stage annotations.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}
