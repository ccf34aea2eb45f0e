// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced anywhere in the engine.
#[non_exhaustive]
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible for an operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An operation produced NaN or infinity.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// Input outside the mathematical domain of an operation.
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// Misuse of a recorded tape.
    #[error("tape error: {0}")]
    Tape(String),

    /// Two evaluations of a supposedly deterministic function disagreed.
    #[error("non-deterministic function: {0}")]
    NonDeterministic(String),

    /// Invalid model configuration.
    #[error("invalid config: {0}")]
    Config(String),

    /// Token id or sequence length out of range for the model.
    #[error("invalid input: {0}")]
    Input(String),

    /// Malformed or incompatible weight file.
    #[error("weight file error: {0}")]
    WeightFormat(String),

    /// Unsupported format version in a file.
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: String, expected: String },

    /// Misaligned batch, target or contrast sequences.
    #[error("alignment error: {0}")]
    Alignment(String),

    /// Generation span outside the generated sequence.
    #[error("invalid span: {0}")]
    Span(String),

    /// Step function registry problems.
    #[error("step function error: {0}")]
    StepFunction(String),

    /// Invalid attribution method or parameter combination.
    #[error("invalid method parameters: {0}")]
    Method(String),

    /// Failure while attributing a particular generation step.
    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    /// Aggregation precondition violated.
    #[error("aggregation error: {0}")]
    Aggregation(String),

    /// Aggregation pipeline failed at a given stage.
    #[error("pipeline stage {stage}: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: Box<Error>,
    },

    /// Malformed attribution document.
    #[error("document parse error at byte {offset}: {detail}")]
    Parse { offset: usize, detail: String },

    /// Dataset or study input problems.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Statistical routine precondition violated.
    #[error("statistics error: {0}")]
    Statistics(String),

    /// Filesystem failure.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_step(step: usize, err: Error) -> Self {
        Error::AtStep {
            step,
            source: Box::new(err),
        }
    }

    /// Short machine-readable category used by the command-line interface.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite { .. } => "non_finite",
            Error::Domain { .. } => "domain",
            Error::Tape(_) => "tape",
            Error::NonDeterministic(_) => "non_deterministic",
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::WeightFormat(_) => "weight_format",
            Error::Version { .. } => "version",
            Error::Alignment(_) => "alignment",
            Error::Span(_) => "span",
            Error::StepFunction(_) => "step_function",
            Error::Method(_) => "method",
            Error::AtStep { source, .. } => source.kind(),
            Error::Aggregation(_) => "aggregation",
            Error::Stage { source, .. } => source.kind(),
            Error::Parse { .. } => "parse",
            Error::Dataset(_) => "dataset",
            Error::Statistics(_) => "statistics",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
