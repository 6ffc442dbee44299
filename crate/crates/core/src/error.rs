//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: left is {a_rows}x{a_cols}, right is {b_rows}x{b_cols}")]
    DimMismatch {
        op: &'static str,
        a_rows: usize,
        a_cols: usize,
        b_rows: usize,
        b_cols: usize,
    },

    #[error("svd did not converge after {sweeps} sweeps")]
    SvdNonConvergence { sweeps: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated payload while reading {0}")]
    Truncated(&'static str),

    #[error("incompatible checkpoints at {name:?}: {detail}")]
    Incompatible { name: String, detail: String },

    #[error("merge state holds no tasks")]
    EmptyMerge,

    #[error("degenerate merge: every observed task vector has zero norm")]
    DegenerateMerge,

    #[error("unknown task id {0}")]
    UnknownTask(usize),

    #[error("prompt bank has no tasks")]
    EmptyBank,

    #[error("infeasible prompt similarity targets: {0}")]
    InfeasibleGram(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("empty training set")]
    EmptyTrainingSet,

    #[error("non-finite loss at epoch {epoch}, bag {bag} (loss = {loss})")]
    NonFiniteLoss { epoch: usize, bag: usize, loss: f64 },

    #[error("subsample size must be at least 1")]
    ZeroSubsample,

    #[error("empty checkpoint list")]
    EmptyCheckpointList,

    #[error("invalid stream config: {0}")]
    InvalidConfig(String),

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("empty label vector")]
    EmptyLabels,

    #[error("no class present in the reference labels")]
    NoClassesPresent,

    #[error("metric requires at least {needed} tasks, matrix has {got}")]
    TooFewTasks { needed: usize, got: usize },

    #[error("non-finite metric {0}")]
    NonFiniteMetric(String),
}
