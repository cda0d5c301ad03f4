use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input too short: {samples} samples, need at least {needed}")]
    InputTooShort { samples: usize, needed: usize },

    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("zero window sum at sample {0}; hop/window combination cannot be inverted")]
    ZeroWindowSum(usize),

    #[error("silent reference: spectrogram norm is zero")]
    SilentReference,

    #[error("silent carrier cannot host watermark")]
    SilentCarrier,

    #[error("positive watermark violates phase constraint (W[{index}] = {value})")]
    PositiveWatermark { index: usize, value: f64 },

    #[error(
        "carrier too short for one repetition: {frames} frames available, {needed} needed{}",
        .min_seconds.map(|s| format!(" (minimum duration {s:.3} s)")).unwrap_or_default()
    )]
    CarrierTooShort {
        frames: usize,
        needed: usize,
        min_seconds: Option<f64>,
    },

    #[error("symbol id {id} out of range for alphabet of {num_symbols}")]
    SymbolOutOfRange { id: usize, num_symbols: usize },

    #[error("straight-through requires shape preservation: {before:?} -> {after:?}")]
    StraightThroughShape { before: Vec<usize>, after: Vec<usize> },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("attack is evaluation-only: {0}")]
    EvaluationOnlyAttack(String),

    #[error("invalid attack spec `{spec}`: {reason}")]
    AttackSpec { spec: String, reason: String },

    #[error("codec executable `{0}` not found")]
    CodecMissing(String),

    #[error("codec command `{command}` failed: {reason}")]
    CodecFailed { command: String, reason: String },

    #[error("invalid payload `{input}`: {reason}")]
    Payload { input: String, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("not a checkpoint: {0}")]
    NotACheckpoint(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("truncated checkpoint: {0}")]
    TruncatedCheckpoint(String),

    #[error("non-finite loss at step {step}: {dump}")]
    NonFiniteLoss { step: u64, dump: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("cannot read `{path}`: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
