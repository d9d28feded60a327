use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward already ran on this graph")]
    BackwardTwice,
    #[error("empty token sequence")]
    EmptySequence,
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("language component is frozen")]
    Frozen,
    #[error("language component must be frozen before supervisor training")]
    NotFrozen,
    #[error("taps do not match supervisor: expected {expected_layers} layers of width {expected_width}, got {found_layers} of width {found_width}")]
    TapMismatch {
        expected_layers: usize,
        expected_width: usize,
        found_layers: usize,
        found_width: usize,
    },
    #[error("label matrix mismatch: {0}")]
    Labels(String),
    #[error("no data: {0}")]
    Empty(&'static str),
    #[error("character {0:?} is not in the alphabet")]
    UnknownChar(char),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("enumeration of {size} points exceeds the limit of {limit}")]
    EnumerationTooLarge { size: u64, limit: u64 },
    #[error("split construction does not embed the shared function: {0}")]
    Construction(String),
    #[error("invalid instance: {0}")]
    Instance(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
