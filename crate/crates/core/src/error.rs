use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("rotary embedding needs an even head dimension, got {0}")]
    OddHeadDim(usize),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("variable {0} does not require grad")]
    DetachedParam(usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("prefill requires an empty cache, found {0} filled positions")]
    CacheNotEmpty(usize),
    #[error("decode position {position} does not match cache length {filled}")]
    PositionMismatch { position: usize, filled: usize },
    #[error("cache geometry mismatch: model {model:?}, cache {cache:?}")]
    GeometryMismatch {
        model: (usize, usize, usize),
        cache: (usize, usize, usize),
    },
    #[error("pruned dimension for {which} would be {value}, must be at least 1")]
    PrunedDimTooSmall { which: &'static str, value: usize },
    #[error("channel selection does not match config: {0}")]
    SelectionMismatch(String),
    #[error("prompt must hold at least 2 tokens, got {0}")]
    PromptTooShort(usize),
    #[error("temperature must be non-negative, got {0}")]
    NegativeTemperature(f64),
    #[error("prefill model must be frozen for OverFill training")]
    NotFrozen,
    #[error("loss mask selects no positions")]
    EmptyMask,
    #[error("unknown task kind {0:?}")]
    UnknownTaskKind(String),
}
