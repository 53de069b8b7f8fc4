use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, found {found}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("share domain mismatch in {0}")]
    DomainMismatch(&'static str),

    #[error("invalid share domain: {0}")]
    InvalidDomain(String),

    #[error("value {value} at element {index} exceeds the fixed-point range (|x| < {bound})")]
    Overflow { index: usize, value: f64, bound: f64 },

    #[error("beaver triple {0} was already consumed")]
    TripleReused(u64),

    #[error("beaver triple does not fit the multiplication: {0}")]
    TripleMismatch(String),

    #[error("beaver triple budget exhausted: {0}")]
    TripleExhausted(String),

    #[error("layer {layer} is masked; {op} needs plaintext parameters")]
    MaskedLayer { layer: usize, op: &'static str },

    #[error("inconsistent mask state: {0}")]
    InconsistentMask(String),

    #[error("transport: {0}")]
    Transport(#[from] TransportError),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("class {class} has {have} samples, need at least {need}")]
    InsufficientSamples { class: usize, need: usize, have: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{context}: {source}")]
    Protocol {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    /// Wraps the error with a description of where in the protocol it happened.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Protocol {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("channel to party {0} is closed")]
    ChannelClosed(u32),

    #[error("no channel between party {from} and party {to}")]
    NoRoute { from: u32, to: u32 },

    #[error("frame corrupted: {0}")]
    FrameCorrupted(String),

    #[error("unexpected message: expected {expected}, got {got}")]
    Unexpected { expected: String, got: String },

    #[error("socket error: {0}")]
    Socket(String),
}
