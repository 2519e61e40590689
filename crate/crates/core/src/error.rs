use thiserror::Error;

/// Unified error type for the whole crate. `is_user_error` drives the CLI
/// exit-code split (1 = caller problem, 2 = internal failure).
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("attention mask leaves row {row} with no unmasked column")]
    DegenerateMask { row: usize },

    #[error("non-deterministic function: {0}")]
    Determinism(String),

    #[error("degenerate corpus: {0}")]
    DegenerateCorpus(String),

    #[error("alignment error in utterance '{utt}': {detail}")]
    Alignment { utt: String, detail: String },

    #[error("parse error in {path} at line {line}: {detail}")]
    Parse {
        path: String,
        line: usize,
        detail: String,
    },

    #[error("integrity error in {path} at byte offset {offset}: {detail}")]
    Integrity {
        path: String,
        offset: u64,
        detail: String,
    },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("loss became non-finite at step {step}")]
    NanLoss { step: u64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the failure is attributable to caller-supplied arguments or
    /// files rather than an internal invariant breaking.
    pub fn is_user_error(&self) -> bool {
        match self {
            Error::Config(_)
            | Error::Input(_)
            | Error::Alignment { .. }
            | Error::Parse { .. }
            | Error::Integrity { .. }
            | Error::Version { .. }
            | Error::DegenerateCorpus(_)
            | Error::Io { .. } => true,
            Error::Dimension { .. }
            | Error::Contract(_)
            | Error::DegenerateMask { .. }
            | Error::Determinism(_)
            | Error::NanLoss { .. } => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
