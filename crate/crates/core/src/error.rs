use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("step {step} exceeds total steps {total}")]
    StepOutOfRange { step: u64, total: u64 },
    #[error("value {0} overflows the 32-bit symbol range")]
    SymbolOverflow(f64),
    #[error("table support is {width} symbols (max {max}); density looks divergent")]
    SupportTooWide { width: u64, max: u64 },
    #[error("probability table checksum mismatch: blob has {blob:#018x}, tables have {tables:#018x}")]
    ChecksumMismatch { blob: u64, tables: u64 },
    #[error("corrupt stream: {0}")]
    CorruptStream(String),
    #[error("bad file format: {0}")]
    Format(String),
    #[error("training diverged at step {step}: {what}")]
    Diverged { step: u64, what: String },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
