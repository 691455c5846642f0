use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("modulus chain: {0}")]
    Chain(String),

    #[error("depth exhausted: multiplication requested at level 0")]
    DepthExhausted,

    #[error("parameter fingerprint mismatch (expected {expected:016x}, found {found:016x})")]
    FingerprintMismatch { expected: u64, found: u64 },

    #[error("key mismatch: ciphertext bound to key {ciphertext:016x}, key is {key:016x}")]
    KeyMismatch { ciphertext: u64, key: u64 },

    #[error("scale mismatch: {0} vs {1}")]
    ScaleMismatch(f64, f64),

    #[error("encoded value overflows the modulus (|coefficient| = {0:e})")]
    EncodeOverflow(f64),

    #[error("decryption unreliable: estimated error 2^{noise_bits:.1} exceeds scale 2^{scale_bits:.1}")]
    NoiseBudgetExceeded { noise_bits: f64, scale_bits: f64 },

    #[error("slot vector has {found} values, expected {expected}")]
    SlotCount { expected: usize, found: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("missing evaluation key")]
    MissingEvalKey,

    #[error("model: {0}")]
    Model(String),

    #[error("format: {0}")]
    Format(String),

    #[error("execution: {0}")]
    Execution(String),

    #[error("insecure parameters (estimated security {0}); pass --allow-insecure to proceed")]
    Insecure(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
