use thiserror::Error;

/// Unified error type for the whole crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes; names both offenders.
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Input outside an operation's mathematical domain.
    #[error("{op}: domain error at element {index}: {detail}")]
    Domain {
        op: &'static str,
        index: usize,
        detail: String,
    },

    /// NaN or infinity produced by a forward op on finite inputs.
    #[error("{op}: non-finite value at element {index}")]
    NonFinite { op: &'static str, index: usize },

    /// Violated API contract (empty sequence, non-scalar loss, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Degenerate input geometry (collinear or coincident landmarks).
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    /// Bad configuration value or unknown key.
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// File does not start with the expected magic bytes.
    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: String, expected: String },

    /// File ends before its declared payload.
    #[error("truncated file {path}: {detail}")]
    Truncated { path: String, detail: String },

    /// Trailing CRC32 does not match the file contents.
    #[error("checksum mismatch in {path}: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch {
        path: String,
        stored: u32,
        computed: u32,
    },

    /// Header fields are internally inconsistent.
    #[error("malformed header in {path}: {detail}")]
    MalformedHeader { path: String, detail: String },

    #[error("unsupported format version {found} in {path} (supported: {supported})")]
    UnsupportedVersion {
        path: String,
        found: u32,
        supported: u32,
    },

    /// Training produced a non-finite loss or gradient.
    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error("unknown sample id: {0}")]
    UnknownSample(String),

    #[error("unknown ablation variant {found:?}; valid: {valid}")]
    UnknownVariant { found: String, valid: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
