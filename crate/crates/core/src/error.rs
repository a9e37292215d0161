use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("wnid {0} not found in metadata source")]
    MissingWnid(String),
    #[error("invalid class entry {wnid}: {reason}")]
    InvalidEntry { wnid: String, reason: String },
    #[error("invalid background set: {0}")]
    InvalidBackgrounds(String),
    #[error("unknown template name {0:?}")]
    UnknownTemplate(String),
    #[error("template {0} requires a background set")]
    MissingBackgrounds(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("count requested for wnid {0} which is not in the catalog")]
    UnknownClass(String),
    #[error("backend unreachable: {0}")]
    BackendUnreachable(String),
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("duplicate manifest key {0}")]
    DuplicateKey(String),
    #[error("refusing to overwrite existing output {0} (use --resume)")]
    WouldOverwrite(PathBuf),
    #[error("dataset/mask mismatch: {0}")]
    MaskMismatch(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("unsupported encoder architecture {0:?}")]
    UnsupportedArch(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Stable, machine-parseable identifier printed by the CLI on failure.
    pub fn code(&self) -> &'static str {
        match self {
            Error::MissingWnid(_) => "E_MISSING_WNID",
            Error::InvalidEntry { .. } => "E_INVALID_ENTRY",
            Error::InvalidBackgrounds(_) => "E_INVALID_BACKGROUNDS",
            Error::UnknownTemplate(_) => "E_UNKNOWN_TEMPLATE",
            Error::MissingBackgrounds(_) => "E_MISSING_BACKGROUNDS",
            Error::Contract(_) => "E_CONTRACT",
            Error::UnknownClass(_) => "E_UNKNOWN_CLASS",
            Error::BackendUnreachable(_) => "E_BACKEND_UNREACHABLE",
            Error::MalformedResponse(_) => "E_MALFORMED_RESPONSE",
            Error::DuplicateKey(_) => "E_DUPLICATE_KEY",
            Error::WouldOverwrite(_) => "E_WOULD_OVERWRITE",
            Error::MaskMismatch(_) => "E_MASK_MISMATCH",
            Error::Diverged(_) => "E_DIVERGED",
            Error::UnsupportedArch(_) => "E_UNSUPPORTED_ARCH",
            Error::InvalidData(_) => "E_INVALID_DATA",
            Error::Format { .. } => "E_FORMAT",
            Error::Io { .. } => "E_IO",
            Error::Json(_) => "E_JSON",
            Error::Image(_) => "E_IMAGE",
        }
    }

    /// Whether retrying the same request may succeed.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::BackendUnreachable(_))
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
