use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: String, detail: String },

    #[error("numeric error at {site}: {detail}")]
    Numeric { site: String, detail: String },

    #[error("contract violation in {op}: {detail}")]
    Contract { op: String, detail: String },

    #[error("corrupt data in {op}: {detail}")]
    Corruption { op: String, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("malformed image: {0}")]
    MalformedImage(String),

    #[error("unsupported image format: {0}")]
    UnsupportedImage(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error(transparent)]
    Archive(#[from] ArchiveError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Failures specific to the tensor archive container.
#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("bad magic bytes {0:?}, expected \"SADN\"")]
    BadMagic([u8; 4]),
    #[error("unsupported archive version {0}")]
    UnsupportedVersion(u16),
    #[error("archive truncated while reading {0}")]
    Truncated(String),
    #[error("corrupt archive: {0}")]
    Corrupt(String),
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
}

impl Error {
    pub(crate) fn shape(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            op: op.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Contract {
            op: op.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn numeric(site: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            site: site.into(),
            detail: detail.into(),
        }
    }

    /// True for failures caused by user input (bad files, configs, shapes)
    /// rather than numeric breakdown.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Numeric { .. })
    }
}
