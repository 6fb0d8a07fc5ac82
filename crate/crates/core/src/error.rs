use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by every module of the crate.
///
/// Each variant knows which module produced it so that front ends can report
/// `ERROR: <module>: <message>` without string matching.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: refusing to overwrite existing file (pass --force)", .0.display())]
    Exists(PathBuf),

    #[error("{msg}")]
    Invalid { module: &'static str, msg: String },

    #[error("non-finite value at voxel {index} ({what})")]
    NonFinite {
        module: &'static str,
        index: usize,
        what: &'static str,
    },

    #[error("instance too large: {voxels} voxels exceeds the limit of {limit}")]
    TooLarge { voxels: usize, limit: usize },
}

impl Error {
    pub(crate) fn invalid(module: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid {
            module,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Name of the module the error originated from.
    pub fn module(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Exists(_) => "cli",
            Error::Invalid { module, .. } | Error::NonFinite { module, .. } => module,
            Error::TooLarge { .. } => "oracle",
        }
    }

    /// True for failures of the filesystem rather than of the inputs.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Exists(_))
    }
}
