//! CLI errors and their process exit codes.

use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: asgm_core::Error,
    },
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_IO: i32 = 4;

impl CliError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use asgm_core::Error as E;
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Dataset(_) | CliError::Io { .. } => EXIT_IO,
            CliError::Core { source, .. } => match source {
                E::Divergence { .. } | E::TrainingDiverged(_) | E::NonFinite => EXIT_DIVERGENCE,
                E::Io(_) | E::MalformedHeader(_) | E::UnsupportedDepth(_) | E::MagicMismatch | E::TruncatedPayload { .. } => {
                    EXIT_IO
                }
                E::InvalidConfig(_)
                | E::InvalidTransition(_)
                | E::UnknownPreset(_)
                | E::Unsupported(_)
                | E::TimeOutOfRange { .. }
                | E::NotLinear
                | E::GridTooLarge(_)
                | E::DimensionTooSmall { .. }
                | E::InvalidArgument(_) => EXIT_CONFIG,
                _ => EXIT_FAILURE,
            },
        }
    }
}

/// Attaches a context string to core errors.
pub trait Context<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T>;
}

impl<T> Context<T> for asgm_core::Result<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|source| CliError::Core { context: what(), source })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let core = |source| CliError::Core {
            context: "x".into(),
            source,
        };
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(core(asgm_core::Error::Divergence { t: 1.0, max_abs: 1e9 }).exit_code(), 3);
        assert_eq!(core(asgm_core::Error::TrainingDiverged(4)).exit_code(), 3);
        assert_eq!(core(asgm_core::Error::MagicMismatch).exit_code(), 4);
        assert_eq!(CliError::Dataset("empty".into()).exit_code(), 4);
        assert_eq!(core(asgm_core::Error::TimeOutOfRange { t: 3.0, horizon: 2.0 }).exit_code(), 2);
    }
}
