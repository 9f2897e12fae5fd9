//! Library side of the `idm` command-line tool.

pub mod commands;
pub mod config;

use std::path::{Path, PathBuf};

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] idm_core::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 for configuration problems, 3 for numeric failures, 4 for I/O and
    /// file-format problems.
    pub fn exit_code(&self) -> i32 {
        use idm_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Format(_) | CliError::Io { .. } => 4,
            CliError::Core(e) => match e {
                E::Config(_) | E::Domain(_) | E::Shape { .. } | E::InvalidShape { .. } => 2,
                E::NumericDomain { .. }
                | E::Reconstruction { .. }
                | E::Divergence { .. }
                | E::SamplerDivergence { .. }
                | E::DegenerateInput(_) => 3,
                E::Format { .. } | E::Io { .. } => 4,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_category() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::Core(idm_core::Error::SamplerDivergence { t: 3 }).exit_code(), 3);
        assert_eq!(CliError::Core(idm_core::Error::Divergence { step: 1, loss: f64::NAN }).exit_code(), 3);
        let io = std::io::Error::new(std::io::ErrorKind::NotFound, "gone");
        assert_eq!(CliError::io(Path::new("a"), io).exit_code(), 4);
        assert_eq!(
            CliError::Core(idm_core::Error::Format {
                path: "f".into(),
                detail: "bad magic".into()
            })
            .exit_code(),
            4
        );
    }
}
