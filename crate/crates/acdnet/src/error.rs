use std::fmt::Display;
use std::path::{Path, PathBuf};

/// Problems reading or writing datasets, checkpoints and configuration.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{}line {line}, field `{field}`: {message}", file_prefix(.file))]
    Line {
        file: Option<PathBuf>,
        line: usize,
        field: String,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}{message}", file_prefix(.file))]
    Checkpoint { file: Option<PathBuf>, message: String },
    /// A checkpoint and a dataset (or patient file) disagree on vocabulary.
    #[error("incompatible inputs: {0}")]
    Incompatible(String),
}

fn file_prefix(file: &Option<PathBuf>) -> String {
    file.as_ref().map_or_else(String::new, |f| format!("{}: ", f.display()))
}

impl FormatError {
    pub fn at(line: usize, field: &str, message: impl Display) -> Self {
        Self::Line {
            file: None,
            line,
            field: field.to_owned(),
            message: message.to_string(),
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_owned(),
            source,
        }
    }

    pub fn checkpoint(message: impl Display) -> Self {
        Self::Checkpoint {
            file: None,
            message: message.to_string(),
        }
    }

    pub fn in_file(self, path: &Path) -> Self {
        match self {
            Self::Line { line, field, message, .. } => Self::Line {
                file: Some(path.to_owned()),
                line,
                field,
                message,
            },
            Self::Checkpoint { message, .. } => Self::Checkpoint {
                file: Some(path.to_owned()),
                message,
            },
            other => other,
        }
    }

    pub fn line(&self) -> Option<usize> {
        match self {
            Self::Line { line, .. } => Some(*line),
            _ => None,
        }
    }
}
