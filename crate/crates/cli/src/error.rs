//! Exit-code classification and the JSON error object written to stderr.

use liftstop::controller::ControlError;
use liftstop::eprocess::EProcessError;
use liftstop::io::IoError;
use liftstop::lift::LiftError;
use liftstop::simlab::SimError;
use liftstop::skeleton::SkeletonError;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Usage,
    Config,
    Data,
    Internal,
}

impl ErrorKind {
    pub fn code(self) -> i32 {
        match self {
            Self::Usage => 1,
            Self::Config => 2,
            Self::Data => 3,
            Self::Internal => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CliError {
    pub kind: ErrorKind,
    pub code: i32,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub line: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

impl CliError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            code: kind.code(),
            message: message.into(),
            line: None,
            field: None,
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Usage, message)
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Config, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Data, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Internal, message)
    }

    fn at(mut self, line: usize, field: Option<&str>) -> Self {
        self.line = Some(line);
        self.field = field.map(str::to_owned);
        self
    }

    /// Error raised while reading input: plain I/O failures count as bad data.
    pub fn reading(e: IoError) -> Self {
        match e {
            IoError::Io(io) => Self::data(format!("cannot read input: {io}")),
            other => other.into(),
        }
    }

    /// Error raised while writing output.
    pub fn writing(e: IoError) -> Self {
        Self::internal(format!("cannot write output: {e}"))
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        let message = e.to_string();
        match e {
            IoError::Parse { line, .. } => Self::data(message).at(line, None),
            IoError::Field { line, field, .. } => Self::data(message).at(line, Some(field)),
            IoError::Sequencing { line, .. } => Self::data(message).at(line, Some("t")),
            IoError::ConfigFile { .. } | IoError::Config(_) => Self::config(message),
            IoError::Engine(c) => c.into(),
            IoError::Io(_) | IoError::Csv(_) | IoError::Json(_) => Self::internal(message),
        }
    }
}

impl From<ControlError> for CliError {
    fn from(e: ControlError) -> Self {
        let message = e.to_string();
        match e {
            ControlError::Config(_) | ControlError::Lift(LiftError::InvalidConfig(_)) => Self::config(message),
            ControlError::EProcess(EProcessError::NonFinite { .. }) => Self::internal(message),
            ControlError::EProcess(_) => Self::config(message),
            ControlError::Lift(LiftError::MalformedRecord { .. })
            | ControlError::Sequencing { .. }
            | ControlError::Lifecycle { .. }
            | ControlError::MissingVerifier { .. } => Self::data(message),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Engine(c) => c.into(),
            other => Self::config(other.to_string()),
        }
    }
}

impl From<SkeletonError> for CliError {
    fn from(e: SkeletonError) -> Self {
        Self::data(e.to_string())
    }
}
