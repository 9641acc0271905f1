use std::fmt;

use idiorank::corpus::CorpusError;
use idiorank::embedstore::StoreError;
use idiorank::head::HeadError;
use idiorank::llmgate::{GateError, TransportError};
use idiorank::metrics::MetricError;
use idiorank::ranker::RankError;
use idiorank::triplets::TripletError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Io,
    Validation,
    Transport,
    Numerical,
}

impl Kind {
    pub fn exit_code(self) -> u8 {
        match self {
            Kind::Io => 1,
            Kind::Validation => 2,
            Kind::Transport => 3,
            Kind::Numerical => 4,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Validation,
            message: message.into(),
        }
    }

    /// A required artifact is absent; `hint` names the command that makes it.
    pub fn missing(what: &str, path: &std::path::Path, hint: &str) -> Self {
        Self::validation(format!(
            "{what} not found at {}; run `idiorank {hint}` first",
            path.display()
        ))
    }

    pub fn context(mut self, ctx: impl fmt::Display) -> Self {
        self.message = format!("{ctx}: {}", self.message);
        self
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub trait Context<T> {
    fn context(self, ctx: impl fmt::Display) -> Result<T>;
}

impl<T, E: Into<CliError>> Context<T> for std::result::Result<T, E> {
    fn context(self, ctx: impl fmt::Display) -> Result<T> {
        self.map_err(|e| e.into().context(ctx))
    }
}

fn err(kind: Kind, e: impl fmt::Display) -> CliError {
    CliError {
        kind,
        message: e.to_string(),
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        err(Kind::Io, e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        err(Kind::Validation, e)
    }
}

impl From<toml::de::Error> for CliError {
    fn from(e: toml::de::Error) -> Self {
        err(Kind::Validation, e)
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        let kind = if matches!(e, CorpusError::Io { .. }) {
            Kind::Io
        } else {
            Kind::Validation
        };
        err(kind, e)
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        let kind = if matches!(e, StoreError::Io { .. }) {
            Kind::Io
        } else {
            Kind::Validation
        };
        err(kind, e)
    }
}

impl From<TransportError> for CliError {
    fn from(e: TransportError) -> Self {
        err(Kind::Transport, e)
    }
}

impl From<GateError> for CliError {
    fn from(e: GateError) -> Self {
        let kind = if matches!(e, GateError::Transport(_)) {
            Kind::Transport
        } else {
            Kind::Validation
        };
        err(kind, e)
    }
}

impl From<RankError> for CliError {
    fn from(e: RankError) -> Self {
        let kind = if matches!(e, RankError::ZeroNorm) {
            Kind::Numerical
        } else {
            Kind::Validation
        };
        err(kind, e)
    }
}

impl From<HeadError> for CliError {
    fn from(e: HeadError) -> Self {
        let kind = match e {
            HeadError::Diverged { .. } | HeadError::ZeroNorm => Kind::Numerical,
            HeadError::Store(StoreError::Io { .. }) => Kind::Io,
            _ => Kind::Validation,
        };
        err(kind, e)
    }
}

impl From<TripletError> for CliError {
    fn from(e: TripletError) -> Self {
        err(Kind::Validation, e)
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        err(Kind::Validation, e)
    }
}
