use std::fmt;
use std::process::ExitCode;

use anchorconf::bench::BenchError;
use anchorconf::client::ClientError;
use anchorconf::metrics::MetricsError;
use anchorconf::rag::RagError;
use anchorconf::sandbox::SandboxError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Config,
    Endpoint,
    Data,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Config,
            message: message.into(),
        }
    }

    pub fn endpoint(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Endpoint,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Data,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self.kind {
            Kind::Config => 1,
            Kind::Endpoint => 2,
            Kind::Data => 3,
        })
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let label = match self.kind {
            Kind::Config => "config error",
            Kind::Endpoint => "endpoint error",
            Kind::Data => "data error",
        };
        write!(f, "{label}: {}", self.message)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::data(e.to_string())
    }
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        match e {
            e if e.is_endpoint_error() => Self::endpoint(e.to_string()),
            e @ ClientError::InvalidScript { .. } => Self::config(e.to_string()),
            e => Self::data(e.to_string()),
        }
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::InvalidTask(_) => Self::config(e.to_string()),
            BenchError::SchemaViolation { path, problems, .. } => Self::data(
                problems
                    .iter()
                    .map(|(line, reason)| format!("{path}: line {line}: {reason}"))
                    .collect::<Vec<_>>()
                    .join("\n"),
            ),
            e => Self::data(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        Self::data(e.to_string())
    }
}

impl From<RagError> for CliError {
    fn from(e: RagError) -> Self {
        match e {
            RagError::Client(c) => c.into(),
            RagError::Retriever(m) => Self::endpoint(format!("retriever: {m}")),
            RagError::InvalidConfig(m) => Self::config(m),
            e => Self::data(e.to_string()),
        }
    }
}

impl From<SandboxError> for CliError {
    fn from(e: SandboxError) -> Self {
        Self::config(e.to_string())
    }
}
