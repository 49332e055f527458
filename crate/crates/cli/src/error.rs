use std::fmt;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

/// A failed command with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
    /// Extra machine-readable context, e.g. the last metrics before divergence.
    pub detail: Option<serde_json::Value>,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into(), detail: None }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { code: EXIT_DATA, message: message.into(), detail: None }
    }

    pub fn with_detail(mut self, detail: serde_json::Value) -> Self {
        self.detail = Some(detail);
        self
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<moelab::Error> for CliError {
    fn from(e: moelab::Error) -> Self {
        use moelab::Error as E;
        let code = match e {
            E::InvalidArgument(_) | E::Shape(_) => EXIT_USAGE,
            E::Divergence { .. } => EXIT_DIVERGENCE,
            E::ZeroNormToken(_)
            | E::ZeroNormExpert(_)
            | E::NonFinite { .. }
            | E::ZeroVariance(_)
            | E::Empty
            | E::Parse { .. }
            | E::Io(_) => EXIT_DATA,
        };
        Self { code, message: e.to_string(), detail: None }
    }
}

pub type CliResult<T> = Result<T, CliError>;
