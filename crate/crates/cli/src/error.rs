use naegen_core::NaeError;
use naegen_review::ReviewError;
use serde::Serialize;

pub const ERROR_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KeyProblem {
    pub key: String,
    pub message: String,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {}", describe(.0))]
    Config(Vec<KeyProblem>),

    #[error(transparent)]
    Core(#[from] NaeError),

    #[error(transparent)]
    Review(#[from] ReviewError),

    #[error("{0}")]
    Internal(String),
}

fn describe(problems: &[KeyProblem]) -> String {
    problems.iter().map(|p| format!("{}: {}", p.key, p.message)).collect::<Vec<_>>().join("; ")
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config(_) => "invalid_config",
            Self::Core(e) => e.kind(),
            Self::Review(e) => e.kind(),
            Self::Internal(_) => "internal",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            _ => 1,
        }
    }

    /// Machine-readable form printed on failure.
    pub fn to_json(&self) -> serde_json::Value {
        let mut error = serde_json::json!({ "kind": self.kind(), "message": self.to_string() });
        if let Self::Config(problems) = self {
            error["keys"] = serde_json::to_value(problems).expect("plain struct serializes");
        }
        serde_json::json!({ "schema_version": ERROR_SCHEMA_VERSION, "error": error })
    }
}
