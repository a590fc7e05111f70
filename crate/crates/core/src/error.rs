use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = NaeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NaeError {
    #[error("class keyword `{keyword}` not found in prompt `{prompt}`")]
    KeywordNotFound { keyword: String, prompt: String },

    #[error("class keyword `{keyword}` occurs {count} times in prompt `{prompt}`")]
    AmbiguousKeyword { keyword: String, prompt: String, count: usize },

    #[error("unknown word `{0}` for this tokenizer")]
    UnknownToken(String),

    #[error("prompt needs {needed} tokens but the padded length is {max}")]
    PromptTooLong { needed: usize, max: usize },

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("numerical divergence: {0}")]
    NumericalDivergence(String),

    #[error("oracle review pending for run {run_id} step {step}")]
    PendingReview { run_id: String, step: usize },

    #[error("fixture build failed: {0}")]
    FixtureBuildFailed(String),

    #[error("fixture integrity check failed for {path}: {reason}")]
    FixtureCorrupt { path: PathBuf, reason: String },

    #[error("no class passed the prefilter")]
    NoViableClasses,

    #[error("latent search exhausted for class `{class}`: accepted {accepted} of {drawn} draws")]
    LatentSearchExhausted { class: String, accepted: usize, drawn: usize },

    #[error("campaign aborted: {failed} of {total} runs failed")]
    CampaignAborted { failed: usize, total: usize },

    #[error("unknown backend `{0}`")]
    UnknownBackend(String),

    #[error("corrupt campaign directory: {0}")]
    CorruptCampaign(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("png encoding error: {0}")]
    Png(String),
}

impl NaeError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// Stable machine-readable kind, used by the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::KeywordNotFound { .. } => "keyword_not_found",
            Self::AmbiguousKeyword { .. } => "ambiguous_keyword",
            Self::UnknownToken(_) => "unknown_token",
            Self::PromptTooLong { .. } => "prompt_too_long",
            Self::InvalidImage(_) => "invalid_image",
            Self::InvalidLabel { .. } => "invalid_label",
            Self::InvalidShape(_) => "invalid_shape",
            Self::DegenerateInput(_) => "degenerate_input",
            Self::InvalidConfig(_) => "invalid_config",
            Self::NumericalDivergence(_) => "numerical_divergence",
            Self::PendingReview { .. } => "pending_review",
            Self::FixtureBuildFailed(_) => "fixture_build_failed",
            Self::FixtureCorrupt { .. } => "fixture_corrupt",
            Self::NoViableClasses => "no_viable_classes",
            Self::LatentSearchExhausted { .. } => "latent_search_exhausted",
            Self::CampaignAborted { .. } => "campaign_aborted",
            Self::UnknownBackend(_) => "unknown_backend",
            Self::CorruptCampaign(_) => "corrupt_campaign",
            Self::Io { .. } => "io",
            Self::Json(_) => "json",
            Self::Png(_) => "png",
        }
    }
}
