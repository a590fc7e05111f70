use naegen_core::NaeError;

pub type ReviewResult<T> = std::result::Result<T, ReviewError>;

#[derive(Debug, thiserror::Error)]
pub enum ReviewError {
    #[error("not found: {0}")]
    NotFound(String),

    #[error("invalid label: {0}")]
    Validation(String),

    #[error(transparent)]
    Core(#[from] NaeError),
}

impl ReviewError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::NotFound(_) => "not_found",
            Self::Validation(_) => "validation_error",
            Self::Core(e) => e.kind(),
        }
    }
}
