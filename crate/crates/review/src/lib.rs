//! Review workflow for adversarial candidates: a file-backed label store and
//! the HTTP API the review frontend talks to.

pub mod api;
pub mod error;
pub mod store;

pub use api::{router, serve};
pub use error::{ReviewError, ReviewResult};
pub use store::{ItemStatus, LabelReceipt, QueueEntry, ReviewStore, REVIEW_SCHEMA_VERSION};
