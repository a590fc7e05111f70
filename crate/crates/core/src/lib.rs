//! Synthesis of natural adversarial examples by optimizing the class-token
//! embedding of a text-conditioned generator against a frozen classifier.

pub mod adam;
pub mod autograd;
pub mod digest;
pub mod domain;
pub mod error;
pub mod harness;
pub mod objective;
pub mod optimizer;
pub mod par;
pub mod registry;
pub mod scripted;
pub mod seeds;
pub mod toy;
pub mod trace_io;

pub use domain::*;
pub use error::{NaeError, Result};
