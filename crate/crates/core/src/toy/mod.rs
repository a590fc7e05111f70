//! Desk-scale differentiable backends: a toy text encoder, latent diffusion
//! generator and convolutional classifier, a closed-form analytic pipeline,
//! and a finite-difference gradient oracle.

pub mod analytic;
pub mod classifier;
pub mod encoder;
pub mod finite_diff;
pub mod fixture;
pub mod generator;

pub use analytic::{analytic_pipeline, AnalyticClassifier, AnalyticEncoder, AnalyticGenerator, AnalyticWeights};
pub use classifier::{ToyClassifier, TOY_CLASSES};
pub use encoder::{ToyTextEncoder, ToyTokenizer};
pub use finite_diff::finite_difference_gradient;
pub use fixture::{default_fixture_dir, load_default_fixture, ToyFixture, DEFAULT_FIXTURE_SEED};
pub use generator::ToyGenerator;

/// Prompt used for every toy class.
pub fn class_prompt(class: &str) -> String {
    format!("a high-quality image of a {class}")
}
