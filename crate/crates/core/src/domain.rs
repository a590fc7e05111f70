//! Domain values exchanged between the pipeline components and the four
//! pluggable contracts: text encoder, generator, classifier and oracle.

use std::sync::Arc;

use chrono::{DateTime, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{BilinearPlan, Graph, Var};
use crate::digest::Digest;
use crate::error::{NaeError, Result};

/// HWC image with every value in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(NaeError::InvalidImage(format!(
                "dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if pixels.len() != height * width * channels {
            return Err(NaeError::InvalidImage(format!(
                "{} values for a {height}x{width}x{channels} image",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !v.is_finite() || !(0.0..=1.0).contains(*v)) {
            return Err(NaeError::InvalidImage(format!("pixel value {bad} outside [0,1]")));
        }
        Ok(Self { height, width, channels, pixels })
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    /// SHA-256 over the shape and the exact little-endian pixel bits.
    pub fn digest(&self) -> String {
        let mut d = Digest::new();
        d.update_usizes(&[self.height, self.width, self.channels]);
        d.update_f64s(&self.pixels);
        d.finish()
    }
}

/// Generator latent `z` together with the seed it was drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentVector {
    pub values: Vec<f64>,
    pub seed: u64,
}

impl LatentVector {
    /// Standard-normal latent drawn from a ChaCha8 stream seeded with `seed`.
    pub fn sample(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self { values, seed }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn validate(&self, expected_dim: usize) -> Result<()> {
        if self.values.len() != expected_dim {
            return Err(NaeError::InvalidShape(format!(
                "latent has dimension {} but the generator expects {expected_dim}",
                self.values.len()
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(NaeError::InvalidConfig("latent contains non-finite values".into()));
        }
        Ok(())
    }
}

/// The `K×D` token-embedding matrix of a tokenized prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenEmbeddingSequence {
    pub embeddings: Vec<f64>,
    pub dim: usize,
    pub token_ids: Vec<u32>,
    /// Surface text of each token, used for keyword matching.
    pub tokens: Vec<String>,
    /// Positions of the class keyword's tokens; empty until located.
    pub class_indices: Vec<usize>,
}

impl TokenEmbeddingSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    /// Concatenated class-token rows.
    pub fn class_rows(&self) -> Vec<f64> {
        self.class_indices.iter().flat_map(|&i| self.row(i).to_vec()).collect()
    }

    /// Copy with the class-token rows replaced by `rows`.
    pub fn with_class_rows(&self, rows: &[f64]) -> Result<Self> {
        if rows.len() != self.class_indices.len() * self.dim {
            return Err(NaeError::InvalidShape(format!(
                "expected {} class-row values, got {}",
                self.class_indices.len() * self.dim,
                rows.len()
            )));
        }
        let mut out = self.clone();
        for (j, &idx) in self.class_indices.iter().enumerate() {
            out.embeddings[idx * self.dim..(idx + 1) * self.dim]
                .copy_from_slice(&rows[j * self.dim..(j + 1) * self.dim]);
        }
        Ok(out)
    }

    pub fn validate(&self, padded_len: usize) -> Result<()> {
        if self.token_ids.len() != padded_len || self.embeddings.len() != padded_len * self.dim {
            return Err(NaeError::InvalidShape(format!(
                "token sequence has {} tokens, encoder expects {padded_len}",
                self.token_ids.len()
            )));
        }
        if self.class_indices.is_empty() {
            return Err(NaeError::InvalidShape("no class token indices located".into()));
        }
        if let Some(&bad) = self.class_indices.iter().find(|&&i| i >= padded_len) {
            return Err(NaeError::InvalidShape(format!("class index {bad} >= {padded_len}")));
        }
        if self.embeddings.iter().any(|v| !v.is_finite()) {
            return Err(NaeError::InvalidShape("non-finite token embedding".into()));
        }
        Ok(())
    }
}

/// Encoder output, `K×D'`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEmbedding {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    /// Cross-entropy toward a chosen label different from the true class.
    Targeted,
    /// Negative cross-entropy on the true class.
    Untargeted,
    /// Cross-entropy toward any one-hot label, driving a confident prediction.
    OodToId,
    /// Cross-entropy against the uniform distribution, flattening the prediction.
    IdToOod,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerMetric {
    #[default]
    Euclidean,
    Cosine,
}

impl std::str::FromStr for RegularizerMetric {
    type Err = NaeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Self::Euclidean),
            "cosine" => Ok(Self::Cosine),
            other => Err(NaeError::InvalidConfig(format!("unknown metric `{other}`"))),
        }
    }
}

/// What to fool and how.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub mode: AttackMode,
    pub label: Option<usize>,
    pub prompt: String,
    pub class_keyword: String,
    pub regularizer_metric: RegularizerMetric,
    pub lambda: f64,
    /// Maximum-softmax threshold of the OOD detector (OOD modes only).
    #[serde(default = "default_msp_threshold")]
    pub msp_threshold: f64,
}

fn default_msp_threshold() -> f64 {
    0.5
}

impl AttackSpec {
    /// Untargeted attack on `class_keyword` embedded in `prompt`, with `λ = 0`.
    pub fn untargeted(prompt: impl Into<String>, class_keyword: impl Into<String>, true_class: usize) -> Self {
        Self {
            mode: AttackMode::Untargeted,
            label: Some(true_class),
            prompt: prompt.into(),
            class_keyword: class_keyword.into(),
            regularizer_metric: RegularizerMetric::Euclidean,
            lambda: 0.0,
            msp_threshold: default_msp_threshold(),
        }
    }

    pub fn targeted(
        prompt: impl Into<String>,
        class_keyword: impl Into<String>,
        target: usize,
    ) -> Self {
        Self { mode: AttackMode::Targeted, label: Some(target), ..Self::untargeted(prompt, class_keyword, 0) }
    }

    /// Checks the mode/label pairing against the keyword's classifier index, if any.
    pub fn validate(&self, ground_truth: Option<usize>, num_classes: usize) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(NaeError::InvalidConfig(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if let Some(y) = self.label {
            if y >= num_classes {
                return Err(NaeError::InvalidLabel { label: y, classes: num_classes });
            }
        }
        match (self.mode, self.label) {
            (AttackMode::IdToOod, Some(_)) => {
                Err(NaeError::InvalidConfig("id_to_ood takes no label".into()))
            }
            (AttackMode::IdToOod, None) => Ok(()),
            (_, None) => Err(NaeError::InvalidConfig(format!("{:?} mode needs a label", self.mode))),
            (AttackMode::Targeted, Some(y)) => match ground_truth {
                Some(gt) if gt == y => Err(NaeError::InvalidConfig(
                    "targeted label must differ from the ground-truth class".into(),
                )),
                None => Err(NaeError::InvalidConfig(format!(
                    "class keyword `{}` is not a classifier class",
                    self.class_keyword
                ))),
                _ => Ok(()),
            },
            (AttackMode::Untargeted, Some(y)) => match ground_truth {
                Some(gt) if gt != y => Err(NaeError::InvalidConfig(
                    "untargeted label must be the ground-truth class".into(),
                )),
                None => Err(NaeError::InvalidConfig(format!(
                    "class keyword `{}` is not a classifier class",
                    self.class_keyword
                ))),
                _ => Ok(()),
            },
            (AttackMode::OodToId, Some(_)) => Ok(()),
        }
    }
}

/// Text encoder `E` together with its tokenizer.
pub trait TextEncoder: Send + Sync {
    /// Padded sequence length `K`.
    fn padded_len(&self) -> usize;
    /// Token embedding width `D`.
    fn token_dim(&self) -> usize;
    /// Output width `D'`.
    fn output_dim(&self) -> usize;
    /// Tokenize and embed `prompt`, padding to `K`. `class_indices` is left empty.
    fn tokenize(&self, prompt: &str) -> Result<TokenEmbeddingSequence>;
    /// Word pieces for `text` as they would appear in a tokenized sequence.
    fn pieces(&self, text: &str) -> Result<Vec<String>>;
    /// Encode a `K×D` token-embedding node into a `K×D'` node.
    fn encode_graph(&self, g: &mut Graph, tokens: Var) -> Var;
    fn parameter_digest(&self) -> String;

    /// True when the backend cannot be evaluated concurrently.
    fn single_flight(&self) -> bool {
        false
    }

    fn encode(&self, tokens: &TokenEmbeddingSequence) -> TextEmbedding {
        let mut g = Graph::new();
        let t = g.constant(crate::autograd::Tensor::matrix(tokens.len(), tokens.dim, tokens.embeddings.clone()));
        let out = self.encode_graph(&mut g, t);
        TextEmbedding { rows: self.padded_len(), cols: self.output_dim(), values: g.data(out).to_vec() }
    }
}

/// Conditional generator `G(z; e_text)`.
pub trait Generator: Send + Sync {
    fn latent_dim(&self) -> usize;
    /// `(height, width, channels)` of generated images.
    fn output_shape(&self) -> (usize, usize, usize);
    /// Build the sampling graph; returns an HWC node with values in `[0, 1]`.
    fn generate_graph(
        &self,
        g: &mut Graph,
        z: Var,
        e_text: Var,
        guidance_scale: f64,
        sampling_steps: usize,
    ) -> Result<Var>;
    fn parameter_digest(&self) -> String;

    fn single_flight(&self) -> bool {
        false
    }

    fn generate(
        &self,
        z: &LatentVector,
        e_text: &TextEmbedding,
        guidance_scale: f64,
        sampling_steps: usize,
    ) -> Result<ImageTensor> {
        use crate::autograd::Tensor;
        z.validate(self.latent_dim())?;
        let mut g = Graph::new();
        let zv = g.constant(Tensor::vector(z.values.clone()));
        let ev = g.constant(Tensor::matrix(e_text.rows, e_text.cols, e_text.values.clone()));
        let img = self.generate_graph(&mut g, zv, ev, guidance_scale, sampling_steps)?;
        let (h, w, c) = self.output_shape();
        ImageTensor::new(h, w, c, g.data(img).to_vec())
    }
}

/// Target classifier `F`.
pub trait Classifier: Send + Sync {
    fn class_names(&self) -> &[String];
    /// `(height, width, channels)` expected at the input.
    fn input_shape(&self) -> (usize, usize, usize);
    /// Logits node (length `C`) for an HWC image node at the input resolution.
    fn logits_graph(&self, g: &mut Graph, image: Var) -> Var;
    fn parameter_digest(&self) -> String;

    fn single_flight(&self) -> bool {
        false
    }

    fn num_classes(&self) -> usize {
        self.class_names().len()
    }

    fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names().iter().position(|n| n.eq_ignore_ascii_case(name))
    }

    fn logits(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        use crate::autograd::Tensor;
        if image.shape() != self.input_shape() {
            return Err(NaeError::InvalidShape(format!(
                "classifier expects {:?}, got {:?}",
                self.input_shape(),
                image.shape()
            )));
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(image.pixels().to_vec()));
        let out = self.logits_graph(&mut g, x);
        Ok(g.data(out).to_vec())
    }

    /// Resize to the input resolution, then classify.
    fn predict(&self, image: &ImageTensor) -> Result<usize> {
        let resized = preprocess_for_classifier(image, self)?;
        Ok(argmax(&self.logits(&resized)?))
    }
}

/// The three frozen models an optimization runs against.
#[derive(Clone)]
pub struct Backends {
    pub encoder: Arc<dyn TextEncoder>,
    pub generator: Arc<dyn Generator>,
    pub classifier: Arc<dyn Classifier>,
}

impl Backends {
    pub fn single_flight(&self) -> bool {
        self.encoder.single_flight() || self.generator.single_flight() || self.classifier.single_flight()
    }

    /// Combined digest of all model parameters.
    pub fn parameter_digest(&self) -> String {
        let mut d = Digest::new();
        d.update_str(&self.encoder.parameter_digest());
        d.update_str(&self.generator.parameter_digest());
        d.update_str(&self.classifier.parameter_digest());
        d.finish()
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Positions of `class_keyword`'s tokens in the tokenized `prompt`.
///
/// Matching is whole-word and case-insensitive, and the keyword must occur
/// exactly once. A keyword spanning several tokens yields all of them.
pub fn locate_class_token_indices(
    prompt: &str,
    class_keyword: &str,
    encoder: &dyn TextEncoder,
) -> Result<Vec<usize>> {
    let seq = encoder.tokenize(prompt)?;
    let needle: Vec<String> = encoder.pieces(class_keyword)?;
    if needle.is_empty() {
        return Err(NaeError::KeywordNotFound { keyword: class_keyword.into(), prompt: prompt.into() });
    }
    let hay: Vec<String> = seq.tokens.iter().map(|t| t.to_lowercase()).collect();
    let needle: Vec<String> = needle.iter().map(|t| t.to_lowercase()).collect();
    let starts: Vec<usize> = (0..hay.len().saturating_sub(needle.len() - 1))
        .filter(|&i| hay[i..i + needle.len()] == needle[..])
        .collect();
    match starts.as_slice() {
        [] => Err(NaeError::KeywordNotFound { keyword: class_keyword.into(), prompt: prompt.into() }),
        [start] => Ok((*start..*start + needle.len()).collect()),
        _ => Err(NaeError::AmbiguousKeyword {
            keyword: class_keyword.into(),
            prompt: prompt.into(),
            count: starts.len(),
        }),
    }
}

/// Tokenize `prompt` and mark the class keyword's positions.
pub fn tokenize_with_class(
    prompt: &str,
    class_keyword: &str,
    encoder: &dyn TextEncoder,
) -> Result<TokenEmbeddingSequence> {
    let mut seq = encoder.tokenize(prompt)?;
    seq.class_indices = locate_class_token_indices(prompt, class_keyword, encoder)?;
    Ok(seq)
}

/// Bilinearly resize `image` to the classifier's input resolution.
pub fn preprocess_for_classifier<C: Classifier + ?Sized>(image: &ImageTensor, classifier: &C) -> Result<ImageTensor> {
    if image.pixels().iter().any(|v| !v.is_finite()) {
        return Err(NaeError::InvalidImage("non-finite pixels".into()));
    }
    let (h, w, c) = classifier.input_shape();
    if image.channels() != c {
        return Err(NaeError::InvalidShape(format!(
            "classifier expects {c} channels, image has {}",
            image.channels()
        )));
    }
    if (image.height(), image.width()) == (h, w) {
        return Ok(image.clone());
    }
    let plan = BilinearPlan::new(image.height(), image.width(), c, h, w);
    let pixels = plan.apply(image.pixels()).into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    ImageTensor::new(h, w, c, pixels)
}

/// Graph form of [`preprocess_for_classifier`]; identity when no resize is needed.
pub fn preprocess_graph(
    g: &mut Graph,
    image: Var,
    from: (usize, usize, usize),
    to: (usize, usize, usize),
) -> Result<Var> {
    if from.2 != to.2 {
        return Err(NaeError::InvalidShape(format!("channel mismatch {from:?} -> {to:?}")));
    }
    if (from.0, from.1) == (to.0, to.1) {
        return Ok(image);
    }
    let plan = Arc::new(BilinearPlan::new(from.0, from.1, from.2, to.0, to.1));
    let resized = g.resize(image, plan);
    Ok(g.clamp01(resized))
}

/// A human (or scripted) verdict on one candidate image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleLabel {
    pub candidate_id: String,
    pub reviewer: String,
    pub ground_truth_preserved: bool,
    pub natural: bool,
    #[serde(with = "assigned_label")]
    pub assigned_label: Option<usize>,
    pub timestamp: DateTime<Utc>,
}

/// `assigned_label` is a class index or the string `"none"`.
mod assigned_label {
    use serde::de::{self, Deserializer, Visitor};
    use serde::Serializer;

    pub fn serialize<S: Serializer>(v: &Option<usize>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(i) => s.serialize_u64(*i as u64),
            None => s.serialize_str("none"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<usize>, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Option<usize>;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a class index or \"none\"")
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Self::Value, E> {
                Ok(Some(v as usize))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Self::Value, E> {
                usize::try_from(v).map(Some).map_err(|_| E::custom("negative class index"))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Self::Value, E> {
                if v == "none" {
                    Ok(None)
                } else {
                    Err(E::custom(format!("expected \"none\", got `{v}`")))
                }
            }
            fn visit_unit<E: de::Error>(self) -> Result<Self::Value, E> {
                Ok(None)
            }
        }
        d.deserialize_any(V)
    }
}

/// What an oracle sees when asked for a verdict.
#[derive(Clone, Debug)]
pub struct Candidate<'a> {
    pub candidate_id: String,
    pub run_id: &'a str,
    pub step: usize,
    pub expected_class: Option<usize>,
    pub predicted_class: usize,
    pub image: &'a ImageTensor,
}

/// Oracle `O`. Returning `None` means the verdict is deferred to human review.
pub trait Oracle: Send + Sync {
    fn review(&self, candidate: &Candidate<'_>) -> Option<OracleLabel>;
}

/// Leaves every candidate pending for human review.
#[derive(Clone, Copy, Debug, Default)]
pub struct HumanOracle;

impl Oracle for HumanOracle {
    fn review(&self, _candidate: &Candidate<'_>) -> Option<OracleLabel> {
        None
    }
}

/// Scripted oracle that confirms every candidate keeps its intended class and looks natural.
#[derive(Clone, Copy, Debug, Default)]
pub struct AcceptAllOracle;

impl Oracle for AcceptAllOracle {
    fn review(&self, c: &Candidate<'_>) -> Option<OracleLabel> {
        Some(OracleLabel {
            candidate_id: c.candidate_id.clone(),
            reviewer: "scripted".into(),
            ground_truth_preserved: true,
            natural: true,
            assigned_label: c.expected_class,
            timestamp: DateTime::<Utc>::UNIX_EPOCH,
        })
    }
}
