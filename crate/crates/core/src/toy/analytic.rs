//! Closed-form pipeline with a 2-D token embedding, small enough to brute-force.
//!
//! * encoder: `e_text_i = e_i A + p_i` (per position, linear)
//! * generator: `x = σ(z G_z + vec(e_text) G_e + g_0)`, an 8-pixel `8×1×1` image
//! * classifier: `logits = x W + b`
//!
//! The logistic output keeps the image inside `[0, 1]`; everything else is linear.
//! Guidance scale and sampling steps are accepted and ignored.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Tensor, Var};
use crate::digest::Digest;
use crate::domain::{Classifier, Generator, TextEncoder, TokenEmbeddingSequence};
use crate::error::{NaeError, Result};

pub const ANALYTIC_VOCAB: &[&str] = &["<pad>", "<bos>", "<eos>", "a", "photo", "of", "alpha", "beta", "gamma"];
pub const ANALYTIC_K: usize = 6;
pub const ANALYTIC_D: usize = 2;
pub const ANALYTIC_LATENT: usize = 2;
pub const ANALYTIC_PIXELS: usize = 8;
pub const ANALYTIC_CLASSES: [&str; 3] = ["alpha", "beta", "gamma"];

/// All weights of the analytic pipeline, public so tests can evaluate it independently.
#[derive(Clone, Debug)]
pub struct AnalyticWeights {
    /// `|vocab| × D`
    pub table: Vec<f64>,
    /// `D × D`
    pub enc_map: Vec<f64>,
    /// `K × D`
    pub enc_pos: Vec<f64>,
    /// `LATENT × PIXELS`
    pub gen_z: Vec<f64>,
    /// `(K·D) × PIXELS`
    pub gen_e: Vec<f64>,
    pub gen_bias: Vec<f64>,
    /// `PIXELS × C`
    pub cls_w: Vec<f64>,
    pub cls_b: Vec<f64>,
}

impl AnalyticWeights {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA7A1_0000);
        let mut n = |len: usize, std: f64| -> Vec<f64> {
            let d = Normal::new(0.0, std).unwrap();
            (0..len).map(|_| d.sample(&mut rng)).collect()
        };
        Self {
            table: n(ANALYTIC_VOCAB.len() * ANALYTIC_D, 0.5),
            enc_map: n(ANALYTIC_D * ANALYTIC_D, 1.0),
            enc_pos: n(ANALYTIC_K * ANALYTIC_D, 0.3),
            gen_z: n(ANALYTIC_LATENT * ANALYTIC_PIXELS, 0.5),
            gen_e: n(ANALYTIC_K * ANALYTIC_D * ANALYTIC_PIXELS, 0.8),
            gen_bias: n(ANALYTIC_PIXELS, 0.1),
            cls_w: n(ANALYTIC_PIXELS * ANALYTIC_CLASSES.len(), 2.0),
            cls_b: n(ANALYTIC_CLASSES.len(), 0.1),
        }
    }

    fn digest(&self, tag: &str) -> String {
        let mut d = Digest::new();
        d.update_str(tag);
        for w in [
            &self.table,
            &self.enc_map,
            &self.enc_pos,
            &self.gen_z,
            &self.gen_e,
            &self.gen_bias,
            &self.cls_w,
            &self.cls_b,
        ] {
            d.update_f64s(w);
        }
        d.finish()
    }
}

#[derive(Clone, Debug)]
pub struct AnalyticEncoder(pub AnalyticWeights);

#[derive(Clone, Debug)]
pub struct AnalyticGenerator(pub AnalyticWeights);

#[derive(Clone, Debug)]
pub struct AnalyticClassifier {
    pub weights: AnalyticWeights,
    names: Vec<String>,
}

impl AnalyticClassifier {
    pub fn new(weights: AnalyticWeights) -> Self {
        Self { weights, names: ANALYTIC_CLASSES.iter().map(|s| s.to_string()).collect() }
    }
}

impl TextEncoder for AnalyticEncoder {
    fn padded_len(&self) -> usize {
        ANALYTIC_K
    }

    fn token_dim(&self) -> usize {
        ANALYTIC_D
    }

    fn output_dim(&self) -> usize {
        ANALYTIC_D
    }

    fn tokenize(&self, prompt: &str) -> Result<TokenEmbeddingSequence> {
        let words = self.pieces(prompt)?;
        let needed = words.len() + 2;
        if needed > ANALYTIC_K {
            return Err(NaeError::PromptTooLong { needed, max: ANALYTIC_K });
        }
        let mut tokens = vec!["<bos>".to_string()];
        tokens.extend(words);
        tokens.push("<eos>".into());
        tokens.resize(ANALYTIC_K, "<pad>".into());
        let token_ids = tokens
            .iter()
            .map(|t| {
                ANALYTIC_VOCAB
                    .iter()
                    .position(|v| v == t)
                    .map(|i| i as u32)
                    .ok_or_else(|| NaeError::UnknownToken(t.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        let embeddings = token_ids
            .iter()
            .flat_map(|&i| self.0.table[i as usize * ANALYTIC_D..(i as usize + 1) * ANALYTIC_D].to_vec())
            .collect();
        Ok(TokenEmbeddingSequence { embeddings, dim: ANALYTIC_D, token_ids, tokens, class_indices: Vec::new() })
    }

    fn pieces(&self, text: &str) -> Result<Vec<String>> {
        Ok(text.split_whitespace().map(str::to_lowercase).collect())
    }

    fn encode_graph(&self, g: &mut Graph, tokens: Var) -> Var {
        let t = g.reshape(tokens, vec![ANALYTIC_K, ANALYTIC_D]);
        let a = g.constant(Tensor::matrix(ANALYTIC_D, ANALYTIC_D, self.0.enc_map.clone()));
        let p = g.constant(Tensor::matrix(ANALYTIC_K, ANALYTIC_D, self.0.enc_pos.clone()));
        let h = g.matmul(t, a);
        g.add(h, p)
    }

    fn parameter_digest(&self) -> String {
        self.0.digest("analytic-encoder")
    }
}

impl Generator for AnalyticGenerator {
    fn latent_dim(&self) -> usize {
        ANALYTIC_LATENT
    }

    fn output_shape(&self) -> (usize, usize, usize) {
        (ANALYTIC_PIXELS, 1, 1)
    }

    fn generate_graph(&self, g: &mut Graph, z: Var, e_text: Var, _guidance: f64, _steps: usize) -> Result<Var> {
        let gz = g.constant(Tensor::matrix(ANALYTIC_LATENT, ANALYTIC_PIXELS, self.0.gen_z.clone()));
        let ge = g.constant(Tensor::matrix(ANALYTIC_K * ANALYTIC_D, ANALYTIC_PIXELS, self.0.gen_e.clone()));
        let b = g.constant(Tensor::vector(self.0.gen_bias.clone()));
        let z = g.reshape(z, vec![ANALYTIC_LATENT]);
        let e = g.reshape(e_text, vec![ANALYTIC_K * ANALYTIC_D]);
        let hz = g.matmul(z, gz);
        let he = g.matmul(e, ge);
        let h = g.add(hz, he);
        let h = g.add(h, b);
        let x = g.sigmoid(h);
        Ok(g.reshape(x, vec![ANALYTIC_PIXELS, 1, 1]))
    }

    fn parameter_digest(&self) -> String {
        self.0.digest("analytic-generator")
    }
}

impl Classifier for AnalyticClassifier {
    fn class_names(&self) -> &[String] {
        &self.names
    }

    fn input_shape(&self) -> (usize, usize, usize) {
        (ANALYTIC_PIXELS, 1, 1)
    }

    fn logits_graph(&self, g: &mut Graph, image: Var) -> Var {
        let w = g.constant(Tensor::matrix(ANALYTIC_PIXELS, ANALYTIC_CLASSES.len(), self.weights.cls_w.clone()));
        let b = g.constant(Tensor::vector(self.weights.cls_b.clone()));
        let x = g.reshape(image, vec![ANALYTIC_PIXELS]);
        let l = g.matmul(x, w);
        g.add(l, b)
    }

    fn parameter_digest(&self) -> String {
        self.weights.digest("analytic-classifier")
    }
}

/// Encoder, generator and classifier sharing one seeded weight set.
pub fn analytic_pipeline(seed: u64) -> crate::domain::Backends {
    use std::sync::Arc;
    let w = AnalyticWeights::from_seed(seed);
    crate::domain::Backends {
        encoder: Arc::new(AnalyticEncoder(w.clone())),
        generator: Arc::new(AnalyticGenerator(w.clone())),
        classifier: Arc::new(AnalyticClassifier::new(w)),
    }
}
