//! Scripted backends whose outcomes are fixed in advance, for exercising the
//! harness accounting without depending on how a real model behaves.
//!
//! The generated image is a single 4-channel pixel:
//!
//! | channel | meaning |
//! |---|---|
//! | 0 | class code `(i + 0.5) / N`, read from the class token |
//! | 1 | `σ(1.702·z₀)`; the draw is classified correctly iff this is below the class accuracy |
//! | 2 | 1 when `z₁` equals [`VULNERABLE_MARK`], else 0 |
//! | 3 | `σ(Σ e_text[:,1] + z₂)`, the only differentiable channel |
//!
//! Correctly classified vulnerable draws sit a small margin from flipping, so
//! one or two Adam steps on the class token (or on `z₂`) fool the classifier.
//! Every other draw has zero gradient and never moves.

use std::sync::Arc;

use crate::autograd::{Graph, Tensor, Var};
use crate::digest::Digest;
use crate::domain::{Backends, Classifier, Generator, LatentVector, TextEncoder, TokenEmbeddingSequence};
use crate::error::{NaeError, Result};

pub const SCRIPTED_K: usize = 6;
pub const SCRIPTED_LATENT: usize = 3;
/// Value of `z₁` that marks a draw as vulnerable. Gaussian draws never hit it.
pub const VULNERABLE_MARK: f64 = 7.0;
const BASE_WORDS: [&str; 6] = ["<pad>", "<bos>", "<eos>", "a", "photo", "of"];
const MARGIN: f64 = 0.05;
const GAIN: f64 = 100.0;
const WRONG_LOGIT: f64 = 5.0;

pub fn scripted_class_name(i: usize) -> String {
    format!("class{i:03}")
}

pub fn scripted_prompt(class: &str) -> String {
    format!("a photo of {class}")
}

/// A latent that is classified correctly at initialization, vulnerable or not.
pub fn scripted_latent(vulnerable: bool, seed: u64) -> LatentVector {
    LatentVector { values: vec![-4.0, if vulnerable { VULNERABLE_MARK } else { 0.0 }, 0.0], seed }
}

#[derive(Clone, Debug)]
struct Script {
    names: Vec<String>,
    accuracy: Vec<f64>,
}

impl Script {
    fn digest(&self, tag: &str) -> String {
        let mut d = Digest::new();
        d.update_str(tag);
        for n in &self.names {
            d.update_str(n);
        }
        d.update_f64s(&self.accuracy);
        d.finish()
    }
}

#[derive(Clone, Debug)]
pub struct ScriptedEncoder(Arc<Script>);
#[derive(Clone, Debug)]
pub struct ScriptedGenerator(Arc<Script>);
#[derive(Clone, Debug)]
pub struct ScriptedClassifier(Arc<Script>);

/// Backends for `accuracy.len()` classes named `class000`, `class001`, ...
/// Class `i` is classified correctly on a Gaussian draw with probability of
/// roughly `accuracy[i]` (exactly 1 when `accuracy[i] >= 1`).
pub fn scripted_backends(accuracy: &[f64]) -> Result<Backends> {
    if accuracy.len() < 2 {
        return Err(NaeError::InvalidConfig("scripted backends need at least 2 classes".into()));
    }
    let script = Arc::new(Script {
        names: (0..accuracy.len()).map(scripted_class_name).collect(),
        accuracy: accuracy.to_vec(),
    });
    Ok(Backends {
        encoder: Arc::new(ScriptedEncoder(script.clone())),
        generator: Arc::new(ScriptedGenerator(script.clone())),
        classifier: Arc::new(ScriptedClassifier(script)),
    })
}

impl TextEncoder for ScriptedEncoder {
    fn padded_len(&self) -> usize {
        SCRIPTED_K
    }

    fn token_dim(&self) -> usize {
        2
    }

    fn output_dim(&self) -> usize {
        2
    }

    fn tokenize(&self, prompt: &str) -> Result<TokenEmbeddingSequence> {
        let mut tokens = vec!["<bos>".to_string()];
        tokens.extend(self.pieces(prompt)?);
        tokens.push("<eos>".into());
        if tokens.len() > SCRIPTED_K {
            return Err(NaeError::PromptTooLong { needed: tokens.len(), max: SCRIPTED_K });
        }
        tokens.resize(SCRIPTED_K, "<pad>".into());
        let n = self.0.names.len();
        let mut token_ids = Vec::new();
        let mut embeddings = Vec::new();
        for t in &tokens {
            if let Some(i) = BASE_WORDS.iter().position(|w| w == t) {
                token_ids.push(i as u32);
                embeddings.extend([0.0, 0.0]);
            } else if let Some(c) = self.0.names.iter().position(|w| w == t) {
                token_ids.push((BASE_WORDS.len() + c) as u32);
                embeddings.extend([(c as f64 + 0.5) / n as f64, 0.0]);
            } else {
                return Err(NaeError::UnknownToken(t.clone()));
            }
        }
        Ok(TokenEmbeddingSequence { embeddings, dim: 2, token_ids, tokens, class_indices: Vec::new() })
    }

    fn pieces(&self, text: &str) -> Result<Vec<String>> {
        Ok(text.split_whitespace().map(str::to_lowercase).collect())
    }

    fn encode_graph(&self, g: &mut Graph, tokens: Var) -> Var {
        g.reshape(tokens, vec![SCRIPTED_K, 2])
    }

    fn parameter_digest(&self) -> String {
        self.0.digest("scripted-encoder")
    }
}

impl Generator for ScriptedGenerator {
    fn latent_dim(&self) -> usize {
        SCRIPTED_LATENT
    }

    fn output_shape(&self) -> (usize, usize, usize) {
        (1, 1, 4)
    }

    fn generate_graph(&self, g: &mut Graph, z: Var, e_text: Var, _guidance: f64, _steps: usize) -> Result<Var> {
        let e = g.data(e_text);
        let code = e.iter().step_by(2).fold(0.0f64, |a, &b| a.max(b));
        let zd = g.data(z).to_vec();
        let p1 = 1.0 / (1.0 + (-1.702 * zd[0]).exp());
        let p2 = if zd[1] == VULNERABLE_MARK { 1.0 } else { 0.0 };
        let e_text = g.reshape(e_text, vec![SCRIPTED_K, 2]);
        let pick = g.constant(Tensor::matrix(2, 1, vec![0.0, 1.0]));
        let col = g.matmul(e_text, pick);
        let s_text = g.sum(col);
        let zmask = g.constant(Tensor::vector(vec![0.0, 0.0, 1.0]));
        let z = g.reshape(z, vec![SCRIPTED_LATENT]);
        let zsel = g.mul(z, zmask);
        let s_z = g.sum(zsel);
        let s = g.add(s_text, s_z);
        let p3 = g.sigmoid(s);
        let base = g.constant(Tensor::vector(vec![code, p1, p2, 0.0]));
        let unit = g.constant(Tensor::vector(vec![0.0, 0.0, 0.0, 1.0]));
        let attack = g.mul_scalar(unit, p3);
        let img = g.add(base, attack);
        Ok(g.reshape(img, vec![1, 1, 4]))
    }

    fn parameter_digest(&self) -> String {
        self.0.digest("scripted-generator")
    }
}

impl Classifier for ScriptedClassifier {
    fn class_names(&self) -> &[String] {
        &self.0.names
    }

    fn input_shape(&self) -> (usize, usize, usize) {
        (1, 1, 4)
    }

    fn logits_graph(&self, g: &mut Graph, image: Var) -> Var {
        let n = self.0.names.len();
        let d = g.data(image).to_vec();
        let c = ((d[0] * n as f64).floor() as usize).min(n - 1);
        let alt = (c + 1) % n;
        let acc = self.0.accuracy[c];
        let correct = acc >= 1.0 || d[1] < acc;
        let mut base = vec![0.0; n];
        if !correct {
            base[alt] = WRONG_LOGIT;
            return g.constant(Tensor::vector(base));
        }
        base[c] = 2.0;
        base[alt] = 2.0 - MARGIN;
        let base = g.constant(Tensor::vector(base));
        if d[2] < 0.5 {
            return base;
        }
        // alt logit rises with the attack channel; it starts MARGIN below c at p3 = 0.5.
        let x = g.reshape(image, vec![4]);
        let pick = g.constant(Tensor::vector(vec![0.0, 0.0, 0.0, 1.0]));
        let p3 = g.mul(x, pick);
        let p3 = g.sum(p3);
        let centered = g.offset(p3, -0.5);
        let mut dir = vec![0.0; n];
        dir[alt] = GAIN;
        let dir = g.constant(Tensor::vector(dir));
        let bump = g.mul_scalar(dir, centered);
        g.add(base, bump)
    }

    fn parameter_digest(&self) -> String {
        self.0.digest("scripted-classifier")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::tokenize_with_class;

    #[test]
    fn class_code_round_trips() {
        let b = scripted_backends(&[1.0; 100]).unwrap();
        for i in [0, 42, 99] {
            let name = scripted_class_name(i);
            let t = tokenize_with_class(&scripted_prompt(&name), &name, b.encoder.as_ref()).unwrap();
            assert_eq!(t.class_indices, vec![4]);
            let img = b.generator.generate(&scripted_latent(false, 0), &b.encoder.encode(&t), 7.5, 5).unwrap();
            assert_eq!(b.classifier.predict(&img).unwrap(), i);
        }
    }

    #[test]
    fn zero_accuracy_is_always_wrong() {
        let b = scripted_backends(&[0.0, 1.0]).unwrap();
        let t = b.encoder.tokenize("a photo of class000").unwrap();
        let img = b.generator.generate(&LatentVector::sample(3, 4), &b.encoder.encode(&t), 7.5, 5).unwrap();
        assert_eq!(b.classifier.predict(&img).unwrap(), 1);
    }
}
