use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Tensor, Var};
use crate::digest::Digest;
use crate::domain::{TextEncoder, TokenEmbeddingSequence};
use crate::error::{NaeError, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

/// Fixed toy vocabulary; ids are positions in this list.
pub const VOCAB: &[&str] = &[
    PAD, BOS, EOS, "a", "an", "the", "of", "high-quality", "image", "photo", "picture", "drawing",
    "and", "in", "with", "on", "cat", "broccoli", "candle", "jellyfish", "hot", "dog", "tree", "car",
    "red", "blue", "small", "large", "grass", "water", "sky", "bright", "dark",
];

/// Padded sequence length.
pub const TOY_K: usize = 8;
/// Token embedding width.
pub const TOY_D: usize = 16;
/// Per-element scale of the token embedding table.
pub const TOKEN_SCALE: f64 = 0.02;
/// Input gain that brings token-scale embeddings to unit scale.
pub const ENCODER_GAIN: f64 = 40.0;

/// Whitespace tokenizer over [`VOCAB`] with `<bos>`/`<eos>` framing and `<pad>` fill.
#[derive(Clone, Debug)]
pub struct ToyTokenizer {
    padded_len: usize,
}

impl Default for ToyTokenizer {
    fn default() -> Self {
        Self { padded_len: TOY_K }
    }
}

impl ToyTokenizer {
    pub fn words(text: &str) -> Vec<String> {
        text.split_whitespace()
            .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation() && c != '-').to_lowercase())
            .filter(|w| !w.is_empty())
            .collect()
    }

    pub fn id(word: &str) -> Result<u32> {
        VOCAB
            .iter()
            .position(|v| *v == word)
            .map(|i| i as u32)
            .ok_or_else(|| NaeError::UnknownToken(word.to_string()))
    }

    /// Token ids and surface strings, padded to the fixed length.
    pub fn encode(&self, prompt: &str) -> Result<(Vec<u32>, Vec<String>)> {
        let words = Self::words(prompt);
        let needed = words.len() + 2;
        if needed > self.padded_len {
            return Err(NaeError::PromptTooLong { needed, max: self.padded_len });
        }
        let mut tokens = Vec::with_capacity(self.padded_len);
        tokens.push(BOS.to_string());
        tokens.extend(words);
        tokens.push(EOS.to_string());
        tokens.resize(self.padded_len, PAD.to_string());
        let ids = tokens.iter().map(|t| Self::id(t)).collect::<Result<Vec<_>>>()?;
        Ok((ids, tokens))
    }
}

/// One mixing layer: `tanh(u_i + mean_j u_j + p_i)` with `u_i = gain · e_i W`.
#[derive(Clone, Debug)]
pub struct ToyTextEncoder {
    tokenizer: ToyTokenizer,
    /// `|VOCAB| × D` token embedding table.
    pub(crate) table: Vec<f64>,
    /// `D × D'` shared per-position map.
    pub(crate) mix: Vec<f64>,
    /// `K × D'` positional bias.
    pub(crate) position: Vec<f64>,
}

impl ToyTextEncoder {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE4C0_DE00);
        let tok = Normal::new(0.0, TOKEN_SCALE).unwrap();
        let w = Normal::new(0.0, 1.0 / (TOY_D as f64).sqrt()).unwrap();
        let p = Normal::new(0.0, 0.3).unwrap();
        let table = (0..VOCAB.len() * TOY_D).map(|_| tok.sample(&mut rng)).collect();
        let mix = (0..TOY_D * TOY_D).map(|_| w.sample(&mut rng)).collect();
        let position = (0..TOY_K * TOY_D).map(|_| p.sample(&mut rng)).collect();
        Self { tokenizer: ToyTokenizer::default(), table, mix, position }
    }

    pub(crate) fn from_parts(table: Vec<f64>, mix: Vec<f64>, position: Vec<f64>) -> Result<Self> {
        if table.len() != VOCAB.len() * TOY_D || mix.len() != TOY_D * TOY_D || position.len() != TOY_K * TOY_D {
            return Err(NaeError::InvalidShape("toy encoder weight shapes".into()));
        }
        Ok(Self { tokenizer: ToyTokenizer::default(), table, mix, position })
    }

    pub fn token_embedding(&self, id: u32) -> &[f64] {
        &self.table[id as usize * TOY_D..(id as usize + 1) * TOY_D]
    }

    /// Embedding of the all-`<pad>` sequence, used as the unconditional condition.
    pub fn pad_only(&self) -> TokenEmbeddingSequence {
        let pad = ToyTokenizer::id(PAD).unwrap();
        TokenEmbeddingSequence {
            embeddings: (0..TOY_K).flat_map(|_| self.token_embedding(pad).to_vec()).collect(),
            dim: TOY_D,
            token_ids: vec![pad; TOY_K],
            tokens: vec![PAD.to_string(); TOY_K],
            class_indices: Vec::new(),
        }
    }
}

impl TextEncoder for ToyTextEncoder {
    fn padded_len(&self) -> usize {
        TOY_K
    }

    fn token_dim(&self) -> usize {
        TOY_D
    }

    fn output_dim(&self) -> usize {
        TOY_D
    }

    fn tokenize(&self, prompt: &str) -> Result<TokenEmbeddingSequence> {
        let (token_ids, tokens) = self.tokenizer.encode(prompt)?;
        let embeddings = token_ids.iter().flat_map(|&id| self.token_embedding(id).to_vec()).collect();
        Ok(TokenEmbeddingSequence { embeddings, dim: TOY_D, token_ids, tokens, class_indices: Vec::new() })
    }

    fn pieces(&self, text: &str) -> Result<Vec<String>> {
        Ok(ToyTokenizer::words(text))
    }

    fn encode_graph(&self, g: &mut Graph, tokens: Var) -> Var {
        let tokens = g.reshape(tokens, vec![TOY_K, TOY_D]);
        let w = g.constant(Tensor::matrix(TOY_D, TOY_D, self.mix.clone()));
        let u = g.matmul(tokens, w);
        let u = g.scale(u, ENCODER_GAIN);
        let pooled = g.mean_rows(u);
        let mixed = g.add_row(u, pooled);
        let pos = g.constant(Tensor::matrix(TOY_K, TOY_D, self.position.clone()));
        let pre = g.add(mixed, pos);
        g.tanh(pre)
    }

    fn parameter_digest(&self) -> String {
        let mut d = Digest::new();
        d.update_str("toy-encoder");
        d.update_f64s(&self.table);
        d.update_f64s(&self.mix);
        d.update_f64s(&self.position);
        d.finish()
    }
}
