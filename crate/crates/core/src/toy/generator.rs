use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autograd::{Graph, Tensor, Var};
use crate::digest::Digest;
use crate::domain::{Generator, TextEmbedding};
use crate::error::{NaeError, Result};
use crate::toy::encoder::{ToyTextEncoder, TOY_D, TOY_K};
use crate::domain::TextEncoder;

pub const LATENT_DIM: usize = 16;
pub const IMAGE_SIDE: usize = 16;
pub const IMAGE_CHANNELS: usize = 3;
const HIDDEN: usize = 16;
const TRAIN_TIMESTEPS: usize = 1000;
/// Standard deviation of the conditional latent distribution the denoiser models.
const DATA_STD: f64 = 0.5;
const MU_SCALE: f64 = 1.0;
const RESIDUAL_SCALE: f64 = 0.05;

/// Scaled-linear beta schedule, cumulative alpha products over the training horizon.
fn alphas_cumprod() -> Vec<f64> {
    let (lo, hi) = (0.00085f64.sqrt(), 0.012f64.sqrt());
    let mut acc = 1.0;
    (0..TRAIN_TIMESTEPS)
        .map(|i| {
            let b = lo + (hi - lo) * i as f64 / (TRAIN_TIMESTEPS - 1) as f64;
            acc *= 1.0 - b * b;
            acc
        })
        .collect()
}

/// DDIM (η = 0) timesteps, leading spacing with offset 1: `[801, 601, 401, 201, 1]` for 5 steps.
pub fn ddim_timesteps(steps: usize) -> Vec<usize> {
    let stride = TRAIN_TIMESTEPS / steps;
    (0..steps).rev().map(|i| i * stride + 1).collect()
}

/// Desk-scale latent diffusion model: a Gaussian-posterior denoiser with a small
/// tanh residual network, classifier-free guidance against the all-`<pad>`
/// condition, deterministic DDIM sampling, and a fixed smooth-basis decoder.
#[derive(Clone, Debug)]
pub struct ToyGenerator {
    /// `D' × LATENT_DIM` condition-to-mean map.
    pub(crate) cond_map: Vec<f64>,
    pub(crate) cond_bias: Vec<f64>,
    pub(crate) res_x: Vec<f64>,
    pub(crate) res_c: Vec<f64>,
    pub(crate) res_out: Vec<f64>,
    /// `LATENT_DIM × (16·16·3)` decoder.
    pub(crate) decoder: Vec<f64>,
    pub(crate) decoder_bias: Vec<f64>,
    /// Encoder output for the all-`<pad>` sequence.
    pub(crate) uncond: Vec<f64>,
    alphas: Vec<f64>,
}

impl ToyGenerator {
    pub fn from_seed(seed: u64, encoder: &ToyTextEncoder) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6E4E_0000);
        let mut normal = |n: usize, std: f64| -> Vec<f64> {
            let d = Normal::new(0.0, std).unwrap();
            (0..n).map(|_| d.sample(&mut rng)).collect()
        };
        let cond_map = normal(TOY_D * LATENT_DIM, 1.5 / (TOY_D as f64).sqrt());
        let cond_bias = normal(LATENT_DIM, 0.2);
        let res_x = normal(LATENT_DIM * HIDDEN, 1.0 / (LATENT_DIM as f64).sqrt());
        let res_c = normal(TOY_D * HIDDEN, 1.0 / (TOY_D as f64).sqrt());
        let res_out = normal(HIDDEN * LATENT_DIM, 1.0 / (HIDDEN as f64).sqrt());
        let colors = normal(LATENT_DIM * IMAGE_CHANNELS, 1.0);
        let freq = Uniform::new(0usize, 3).unwrap();
        let phase = Uniform::new(0.0, std::f64::consts::PI).unwrap();
        let n_pix = IMAGE_SIDE * IMAGE_SIDE * IMAGE_CHANNELS;
        let mut decoder = vec![0.0; LATENT_DIM * n_pix];
        for j in 0..LATENT_DIM {
            let (fy, fx) = (freq.sample(&mut rng) as f64, freq.sample(&mut rng) as f64);
            let (py, px) = (phase.sample(&mut rng), phase.sample(&mut rng));
            for y in 0..IMAGE_SIDE {
                let wy = (std::f64::consts::PI * fy * (y as f64 + 0.5) / IMAGE_SIDE as f64 + py).cos();
                for x in 0..IMAGE_SIDE {
                    let wx = (std::f64::consts::PI * fx * (x as f64 + 0.5) / IMAGE_SIDE as f64 + px).cos();
                    for c in 0..IMAGE_CHANNELS {
                        decoder[j * n_pix + (y * IMAGE_SIDE + x) * IMAGE_CHANNELS + c] =
                            0.6 * wy * wx * colors[j * IMAGE_CHANNELS + c];
                    }
                }
            }
        }
        let decoder_bias = vec![0.0; n_pix];
        let uncond = encoder.encode(&encoder.pad_only()).values;
        Self::assemble(cond_map, cond_bias, res_x, res_c, res_out, decoder, decoder_bias, uncond)
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn assemble(
        cond_map: Vec<f64>,
        cond_bias: Vec<f64>,
        res_x: Vec<f64>,
        res_c: Vec<f64>,
        res_out: Vec<f64>,
        decoder: Vec<f64>,
        decoder_bias: Vec<f64>,
        uncond: Vec<f64>,
    ) -> Self {
        Self {
            cond_map,
            cond_bias,
            res_x,
            res_c,
            res_out,
            decoder,
            decoder_bias,
            uncond,
            alphas: alphas_cumprod(),
        }
    }

    pub(crate) fn check_shapes(&self) -> Result<()> {
        let n_pix = IMAGE_SIDE * IMAGE_SIDE * IMAGE_CHANNELS;
        let ok = self.cond_map.len() == TOY_D * LATENT_DIM
            && self.cond_bias.len() == LATENT_DIM
            && self.res_x.len() == LATENT_DIM * HIDDEN
            && self.res_c.len() == TOY_D * HIDDEN
            && self.res_out.len() == HIDDEN * LATENT_DIM
            && self.decoder.len() == LATENT_DIM * n_pix
            && self.decoder_bias.len() == n_pix
            && self.uncond.len() == TOY_K * TOY_D;
        if ok {
            Ok(())
        } else {
            Err(NaeError::InvalidShape("toy generator weight shapes".into()))
        }
    }

    pub fn unconditional(&self) -> TextEmbedding {
        TextEmbedding { rows: TOY_K, cols: TOY_D, values: self.uncond.clone() }
    }

    fn mean(&self, g: &mut Graph, c: Var) -> Var {
        let m = g.constant(Tensor::matrix(TOY_D, LATENT_DIM, self.cond_map.clone()));
        let b = g.constant(Tensor::vector(self.cond_bias.clone()));
        let h = g.matmul(c, m);
        let h = g.add(h, b);
        let h = g.tanh(h);
        g.scale(h, MU_SCALE)
    }

    /// `ε̂(x_t, t, c) = a_t·x_t + b_t·μ(c) + residual`, where the first two terms are
    /// the exact posterior noise for a `N(μ(c), DATA_STD²)` latent distribution.
    fn eps(&self, g: &mut Graph, x: Var, c: Var, mu: Var, t: usize, ab: f64) -> Var {
        let s2 = DATA_STD * DATA_STD;
        let sab = ab.sqrt();
        let k = s2 * sab / (ab * s2 + 1.0 - ab);
        let denom = (1.0 - ab).sqrt();
        let a_t = (1.0 - sab * k) / denom;
        let b_t = -sab * (1.0 - sab * k) / denom;
        let ax = g.scale(x, a_t);
        let bm = g.scale(mu, b_t);
        let ideal = g.add(ax, bm);

        let wx = g.constant(Tensor::matrix(LATENT_DIM, HIDDEN, self.res_x.clone()));
        let wc = g.constant(Tensor::matrix(TOY_D, HIDDEN, self.res_c.clone()));
        let wo = g.constant(Tensor::matrix(HIDDEN, LATENT_DIM, self.res_out.clone()));
        let temb: Vec<f64> = (0..HIDDEN)
            .map(|j| 0.5 * (std::f64::consts::PI * (j + 1) as f64 * t as f64 / TRAIN_TIMESTEPS as f64).sin())
            .collect();
        let temb = g.constant(Tensor::vector(temb));
        let hx = g.matmul(x, wx);
        let hc = g.matmul(c, wc);
        let h = g.add(hx, hc);
        let h = g.add(h, temb);
        let h = g.tanh(h);
        let r = g.matmul(h, wo);
        let r = g.scale(r, RESIDUAL_SCALE);
        g.add(ideal, r)
    }

    /// Final DDIM latent for `z` under condition `e_text`.
    pub fn sample_latent_graph(&self, g: &mut Graph, z: Var, e_text: Var, guidance: f64, steps: usize) -> Result<Var> {
        if steps == 0 || steps > TRAIN_TIMESTEPS {
            return Err(NaeError::InvalidConfig(format!("sampling_steps must be in 1..={TRAIN_TIMESTEPS}")));
        }
        if !guidance.is_finite() {
            return Err(NaeError::InvalidConfig("guidance scale must be finite".into()));
        }
        let e_text = g.reshape(e_text, vec![TOY_K, TOY_D]);
        let c = g.mean_rows(e_text);
        let mu_c = self.mean(g, c);
        let conditional_only = guidance == 1.0;
        let (c_u, mu_u) = if conditional_only {
            (c, mu_c)
        } else {
            let u = g.constant(Tensor::matrix(TOY_K, TOY_D, self.uncond.clone()));
            let c_u = g.mean_rows(u);
            let mu_u = self.mean(g, c_u);
            (c_u, mu_u)
        };
        let stride = TRAIN_TIMESTEPS / steps;
        let mut x = g.reshape(z, vec![LATENT_DIM]);
        for t in ddim_timesteps(steps) {
            let ab = self.alphas[t];
            let ab_prev = if t >= stride { self.alphas[t - stride] } else { self.alphas[0] };
            let eps_c = self.eps(g, x, c, mu_c, t, ab);
            let eps = if conditional_only {
                eps_c
            } else {
                let eps_u = self.eps(g, x, c_u, mu_u, t, ab);
                let diff = g.sub(eps_c, eps_u);
                let diff = g.scale(diff, guidance);
                g.add(eps_u, diff)
            };
            let noise = g.scale(eps, (1.0 - ab).sqrt());
            let x0 = g.sub(x, noise);
            let x0 = g.scale(x0, 1.0 / ab.sqrt());
            let keep = g.scale(x0, ab_prev.sqrt());
            let dir = g.scale(eps, (1.0 - ab_prev).sqrt());
            x = g.add(keep, dir);
        }
        Ok(x)
    }

    pub fn decode_graph(&self, g: &mut Graph, latent: Var) -> Var {
        let n_pix = IMAGE_SIDE * IMAGE_SIDE * IMAGE_CHANNELS;
        let d = g.constant(Tensor::matrix(LATENT_DIM, n_pix, self.decoder.clone()));
        let b = g.constant(Tensor::vector(self.decoder_bias.clone()));
        let h = g.matmul(latent, d);
        let h = g.add(h, b);
        let img = g.sigmoid(h);
        g.reshape(img, vec![IMAGE_SIDE, IMAGE_SIDE, IMAGE_CHANNELS])
    }
}

impl Generator for ToyGenerator {
    fn latent_dim(&self) -> usize {
        LATENT_DIM
    }

    fn output_shape(&self) -> (usize, usize, usize) {
        (IMAGE_SIDE, IMAGE_SIDE, IMAGE_CHANNELS)
    }

    fn generate_graph(&self, g: &mut Graph, z: Var, e_text: Var, guidance_scale: f64, sampling_steps: usize) -> Result<Var> {
        let latent = self.sample_latent_graph(g, z, e_text, guidance_scale, sampling_steps)?;
        Ok(self.decode_graph(g, latent))
    }

    fn parameter_digest(&self) -> String {
        let mut d = Digest::new();
        d.update_str("toy-generator");
        for w in [
            &self.cond_map,
            &self.cond_bias,
            &self.res_x,
            &self.res_c,
            &self.res_out,
            &self.decoder,
            &self.decoder_bias,
            &self.uncond,
        ] {
            d.update_f64s(w);
        }
        d.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::LatentVector;

    #[test]
    fn ddim_schedule_matches_leading_spacing() {
        assert_eq!(ddim_timesteps(5), vec![801, 601, 401, 201, 1]);
        assert_eq!(ddim_timesteps(20).len(), 20);
        assert_eq!(ddim_timesteps(20)[0], 951);
    }

    #[test]
    fn generation_is_deterministic_and_in_range() {
        let e = ToyTextEncoder::from_seed(5);
        let gen = ToyGenerator::from_seed(5, &e);
        let tokens = e.tokenize("a photo of a cat").unwrap();
        let et = e.encode(&tokens);
        let z = LatentVector::sample(LATENT_DIM, 9);
        let a = gen.generate(&z, &et, 7.5, 5).unwrap();
        let b = gen.generate(&z, &et, 7.5, 5).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert!(a.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn guidance_scale_changes_output() {
        let e = ToyTextEncoder::from_seed(5);
        let gen = ToyGenerator::from_seed(5, &e);
        let et = e.encode(&e.tokenize("a photo of a candle").unwrap());
        let z = LatentVector::sample(LATENT_DIM, 3);
        let cond = gen.generate(&z, &et, 1.0, 5).unwrap();
        let guided = gen.generate(&z, &et, 7.5, 5).unwrap();
        let diff: f64 = cond.pixels().iter().zip(guided.pixels()).map(|(a, b)| (a - b).abs()).sum::<f64>()
            / cond.pixels().len() as f64;
        assert!(diff > 1e-3, "mean abs difference {diff}");
    }

    #[test]
    fn rejects_zero_sampling_steps() {
        let e = ToyTextEncoder::from_seed(5);
        let gen = ToyGenerator::from_seed(5, &e);
        let et = e.encode(&e.tokenize("cat").unwrap());
        let z = LatentVector::sample(LATENT_DIM, 3);
        assert!(gen.generate(&z, &et, 7.5, 0).is_err());
    }
}
