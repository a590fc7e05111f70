use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Conv2dGeometry, Graph, Tensor, Var};
use crate::digest::Digest;
use crate::domain::Classifier;
use crate::error::{NaeError, Result};

pub const CLASSIFIER_SIDE: usize = 32;
pub const CONV_CHANNELS: usize = 6;
const POOL: usize = 4;
pub const TOY_CLASSES: [&str; 4] = ["cat", "broccoli", "candle", "jellyfish"];

pub(crate) const GEOMETRY: Conv2dGeometry = Conv2dGeometry {
    in_h: CLASSIFIER_SIDE,
    in_w: CLASSIFIER_SIDE,
    in_c: 3,
    out_c: CONV_CHANNELS,
    kernel: 3,
    stride: 2,
    padding: 1,
};

/// Number of pooled features feeding the linear head.
pub(crate) fn feature_len() -> usize {
    (GEOMETRY.out_h() / POOL) * (GEOMETRY.out_w() / POOL) * CONV_CHANNELS
}

/// conv3×3/s2 → tanh → 4×4 average pool → linear head.
#[derive(Clone, Debug)]
pub struct ToyClassifier {
    pub(crate) kernel: Vec<f64>,
    pub(crate) bias: Vec<f64>,
    pub(crate) head: Vec<f64>,
    pub(crate) head_bias: Vec<f64>,
    names: Vec<String>,
}

/// Graph handles for the four weight tensors.
#[derive(Clone, Copy)]
pub(crate) struct ClassifierVars {
    pub kernel: Var,
    pub bias: Var,
    pub head: Var,
    pub head_bias: Var,
}

impl ToyClassifier {
    /// Untrained weights, the starting point of fixture training.
    pub fn initial(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC1A5_0000);
        let k = Normal::new(0.0, (2.0f64 / 27.0).sqrt()).unwrap();
        let h = Normal::new(0.0, (1.0 / feature_len() as f64).sqrt()).unwrap();
        let kernel = (0..GEOMETRY.kernel_len()).map(|_| k.sample(&mut rng)).collect();
        let head = (0..feature_len() * TOY_CLASSES.len()).map(|_| h.sample(&mut rng)).collect();
        Self::from_parts(kernel, vec![0.0; CONV_CHANNELS], head, vec![0.0; TOY_CLASSES.len()]).unwrap()
    }

    pub(crate) fn from_parts(kernel: Vec<f64>, bias: Vec<f64>, head: Vec<f64>, head_bias: Vec<f64>) -> Result<Self> {
        let c = TOY_CLASSES.len();
        if kernel.len() != GEOMETRY.kernel_len()
            || bias.len() != CONV_CHANNELS
            || head.len() != feature_len() * c
            || head_bias.len() != c
        {
            return Err(NaeError::InvalidShape("toy classifier weight shapes".into()));
        }
        let names = TOY_CLASSES.iter().map(|s| s.to_string()).collect();
        Ok(Self { kernel, bias, head, head_bias, names })
    }

    pub(crate) fn vars(&self, g: &mut Graph, trainable: bool) -> ClassifierVars {
        let mut leaf = |t: Tensor| if trainable { g.param(t) } else { g.constant(t) };
        ClassifierVars {
            kernel: leaf(Tensor::vector(self.kernel.clone())),
            bias: leaf(Tensor::vector(self.bias.clone())),
            head: leaf(Tensor::matrix(feature_len(), TOY_CLASSES.len(), self.head.clone())),
            head_bias: leaf(Tensor::vector(self.head_bias.clone())),
        }
    }

    pub(crate) fn forward(g: &mut Graph, image: Var, w: ClassifierVars) -> Var {
        let conv = g.conv2d(image, w.kernel, w.bias, GEOMETRY);
        let act = g.tanh(conv);
        let pooled = g.avg_pool(act, GEOMETRY.out_h(), GEOMETRY.out_w(), CONV_CHANNELS, POOL);
        let flat = g.reshape(pooled, vec![feature_len()]);
        let logits = g.matmul(flat, w.head);
        g.add(logits, w.head_bias)
    }
}

impl Classifier for ToyClassifier {
    fn class_names(&self) -> &[String] {
        &self.names
    }

    fn input_shape(&self) -> (usize, usize, usize) {
        (CLASSIFIER_SIDE, CLASSIFIER_SIDE, 3)
    }

    fn logits_graph(&self, g: &mut Graph, image: Var) -> Var {
        let w = self.vars(g, false);
        Self::forward(g, image, w)
    }

    fn parameter_digest(&self) -> String {
        let mut d = Digest::new();
        d.update_str("toy-classifier");
        d.update_f64s(&self.kernel);
        d.update_f64s(&self.bias);
        d.update_f64s(&self.head);
        d.update_f64s(&self.head_bias);
        d.finish()
    }
}
