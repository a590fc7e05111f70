//! The optimization loop: perturb one variable (class-token rows, the whole
//! text embedding, or the latent) with Adam so the generated image fools the
//! classifier, recording every step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::Adam;
use crate::autograd::{softmax, Graph, Tensor, Var};
use crate::domain::{
    argmax, preprocess_graph, tokenize_with_class, AttackMode, AttackSpec, Backends, Generator, ImageTensor,
    LatentVector, OracleLabel, TextEncoder, TokenEmbeddingSequence,
};
use crate::error::{NaeError, Result};
use crate::objective::{attack_loss_graph, embedding_regularizer, regularizer_graph, total_objective, ObjectiveValue};

/// Defaults for full-size backends.
pub const DEFAULT_LEARNING_RATE: f64 = 0.001;
pub const DEFAULT_STEPS: usize = 20;
pub const DEFAULT_GUIDANCE_SCALE: f64 = 7.5;
pub const DEFAULT_SAMPLING_STEPS: usize = 20;
/// Sampling steps used with the toy generator.
pub const TOY_SAMPLING_STEPS: usize = 5;
/// Scale applied to the relative magnitudes of a Rademacher sweep.
pub const SWEEP_UNIT: f64 = 1e-3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariableChoice {
    #[default]
    ClassToken,
    TextEmbedding,
    Latent,
}

impl VariableChoice {
    pub const ALL: [VariableChoice; 3] = [Self::ClassToken, Self::TextEmbedding, Self::Latent];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::ClassToken => "class_token",
            Self::TextEmbedding => "text_embedding",
            Self::Latent => "latent",
        }
    }
}

impl std::fmt::Display for VariableChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for VariableChoice {
    type Err = NaeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "class_token" => Ok(Self::ClassToken),
            "text_embedding" => Ok(Self::TextEmbedding),
            "latent" => Ok(Self::Latent),
            _ => Err(NaeError::InvalidConfig(format!(
                "unknown variable `{s}` (expected class-token, text-embedding or latent)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizationConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub variable_choice: VariableChoice,
    pub guidance_scale: f64,
    pub sampling_steps: usize,
    pub seed: u64,
    /// Stop after the first step whose image fools the classifier.
    #[serde(default)]
    pub stop_at_first_adversarial: bool,
}

impl Default for OptimizationConfig {
    fn default() -> Self {
        Self {
            learning_rate: DEFAULT_LEARNING_RATE,
            steps: DEFAULT_STEPS,
            variable_choice: VariableChoice::ClassToken,
            guidance_scale: DEFAULT_GUIDANCE_SCALE,
            sampling_steps: DEFAULT_SAMPLING_STEPS,
            seed: 0,
            stop_at_first_adversarial: false,
        }
    }
}

impl OptimizationConfig {
    /// Defaults with the toy generator's sampling-step count.
    pub fn toy() -> Self {
        Self { sampling_steps: TOY_SAMPLING_STEPS, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NaeError::InvalidConfig(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.sampling_steps == 0 {
            return Err(NaeError::InvalidConfig("sampling_steps must be >= 1".into()));
        }
        if !self.guidance_scale.is_finite() {
            return Err(NaeError::InvalidConfig("guidance_scale must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 0 is the unperturbed initialization.
    pub step: usize,
    pub image_digest: String,
    /// Path of the persisted PNG relative to the trace directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub png_sha256: Option<String>,
    pub loss: ObjectiveValue,
    pub logits: Vec<f64>,
    pub predicted_class: usize,
    pub max_softmax: f64,
    /// Euclidean distance of the variable from its initialization.
    pub perturbation_norm: f64,
    pub adversarial: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizationTrace {
    /// Harness-assigned identifier; empty for standalone runs.
    #[serde(default)]
    pub run_id: String,
    pub config: OptimizationConfig,
    pub attack: AttackSpec,
    pub latent: LatentVector,
    pub class_indices: Vec<usize>,
    /// Classifier index of the class keyword, if it is a classifier class.
    pub expected_class: Option<usize>,
    pub model_digest: String,
    pub steps: Vec<StepRecord>,
    pub first_adversarial_step: Option<usize>,
    /// Set when the run stopped on a non-finite gradient.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub divergence: Option<String>,
    #[serde(skip)]
    pub images: Vec<ImageTensor>,
}

impl OptimizationTrace {
    pub fn final_step(&self) -> &StepRecord {
        self.steps.last().expect("trace always holds step 0")
    }

    pub fn first_adversarial(&self) -> Option<&StepRecord> {
        self.first_adversarial_step.map(|s| &self.steps[s])
    }

    pub fn image(&self, step: usize) -> Option<&ImageTensor> {
        self.images.get(step)
    }

    pub fn classifier_fooled(&self) -> bool {
        self.first_adversarial_step.is_some()
    }
}

/// Whether a step's prediction counts as fooling the classifier under `mode`.
///
/// In-distribution modes compare against the keyword's class. The OOD modes
/// compare the maximum softmax probability with the detector threshold: an
/// out-of-distribution keyword fools the detector once the prediction is
/// confident, an in-distribution one once it is not.
pub fn is_adversarial(spec: &AttackSpec, expected: Option<usize>, predicted: usize, max_softmax: f64) -> bool {
    match (spec.mode, expected) {
        (AttackMode::IdToOod, _) => max_softmax < spec.msp_threshold,
        (AttackMode::OodToId, None) => max_softmax >= spec.msp_threshold,
        (_, Some(gt)) => predicted != gt,
        (_, None) => false,
    }
}

struct Problem<'a> {
    spec: &'a AttackSpec,
    config: &'a OptimizationConfig,
    backends: &'a Backends,
    tokens: TokenEmbeddingSequence,
    e_text0: Vec<f64>,
    latent: &'a LatentVector,
    init: Vec<f64>,
}

struct Evaluation {
    objective: ObjectiveValue,
    grad: Vec<f64>,
    image: ImageTensor,
    logits: Vec<f64>,
}

impl Problem<'_> {
    fn build(&self, g: &mut Graph, current: &[f64]) -> Result<(Var, Var, Var, Var, Var)> {
        let enc = &self.backends.encoder;
        let gen = &self.backends.generator;
        let cls = &self.backends.classifier;
        let (k, d, dout) = (enc.padded_len(), self.tokens.dim, enc.output_dim());
        let var;
        let (z, e_text) = match self.config.variable_choice {
            VariableChoice::ClassToken => {
                let base = g.constant(Tensor::matrix(k, d, self.tokens.embeddings.clone()));
                var = g.param(Tensor::matrix(self.tokens.class_indices.len(), d, current.to_vec()));
                let tokens = g.replace_rows(base, var, &self.tokens.class_indices);
                let e_text = enc.encode_graph(g, tokens);
                (g.constant(Tensor::vector(self.latent.values.clone())), e_text)
            }
            VariableChoice::TextEmbedding => {
                var = g.param(Tensor::matrix(k, dout, current.to_vec()));
                (g.constant(Tensor::vector(self.latent.values.clone())), var)
            }
            VariableChoice::Latent => {
                var = g.param(Tensor::vector(current.to_vec()));
                (var, g.constant(Tensor::matrix(k, dout, self.e_text0.clone())))
            }
        };
        let image = gen.generate_graph(g, z, e_text, self.config.guidance_scale, self.config.sampling_steps)?;
        let resized = preprocess_graph(g, image, gen.output_shape(), cls.input_shape())?;
        let logits = cls.logits_graph(g, resized);
        let loss = attack_loss_graph(g, logits, self.spec.mode, self.spec.label)?;
        let total = if self.spec.lambda > 0.0 {
            let reg = regularizer_graph(g, var, &self.init, self.spec.regularizer_metric)?;
            let weighted = g.scale(reg, self.spec.lambda);
            g.add(loss, weighted)
        } else {
            loss
        };
        Ok((var, image, logits, loss, total))
    }

    fn evaluate(&self, current: &[f64]) -> Result<Evaluation> {
        let mut g = Graph::new();
        let (var, image, logits, loss, total) = self.build(&mut g, current)?;
        let (h, w, c) = self.backends.generator.output_shape();
        let image = ImageTensor::new(h, w, c, g.data(image).to_vec())?;
        let logits_v = g.data(logits).to_vec();
        let reg = embedding_regularizer(current, &self.init, self.spec.regularizer_metric)?;
        let objective = total_objective(g.data(loss)[0], reg, self.spec.lambda)?;
        let grad = g.backward(total).get_or_zero(var, current.len());
        Ok(Evaluation { objective, grad, image, logits: logits_v })
    }

    /// Objective value alone, for finite-difference checks.
    fn objective_at(&self, current: &[f64]) -> Result<f64> {
        let mut g = Graph::new();
        let (_, _, _, _, total) = self.build(&mut g, current)?;
        Ok(g.data(total)[0])
    }
}

fn setup<'a>(
    spec: &'a AttackSpec,
    config: &'a OptimizationConfig,
    backends: &'a Backends,
    z: &'a LatentVector,
) -> Result<(Problem<'a>, Option<usize>)> {
    config.validate()?;
    let tokens = tokenize_with_class(&spec.prompt, &spec.class_keyword, backends.encoder.as_ref())?;
    tokens.validate(backends.encoder.padded_len())?;
    z.validate(backends.generator.latent_dim())?;
    let expected = backends.classifier.class_index(&spec.class_keyword);
    spec.validate(expected, backends.classifier.num_classes())?;
    let e_text0 = backends.encoder.encode(&tokens).values;
    let init = match config.variable_choice {
        VariableChoice::ClassToken => tokens.class_rows(),
        VariableChoice::TextEmbedding => e_text0.clone(),
        VariableChoice::Latent => z.values.clone(),
    };
    Ok((Problem { spec, config, backends, tokens, e_text0, latent: z, init }, expected))
}

/// Run one optimization and return its full trace.
///
/// A non-finite gradient stops the run; the trace is returned truncated with
/// `divergence` set.
pub fn run_optimization(
    spec: &AttackSpec,
    config: &OptimizationConfig,
    backends: &Backends,
    z: &LatentVector,
) -> Result<OptimizationTrace> {
    let (problem, expected) = setup(spec, config, backends, z)?;
    let mut trace = OptimizationTrace {
        run_id: String::new(),
        config: config.clone(),
        attack: spec.clone(),
        latent: z.clone(),
        class_indices: problem.tokens.class_indices.clone(),
        expected_class: expected,
        model_digest: backends.parameter_digest(),
        steps: Vec::with_capacity(config.steps + 1),
        first_adversarial_step: None,
        divergence: None,
        images: Vec::with_capacity(config.steps + 1),
    };
    let mut current = problem.init.clone();
    let mut adam = Adam::new(current.len(), config.learning_rate);
    for step in 0..=config.steps {
        let eval = match problem.evaluate(&current) {
            Ok(e) => e,
            Err(NaeError::NumericalDivergence(msg)) => {
                trace.divergence = Some(format!("step {step}: {msg}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let probs = softmax(&eval.logits);
        let predicted = argmax(&eval.logits);
        let max_softmax = probs[predicted];
        let adversarial = is_adversarial(spec, expected, predicted, max_softmax);
        let perturbation_norm = if step == 0 {
            0.0
        } else {
            current.iter().zip(&problem.init).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
        };
        trace.steps.push(StepRecord {
            step,
            image_digest: eval.image.digest(),
            image_path: None,
            png_sha256: None,
            loss: eval.objective,
            logits: eval.logits,
            predicted_class: predicted,
            max_softmax,
            perturbation_norm,
            adversarial,
        });
        trace.images.push(eval.image);
        if adversarial && trace.first_adversarial_step.is_none() {
            trace.first_adversarial_step = Some(step);
            if config.stop_at_first_adversarial {
                break;
            }
        }
        if step == config.steps {
            break;
        }
        if eval.grad.iter().any(|v| !v.is_finite()) {
            trace.divergence = Some(format!("step {step}: non-finite gradient"));
            break;
        }
        adam.step(&mut current, &eval.grad);
    }
    Ok(trace)
}

/// Objective and its backpropagated gradient at `point` (a value of the chosen
/// variable), plus a closure-free objective evaluator for oracle checks.
pub fn objective_and_gradient(
    spec: &AttackSpec,
    config: &OptimizationConfig,
    backends: &Backends,
    z: &LatentVector,
    point: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let (problem, _) = setup(spec, config, backends, z)?;
    if point.len() != problem.init.len() {
        return Err(NaeError::InvalidShape(format!("point has {} values, variable has {}", point.len(), problem.init.len())));
    }
    let mut g = Graph::new();
    let (var, _, _, _, total) = problem.build(&mut g, point)?;
    let grad = g.backward(total).get_or_zero(var, point.len());
    Ok((g.data(total)[0], grad))
}

/// Objective value at `point` without a backward pass.
pub fn objective_value(
    spec: &AttackSpec,
    config: &OptimizationConfig,
    backends: &Backends,
    z: &LatentVector,
    point: &[f64],
) -> Result<f64> {
    let (problem, _) = setup(spec, config, backends, z)?;
    problem.objective_at(point)
}

/// Initial value of the chosen optimization variable.
pub fn initial_variable(
    spec: &AttackSpec,
    config: &OptimizationConfig,
    backends: &Backends,
    z: &LatentVector,
) -> Result<Vec<f64>> {
    Ok(setup(spec, config, backends, z)?.0.init)
}

fn require_label<'a>(trace: &OptimizationTrace, label: Option<&'a OracleLabel>) -> Result<Option<&'a OracleLabel>> {
    match (trace.first_adversarial_step, label) {
        (None, _) => Ok(None),
        (Some(step), None) => Err(NaeError::PendingReview { run_id: trace.run_id.clone(), step }),
        (Some(_), Some(l)) => Ok(Some(l)),
    }
}

/// `(strict, relaxed)` verdict of one oracle label on an adversarial image the
/// classifier assigned to `predicted`.
///
/// Relaxed: the image looks natural and the oracle disagrees with the
/// classifier. Strict: relaxed, and the oracle confirms the intended class
/// survived. Strict success therefore always implies relaxed success.
pub fn label_verdicts(predicted: usize, label: &OracleLabel) -> (bool, bool) {
    let relaxed = label.natural && label.assigned_label != Some(predicted);
    (relaxed && label.ground_truth_preserved, relaxed)
}

/// Relaxed success of the first adversarial step. Missing verdict → `PendingReview`.
pub fn is_success_relaxed(trace: &OptimizationTrace, label: Option<&OracleLabel>) -> Result<bool> {
    Ok(match require_label(trace, label)? {
        None => false,
        Some(l) => label_verdicts(trace.first_adversarial().expect("checked above").predicted_class, l).1,
    })
}

/// Strict success of the first adversarial step. Missing verdict → `PendingReview`.
pub fn is_success_strict(trace: &OptimizationTrace, label: Option<&OracleLabel>) -> Result<bool> {
    Ok(match require_label(trace, label)? {
        None => false,
        Some(l) => label_verdicts(trace.first_adversarial().expect("checked above").predicted_class, l).0,
    })
}

/// Generate one image per relative magnitude `m`, moving the class-token rows
/// along a fixed seeded ±1 direction by `m · 1e-3`.
#[allow(clippy::too_many_arguments)]
pub fn rademacher_sweep(
    tokens: &TokenEmbeddingSequence,
    relative_magnitudes: &[f64],
    seed: u64,
    latent: &LatentVector,
    generator: &dyn Generator,
    encoder: &dyn TextEncoder,
    guidance_scale: f64,
    sampling_steps: usize,
) -> Result<Vec<ImageTensor>> {
    tokens.validate(encoder.padded_len())?;
    if relative_magnitudes.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
        return Err(NaeError::InvalidConfig("sweep magnitudes must be finite and non-negative".into()));
    }
    if relative_magnitudes.windows(2).any(|w| w[1] < w[0]) {
        return Err(NaeError::InvalidConfig("sweep magnitudes must be ascending".into()));
    }
    let base = tokens.class_rows();
    let direction = rademacher_direction(base.len(), seed);
    relative_magnitudes
        .iter()
        .map(|&m| {
            let rows: Vec<f64> = base.iter().zip(&direction).map(|(b, d)| b + m * SWEEP_UNIT * d).collect();
            let perturbed = tokens.with_class_rows(&rows)?;
            generator.generate(latent, &encoder.encode(&perturbed), guidance_scale, sampling_steps)
        })
        .collect()
}

/// Seeded vector whose entries are +1 or -1 with equal probability.
pub fn rademacher_direction(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{AcceptAllOracle, Candidate, Oracle};
    use chrono::{DateTime, Utc};

    fn label(gt: bool, natural: bool, assigned: Option<usize>) -> OracleLabel {
        OracleLabel {
            candidate_id: "c".into(),
            reviewer: "r".into(),
            ground_truth_preserved: gt,
            natural,
            assigned_label: assigned,
            timestamp: DateTime::<Utc>::UNIX_EPOCH,
        }
    }

    fn synthetic_trace(adversarial_at: Option<usize>, expected: usize, predicted: usize) -> OptimizationTrace {
        let steps = (0..=10)
            .map(|s| StepRecord {
                step: s,
                image_digest: String::new(),
                image_path: None,
                png_sha256: None,
                loss: ObjectiveValue { total: 0.0, loss_term: 0.0, reg_term: 0.0 },
                logits: vec![],
                predicted_class: if adversarial_at.is_some_and(|a| s >= a) { predicted } else { expected },
                max_softmax: 1.0,
                perturbation_norm: 0.0,
                adversarial: adversarial_at.is_some_and(|a| s >= a),
            })
            .collect();
        OptimizationTrace {
            run_id: "run".into(),
            config: OptimizationConfig::default(),
            attack: AttackSpec::untargeted("a photo of a cat", "cat", expected),
            latent: LatentVector { values: vec![], seed: 0 },
            class_indices: vec![4],
            expected_class: Some(expected),
            model_digest: "m".into(),
            steps,
            first_adversarial_step: adversarial_at,
            divergence: None,
            images: vec![],
        }
    }

    #[test]
    fn no_adversarial_step_is_never_success() {
        let t = synthetic_trace(None, 0, 0);
        assert!(!is_success_strict(&t, None).unwrap());
        assert!(!is_success_relaxed(&t, None).unwrap());
    }

    #[test]
    fn strict_rule_follows_ground_truth_verdict() {
        let t = synthetic_trace(Some(7), 0, 2);
        assert!(is_success_strict(&t, Some(&label(true, true, Some(0)))).unwrap());
        assert!(!is_success_strict(&t, Some(&label(false, true, Some(1)))).unwrap());
        assert!(matches!(is_success_strict(&t, None), Err(NaeError::PendingReview { step: 7, .. })));
    }

    #[test]
    fn relaxed_rule() {
        let t = synthetic_trace(Some(7), 0, 2);
        // Strict success is also relaxed success.
        assert!(is_success_relaxed(&t, Some(&label(true, true, Some(0)))).unwrap());
        // Oracle sees a third class: a valid NAE, but not under the strict rule.
        let third = label(false, true, Some(3));
        assert!(is_success_relaxed(&t, Some(&third)).unwrap());
        assert!(!is_success_strict(&t, Some(&third)).unwrap());
        // Unnatural images never count.
        assert!(!is_success_relaxed(&t, Some(&label(true, false, Some(0)))).unwrap());
        // Oracle agrees with the classifier.
        assert!(!is_success_relaxed(&t, Some(&label(false, true, Some(2)))).unwrap());
    }

    #[test]
    fn accept_all_oracle_makes_strict_success() {
        let t = synthetic_trace(Some(3), 1, 0);
        let img = ImageTensor::constant(1, 1, 1, 0.5).unwrap();
        let c = Candidate {
            candidate_id: "x".into(),
            run_id: "r",
            step: 3,
            expected_class: Some(1),
            predicted_class: 0,
            image: &img,
        };
        let l = AcceptAllOracle.review(&c).unwrap();
        assert!(is_success_strict(&t, Some(&l)).unwrap());
    }

    #[test]
    fn variable_choice_parsing() {
        assert_eq!("class-token".parse::<VariableChoice>().unwrap(), VariableChoice::ClassToken);
        assert_eq!("text_embedding".parse::<VariableChoice>().unwrap(), VariableChoice::TextEmbedding);
        assert_eq!("latent".parse::<VariableChoice>().unwrap(), VariableChoice::Latent);
        assert!("pixels".parse::<VariableChoice>().is_err());
    }

    #[test]
    fn rademacher_direction_is_balanced_signs() {
        let d = rademacher_direction(4000, 1);
        assert!(d.iter().all(|v| *v == 1.0 || *v == -1.0));
        let plus = d.iter().filter(|v| **v > 0.0).count();
        assert!((1800..2200).contains(&plus));
        assert_eq!(d, rademacher_direction(4000, 1));
    }

    #[test]
    fn adversarial_predicate_per_mode() {
        let mut s = AttackSpec::untargeted("cat", "cat", 0);
        assert!(is_adversarial(&s, Some(0), 1, 0.9));
        assert!(!is_adversarial(&s, Some(0), 0, 0.9));
        s.mode = AttackMode::IdToOod;
        assert!(is_adversarial(&s, Some(0), 0, 0.3));
        assert!(!is_adversarial(&s, Some(0), 0, 0.7));
        s.mode = AttackMode::OodToId;
        assert!(is_adversarial(&s, None, 2, 0.7));
        assert!(!is_adversarial(&s, None, 2, 0.3));
    }
}
