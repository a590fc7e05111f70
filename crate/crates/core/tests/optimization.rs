use naegen_core::autograd::{Graph, Tensor};
use naegen_core::objective::attack_loss_graph;
use naegen_core::optimizer::{
    objective_and_gradient, rademacher_sweep, run_optimization, OptimizationConfig, VariableChoice,
};
use naegen_core::toy::{class_prompt, load_default_fixture, TOY_CLASSES};
use naegen_core::{
    preprocess_graph, tokenize_with_class, AttackMode, AttackSpec, Backends, LatentVector, NaeError, RegularizerMetric,
};

fn toy() -> Backends {
    load_default_fixture().unwrap().backends()
}

fn spec(class: usize) -> AttackSpec {
    let name = TOY_CLASSES[class];
    AttackSpec::untargeted(class_prompt(name), name, class)
}

fn latent(seed: u64) -> LatentVector {
    LatentVector::sample(16, seed)
}

#[test]
fn trace_has_every_step_and_starts_unperturbed() {
    let b = toy();
    let trace = run_optimization(&spec(0), &OptimizationConfig::toy(), &b, &latent(1)).unwrap();
    assert_eq!(trace.steps.len(), 21);
    assert_eq!(trace.images.len(), 21);
    assert_eq!(trace.steps[0].perturbation_norm, 0.0);
    assert!(trace.steps.iter().enumerate().all(|(i, s)| s.step == i));
    let first = trace.steps.iter().position(|s| s.adversarial);
    assert_eq!(trace.first_adversarial_step, first);
    assert_eq!(trace.class_indices, vec![6]);
}

#[test]
fn step_zero_image_is_plain_generation() {
    let b = toy();
    for choice in VariableChoice::ALL {
        let config = OptimizationConfig { variable_choice: choice, steps: 1, ..OptimizationConfig::toy() };
        let s = spec(2);
        let z = latent(5);
        let trace = run_optimization(&s, &config, &b, &z).unwrap();
        let tokens = tokenize_with_class(&s.prompt, &s.class_keyword, b.encoder.as_ref()).unwrap();
        let plain = b.generator.generate(&z, &b.encoder.encode(&tokens), 7.5, 5).unwrap();
        assert_eq!(trace.images[0], plain, "{choice}");
        assert_eq!(trace.steps[0].image_digest, plain.digest());
    }
}

#[test]
fn runs_are_deterministic_and_leave_models_frozen() {
    let b = toy();
    let before = (b.encoder.parameter_digest(), b.generator.parameter_digest(), b.classifier.parameter_digest());
    let config = OptimizationConfig::toy();
    let a = run_optimization(&spec(1), &config, &b, &latent(3)).unwrap();
    let c = run_optimization(&spec(1), &config, &b, &latent(3)).unwrap();
    assert_eq!(a, c);
    let after = (b.encoder.parameter_digest(), b.generator.parameter_digest(), b.classifier.parameter_digest());
    assert_eq!(before, after);
    assert_eq!(a.model_digest, b.parameter_digest());
}

#[test]
fn huge_lambda_shrinks_the_perturbation() {
    let b = toy();
    let config = OptimizationConfig::toy();
    let free = run_optimization(&spec(3), &config, &b, &latent(9)).unwrap();
    let mut pinned_spec = spec(3);
    pinned_spec.lambda = 1e6;
    let pinned = run_optimization(&pinned_spec, &config, &b, &latent(9)).unwrap();
    assert!(pinned.final_step().perturbation_norm < free.final_step().perturbation_norm);
}

#[test]
fn strong_regularization_pulls_back_for_both_metrics() {
    // Adam normalizes each coordinate, so small λ can move the final norm
    // either way by about one learning rate; a dominant λ always shrinks it.
    let b = toy();
    let config = OptimizationConfig::toy();
    for metric in [RegularizerMetric::Euclidean, RegularizerMetric::Cosine] {
        for class in 0..4 {
            let norm = |lambda| {
                let s = AttackSpec { lambda, regularizer_metric: metric, ..spec(class) };
                run_optimization(&s, &config, &b, &latent(40 + class as u64)).unwrap().final_step().perturbation_norm
            };
            let (free, strong) = (norm(0.0), norm(10.0));
            assert!(strong < free, "{metric:?} class {class}: {strong} vs {free}");
        }
    }
}

#[test]
fn stop_at_first_adversarial_truncates() {
    let b = toy();
    let config = OptimizationConfig { stop_at_first_adversarial: true, ..OptimizationConfig::toy() };
    let t = run_optimization(&spec(0), &config, &b, &latent(1)).unwrap();
    let first = t.first_adversarial_step.expect("toy class-token attack fools the classifier");
    assert_eq!(t.steps.len(), first + 1);
}

#[test]
fn gradient_through_the_sampler_is_finite_and_nonzero() {
    let b = toy();
    let config = OptimizationConfig::toy();
    for class in 0..4 {
        let s = spec(class);
        let z = latent(70 + class as u64);
        let tokens = tokenize_with_class(&s.prompt, &s.class_keyword, b.encoder.as_ref()).unwrap();
        let (_, grad) = objective_and_gradient(&s, &config, &b, &z, &tokens.class_rows()).unwrap();
        assert!(grad.iter().all(|g| g.is_finite()));
        assert!(grad.iter().map(|g| g * g).sum::<f64>() > 0.0);
    }
}

#[test]
fn gradient_also_reaches_text_embedding_and_latent() {
    let b = toy();
    let s = spec(0);
    let z = latent(2);
    let tokens = tokenize_with_class(&s.prompt, &s.class_keyword, b.encoder.as_ref()).unwrap();
    let e_text = b.encoder.encode(&tokens).values;
    for (choice, point) in [(VariableChoice::TextEmbedding, e_text), (VariableChoice::Latent, z.values.clone())] {
        let config = OptimizationConfig { variable_choice: choice, ..OptimizationConfig::toy() };
        let (_, grad) = objective_and_gradient(&s, &config, &b, &z, &point).unwrap();
        assert!(grad.iter().any(|g| *g != 0.0), "{choice}");
    }
}

#[test]
fn loss_graph_matches_classifier_logits() {
    // The graph used for optimization scores the same image the classifier sees.
    let b = toy();
    let s = spec(1);
    let z = latent(4);
    let tokens = tokenize_with_class(&s.prompt, &s.class_keyword, b.encoder.as_ref()).unwrap();
    let img = b.generator.generate(&z, &b.encoder.encode(&tokens), 7.5, 5).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(img.pixels().to_vec()));
    let resized = preprocess_graph(&mut g, x, b.generator.output_shape(), b.classifier.input_shape()).unwrap();
    let logits = b.classifier.logits_graph(&mut g, resized);
    let loss = attack_loss_graph(&mut g, logits, AttackMode::Untargeted, Some(1)).unwrap();
    let trace = run_optimization(&s, &OptimizationConfig { steps: 0, ..OptimizationConfig::toy() }, &b, &z).unwrap();
    assert_eq!(trace.steps[0].logits, g.data(logits));
    assert_eq!(trace.steps[0].loss.loss_term, g.data(loss)[0]);
}

#[test]
fn input_errors_surface() {
    let b = toy();
    let config = OptimizationConfig::toy();
    let missing = AttackSpec::untargeted("a high-quality image of a candle", "cat", 0);
    assert!(matches!(run_optimization(&missing, &config, &b, &latent(1)), Err(NaeError::KeywordNotFound { .. })));
    assert!(matches!(run_optimization(&spec(0), &config, &b, &latent_dim(3)), Err(NaeError::InvalidShape(_))));
    let bad_lr = OptimizationConfig { learning_rate: 0.0, ..config };
    assert!(matches!(run_optimization(&spec(0), &bad_lr, &b, &latent(1)), Err(NaeError::InvalidConfig(_))));
}

fn latent_dim(dim: usize) -> LatentVector {
    LatentVector::sample(dim, 0)
}

#[test]
fn sweep_zero_magnitude_and_determinism() {
    let b = toy();
    let s = spec(0);
    let z = latent(8);
    let tokens = tokenize_with_class(&s.prompt, &s.class_keyword, b.encoder.as_ref()).unwrap();
    let baseline = b.generator.generate(&z, &b.encoder.encode(&tokens), 7.5, 5).unwrap();
    let mags = [0.0, 1.0, 2.0, 4.0, 8.0];
    let run = |seed| {
        rademacher_sweep(&tokens, &mags, seed, &z, b.generator.as_ref(), b.encoder.as_ref(), 7.5, 5).unwrap()
    };
    let a = run(3);
    assert_eq!(a.len(), 5);
    assert_eq!(a[0], baseline);
    assert_ne!(a[4], baseline);
    assert_eq!(a, run(3));
    assert_ne!(a[4], run(4)[4]);
    assert!(rademacher_sweep(&tokens, &[2.0, 1.0], 3, &z, b.generator.as_ref(), b.encoder.as_ref(), 7.5, 5).is_err());
    assert!(rademacher_sweep(&tokens, &[-1.0], 3, &z, b.generator.as_ref(), b.encoder.as_ref(), 7.5, 5).is_err());
}
