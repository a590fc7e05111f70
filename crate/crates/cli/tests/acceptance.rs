//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Run with `cargo test --test acceptance`.

use std::cell::{Cell, RefCell};
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use chrono::{TimeZone, Utc};
use naegen_cli::commands::trace_files;
use naegen_cli::{cmd_campaign, cmd_generate, cmd_sweep, Config, Overrides};
use naegen_core::harness::{
    judge, latent_baseline, prefilter_classes, prepare_latents, run_campaign, AttackTemplate, CampaignSetup,
    PreparedLatents, Verdict,
};
use naegen_core::optimizer::{initial_variable, objective_and_gradient, objective_value, run_optimization, OptimizationConfig};
use naegen_core::par::Schedule;
use naegen_core::registry::{Registry, ANALYTIC_SEED};
use naegen_core::scripted::{scripted_backends, scripted_class_name, scripted_latent, scripted_prompt};
use naegen_core::toy::analytic::ANALYTIC_LATENT;
use naegen_core::toy::{analytic_pipeline, class_prompt, load_default_fixture, DEFAULT_FIXTURE_SEED, TOY_CLASSES};
use naegen_core::{AcceptAllOracle, AttackSpec, HumanOracle, LatentVector, OracleLabel};
use naegen_review::ReviewStore;
use proptest::prelude::*;
use proptest::test_runner::{Config as RunnerConfig, RngAlgorithm, TestRng, TestRunner};

type Outcome = Result<String, String>;

/// Uniform draw in [0, 1) from a seed and a counter.
fn uniform(seed: u64, i: u64) -> f64 {
    (naegen_core::seeds::derive_seed(seed, &[i]) >> 11) as f64 / (1u64 << 53) as f64
}

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, started: Instant, outcome: Outcome) -> Outcome {
    let took = started.elapsed();
    match outcome {
        Ok(d) if took <= limit => Ok(format!("{d}; {:.1}s", took.as_secs_f64())),
        Ok(d) => Err(format!("{d}; took {:.1}s, limit {}s", took.as_secs_f64(), limit.as_secs())),
        Err(d) => Err(format!("{d}; {:.1}s", took.as_secs_f64())),
    }
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

fn gradient_fidelity() -> Outcome {
    let started = Instant::now();
    let b = analytic_pipeline(ANALYTIC_SEED);
    let config = OptimizationConfig::default();
    let mut worst: f64 = 0.0;
    for i in 0..10u64 {
        let spec = AttackSpec {
            lambda: [0.0, 0.7][i as usize % 2],
            ..AttackSpec::targeted("a photo of alpha", "alpha", 1 + i as usize % 2)
        };
        let z = LatentVector::sample(ANALYTIC_LATENT, i);
        let init = initial_variable(&spec, &config, &b, &z).map_err(|e| e.to_string())?;
        let point: Vec<f64> =
            init.iter().enumerate().map(|(j, v)| v + uniform(99 + i, j as u64) - 0.5).collect();
        let (_, grad) = objective_and_gradient(&spec, &config, &b, &z, &point).map_err(|e| e.to_string())?;
        let h = 1e-4;
        let mut fd = vec![0.0; point.len()];
        for j in 0..point.len() {
            let mut up = point.clone();
            let mut down = point.clone();
            up[j] += h;
            down[j] -= h;
            let f = |p: &[f64]| objective_value(&spec, &config, &b, &z, p).map_err(|e| e.to_string());
            fd[j] = (f(&up)? - f(&down)?) / (2.0 * h);
        }
        worst = worst.max(relative_error(&grad, &fd));
    }
    within(Duration::from_secs(10), started, check(worst < 1e-4, format!("max relative error {worst:.2e} over 10 points")))
}

fn brute_force() -> Outcome {
    let started = Instant::now();
    let b = analytic_pipeline(ANALYTIC_SEED);
    let spec = AttackSpec { lambda: 0.05, ..AttackSpec::targeted("a photo of alpha", "alpha", 1) };
    let z = LatentVector::sample(ANALYTIC_LATENT, 3);
    let config = OptimizationConfig { learning_rate: 0.002, steps: 5000, ..OptimizationConfig::default() };
    let init = initial_variable(&spec, &config, &b, &z).map_err(|e| e.to_string())?;
    let mut grid_min = f64::INFINITY;
    for i in 0..=100 {
        for j in 0..=100 {
            let p = [init[0] - 0.5 + 0.01 * i as f64, init[1] - 0.5 + 0.01 * j as f64];
            grid_min = grid_min.min(objective_value(&spec, &config, &b, &z, &p).map_err(|e| e.to_string())?);
        }
    }
    let trace = run_optimization(&spec, &config, &b, &z).map_err(|e| e.to_string())?;
    let last = trace.final_step().loss.total;
    within(
        Duration::from_secs(60),
        started,
        check(last <= grid_min + 1e-3, format!("final objective {last:.6}, grid minimum {grid_min:.6}")),
    )
}

fn scripted_template() -> AttackTemplate {
    AttackTemplate::untargeted(scripted_prompt("{class}"))
}

fn scripted_latents(vulnerable: usize) -> Vec<PreparedLatents> {
    (0..20)
        .map(|c| PreparedLatents {
            class_name: scripted_class_name(c),
            class_index: c,
            latents: (0..10).map(|j| scripted_latent(c * 10 + j < vulnerable, j as u64)).collect(),
            drawn: 10,
            rejected: 0,
        })
        .collect()
}

fn accounting() -> Outcome {
    let b = scripted_backends(&[1.0; 20]).map_err(|e| e.to_string())?;
    let setup = CampaignSetup {
        template: scripted_template(),
        optimization: OptimizationConfig { steps: 5, ..OptimizationConfig::default() },
        master_seed: 0,
        schedule: Schedule::default(),
        out_dir: None,
    };
    let ours = run_campaign(&scripted_latents(87), &setup, &b, &AcceptAllOracle).map_err(|e| e.to_string())?;
    let base = latent_baseline(&scripted_latents(28), &setup, &b, &AcceptAllOracle).map_err(|e| e.to_string())?;
    let (o, g) = (&ours.report.overall, &base.report.overall);
    check(
        o.total_runs == 200 && o.fooling_rate == 0.435 && g.total_runs == 200 && g.fooling_rate == 0.140,
        format!("{}/{} -> {}, baseline {}/{} -> {}", o.strict_successes, o.total_runs, o.fooling_rate, g.strict_successes, g.total_runs, g.fooling_rate),
    )
}

fn prefilter() -> Outcome {
    let accuracy: Vec<f64> = (0..100).map(|i| if i % 4 == 0 { 1.0 } else { 0.7 * (i % 7) as f64 / 6.0 }).collect();
    let b = scripted_backends(&accuracy).map_err(|e| e.to_string())?;
    let classes: Vec<String> = (0..100).map(scripted_class_name).collect();
    let p = prefilter_classes(&classes, &scripted_template(), 100, 0.9, &b, &OptimizationConfig::default(), 11, Schedule::default())
        .map_err(|e| e.to_string())?;
    let expected: Vec<String> = (0..100).filter(|i| i % 4 == 0).map(scripted_class_name).collect();
    let kept = p.kept();
    check(kept == expected, format!("{} of 100 kept, {} expected", kept.len(), expected.len()))
}

fn init_purity() -> Outcome {
    let started = Instant::now();
    let b = load_default_fixture().map_err(|e| e.to_string())?.backends();
    let template = AttackTemplate::untargeted(class_prompt("{class}"));
    let config = OptimizationConfig::toy();
    let mut prepared = Vec::new();
    let mut wrong = 0;
    for (idx, class) in TOY_CLASSES.iter().enumerate() {
        let p = prepare_latents(class, 10, &template, &b, &config, 0, Schedule::default()).map_err(|e| e.to_string())?;
        let e_text = b.encoder.encode(&b.encoder.tokenize(&template.prompt(class).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?);
        for z in &p.latents {
            let img = b.generator.generate(z, &e_text, config.guidance_scale, config.sampling_steps).map_err(|e| e.to_string())?;
            wrong += (b.classifier.predict(&img).map_err(|e| e.to_string())? != idx) as usize;
        }
        prepared.push(p);
    }
    let setup = CampaignSetup {
        template,
        optimization: OptimizationConfig { steps: 0, ..config },
        master_seed: 0,
        schedule: Schedule::default(),
        out_dir: None,
    };
    let fooled = run_campaign(&prepared, &setup, &b, &AcceptAllOracle).map_err(|e| e.to_string())?.report.overall.fooled_runs;
    within(
        Duration::from_secs(120),
        started,
        check(wrong == 0 && fooled == 0, format!("{wrong} of 40 initializations misclassified, {fooled} fooled at step 0")),
    )
}

fn toy_config(out: &Path, overrides: Overrides) -> Result<Config, String> {
    Config::from_table(&toml::Table::new(), &Overrides { out: Some(out.to_path_buf()), ..overrides }).map_err(|e| e.to_string())
}

fn directional_ablation(tmp: &Path) -> Outcome {
    let started = Instant::now();
    let mut rates = Vec::new();
    for variable in ["class-token", "text-embedding", "latent"] {
        let mut cfg = toy_config(&tmp.join(variable), Overrides { variable: Some(variable.into()), ..Overrides::default() })?;
        cfg.oracle = naegen_cli::config::OracleChoice::AcceptAll;
        let s = cmd_campaign(&cfg, &Registry::builtin()).map_err(|e| e.to_string())?;
        if s.report.overall.total_runs != 40 {
            return Err(format!("{variable}: {} runs, expected 40", s.report.overall.total_runs));
        }
        rates.push(s.report.overall.fooling_rate);
    }
    within(
        Duration::from_secs(900),
        started,
        check(
            rates[0] >= rates[1] && rates[0] >= rates[2],
            format!(
                "class_token {:.3}, text_embedding {:.3}, latent {:.3} (fixture seed {DEFAULT_FIXTURE_SEED}, 4x10, 20 steps)",
                rates[0], rates[1], rates[2]
            ),
        ),
    )
}

fn lambda_monotone(tmp: &Path) -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for metric in ["euclidean", "cosine"] {
        let mut norms = Vec::new();
        for lambda in [0.0, 0.1, 1.0, 10.0] {
            let o = Overrides {
                class: Some("cat".into()),
                lambda: Some(lambda),
                metric: Some(metric.into()),
                ..Overrides::default()
            };
            let cfg = toy_config(&tmp.join(format!("{metric}-{lambda}")), o)?;
            norms.push(cmd_generate(&cfg, &Registry::builtin()).map_err(|e| e.to_string())?.final_perturbation_norm);
        }
        ok &= norms.windows(2).all(|w| w[1] <= w[0]);
        lines.push(format!("{metric} {:?}", norms.iter().map(|n| format!("{n:.6}")).collect::<Vec<_>>()));
    }
    check(ok, format!("cat, seed 0, final norms over lambda 0/0.1/1/10: {}", lines.join(", ")))
}

fn determinism(tmp: &Path) -> Outcome {
    let o = || Overrides { class: Some("broccoli".into()), seed: Some(42), ..Overrides::default() };
    let a = toy_config(&tmp.join("det-a"), o())?;
    let b = toy_config(&tmp.join("det-b"), o())?;
    let sa = cmd_generate(&a, &Registry::builtin()).map_err(|e| e.to_string())?;
    let sb = cmd_generate(&b, &Registry::builtin()).map_err(|e| e.to_string())?;
    let fa = trace_files(&a.out).map_err(|e| e.to_string())?;
    let fb = trace_files(&b.out).map_err(|e| e.to_string())?;
    check(
        fa == fb && sa.first_adversarial_step == sb.first_adversarial_step,
        format!("{} files compared byte for byte", fa.len()),
    )
}

fn sweep_zero_case(tmp: &Path) -> Outcome {
    let o = |out: &str, mags: Option<Vec<f64>>| {
        toy_config(
            &tmp.join(out),
            Overrides { class: Some("candle".into()), seed: Some(8), steps: Some(0), magnitudes: mags, ..Overrides::default() },
        )
    };
    let mags = vec![0.0, 1.0, 4.0, 16.0];
    let s1 = o("sweep-1", Some(mags.clone()))?;
    let s2 = o("sweep-2", Some(mags))?;
    let m1 = cmd_sweep(&s1, &Registry::builtin()).map_err(|e| e.to_string())?;
    let m2 = cmd_sweep(&s2, &Registry::builtin()).map_err(|e| e.to_string())?;
    let g = o("sweep-base", None)?;
    cmd_generate(&g, &Registry::builtin()).map_err(|e| e.to_string())?;
    let base = naegen_core::trace_io::read_trace(&g.out).map_err(|e| e.to_string())?;
    let read = |p: &Path| fs::read(p).map_err(|e| e.to_string());
    let zero_png = read(&s1.out.join(&m1.images[0].file))?;
    let base_file = base.steps[0].image_path.clone().ok_or("baseline step has no image")?;
    let base_png = read(&g.out.join(base_file))?;
    let mut same_files = true;
    for (a, b) in m1.images.iter().zip(&m2.images) {
        same_files &= read(&s1.out.join(&a.file))? == read(&s2.out.join(&b.file))?;
    }
    check(
        m1.images[0].image_digest == base.steps[0].image_digest && zero_png == base_png && m1 == m2 && same_files,
        format!("magnitude 0 matches baseline {}, {} magnitudes repeat exactly", &base.steps[0].image_digest[..12], m1.images.len()),
    )
}

fn strict_implies_relaxed(tmp: &Path) -> Outcome {
    // Scripted campaign left to review, labeled at random through the review store.
    let dir = tmp.join("review");
    let b = scripted_backends(&[1.0; 4]).map_err(|e| e.to_string())?;
    let latents: Vec<PreparedLatents> = (0..4)
        .map(|c| PreparedLatents {
            class_name: scripted_class_name(c),
            class_index: c,
            latents: (0..5).map(|j| scripted_latent(j < 3, j as u64)).collect(),
            drawn: 5,
            rejected: 0,
        })
        .collect();
    let setup = CampaignSetup {
        template: scripted_template(),
        optimization: OptimizationConfig { steps: 4, ..OptimizationConfig::default() },
        master_seed: 1,
        schedule: Schedule::default(),
        out_dir: Some(dir.clone()),
    };
    run_campaign(&latents, &setup, &b, &HumanOracle).map_err(|e| e.to_string())?;
    let mut opened = ReviewStore::open(&dir).map_err(|e| e.to_string())?;
    let queued = opened.enqueue_campaign(false).map_err(|e| e.to_string())?;
    let ids: Vec<(String, Option<usize>)> = opened.queue(None, None).iter().map(|(e, _)| (e.candidate_id.clone(), e.expected_class)).collect();

    let label = (0..ids.len(), 0..3usize, any::<bool>(), any::<bool>(), proptest::option::of(0..5usize), 0..10_000i64);
    let config = RunnerConfig { cases: 64, failure_persistence: None, ..RunnerConfig::default() };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    // The runner takes a `Fn`, so the store and tallies live in cells.
    let store = RefCell::new(opened);
    let (accepted, rejected) = (Cell::new(0usize), Cell::new(0usize));
    let result = runner.run(&proptest::collection::vec(label, 1..12), |labels| {
        let mut plain = Vec::new();
        for (item, reviewer, gt, natural, assigned, t) in labels {
            let (id, expected) = &ids[item];
            let l = OracleLabel {
                candidate_id: id.clone(),
                reviewer: format!("r{reviewer}"),
                ground_truth_preserved: gt,
                natural,
                assigned_label: if gt { *expected } else { assigned },
                timestamp: Utc.timestamp_opt(t, 0).unwrap(),
            };
            plain.push(l.clone());
            let receipt = store.borrow_mut().submit_label(l);
            match receipt {
                Ok(r) => {
                    accepted.set(accepted.get() + 1);
                    prop_assert!(r.strict_success != Verdict::Success || r.relaxed_success == Verdict::Success);
                }
                Err(_) => rejected.set(rejected.get() + 1),
            }
        }
        let (strict, relaxed) = judge(Some(1), &plain);
        prop_assert!(strict != Verdict::Success || relaxed == Verdict::Success);
        let store = store.borrow();
        for r in store.judged_records() {
            prop_assert!(r.strict_success != Verdict::Success || r.relaxed_success == Verdict::Success, "{}", r.run_id);
        }
        let o = &store.report().overall;
        prop_assert!(o.strict_successes <= o.relaxed_successes);
        Ok(())
    });
    let report = store.borrow().report().overall.clone();
    let detail = format!(
        "{queued} candidates, {} labels accepted, {} rejected; strict {} relaxed {}",
        accepted.get(),
        rejected.get(),
        report.strict_successes,
        report.relaxed_successes
    );
    match result {
        Ok(()) => Ok(detail),
        Err(e) => Err(format!("{detail}; {e}")),
    }
}

fn main() -> ExitCode {
    let tmp = match tempfile::tempdir() {
        Ok(t) => t,
        Err(e) => {
            eprintln!("cannot create a scratch directory: {e}");
            return ExitCode::FAILURE;
        }
    };
    let t = tmp.path();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("gradient fidelity", Box::new(gradient_fidelity)),
        ("brute-force oracle", Box::new(brute_force)),
        ("accounting identity", Box::new(accounting)),
        ("prefilter identity", Box::new(prefilter)),
        ("init purity", Box::new(init_purity)),
        ("directional ablation", Box::new(|| directional_ablation(t))),
        ("lambda monotonicity", Box::new(|| lambda_monotone(t))),
        ("determinism", Box::new(|| determinism(t))),
        ("sweep zero-case", Box::new(|| sweep_zero_case(t))),
        ("strict implies relaxed", Box::new(|| strict_implies_relaxed(t))),
    ];
    let mut failed = 0;
    for (name, run) in &criteria {
        match run() {
            Ok(d) => println!("PASS {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL {name}: {d}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
