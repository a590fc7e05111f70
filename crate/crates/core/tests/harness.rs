use std::fs;

use naegen_core::harness::{
    judge, latent_baseline, load_records, prefilter_classes, prepare_latents, run_campaign, AttackTemplate,
    CampaignReport, CampaignSetup, PreparedLatents, Verdict, REPORT_CSV, REPORT_JSON,
};
use naegen_core::optimizer::{OptimizationConfig, VariableChoice};
use naegen_core::par::Schedule;
use naegen_core::scripted::{scripted_backends, scripted_class_name, scripted_latent, scripted_prompt};
use naegen_core::toy::{class_prompt, load_default_fixture, TOY_CLASSES};
use naegen_core::trace_io::read_trace;
use naegen_core::{AcceptAllOracle, HumanOracle, LatentVector, NaeError};

fn scripted_template() -> AttackTemplate {
    AttackTemplate::untargeted(scripted_prompt("{class}"))
}

/// `classes × per_class` scripted runs, the first `vulnerable` of them (in run order) attackable.
fn scripted_latents(classes: usize, per_class: usize, vulnerable: usize) -> Vec<PreparedLatents> {
    (0..classes)
        .map(|c| PreparedLatents {
            class_name: scripted_class_name(c),
            class_index: c,
            latents: (0..per_class)
                .map(|j| {
                    let n = c * per_class + j;
                    scripted_latent(n < vulnerable, n as u64)
                })
                .collect(),
            drawn: per_class,
            rejected: 0,
        })
        .collect()
}

fn setup(variable: VariableChoice) -> CampaignSetup {
    CampaignSetup {
        template: scripted_template(),
        optimization: OptimizationConfig { variable_choice: variable, ..OptimizationConfig::default() },
        master_seed: 1,
        schedule: Schedule::default(),
        out_dir: None,
    }
}

#[test]
fn scripted_accounting_is_exact() {
    let b = scripted_backends(&[1.0; 20]).unwrap();
    let out = run_campaign(&scripted_latents(20, 10, 87), &setup(VariableChoice::ClassToken), &b, &AcceptAllOracle)
        .unwrap();
    let r = &out.report;
    assert_eq!(r.overall.total_runs, 200);
    assert_eq!(r.overall.fooled_runs, 87);
    assert_eq!(r.overall.strict_successes, 87);
    assert_eq!(r.overall.fooling_rate, 0.435);
    assert_eq!(r.strict_rate_labeled, Some(0.435));

    let base = latent_baseline(&scripted_latents(20, 10, 28), &setup(VariableChoice::ClassToken), &b, &AcceptAllOracle)
        .unwrap();
    assert_eq!(base.report.overall.strict_successes, 28);
    assert_eq!(base.report.overall.fooling_rate, 0.14);
    assert_eq!(base.report.per_variable.keys().collect::<Vec<_>>(), ["latent"]);
}

#[test]
fn pending_reviews_do_not_count_as_successes() {
    let b = scripted_backends(&[1.0; 4]).unwrap();
    let out = run_campaign(&scripted_latents(4, 5, 6), &setup(VariableChoice::ClassToken), &b, &HumanOracle).unwrap();
    let r = &out.report;
    assert_eq!(r.overall.fooled_runs, 6);
    assert_eq!(r.overall.pending_reviews, 6);
    assert_eq!(r.overall.strict_successes, 0);
    assert_eq!(r.overall.fooling_rate, 0.0);
    assert_eq!(r.classifier_fooling_rate, 0.3);
    // The 14 unfooled runs are settled failures.
    assert_eq!(r.strict_rate_labeled, Some(0.0));
}

#[test]
fn prefilter_keeps_exactly_the_accurate_classes() {
    // Every fourth class is reliable; the rest sit between 0 and 0.7.
    let accuracy: Vec<f64> = (0..100).map(|i| if i % 4 == 0 { 1.0 } else { 0.7 * (i % 7) as f64 / 6.0 }).collect();
    let b = scripted_backends(&accuracy).unwrap();
    let classes: Vec<String> = (0..100).map(scripted_class_name).collect();
    let p = prefilter_classes(&classes, &scripted_template(), 100, 0.9, &b, &OptimizationConfig::default(), 3, Schedule::default())
        .unwrap();
    let expected: Vec<String> = (0..100).filter(|i| i % 4 == 0).map(scripted_class_name).collect();
    assert_eq!(p.kept(), expected);
    assert_eq!(p.classes.len(), 100);

    let hopeless = scripted_backends(&[0.0, 0.0]).unwrap();
    let two = &classes[..2];
    let err = prefilter_classes(two, &scripted_template(), 10, 0.9, &hopeless, &OptimizationConfig::default(), 3, Schedule::default());
    assert!(matches!(err, Err(NaeError::NoViableClasses)));
}

#[test]
fn prepare_latents_rejects_and_gives_up() {
    let b = scripted_backends(&[1.0, 0.0, 0.5]).unwrap();
    let config = OptimizationConfig::default();
    let t = scripted_template();
    let sure = prepare_latents("class000", 10, &t, &b, &config, 5, Schedule::default()).unwrap();
    assert_eq!((sure.latents.len(), sure.drawn, sure.rejected), (10, 10, 0));

    let coin = prepare_latents("class002", 10, &t, &b, &config, 5, Schedule::default()).unwrap();
    assert_eq!(coin.latents.len(), 10);
    assert_eq!(coin.drawn, coin.rejected + 10);
    assert!(coin.rejected > 0);

    match prepare_latents("class001", 2, &t, &b, &config, 5, Schedule::new(3)) {
        Err(NaeError::LatentSearchExhausted { accepted, drawn, .. }) => assert_eq!((accepted, drawn), (0, 200)),
        other => panic!("expected exhaustion, got {other:?}"),
    }
    assert!(matches!(
        prepare_latents("nope", 1, &t, &b, &config, 5, Schedule::default()),
        Err(NaeError::InvalidConfig(_))
    ));
}

#[test]
fn prepared_latents_do_not_depend_on_workers() {
    let b = scripted_backends(&[0.5, 0.5]).unwrap();
    let config = OptimizationConfig::default();
    let one = prepare_latents("class001", 7, &scripted_template(), &b, &config, 9, Schedule::SEQUENTIAL).unwrap();
    let many = prepare_latents("class001", 7, &scripted_template(), &b, &config, 9, Schedule::new(4)).unwrap();
    assert_eq!(one, many);
}

#[test]
fn zero_steps_fool_nothing() {
    let b = scripted_backends(&[1.0; 3]).unwrap();
    let mut s = setup(VariableChoice::ClassToken);
    s.optimization.steps = 0;
    let out = run_campaign(&scripted_latents(3, 4, 12), &s, &b, &AcceptAllOracle).unwrap();
    assert_eq!(out.report.overall.fooled_runs, 0);
    assert_eq!(out.report.overall.fooling_rate, 0.0);
    assert_eq!(out.report.mean_first_adversarial_step, None);
}

#[test]
fn campaign_aborts_when_most_runs_fail() {
    let b = scripted_backends(&[1.0; 2]).unwrap();
    let mut latents = scripted_latents(2, 3, 0);
    // Wrong latent dimension makes the run error out.
    for (c, j) in [(0, 0), (0, 1), (0, 2), (1, 0)] {
        latents[c].latents[j] = LatentVector { values: vec![0.0; 2], seed: j as u64 };
    }
    match run_campaign(&latents, &setup(VariableChoice::ClassToken), &b, &AcceptAllOracle) {
        Err(NaeError::CampaignAborted { failed, total }) => assert_eq!((failed, total), (4, 6)),
        other => panic!("expected abort, got {other:?}"),
    }
    // Exactly half failing is tolerated and reported.
    latents[1].latents[0] = scripted_latent(false, 0);
    latents[0].latents[0] = scripted_latent(false, 0);
    let out = run_campaign(&latents, &setup(VariableChoice::ClassToken), &b, &AcceptAllOracle).unwrap();
    assert_eq!(out.report.overall.failed_runs, 2);
    assert!(out.records.iter().filter_map(|r| r.error.as_deref()).all(|e| e.starts_with("invalid_shape")));
}

fn toy_latents(schedule: Schedule) -> Vec<PreparedLatents> {
    let b = load_default_fixture().unwrap().backends();
    let t = AttackTemplate::untargeted(class_prompt("{class}"));
    TOY_CLASSES[..2]
        .iter()
        .map(|c| prepare_latents(c, 3, &t, &b, &OptimizationConfig::toy(), 21, schedule).unwrap())
        .collect()
}

fn toy_setup(schedule: Schedule, out_dir: Option<std::path::PathBuf>) -> CampaignSetup {
    CampaignSetup {
        template: AttackTemplate::untargeted(class_prompt("{class}")),
        optimization: OptimizationConfig { steps: 6, ..OptimizationConfig::toy() },
        master_seed: 21,
        schedule,
        out_dir,
    }
}

#[test]
fn sequential_and_parallel_campaigns_agree() {
    let b = load_default_fixture().unwrap().backends();
    let latents = toy_latents(Schedule::SEQUENTIAL);
    assert_eq!(latents, toy_latents(Schedule::new(4)));
    let seq = run_campaign(&latents, &toy_setup(Schedule::SEQUENTIAL, None), &b, &AcceptAllOracle).unwrap();
    let par = run_campaign(&latents, &toy_setup(Schedule::new(4), None), &b, &AcceptAllOracle).unwrap();
    assert_eq!(seq.records, par.records);
    assert_eq!(seq.report.to_json().unwrap(), par.report.to_json().unwrap());
}

#[test]
fn campaign_directory_round_trips() {
    let b = load_default_fixture().unwrap().backends();
    let dir = tempfile::tempdir().unwrap();
    let out = run_campaign(
        &toy_latents(Schedule::default()),
        &toy_setup(Schedule::default(), Some(dir.path().to_path_buf())),
        &b,
        &HumanOracle,
    )
    .unwrap();
    let loaded = load_records(dir.path()).unwrap();
    let mut expected = out.records.clone();
    expected.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    assert_eq!(loaded, expected);
    let report = fs::read_to_string(dir.path().join(REPORT_JSON)).unwrap();
    assert_eq!(CampaignReport::from_records(&loaded).to_json().unwrap(), report);
    let csv = fs::read_to_string(dir.path().join(REPORT_CSV)).unwrap();
    assert!(csv.lines().last().unwrap().starts_with("ALL,"));
    for r in &loaded {
        let trace = read_trace(&dir.path().join(r.trace_path.as_ref().unwrap())).unwrap();
        assert_eq!(trace.run_id, r.run_id);
        assert_eq!(trace.first_adversarial_step, r.first_adversarial_step);
        assert!(trace.steps.iter().all(|s| s.png_sha256.is_some()));
        if r.classifier_fooled {
            assert_eq!(r.strict_success, Verdict::Pending);
        }
    }
}

#[test]
fn toy_initializations_are_all_correct() {
    let b = load_default_fixture().unwrap().backends();
    let t = AttackTemplate::untargeted(class_prompt("{class}"));
    let config = OptimizationConfig::toy();
    for (idx, class) in TOY_CLASSES.iter().enumerate() {
        let p = prepare_latents(class, 10, &t, &b, &config, 20240217, Schedule::default()).unwrap();
        assert_eq!(p.latents.len(), 10);
        let tokens = b.encoder.tokenize(&t.prompt(class).unwrap()).unwrap();
        let e_text = b.encoder.encode(&tokens);
        for z in &p.latents {
            let img = b.generator.generate(z, &e_text, config.guidance_scale, config.sampling_steps).unwrap();
            assert_eq!(b.classifier.predict(&img).unwrap(), idx, "{class} seed {}", z.seed);
        }
    }
    let s = CampaignSetup {
        template: t,
        optimization: OptimizationConfig { steps: 0, ..config },
        master_seed: 0,
        schedule: Schedule::default(),
        out_dir: None,
    };
    let p: Vec<PreparedLatents> =
        TOY_CLASSES.iter().map(|c| prepare_latents(c, 5, &s.template, &b, &s.optimization, 2, Schedule::default()).unwrap()).collect();
    assert_eq!(run_campaign(&p, &s, &b, &AcceptAllOracle).unwrap().report.overall.fooled_runs, 0);
}

#[test]
fn unanimous_and_split_reviews() {
    use chrono::{TimeZone, Utc};
    use naegen_core::OracleLabel;
    let label = |reviewer: &str, gt: bool, t: i64| OracleLabel {
        candidate_id: "x@1".into(),
        reviewer: reviewer.into(),
        ground_truth_preserved: gt,
        natural: true,
        assigned_label: Some(0),
        timestamp: Utc.timestamp_opt(t, 0).unwrap(),
    };
    assert_eq!(judge(Some(2), &[label("a", true, 0)]), (Verdict::Success, Verdict::Success));
    assert_eq!(judge(Some(2), &[label("a", true, 0), label("b", false, 0)]).0, Verdict::Pending);
    // b changes their mind; the later label counts.
    assert_eq!(
        judge(Some(2), &[label("a", true, 0), label("b", false, 0), label("b", true, 1)]),
        (Verdict::Success, Verdict::Success)
    );
    assert_eq!(judge(None, &[label("a", true, 0)]), (Verdict::Failure, Verdict::Failure));
}
