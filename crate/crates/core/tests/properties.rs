use chrono::{TimeZone, Utc};
use naegen_core::adam::Adam;
use naegen_core::harness::{judge, CampaignReport, RunRecord, Verdict};
use naegen_core::optimizer::{label_verdicts, VariableChoice};
use naegen_core::seeds::derive_seed;
use naegen_core::OracleLabel;
use proptest::prelude::*;

fn arb_label() -> impl Strategy<Value = OracleLabel> {
    (0..4usize, any::<bool>(), any::<bool>(), proptest::option::of(0..5usize), 0..1000i64).prop_map(
        |(reviewer, gt, natural, assigned, t)| OracleLabel {
            candidate_id: "c@1".into(),
            reviewer: format!("r{reviewer}"),
            ground_truth_preserved: gt,
            natural,
            assigned_label: assigned,
            timestamp: Utc.timestamp_opt(t, 0).unwrap(),
        },
    )
}

fn arb_record() -> impl Strategy<Value = RunRecord> {
    (
        0..3usize,
        proptest::option::of(0..5usize),
        proptest::collection::vec(arb_label(), 0..5),
        any::<bool>(),
        0..3usize,
    )
        .prop_map(|(class, adv, labels, failed, variable)| {
            let mut r = RunRecord {
                run_id: String::new(),
                class_name: format!("k{class}"),
                class_index: Some(class),
                latent_seed: 0,
                run_seed: 0,
                variable_choice: VariableChoice::ALL[variable],
                trace_path: None,
                classifier_fooled: adv.is_some(),
                first_adversarial_step: adv.map(|a| a + 1),
                initial_prediction: Some(class),
                adversarial_prediction: adv,
                strict_success: Verdict::Failure,
                relaxed_success: Verdict::Failure,
                labels: Vec::new(),
                error: failed.then(|| "numerical_divergence: x".into()),
            };
            r.apply_labels(&labels);
            r.labels = labels;
            r
        })
}

proptest! {
    #[test]
    fn strict_implies_relaxed_per_label(predicted in 0..5usize, label in arb_label()) {
        let (strict, relaxed) = label_verdicts(predicted, &label);
        prop_assert!(!strict || relaxed);
    }

    #[test]
    fn strict_implies_relaxed_after_voting(
        predicted in proptest::option::of(0..5usize),
        labels in proptest::collection::vec(arb_label(), 0..8),
    ) {
        let (strict, relaxed) = judge(predicted, &labels);
        if strict == Verdict::Success {
            prop_assert_eq!(relaxed, Verdict::Success);
        }
        if relaxed == Verdict::Failure {
            prop_assert_eq!(strict, Verdict::Failure);
        }
    }

    #[test]
    fn report_is_consistent(mut records in proptest::collection::vec(arb_record(), 0..40), seed in any::<u64>()) {
        let report = CampaignReport::from_records(&records);
        let o = &report.overall;
        prop_assert_eq!(o.total_runs, records.len());
        prop_assert!(o.strict_successes <= o.relaxed_successes);
        prop_assert!(o.relaxed_successes <= o.fooled_runs);
        for rate in [o.fooling_rate, report.classifier_fooling_rate, report.relaxed_fooling_rate] {
            prop_assert!((0.0..=1.0).contains(&rate));
        }
        prop_assert_eq!(report.per_class.values().map(|c| c.total_runs).sum::<usize>(), o.total_runs);
        prop_assert_eq!(report.per_variable.values().map(|c| c.strict_successes).sum::<usize>(), o.strict_successes);
        prop_assert_eq!(report.per_class.values().map(|c| c.pending_reviews).sum::<usize>(), o.pending_reviews);

        // Record order does not matter.
        let n = records.len().max(1);
        records.rotate_left(seed as usize % n);
        records.reverse();
        prop_assert_eq!(CampaignReport::from_records(&records).to_json().unwrap(), report.to_json().unwrap());
    }

    #[test]
    fn adam_first_step_is_bounded_by_the_learning_rate(
        grad in proptest::collection::vec(-1e6f64..1e6, 1..20),
        lr in 1e-5f64..1.0,
    ) {
        let mut params = vec![0.0; grad.len()];
        Adam::new(grad.len(), lr).step(&mut params, &grad);
        for (p, g) in params.iter().zip(&grad) {
            prop_assert!(p.abs() <= lr * (1.0 + 1e-12));
            prop_assert!(*g == 0.0 || p.signum() == -g.signum());
        }
    }

    #[test]
    fn derived_seeds_separate_counters(master in any::<u64>(), a in any::<u64>(), b in any::<u64>()) {
        prop_assume!(a != b);
        prop_assert_ne!(derive_seed(master, &[1, a]), derive_seed(master, &[1, b]));
        prop_assert_eq!(derive_seed(master, &[1, a]), derive_seed(master, &[1, a]));
    }
}
