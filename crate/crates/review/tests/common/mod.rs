#![allow(dead_code)]

use std::path::Path;

use chrono::{TimeZone, Utc};
use naegen_core::harness::{run_campaign, AttackTemplate, CampaignOutcome, CampaignSetup, PreparedLatents};
use naegen_core::optimizer::OptimizationConfig;
use naegen_core::par::Schedule;
use naegen_core::scripted::{scripted_backends, scripted_class_name, scripted_latent, scripted_prompt};
use naegen_core::{HumanOracle, OracleLabel};

/// Scripted campaign of `classes × per_class` runs written to `dir`; the first
/// `fooled` runs in run order get fooled. Every verdict is left to review.
pub fn scripted_campaign(dir: &Path, classes: usize, per_class: usize, fooled: usize) -> CampaignOutcome {
    let b = scripted_backends(&vec![1.0; classes.max(2)]).unwrap();
    let latents: Vec<PreparedLatents> = (0..classes)
        .map(|c| PreparedLatents {
            class_name: scripted_class_name(c),
            class_index: c,
            latents: (0..per_class).map(|j| scripted_latent(c * per_class + j < fooled, j as u64)).collect(),
            drawn: per_class,
            rejected: 0,
        })
        .collect();
    let setup = CampaignSetup {
        template: AttackTemplate::untargeted(scripted_prompt("{class}")),
        optimization: OptimizationConfig { steps: 4, ..OptimizationConfig::default() },
        master_seed: 5,
        schedule: Schedule::default(),
        out_dir: Some(dir.to_path_buf()),
    };
    run_campaign(&latents, &setup, &b, &HumanOracle).unwrap()
}

pub fn label(candidate: &str, reviewer: &str, gt: bool, natural: bool, assigned: Option<usize>) -> OracleLabel {
    OracleLabel {
        candidate_id: candidate.into(),
        reviewer: reviewer.into(),
        ground_truth_preserved: gt,
        natural,
        assigned_label: assigned,
        timestamp: Utc.timestamp_opt(1_700_000_000, 0).unwrap(),
    }
}
