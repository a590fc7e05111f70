//! Campaign protocol: class prefilter, initialization filter, batched runs,
//! fooling-rate accounting and the latent-variable baseline.
//!
//! A campaign directory holds `campaign.json` (config and seeds),
//! `runs/<run_id>/` (trace manifest, step PNGs and `record.json`),
//! `report.json` and `report.csv`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{AttackMode, AttackSpec, Backends, Candidate, LatentVector, Oracle, OracleLabel, RegularizerMetric};
use crate::error::{NaeError, Result};
use crate::optimizer::{label_verdicts, run_optimization, OptimizationConfig, VariableChoice};
use crate::par::{map_ordered, Schedule};
use crate::seeds::{derive_seed, DOMAIN_LATENT, DOMAIN_PREFILTER, DOMAIN_RUN};
use crate::trace_io::write_trace;

pub const CAMPAIGN_SCHEMA_VERSION: u32 = 1;
pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const CAMPAIGN_FILE: &str = "campaign.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const RUNS_DIR: &str = "runs";
pub const RECORD_FILE: &str = "record.json";
/// Latent search gives up after this many draws per requested latent.
pub const LATENT_SEARCH_FACTOR: usize = 100;

/// Per-class attack settings; `{class}` in the prompt template is replaced by the class name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackTemplate {
    pub mode: AttackMode,
    pub prompt_template: String,
    /// Label for targeted and OOD→ID attacks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_label: Option<usize>,
    pub regularizer_metric: RegularizerMetric,
    pub lambda: f64,
    pub msp_threshold: f64,
}

impl AttackTemplate {
    pub fn untargeted(prompt_template: impl Into<String>) -> Self {
        let base = AttackSpec::untargeted("", "", 0);
        Self {
            mode: AttackMode::Untargeted,
            prompt_template: prompt_template.into(),
            target_label: None,
            regularizer_metric: base.regularizer_metric,
            lambda: base.lambda,
            msp_threshold: base.msp_threshold,
        }
    }

    pub fn prompt(&self, class: &str) -> Result<String> {
        if !self.prompt_template.contains("{class}") {
            return Err(NaeError::InvalidConfig(format!(
                "prompt template `{}` has no {{class}} placeholder",
                self.prompt_template
            )));
        }
        Ok(self.prompt_template.replace("{class}", class))
    }

    pub fn spec(&self, class: &str, class_index: Option<usize>) -> Result<AttackSpec> {
        let label = match self.mode {
            AttackMode::Untargeted => class_index,
            AttackMode::Targeted | AttackMode::OodToId => self.target_label,
            AttackMode::IdToOod => None,
        };
        Ok(AttackSpec {
            mode: self.mode,
            label,
            prompt: self.prompt(class)?,
            class_keyword: class.to_string(),
            regularizer_metric: self.regularizer_metric,
            lambda: self.lambda,
            msp_threshold: self.msp_threshold,
        })
    }
}

fn class_index(backends: &Backends, class: &str) -> Result<usize> {
    backends
        .classifier
        .class_index(class)
        .ok_or_else(|| NaeError::InvalidConfig(format!("`{class}` is not a class of the classifier")))
}

fn conditioning(backends: &Backends, prompt: &str) -> Result<crate::domain::TextEmbedding> {
    Ok(backends.encoder.encode(&backends.encoder.tokenize(prompt)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class_name: String,
    pub class_index: usize,
    pub correct: usize,
    pub samples: usize,
    pub accuracy: f64,
    pub kept: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prefilter {
    pub threshold: f64,
    pub classes: Vec<ClassAccuracy>,
}

impl Prefilter {
    pub fn kept(&self) -> Vec<String> {
        self.classes.iter().filter(|c| c.kept).map(|c| c.class_name.clone()).collect()
    }
}

/// Generate `samples_per_class` seeded images per class and keep the classes
/// the classifier gets right at least `threshold` of the time.
#[allow(clippy::too_many_arguments)]
pub fn prefilter_classes(
    classes: &[String],
    template: &AttackTemplate,
    samples_per_class: usize,
    threshold: f64,
    backends: &Backends,
    config: &OptimizationConfig,
    seed: u64,
    schedule: Schedule,
) -> Result<Prefilter> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(NaeError::InvalidConfig(format!("accuracy threshold must be in (0, 1], got {threshold}")));
    }
    if samples_per_class == 0 {
        return Err(NaeError::InvalidConfig("samples_per_class must be >= 1".into()));
    }
    let mut conds = Vec::with_capacity(classes.len());
    for class in classes {
        conds.push((class_index(backends, class)?, conditioning(backends, &template.prompt(class)?)?));
    }
    let jobs: Vec<(usize, usize)> =
        (0..classes.len()).flat_map(|c| (0..samples_per_class).map(move |i| (c, i))).collect();
    let dim = backends.generator.latent_dim();
    let outcomes = map_ordered(&jobs, schedule.respecting(backends.single_flight()), |&(c, i)| {
        let (idx, e_text) = &conds[c];
        let z = LatentVector::sample(dim, derive_seed(seed, &[DOMAIN_PREFILTER, *idx as u64, i as u64]));
        let img = backends.generator.generate(&z, e_text, config.guidance_scale, config.sampling_steps)?;
        Ok::<_, NaeError>(backends.classifier.predict(&img)? == *idx)
    });
    let mut correct = vec![0usize; classes.len()];
    for (&(c, _), ok) in jobs.iter().zip(outcomes) {
        if ok? {
            correct[c] += 1;
        }
    }
    let classes: Vec<ClassAccuracy> = classes
        .iter()
        .zip(&conds)
        .zip(correct)
        .map(|((name, (idx, _)), correct)| {
            let accuracy = correct as f64 / samples_per_class as f64;
            ClassAccuracy {
                class_name: name.clone(),
                class_index: *idx,
                correct,
                samples: samples_per_class,
                accuracy,
                kept: accuracy >= threshold,
            }
        })
        .collect();
    if !classes.iter().any(|c| c.kept) {
        return Err(NaeError::NoViableClasses);
    }
    tracing::info!(kept = classes.iter().filter(|c| c.kept).count(), total = classes.len(), "prefilter done");
    Ok(Prefilter { threshold, classes })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreparedLatents {
    pub class_name: String,
    pub class_index: usize,
    pub latents: Vec<LatentVector>,
    /// Draws consumed to accept `latents.len()` initializations.
    pub drawn: usize,
    pub rejected: usize,
}

/// Draw seeded latents for `class` until `count` of them generate an image
/// the classifier labels correctly. Draw `i` always uses the same seed, so the
/// result does not depend on the schedule.
pub fn prepare_latents(
    class: &str,
    count: usize,
    template: &AttackTemplate,
    backends: &Backends,
    config: &OptimizationConfig,
    seed: u64,
    schedule: Schedule,
) -> Result<PreparedLatents> {
    let idx = class_index(backends, class)?;
    let e_text = conditioning(backends, &template.prompt(class)?)?;
    let dim = backends.generator.latent_dim();
    let cap = LATENT_SEARCH_FACTOR * count.max(1);
    let schedule = schedule.respecting(backends.single_flight());
    let mut latents = Vec::with_capacity(count);
    let mut drawn = 0;
    while latents.len() < count && drawn < cap {
        let batch = (count - latents.len()).max(schedule.workers).min(cap - drawn);
        let draws: Vec<usize> = (drawn..drawn + batch).collect();
        let results = map_ordered(&draws, schedule, |&i| {
            let z = LatentVector::sample(dim, derive_seed(seed, &[DOMAIN_LATENT, idx as u64, i as u64]));
            let img = backends.generator.generate(&z, &e_text, config.guidance_scale, config.sampling_steps)?;
            Ok::<_, NaeError>((z, backends.classifier.predict(&img)? == idx))
        });
        for r in results {
            let (z, ok) = r?;
            drawn += 1;
            if ok {
                latents.push(z);
                if latents.len() == count {
                    break;
                }
            }
        }
    }
    if latents.len() < count {
        return Err(NaeError::LatentSearchExhausted { class: class.to_string(), accepted: latents.len(), drawn });
    }
    Ok(PreparedLatents { class_name: class.to_string(), class_index: idx, rejected: drawn - latents.len(), latents, drawn })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Success,
    Failure,
    Pending,
}

impl Verdict {
    fn from_votes(yes: usize, total: usize) -> Self {
        if 2 * yes > total {
            Self::Success
        } else if 2 * yes < total {
            Self::Failure
        } else {
            Self::Pending
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub class_name: String,
    pub class_index: Option<usize>,
    pub latent_seed: u64,
    pub run_seed: u64,
    pub variable_choice: VariableChoice,
    /// Trace directory relative to the campaign directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_path: Option<String>,
    pub classifier_fooled: bool,
    pub first_adversarial_step: Option<usize>,
    pub initial_prediction: Option<usize>,
    /// Classifier prediction at the first adversarial step.
    pub adversarial_prediction: Option<usize>,
    pub strict_success: Verdict,
    pub relaxed_success: Verdict,
    /// Labels from a scripted oracle, if one was used.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<OracleLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunRecord {
    /// Re-judge this run against `labels` (all reviewers, any order).
    pub fn apply_labels(&mut self, labels: &[OracleLabel]) {
        let (strict, relaxed) = judge(self.adversarial_prediction, labels);
        self.strict_success = strict;
        self.relaxed_success = relaxed;
    }

    pub fn is_pending(&self) -> bool {
        self.strict_success == Verdict::Pending || self.relaxed_success == Verdict::Pending
    }
}

/// Majority vote over reviewers; a reviewer's later label replaces an earlier
/// one, ties stay pending, and runs that never fooled the classifier fail.
pub fn judge(adversarial_prediction: Option<usize>, labels: &[OracleLabel]) -> (Verdict, Verdict) {
    let Some(predicted) = adversarial_prediction else {
        return (Verdict::Failure, Verdict::Failure);
    };
    let mut latest: BTreeMap<&str, &OracleLabel> = BTreeMap::new();
    for l in labels {
        latest.insert(&l.reviewer, l);
    }
    if latest.is_empty() {
        return (Verdict::Pending, Verdict::Pending);
    }
    let votes: Vec<(bool, bool)> = latest.values().map(|l| label_verdicts(predicted, l)).collect();
    let n = votes.len();
    (
        Verdict::from_votes(votes.iter().filter(|v| v.0).count(), n),
        Verdict::from_votes(votes.iter().filter(|v| v.1).count(), n),
    )
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub total_runs: usize,
    pub failed_runs: usize,
    pub fooled_runs: usize,
    pub strict_successes: usize,
    pub relaxed_successes: usize,
    pub pending_reviews: usize,
    /// Strict successes over all runs.
    pub fooling_rate: f64,
}

impl Counts {
    fn add(&mut self, r: &RunRecord) {
        self.total_runs += 1;
        self.failed_runs += r.error.is_some() as usize;
        self.fooled_runs += r.classifier_fooled as usize;
        self.strict_successes += (r.strict_success == Verdict::Success) as usize;
        self.relaxed_successes += (r.relaxed_success == Verdict::Success) as usize;
        self.pending_reviews += r.is_pending() as usize;
    }

    fn finish(&mut self) {
        self.fooling_rate = ratio(self.strict_successes, self.total_runs);
    }
}

fn ratio(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub schema_version: u32,
    #[serde(flatten)]
    pub overall: Counts,
    /// Fooled runs over all runs, before any oracle verdict.
    pub classifier_fooling_rate: f64,
    /// Relaxed successes over all runs.
    pub relaxed_fooling_rate: f64,
    /// Rates over runs whose verdict is settled; `None` when nothing is settled.
    pub strict_rate_labeled: Option<f64>,
    pub relaxed_rate_labeled: Option<f64>,
    pub mean_first_adversarial_step: Option<f64>,
    pub per_class: BTreeMap<String, Counts>,
    pub per_variable: BTreeMap<String, Counts>,
}

impl CampaignReport {
    /// Single-threaded reduction; only integer counts feed the rates, so the
    /// report does not depend on record order.
    pub fn from_records(records: &[RunRecord]) -> Self {
        let mut overall = Counts::default();
        let mut per_class: BTreeMap<String, Counts> = BTreeMap::new();
        let mut per_variable: BTreeMap<String, Counts> = BTreeMap::new();
        let (mut step_sum, mut strict_settled, mut relaxed_settled) = (0usize, 0usize, 0usize);
        for r in records {
            overall.add(r);
            per_class.entry(r.class_name.clone()).or_default().add(r);
            per_variable.entry(r.variable_choice.to_string()).or_default().add(r);
            step_sum += r.first_adversarial_step.unwrap_or(0);
            strict_settled += (r.strict_success != Verdict::Pending) as usize;
            relaxed_settled += (r.relaxed_success != Verdict::Pending) as usize;
        }
        overall.finish();
        per_class.values_mut().for_each(Counts::finish);
        per_variable.values_mut().for_each(Counts::finish);
        let settled_rate = |n: usize, d: usize| (d > 0).then(|| ratio(n, d));
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            classifier_fooling_rate: ratio(overall.fooled_runs, overall.total_runs),
            relaxed_fooling_rate: ratio(overall.relaxed_successes, overall.total_runs),
            strict_rate_labeled: settled_rate(overall.strict_successes, strict_settled),
            relaxed_rate_labeled: settled_rate(overall.relaxed_successes, relaxed_settled),
            mean_first_adversarial_step: (overall.fooled_runs > 0)
                .then(|| step_sum as f64 / overall.fooled_runs as f64),
            overall,
            per_class,
            per_variable,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// One row per class plus an `ALL` row.
    pub fn to_csv(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Row<'a> {
            class: &'a str,
            total_runs: usize,
            failed_runs: usize,
            fooled_runs: usize,
            strict_successes: usize,
            relaxed_successes: usize,
            pending_reviews: usize,
            fooling_rate: f64,
        }
        fn row<'a>(class: &'a str, c: &Counts) -> Row<'a> {
            Row {
            class,
            total_runs: c.total_runs,
            failed_runs: c.failed_runs,
            fooled_runs: c.fooled_runs,
            strict_successes: c.strict_successes,
            relaxed_successes: c.relaxed_successes,
            pending_reviews: c.pending_reviews,
            fooling_rate: c.fooling_rate,
            }
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        for (class, c) in &self.per_class {
            w.serialize(row(class, c)).map_err(csv_err)?;
        }
        w.serialize(row("ALL", &self.overall)).map_err(csv_err)?;
        let bytes = w.into_inner().map_err(|e| NaeError::InvalidConfig(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn csv_err(e: csv::Error) -> NaeError {
    NaeError::InvalidConfig(format!("csv: {e}"))
}

/// Everything a campaign needs besides latents, backends and oracle.
#[derive(Clone, Debug)]
pub struct CampaignSetup {
    pub template: AttackTemplate,
    pub optimization: OptimizationConfig,
    pub master_seed: u64,
    pub schedule: Schedule,
    /// Campaign directory; traces and records are written under `runs/` when set.
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct CampaignOutcome {
    pub records: Vec<RunRecord>,
    pub report: CampaignReport,
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' }).collect()
}

pub fn run_id(class: &str, j: usize) -> String {
    format!("{}-{j:03}", sanitize(class))
}

/// One optimization per prepared latent. Individual failures are recorded and
/// the campaign continues unless more than half of the runs fail.
pub fn run_campaign(
    latents: &[PreparedLatents],
    setup: &CampaignSetup,
    backends: &Backends,
    oracle: &dyn Oracle,
) -> Result<CampaignOutcome> {
    setup.optimization.validate()?;
    let jobs: Vec<(&PreparedLatents, usize)> =
        latents.iter().flat_map(|p| (0..p.latents.len()).map(move |j| (p, j))).collect();
    let schedule = setup.schedule.respecting(backends.single_flight());
    let records = map_ordered(&jobs, schedule, |&(p, j)| run_one(p, j, setup, backends, oracle));
    let records: Vec<RunRecord> = records.into_iter().collect::<Result<_>>()?;
    let failed = records.iter().filter(|r| r.error.is_some()).count();
    if 2 * failed > records.len() {
        return Err(NaeError::CampaignAborted { failed, total: records.len() });
    }
    let report = CampaignReport::from_records(&records);
    if let Some(dir) = &setup.out_dir {
        write_report(dir, &report)?;
    }
    tracing::info!(runs = records.len(), fooled = report.overall.fooled_runs, "campaign done");
    Ok(CampaignOutcome { records, report })
}

/// The same protocol with the latent vector as the optimization variable.
pub fn latent_baseline(
    latents: &[PreparedLatents],
    setup: &CampaignSetup,
    backends: &Backends,
    oracle: &dyn Oracle,
) -> Result<CampaignOutcome> {
    let mut setup = setup.clone();
    setup.optimization.variable_choice = VariableChoice::Latent;
    run_campaign(latents, &setup, backends, oracle)
}

fn run_one(
    p: &PreparedLatents,
    j: usize,
    setup: &CampaignSetup,
    backends: &Backends,
    oracle: &dyn Oracle,
) -> Result<RunRecord> {
    let z = &p.latents[j];
    let id = run_id(&p.class_name, j);
    let run_seed = derive_seed(setup.master_seed, &[DOMAIN_RUN, p.class_index as u64, j as u64]);
    let mut record = RunRecord {
        run_id: id.clone(),
        class_name: p.class_name.clone(),
        class_index: Some(p.class_index),
        latent_seed: z.seed,
        run_seed,
        variable_choice: setup.optimization.variable_choice,
        trace_path: None,
        classifier_fooled: false,
        first_adversarial_step: None,
        initial_prediction: None,
        adversarial_prediction: None,
        strict_success: Verdict::Failure,
        relaxed_success: Verdict::Failure,
        labels: Vec::new(),
        error: None,
    };
    let config = OptimizationConfig { seed: run_seed, ..setup.optimization.clone() };
    let outcome = setup
        .template
        .spec(&p.class_name, Some(p.class_index))
        .and_then(|spec| run_optimization(&spec, &config, backends, z));
    let mut trace = match outcome {
        Ok(t) => t,
        Err(e) => {
            tracing::warn!(run = %id, "run failed: {e}");
            record.error = Some(format!("{}: {e}", e.kind()));
            return persist_record(setup, record);
        }
    };
    trace.run_id = id.clone();
    record.initial_prediction = trace.steps.first().map(|s| s.predicted_class);
    record.first_adversarial_step = trace.first_adversarial_step;
    record.classifier_fooled = trace.classifier_fooled();
    record.adversarial_prediction = trace.first_adversarial().map(|s| s.predicted_class);
    if let Some(d) = &trace.divergence {
        record.error = Some(format!("numerical_divergence: {d}"));
    }
    if let (Some(step), Some(prediction)) = (trace.first_adversarial_step, record.adversarial_prediction) {
        let candidate = Candidate {
            candidate_id: candidate_id(&id, step),
            run_id: &id,
            step,
            expected_class: trace.expected_class,
            predicted_class: prediction,
            image: &trace.images[step],
        };
        record.labels = oracle.review(&candidate).into_iter().collect();
    }
    record.apply_labels(&record.labels.clone());
    if let Some(dir) = &setup.out_dir {
        let rel = format!("{RUNS_DIR}/{id}");
        write_trace(&mut trace, &dir.join(&rel))?;
        record.trace_path = Some(rel);
    }
    persist_record(setup, record)
}

fn persist_record(setup: &CampaignSetup, record: RunRecord) -> Result<RunRecord> {
    if let Some(dir) = &setup.out_dir {
        let run_dir = dir.join(RUNS_DIR).join(&record.run_id);
        fs::create_dir_all(&run_dir).map_err(|e| NaeError::io(&run_dir, e))?;
        write_json(&run_dir.join(RECORD_FILE), &record)?;
    }
    Ok(record)
}

/// Review candidate identifier for `run_id` at `step`.
pub fn candidate_id(run_id: &str, step: usize) -> String {
    format!("{run_id}@{step}")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| NaeError::io(path, e))
}

pub fn write_report(dir: &Path, report: &CampaignReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| NaeError::io(dir, e))?;
    let json = dir.join(REPORT_JSON);
    fs::write(&json, report.to_json()?).map_err(|e| NaeError::io(&json, e))?;
    let csv = dir.join(REPORT_CSV);
    fs::write(&csv, report.to_csv()?).map_err(|e| NaeError::io(&csv, e))
}

/// Contents of `campaign.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignManifest {
    pub schema_version: u32,
    pub backend: String,
    pub model_digest: String,
    pub master_seed: u64,
    pub template: AttackTemplate,
    pub optimization: OptimizationConfig,
    pub classes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefilter: Option<Prefilter>,
    pub latents: Vec<PreparedLatents>,
}

impl CampaignManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| NaeError::io(dir, e))?;
        write_json(&dir.join(CAMPAIGN_FILE), self)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(CAMPAIGN_FILE);
        let text = fs::read_to_string(&path).map_err(|e| NaeError::io(&path, e))?;
        let m: Self = serde_json::from_str(&text)
            .map_err(|e| NaeError::CorruptCampaign(format!("{}: {e}", path.display())))?;
        if m.schema_version != CAMPAIGN_SCHEMA_VERSION {
            return Err(NaeError::CorruptCampaign(format!("unsupported campaign schema {}", m.schema_version)));
        }
        Ok(m)
    }
}

/// All `runs/*/record.json` of a campaign directory, ordered by run id.
pub fn load_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let runs = dir.join(RUNS_DIR);
    if !runs.is_dir() {
        if dir.join(REPORT_JSON).is_file() || dir.join(CAMPAIGN_FILE).is_file() {
            return Ok(Vec::new());
        }
        return Err(NaeError::CorruptCampaign(format!("{} is not a campaign directory", dir.display())));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(&runs)
        .map_err(|e| NaeError::io(&runs, e))?
        .filter_map(|e| e.ok().map(|e| e.path().join(RECORD_FILE)))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| NaeError::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| NaeError::CorruptCampaign(format!("{}: {e}", p.display())))
        })
        .collect()
}
