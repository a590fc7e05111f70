//! File-backed review state for one campaign directory.
//!
//! ```text
//! <campaign>/review/queue.json      queued candidates
//! <campaign>/review/labels.jsonl    append-only label log
//! <campaign>/review/snapshot.json   labels folded from the first `log_entries` log lines
//! ```
//!
//! Run records under `runs/` are never rewritten; verdicts are recomputed from
//! the campaign's own labels plus the label store, and `report.json` is
//! replaced atomically after every change.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use naegen_core::digest::sha256_hex;
use naegen_core::harness::{
    candidate_id, load_records, CampaignReport, Counts, RunRecord, Verdict, REPORT_CSV, REPORT_JSON,
};
use naegen_core::optimizer::StepRecord;
use naegen_core::trace_io::{read_trace, TraceManifest, TRACE_MANIFEST, TRACE_SCHEMA_VERSION};
use naegen_core::{NaeError, OracleLabel};
use serde::{Deserialize, Serialize};

use crate::error::{ReviewError, ReviewResult};

pub const REVIEW_SCHEMA_VERSION: u32 = 1;
pub const REVIEW_DIR: &str = "review";
pub const QUEUE_FILE: &str = "queue.json";
pub const LABEL_LOG: &str = "labels.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.json";
/// Log entries between snapshots.
pub const SNAPSHOT_EVERY: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemStatus {
    Pending,
    Labeled,
}

impl std::str::FromStr for ItemStatus {
    type Err = ReviewError;

    fn from_str(s: &str) -> ReviewResult<Self> {
        match s {
            "pending" => Ok(Self::Pending),
            "labeled" => Ok(Self::Labeled),
            other => Err(ReviewError::Validation(format!("unknown status `{other}`, expected pending or labeled"))),
        }
    }
}

/// One queued candidate. Image paths are relative to the campaign directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub candidate_id: String,
    pub run_id: String,
    pub class_name: String,
    pub step: usize,
    /// Whether this is the step that decides the run's success.
    pub decisive: bool,
    pub init_image: String,
    pub candidate_image: String,
    pub candidate_png_sha256: String,
    pub expected_class: Option<usize>,
    pub predicted_class: usize,
    pub num_classes: usize,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct QueueFile {
    schema_version: u32,
    items: Vec<QueueEntry>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Snapshot {
    schema_version: u32,
    log_entries: usize,
    labels: Vec<OracleLabel>,
}

/// Result of a label submission.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelReceipt {
    pub schema_version: u32,
    pub candidate_id: String,
    pub run_id: String,
    /// False when the label repeated the reviewer's current verdict.
    pub changed: bool,
    pub strict_success: Verdict,
    pub relaxed_success: Verdict,
    pub before: Counts,
    pub after: Counts,
}

pub struct ReviewStore {
    dir: PathBuf,
    records: BTreeMap<String, RunRecord>,
    queue: BTreeMap<String, QueueEntry>,
    /// `(candidate_id, reviewer)` → latest label.
    labels: BTreeMap<(String, String), OracleLabel>,
    log_entries: usize,
    report: CampaignReport,
}

impl ReviewStore {
    pub fn open(campaign_dir: &Path) -> ReviewResult<Self> {
        let dir = campaign_dir.to_path_buf();
        if !dir.join(REPORT_JSON).is_file() {
            return Err(corrupt(format!("{} has no {REPORT_JSON}", dir.display())));
        }
        let records = load_records(&dir)?.into_iter().map(|r| (r.run_id.clone(), r)).collect();
        let mut store = Self {
            dir,
            records,
            queue: BTreeMap::new(),
            labels: BTreeMap::new(),
            log_entries: 0,
            report: CampaignReport::from_records(&[]),
        };
        store.load_queue()?;
        store.load_labels()?;
        store.report = CampaignReport::from_records(&store.judged_records());
        Ok(store)
    }

    pub fn campaign_dir(&self) -> &Path {
        &self.dir
    }

    fn review_dir(&self) -> PathBuf {
        self.dir.join(REVIEW_DIR)
    }

    fn load_queue(&mut self) -> ReviewResult<()> {
        let path = self.review_dir().join(QUEUE_FILE);
        if !path.is_file() {
            return Ok(());
        }
        let text = fs::read_to_string(&path).map_err(|e| NaeError::io(&path, e))?;
        let file: QueueFile = serde_json::from_str(&text).map_err(|e| corrupt(format!("{}: {e}", path.display())))?;
        self.queue = file.items.into_iter().map(|i| (i.candidate_id.clone(), i)).collect();
        Ok(())
    }

    fn load_labels(&mut self) -> ReviewResult<()> {
        let snap_path = self.review_dir().join(SNAPSHOT_FILE);
        let mut skip = 0;
        if snap_path.is_file() {
            let text = fs::read_to_string(&snap_path).map_err(|e| NaeError::io(&snap_path, e))?;
            let snap: Snapshot =
                serde_json::from_str(&text).map_err(|e| corrupt(format!("{}: {e}", snap_path.display())))?;
            for l in snap.labels {
                self.labels.insert((l.candidate_id.clone(), l.reviewer.clone()), l);
            }
            skip = snap.log_entries;
        }
        let log_path = self.review_dir().join(LABEL_LOG);
        let text = match fs::read_to_string(&log_path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(NaeError::io(&log_path, e).into()),
        };
        let complete = text.ends_with('\n');
        let lines: Vec<&str> = text.lines().collect();
        let mut entries = 0;
        for (i, line) in lines.iter().enumerate() {
            match serde_json::from_str::<OracleLabel>(line) {
                Ok(label) => {
                    if entries >= skip {
                        self.labels.insert((label.candidate_id.clone(), label.reviewer.clone()), label);
                    }
                    entries += 1;
                }
                // A crash mid-append leaves a partial last line; it was never acknowledged.
                Err(_) if i + 1 == lines.len() && !complete => {
                    tracing::warn!("dropping truncated last line of {}", log_path.display());
                    let keep = text.rfind('\n').map_or(0, |p| p + 1);
                    fs::write(&log_path, &text[..keep]).map_err(|e| NaeError::io(&log_path, e))?;
                }
                Err(e) => return Err(corrupt(format!("{} line {}: {e}", log_path.display(), i + 1))),
            }
        }
        if entries < skip {
            return Err(corrupt(format!("{} is shorter than its snapshot", log_path.display())));
        }
        self.log_entries = entries;
        Ok(())
    }

    /// Queue the decisive step of every fooled run, or every adversarial step
    /// with `all_steps`. Re-enqueueing adds nothing already queued.
    pub fn enqueue_campaign(&mut self, all_steps: bool) -> ReviewResult<usize> {
        let mut added = Vec::new();
        for r in self.records.values().filter(|r| r.classifier_fooled) {
            let rel = r.trace_path.as_deref().ok_or_else(|| corrupt(format!("run {} has no trace", r.run_id)))?;
            let trace_dir = self.dir.join(rel);
            let trace = read_trace(&trace_dir).map_err(|e| corrupt(format!("run {}: {e}", r.run_id)))?;
            let first = trace
                .first_adversarial_step
                .ok_or_else(|| corrupt(format!("run {} is marked fooled but its trace is not", r.run_id)))?;
            let steps: Vec<usize> = if all_steps {
                trace.steps.iter().filter(|s| s.adversarial).map(|s| s.step).collect()
            } else {
                vec![first]
            };
            let init = verified_image(&trace_dir, rel, &trace.steps[0])?;
            for step in steps {
                let id = candidate_id(&r.run_id, step);
                if self.queue.contains_key(&id) {
                    continue;
                }
                let record = trace.steps.get(step).ok_or_else(|| corrupt(format!("{id}: step out of range")))?;
                added.push(QueueEntry {
                    candidate_id: id,
                    run_id: r.run_id.clone(),
                    class_name: r.class_name.clone(),
                    step,
                    decisive: step == first,
                    init_image: init.clone(),
                    candidate_image: verified_image(&trace_dir, rel, record)?,
                    candidate_png_sha256: record.png_sha256.clone().unwrap_or_default(),
                    expected_class: trace.expected_class,
                    predicted_class: record.predicted_class,
                    num_classes: record.logits.len(),
                });
            }
        }
        if !added.is_empty() {
            for item in added {
                self.queue.insert(item.candidate_id.clone(), item);
            }
            self.save_queue()?;
        }
        self.refresh_report()?;
        Ok(self.queue.len())
    }

    fn save_queue(&self) -> ReviewResult<()> {
        let file = QueueFile { schema_version: REVIEW_SCHEMA_VERSION, items: self.queue.values().cloned().collect() };
        write_atomic(&self.review_dir().join(QUEUE_FILE), &to_json(&file)?)
    }

    pub fn status(&self, candidate_id: &str) -> ItemStatus {
        if !self.labels_for(candidate_id).is_empty() {
            ItemStatus::Labeled
        } else {
            ItemStatus::Pending
        }
    }

    pub fn queue(&self, status: Option<ItemStatus>, class: Option<&str>) -> Vec<(&QueueEntry, ItemStatus)> {
        self.queue
            .values()
            .map(|e| (e, self.status(&e.candidate_id)))
            .filter(|(e, s)| status.is_none_or(|want| want == *s) && class.is_none_or(|c| c == e.class_name))
            .collect()
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn candidate(&self, candidate_id: &str) -> ReviewResult<&QueueEntry> {
        self.queue.get(candidate_id).ok_or_else(|| ReviewError::NotFound(format!("candidate `{candidate_id}`")))
    }

    fn campaign_labels<'a>(&'a self, candidate_id: &'a str) -> impl Iterator<Item = &'a OracleLabel> + 'a {
        let run = self.queue.get(candidate_id).and_then(|e| self.records.get(&e.run_id));
        run.into_iter().flat_map(|r| r.labels.iter()).filter(move |l| l.candidate_id == candidate_id)
    }

    /// Labels in effect for a candidate: campaign-time oracle labels, then the
    /// store's, latest per reviewer.
    pub fn labels_for(&self, candidate_id: &str) -> Vec<OracleLabel> {
        let mut by_reviewer: BTreeMap<&str, &OracleLabel> = BTreeMap::new();
        for l in self.campaign_labels(candidate_id) {
            by_reviewer.insert(&l.reviewer, l);
        }
        for ((c, reviewer), l) in self.labels.range((candidate_id.to_string(), String::new())..) {
            if c != candidate_id {
                break;
            }
            by_reviewer.insert(reviewer, l);
        }
        by_reviewer.into_values().cloned().collect()
    }

    pub fn record(&self, run_id: &str) -> ReviewResult<RunRecord> {
        let r = self.records.get(run_id).ok_or_else(|| ReviewError::NotFound(format!("run `{run_id}`")))?;
        Ok(self.judged(r))
    }

    fn judged(&self, r: &RunRecord) -> RunRecord {
        let mut r = r.clone();
        if let Some(step) = r.first_adversarial_step {
            r.labels = self.labels_for(&candidate_id(&r.run_id, step));
        }
        r.apply_labels(&r.labels.clone());
        r
    }

    /// Every run with its current verdicts, ordered by run id.
    pub fn judged_records(&self) -> Vec<RunRecord> {
        self.records.values().map(|r| self.judged(r)).collect()
    }

    pub fn report(&self) -> &CampaignReport {
        &self.report
    }

    fn validate(&self, label: &OracleLabel) -> ReviewResult<&QueueEntry> {
        let entry = self.candidate(&label.candidate_id)?;
        if label.reviewer.trim().is_empty() {
            return Err(ReviewError::Validation("reviewer must not be empty".into()));
        }
        if let Some(k) = label.assigned_label {
            if k >= entry.num_classes {
                return Err(ReviewError::Validation(format!(
                    "assigned_label {k} out of range for {} classes",
                    entry.num_classes
                )));
            }
        }
        if let (true, Some(expected)) = (label.ground_truth_preserved, entry.expected_class) {
            if label.assigned_label != Some(expected) {
                return Err(ReviewError::Validation(format!(
                    "ground_truth_preserved contradicts assigned_label {:?} (expected class {expected})",
                    label.assigned_label
                )));
            }
        }
        Ok(entry)
    }

    /// Store `label`, replacing the reviewer's previous label for the candidate.
    pub fn submit_label(&mut self, label: OracleLabel) -> ReviewResult<LabelReceipt> {
        let entry = self.validate(&label)?.clone();
        let key = (label.candidate_id.clone(), label.reviewer.clone());
        let before = self.report.overall.clone();
        let changed = self.labels.get(&key).is_none_or(|old| !same_verdict(old, &label));
        if changed {
            self.append_log(&label)?;
            self.labels.insert(key, label);
            if self.log_entries.is_multiple_of(SNAPSHOT_EVERY) {
                self.snapshot()?;
            }
            self.refresh_report()?;
        }
        let run = self.record(&entry.run_id)?;
        Ok(LabelReceipt {
            schema_version: REVIEW_SCHEMA_VERSION,
            candidate_id: entry.candidate_id,
            run_id: entry.run_id,
            changed,
            strict_success: run.strict_success,
            relaxed_success: run.relaxed_success,
            before,
            after: self.report.overall.clone(),
        })
    }

    fn append_log(&mut self, label: &OracleLabel) -> ReviewResult<()> {
        let dir = self.review_dir();
        fs::create_dir_all(&dir).map_err(|e| NaeError::io(&dir, e))?;
        let path = dir.join(LABEL_LOG);
        let mut line = serde_json::to_string(label).map_err(NaeError::from)?;
        line.push('\n');
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| NaeError::io(&path, e))?;
        f.write_all(line.as_bytes()).and_then(|_| f.sync_data()).map_err(|e| NaeError::io(&path, e))?;
        self.log_entries += 1;
        Ok(())
    }

    /// Fold the log into `snapshot.json`. The log itself is kept.
    pub fn snapshot(&self) -> ReviewResult<()> {
        let snap = Snapshot {
            schema_version: REVIEW_SCHEMA_VERSION,
            log_entries: self.log_entries,
            labels: self.labels.values().cloned().collect(),
        };
        write_atomic(&self.review_dir().join(SNAPSHOT_FILE), &to_json(&snap)?)
    }

    fn refresh_report(&mut self) -> ReviewResult<()> {
        self.report = CampaignReport::from_records(&self.judged_records());
        write_atomic(&self.dir.join(REPORT_JSON), &self.report.to_json()?)?;
        write_atomic(&self.dir.join(REPORT_CSV), &self.report.to_csv()?)
    }

    pub fn trace(&self, run_id: &str) -> ReviewResult<TraceManifest> {
        let trace = read_trace(&self.trace_dir(run_id)?)?;
        Ok(TraceManifest { schema_version: TRACE_SCHEMA_VERSION, trace })
    }

    fn trace_dir(&self, run_id: &str) -> ReviewResult<PathBuf> {
        let r = self.records.get(run_id).ok_or_else(|| ReviewError::NotFound(format!("run `{run_id}`")))?;
        let rel = r.trace_path.as_deref().ok_or_else(|| ReviewError::NotFound(format!("trace of run `{run_id}`")))?;
        Ok(self.dir.join(rel))
    }

    /// PNG bytes of one step of a run.
    pub fn image(&self, run_id: &str, step: usize) -> ReviewResult<Vec<u8>> {
        let dir = self.trace_dir(run_id)?;
        let trace = read_trace(&dir)?;
        let record = trace.steps.get(step).ok_or_else(|| ReviewError::NotFound(format!("step {step} of `{run_id}`")))?;
        let name = record.image_path.as_deref().ok_or_else(|| ReviewError::NotFound(format!("image of {run_id}@{step}")))?;
        let path = dir.join(name);
        Ok(fs::read(&path).map_err(|e| NaeError::io(&path, e))?)
    }
}

fn corrupt(msg: String) -> ReviewError {
    NaeError::CorruptCampaign(msg).into()
}

/// Check a step's PNG against the digest in its trace; returns its campaign-relative path.
fn verified_image(
    trace_dir: &Path,
    rel: &str,
    record: &StepRecord,
) -> ReviewResult<String> {
    let (Some(name), Some(expected)) = (&record.image_path, &record.png_sha256) else {
        return Err(corrupt(format!("{rel}/{TRACE_MANIFEST}: step {} has no image", record.step)));
    };
    let path = trace_dir.join(name);
    let bytes = fs::read(&path).map_err(|_| corrupt(format!("missing trace image {}", path.display())))?;
    if &sha256_hex(&bytes) != expected {
        return Err(corrupt(format!("{} does not match its recorded digest", path.display())));
    }
    Ok(format!("{rel}/{name}"))
}

fn same_verdict(a: &OracleLabel, b: &OracleLabel) -> bool {
    a.ground_truth_preserved == b.ground_truth_preserved && a.natural == b.natural && a.assigned_label == b.assigned_label
}

fn to_json<T: Serialize>(value: &T) -> ReviewResult<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(NaeError::from)?;
    s.push('\n');
    Ok(s)
}

fn write_atomic(path: &Path, contents: &str) -> ReviewResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| NaeError::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(|e| NaeError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| NaeError::io(path, e))?;
    Ok(())
}
