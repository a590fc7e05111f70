//! Command implementations. Each takes a resolved [`Config`] and writes its
//! artifacts under `config.out`, next to a copy of the configuration.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use naegen_core::digest::sha256_hex;
use naegen_core::harness::{
    latent_baseline, load_records, prefilter_classes, prepare_latents, run_campaign, run_id, write_report,
    AttackTemplate, CampaignManifest, CampaignOutcome, CampaignReport, CampaignSetup, Prefilter, CAMPAIGN_SCHEMA_VERSION,
};
use naegen_core::optimizer::{rademacher_sweep, run_optimization};
use naegen_core::par::Schedule;
use naegen_core::registry::Registry;
use naegen_core::seeds::{derive_seed, DOMAIN_LATENT, DOMAIN_SWEEP};
use naegen_core::trace_io::{encode_png, write_trace, TRACE_MANIFEST};
use naegen_core::{tokenize_with_class, AcceptAllOracle, Backends, HumanOracle, LatentVector, NaeError, Oracle};
use naegen_review::store::REVIEW_DIR;
use naegen_review::ReviewStore;
use serde::{Deserialize, Serialize};

use crate::config::{Config, OracleChoice};
use crate::error::{CliError, KeyProblem};

pub const CONFIG_FILE: &str = "config.toml";
pub const SWEEP_MANIFEST: &str = "sweep.json";
pub const OUTPUT_SCHEMA_VERSION: u32 = 1;

fn template(cfg: &Config) -> AttackTemplate {
    AttackTemplate {
        mode: cfg.mode,
        prompt_template: cfg.prompt_template(),
        target_label: cfg.target_label,
        regularizer_metric: cfg.metric,
        lambda: cfg.lambda,
        msp_threshold: cfg.msp_threshold,
    }
}

fn required_class(cfg: &Config, command: &str) -> Result<String, CliError> {
    cfg.class.clone().ok_or_else(|| {
        CliError::Config(vec![KeyProblem { key: "class".into(), message: format!("required by {command}") }])
    })
}

fn known_class(backends: &Backends, class: &str, backend: &str) -> Result<usize, CliError> {
    backends.classifier.class_index(class).ok_or_else(|| {
        let names = backends.classifier.class_names().join(", ");
        CliError::Config(vec![KeyProblem {
            key: "class".into(),
            message: format!("`{class}` is not a class of the {backend} classifier ({names})"),
        }])
    })
}

fn write_config(cfg: &Config, dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| NaeError::io(dir, e))?;
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, cfg.to_toml()?).map_err(|e| NaeError::io(&path, e))?;
    Ok(())
}

/// The latent a single-run command starts from.
pub fn command_latent(backends: &Backends, seed: u64, class_index: Option<usize>) -> LatentVector {
    let counter = class_index.map_or(u64::MAX, |i| i as u64);
    LatentVector::sample(backends.generator.latent_dim(), derive_seed(seed, &[DOMAIN_LATENT, counter, 0]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub schema_version: u32,
    pub trace_dir: PathBuf,
    pub class: String,
    pub latent_seed: u64,
    pub initial_prediction: usize,
    pub first_adversarial_step: Option<usize>,
    pub final_prediction: usize,
    pub final_perturbation_norm: f64,
    pub model_digest: String,
}

/// One optimization run; the trace directory is `cfg.out`.
pub fn cmd_generate(cfg: &Config, registry: &Registry) -> Result<GenerateSummary, CliError> {
    let class = required_class(cfg, "generate")?;
    let backends = registry.build(&cfg.backend)?;
    let idx = Some(known_class(&backends, &class, &cfg.backend)?);
    let spec = template(cfg).spec(&class, idx)?;
    let z = command_latent(&backends, cfg.seed, idx);
    let mut trace = run_optimization(&spec, &cfg.optimization(), &backends, &z)?;
    trace.run_id = run_id(&class, 0);
    write_trace(&mut trace, &cfg.out)?;
    write_config(cfg, &cfg.out)?;
    let last = trace.final_step();
    Ok(GenerateSummary {
        schema_version: OUTPUT_SCHEMA_VERSION,
        trace_dir: cfg.out.clone(),
        class,
        latent_seed: z.seed,
        initial_prediction: trace.steps[0].predicted_class,
        first_adversarial_step: trace.first_adversarial_step,
        final_prediction: last.predicted_class,
        final_perturbation_norm: last.perturbation_norm,
        model_digest: trace.model_digest.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub schema_version: u32,
    pub campaign_dir: PathBuf,
    pub classes: Vec<String>,
    pub kept_classes: Vec<String>,
    pub report: CampaignReport,
}

fn campaign_classes(cfg: &Config, backends: &Backends) -> Vec<String> {
    if cfg.classes.is_empty() {
        backends.classifier.class_names().to_vec()
    } else {
        cfg.classes.clone()
    }
}

/// Prefilter, latent preparation and one run per prepared latent.
pub fn cmd_campaign(cfg: &Config, registry: &Registry) -> Result<CampaignSummary, CliError> {
    campaign(cfg, registry, false)
}

/// The campaign protocol with the latent vector as the optimization variable.
pub fn cmd_baseline(cfg: &Config, registry: &Registry) -> Result<CampaignSummary, CliError> {
    campaign(cfg, registry, true)
}

fn campaign(cfg: &Config, registry: &Registry, baseline: bool) -> Result<CampaignSummary, CliError> {
    let backends = registry.build(&cfg.backend)?;
    let classes = campaign_classes(cfg, &backends);
    let template = template(cfg);
    let optimization = cfg.optimization();
    let schedule = cfg.workers.map_or_else(Schedule::default, Schedule::new);
    let prefilter: Option<Prefilter> = if cfg.prefilter {
        Some(prefilter_classes(
            &classes,
            &template,
            cfg.prefilter_samples,
            cfg.accuracy_threshold,
            &backends,
            &optimization,
            cfg.seed,
            schedule,
        )?)
    } else {
        None
    };
    let kept = prefilter.as_ref().map_or_else(|| classes.clone(), Prefilter::kept);
    let latents = kept
        .iter()
        .map(|c| prepare_latents(c, cfg.latents_per_class, &template, &backends, &optimization, cfg.seed, schedule))
        .collect::<Result<Vec<_>, _>>()?;
    let manifest = CampaignManifest {
        schema_version: CAMPAIGN_SCHEMA_VERSION,
        backend: cfg.backend.clone(),
        model_digest: backends.parameter_digest(),
        master_seed: cfg.seed,
        template: template.clone(),
        optimization: optimization.clone(),
        classes: classes.clone(),
        prefilter,
        latents: latents.clone(),
    };
    manifest.write(&cfg.out)?;
    write_config(cfg, &cfg.out)?;
    let setup = CampaignSetup { template, optimization, master_seed: cfg.seed, schedule, out_dir: Some(cfg.out.clone()) };
    let oracle: &dyn Oracle = match cfg.oracle {
        OracleChoice::Human => &HumanOracle,
        OracleChoice::AcceptAll => &AcceptAllOracle,
    };
    let CampaignOutcome { report, .. } = if baseline {
        latent_baseline(&latents, &setup, &backends, oracle)?
    } else {
        run_campaign(&latents, &setup, &backends, oracle)?
    };
    Ok(CampaignSummary {
        schema_version: OUTPUT_SCHEMA_VERSION,
        campaign_dir: cfg.out.clone(),
        classes,
        kept_classes: kept,
        report,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepImage {
    pub magnitude: f64,
    pub file: String,
    pub png_sha256: String,
    pub image_digest: String,
    pub predicted_class: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepManifest {
    pub schema_version: u32,
    pub backend: String,
    pub class: String,
    pub prompt: String,
    pub latent_seed: u64,
    pub direction_seed: u64,
    pub images: Vec<SweepImage>,
}

/// Images along one random ±1 direction of the class token, one per magnitude.
pub fn cmd_sweep(cfg: &Config, registry: &Registry) -> Result<SweepManifest, CliError> {
    let class = required_class(cfg, "sweep")?;
    let backends = registry.build(&cfg.backend)?;
    let idx = Some(known_class(&backends, &class, &cfg.backend)?);
    let prompt = template(cfg).prompt(&class)?;
    let tokens = tokenize_with_class(&prompt, &class, backends.encoder.as_ref())?;
    let z = command_latent(&backends, cfg.seed, idx);
    let direction_seed = derive_seed(cfg.seed, &[DOMAIN_SWEEP, idx.map_or(u64::MAX, |i| i as u64)]);
    let opt = cfg.optimization();
    let images = rademacher_sweep(
        &tokens,
        &cfg.magnitudes,
        direction_seed,
        &z,
        backends.generator.as_ref(),
        backends.encoder.as_ref(),
        opt.guidance_scale,
        opt.sampling_steps,
    )?;
    fs::create_dir_all(&cfg.out).map_err(|e| NaeError::io(&cfg.out, e))?;
    let mut entries = Vec::new();
    for (i, (img, m)) in images.iter().zip(&cfg.magnitudes).enumerate() {
        let file = format!("sweep_{i:02}.png");
        let bytes = encode_png(img)?;
        let path = cfg.out.join(&file);
        fs::write(&path, &bytes).map_err(|e| NaeError::io(&path, e))?;
        entries.push(SweepImage {
            magnitude: *m,
            file,
            png_sha256: sha256_hex(&bytes),
            image_digest: img.digest(),
            predicted_class: backends.classifier.predict(img)?,
        });
    }
    let manifest = SweepManifest {
        schema_version: OUTPUT_SCHEMA_VERSION,
        backend: cfg.backend.clone(),
        class,
        prompt,
        latent_seed: z.seed,
        direction_seed,
        images: entries,
    };
    naegen_core::harness::write_json(&cfg.out.join(SWEEP_MANIFEST), &manifest)?;
    write_config(cfg, &cfg.out)?;
    Ok(manifest)
}

/// Report of a campaign directory, including any review labels. With
/// `write`, `report.json` and `report.csv` are refreshed on disk.
pub fn cmd_report(dir: &Path, write: bool) -> Result<CampaignReport, CliError> {
    let report = if dir.join(REVIEW_DIR).is_dir() {
        ReviewStore::open(dir)?.report().clone()
    } else {
        CampaignReport::from_records(&load_records(dir)?)
    };
    if write {
        write_report(dir, &report)?;
    }
    Ok(report)
}

/// Queue the campaign for review and serve the API until interrupted.
pub fn cmd_serve(dir: &Path, addr: SocketAddr, all_steps: bool) -> Result<(), CliError> {
    let mut store = ReviewStore::open(dir)?;
    let queued = store.enqueue_campaign(all_steps)?;
    eprintln!("{queued} candidates queued; serving http://{addr}");
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Internal(e.to_string()))?;
    rt.block_on(naegen_review::serve(store, addr)).map_err(|e| NaeError::io(dir, e))?;
    Ok(())
}

/// Files of a generate trace directory in a stable order, for comparing runs.
pub fn trace_files(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, CliError> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| NaeError::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n == TRACE_MANIFEST || n.ends_with(".png"))
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|n| {
            let p = dir.join(&n);
            fs::read(&p).map(|b| (n, b)).map_err(|e| NaeError::io(&p, e).into())
        })
        .collect()
}
