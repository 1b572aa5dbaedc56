//! End-to-end runs: pretrain, split, search, discretize, account, export.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::cascade::{build_cascade, pretrain_upstream, Cascade, StagePretrainReport};
use crate::error::{Error, Result};
use crate::harness::checkpoint::save_checkpoint;
use crate::harness::config::ExperimentConfig;
use crate::harness::data::Dataset;
use crate::harness::oracle::{enumerate_oracle, OracleEntry};
use crate::harness::report::{decide, export_architecture, verify_totals, write_metrics, ArchitectureDecision};
use crate::search::{split_dataset, EpochRecord, SampleAudit, SearchConfig, Searcher, StepAudit, Supernet};

/// Overrides the root under which relative output directories are placed.
pub const OUTPUT_ROOT_ENV: &str = "NFA_OUTPUT_ROOT";

/// Where a run writes: `explicit` if given, else the configured directory
/// (under the env root when relative) with a per-seed subdirectory.
pub fn output_dir(cfg: &ExperimentConfig, explicit: Option<&Path>, seed: u64) -> PathBuf {
    if let Some(dir) = explicit {
        return dir.to_path_buf();
    }
    let base = match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if cfg.output_dir.is_relative() => PathBuf::from(root).join(&cfg.output_dir),
        _ => cfg.output_dir.clone(),
    };
    base.join(format!("seed-{seed}"))
}

/// Pretrained cascade and the target-domain split.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub cascade: Cascade,
    pub pretrain: Vec<StagePretrainReport>,
    pub train: Dataset,
    pub val: Dataset,
}

fn check_data(cfg: &ExperimentConfig, name: &str, d: &Dataset) -> Result<()> {
    if Some(d.dim) != cfg.cascade.input_dim() || d.labels != cfg.cascade.labels {
        return Err(Error::Config(format!(
            "{name} data (dim {}, {} labels) does not fit the cascade (dim {:?}, {} labels)",
            d.dim,
            d.labels,
            cfg.cascade.input_dim(),
            cfg.cascade.labels
        )));
    }
    Ok(())
}

pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    cfg.validate().map_err(|e| e.in_phase("config"))?;
    let (source, target) = (|| {
        let (s, t) = cfg.data.load(seed)?;
        check_data(cfg, "source", &s)?;
        check_data(cfg, "target", &t)?;
        Ok((s, t))
    })()
    .map_err(|e: Error| e.in_phase("data"))?;
    let mut cascade = build_cascade(&cfg.cascade, seed).map_err(|e| e.in_phase("pretrain"))?;
    let pretrain =
        pretrain_upstream(&mut cascade, &source, &cfg.pretrain, seed).map_err(|e| e.in_phase("pretrain"))?;
    let (train, val) = split_dataset(&target, cfg.search.split_ratio, seed).map_err(|e| e.in_phase("split"))?;
    Ok(Prepared { cascade, pretrain, train, val })
}

pub fn search_config(cfg: &ExperimentConfig, seed: u64) -> SearchConfig {
    SearchConfig { seed, ..cfg.search }
}

pub fn build_supernet(cfg: &ExperimentConfig, prepared: &Prepared, seed: u64) -> Result<Supernet> {
    Supernet::new(&prepared.cascade, cfg.mode, &cfg.adapters, seed)
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub supernet: Supernet,
    pub history: Vec<EpochRecord>,
    pub stage1_scheme: Vec<usize>,
    pub scheme: Vec<usize>,
    pub decision: ArchitectureDecision,
    /// Validation task loss of the final scheme after all training.
    pub final_val_loss: f64,
    pub audit: SampleAudit,
    pub step_audit: Vec<StepAudit>,
}

/// Stage one, stage two when configured, then discretize and account.
/// `on_stage1` sees the supernet between the stages.
pub fn search(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    seed: u64,
    audit_steps: bool,
    mut on_stage1: impl FnMut(&Supernet) -> Result<()>,
) -> Result<SearchOutcome> {
    let supernet = build_supernet(cfg, prepared, seed).map_err(|e| e.in_phase("stage1"))?;
    let mut s = Searcher::new(
        supernet,
        prepared.train.clone(),
        prepared.val.clone(),
        search_config(cfg, seed),
        cfg.penalty,
    )
    .map_err(|e| e.in_phase("stage1"))?;
    if audit_steps {
        s.enable_step_audit();
    }
    s.run_stage1().map_err(|e| e.in_phase("stage1"))?;
    let stage1_scheme = s.supernet.discretization();
    on_stage1(&s.supernet).map_err(|e| e.in_phase("stage1"))?;
    if cfg.search.stage2_epochs > 0 {
        s.run_stage2().map_err(|e| e.in_phase("stage2"))?;
    }
    let scheme = s.supernet.discretization();
    let final_val_loss = s.supernet.evaluate(s.val_part(), &scheme).map_err(|e| e.in_phase("discretize"))?;
    let decision = decide(&s.supernet, &cfg.penalty, &cfg.config_hash(), seed).map_err(|e| e.in_phase("account"))?;
    verify_totals(&s.supernet, &decision).map_err(|e| e.in_phase("account"))?;
    Ok(SearchOutcome {
        history: s.state().history.clone(),
        audit: s.state().audit.clone(),
        step_audit: s.step_audit().to_vec(),
        supernet: s.supernet,
        stage1_scheme,
        scheme,
        decision,
        final_val_loss,
    })
}

/// Files written by a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunFiles {
    pub dir: PathBuf,
    pub architecture: PathBuf,
    pub metrics: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Serialize)]
struct Status<'a> {
    status: &'a str,
    error: Option<String>,
}

fn write_status(dir: &Path, status: &str, error: Option<String>) -> Result<()> {
    let path = dir.join("status.json");
    let text = serde_json::to_string_pretty(&Status { status, error })? + "\n";
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn pretrained_sets(cascade: &Cascade) -> Vec<&crate::diffcore::ParameterSet> {
    cascade.modules.iter().map(|m| m.pretrained()).collect()
}

/// Full run into `dir`. On failure `status.json` records the error and any
/// files already written are partial.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<(SearchOutcome, RunFiles)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_status(dir, "running", None)?;
    let result = run_into(cfg, seed, dir);
    match &result {
        Ok(_) => write_status(dir, "complete", None)?,
        Err(e) => write_status(dir, "failed", Some(e.to_string()))?,
    }
    result
}

fn run_into(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<(SearchOutcome, RunFiles)> {
    let config_path = dir.join("config.json");
    let text = serde_json::to_string_pretty(cfg)? + "\n";
    std::fs::write(&config_path, text).map_err(|e| Error::io(&config_path, e))?;

    let ck_dir = dir.join("checkpoints");
    let prepared = prepare(cfg, seed)?;
    let mut checkpoints = vec![save_checkpoint(&pretrained_sets(&prepared.cascade), &ck_dir, "pretrained")
        .map_err(|e| e.in_phase("checkpoint"))?];
    let outcome = search(cfg, &prepared, seed, false, |net| {
        checkpoints.push(save_checkpoint(&net.param_sets(), &ck_dir, "stage1")?);
        Ok(())
    })?;
    checkpoints.push(save_checkpoint(&outcome.supernet.param_sets(), &ck_dir, "final").map_err(|e| e.in_phase("checkpoint"))?);

    let architecture = dir.join("architecture.json");
    export_architecture(&outcome.decision, &architecture).map_err(|e| e.in_phase("export"))?;
    let metrics = dir.join("metrics.csv");
    write_metrics(&outcome.history, &metrics).map_err(|e| e.in_phase("export"))?;
    Ok((outcome, RunFiles { dir: dir.to_path_buf(), architecture, metrics, checkpoints }))
}

/// Pretraining only; writes the frozen snapshots and per-stage losses.
pub fn run_pretrain(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<Vec<StagePretrainReport>> {
    let prepared = prepare(cfg, seed)?;
    save_checkpoint(&pretrained_sets(&prepared.cascade), &dir.join("checkpoints"), "pretrained")?;
    let path = dir.join("pretrain.json");
    let text = serde_json::to_string_pretty(&prepared.pretrain)? + "\n";
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(prepared.pretrain)
}

/// Budget-matched oracle over every scheme of the configured cascade.
pub fn run_oracle(cfg: &ExperimentConfig, prepared: &Prepared, seed: u64) -> Result<Vec<OracleEntry>> {
    let supernet = build_supernet(cfg, prepared, seed)?;
    enumerate_oracle(
        &supernet,
        &prepared.train,
        &prepared.val,
        &search_config(cfg, seed),
        cfg.oracle_epochs(),
        cfg.oracle.cap,
    )
    .map_err(|e| e.in_phase("oracle"))
}
