//! Pipeline stages behind each subcommand. Every stage reads its inputs from
//! directories, writes checkpoints/logs to `out`, and leaves a reproducibility
//! record next to them.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cfjoint_core::config::{stage_rng, ConfigError, RunConfig, Stage};
use cfjoint_core::denoiser::{pretrain_denoiser, DenoiserEpoch};
use cfjoint_core::distill::{ablation_variants, run_stage2, AblationAxis, Stage2Epoch, Stage2Error};
use cfjoint_core::metrics::{EvalRecord, MetricsTable, CSV_HEADER};
use cfjoint_core::model::{constant_velocity_table, Component, Model, ModelError};
use cfjoint_core::nn::NnError;
use cfjoint_core::synth::{load_dataset, make_dataset, Dataset, Manifest, SynthError};
use cfjoint_core::tokenizer::{train_stage1, Stage1Epoch};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Stage2(#[from] Stage2Error),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Usage(String),
}

/// Config from file (or defaults) with an optional seed override, validated.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.world.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReproRecord {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub git_rev: String,
    pub dataset_hash: Option<String>,
    pub checkpoints: BTreeMap<String, String>,
    pub metrics: Option<MetricsTable>,
}

pub fn git_rev() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

impl ReproRecord {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Self {
            command: command.into(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            git_rev: git_rev(),
            dataset_hash: None,
            checkpoints: BTreeMap::new(),
            metrics: None,
        }
    }

    pub fn write(&self, out: &Path) -> Result<PathBuf, CliError> {
        fs::create_dir_all(out)?;
        let path = out.join(format!("run-{}.json", self.command));
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(path)
    }
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        writeln!(w, "{}", serde_json::to_string(r)?)?;
    }
    w.flush()?;
    Ok(())
}

fn load_data(dir: &Path) -> Result<Dataset, CliError> {
    load_dataset(dir).map_err(|e| CliError::Usage(format!("cannot load dataset at {}: {e}", dir.display())))
}

/// Model initialised from `cfg` with any component checkpoints found in `ckpt`.
pub fn load_model(cfg: &RunConfig, ckpt: &Path) -> Result<(Model, Vec<Component>), CliError> {
    let mut m = Model::new(cfg);
    let mut loaded = Vec::new();
    for c in Component::ALL {
        if m.load_if_present(c, ckpt)? {
            loaded.push(c);
        }
    }
    Ok((m, loaded))
}

fn save_all(m: &Model, out: &Path, rec: &mut ReproRecord) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    for c in Component::ALL {
        let h = m.save(c, out)?;
        rec.checkpoints.insert(c.file_name().into(), h);
    }
    Ok(())
}

pub fn gen_data(cfg: &RunConfig, out: &Path, n_train: usize, n_val: usize) -> Result<Manifest, CliError> {
    let manifest = make_dataset(&cfg.world, n_train, n_val, out)?;
    let mut rec = ReproRecord::new("gen-data", cfg);
    rec.dataset_hash = Some(manifest.hash());
    rec.write(out)?;
    Ok(manifest)
}

pub fn cmd_train_stage1(cfg: &RunConfig, data: &Path, ckpt: &Path, out: &Path) -> Result<Vec<Stage1Epoch>, CliError> {
    let ds = load_data(data)?;
    let (mut m, _) = load_model(cfg, ckpt)?;
    let tok = m.tok.clone();
    let log = train_stage1(&mut m.store, &tok, &ds.train, &ds.val, &cfg.stage1, &mut stage_rng(cfg.seed, Stage::Stage1))?;
    fs::create_dir_all(out)?;
    write_jsonl(&out.join("stage1.jsonl"), &log)?;
    let mut rec = ReproRecord::new("train-stage1", cfg);
    rec.dataset_hash = Some(ds.manifest.hash());
    save_all(&m, out, &mut rec)?;
    rec.write(out)?;
    Ok(log)
}

pub fn cmd_pretrain_denoiser(cfg: &RunConfig, data: &Path, ckpt: &Path, out: &Path) -> Result<Vec<DenoiserEpoch>, CliError> {
    let ds = load_data(data)?;
    let (mut m, _) = load_model(cfg, ckpt)?;
    let den = m.den.clone();
    let log = pretrain_denoiser(&mut m.store, &den, &ds.train, &ds.val, &cfg.denoiser, &mut stage_rng(cfg.seed, Stage::Denoiser))?;
    fs::create_dir_all(out)?;
    write_jsonl(&out.join("denoiser.jsonl"), &log)?;
    let mut rec = ReproRecord::new("pretrain-denoiser", cfg);
    rec.dataset_hash = Some(ds.manifest.hash());
    save_all(&m, out, &mut rec)?;
    rec.write(out)?;
    Ok(log)
}

fn stage2_into(m: &mut Model, ds: &Dataset, log_path: &Path) -> Result<Vec<Stage2Epoch>, CliError> {
    let mut w = BufWriter::new(File::create(log_path)?);
    let mut rng = stage_rng(m.cfg.seed, Stage::Stage2);
    let outcome = run_stage2(m, &ds.train, &ds.val, &mut rng, Some(&mut w))?;
    w.flush()?;
    Ok(outcome.epochs)
}

pub fn cmd_train_stage2(cfg: &RunConfig, data: &Path, ckpt: &Path, out: &Path) -> Result<Vec<Stage2Epoch>, CliError> {
    let ds = load_data(data)?;
    let (mut m, _) = load_model(cfg, ckpt)?;
    fs::create_dir_all(out)?;
    let log = stage2_into(&mut m, &ds, &out.join("stage2.jsonl"))?;
    let mut rec = ReproRecord::new("train-stage2", cfg);
    rec.dataset_hash = Some(ds.manifest.hash());
    rec.metrics = log.last().map(|e| e.val.clone());
    save_all(&m, out, &mut rec)?;
    rec.write(out)?;
    Ok(log)
}

/// What produces the scored candidates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSource {
    Model,
    /// Ground truth as every candidate.
    Oracle,
    ConstantVelocity,
}

impl std::str::FromStr for EvalSource {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "model" => Ok(Self::Model),
            "oracle" => Ok(Self::Oracle),
            "cv" | "constant_velocity" => Ok(Self::ConstantVelocity),
            _ => Err(format!("unknown eval source {s:?} (model, oracle, cv)")),
        }
    }
}

pub fn evaluate_source(cfg: &RunConfig, ds: &Dataset, ckpt: &Path, source: EvalSource) -> Result<MetricsTable, CliError> {
    Ok(match source {
        EvalSource::Model => {
            let (m, _) = load_model(cfg, ckpt)?;
            m.evaluate(&ds.val, &m.inference_options())?.0
        }
        EvalSource::Oracle => {
            let k = cfg.model.k_scene;
            let records: Vec<EvalRecord> = ds
                .val
                .iter()
                .map(|ep| {
                    let cands = vec![ep.gt_futures.clone(); k];
                    EvalRecord::new(&ep.scene, &cands, &vec![1.0 / k as f64; k], &ep.gt_futures, cfg.eval.miss_threshold)
                })
                .collect();
            MetricsTable::aggregate(&records, cfg.eval.zero_positive)
        }
        EvalSource::ConstantVelocity => constant_velocity_table(&ds.val, cfg),
    })
}

pub fn cmd_eval(cfg: &RunConfig, data: &Path, ckpt: &Path, out: &Path, source: EvalSource) -> Result<MetricsTable, CliError> {
    let ds = load_data(data)?;
    let table = evaluate_source(cfg, &ds, ckpt, source)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&table)? + "\n")?;
    fs::write(out.join("metrics.csv"), format!("{CSV_HEADER}\n{}\n", table.csv_row()))?;
    let mut rec = ReproRecord::new("eval", cfg);
    rec.dataset_hash = Some(ds.manifest.hash());
    if source == EvalSource::Model {
        let (m, _) = load_model(cfg, ckpt)?;
        for c in Component::ALL {
            rec.checkpoints.insert(c.file_name().into(), m.checkpoint(c).sha256());
        }
    }
    rec.metrics = Some(table.clone());
    rec.write(out)?;
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub metrics: MetricsTable,
    pub predictor_sha256: String,
}

/// Trains Stage 2 once per variant from the same starting checkpoints and
/// scores each on the validation split. Variant `i` keeps its checkpoints in
/// `out/ablate-{i}/`.
pub fn cmd_ablate(cfg: &RunConfig, data: &Path, ckpt: &Path, out: &Path, axis: AblationAxis) -> Result<Vec<AblationRow>, CliError> {
    let ds = load_data(data)?;
    let (base, _) = load_model(cfg, ckpt)?;
    fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    for (i, (name, s2)) in ablation_variants(axis, &cfg.stage2).into_iter().enumerate() {
        let mut m = base.clone();
        m.cfg.stage2 = s2;
        stage2_into(&mut m, &ds, &out.join(format!("ablate-{i}.jsonl")))?;
        let dir = out.join(format!("ablate-{i}"));
        fs::create_dir_all(&dir)?;
        for c in Component::ALL {
            m.save(c, &dir)?;
        }
        let (metrics, _) = m.evaluate(&ds.val, &m.inference_options())?;
        rows.push(AblationRow {
            name,
            metrics,
            predictor_sha256: m.checkpoint(Component::Predictor).sha256(),
        });
    }
    fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
    fs::write(out.join("ablation.csv"), ablation_csv(&rows))?;
    let mut rec = ReproRecord::new("ablate", cfg);
    rec.dataset_hash = Some(ds.manifest.hash());
    for r in &rows {
        rec.checkpoints.insert(format!("predictor[{}]", r.name), r.predictor_sha256.clone());
    }
    rec.write(out)?;
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("setting,{CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{}\n", r.name, r.metrics.csv_row()));
    }
    s
}
