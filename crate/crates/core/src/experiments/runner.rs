use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{evaluate, mean_std, metrics_csv, RoundMetrics, Split};
use crate::benchgen::{generate, pool_clients};
use crate::config::{Inference, RunConfig};
use crate::error::IoContext;
use crate::federation::{CommLedger, Federation, RoundReport};
use crate::model::container::{decode, encode};
use crate::model::{Backbone, PeftMode};
use crate::{Error, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.fdt";
const FINAL_FILE: &str = "final.json";
const SUMMARY_FILE: &str = "summary.json";
const CHECKPOINT_FORMAT: &str = "feddat-checkpoint";

/// A finished (or partially run) in-memory simulation for one seed.
#[derive(Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub federation: Federation,
    pub metrics: Vec<RoundMetrics>,
}

impl SeedRun {
    /// Test accuracy of every client after the last completed round.
    pub fn final_accuracies(&self) -> Vec<f64> {
        final_accuracies(&self.metrics, self.federation.rounds_done())
    }
}

fn final_accuracies(metrics: &[RoundMetrics], round: usize) -> Vec<f64> {
    metrics
        .iter()
        .filter(|m| m.round == round && m.split == Split::Test)
        .map(|m| m.accuracy)
        .collect()
}

/// Generates the seed's benchmark and sets up the federation (or, with
/// `communicate = false`, the local-only clients).
pub fn build_federation(cfg: &RunConfig, seed: u64, communicate: bool) -> Result<Federation> {
    cfg.validate()?;
    let data = generate(&cfg.benchmark_for_seed(seed))?
        .into_iter()
        .map(Arc::new)
        .collect();
    let backbone = Arc::new(Backbone::new(cfg.model.clone())?);
    Federation::new(
        backbone,
        cfg.peft.clone(),
        cfg.train.clone(),
        data,
        seed,
        cfg.workers(),
        communicate,
    )
}

/// Train rows from the round report, test rows from a fresh evaluation.
fn round_rows(fed: &Federation, report: &RoundReport, inference: Inference) -> Result<Vec<RoundMetrics>> {
    let branch = inference.branch(fed.peft().mode);
    let evals = fed.map_clients(|c| evaluate(&c.model, &c.data.test, branch));
    let mut rows = Vec::with_capacity(2 * evals.len());
    for ((rep, eval), &uplink) in report.clients.iter().zip(evals).zip(&report.uplink_scalars) {
        let eval = eval?;
        let s = rep.stats;
        let base = RoundMetrics {
            round: report.round,
            client: rep.client,
            split: Split::Train,
            accuracy: s.accuracy,
            ce: s.ce,
            kl_s: s.kl_s,
            kl_dat: s.kl_dat,
            alpha: s.alpha,
            beta: s.beta,
            uplink_scalars: uplink,
        };
        rows.push(base);
        rows.push(RoundMetrics {
            split: Split::Test,
            accuracy: eval.accuracy,
            ce: eval.ce,
            kl_s: 0.0,
            kl_dat: 0.0,
            ..base
        });
    }
    Ok(rows)
}

/// Runs every round in memory.
pub fn simulate(cfg: &RunConfig, seed: u64, communicate: bool) -> Result<SeedRun> {
    let mut federation = build_federation(cfg, seed, communicate)?;
    let mut metrics = Vec::new();
    while !federation.is_finished() {
        let report = federation.run_round()?;
        metrics.extend(round_rows(&federation, &report, cfg.eval.inference)?);
    }
    Ok(SeedRun {
        seed,
        federation,
        metrics,
    })
}

/// Full finetuning of one model on all clients' data pooled together, with
/// the configured step budget (`rounds × local_steps`). Returns the test
/// accuracy on the pooled test split.
pub fn centralized_accuracy(cfg: &RunConfig, seed: u64) -> Result<f64> {
    cfg.validate()?;
    let pooled = pool_clients(&generate(&cfg.benchmark_for_seed(seed))?)?;
    let backbone = Arc::new(Backbone::new(cfg.model.clone())?);
    let mut peft = cfg.peft.clone();
    peft.mode = PeftMode::Full;
    let mut fed = Federation::new(backbone, peft, cfg.train.clone(), vec![Arc::new(pooled)], seed, 1, false)?;
    fed.run()?;
    let client = &fed.clients()[0];
    Ok(evaluate(&client.model, &client.data.test, client.model.default_branch())?.accuracy)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: String,
    pub config: RunConfig,
    pub config_hash: String,
    pub seed: u64,
    pub round: usize,
    pub communicate: bool,
    pub ledger: CommLedger,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).at(&tmp)?;
    fs::rename(&tmp, path).at(path)
}

fn write_checkpoint(dir: &Path, cfg: &RunConfig, fed: &Federation) -> Result<()> {
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        config_hash: cfg.hash(),
        seed: fed.seed(),
        round: fed.rounds_done(),
        communicate: fed.communicates(),
        ledger: fed.ledger().clone(),
    };
    let json = serde_json::to_string(&manifest).expect("manifest serializes");
    write_atomic(&dir.join(CHECKPOINT_FILE), &encode(&json, &fed.state_tensors()))
}

/// Reads and verifies a checkpoint: digest, format, code version and config hash.
pub fn read_checkpoint(path: &Path) -> Result<(CheckpointManifest, crate::model::NamedTensors)> {
    let bytes = fs::read(path).at(path)?;
    let (json, tensors) = decode(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let m: CheckpointManifest = serde_json::from_str(&json)
        .map_err(|e| Error::Checkpoint(format!("{}: unreadable manifest: {e}", path.display())))?;
    if m.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("{}: not a run checkpoint", path.display())));
    }
    if m.version != env!("CARGO_PKG_VERSION") {
        return Err(Error::Checkpoint(format!(
            "{}: written by version {}, this is {}",
            path.display(),
            m.version,
            env!("CARGO_PKG_VERSION")
        )));
    }
    if m.config.hash() != m.config_hash {
        return Err(Error::Checkpoint(format!("{}: config hash mismatch", path.display())));
    }
    Ok((m, tensors))
}

#[derive(Serialize, Deserialize)]
struct FinalRecord {
    seed: u64,
    rounds: usize,
    accuracy: Vec<f64>,
    average: f64,
    uplink_scalars: usize,
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

fn append_rows(path: &Path, rows: &[RoundMetrics]) -> Result<()> {
    let mut f = fs::OpenOptions::new().append(true).open(path).at(path)?;
    let mut text = String::new();
    for r in rows {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).at(path)
}

/// Runs rounds until done or until `stop_after` rounds have completed,
/// appending metrics and checkpointing after every round. Returns whether
/// the run finished.
fn drive(cfg: &RunConfig, fed: &mut Federation, dir: &Path, stop_after: Option<usize>) -> Result<bool> {
    let csv = dir.join(METRICS_FILE);
    while !fed.is_finished() {
        if stop_after.is_some_and(|s| fed.rounds_done() >= s) {
            return Ok(false);
        }
        let report = fed.run_round()?;
        let rows = round_rows(fed, &report, cfg.eval.inference)?;
        append_rows(&csv, &rows)?;
        write_checkpoint(dir, cfg, fed)?;
    }
    let text = fs::read_to_string(&csv).at(&csv)?;
    let rows: Vec<RoundMetrics> = text.lines().skip(1).filter_map(RoundMetrics::parse_csv_row).collect();
    let accuracy = final_accuracies(&rows, fed.rounds_done());
    let record = FinalRecord {
        seed: fed.seed(),
        rounds: fed.rounds_done(),
        average: accuracy.iter().sum::<f64>() / accuracy.len().max(1) as f64,
        accuracy,
        uplink_scalars: fed.ledger().total_uplink_scalars(),
    };
    let path = dir.join(FINAL_FILE);
    write_atomic(&path, serde_json::to_string_pretty(&record).expect("record").as_bytes())?;
    Ok(true)
}

/// Runs one seed from scratch into `out/seed_<seed>/`.
pub fn run_seed(cfg: &RunConfig, seed: u64, out: &Path, stop_after: Option<usize>) -> Result<bool> {
    let dir = seed_dir(out, seed);
    fs::create_dir_all(&dir).at(&dir)?;
    let _ = fs::remove_file(dir.join(FINAL_FILE));
    let csv = dir.join(METRICS_FILE);
    fs::write(&csv, metrics_csv(&[])).at(&csv)?;
    let mut fed = build_federation(cfg, seed, true)?;
    drive(cfg, &mut fed, &dir, stop_after)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryStat {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub mode: String,
    pub seeds: Vec<u64>,
    pub rounds: usize,
    /// Final test accuracy per client across seeds.
    pub clients: Vec<SummaryStat>,
    /// Client-average final test accuracy across seeds.
    pub average: SummaryStat,
    pub per_seed_average: Vec<f64>,
    pub uplink_scalars_per_seed: usize,
}

fn summarize(cfg: &RunConfig, out: &Path) -> Result<Summary> {
    let mut records = Vec::with_capacity(cfg.seeds.len());
    for &s in &cfg.seeds {
        let path = seed_dir(out, s).join(FINAL_FILE);
        let text = fs::read_to_string(&path).at(&path)?;
        let rec: FinalRecord =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        records.push(rec);
    }
    let k = records[0].accuracy.len();
    let clients = (0..k)
        .map(|c| {
            let vals: Vec<f64> = records.iter().map(|r| r.accuracy[c]).collect();
            let (mean, std) = mean_std(&vals);
            SummaryStat { mean, std }
        })
        .collect();
    let per_seed_average: Vec<f64> = records.iter().map(|r| r.average).collect();
    let (mean, std) = mean_std(&per_seed_average);
    let summary = Summary {
        config_hash: cfg.hash(),
        mode: cfg.peft.mode.name().into(),
        seeds: cfg.seeds.clone(),
        rounds: cfg.train.rounds,
        clients,
        average: SummaryStat { mean, std },
        per_seed_average,
        uplink_scalars_per_seed: records[0].uplink_scalars,
    };
    let path = out.join(SUMMARY_FILE);
    write_atomic(&path, serde_json::to_string_pretty(&summary).expect("summary").as_bytes())?;
    Ok(summary)
}

fn write_resolved_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    let path = out.join("config.toml");
    fs::write(&path, cfg.to_toml()).at(&path)
}

/// Runs every seed into `out`, then writes `summary.json`. With
/// `stop_after`, the first seed stops after that many rounds (leaving a
/// checkpoint) and `None` is returned.
pub fn run_experiment(cfg: &RunConfig, out: &Path, stop_after: Option<usize>) -> Result<Option<Summary>> {
    cfg.validate()?;
    fs::create_dir_all(out).at(out)?;
    write_resolved_config(cfg, out)?;
    for &seed in &cfg.seeds {
        if !run_seed(cfg, seed, out, stop_after)? {
            return Ok(None);
        }
    }
    summarize(cfg, out).map(Some)
}

/// Continues an interrupted run from its checkpoint, then runs any seeds
/// that have not finished and writes the summary. Resuming a finished run
/// changes nothing.
pub fn resume(checkpoint: &Path) -> Result<Summary> {
    let (m, tensors) = read_checkpoint(checkpoint)?;
    let dir = checkpoint
        .parent()
        .ok_or_else(|| Error::Checkpoint("checkpoint has no parent directory".into()))?;
    let out = dir.parent().unwrap_or(Path::new("."));
    let cfg = m.config.clone();
    cfg.validate()?;
    let mut fed = build_federation(&cfg, m.seed, m.communicate)?;
    fed.restore(&tensors, m.round, m.ledger.clone())?;

    let finished = dir.join(FINAL_FILE).exists() && fed.is_finished();
    if !finished {
        let csv = dir.join(METRICS_FILE);
        let text = fs::read_to_string(&csv).at(&csv)?;
        let kept: Vec<RoundMetrics> = text
            .lines()
            .skip(1)
            .filter_map(RoundMetrics::parse_csv_row)
            .filter(|r| r.round <= m.round)
            .collect();
        if kept.len() != 2 * fed.clients().len() * m.round {
            return Err(Error::Checkpoint(format!(
                "{} holds {} rows, expected {} for round {}",
                csv.display(),
                kept.len(),
                2 * fed.clients().len() * m.round,
                m.round
            )));
        }
        write_atomic(&csv, metrics_csv(&kept).as_bytes())?;
        drive(&cfg, &mut fed, dir, None)?;
    }
    for &seed in &cfg.seeds {
        if !seed_dir(out, seed).join(FINAL_FILE).exists() {
            run_seed(&cfg, seed, out, None)?;
        }
    }
    summarize(&cfg, out)
}
