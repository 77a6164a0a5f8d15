use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::runner::{simulate, SeedRun};
use super::{evaluate, mean_std, RoundMetrics};
use crate::benchgen::{BenchmarkSpec, Regime};
use crate::config::{Inference, RunConfig};
use crate::federation::Variant;
use crate::model::PeftMode;
use crate::{Error, Result};

/// Per-client and client-average accuracies, averaged over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub name: String,
    pub per_client: Vec<f64>,
    pub average: f64,
    pub average_std: f64,
    /// Total uplink scalars of one seed's run.
    pub uplink_scalars: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub rows: Vec<AccuracyRow>,
}

impl AccuracyTable {
    pub fn row(&self, name: &str) -> Option<&AccuracyRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_csv(&self) -> String {
        let k = self.rows.first().map_or(0, |r| r.per_client.len());
        let mut out = String::from("row");
        for c in 0..k {
            let _ = write!(out, ",client{c}");
        }
        out.push_str(",average,average_std,uplink_scalars\n");
        for r in &self.rows {
            out.push_str(&r.name);
            for a in &r.per_client {
                let _ = write!(out, ",{a}");
            }
            let _ = writeln!(out, ",{},{},{}", r.average, r.average_std, r.uplink_scalars);
        }
        out
    }
}

/// Folds per-seed final accuracies (`seeds × K`) into one row.
fn accuracy_row(name: &str, per_seed: &[Vec<f64>], uplink_scalars: usize) -> AccuracyRow {
    let k = per_seed[0].len();
    let per_client = (0..k)
        .map(|c| per_seed.iter().map(|s| s[c]).sum::<f64>() / per_seed.len() as f64)
        .collect();
    let averages: Vec<f64> = per_seed.iter().map(|s| s.iter().sum::<f64>() / k as f64).collect();
    let (average, average_std) = mean_std(&averages);
    AccuracyRow {
        name: name.into(),
        per_client,
        average,
        average_std,
        uplink_scalars,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    FullFeddat,
    NoFrozenBranch,
    NoLocalBranch,
    NoMkd,
    InferDat,
    InferLocal,
    InferShared,
}

impl AblationMode {
    pub const ALL: [AblationMode; 7] = [
        AblationMode::FullFeddat,
        AblationMode::NoFrozenBranch,
        AblationMode::NoLocalBranch,
        AblationMode::NoMkd,
        AblationMode::InferDat,
        AblationMode::InferLocal,
        AblationMode::InferShared,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::FullFeddat => "full_feddat",
            AblationMode::NoFrozenBranch => "no_frozen_branch",
            AblationMode::NoLocalBranch => "no_local_branch",
            AblationMode::NoMkd => "no_mkd",
            AblationMode::InferDat => "infer_dat",
            AblationMode::InferLocal => "infer_local",
            AblationMode::InferShared => "infer_shared",
        }
    }

    /// Training variant and inference adapter of the row.
    pub fn setup(self) -> (Variant, Inference) {
        match self {
            AblationMode::FullFeddat | AblationMode::InferShared => (Variant::Full, Inference::Shared),
            AblationMode::NoFrozenBranch => (Variant::NoFrozenBranch, Inference::Shared),
            AblationMode::NoLocalBranch => (Variant::NoLocalBranch, Inference::Shared),
            AblationMode::NoMkd => (Variant::NoMkd, Inference::Shared),
            AblationMode::InferDat => (Variant::Full, Inference::Dat),
            AblationMode::InferLocal => (Variant::Full, Inference::Local),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub table: AccuracyTable,
    /// Metrics of every training run: `(variant, seed, rows)`.
    pub metrics: Vec<(Variant, u64, Vec<RoundMetrics>)>,
}

/// Trains each variant once per seed on the feddat configuration and reads
/// all seven rows off those runs; inference rows re-evaluate the full
/// variant's final clients with a different adapter.
pub fn ablation_suite(cfg: &RunConfig) -> Result<AblationResult> {
    let mut base = cfg.clone();
    base.peft.mode = PeftMode::Feddat;
    base.eval.inference = Inference::Shared;
    base.validate()?;
    let mut metrics = Vec::new();
    let mut finals: Vec<(AblationMode, Vec<Vec<f64>>, usize)> =
        AblationMode::ALL.iter().map(|m| (*m, Vec::new(), 0)).collect();
    for variant in Variant::ALL {
        let mut vcfg = base.clone();
        vcfg.train.variant = variant;
        for &seed in &base.seeds {
            let run: SeedRun = simulate(&vcfg, seed, true)?;
            let uplink = run.federation.ledger().total_uplink_scalars();
            for (mode, per_seed, up) in finals.iter_mut() {
                let (v, inference) = mode.setup();
                if v != variant {
                    continue;
                }
                let accs = if inference == Inference::Shared {
                    run.final_accuracies()
                } else {
                    let branch = inference.branch(PeftMode::Feddat);
                    run.federation
                        .map_clients(|c| evaluate(&c.model, &c.data.test, branch).map(|e| e.accuracy))
                        .into_iter()
                        .collect::<Result<Vec<_>>>()?
                };
                per_seed.push(accs);
                *up = uplink;
            }
            metrics.push((variant, seed, run.metrics));
        }
    }
    let rows = finals
        .iter()
        .map(|(mode, per_seed, up)| accuracy_row(mode.name(), per_seed, *up))
        .collect();
    Ok(AblationResult {
        table: AccuracyTable { rows },
        metrics,
    })
}

/// Head-only and adapter finetuning, each local-only and federated.
/// Rows: `clf-L`, `Adapter-L`, `clf`, `Adapter`.
pub fn motivational_grid(cfg: &RunConfig) -> Result<AccuracyTable> {
    if cfg.benchmark.regime != Regime::FeatureShift {
        return Err(Error::Config(format!(
            "the motivational grid needs a feature_shift benchmark, got {}",
            cfg.benchmark.regime.name()
        )));
    }
    let cells = [
        ("clf-L", PeftMode::HeadOnly, false),
        ("Adapter-L", PeftMode::Adapter, false),
        ("clf", PeftMode::HeadOnly, true),
        ("Adapter", PeftMode::Adapter, true),
    ];
    let mut rows = Vec::with_capacity(cells.len());
    for (name, mode, communicate) in cells {
        let mut c = cfg.clone();
        c.peft.mode = mode;
        c.eval.inference = Inference::Shared;
        c.validate()?;
        let mut per_seed = Vec::new();
        let mut uplink = 0;
        for &seed in &c.seeds {
            let run = simulate(&c, seed, communicate)?;
            uplink = run.federation.ledger().total_uplink_scalars();
            per_seed.push(run.final_accuracies());
        }
        rows.push(accuracy_row(name, &per_seed, uplink));
    }
    Ok(AccuracyTable { rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub clients: usize,
    pub method: String,
    pub rounds: usize,
    pub average: f64,
    pub average_std: f64,
    /// Total uplink scalars of one seed's run.
    pub uplink_scalars: usize,
    /// Every loss and metric of every seed stayed finite.
    pub finite: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("clients,method,rounds,average,average_std,uplink_scalars,finite\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.clients, r.method, r.rounds, r.average, r.average_std, r.uplink_scalars, r.finite
            );
        }
        out
    }
}

/// The benchmark for `k` clients: the base's heterogeneity sources, each
/// split into equal client subsets.
pub(crate) fn sweep_spec(base: &BenchmarkSpec, k: usize) -> Result<BenchmarkSpec> {
    let sources = base.n_sources();
    let train_total = base.train_per_client * base.clients;
    let test_total = base.test_per_client * base.clients;
    if k % sources != 0 || train_total % k != 0 || test_total % k != 0 {
        return Err(Error::Config(format!(
            "{k} clients do not split {sources} sources ({train_total} train / {test_total} test samples) evenly"
        )));
    }
    Ok(BenchmarkSpec {
        clients: k,
        sources: Some(sources),
        train_per_client: train_total / k,
        test_per_client: test_total / k,
        ..base.clone()
    })
}

/// Feddat and plain adapter at every client count in `cfg.sweep`.
pub fn scalability_sweep(cfg: &RunConfig) -> Result<SweepTable> {
    let mut rows = Vec::new();
    for &k in &cfg.sweep.client_counts {
        let spec = sweep_spec(&cfg.benchmark, k)?;
        for mode in [PeftMode::Feddat, PeftMode::Adapter] {
            let mut c = cfg.clone();
            c.benchmark = spec.clone();
            c.peft.mode = mode;
            c.eval.inference = Inference::Shared;
            if cfg.sweep.scale_budget {
                c.train.rounds = (cfg.train.rounds * k).div_ceil(cfg.benchmark.clients);
            }
            c.validate()?;
            let mut averages = Vec::new();
            let mut uplink = 0;
            let mut finite = true;
            for &seed in &c.seeds {
                let run = simulate(&c, seed, true)?;
                uplink = run.federation.ledger().total_uplink_scalars();
                finite &= run
                    .metrics
                    .iter()
                    .all(|m| m.accuracy.is_finite() && m.ce.is_finite() && m.kl_s.is_finite() && m.kl_dat.is_finite());
                let accs = run.final_accuracies();
                averages.push(accs.iter().sum::<f64>() / accs.len() as f64);
            }
            let (average, average_std) = mean_std(&averages);
            rows.push(SweepRow {
                clients: k,
                method: mode.name().into(),
                rounds: c.train.rounds,
                average,
                average_std,
                uplink_scalars: uplink,
                finite,
            });
        }
    }
    Ok(SweepTable { rows })
}
