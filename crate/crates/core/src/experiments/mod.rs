//! Evaluation, per-round metrics, checkpointed runs, and the comparison
//! tables (ablation, motivational grid, scalability sweep).

mod runner;
mod tables;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use runner::{
    build_federation, centralized_accuracy, read_checkpoint, resume, run_experiment, run_seed, simulate, CheckpointManifest, SeedRun,
    Summary, SummaryStat, CHECKPOINT_FILE, METRICS_FILE,
};
pub use tables::{
    ablation_suite, motivational_grid, scalability_sweep, AblationMode, AblationResult, AccuracyRow, AccuracyTable,
    SweepRow, SweepTable,
};

use crate::benchgen::VqaTriple;
use crate::losses::cross_entropy_value;
use crate::model::{Branch, ClientModel};
use crate::Result;

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub ce: f64,
    pub n: usize,
}

/// Accuracy and mean cross-entropy of `branch` on `samples`.
pub fn evaluate(model: &ClientModel, samples: &[VqaTriple], branch: Branch) -> Result<EvalResult> {
    if samples.is_empty() {
        return Ok(EvalResult {
            accuracy: 0.0,
            ce: 0.0,
            n: 0,
        });
    }
    let refs: Vec<&VqaTriple> = samples.iter().collect();
    let logits = model.logits(branch, &refs)?;
    let mut correct = 0usize;
    let mut ce = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let row = logits.row(i);
        if argmax(row) == s.answer {
            correct += 1;
        }
        ce += cross_entropy_value(row, s.answer)?;
    }
    Ok(EvalResult {
        accuracy: correct as f64 / samples.len() as f64,
        ce: ce / samples.len() as f64,
        n: samples.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One metrics row. Train rows average the round's training steps (the
/// deployed branch, before each step); test rows evaluate the whole local
/// test split after the round, with KL columns zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub client: usize,
    pub split: Split,
    pub accuracy: f64,
    pub ce: f64,
    pub kl_s: f64,
    pub kl_dat: f64,
    pub alpha: f64,
    pub beta: f64,
    pub uplink_scalars: usize,
}

pub const CSV_HEADER: &str = "round,client,split,accuracy,ce,kl_s,kl_dat,alpha,beta,uplink_scalars";

impl RoundMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.round,
            self.client,
            self.split.name(),
            self.accuracy,
            self.ce,
            self.kl_s,
            self.kl_dat,
            self.alpha,
            self.beta,
            self.uplink_scalars
        )
    }

    pub fn parse_csv_row(line: &str) -> Option<RoundMetrics> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 10 {
            return None;
        }
        let split = match f[2] {
            "train" => Split::Train,
            "test" => Split::Test,
            _ => return None,
        };
        Some(RoundMetrics {
            round: f[0].parse().ok()?,
            client: f[1].parse().ok()?,
            split,
            accuracy: f[3].parse().ok()?,
            ce: f[4].parse().ok()?,
            kl_s: f[5].parse().ok()?,
            kl_dat: f[6].parse().ok()?,
            alpha: f[7].parse().ok()?,
            beta: f[8].parse().ok()?,
            uplink_scalars: f[9].parse().ok()?,
        })
    }
}

/// The full CSV document for `rows`.
pub fn metrics_csv(rows: &[RoundMetrics]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

/// Sample mean and standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_and_shift_invariance() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
        let v = [0.3, -1.0, 0.9, 0.9];
        let shifted: Vec<f64> = v.iter().map(|x| x + 17.5).collect();
        assert_eq!(argmax(&v), argmax(&shifted));
    }

    #[test]
    fn csv_roundtrip() {
        let row = RoundMetrics {
            round: 3,
            client: 1,
            split: Split::Test,
            accuracy: 0.625,
            ce: 1.0 / 3.0,
            kl_s: 0.0,
            kl_dat: 0.0,
            alpha: 0.1,
            beta: 0.2,
            uplink_scalars: 512,
        };
        let back = RoundMetrics::parse_csv_row(&row.csv_row()).unwrap();
        assert_eq!(back, row);
        assert!(metrics_csv(&[row]).starts_with(CSV_HEADER));
    }

    #[test]
    fn mean_std_cases() {
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }
}
