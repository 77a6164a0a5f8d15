//! The run configuration document (TOML).
//!
//! ```toml
//! seeds = [0, 1, 2, 3, 4]
//! workers = 0          # 0: one worker per client
//! out = "out"
//!
//! [benchmark]          # BenchmarkSpec
//! regime = "feature_shift"
//! clients = 5
//!
//! [model]              # BackboneConfig
//! [peft]               # PeftConfig
//! [train]              # TrainConfig
//! [train.mkd]          # MkdWeights
//! [eval]
//! inference = "shared"
//! [sweep]
//! client_counts = [5, 10, 25]
//! ```
//!
//! Every table rejects unknown keys.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::benchgen::{BenchmarkSpec, QUESTION_TOKENS};
use crate::error::IoContext;
use crate::federation::TrainConfig;
use crate::model::{BackboneConfig, Branch, PeftConfig, PeftMode};
use crate::{Error, Result};

/// Adapter used at evaluation time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Inference {
    /// The shared adapter A_s.
    #[default]
    Shared,
    /// The dual-adapter teacher.
    Dat,
    /// The local adapter alone.
    Local,
}

impl Inference {
    pub fn name(self) -> &'static str {
        match self {
            Inference::Shared => "shared",
            Inference::Dat => "dat",
            Inference::Local => "local",
        }
    }

    /// Branch to evaluate for a model in `mode`; baselines always use their
    /// own deployed branch.
    pub fn branch(self, mode: PeftMode) -> Branch {
        match mode {
            PeftMode::Feddat => match self {
                Inference::Shared => Branch::Shared,
                Inference::Dat => Branch::Dat,
                Inference::Local => Branch::Local,
            },
            PeftMode::Adapter => Branch::Shared,
            _ => Branch::Plain,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub inference: Inference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub client_counts: Vec<usize>,
    /// Multiply the round budget by `K / benchmark.clients`.
    pub scale_budget: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            client_counts: vec![5, 10, 25],
            scale_budget: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    /// Client workers per round; 0 means one per client.
    pub workers: usize,
    pub out: PathBuf,
    pub benchmark: BenchmarkSpec,
    pub model: BackboneConfig,
    pub peft: PeftConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            workers: 0,
            out: PathBuf::from("out"),
            benchmark: BenchmarkSpec::default(),
            model: BackboneConfig::default(),
            peft: PeftConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every field and every cross-field constraint.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        self.model.validate()?;
        self.peft.validate(&self.model)?;
        self.train.validate()?;
        self.benchmark.validate(self.train.batch_size)?;
        if self.model.vision_dim != self.benchmark.vision_dim {
            return Err(Error::Config(format!(
                "model.vision_dim {} differs from benchmark.vision_dim {}",
                self.model.vision_dim, self.benchmark.vision_dim
            )));
        }
        if self.model.n_text_tokens != QUESTION_TOKENS {
            return Err(Error::Config(format!(
                "model.n_text_tokens must be {QUESTION_TOKENS} (question length)"
            )));
        }
        if self.model.vocab_size < self.benchmark.vocab_size() {
            return Err(Error::Config(format!(
                "model.vocab_size {} is smaller than the benchmark vocabulary {}",
                self.model.vocab_size,
                self.benchmark.vocab_size()
            )));
        }
        if self.eval.inference != Inference::Shared && self.peft.mode != PeftMode::Feddat {
            return Err(Error::Config(format!(
                "inference `{}` needs mode feddat",
                self.eval.inference.name()
            )));
        }
        if self.sweep.client_counts.contains(&0) {
            return Err(Error::Config("sweep client counts must be >= 1".into()));
        }
        Ok(())
    }

    /// Effective worker count.
    pub fn workers(&self) -> usize {
        if self.workers == 0 {
            self.benchmark.clients
        } else {
            self.workers
        }
    }

    /// The benchmark generated for one run seed.
    pub fn benchmark_for_seed(&self, seed: u64) -> BenchmarkSpec {
        BenchmarkSpec {
            seed: self.benchmark.seed.wrapping_add(seed),
            ..self.benchmark.clone()
        }
    }

    /// SHA-256 (hex) of everything that influences results; `out` and
    /// `workers` are excluded.
    pub fn hash(&self) -> String {
        let canonical = RunConfig {
            workers: 0,
            out: PathBuf::new(),
            ..self.clone()
        };
        let json = serde_json::to_string(&canonical).expect("config serializes");
        crate::model::hex_digest(&Sha256::digest(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sedes = [1]").is_err());
        assert!(RunConfig::from_toml("[train]\nlearning_rate = 0.1").is_err());
        assert!(RunConfig::from_toml("[train.mkd]\nalpha = 1.0").is_err());
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = RunConfig::from_toml("seeds = [3]\n[peft]\nmode = \"adapter\"\n[train]\nrounds = 2").unwrap();
        assert_eq!(cfg.seeds, vec![3]);
        assert_eq!(cfg.peft.mode, PeftMode::Adapter);
        assert_eq!(cfg.train.rounds, 2);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn cross_field_checks() {
        let mut cfg = RunConfig::default();
        cfg.model.vision_dim = 8;
        cfg.model.n_vision_tokens = 2;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.peft.mode = PeftMode::Adapter;
        cfg.eval.inference = Inference::Dat;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.peft.adapter_r = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = RunConfig::default();
        let b = RunConfig {
            out: "elsewhere".into(),
            workers: 3,
            ..RunConfig::default()
        };
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig {
            seeds: vec![1],
            ..RunConfig::default()
        };
        assert_ne!(a.hash(), c.hash());
    }
}
