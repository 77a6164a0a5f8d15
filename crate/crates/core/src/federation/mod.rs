//! Round loop: broadcast, parallel client updates, aggregation, and the
//! communication ledger.

mod aggregate;
mod client;
mod ledger;
mod optimizer;
mod server;

use serde::{Deserialize, Serialize};

pub use aggregate::{aggregate, Aggregation};
pub use client::{client_update, sample_batch, ClientReport, ClientState, StepStats};
pub use ledger::{decode_message, encode_message, CommLedger, Direction, LedgerEntry};
pub use optimizer::{OptimizerKind, Sgd};
pub use server::{Federation, RoundReport};

use crate::losses::MkdWeights;
use crate::{Error, Result};

/// Training variants of the dual-adapter method (ablations).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Dual-adapter teacher with mutual distillation.
    #[default]
    Full,
    /// Teacher is the local adapter alone; it is also what the second step trains.
    NoFrozenBranch,
    /// Teacher is the frozen shared copy alone; no local adapter is trained.
    NoLocalBranch,
    /// Both distillation weights forced to zero.
    NoMkd,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoFrozenBranch,
        Variant::NoLocalBranch,
        Variant::NoMkd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoFrozenBranch => "no_frozen_branch",
            Variant::NoLocalBranch => "no_local_branch",
            Variant::NoMkd => "no_mkd",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Communication rounds R.
    pub rounds: usize,
    /// Local steps T per round.
    pub local_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub aggregation: Aggregation,
    pub variant: Variant,
    pub mkd: MkdWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rounds: 20,
            local_steps: 10,
            batch_size: 16,
            lr: 0.05,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.9,
            aggregation: Aggregation::Weighted,
            variant: Variant::Full,
            mkd: MkdWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        self.mkd.validate()
    }

    /// α and β for a 1-based round, after the variant's overrides.
    pub fn weights(&self, round: usize) -> (f64, f64) {
        if self.variant == Variant::NoMkd {
            return (0.0, 0.0);
        }
        (self.mkd.alpha(round, self.rounds), self.mkd.beta(round, self.rounds))
    }
}
