//! Synthetic multimodal question-answering benchmarks with controlled
//! client heterogeneity.
//!
//! A latent sample is a tuple of attribute classes. Its vision vector is the
//! sum of one prototype per attribute plus Gaussian noise; its question is a
//! two-token sequence `[task, attribute]`; its answer is a function of the
//! latent tuple and the question. Regimes decide which marginal moves across
//! clients: the vision features (`feature_shift`), the answer pool
//! (`answer_shift`), the query function (`task_shift`), or features and
//! answers together (`mixed`).

mod generate;
mod heterogeneity;
mod io;

use serde::{Deserialize, Serialize};

pub use generate::{generate, pool_clients, FeatureTransform};
pub use heterogeneity::{feature_divergence, heterogeneity_index, label_divergence};
pub use io::{read_client, read_jsonl, spec_hash, write_client, write_jsonl, DatasetHeader};

use crate::{Error, Result};

/// Number of task tokens at the start of the question vocabulary.
pub const TASK_TOKENS: usize = 3;
/// Tokens per question: `[task, attribute]`.
pub const QUESTION_TOKENS: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct VqaTriple {
    /// Unique per client across both splits.
    pub id: u64,
    pub vision: Vec<f64>,
    pub tokens: Vec<usize>,
    /// Index into the client's answer pool.
    pub answer: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    FeatureShift,
    AnswerShift,
    TaskShift,
    Mixed,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::FeatureShift => "feature_shift",
            Regime::AnswerShift => "answer_shift",
            Regime::TaskShift => "task_shift",
            Regime::Mixed => "mixed",
        }
    }

    pub fn shifts_features(self) -> bool {
        matches!(self, Regime::FeatureShift | Regime::Mixed)
    }
}

/// Query function a client's questions ask about.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Class of the queried attribute.
    Identity,
    /// Order of the queried attribute against the next one: less, equal, greater.
    Compare,
    /// Parity of the queried attribute's class plus the next one's.
    Parity,
}

impl TaskKind {
    pub fn token(self) -> usize {
        match self {
            TaskKind::Identity => 0,
            TaskKind::Compare => 1,
            TaskKind::Parity => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSpec {
    pub regime: Regime,
    pub clients: usize,
    /// Distinct heterogeneity sources (styles, answer pools or tasks);
    /// client `k` draws from source `k % sources`. Defaults to `clients`.
    pub sources: Option<usize>,
    pub train_per_client: usize,
    pub test_per_client: usize,
    pub attributes: usize,
    pub classes_per_attribute: usize,
    pub vision_dim: usize,
    /// Norm of each attribute-class prototype.
    pub prototype_scale: f64,
    pub noise_std: f64,
    /// Rotation strength of the per-source orthogonal map (0 = identity).
    pub transform_magnitude: f64,
    /// Per-coordinate std of the per-source offset, multiplied by the magnitude.
    pub shift_bias: f64,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            regime: Regime::FeatureShift,
            clients: 5,
            sources: None,
            train_per_client: 400,
            test_per_client: 200,
            attributes: 3,
            classes_per_attribute: 4,
            vision_dim: 16,
            prototype_scale: 2.0,
            noise_std: 0.3,
            transform_magnitude: 1.0,
            shift_bias: 0.5,
            seed: 2024,
        }
    }
}

impl BenchmarkSpec {
    pub fn n_sources(&self) -> usize {
        self.sources.unwrap_or(self.clients)
    }

    pub fn vocab_size(&self) -> usize {
        TASK_TOKENS + self.attributes
    }

    /// The same benchmark with every client drawn from one untransformed source.
    pub fn iid_clone(&self) -> Self {
        Self {
            regime: Regime::FeatureShift,
            transform_magnitude: 0.0,
            shift_bias: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self, batch_size: usize) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::Config("benchmark needs at least one client".into()));
        }
        let sources = self.n_sources();
        if sources == 0 || self.clients % sources != 0 {
            return Err(Error::Config(format!(
                "{} clients cannot be split evenly over {sources} sources",
                self.clients
            )));
        }
        if self.train_per_client < batch_size.max(1) {
            return Err(Error::Config(format!(
                "train_per_client {} is smaller than the batch size {batch_size}",
                self.train_per_client
            )));
        }
        if self.test_per_client == 0 {
            return Err(Error::Config("test_per_client must be >= 1".into()));
        }
        if self.attributes == 0 || self.classes_per_attribute < 2 {
            return Err(Error::Data("need >= 1 attribute with >= 2 classes".into()));
        }
        if self.regime == Regime::TaskShift && self.attributes < 2 {
            return Err(Error::Data("task_shift compares attributes and needs >= 2".into()));
        }
        if self.attributes * self.classes_per_attribute > self.vision_dim {
            return Err(Error::Data(format!(
                "{} attribute classes cannot have independent prototypes in {} dims",
                self.attributes * self.classes_per_attribute,
                self.vision_dim
            )));
        }
        if !(self.noise_std >= 0.0 && self.transform_magnitude >= 0.0 && self.shift_bias >= 0.0)
            || !(self.prototype_scale > 0.0)
        {
            return Err(Error::Config("scales must be non-negative (prototype_scale > 0)".into()));
        }
        Ok(())
    }
}

/// One client's local dataset D^k and answer pool A^k.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientData {
    pub client: usize,
    pub source: usize,
    pub task: TaskKind,
    pub train: Vec<VqaTriple>,
    pub test: Vec<VqaTriple>,
    /// Global answer id for each local label; its length is C^k.
    pub answer_pool: Vec<usize>,
    pub transform: Option<FeatureTransform>,
}

impl ClientData {
    pub fn n_classes(&self) -> usize {
        self.answer_pool.len()
    }
}
