use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::params::NamedTensors;
use crate::autodiff::Tensor;
use crate::rng::substream;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub n_vision_tokens: usize,
    /// Length of the pre-extracted vision feature vector; split evenly into tokens.
    pub vision_dim: usize,
    pub n_text_tokens: usize,
    pub vocab_size: usize,
    pub use_positions: bool,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ffn: 64,
            n_vision_tokens: 1,
            vision_dim: 16,
            n_text_tokens: 2,
            vocab_size: 6,
            use_positions: true,
            seed: 7,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("n_vision_tokens", self.n_vision_tokens),
            ("vision_dim", self.vision_dim),
            ("n_text_tokens", self.n_text_tokens),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vision_dim % self.n_vision_tokens != 0 {
            return Err(Error::Config(format!(
                "vision_dim {} not divisible by n_vision_tokens {}",
                self.vision_dim, self.n_vision_tokens
            )));
        }
        if self.d_model < 2 {
            return Err(Error::Config("d_model must be >= 2 for layer norm".into()));
        }
        Ok(())
    }

    pub fn vision_token_dim(&self) -> usize {
        self.vision_dim / self.n_vision_tokens
    }

    /// Tokens per sample before any prompt rows.
    pub fn seq_len(&self) -> usize {
        self.n_vision_tokens + self.n_text_tokens
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// The frozen foundation model: a deterministic function of its config.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    params: NamedTensors,
}

fn gaussian(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("std > 0");
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("shape")
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(config.seed, "backbone", &[]);
        let d = config.d_model;
        let f = config.d_ffn;
        let din = config.vision_token_dim();
        let mut p = NamedTensors::new();
        p.insert("embed.vision.weight", gaussian(&mut rng, &[din, d], 1.0 / (din as f64).sqrt()));
        p.insert("embed.vision.bias", Tensor::zeros(&[d]));
        p.insert("embed.text", gaussian(&mut rng, &[config.vocab_size, d], 1.0));
        p.insert("embed.type", gaussian(&mut rng, &[2, d], 0.5));
        p.insert("embed.position", gaussian(&mut rng, &[config.seq_len(), d], 0.5));
        p.insert("embed.norm.gain", Tensor::full(&[d], 1.0));
        p.insert("embed.norm.bias", Tensor::zeros(&[d]));
        let proj_std = 1.0 / (d as f64).sqrt();
        for l in 0..config.n_layers {
            for proj in ["query", "key", "value", "output"] {
                p.insert(format!("layer{l}.attn.{proj}.weight"), gaussian(&mut rng, &[d, d], proj_std));
                p.insert(format!("layer{l}.attn.{proj}.bias"), Tensor::zeros(&[d]));
            }
            p.insert(format!("layer{l}.norm1.gain"), Tensor::full(&[d], 1.0));
            p.insert(format!("layer{l}.norm1.bias"), Tensor::zeros(&[d]));
            p.insert(format!("layer{l}.ffn.in.weight"), gaussian(&mut rng, &[d, f], proj_std));
            p.insert(format!("layer{l}.ffn.in.bias"), Tensor::zeros(&[f]));
            p.insert(
                format!("layer{l}.ffn.out.weight"),
                gaussian(&mut rng, &[f, d], 1.0 / (f as f64).sqrt()),
            );
            p.insert(format!("layer{l}.ffn.out.bias"), Tensor::zeros(&[d]));
            p.insert(format!("layer{l}.norm2.gain"), Tensor::full(&[d], 1.0));
            p.insert(format!("layer{l}.norm2.bias"), Tensor::zeros(&[d]));
        }
        Ok(Self { config, params: p })
    }

    pub fn params(&self) -> &NamedTensors {
        &self.params
    }

    /// Every bias vector (projection biases and layer-norm shifts).
    pub fn bias_params(&self) -> NamedTensors {
        self.params.filter(is_bias)
    }

    /// Hash of every parameter byte; unchanged by any training run.
    pub fn fingerprint(&self) -> String {
        self.params.content_hash()
    }
}

pub(crate) fn is_bias(name: &str) -> bool {
    name.ends_with(".bias")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_in_seed() {
        let a = Backbone::new(BackboneConfig::default()).unwrap();
        let b = Backbone::new(BackboneConfig::default()).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = Backbone::new(BackboneConfig {
            seed: 8,
            ..BackboneConfig::default()
        })
        .unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = BackboneConfig {
            n_heads: 3,
            ..BackboneConfig::default()
        };
        assert!(matches!(Backbone::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn bias_set() {
        let b = Backbone::new(BackboneConfig::default()).unwrap();
        let biases = b.bias_params();
        // vision bias, embed norm, per layer: 4 attn + 2 norm + 2 ffn
        assert_eq!(biases.len(), 2 + 2 * 8);
        assert_eq!(biases.scalar_count(), 32 + 32 + 2 * (4 * 32 + 2 * 32 + 64 + 32));
    }
}
