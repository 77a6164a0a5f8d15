//! Frozen toy backbone plus pluggable parameter-efficient modules.

mod backbone;
mod client;
pub mod container;
mod params;
mod peft;

use serde::{Deserialize, Serialize};

pub use backbone::{Backbone, BackboneConfig};
pub use client::{Binding, Branch, ClientModel, ParamSummary};
pub(crate) use client::init_communicated;
pub use params::{NamedTensors, ParamGroup};
pub(crate) use params::hex as hex_digest;
pub use peft::{
    adapter_delta, adapter_forward, dat_forward, init_adapter, lora_forward, prompt_prepend, AdapterParams,
    AdapterSite, DatModule,
};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeftMode {
    Adapter,
    Feddat,
    Lora,
    Prompt,
    Bias,
    HeadOnly,
    Full,
}

impl PeftMode {
    pub const ALL: [PeftMode; 7] = [
        PeftMode::Adapter,
        PeftMode::Feddat,
        PeftMode::Lora,
        PeftMode::Prompt,
        PeftMode::Bias,
        PeftMode::HeadOnly,
        PeftMode::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PeftMode::Adapter => "adapter",
            PeftMode::Feddat => "feddat",
            PeftMode::Lora => "lora",
            PeftMode::Prompt => "prompt",
            PeftMode::Bias => "bias",
            PeftMode::HeadOnly => "head_only",
            PeftMode::Full => "full",
        }
    }

    /// Parameter groups that travel between server and clients.
    pub fn communicated_groups(self) -> &'static [ParamGroup] {
        match self {
            PeftMode::Adapter | PeftMode::Feddat => &[ParamGroup::Shared],
            PeftMode::Lora => &[ParamGroup::Lora],
            PeftMode::Prompt => &[ParamGroup::Prompt],
            PeftMode::Bias | PeftMode::Full => &[ParamGroup::Backbone],
            PeftMode::HeadOnly => &[],
        }
    }
}

impl std::str::FromStr for PeftMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PeftMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    Query,
    Value,
}

impl LoraTarget {
    pub fn name(self) -> &'static str {
        match self {
            LoraTarget::Query => "query",
            LoraTarget::Value => "value",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PeftConfig {
    pub mode: PeftMode,
    /// Adapter bottleneck width r.
    pub adapter_r: usize,
    /// Nonlinearity between the adapter projections.
    pub adapter_activation: Activation,
    pub lora_r: usize,
    pub lora_targets: Vec<LoraTarget>,
    pub n_prompt_tokens: usize,
}

impl Default for PeftConfig {
    fn default() -> Self {
        Self {
            mode: PeftMode::Feddat,
            adapter_r: 4,
            adapter_activation: Activation::Relu,
            lora_r: 4,
            lora_targets: vec![LoraTarget::Query, LoraTarget::Value],
            n_prompt_tokens: 4,
        }
    }
}

impl PeftConfig {
    pub fn with_mode(mode: PeftMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        match self.mode {
            PeftMode::Adapter | PeftMode::Feddat => {
                if self.adapter_r == 0 || self.adapter_r >= backbone.d_model {
                    return Err(Error::Config(format!(
                        "adapter_r must satisfy 0 < r < d_model ({}), got {}",
                        backbone.d_model, self.adapter_r
                    )));
                }
            }
            PeftMode::Lora => {
                if self.lora_r == 0 || self.lora_r > backbone.d_model {
                    return Err(Error::Config(format!("lora_r must be in 1..={}", backbone.d_model)));
                }
                if self.lora_targets.is_empty() {
                    return Err(Error::Config("lora_targets must not be empty".into()));
                }
            }
            PeftMode::Prompt => {
                if self.n_prompt_tokens == 0 {
                    return Err(Error::Config("prompt mode needs n_prompt_tokens >= 1".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }
}
