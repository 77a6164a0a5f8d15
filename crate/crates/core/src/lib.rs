//! Federated parameter-efficient finetuning of a frozen toy multimodal
//! transformer.
//!
//! Clients train a shared bottleneck adapter together with a dual-adapter
//! teacher (frozen copy of the shared adapter plus a private local adapter),
//! coupled by mutual knowledge distillation; the server averages only the
//! shared adapter. Baseline PEFT modes (plain adapter, LoRA, prompt, bias,
//! head-only, full finetune) run through the same round loop.
//!
//! Module map:
//! - [`autodiff`]: tensors and the reverse-mode tape
//! - [`model`]: frozen backbone, adapters, dual-adapter teacher, LoRA, prompts, heads
//! - [`losses`]: cross-entropy, KL, ramp-up schedule, the two branch objectives
//! - [`federation`]: client update, aggregation, server rounds, communication ledger
//! - [`benchgen`]: synthetic heterogeneous VQA-style client datasets
//! - [`experiments`]: evaluation, metrics files, ablation/motivation/scalability tables
//! - [`config`]: the run configuration document

pub mod autodiff;
pub mod benchgen;
pub mod config;
pub mod error;
pub mod experiments;
pub mod federation;
pub mod losses;
pub mod model;
pub mod parallel;
pub mod rng;

pub use error::{Error, Result};
