use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::backbone::{is_bias, Backbone};
use super::params::{NamedTensors, ParamGroup};
use super::peft::{adapter_forward, dat_forward, init_adapter, AdapterParams, DatModule};
use super::{Activation, PeftConfig, PeftMode};
use crate::autodiff::{Tape, Tensor, Var};
use crate::benchgen::VqaTriple;
use crate::{Error, Result};

/// Which adapter set is injected after each block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    /// No adapter injection (baseline modes).
    Plain,
    /// The shared adapter A_s.
    Shared,
    /// The dual-adapter teacher: frozen copy Â_s and local A_c, ½ each.
    Dat,
    /// Local adapter A_c alone.
    Local,
    /// Frozen copy Â_s alone.
    Frozen,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Plain => "plain",
            Branch::Shared => "shared",
            Branch::Dat => "dat",
            Branch::Local => "local",
            Branch::Frozen => "frozen",
        }
    }

    fn adapter_groups(self) -> &'static [ParamGroup] {
        match self {
            Branch::Plain => &[],
            Branch::Shared => &[ParamGroup::Shared],
            Branch::Dat => &[ParamGroup::Frozen, ParamGroup::Local],
            Branch::Local => &[ParamGroup::Local],
            Branch::Frozen => &[ParamGroup::Frozen],
        }
    }
}

/// Names and shapes of the communicated parameter set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSummary {
    pub names: Vec<(String, Vec<usize>)>,
    pub count: usize,
}

/// Tape handles for one forward pass.
#[derive(Debug)]
pub struct Binding {
    branch: Branch,
    /// Backbone tensors keyed by their backbone name (override or frozen base).
    backbone: BTreeMap<String, Var>,
    /// Client-side tensors keyed by their client name.
    params: BTreeMap<String, Var>,
    trainable: Vec<(String, Var)>,
}

impl Binding {
    pub fn branch(&self) -> Branch {
        self.branch
    }

    fn backbone(&self, name: &str) -> Var {
        self.backbone[name]
    }

    fn param(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    /// Leaves bound with `requires_grad`, in name order.
    pub fn trainable(&self) -> &[(String, Var)] {
        &self.trainable
    }

    pub fn var(&self, client_name: &str) -> Option<Var> {
        self.param(client_name)
    }
}

/// Backbone handle plus every client-side tensor of one client.
///
/// All client tensors live in one [`NamedTensors`] store keyed by group
/// prefix (`shared.`, `frozen.`, `local.`, `lora.`, `prompt.`, `backbone.`,
/// `head.`), so messaging, optimizers and checkpoints address them by name.
#[derive(Clone, Debug)]
pub struct ClientModel {
    backbone: Arc<Backbone>,
    peft: PeftConfig,
    n_classes: usize,
    params: NamedTensors,
}

fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std > 0");
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

/// Freshly initialized communicated parameters for `mode` (the server's A_s etc.).
pub(crate) fn init_communicated(backbone: &Backbone, peft: &PeftConfig, rng: &mut impl Rng) -> NamedTensors {
    let cfg = &backbone.config;
    let d = cfg.d_model;
    match peft.mode {
        PeftMode::Adapter | PeftMode::Feddat => init_adapter(cfg.n_layers, d, peft.adapter_r, rng).to_named("shared"),
        PeftMode::Lora => {
            let mut p = NamedTensors::new();
            let r = peft.lora_r;
            let mut targets = peft.lora_targets.clone();
            targets.sort();
            targets.dedup();
            for l in 0..cfg.n_layers {
                for t in &targets {
                    p.insert(format!("lora.layer{l}.{}.b", t.name()), Tensor::zeros(&[d, r]));
                    p.insert(
                        format!("lora.layer{l}.{}.a", t.name()),
                        normal_tensor(rng, &[r, d], 1.0 / (d as f64).sqrt()),
                    );
                }
            }
            p
        }
        PeftMode::Prompt => {
            let mut p = NamedTensors::new();
            p.insert("prompt.tokens", normal_tensor(rng, &[peft.n_prompt_tokens, d], 0.02));
            p
        }
        PeftMode::Bias => backbone
            .params()
            .iter()
            .filter(|(n, _)| is_bias(n))
            .map(|(n, t)| (format!("backbone.{n}"), t.clone()))
            .collect(),
        PeftMode::Full => backbone
            .params()
            .iter()
            .map(|(n, t)| (format!("backbone.{n}"), t.clone()))
            .collect(),
        PeftMode::HeadOnly => NamedTensors::new(),
    }
}

const EVAL_CHUNK: usize = 64;

impl ClientModel {
    /// Builds a client model: fresh head, fresh communicated set, and for
    /// feddat a fresh local adapter plus a frozen copy of the shared one.
    pub fn new(backbone: Arc<Backbone>, peft: PeftConfig, n_classes: usize, rng: &mut impl Rng) -> Result<Self> {
        peft.validate(&backbone.config)?;
        if n_classes == 0 {
            return Err(Error::Model("answer pool must not be empty".into()));
        }
        let d = backbone.config.d_model;
        let mut params = NamedTensors::new();
        params.insert("head.weight", normal_tensor(rng, &[d, n_classes], 1.0 / (d as f64).sqrt()));
        params.insert("head.bias", Tensor::zeros(&[n_classes]));
        let communicated = init_communicated(&backbone, &peft, rng);
        params.extend_from(&communicated);
        if peft.mode == PeftMode::Feddat {
            let local = init_adapter(backbone.config.n_layers, d, peft.adapter_r, rng);
            params.extend_from(&local.to_named("local"));
            params.extend_from(&communicated.renamed_prefix("shared", "frozen"));
        }
        Ok(Self {
            backbone,
            peft,
            n_classes,
            params,
        })
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn backbone_arc(&self) -> &Arc<Backbone> {
        &self.backbone
    }

    pub fn peft(&self) -> &PeftConfig {
        &self.peft
    }

    pub fn mode(&self) -> PeftMode {
        self.peft.mode
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn params(&self) -> &NamedTensors {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut NamedTensors {
        &mut self.params
    }

    /// Replaces the whole client store (checkpoint restore).
    pub fn set_params(&mut self, params: NamedTensors) -> Result<()> {
        if !params.same_geometry(&self.params) {
            return Err(Error::Model("restored parameters do not match model geometry".into()));
        }
        self.params = params;
        Ok(())
    }

    /// The communicated set: what an uplink message carries.
    pub fn communicated(&self) -> NamedTensors {
        let groups = self.peft.mode.communicated_groups();
        self.params
            .filter(|n| ParamGroup::of(n).is_some_and(|g| groups.contains(&g)))
    }

    /// Names, shapes and scalar count of the communicated set. Heads, A_c and
    /// Â_s are never part of it.
    pub fn trainable_params(&self) -> ParamSummary {
        let c = self.communicated();
        ParamSummary {
            names: c.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect(),
            count: c.scalar_count(),
        }
    }

    /// Installs a downlink payload over the communicated set.
    pub fn install(&mut self, global: &NamedTensors) -> Result<()> {
        if !global.same_geometry(&self.communicated()) {
            return Err(Error::Federation("broadcast does not match client geometry".into()));
        }
        self.params.extend_from(global);
        Ok(())
    }

    /// Â_s ← A_s, bit-exact copy.
    pub fn refresh_frozen(&mut self) {
        if self.params.group(ParamGroup::Frozen).is_empty() {
            return;
        }
        let copy = self.params.group(ParamGroup::Shared).renamed_prefix("shared", "frozen");
        self.params.extend_from(&copy);
    }

    pub fn adapter(&self, group: ParamGroup) -> Result<AdapterParams> {
        AdapterParams::from_named(&self.params, group.prefix(), self.backbone.config.n_layers)
    }

    pub fn dat_module(&self) -> Result<DatModule> {
        DatModule::new(self.adapter(ParamGroup::Frozen)?, self.adapter(ParamGroup::Local)?)
    }

    pub fn has_group(&self, group: ParamGroup) -> bool {
        self.params.names().any(|n| ParamGroup::of(n) == Some(group))
    }

    /// Puts every tensor the branch needs on `tape`; groups in `trainable`
    /// become gradient-tracking leaves, everything else is constant.
    pub fn bind(&self, tape: &mut Tape, branch: Branch, trainable: &[ParamGroup]) -> Result<Binding> {
        if trainable.contains(&ParamGroup::Frozen) {
            return Err(Error::Model("the frozen teacher copy cannot be trained".into()));
        }
        for g in branch.adapter_groups() {
            if !self.has_group(*g) {
                return Err(Error::Model(format!(
                    "branch `{}` needs the `{}` adapter, absent in mode {}",
                    branch.name(),
                    g.prefix(),
                    self.peft.mode.name()
                )));
            }
        }
        let train_backbone = trainable.contains(&ParamGroup::Backbone);
        let mut backbone = BTreeMap::new();
        let mut trainable_vars = Vec::new();
        for (name, base) in self.backbone.params().iter() {
            let client_name = format!("backbone.{name}");
            let var = match self.params.get(&client_name) {
                Some(t) => {
                    let v = tape.leaf(t.clone(), train_backbone);
                    if train_backbone {
                        trainable_vars.push((client_name, v));
                    }
                    v
                }
                None => tape.constant(base.clone()),
            };
            backbone.insert(name.clone(), var);
        }
        let mut params = BTreeMap::new();
        for (name, t) in self.params.iter() {
            let Some(group) = ParamGroup::of(name) else { continue };
            let needed = match group {
                ParamGroup::Backbone => false,
                ParamGroup::Shared | ParamGroup::Frozen | ParamGroup::Local => {
                    branch.adapter_groups().contains(&group)
                }
                ParamGroup::Lora | ParamGroup::Prompt | ParamGroup::Head => true,
            };
            if !needed {
                continue;
            }
            let train = trainable.contains(&group);
            let v = tape.leaf(t.clone(), train);
            if train {
                trainable_vars.push((name.clone(), v));
            }
            params.insert(name.clone(), v);
        }
        trainable_vars.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(Binding {
            branch,
            backbone,
            params,
            trainable: trainable_vars,
        })
    }

    /// Logits (`B×C^k`) for a batch: embed both streams, add modality-type
    /// (and optionally position) embeddings, concatenate into one stream,
    /// prepend prompts, run the blocks with the bound injection, mean-pool,
    /// apply the head.
    pub fn forward(&self, tape: &mut Tape, b: &Binding, samples: &[&VqaTriple]) -> Result<Var> {
        let cfg = &self.backbone.config;
        let bsz = samples.len();
        if bsz == 0 {
            return Err(Error::Model("empty batch".into()));
        }
        let (nv, nt) = (cfg.n_vision_tokens, cfg.n_text_tokens);
        let din = cfg.vision_token_dim();
        let mut vision = Vec::with_capacity(bsz * cfg.vision_dim);
        let mut ids = Vec::with_capacity(bsz * nt);
        for s in samples {
            if s.vision.len() != cfg.vision_dim {
                return Err(Error::Model(format!(
                    "vision vector has {} values, backbone expects {}",
                    s.vision.len(),
                    cfg.vision_dim
                )));
            }
            if s.tokens.len() != nt {
                return Err(Error::Model(format!("question has {} tokens, expected {nt}", s.tokens.len())));
            }
            if let Some(&bad) = s.tokens.iter().find(|&&t| t >= cfg.vocab_size) {
                return Err(Error::Model(format!("token id {bad} >= vocab size {}", cfg.vocab_size)));
            }
            if s.answer >= self.n_classes {
                return Err(Error::Model(format!(
                    "answer {} outside the head's pool of {}",
                    s.answer, self.n_classes
                )));
            }
            vision.extend_from_slice(&s.vision);
            ids.extend_from_slice(&s.tokens);
        }

        let xv = tape.constant(Tensor::matrix(bsz * nv, din, vision));
        let ev = tape.matmul(xv, b.backbone("embed.vision.weight"))?;
        let ev = tape.add_row(ev, b.backbone("embed.vision.bias"))?;
        let et = tape.embedding(b.backbone("embed.text"), &ids)?;
        let mut parts = Vec::with_capacity(2 * bsz);
        for i in 0..bsz {
            parts.push(tape.slice_rows(ev, i * nv, nv)?);
            parts.push(tape.slice_rows(et, i * nt, nt)?);
        }
        let mut x = tape.concat_rows(&parts)?;
        let seq0 = nv + nt;
        let type_ids: Vec<usize> = (0..bsz).flat_map(|_| (0..seq0).map(|j| usize::from(j >= nv))).collect();
        let types = tape.embedding(b.backbone("embed.type"), &type_ids)?;
        x = tape.add(x, types)?;
        if cfg.use_positions {
            let pos_ids: Vec<usize> = (0..bsz).flat_map(|_| 0..seq0).collect();
            let pos = tape.embedding(b.backbone("embed.position"), &pos_ids)?;
            x = tape.add(x, pos)?;
        }
        x = tape.layer_norm(x, b.backbone("embed.norm.gain"), b.backbone("embed.norm.bias"))?;

        let mut seq = seq0;
        if let Some(prompt) = b.param("prompt.tokens") {
            let np = tape.value(prompt).rows();
            if np > 0 {
                let mut rows = Vec::with_capacity(2 * bsz);
                for i in 0..bsz {
                    rows.push(prompt);
                    rows.push(tape.slice_rows(x, i * seq0, seq0)?);
                }
                x = tape.concat_rows(&rows)?;
                seq += np;
            }
        }

        for l in 0..cfg.n_layers {
            x = self.block(tape, b, l, x, bsz, seq)?;
        }

        let mut pool = vec![0.0; bsz * bsz * seq];
        for i in 0..bsz {
            for j in 0..seq {
                pool[i * bsz * seq + i * seq + j] = 1.0 / seq as f64;
            }
        }
        let pool = tape.constant(Tensor::matrix(bsz, bsz * seq, pool));
        let pooled = tape.matmul(pool, x)?;
        let head_w = b.param("head.weight").ok_or_else(|| Error::Model("head not bound".into()))?;
        let head_b = b.param("head.bias").ok_or_else(|| Error::Model("head not bound".into()))?;
        let logits = tape.matmul(pooled, head_w)?;
        let logits = tape.add_row(logits, head_b)?;
        debug_assert_eq!(tape.value(logits).shape(), &[bsz, self.n_classes]);
        Ok(logits)
    }

    fn projection(&self, tape: &mut Tape, b: &Binding, l: usize, proj: &str, x: Var) -> Result<Var> {
        let w = b.backbone(&format!("layer{l}.attn.{proj}.weight"));
        let bias = b.backbone(&format!("layer{l}.attn.{proj}.bias"));
        let y = match (
            b.param(&format!("lora.layer{l}.{proj}.b")),
            b.param(&format!("lora.layer{l}.{proj}.a")),
        ) {
            (Some(lb), Some(la)) => super::peft::lora_forward(tape, x, w, lb, la)?,
            _ => tape.matmul(x, w)?,
        };
        Ok(tape.add_row(y, bias)?)
    }

    fn block(&self, tape: &mut Tape, b: &Binding, l: usize, x: Var, bsz: usize, seq: usize) -> Result<Var> {
        let cfg = &self.backbone.config;
        let heads = cfg.n_heads;
        let dh = cfg.head_dim();
        let q = self.projection(tape, b, l, "query", x)?;
        let k = self.projection(tape, b, l, "key", x)?;
        let v = self.projection(tape, b, l, "value", x)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut per_sample = Vec::with_capacity(bsz);
        for i in 0..bsz {
            let qi = tape.slice_rows(q, i * seq, seq)?;
            let ki = tape.slice_rows(k, i * seq, seq)?;
            let vi = tape.slice_rows(v, i * seq, seq)?;
            let kt = tape.transpose(ki)?;
            let mut outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let (qh, kth, vh) = if heads == 1 {
                    (qi, kt, vi)
                } else {
                    (
                        tape.slice_cols(qi, h * dh, dh)?,
                        tape.slice_rows(kt, h * dh, dh)?,
                        tape.slice_cols(vi, h * dh, dh)?,
                    )
                };
                let scores = tape.matmul(qh, kth)?;
                let scores = tape.scale(scores, scale)?;
                let attn = tape.softmax(scores)?;
                outs.push(tape.matmul(attn, vh)?);
            }
            per_sample.push(if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? });
        }
        let ctx = if bsz == 1 { per_sample[0] } else { tape.concat_rows(&per_sample)? };
        let attn_out = self.projection(tape, b, l, "output", ctx)?;
        let res = tape.add(x, attn_out)?;
        let x1 = tape.layer_norm(
            res,
            b.backbone(&format!("layer{l}.norm1.gain")),
            b.backbone(&format!("layer{l}.norm1.bias")),
        )?;
        let f = tape.matmul(x1, b.backbone(&format!("layer{l}.ffn.in.weight")))?;
        let f = tape.add_row(f, b.backbone(&format!("layer{l}.ffn.in.bias")))?;
        let f = tape.relu(f)?;
        let f = tape.matmul(f, b.backbone(&format!("layer{l}.ffn.out.weight")))?;
        let f = tape.add_row(f, b.backbone(&format!("layer{l}.ffn.out.bias")))?;
        let res = tape.add(x1, f)?;
        let h = tape.layer_norm(
            res,
            b.backbone(&format!("layer{l}.norm2.gain")),
            b.backbone(&format!("layer{l}.norm2.bias")),
        )?;
        self.inject(tape, b, l, h)
    }

    fn inject(&self, tape: &mut Tape, b: &Binding, l: usize, h: Var) -> Result<Var> {
        let act: Activation = self.peft.adapter_activation;
        let site = |prefix: &str| -> Result<(Var, Var)> {
            let down = b
                .param(&format!("{prefix}.layer{l}.down"))
                .ok_or_else(|| Error::Model(format!("{prefix} adapter not bound")))?;
            let up = b
                .param(&format!("{prefix}.layer{l}.up"))
                .ok_or_else(|| Error::Model(format!("{prefix} adapter not bound")))?;
            Ok((down, up))
        };
        Ok(match b.branch {
            Branch::Plain => h,
            Branch::Shared => {
                let (d, u) = site("shared")?;
                adapter_forward(tape, h, d, u, act)?
            }
            Branch::Local => {
                let (d, u) = site("local")?;
                adapter_forward(tape, h, d, u, act)?
            }
            Branch::Frozen => {
                let (d, u) = site("frozen")?;
                adapter_forward(tape, h, d, u, act)?
            }
            Branch::Dat => dat_forward(tape, h, site("frozen")?, site("local")?, act)?,
        })
    }

    /// Gradient-free logits for any number of samples, evaluated in chunks.
    pub fn logits(&self, branch: Branch, samples: &[&VqaTriple]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(samples.len() * self.n_classes);
        for chunk in samples.chunks(EVAL_CHUNK) {
            let mut tape = Tape::new();
            let binding = self.bind(&mut tape, branch, &[])?;
            let out = self.forward(&mut tape, &binding, chunk)?;
            data.extend_from_slice(tape.value(out).data());
        }
        Ok(Tensor::matrix(samples.len(), self.n_classes, data))
    }

    /// The branch used when this client's model is deployed.
    pub fn default_branch(&self) -> Branch {
        match self.peft.mode {
            PeftMode::Adapter | PeftMode::Feddat => Branch::Shared,
            _ => Branch::Plain,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BackboneConfig;
    use crate::rng::substream;

    fn sample(id: u64, seed: u64, cfg: &BackboneConfig) -> VqaTriple {
        let mut rng = substream(seed, "sample", &[id]);
        VqaTriple {
            id,
            vision: (0..cfg.vision_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            tokens: (0..cfg.n_text_tokens).map(|_| rng.gen_range(0..cfg.vocab_size)).collect(),
            answer: 0,
        }
    }

    fn model(mode: PeftMode, cfg: BackboneConfig) -> ClientModel {
        let bb = Arc::new(Backbone::new(cfg).unwrap());
        ClientModel::new(bb, PeftConfig::with_mode(mode), 4, &mut substream(3, "client", &[0])).unwrap()
    }

    #[test]
    fn adapter_at_init_matches_plain_head() {
        let cfg = BackboneConfig::default();
        let a = model(PeftMode::Adapter, cfg.clone());
        let mut h = model(PeftMode::HeadOnly, cfg.clone());
        // same head in both
        h.params_mut().extend_from(&a.params().group(ParamGroup::Head));
        let xs: Vec<VqaTriple> = (0..3).map(|i| sample(i, 1, &cfg)).collect();
        let refs: Vec<&VqaTriple> = xs.iter().collect();
        let la = a.logits(Branch::Shared, &refs).unwrap();
        let lh = h.logits(Branch::Plain, &refs).unwrap();
        assert!(la.max_abs_diff(&lh) <= 1e-12);
        assert_eq!(la.shape(), &[3, 4]);
    }

    #[test]
    fn feddat_all_branches_coincide_at_init() {
        let cfg = BackboneConfig::default();
        let m = model(PeftMode::Feddat, cfg.clone());
        let xs: Vec<VqaTriple> = (0..2).map(|i| sample(i, 2, &cfg)).collect();
        let refs: Vec<&VqaTriple> = xs.iter().collect();
        let s = m.logits(Branch::Shared, &refs).unwrap();
        for br in [Branch::Dat, Branch::Local, Branch::Frozen, Branch::Plain] {
            assert!(s.max_abs_diff(&m.logits(br, &refs).unwrap()) <= 1e-12, "{br:?}");
        }
    }

    #[test]
    fn vision_token_permutation_without_positions() {
        let cfg = BackboneConfig {
            use_positions: false,
            n_vision_tokens: 4,
            ..BackboneConfig::default()
        };
        let m = model(PeftMode::HeadOnly, cfg.clone());
        let x = sample(0, 5, &cfg);
        let mut y = x.clone();
        let din = cfg.vision_token_dim();
        // swap vision tokens 0 and 2
        for j in 0..din {
            y.vision.swap(j, 2 * din + j);
        }
        let lx = m.logits(Branch::Plain, &[&x]).unwrap();
        let ly = m.logits(Branch::Plain, &[&y]).unwrap();
        assert!(lx.max_abs_diff(&ly) <= 1e-10);

        let with_pos = model(
            PeftMode::HeadOnly,
            BackboneConfig {
                use_positions: true,
                ..cfg
            },
        );
        let lx = with_pos.logits(Branch::Plain, &[&x]).unwrap();
        let ly = with_pos.logits(Branch::Plain, &[&y]).unwrap();
        assert!(lx.max_abs_diff(&ly) > 1e-6);
    }

    #[test]
    fn vocab_overflow_and_pool_mismatch() {
        let cfg = BackboneConfig::default();
        let m = model(PeftMode::HeadOnly, cfg.clone());
        let mut x = sample(0, 6, &cfg);
        x.tokens[0] = cfg.vocab_size;
        assert!(m.logits(Branch::Plain, &[&x]).is_err());
        let mut y = sample(1, 6, &cfg);
        y.answer = 4;
        assert!(m.logits(Branch::Plain, &[&y]).is_err());
    }

    #[test]
    fn communicated_counts() {
        let cfg = BackboneConfig::default();
        let adapter = model(PeftMode::Adapter, cfg.clone()).trainable_params();
        assert_eq!(adapter.count, 2 * (32 * 4 + 4 * 32));
        let feddat = model(PeftMode::Feddat, cfg.clone()).trainable_params();
        assert_eq!(feddat, adapter);
        assert_eq!(model(PeftMode::HeadOnly, cfg.clone()).trainable_params().count, 0);
        let lora = model(PeftMode::Lora, cfg.clone()).trainable_params();
        assert_eq!(lora.count, 2 * 2 * (32 * 4 + 4 * 32));
        let prompt = model(PeftMode::Prompt, cfg.clone()).trainable_params();
        assert_eq!(prompt.count, 4 * 32);
        let bb = Backbone::new(cfg.clone()).unwrap();
        assert_eq!(
            model(PeftMode::Bias, cfg.clone()).trainable_params().count,
            bb.bias_params().scalar_count()
        );
        assert_eq!(
            model(PeftMode::Full, cfg).trainable_params().count,
            bb.params().scalar_count()
        );
        for (n, _) in feddat.names {
            assert!(n.starts_with("shared."));
        }
    }

    #[test]
    fn frozen_group_is_never_trainable() {
        let cfg = BackboneConfig::default();
        let m = model(PeftMode::Feddat, cfg);
        let mut t = Tape::new();
        assert!(m.bind(&mut t, Branch::Dat, &[ParamGroup::Frozen]).is_err());
        let mut t = Tape::new();
        assert!(model(PeftMode::Adapter, BackboneConfig::default())
            .bind(&mut t, Branch::Dat, &[])
            .is_err());
    }
}
