//! Straight-line reimplementation of one local step: a hand-written forward
//! pass whose derivatives come from forward-mode dual numbers (one pass per
//! trainable scalar), with the SGD update applied by hand.

use std::collections::BTreeMap;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::sync::Arc;

use rand::Rng;

use feddat::benchgen::{ClientData, TaskKind, VqaTriple};
use feddat::federation::{client_update, sample_batch, ClientState, OptimizerKind, Sgd, TrainConfig, Variant};
use feddat::model::{Backbone, BackboneConfig, ClientModel, PeftConfig, PeftMode};
use feddat::rng::substream;

#[derive(Clone, Copy, Debug)]
struct Dual {
    v: f64,
    d: f64,
}

impl Dual {
    fn c(v: f64) -> Self {
        Dual { v, d: 0.0 }
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        Dual { v: e, d: self.d * e }
    }
    fn ln(self) -> Self {
        Dual {
            v: self.v.ln(),
            d: self.d / self.v,
        }
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        Dual { v: s, d: self.d / (2.0 * s) }
    }
    fn relu(self) -> Self {
        if self.v > 0.0 {
            self
        } else {
            Dual::c(0.0)
        }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual {
            v: self.v + o.v,
            d: self.d + o.d,
        }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual {
            v: self.v - o.v,
            d: self.d - o.d,
        }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual {
            v: self.v * o.v,
            d: self.d * o.v + self.v * o.d,
        }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        Dual {
            v: self.v / o.v,
            d: (self.d * o.v - self.v * o.d) / (o.v * o.v),
        }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual { v: -self.v, d: -self.d }
    }
}

type Mat = Vec<Vec<Dual>>;

/// Flat tensors by name with their column count.
#[derive(Clone)]
struct Store {
    t: BTreeMap<String, (Vec<f64>, usize)>,
}

impl Store {
    fn from_model(model: &ClientModel) -> Self {
        let mut t = BTreeMap::new();
        for (name, v) in model.backbone().params().iter() {
            t.insert(format!("bb.{name}"), (v.data().to_vec(), *v.shape().last().unwrap()));
        }
        for (name, v) in model.params().iter() {
            t.insert(name.clone(), (v.data().to_vec(), *v.shape().last().unwrap()));
        }
        Store { t }
    }

    /// Matrix view with a unit tangent on `(seed_name, seed_idx)`.
    fn mat(&self, name: &str, seed: Option<(&str, usize)>) -> Mat {
        let (data, cols) = &self.t[name];
        data.chunks(*cols)
            .enumerate()
            .map(|(r, row)| {
                row.iter()
                    .enumerate()
                    .map(|(c, &v)| {
                        let hit = seed.is_some_and(|(n, i)| n == name && i == r * cols + c);
                        Dual {
                            v,
                            d: if hit { 1.0 } else { 0.0 },
                        }
                    })
                    .collect()
            })
            .collect()
    }

    fn vec(&self, name: &str, seed: Option<(&str, usize)>) -> Vec<Dual> {
        self.mat(name, seed).concat()
    }
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| {
                    let mut s = Dual::c(0.0);
                    for (k, x) in row.iter().enumerate() {
                        s = s + *x * b[k][j];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn add_bias(a: &Mat, b: &[Dual]) -> Mat {
    a.iter().map(|r| r.iter().zip(b).map(|(x, y)| *x + *y).collect()).collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| *x + *y).collect())
        .collect()
}

fn layer_norm(a: &Mat, g: &[Dual], b: &[Dual]) -> Mat {
    a.iter()
        .map(|row| {
            let n = Dual::c(row.len() as f64);
            let mut mean = Dual::c(0.0);
            for x in row {
                mean = mean + *x;
            }
            let mean = mean / n;
            let mut var = Dual::c(0.0);
            for x in row {
                var = var + (*x - mean) * (*x - mean);
            }
            let inv = Dual::c(1.0) / (var / n + Dual::c(1e-5)).sqrt();
            row.iter()
                .zip(g.iter().zip(b))
                .map(|(x, (g, b))| (*x - mean) * inv * *g + *b)
                .collect()
        })
        .collect()
}

fn log_softmax(row: &[Dual]) -> Vec<Dual> {
    let max = row.iter().map(|x| x.v).fold(f64::NEG_INFINITY, f64::max);
    let mut s = Dual::c(0.0);
    for x in row {
        s = s + (*x - Dual::c(max)).exp();
    }
    let lse = Dual::c(max) + s.ln();
    row.iter().map(|x| *x - lse).collect()
}

fn softmax(row: &[Dual]) -> Vec<Dual> {
    log_softmax(row).into_iter().map(Dual::exp).collect()
}

#[derive(Clone, Copy, PartialEq)]
enum Inject {
    Shared,
    Dat,
}

struct Oracle<'a> {
    cfg: &'a BackboneConfig,
}

impl Oracle<'_> {
    fn adapter(&self, s: &Store, h: &Mat, prefix: &str, l: usize, seed: Option<(&str, usize)>) -> Mat {
        let down = s.mat(&format!("{prefix}.layer{l}.down"), seed);
        let up = s.mat(&format!("{prefix}.layer{l}.up"), seed);
        let z: Mat = matmul(h, &down).into_iter().map(|r| r.into_iter().map(Dual::relu).collect()).collect();
        matmul(&z, &up)
    }

    fn logits(&self, s: &Store, sample: &VqaTriple, inject: Inject, seed: Option<(&str, usize)>) -> Vec<Dual> {
        let c = self.cfg;
        let (nv, nt, d) = (c.n_vision_tokens, c.n_text_tokens, c.d_model);
        let din = c.vision_dim / nv;
        let xv: Mat = sample.vision.chunks(din).map(|r| r.iter().map(|&v| Dual::c(v)).collect()).collect();
        let ev = add_bias(&matmul(&xv, &s.mat("bb.embed.vision.weight", seed)), &s.vec("bb.embed.vision.bias", seed));
        let text = s.mat("bb.embed.text", seed);
        let types = s.mat("bb.embed.type", seed);
        let pos = s.mat("bb.embed.position", seed);
        let mut x: Mat = ev;
        x.extend(sample.tokens.iter().map(|&t| text[t].clone()));
        for (j, row) in x.iter_mut().enumerate() {
            let ty = &types[usize::from(j >= nv)];
            for k in 0..d {
                row[k] = row[k] + ty[k] + pos[j][k];
            }
        }
        let mut x = layer_norm(&x, &s.vec("bb.embed.norm.gain", seed), &s.vec("bb.embed.norm.bias", seed));
        let seq = nv + nt;
        let dh = d / c.n_heads;
        let scale = Dual::c(1.0 / (dh as f64).sqrt());
        for l in 0..c.n_layers {
            let proj = |x: &Mat, p: &str| {
                add_bias(
                    &matmul(x, &s.mat(&format!("bb.layer{l}.attn.{p}.weight"), seed)),
                    &s.vec(&format!("bb.layer{l}.attn.{p}.bias"), seed),
                )
            };
            let (q, k, v) = (proj(&x, "query"), proj(&x, "key"), proj(&x, "value"));
            let mut ctx = vec![vec![Dual::c(0.0); d]; seq];
            for h in 0..c.n_heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..seq {
                    let scores: Vec<Dual> = (0..seq)
                        .map(|j| {
                            let mut dot = Dual::c(0.0);
                            for m in cols.clone() {
                                dot = dot + q[i][m] * k[j][m];
                            }
                            dot * scale
                        })
                        .collect();
                    let a = softmax(&scores);
                    for m in cols.clone() {
                        let mut acc = Dual::c(0.0);
                        for j in 0..seq {
                            acc = acc + a[j] * v[j][m];
                        }
                        ctx[i][m] = acc;
                    }
                }
            }
            let x1 = layer_norm(
                &add(&x, &proj(&ctx, "output")),
                &s.vec(&format!("bb.layer{l}.norm1.gain"), seed),
                &s.vec(&format!("bb.layer{l}.norm1.bias"), seed),
            );
            let f = add_bias(
                &matmul(&x1, &s.mat(&format!("bb.layer{l}.ffn.in.weight"), seed)),
                &s.vec(&format!("bb.layer{l}.ffn.in.bias"), seed),
            );
            let f: Mat = f.into_iter().map(|r| r.into_iter().map(Dual::relu).collect()).collect();
            let f = add_bias(
                &matmul(&f, &s.mat(&format!("bb.layer{l}.ffn.out.weight"), seed)),
                &s.vec(&format!("bb.layer{l}.ffn.out.bias"), seed),
            );
            let hdn = layer_norm(
                &add(&x1, &f),
                &s.vec(&format!("bb.layer{l}.norm2.gain"), seed),
                &s.vec(&format!("bb.layer{l}.norm2.bias"), seed),
            );
            let delta = match inject {
                Inject::Shared => self.adapter(s, &hdn, "shared", l, seed),
                Inject::Dat => {
                    let a = self.adapter(s, &hdn, "frozen", l, seed);
                    let b = self.adapter(s, &hdn, "local", l, seed);
                    a.iter()
                        .zip(&b)
                        .map(|(r, t)| r.iter().zip(t).map(|(x, y)| Dual::c(0.5) * *x + Dual::c(0.5) * *y).collect())
                        .collect()
                }
            };
            x = add(&hdn, &delta);
        }
        let mut pooled = vec![Dual::c(0.0); d];
        for row in &x {
            for k in 0..d {
                pooled[k] = pooled[k] + row[k] * Dual::c(1.0 / seq as f64);
            }
        }
        let logits = matmul(&vec![pooled], &s.mat("head.weight", seed));
        add_bias(&logits, &s.vec("head.bias", seed)).remove(0)
    }

    /// Mean CE plus `weight`·mean KL(σ(student) ‖ σ(teacher)).
    fn loss(
        &self,
        s: &Store,
        batch: &[&VqaTriple],
        student: Inject,
        teacher: Option<(&[Vec<f64>], f64)>,
        seed: Option<(&str, usize)>,
    ) -> Dual {
        let n = Dual::c(batch.len() as f64);
        let mut ce = Dual::c(0.0);
        let mut kl = Dual::c(0.0);
        for (i, sample) in batch.iter().enumerate() {
            let z = self.logits(s, sample, student, seed);
            let lp = log_softmax(&z);
            ce = ce - lp[sample.answer];
            if let Some((t, _)) = teacher {
                let tz: Vec<Dual> = t[i].iter().map(|&v| Dual::c(v)).collect();
                let lq = log_softmax(&tz);
                for j in 0..z.len() {
                    kl = kl + lp[j].exp() * (lp[j] - lq[j]);
                }
            }
        }
        match teacher {
            Some((_, w)) => ce / n + Dual::c(w) * (kl / n),
            None => ce / n,
        }
    }

    fn values(&self, s: &Store, batch: &[&VqaTriple], inject: Inject) -> Vec<Vec<f64>> {
        batch
            .iter()
            .map(|x| self.logits(s, x, inject, None).iter().map(|v| v.v).collect())
            .collect()
    }

    /// Gradient over every scalar of the `groups` tensors, then `w -= lr·g`.
    fn sgd(&self, s: &mut Store, groups: &[&str], lr: f64, loss: impl Fn(&Store, Option<(&str, usize)>) -> Dual) {
        let names: Vec<String> = s
            .t
            .keys()
            .filter(|n| groups.iter().any(|g| n.starts_with(&format!("{g}."))))
            .cloned()
            .collect();
        let mut grads = Vec::new();
        for name in &names {
            let len = s.t[name].0.len();
            let g: Vec<f64> = (0..len).map(|i| loss(s, Some((name, i))).d).collect();
            grads.push(g);
        }
        for (name, g) in names.iter().zip(grads) {
            for (w, g) in s.t.get_mut(name).unwrap().0.iter_mut().zip(g) {
                *w -= lr * g;
            }
        }
    }
}

fn tiny() -> (Arc<Backbone>, BackboneConfig) {
    let cfg = BackboneConfig {
        d_model: 4,
        n_layers: 1,
        n_heads: 2,
        d_ffn: 6,
        n_vision_tokens: 2,
        vision_dim: 4,
        n_text_tokens: 2,
        vocab_size: 6,
        use_positions: true,
        seed: 11,
    };
    (Arc::new(Backbone::new(cfg.clone()).unwrap()), cfg)
}

fn sample(rng: &mut impl Rng, id: u64, answer: usize) -> VqaTriple {
    VqaTriple {
        id,
        vision: (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        tokens: vec![0, 3 + rng.gen_range(0..3)],
        answer,
    }
}

fn state(mode: PeftMode) -> ClientState {
    let (backbone, _) = tiny();
    let peft = PeftConfig {
        adapter_r: 2,
        ..PeftConfig::with_mode(mode)
    };
    let mut rng = substream(5, "oracle", &[]);
    let mut model = ClientModel::new(backbone, peft, 3, &mut rng).unwrap();
    // non-zero up projections so every adapter parameter gets a gradient
    for (name, t) in model.params_mut().iter_mut() {
        if name.starts_with("shared.") || name.starts_with("local.") || name == "head.bias" {
            for v in t.data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
    }
    let data = ClientData {
        client: 0,
        source: 0,
        task: TaskKind::Identity,
        train: vec![sample(&mut rng, 0, 2), sample(&mut rng, 1, 0)],
        test: vec![sample(&mut rng, 2, 1)],
        answer_pool: vec![0, 1, 2],
        transform: None,
    };
    ClientState {
        id: 0,
        data: Arc::new(data),
        model,
        optimizer: Sgd::new(OptimizerKind::Sgd, 0.3, 0.0),
    }
}

fn train_cfg(variant: Variant) -> TrainConfig {
    TrainConfig {
        rounds: 4,
        local_steps: 1,
        batch_size: 2,
        lr: 0.3,
        optimizer: OptimizerKind::Sgd,
        variant,
        ..TrainConfig::default()
    }
}

/// Largest deviation between library and oracle over the `groups` tensors.
fn max_diff(library: &ClientModel, oracle: &Store, groups: &[&str]) -> f64 {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (name, t) in library.params().iter() {
        if !groups.iter().any(|g| name.starts_with(&format!("{g}."))) {
            continue;
        }
        for (a, b) in t.data().iter().zip(&oracle.t[name].0) {
            worst = worst.max((a - b).abs());
            checked += 1;
        }
    }
    assert!(checked > 0, "no parameters compared");
    worst
}

fn moved(before: &Store, after: &Store, names: &[&str]) -> bool {
    names
        .iter()
        .all(|g| before.t[*g].0.iter().zip(&after.t[*g].0).any(|(a, b)| (a - b).abs() > 1e-6))
}

/// Feddat step (T=1, batch=2): max |library − oracle| over every client
/// tensor, and whether the shared adapter, local adapter and head all moved.
pub fn feddat_step() -> (f64, bool) {
    let mut st = state(PeftMode::Feddat);
    let cfg = train_cfg(Variant::Full);
    let round = 2;
    let (alpha, beta) = cfg.weights(round);
    assert!(alpha > 0.0 && beta > 0.0);

    let mut s = Store::from_model(&st.model);
    let copies: Vec<(String, (Vec<f64>, usize))> = s
        .t
        .iter()
        .filter(|(n, _)| n.starts_with("shared."))
        .map(|(n, v)| (n.replacen("shared.", "frozen.", 1), v.clone()))
        .collect();
    s.t.extend(copies);
    let start = s.clone();
    let bcfg = st.model.backbone().config.clone();
    let oracle = Oracle { cfg: &bcfg };
    let data = st.data.clone();
    let idx = sample_batch(&mut substream(9, "batch", &[0, round as u64]), 2, 2);
    let batch: Vec<&VqaTriple> = idx.iter().map(|&i| &data.train[i]).collect();

    let teacher = oracle.values(&s, &batch, Inject::Dat);
    oracle.sgd(&mut s, &["shared", "head"], cfg.lr, |s, seed| {
        oracle.loss(s, &batch, Inject::Shared, Some((&teacher, alpha)), seed)
    });
    let teacher = oracle.values(&s, &batch, Inject::Shared);
    oracle.sgd(&mut s, &["local", "head"], cfg.lr, |s, seed| {
        oracle.loss(s, &batch, Inject::Dat, Some((&teacher, beta)), seed)
    });

    let fingerprint = st.model.backbone().fingerprint();
    client_update(&mut st, round, &cfg, 9).unwrap();
    assert_eq!(st.model.backbone().fingerprint(), fingerprint);
    let err = max_diff(&st.model, &s, &["shared", "frozen", "local", "head"]);
    (err, moved(&start, &s, &["shared.layer0.down", "local.layer0.down", "head.weight"]))
}

/// Plain adapter step: max |library − oracle| over the shared adapter and head.
pub fn adapter_step() -> f64 {
    let mut st = state(PeftMode::Adapter);
    let cfg = train_cfg(Variant::Full);
    let mut s = Store::from_model(&st.model);
    let bcfg = st.model.backbone().config.clone();
    let oracle = Oracle { cfg: &bcfg };
    let data = st.data.clone();
    let idx = sample_batch(&mut substream(3, "batch", &[0, 1]), 2, 2);
    let batch: Vec<&VqaTriple> = idx.iter().map(|&i| &data.train[i]).collect();
    oracle.sgd(&mut s, &["shared", "head"], cfg.lr, |s, seed| {
        oracle.loss(s, &batch, Inject::Shared, None, seed)
    });
    client_update(&mut st, 1, &cfg, 3).unwrap();
    max_diff(&st.model, &s, &["shared", "head"])
}
