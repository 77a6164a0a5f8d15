use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{BenchmarkSpec, ClientData, Regime, TaskKind, VqaTriple, QUESTION_TOKENS, TASK_TOKENS};
use crate::rng::substream;
use crate::{Error, Result};

/// Per-source affine map `v ↦ Q·v + b` with `Q` orthogonal.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTransform {
    pub dim: usize,
    /// Row-major `dim×dim` orthogonal matrix.
    pub matrix: Vec<f64>,
    pub bias: Vec<f64>,
}

impl FeatureTransform {
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let d = self.dim;
        (0..d)
            .map(|i| {
                let row = &self.matrix[i * d..(i + 1) * d];
                row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() + self.bias[i]
            })
            .collect()
    }

    /// Product of Givens rotations over every coordinate pair, each by an
    /// angle drawn from N(0, (0.25·magnitude)²).
    fn random(dim: usize, magnitude: f64, shift_bias: f64, rng: &mut impl Rng) -> Self {
        let mut m = vec![0.0; dim * dim];
        for i in 0..dim {
            m[i * dim + i] = 1.0;
        }
        let angle = Normal::new(0.0, 0.25).expect("std");
        for i in 0..dim {
            for j in i + 1..dim {
                let theta = magnitude * angle.sample(rng);
                let (s, c) = theta.sin_cos();
                // rows i and j of the accumulated matrix rotate together
                for col in 0..dim {
                    let a = m[i * dim + col];
                    let b = m[j * dim + col];
                    m[i * dim + col] = c * a - s * b;
                    m[j * dim + col] = s * a + c * b;
                }
            }
        }
        let unit = Normal::new(0.0, 1.0).expect("std");
        let bias = (0..dim).map(|_| magnitude * shift_bias * unit.sample(rng)).collect();
        Self { dim, matrix: m, bias }
    }
}

/// Orthogonal attribute-class prototypes, `prototypes[attr][class]`.
fn prototypes(spec: &BenchmarkSpec) -> Vec<Vec<Vec<f64>>> {
    let mut rng = substream(spec.seed, "prototypes", &[]);
    let unit = Normal::new(0.0, 1.0).expect("std");
    let d = spec.vision_dim;
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < spec.attributes * spec.classes_per_attribute {
        let mut v: Vec<f64> = (0..d).map(|_| unit.sample(&mut rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        basis.push(v.into_iter().map(|x| x / norm).collect());
    }
    basis
        .chunks(spec.classes_per_attribute)
        .map(|chunk| {
            chunk
                .iter()
                .map(|v| v.iter().map(|x| x * spec.prototype_scale).collect())
                .collect()
        })
        .collect()
}

struct Source {
    task: TaskKind,
    pool: Vec<usize>,
    transform: Option<FeatureTransform>,
}

fn make_source(spec: &BenchmarkSpec, s: usize) -> Source {
    let mut rng = substream(spec.seed, "source", &[s as u64]);
    let classes = spec.classes_per_attribute;
    let transform = (spec.regime.shifts_features() && spec.transform_magnitude > 0.0)
        .then(|| FeatureTransform::random(spec.vision_dim, spec.transform_magnitude, spec.shift_bias, &mut rng));
    let (task, pool) = match spec.regime {
        Regime::FeatureShift => (TaskKind::Identity, (0..classes).collect()),
        Regime::AnswerShift | Regime::Mixed => {
            let size = 2 + s % (classes - 1);
            let mut all: Vec<usize> = (0..classes).collect();
            all.shuffle(&mut rng);
            all.truncate(size);
            (TaskKind::Identity, all)
        }
        Regime::TaskShift => match s % 3 {
            0 => (TaskKind::Identity, (0..classes).collect()),
            1 => (TaskKind::Compare, (classes..classes + 3).collect()),
            _ => (TaskKind::Parity, (classes + 3..classes + 5).collect()),
        },
    };
    Source { task, pool, transform }
}

fn answer(task: TaskKind, latent: &[usize], attr: usize, pool: &[usize], classes: usize) -> usize {
    let other = latent[(attr + 1) % latent.len()];
    let global = match task {
        TaskKind::Identity => latent[attr],
        TaskKind::Compare => classes + (latent[attr].cmp(&other) as i8 + 1) as usize,
        TaskKind::Parity => classes + 3 + (latent[attr] + other) % 2,
    };
    pool.iter().position(|&g| g == global).expect("answer in pool")
}

fn sample_one(
    spec: &BenchmarkSpec,
    protos: &[Vec<Vec<f64>>],
    src: &Source,
    id: u64,
    rng: &mut impl Rng,
) -> VqaTriple {
    let classes = spec.classes_per_attribute;
    let attr = rng.gen_range(0..spec.attributes);
    let mut latent: Vec<usize> = (0..spec.attributes).map(|_| rng.gen_range(0..classes)).collect();
    if src.task == TaskKind::Identity {
        latent[attr] = src.pool[rng.gen_range(0..src.pool.len())];
    }
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("std");
    let mut v: Vec<f64> = (0..spec.vision_dim)
        .map(|_| if spec.noise_std > 0.0 { noise.sample(rng) } else { 0.0 })
        .collect();
    for (j, &c) in latent.iter().enumerate() {
        for (x, p) in v.iter_mut().zip(&protos[j][c]) {
            *x += p;
        }
    }
    if let Some(t) = &src.transform {
        v = t.apply(&v);
    }
    VqaTriple {
        id,
        vision: v,
        tokens: vec![src.task.token(), TASK_TOKENS + attr],
        answer: answer(src.task, &latent, attr, &src.pool, classes),
    }
}

/// Generates every client's train/test split. Pure function of `spec`.
pub fn generate(spec: &BenchmarkSpec) -> Result<Vec<ClientData>> {
    spec.validate(1)?;
    let protos = prototypes(spec);
    let sources: Vec<Source> = (0..spec.n_sources()).map(|s| make_source(spec, s)).collect();
    debug_assert_eq!(QUESTION_TOKENS, 2);
    let clients = (0..spec.clients)
        .map(|k| {
            let s = k % sources.len();
            let src = &sources[s];
            let mut rng = substream(spec.seed, "client", &[k as u64]);
            let base = (k as u64) << 32;
            let train = (0..spec.train_per_client)
                .map(|i| sample_one(spec, &protos, src, base | i as u64, &mut rng))
                .collect();
            let test = (0..spec.test_per_client)
                .map(|i| sample_one(spec, &protos, src, base | (spec.train_per_client + i) as u64, &mut rng))
                .collect();
            ClientData {
                client: k,
                source: s,
                task: src.task,
                train,
                test,
                answer_pool: src.pool.clone(),
                transform: src.transform.clone(),
            }
        })
        .collect();
    Ok(clients)
}

/// Merges clients that share one answer pool into a single centralized dataset.
pub fn pool_clients(clients: &[ClientData]) -> Result<ClientData> {
    let first = clients.first().ok_or_else(|| Error::Data("nothing to pool".into()))?;
    if clients.iter().any(|c| c.answer_pool != first.answer_pool) {
        return Err(Error::Data("pooling needs identical answer pools".into()));
    }
    Ok(ClientData {
        client: 0,
        source: 0,
        task: first.task,
        train: clients.iter().flat_map(|c| c.train.iter().cloned()).collect(),
        test: clients.iter().flat_map(|c| c.test.iter().cloned()).collect(),
        answer_pool: first.answer_pool.clone(),
        transform: None,
    })
}
