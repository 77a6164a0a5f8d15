use std::collections::BTreeMap;

use super::ClientData;
use crate::{Error, Result};

fn label_marginal(c: &ClientData) -> BTreeMap<usize, f64> {
    let mut m = BTreeMap::new();
    for s in &c.train {
        *m.entry(c.answer_pool[s.answer]).or_insert(0.0) += 1.0;
    }
    let n = c.train.len().max(1) as f64;
    m.values_mut().for_each(|v| *v /= n);
    m
}

/// Jensen-Shannon divergence in nats; bounded by ln 2, reached for disjoint supports.
fn jensen_shannon(p: &BTreeMap<usize, f64>, q: &BTreeMap<usize, f64>) -> f64 {
    let mut keys: Vec<usize> = p.keys().chain(q.keys()).copied().collect();
    keys.sort_unstable();
    keys.dedup();
    let mut js = 0.0;
    for k in keys {
        let a = p.get(&k).copied().unwrap_or(0.0);
        let b = q.get(&k).copied().unwrap_or(0.0);
        let m = 0.5 * (a + b);
        if a > 0.0 {
            js += 0.5 * a * (a / m).ln();
        }
        if b > 0.0 {
            js += 0.5 * b * (b / m).ln();
        }
    }
    js.max(0.0)
}

fn mean_vision(c: &ClientData) -> Vec<f64> {
    let d = c.train.first().map_or(0, |s| s.vision.len());
    let mut m = vec![0.0; d];
    for s in &c.train {
        for (a, b) in m.iter_mut().zip(&s.vision) {
            *a += b;
        }
    }
    let n = c.train.len().max(1) as f64;
    m.iter_mut().for_each(|v| *v /= n);
    m
}

fn pairwise_mean(n: usize, f: impl Fn(usize, usize) -> f64) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            total += f(i, j);
            pairs += 1;
        }
    }
    total / pairs as f64
}

fn need_two(clients: &[ClientData]) -> Result<()> {
    if clients.len() < 2 {
        return Err(Error::Data("heterogeneity needs at least two clients".into()));
    }
    Ok(())
}

/// Mean pairwise Jensen-Shannon divergence of the clients' answer marginals
/// (over global answer ids).
pub fn label_divergence(clients: &[ClientData]) -> Result<f64> {
    need_two(clients)?;
    let marginals: Vec<_> = clients.iter().map(label_marginal).collect();
    Ok(pairwise_mean(clients.len(), |i, j| jensen_shannon(&marginals[i], &marginals[j])))
}

/// Mean pairwise Euclidean distance between client mean vision vectors.
pub fn feature_divergence(clients: &[ClientData]) -> Result<f64> {
    need_two(clients)?;
    let means: Vec<_> = clients.iter().map(mean_vision).collect();
    Ok(pairwise_mean(clients.len(), |i, j| {
        means[i]
            .iter()
            .zip(&means[j])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }))
}

/// Label-marginal divergence plus feature-mean distance; 0 for identical clients.
pub fn heterogeneity_index(clients: &[ClientData]) -> Result<f64> {
    Ok(label_divergence(clients)? + feature_divergence(clients)?)
}
