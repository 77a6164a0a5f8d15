use std::sync::Arc;

use rand::seq::index;
use rand::Rng;

use super::{Sgd, TrainConfig, Variant};
use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::benchgen::{ClientData, VqaTriple};
use crate::losses::{cross_entropy, loss_dat, loss_shared, BranchLoss};
use crate::model::{Branch, ClientModel, ParamGroup, PeftMode};
use crate::rng::substream;
use crate::{Error, Result};

/// Everything one client owns between rounds.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    pub data: Arc<ClientData>,
    pub model: ClientModel,
    pub optimizer: Sgd,
}

/// Round averages of the per-step training losses.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    /// Accuracy of the deployed branch on the round's batches, before each step.
    pub accuracy: f64,
    /// Cross-entropy of the deployed branch.
    pub ce: f64,
    /// KL term of the shared-adapter objective.
    pub kl_s: f64,
    /// KL term of the teacher objective.
    pub kl_dat: f64,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Clone, Debug)]
pub struct ClientReport {
    pub client: usize,
    /// The updated communicated set.
    pub upload: crate::model::NamedTensors,
    pub n_samples: usize,
    pub stats: StepStats,
}

/// Indices of one training batch, without replacement inside the batch.
pub fn sample_batch(rng: &mut impl Rng, n: usize, batch: usize) -> Vec<usize> {
    index::sample(rng, n, batch.min(n)).into_vec()
}

fn non_finite(client: usize, round: usize, step: usize, branch: &'static str, ce: f64, kl: f64) -> Error {
    Error::NonFiniteLoss {
        client,
        round,
        step,
        branch,
        ce,
        kl,
    }
}

fn guard<T>(r: Result<T>, client: usize, round: usize, step: usize, branch: &'static str) -> Result<T> {
    r.map_err(|e| match e {
        Error::Autodiff(AutodiffError::NonFinite { .. }) => non_finite(client, round, step, branch, f64::NAN, f64::NAN),
        other => other,
    })
}

fn apply(tape: &mut Tape, loss: &BranchLoss, state: &mut ClientState) -> Result<()> {
    tape.backward(loss.total)?;
    let grads: Vec<(String, Tensor)> = loss
        .binding
        .trainable()
        .iter()
        .filter_map(|(name, v)| tape.grad(*v).map(|g| (name.clone(), g.clone())))
        .collect();
    state.optimizer.step(state.model.params_mut(), &grads);
    Ok(())
}

fn correct(logits: &Tensor, samples: &[&VqaTriple]) -> usize {
    samples
        .iter()
        .enumerate()
        .filter(|(i, s)| crate::experiments::argmax(logits.row(*i)) == s.answer)
        .count()
}

/// One round of local training on the communicated set currently installed
/// in `state.model`. Rounds are 1-based. Returns the updated communicated set.
///
/// In feddat mode the frozen teacher copy is refreshed from the shared
/// adapter first; each step then takes an optimizer step on the shared
/// adapter and head, and a second one on the local adapter and head, on the
/// same batch.
pub fn client_update(state: &mut ClientState, round: usize, cfg: &TrainConfig, seed: u64) -> Result<ClientReport> {
    let k = state.id;
    let mode = state.model.mode();
    state.model.refresh_frozen();
    for g in mode.communicated_groups() {
        state.optimizer.reset(*g);
    }
    let (alpha, beta) = if mode == PeftMode::Feddat {
        cfg.weights(round)
    } else {
        (0.0, 0.0)
    };
    let tau = cfg.mkd.temperature;
    let mut rng = substream(seed, "batch", &[k as u64, round as u64]);
    let mut sums = StepStats::default();
    let mut seen = 0usize;
    let data = state.data.clone();
    let mut tape = Tape::new();
    for step in 0..cfg.local_steps {
        let idx = sample_batch(&mut rng, data.train.len(), cfg.batch_size);
        let batch: Vec<&VqaTriple> = idx.iter().map(|&i| &data.train[i]).collect();
        tape.clear();
        let first = if mode == PeftMode::Feddat {
            let teacher = match cfg.variant {
                Variant::Full | Variant::NoMkd => Branch::Dat,
                Variant::NoFrozenBranch => Branch::Local,
                Variant::NoLocalBranch => Branch::Frozen,
            };
            guard(
                loss_shared(&mut tape, &state.model, &batch, teacher, alpha, tau),
                k,
                round,
                step,
                "shared",
            )?
        } else {
            guard(plain_loss(&mut tape, &state.model, &batch), k, round, step, "plain")?
        };
        let b = first.bundle;
        if !(b.total.is_finite() && b.ce.is_finite() && b.kl.is_finite()) {
            return Err(non_finite(k, round, step, "shared", b.ce, b.kl));
        }
        sums.ce += b.ce;
        sums.kl_s += b.kl;
        sums.accuracy += correct(tape.value(first.logits), &batch) as f64;
        seen += batch.len();
        guard(apply(&mut tape, &first, state), k, round, step, "shared")?;

        if mode == PeftMode::Feddat && cfg.variant != Variant::NoLocalBranch {
            let student = match cfg.variant {
                Variant::NoFrozenBranch => Branch::Local,
                _ => Branch::Dat,
            };
            tape.clear();
            let second = guard(
                loss_dat(&mut tape, &state.model, &batch, student, beta, tau),
                k,
                round,
                step,
                "dat",
            )?;
            let b = second.bundle;
            if !(b.total.is_finite() && b.ce.is_finite() && b.kl.is_finite()) {
                return Err(non_finite(k, round, step, "dat", b.ce, b.kl));
            }
            sums.kl_dat += b.kl;
            guard(apply(&mut tape, &second, state), k, round, step, "dat")?;
        }
    }
    let steps = cfg.local_steps.max(1) as f64;
    let stats = StepStats {
        accuracy: if seen == 0 { 0.0 } else { sums.accuracy / seen as f64 },
        ce: sums.ce / steps,
        kl_s: sums.kl_s / steps,
        kl_dat: sums.kl_dat / steps,
        alpha,
        beta,
    };
    Ok(ClientReport {
        client: k,
        upload: state.model.communicated(),
        n_samples: state.data.train.len(),
        stats,
    })
}

/// Cross-entropy on the mode's deployed branch, training the communicated
/// groups and the head.
fn plain_loss(tape: &mut Tape, model: &ClientModel, batch: &[&VqaTriple]) -> Result<BranchLoss> {
    let mut trainable: Vec<ParamGroup> = model.mode().communicated_groups().to_vec();
    trainable.push(ParamGroup::Head);
    let binding = model.bind(tape, model.default_branch(), &trainable)?;
    let logits = model.forward(tape, &binding, batch)?;
    let labels: Vec<usize> = batch.iter().map(|s| s.answer).collect();
    let ce = cross_entropy(tape, logits, &labels)?;
    let value = tape.value(ce).item();
    Ok(BranchLoss {
        bundle: crate::losses::LossBundle {
            ce: value,
            kl: 0.0,
            total: value,
            branch: crate::losses::LossBranch::Shared,
        },
        total: ce,
        logits,
        binding,
    })
}
