//! Cross-entropy, distillation KL, the α/β ramp-up and the two branch
//! objectives of mutual distillation.

use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax_values, softmax_values, AutodiffError, Tape, Tensor, Var};
use crate::benchgen::VqaTriple;
use crate::model::{Binding, Branch, ClientModel, ParamGroup};
use crate::{Error, Result};

/// Mean negative log-likelihood of `labels` under row-wise softmax of `logits` (`B×C`).
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var, AutodiffError> {
    let (b, c) = (tape.value(logits).rows(), tape.value(logits).cols());
    if labels.len() != b {
        return Err(AutodiffError::Shape {
            op: "cross_entropy",
            detail: format!("{} labels for {b} rows", labels.len()),
        });
    }
    let mut onehot = vec![0.0; b * c];
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(AutodiffError::Index {
                op: "cross_entropy",
                index: y,
                bound: c,
            });
        }
        onehot[i * c + y] = 1.0;
    }
    let logp = tape.log_softmax(logits)?;
    let mask = tape.constant(Tensor::matrix(b, c, onehot));
    let picked = tape.mul(logp, mask)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / b as f64)
}

/// Mean over rows of `KL(σ(student/τ) ‖ σ(teacher/τ))`. The teacher is plain
/// data, so no gradient can reach whatever produced it.
pub fn kl_divergence(tape: &mut Tape, student: Var, teacher: &Tensor, temperature: f64) -> Result<Var, AutodiffError> {
    let s = tape.value(student);
    if !s.same_shape(teacher) || s.shape().len() != 2 {
        return Err(AutodiffError::Shape {
            op: "kl_divergence",
            detail: format!("{:?} vs {:?}", s.shape(), teacher.shape()),
        });
    }
    let (b, c) = (s.rows(), s.cols());
    let scaled_teacher: Vec<f64> = teacher.data().iter().map(|v| v / temperature).collect();
    let log_q = tape.constant(Tensor::matrix(b, c, log_softmax_values(&scaled_teacher, c)));
    let z = if temperature == 1.0 {
        student
    } else {
        tape.scale(student, 1.0 / temperature)?
    };
    let p = tape.softmax(z)?;
    let log_p = tape.log_softmax(z)?;
    let diff = tape.sub(log_p, log_q)?;
    let terms = tape.mul(p, diff)?;
    let total = tape.sum(terms)?;
    tape.scale(total, 1.0 / b as f64)
}

/// `−log σ(logits)_label` for one sample.
pub fn cross_entropy_value(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Model(format!("label {label} outside {} classes", logits.len())));
    }
    Ok(-log_softmax_values(logits, logits.len())[label])
}

/// `KL(σ(p) ‖ σ(q))` for one pair of logit vectors.
pub fn kl_value(p_logits: &[f64], q_logits: &[f64]) -> Result<f64> {
    if p_logits.len() != q_logits.len() || p_logits.is_empty() {
        return Err(Error::Model(format!(
            "logit length mismatch: {} vs {}",
            p_logits.len(),
            q_logits.len()
        )));
    }
    let c = p_logits.len();
    let p = softmax_values(p_logits, c);
    let lp = log_softmax_values(p_logits, c);
    let lq = log_softmax_values(q_logits, c);
    Ok(p.iter().zip(lp.iter().zip(&lq)).map(|(p, (a, b))| p * (a - b)).sum())
}

/// Distillation weights and their ramp-up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MkdWeights {
    pub alpha_max: f64,
    pub beta_max: f64,
    /// Share of the rounds over which the weights ramp up.
    pub ramp_fraction: f64,
    /// `c` in `exp(−c·(1−t)²)`.
    pub ramp_coefficient: f64,
    pub temperature: f64,
}

impl Default for MkdWeights {
    fn default() -> Self {
        Self {
            alpha_max: 1.0,
            beta_max: 1.0,
            ramp_fraction: 0.4,
            ramp_coefficient: 5.0,
            temperature: 1.0,
        }
    }
}

impl MkdWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_max >= 0.0 && self.beta_max >= 0.0) {
            return Err(Error::Config("alpha_max and beta_max must be >= 0".into()));
        }
        if !(self.ramp_fraction > 0.0 && self.ramp_fraction <= 1.0) {
            return Err(Error::Config("ramp_fraction must lie in (0, 1]".into()));
        }
        if !(self.ramp_coefficient >= 0.0 && self.temperature > 0.0) {
            return Err(Error::Config("ramp_coefficient >= 0 and temperature > 0 required".into()));
        }
        Ok(())
    }

    pub fn alpha(&self, round: usize, total_rounds: usize) -> f64 {
        rampup_weight(round, total_rounds, self.alpha_max, self.ramp_fraction, self.ramp_coefficient)
    }

    pub fn beta(&self, round: usize, total_rounds: usize) -> f64 {
        rampup_weight(round, total_rounds, self.beta_max, self.ramp_fraction, self.ramp_coefficient)
    }
}

/// `w_max·exp(−c·(1−t)²)` with `t = min(round−1, T_r)/T_r`, `T_r = ⌈fraction·R⌉`.
/// Rounds are 1-based.
pub fn rampup_weight(round: usize, total_rounds: usize, w_max: f64, fraction: f64, coefficient: f64) -> f64 {
    let ramp = (fraction * total_rounds as f64).ceil().max(1.0);
    let t = (round.saturating_sub(1) as f64).min(ramp) / ramp;
    if t >= 1.0 {
        return w_max;
    }
    w_max * (-coefficient * (1.0 - t) * (1.0 - t)).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossBranch {
    Shared,
    Dat,
}

impl LossBranch {
    pub fn name(self) -> &'static str {
        match self {
            LossBranch::Shared => "shared",
            LossBranch::Dat => "dat",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBundle {
    pub ce: f64,
    pub kl: f64,
    pub total: f64,
    pub branch: LossBranch,
}

/// A recorded objective, ready for `backward`.
#[derive(Debug)]
pub struct BranchLoss {
    pub bundle: LossBundle,
    pub total: Var,
    pub logits: Var,
    pub binding: Binding,
}

fn labels(samples: &[&VqaTriple]) -> Vec<usize> {
    samples.iter().map(|s| s.answer).collect()
}

/// Records `CE(z) + w·KL(σ(z) ‖ σ(teacher))` for the student branch. When `w`
/// is zero the KL term is not recorded and reported as 0.
#[allow(clippy::too_many_arguments)]
fn branch_loss(
    tape: &mut Tape,
    model: &ClientModel,
    samples: &[&VqaTriple],
    student: Branch,
    trainable: &[ParamGroup],
    teacher: Option<&Tensor>,
    weight: f64,
    temperature: f64,
    which: LossBranch,
) -> Result<BranchLoss> {
    let binding = model.bind(tape, student, trainable)?;
    let logits = model.forward(tape, &binding, samples)?;
    let ce = cross_entropy(tape, logits, &labels(samples))?;
    let (total, kl_value) = match teacher {
        Some(t) if weight != 0.0 => {
            let kl = kl_divergence(tape, logits, t, temperature)?;
            let weighted = tape.scale(kl, weight)?;
            let total = tape.add(ce, weighted)?;
            (total, tape.value(kl).item())
        }
        _ => (ce, 0.0),
    };
    let bundle = LossBundle {
        ce: tape.value(ce).item(),
        kl: kl_value,
        total: tape.value(total).item(),
        branch: which,
    };
    Ok(BranchLoss {
        bundle,
        total,
        logits,
        binding,
    })
}

/// `L^s = CE(z_s) + α·KL(σ(z_s) ‖ σ(z_teacher))`; trains the shared adapter
/// and the head. `teacher` is the detached teacher branch (normally the
/// dual-adapter teacher).
pub fn loss_shared(
    tape: &mut Tape,
    model: &ClientModel,
    samples: &[&VqaTriple],
    teacher: Branch,
    alpha: f64,
    temperature: f64,
) -> Result<BranchLoss> {
    let z_t = if alpha != 0.0 {
        Some(model.logits(teacher, samples)?)
    } else {
        None
    };
    branch_loss(
        tape,
        model,
        samples,
        Branch::Shared,
        &[ParamGroup::Shared, ParamGroup::Head],
        z_t.as_ref(),
        alpha,
        temperature,
        LossBranch::Shared,
    )
}

/// `L^DAT = CE(z_DAT) + β·KL(σ(z_DAT) ‖ σ(z_s))`; trains the local adapter and
/// the head. `student` is the teacher-side branch being optimized (normally
/// the dual-adapter teacher); `z_s` is recomputed from the current shared
/// adapter and detached.
pub fn loss_dat(
    tape: &mut Tape,
    model: &ClientModel,
    samples: &[&VqaTriple],
    student: Branch,
    beta: f64,
    temperature: f64,
) -> Result<BranchLoss> {
    let z_s = if beta != 0.0 {
        Some(model.logits(Branch::Shared, samples)?)
    } else {
        None
    };
    branch_loss(
        tape,
        model,
        samples,
        student,
        &[ParamGroup::Local, ParamGroup::Head],
        z_s.as_ref(),
        beta,
        temperature,
        LossBranch::Dat,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::rng::substream;

    #[test]
    fn ce_examples() {
        assert!((cross_entropy_value(&[0.3; 4], 2).unwrap() - 4f64.ln()).abs() <= 1e-12);
        let v = cross_entropy_value(&[10.0, -10.0], 0).unwrap();
        assert!(v > 0.0 && (v - 2.061153622438558e-9).abs() < 1e-15);
        assert!(cross_entropy_value(&[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn kl_hand_value() {
        let v = kl_value(&[0.0, 0.0], &[3f64.ln(), 0.0]).unwrap();
        let expected = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
        assert!((v - expected).abs() <= 1e-12);
        assert!((v - 0.143841).abs() < 1e-6);
        assert!(kl_value(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn tape_losses_match_plain_values() {
        let mut rng = substream(1, "loss-test", &[]);
        let (b, c) = (3, 5);
        let s: Vec<f64> = (0..b * c).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let q: Vec<f64> = (0..b * c).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let labels = [0, 4, 2];
        let mut t = Tape::new();
        let sv = t.param(Tensor::matrix(b, c, s.clone()));
        let ce = cross_entropy(&mut t, sv, &labels).unwrap();
        let kl = kl_divergence(&mut t, sv, &Tensor::matrix(b, c, q.clone()), 1.0).unwrap();
        let ce_ref: f64 = (0..b)
            .map(|i| cross_entropy_value(&s[i * c..(i + 1) * c], labels[i]).unwrap())
            .sum::<f64>()
            / b as f64;
        let kl_ref: f64 = (0..b)
            .map(|i| kl_value(&s[i * c..(i + 1) * c], &q[i * c..(i + 1) * c]).unwrap())
            .sum::<f64>()
            / b as f64;
        assert!((t.value(ce).item() - ce_ref).abs() <= 1e-12);
        assert!((t.value(kl).item() - kl_ref).abs() <= 1e-12);
    }

    #[test]
    fn ce_label_out_of_range() {
        let mut t = Tape::new();
        let l = t.param(Tensor::matrix(1, 3, vec![0.0; 3]));
        assert!(cross_entropy(&mut t, l, &[3]).is_err());
        assert!(cross_entropy(&mut t, l, &[0, 1]).is_err());
    }

    #[test]
    fn rampup_endpoints_and_monotonicity() {
        let w = MkdWeights::default();
        assert!((w.alpha(1, 20) - (-5f64).exp()).abs() <= 1e-15);
        // T_r = 8: saturated from round 9 on
        assert_eq!(w.alpha(9, 20), 1.0);
        assert_eq!(w.beta(20, 20), 1.0);
        assert!(w.alpha(8, 20) < 1.0);
        for total in 1..40 {
            for r in 1..total {
                assert!(w.alpha(r + 1, total) >= w.alpha(r, total));
            }
        }
    }
}
