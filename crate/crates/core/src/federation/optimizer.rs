use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::model::{NamedTensors, ParamGroup};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    SgdMomentum,
}

/// SGD with optional heavy-ball momentum; velocity buffers are keyed by
/// parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    /// Zero for plain SGD.
    pub momentum: f64,
    velocity: NamedTensors,
}

impl Sgd {
    pub fn new(kind: OptimizerKind, lr: f64, momentum: f64) -> Self {
        let momentum = match kind {
            OptimizerKind::Sgd => 0.0,
            OptimizerKind::SgdMomentum => momentum,
        };
        Self {
            lr,
            momentum,
            velocity: NamedTensors::new(),
        }
    }

    /// `w ← w − lr·g`, or `v ← μ·v + g; w ← w − lr·v`.
    pub fn step(&mut self, params: &mut NamedTensors, grads: &[(String, Tensor)]) {
        for (name, g) in grads {
            let w = params.get_mut(name).expect("gradient for a stored parameter");
            if self.momentum == 0.0 {
                for (w, g) in w.data_mut().iter_mut().zip(g.data()) {
                    *w -= self.lr * g;
                }
                continue;
            }
            if !self.velocity.contains(name) {
                self.velocity.insert(name.clone(), Tensor::zeros(g.shape()));
            }
            let v = self.velocity.get_mut(name).expect("just inserted");
            for ((w, v), g) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *v = self.momentum * *v + g;
                *w -= self.lr * *v;
            }
        }
    }

    /// Drops the velocity of every parameter in `group`.
    pub fn reset(&mut self, group: ParamGroup) {
        self.velocity.remove_group(group);
    }

    pub fn state(&self) -> &NamedTensors {
        &self.velocity
    }

    pub fn set_state(&mut self, velocity: NamedTensors) {
        self.velocity = velocity;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_and_momentum_steps() {
        let mut p = NamedTensors::new();
        p.insert("head.w", Tensor::vector(vec![1.0]));
        let g = vec![("head.w".to_string(), Tensor::vector(vec![2.0]))];
        let mut sgd = Sgd::new(OptimizerKind::Sgd, 0.5, 0.9);
        sgd.step(&mut p, &g);
        assert_eq!(p.get("head.w").unwrap().data(), &[0.0]);
        assert!(sgd.state().is_empty());

        let mut m = Sgd::new(OptimizerKind::SgdMomentum, 0.5, 0.5);
        m.step(&mut p, &g); // v=2, w=-1
        m.step(&mut p, &g); // v=3, w=-2.5
        assert_eq!(p.get("head.w").unwrap().data(), &[-2.5]);
        m.reset(ParamGroup::Head);
        assert!(m.state().is_empty());
    }
}
