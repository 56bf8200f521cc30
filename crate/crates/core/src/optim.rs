//! SGD and Adam with constant or cosine learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    #[default]
    Cosine,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Parameters are addressed by a stable slot index; frozen parameters are
/// simply never passed in.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    base_lr: f64,
    schedule: LrSchedule,
    total_steps: usize,
    step: usize,
    moments: Vec<Option<Moments>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, schedule: LrSchedule, total_steps: usize) -> Self {
        Self {
            kind,
            base_lr: lr,
            schedule,
            total_steps: total_steps.max(1),
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Learning rate used for the current step.
    pub fn lr(&self) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.base_lr,
            LrSchedule::Cosine => {
                let t = self.step.min(self.total_steps) as f64 / self.total_steps as f64;
                0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    pub fn update(&mut self, slot: usize, param: &mut Tensor, grad: &Tensor) {
        debug_assert_eq!(param.shape(), grad.shape());
        let lr = self.lr();
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                if self.moments.len() <= slot {
                    self.moments.resize(slot + 1, None);
                }
                let n = param.len();
                let mom = self.moments[slot].get_or_insert_with(|| Moments {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                });
                let t = (self.step + 1) as i32;
                let c1 = 1.0 - BETA1.powi(t);
                let c2 = 1.0 - BETA2.powi(t);
                for (((p, &g), m), v) in param
                    .data_mut()
                    .iter_mut()
                    .zip(grad.data())
                    .zip(mom.m.iter_mut())
                    .zip(mom.v.iter_mut())
                {
                    *m = BETA1 * *m + (1.0 - BETA1) * g;
                    *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
                }
            }
        }
    }

    /// Call once after all slots of a step were updated.
    pub fn advance(&mut self) {
        self.step += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimise(kind: OptimizerKind, lr: f64) -> f64 {
        // f(x) = (x - 3)^2
        let mut x = Tensor::vector(vec![0.0]).unwrap();
        let mut opt = Optimizer::new(kind, lr, LrSchedule::Constant, 500);
        for _ in 0..500 {
            let g = x.map(|v| 2.0 * (v - 3.0));
            opt.update(0, &mut x, &g);
            opt.advance();
        }
        x.item()
    }

    #[test]
    fn both_optimisers_converge_on_a_quadratic() {
        assert!((minimise(OptimizerKind::Sgd, 0.1) - 3.0).abs() < 1e-9);
        assert!((minimise(OptimizerKind::Adam, 0.05) - 3.0).abs() < 1e-3);
    }

    #[test]
    fn cosine_decays_from_base_to_zero() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 1.0, LrSchedule::Cosine, 10);
        assert_eq!(opt.lr(), 1.0);
        for _ in 0..5 {
            opt.advance();
        }
        assert!((opt.lr() - 0.5).abs() < 1e-15);
        for _ in 0..5 {
            opt.advance();
        }
        assert!(opt.lr().abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_adam_parameter_unchanged() {
        let mut x = Tensor::vector(vec![0.123456789]).unwrap();
        let before = x.clone();
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1, LrSchedule::Cosine, 3);
        for _ in 0..3 {
            opt.update(0, &mut x, &Tensor::zeros(&[1]));
            opt.advance();
        }
        assert_eq!(x, before);
    }
}
