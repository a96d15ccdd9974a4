use ndarray::{Array2, Zip};

use super::grad::ModelGrads;
use crate::mapping::{AlignmentModel, EPS_V};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam update of `param` in place. `step` counts from 1.
pub fn adam_update(
    param: &mut Array2<f64>,
    grad: &Array2<f64>,
    m: &mut Array2<f64>,
    v: &mut Array2<f64>,
    step: u64,
    lr: f64,
) {
    let c1 = 1.0 - ADAM_BETA1.powi(step as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(step as i32);
    Zip::from(param)
        .and(grad)
        .and(m)
        .and(v)
        .for_each(|p, &g, m, v| {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        });
}

/// Adam moments for the four parameter blocks of an [`AlignmentModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    m: [Array2<f64>; 4],
    v: [Array2<f64>; 4],
    step: u64,
}

impl OptimizerState {
    pub fn new(model: &AlignmentModel) -> Self {
        let zeros = || model.blocks().map(|b| Array2::zeros(b.raw_dim()));
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update. Blocks with `frozen[b]` set are left alone. A raw
    /// reflector whose update would bring its norm to `EPS_V` or below keeps
    /// its previous value.
    pub fn step(&mut self, model: &mut AlignmentModel, grads: &ModelGrads, lr: f64, frozen: [bool; 4]) {
        self.step += 1;
        let step = self.step;
        for (b, param) in model.blocks_mut().into_iter().enumerate() {
            if frozen[b] {
                continue;
            }
            let before = (b >= 2).then(|| param.clone());
            adam_update(param, &grads.blocks[b], &mut self.m[b], &mut self.v[b], step, lr);
            if let Some(before) = before {
                for (mut row, old) in param.rows_mut().into_iter().zip(before.rows()) {
                    let norm = row.dot(&row).sqrt();
                    if !(norm > EPS_V) {
                        row.assign(&old);
                    }
                }
            }
        }
    }
}
