//! AdamW with decoupled weight decay and a warmup-then-cosine schedule.

use serde::{Deserialize, Serialize};

use crate::model::{Params, Role};
use crate::tensor::{Real, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    #[default]
    Cosine,
}

/// Learning rate at `step` (0-based) of a `total`-step run: linear warmup,
/// then either constant or cosine decay to zero.
pub fn learning_rate(base: f64, step: usize, total: usize, warmup: usize, schedule: LrSchedule) -> f64 {
    let warm = if warmup > 0 { ((step + 1) as f64 / warmup as f64).min(1.0) } else { 1.0 };
    let decay = match schedule {
        LrSchedule::Constant => 1.0,
        LrSchedule::Cosine => {
            let span = total.saturating_sub(warmup).max(1) as f64;
            let t = (step.saturating_sub(warmup) as f64 / span).min(1.0);
            0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    };
    base * warm * decay
}

pub struct AdamW<T> {
    pub weight_decay: f64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    decays: Vec<bool>,
    t: i32,
}

impl<T: Real> AdamW<T> {
    /// Moments for `params`; only weight matrices are decayed.
    pub fn new(params: &Params<T>, weight_decay: f64) -> Self {
        let named = params.named();
        AdamW {
            weight_decay,
            m: named.iter().map(|(_, _, t)| Tensor::zeros(t.rows, t.cols)).collect(),
            v: named.iter().map(|(_, _, t)| Tensor::zeros(t.rows, t.cols)).collect(),
            decays: named.iter().map(|(_, r, _)| *r == Role::Weight).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut Params<T>, grads: &[Tensor<T>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::of(BETA1), T::of(BETA2));
        let c1 = T::one() - b1.powi(self.t);
        let c2 = T::one() - b2.powi(self.t);
        let lr_t = T::of(lr);
        let eps = T::of(ADAM_EPS);
        for (i, p) in params.tensors_mut().into_iter().enumerate() {
            let shrink = if self.decays[i] { T::one() - lr_t * T::of(self.weight_decay) } else { T::one() };
            let (m, v, g) = (&mut self.m[i].data, &mut self.v[i].data, &grads[i].data);
            for j in 0..p.data.len() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let step = (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                p.data[j] = p.data[j] * shrink - lr_t * step;
            }
        }
    }
}
