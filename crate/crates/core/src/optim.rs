//! AdamW with decoupled weight decay, and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::config::Schedule;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub betas: [f64; 2],
    pub weight_decay: f64,
    pub step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

/// Weight decay applies to weight matrices only; biases, LayerNorm scales
/// and other vectors are left alone.
pub fn decays(value: &Matrix) -> bool {
    value.rows() > 1 && value.cols() > 1
}

impl AdamW {
    pub fn new(params: &ParamStore, betas: [f64; 2], weight_decay: f64) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, p)| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect()
        };
        AdamW {
            betas,
            weight_decay,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// Moment shapes agree with `params`.
    pub fn matches(&self, params: &ParamStore) -> bool {
        self.first.len() == params.len()
            && self.second.len() == params.len()
            && params
                .iter()
                .zip(self.first.iter().zip(&self.second))
                .all(|((_, p), (m, v))| m.shape() == p.value.shape() && v.shape() == p.value.shape())
    }

    /// One update. `grads` may omit parameters; they count as zero gradient
    /// (moments still decay, and so do the weights).
    pub fn update(&mut self, params: &mut ParamStore, grads: &[(ParamId, Matrix)], lr: f64) -> Result<()> {
        if !self.matches(params) {
            return Err(Error::Contract("optimizer state does not match parameters".into()));
        }
        self.step += 1;
        let [b1, b2] = self.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let mut by_id: Vec<Option<&Matrix>> = vec![None; params.len()];
        for (id, g) in grads {
            if g.shape() != params.value(*id).shape() {
                return Err(Error::shape("adamw gradient", g.shape(), params.value(*id).shape()));
            }
            by_id[id.0] = Some(g);
        }
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            let value = params.value_mut(id);
            let decay = if decays(value) { self.weight_decay } else { 0.0 };
            let m = self.first[id.0].data_mut();
            let v = self.second[id.0].data_mut();
            let g = by_id[id.0].map(Matrix::data);
            for (k, w) in value.data_mut().iter_mut().enumerate() {
                let gk = g.map_or(0.0, |g| g[k]);
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                let update = (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPS);
                *w -= lr * (update + decay * *w);
            }
        }
        Ok(())
    }
}

/// Learning rate for 0-based `step` of `total`. Cosine decays to 0 at `total`.
pub fn learning_rate(schedule: Schedule, base: f64, step: usize, total: usize) -> f64 {
    match schedule {
        Schedule::Constant => base,
        Schedule::Cosine => {
            let t = step.min(total) as f64 / total.max(1) as f64;
            0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}
