//! AdamW with linear warmup and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient norm ceiling; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            warmup_steps: 1000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
        }
    }
}

impl AdamWConfig {
    /// Learning rate for the 1-based step `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * step as f64 / self.warmup_steps as f64
        }
    }
}

/// Moment estimates for every parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamWState {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        Self {
            step: 0,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }
}

pub fn global_norm(grads: &[Matrix]) -> f64 {
    grads.iter().map(Matrix::sum_sq).sum::<f64>().sqrt()
}

/// Applies one AdamW update in place and returns the pre-clip gradient norm.
/// Weight decay is skipped for tensors with a single row (biases, norms).
pub fn adamw_step(
    cfg: &AdamWConfig,
    state: &mut AdamWState,
    params: &mut [&mut Matrix],
    grads: &[Matrix],
) -> Result<f64> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Input(format!(
            "{} params, {} grads, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    let norm = global_norm(grads);
    let scale = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
        cfg.clip_norm / norm
    } else {
        1.0
    };
    state.step += 1;
    let lr = cfg.lr_at(state.step);
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let decay = if p.rows() > 1 { cfg.weight_decay } else { 0.0 };
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, &gj) in m.iter_mut().zip(g) {
            *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj * scale;
        }
        let v = state.v[i].data_mut();
        for (vj, &gj) in v.iter_mut().zip(g) {
            let gs = gj * scale;
            *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gs * gs;
        }
        let m = state.m[i].data();
        let v = state.v[i].data();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *w -= lr * (mhat / (vhat.sqrt() + cfg.eps) + decay * *w);
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_is_linear() {
        let c = AdamWConfig {
            lr: 1.0,
            warmup_steps: 10,
            ..Default::default()
        };
        assert_eq!(c.lr_at(1), 0.1);
        assert_eq!(c.lr_at(5), 0.5);
        assert_eq!(c.lr_at(10), 1.0);
        assert_eq!(c.lr_at(1000), 1.0);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // with bias correction the first update is lr·g/|g| per coordinate
        let cfg = AdamWConfig {
            lr: 0.01,
            warmup_steps: 0,
            weight_decay: 0.0,
            clip_norm: 0.0,
            ..Default::default()
        };
        let mut w = Matrix::from_vec(2, 1, vec![1.0, -1.0]);
        let g = vec![Matrix::from_vec(2, 1, vec![3.0, -0.5])];
        let mut st = AdamWState::new(&[(2, 1)]);
        adamw_step(&cfg, &mut st, &mut [&mut w], &g).unwrap();
        assert!((w.get(0, 0) - 0.99).abs() < 1e-7);
        assert!((w.get(1, 0) + 0.99).abs() < 1e-7);
    }

    #[test]
    fn minimises_a_quadratic() {
        let cfg = AdamWConfig {
            lr: 0.05,
            warmup_steps: 5,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut w = Matrix::from_vec(3, 1, vec![2.0, -3.0, 0.5]);
        let mut st = AdamWState::new(&[(3, 1)]);
        for _ in 0..2000 {
            let g = vec![w.map(|x| 2.0 * (x - 1.0))];
            adamw_step(&cfg, &mut st, &mut [&mut w], &g).unwrap();
        }
        assert!(w.data().iter().all(|x| (x - 1.0).abs() < 1e-2));
    }

    #[test]
    fn clipping_bounds_the_update_direction() {
        let cfg = AdamWConfig::default();
        let g = vec![Matrix::from_vec(1, 2, vec![300.0, 400.0])];
        assert_eq!(global_norm(&g), 500.0);
        let mut w = Matrix::zeros(1, 2);
        let mut st = AdamWState::new(&[(1, 2)]);
        let n = adamw_step(&cfg, &mut st, &mut [&mut w], &g).unwrap();
        assert_eq!(n, 500.0);
        assert!((st.m[0].get(0, 0) - 0.1 * 0.6).abs() < 1e-12);
    }
}
