use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient.
    pub weight_decay: f64,
    /// Round updated parameters to `f32` so checkpoints stay bit-exact.
    pub round_to_f32: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            round_to_f32: true,
        }
    }
}

/// First and second moment estimates per parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    moments: IndexMap<String, (Vec<f64>, Vec<f64>)>,
}

/// One bias-corrected Adam update of every parameter that holds a gradient.
pub fn adam_step(params: &mut IndexMap<String, Tensor>, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if !(cfg.lr >= 0.0 && (0.0..1.0).contains(&cfg.beta1) && (0.0..1.0).contains(&cfg.beta2) && cfg.eps > 0.0) {
        return Err(Error::InvalidArgument(format!("invalid Adam settings {cfg:?}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let Some(grad) = p.grad().map(<[f64]>::to_vec) else { continue };
        let n = p.len();
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        if m.len() != n {
            return Err(Error::shape("adam_step", format!("state for `{name}` has {} entries, parameter {n}", m.len())));
        }
        let data = p.data_mut();
        for i in 0..n {
            let g = grad[i] + cfg.weight_decay * data[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        if cfg.round_to_f32 {
            p.round_to_f32();
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(values: &[f64], grad: &[f64]) -> IndexMap<String, Tensor> {
        let mut t = Tensor::new(vec![values.len()], values.to_vec()).unwrap().with_grad();
        t.accumulate_grad(grad).unwrap();
        IndexMap::from([("w".to_string(), t)])
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = params(&[1.0, -2.0], &[0.0, 0.0]);
        let mut s = AdamState::default();
        adam_step(&mut p, &mut s, &AdamConfig::default()).unwrap();
        assert_eq!(p["w"].data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig {
            lr: 1e-3,
            round_to_f32: false,
            ..AdamConfig::default()
        };
        let mut p = params(&[0.5, 0.5], &[3.0, -0.2]);
        let mut s = AdamState::default();
        adam_step(&mut p, &mut s, &cfg).unwrap();
        let d = p["w"].data();
        assert!((d[0] - (0.5 - 1e-3)).abs() < 1e-9);
        assert!((d[1] - (0.5 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn rounding_keeps_f32_exact() {
        let mut p = params(&[0.1f32 as f64], &[1.0]);
        let mut s = AdamState::default();
        adam_step(&mut p, &mut s, &AdamConfig::default()).unwrap();
        let v = p["w"].data()[0];
        assert_eq!(v, v as f32 as f64);
    }
}
