//! AdamW with decoupled weight decay.
//!
//! ```text
//! θ ← θ − lr·wd·θ
//! m ← β₁ m + (1 − β₁) g
//! v ← β₂ v + (1 − β₂) g²
//! θ ← θ − (lr / (1 − β₁ᵗ)) · m / (√v / √(1 − β₂ᵗ) + ε)
//! ```

use serde::{Deserialize, Serialize};

use crate::embedder::{Model, ParamGrads};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamWState {
    pub fn new(model: &Model) -> Self {
        Self::for_blocks(model.blocks().iter().map(|(_, b)| b.len()))
    }

    pub fn for_blocks(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (first, second) = sizes
            .into_iter()
            .map(|n| (vec![0.0; n], vec![0.0; n]))
            .unzip();
        AdamWState {
            first,
            second,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

pub fn adamw_step(
    model: &mut Model,
    grads: &ParamGrads,
    state: &mut AdamWState,
    cfg: &AdamWConfig,
) -> Result<()> {
    let grads = grads.blocks();
    adamw_update(model.blocks_mut(), &grads, state, cfg)
}

/// Updates parameter blocks in place. Non-finite gradients abort the step
/// before anything is modified.
pub fn adamw_update(
    mut params: Vec<&mut [f64]>,
    grads: &[&[f64]],
    state: &mut AdamWState,
    cfg: &AdamWConfig,
) -> Result<()> {
    let shapes_ok = params.len() == grads.len()
        && params.len() == state.first.len()
        && params
            .iter()
            .zip(grads)
            .zip(&state.first)
            .all(|((p, g), m)| p.len() == g.len() && p.len() == m.len());
    if !shapes_ok {
        return Err(Error::shape(
            "optimizer state, parameters and gradients disagree",
        ));
    }
    if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFinite("gradient"));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2_sqrt = (1.0 - cfg.beta2.powi(t)).sqrt();
    let step_size = cfg.lr / bc1;
    let decay = cfg.lr * cfg.weight_decay;
    for (k, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.first[k], &mut state.second[k]);
        for (i, theta) in p.iter_mut().enumerate() {
            let g = grads[k][i];
            *theta -= decay * *theta;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            *theta -= step_size * m[i] / (v[i].sqrt() / bc2_sqrt + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(params: &mut [f64], grads: &[f64], state: &mut AdamWState, cfg: &AdamWConfig) {
        adamw_update(vec![params], &[grads], state, cfg).unwrap();
    }

    #[test]
    fn zero_grads_without_decay_leave_params() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut p = vec![1.0, -2.0, 3.5];
        let mut st = AdamWState::for_blocks([3]);
        for _ in 0..10 {
            run(&mut p, &[0.0; 3], &mut st, &cfg);
        }
        assert_eq!(p, vec![1.0, -2.0, 3.5]);
        assert_eq!(st.step(), 10);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let cfg = AdamWConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let g = [0.5, -3.0, 1e-3];
        let mut p = vec![1.0, 1.0, 1.0];
        let mut st = AdamWState::for_blocks([3]);
        run(&mut p, &g, &mut st, &cfg);
        for (pi, gi) in p.iter().zip(g) {
            // m̂ = g, v̂ = g², so the step is lr · g / (|g| + ε).
            let m = 0.1 * gi;
            let v = 0.001 * gi * gi;
            let expect = 1.0 - (0.01 / 0.1) * m / (v.sqrt() / 0.001f64.sqrt() + 1e-8);
            assert!((pi - expect).abs() < 1e-12);
            assert!((pi - (1.0 - 0.01 * gi / (gi.abs() + 1e-8))).abs() < 1e-12);
        }
    }

    #[test]
    fn decay_is_decoupled() {
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamWConfig::default()
        };
        let mut p = vec![2.0, -4.0];
        let mut st = AdamWState::for_blocks([2]);
        run(&mut p, &[0.0, 0.0], &mut st, &cfg);
        assert_eq!(p, vec![2.0 * (1.0 - 0.05), -4.0 * (1.0 - 0.05)]);
    }

    #[test]
    fn non_finite_grads_abort() {
        let cfg = AdamWConfig::default();
        let mut p = vec![1.0];
        let mut st = AdamWState::for_blocks([1]);
        assert!(adamw_update(vec![&mut p], &[&[f64::NAN]], &mut st, &cfg).is_err());
        assert_eq!(p, vec![1.0]);
        assert_eq!(st.step(), 0);
        assert!(adamw_update(vec![&mut p], &[&[1.0, 2.0]], &mut st, &cfg).is_err());
    }
}
