use std::f64::consts::PI;

use super::{Schedule, TrainConfig};
use crate::spiking::{Network, ParamLayout};

pub const RADAM_BETA1: f64 = 0.9;
pub const RADAM_BETA2: f64 = 0.999;
pub const RADAM_EPSILON: f64 = 1e-8;

/// Moment estimates and step count of the rectified Adam optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        OptimizerState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1: RADAM_BETA1,
            beta2: RADAM_BETA2,
            epsilon: RADAM_EPSILON,
        }
    }

    /// Maximum length of the approximated simple moving average.
    pub fn rho_inf(&self) -> f64 {
        2.0 / (1.0 - self.beta2) - 1.0
    }

    /// `ρ_t` for step `t ≥ 1`.
    pub fn rho(&self, t: u64) -> f64 {
        let b2t = self.beta2.powi(t as i32);
        self.rho_inf() - 2.0 * t as f64 * b2t / (1.0 - b2t)
    }
}

/// One RAdam update with decoupled weight decay. While `ρ_t ≤ 4` the
/// variance of the adaptive rate is intractable and the step uses the
/// bias-corrected momentum alone.
pub fn radam_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState, lr: f64, weight_decay: f64) {
    assert_eq!(params.len(), grads.len(), "parameter and gradient lengths differ");
    assert_eq!(params.len(), state.m.len(), "optimizer state length differs");
    state.step += 1;
    let t = state.step;
    let (b1, b2) = (state.beta1, state.beta2);
    let bias1 = 1.0 - b1.powi(t as i32);
    let bias2 = 1.0 - b2.powi(t as i32);
    let rho_inf = state.rho_inf();
    let rho = state.rho(t);
    let rect = (rho > 4.0).then(|| {
        (((rho - 4.0) * (rho - 2.0) * rho_inf) / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt()
    });
    let decay = 1.0 - lr * weight_decay;
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / bias1;
        params[i] *= decay;
        params[i] -= match rect {
            Some(r) => lr * r * m_hat / ((state.v[i] / bias2).sqrt() + state.epsilon),
            None => lr * m_hat,
        };
    }
}

pub fn schedule_lr(config: &TrainConfig, epoch: usize) -> f64 {
    match config.schedule {
        Schedule::Step { factor, every } => config.lr0 * factor.powi((epoch / every) as i32),
        Schedule::CosineWarmRestarts { period } => {
            let phase = (epoch % period) as f64 / period as f64;
            config.lr0 / 2.0 * (1.0 + (PI * phase).cos())
        }
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

/// Clamps every `β` to `[0, 1]` and every `b` to `[0, ∞)` in a flat
/// parameter vector.
pub fn project_flat(params: &mut [f64], layout: &ParamLayout) {
    for slots in &layout.layers {
        params[slots.beta] = params[slots.beta].clamp(0.0, 1.0);
        params[slots.threshold] = params[slots.threshold].max(0.0);
    }
}

pub fn project_params(model: &mut Network) {
    let layout = model.param_layout();
    let mut params = model.params();
    project_flat(&mut params, &layout);
    model.set_params(&params).expect("layout matches the model");
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rho_values() {
        let s = OptimizerState::new(1);
        assert!((s.rho_inf() - 1999.0).abs() < 1e-9);
        for t in 1..=4 {
            assert!(s.rho(t) <= 4.0, "t={t}: {}", s.rho(t));
        }
        assert!(s.rho(5) > 4.0);
    }

    #[test]
    fn early_steps_are_plain_momentum() {
        let mut s = OptimizerState::new(1);
        let mut p = [1.0];
        radam_step(&mut p, &[2.0], &mut s, 0.1, 0.0);
        // m̂ = g on the first step.
        assert!((p[0] - (1.0 - 0.1 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut s = OptimizerState::new(1);
        let mut p = [2.0];
        radam_step(&mut p, &[0.0], &mut s, 0.5, 0.1);
        assert!((p[0] - 2.0 * 0.95).abs() < 1e-15);
    }

    #[test]
    fn schedule_examples() {
        let step = TrainConfig {
            lr0: 5e-3,
            schedule: Schedule::Step {
                factor: 0.7,
                every: 2,
            },
            ..TrainConfig::default()
        };
        assert!((schedule_lr(&step, 2) - 3.5e-3).abs() < 1e-15);
        assert_eq!(schedule_lr(&step, 1), 5e-3);
        let cosine = TrainConfig {
            lr0: 1e-2,
            schedule: Schedule::CosineWarmRestarts { period: 30 },
            ..TrainConfig::default()
        };
        assert_eq!(schedule_lr(&cosine, 30), 1e-2);
        assert!((schedule_lr(&cosine, 15) - 5e-3).abs() < 1e-15);
    }

    #[test]
    fn clip_examples() {
        let mut g = vec![6.0, 8.0];
        assert_eq!(clip_grad_norm(&mut g, 5.0), 10.0);
        assert_eq!(g, vec![3.0, 4.0]);
        let mut g = vec![0.0, 3.0];
        clip_grad_norm(&mut g, 5.0);
        assert_eq!(g, vec![0.0, 3.0]);
        let mut g = vec![0.0; 4];
        clip_grad_norm(&mut g, 5.0);
        assert_eq!(g, vec![0.0; 4]);
    }

    fn layout() -> ParamLayout {
        use crate::spiking::LayerSlots;
        ParamLayout {
            layers: vec![LayerSlots {
                weights: 0..2,
                beta: 2,
                threshold: 3,
            }],
            readout_weights: 4..5,
            readout_bias: None,
            len: 5,
        }
    }

    #[test]
    fn projection_examples() {
        let mut p = vec![5.0, -5.0, 1.2, -0.1, 9.0];
        project_flat(&mut p, &layout());
        assert_eq!(p, vec![5.0, -5.0, 1.0, 0.0, 9.0]);
        let mut p = vec![0.0, 0.0, 0.4, 0.2, 0.0];
        project_flat(&mut p, &layout());
        assert_eq!(p, vec![0.0, 0.0, 0.4, 0.2, 0.0]);
    }

    proptest! {
        #[test]
        fn projection_always_lands_in_range(beta in -10.0..10.0f64, b in -10.0..10.0f64) {
            let mut p = vec![0.0, 0.0, beta, b, 0.0];
            project_flat(&mut p, &layout());
            prop_assert!((0.0..=1.0).contains(&p[2]));
            prop_assert!(p[3] >= 0.0);
        }

        #[test]
        fn clipping_bounds_norm_and_keeps_direction(g in proptest::collection::vec(-20.0..20.0f64, 1..20)) {
            let mut c = g.clone();
            clip_grad_norm(&mut c, 5.0);
            let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(norm <= 5.0 + 1e-9);
            let dot: f64 = g.iter().zip(&c).map(|(a, b)| a * b).sum();
            let ng = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if ng > 0.0 && norm > 0.0 {
                prop_assert!((dot / (ng * norm) - 1.0).abs() < 1e-9);
            }
        }
    }
}
