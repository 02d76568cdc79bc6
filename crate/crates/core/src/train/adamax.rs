//! Adamax (infinity-norm Adam variant) with decoupled weight decay and the
//! linear warm-up / linear decay learning-rate schedule.

use crate::error::{Error, Result};
use crate::model::{ModelParams, ParamKind};
use crate::tensor::{ParameterGroup, Scalar, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct AdamaxConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Decoupled decay (`theta -= lr * wd * theta` after the adaptive
    /// update); the coupled variant adds `wd * theta` to the gradient
    /// instead. Norm gains and biases are never decayed.
    pub decoupled: bool,
}

impl Default for AdamaxConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            decoupled: true,
        }
    }
}

/// Per-parameter state: first moment `m` and infinity-norm accumulator `u`.
#[derive(Debug, Clone)]
pub struct TensorState<T> {
    pub name: String,
    pub first_moment: Tensor<T>,
    pub inf_norm: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct Adamax<T> {
    pub config: AdamaxConfig,
    pub step_count: usize,
    pub state: Vec<TensorState<T>>,
}

impl<T: Scalar> Adamax<T> {
    pub fn new(config: AdamaxConfig) -> Self {
        Self {
            config,
            step_count: 0,
            state: Vec::new(),
        }
    }

    fn ensure_state(&mut self, params: &ModelParams<T>) {
        if !self.state.is_empty() {
            return;
        }
        params.visit(|name, tensor, _| {
            self.state.push(TensorState {
                name,
                first_moment: Tensor::zeros(tensor.rows(), tensor.cols()),
                inf_norm: Tensor::zeros(tensor.rows(), tensor.cols()),
            });
        });
    }

    /// One update:
    /// `m <- b1*m + (1-b1)*g; u <- max(b2*u, |g|);`
    /// `theta <- theta - lr/(1-b1^t) * m/(u+eps)`, plus weight decay.
    pub fn step(
        &mut self,
        params: &mut ModelParams<T>,
        grads: &ParameterGroup<T>,
        lr: f64,
    ) -> Result<()> {
        self.ensure_state(params);
        self.step_count += 1;

        let b1 = T::from_f64(self.config.beta1);
        let b2 = T::from_f64(self.config.beta2);
        let one_minus_b1 = T::one() - b1;
        let eps = T::from_f64(self.config.epsilon);
        let bias_correction = 1.0 - self.config.beta1.powi(self.step_count as i32);
        let lr_t = T::from_f64(lr / bias_correction);
        let wd = T::from_f64(self.config.weight_decay);
        let lr_wd = T::from_f64(lr * self.config.weight_decay);
        let decoupled = self.config.decoupled;
        let decay_enabled = self.config.weight_decay != 0.0;

        let mut slot = 0usize;
        let mut missing: Option<String> = None;
        let state = &mut self.state;
        params.visit_mut(|name, theta, kind| {
            if missing.is_some() {
                return;
            }
            let entry = &mut state[slot];
            debug_assert_eq!(entry.name, name);
            slot += 1;
            let grad = match grads.get(name) {
                Some(g) => g,
                None => {
                    missing = Some(name.to_string());
                    return;
                }
            };
            let decay_this = decay_enabled && kind != ParamKind::Norm;
            let m = entry.first_moment.data_mut();
            let u = entry.inf_norm.data_mut();
            let t = theta.data_mut();
            for i in 0..t.len() {
                let mut g = grad.data()[i];
                if decay_this && !decoupled {
                    g += wd * t[i];
                }
                m[i] = b1 * m[i] + one_minus_b1 * g;
                u[i] = (b2 * u[i]).max(g.abs());
                t[i] -= lr_t * m[i] / (u[i] + eps);
                if decay_this && decoupled {
                    t[i] -= lr_wd * t[i];
                }
            }
        });

        match missing {
            Some(name) => Err(Error::Config(format!("no gradient for parameter {name:?}"))),
            None => Ok(()),
        }
    }
}

/// Linear warm-up from 0 to `base_lr` over the first
/// `ceil(warmup_fraction * total_steps)` steps, then linear decay back to 0
/// at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, base_lr: f64, warmup_fraction: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let warmup = ((total_steps as f64) * warmup_fraction).ceil() as usize;
    let warmup = warmup.clamp(1, total_steps);
    if step < warmup {
        base_lr * step as f64 / warmup as f64
    } else if step >= total_steps {
        0.0
    } else if total_steps == warmup {
        base_lr
    } else {
        base_lr * (total_steps - step) as f64 / (total_steps - warmup) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;

    fn tiny_dims() -> ModelDims {
        ModelDims {
            width: 4,
            heads: 2,
            hidden: 8,
            encoder_units: 1,
            mixer_units: 1,
            max_neighbors: 2,
            entities: 3,
            base_relations: 2,
            times: 2,
            ln_eps: 1e-5,
        }
    }

    fn zero_grads(params: &ModelParams<f64>) -> ParameterGroup<f64> {
        let mut g = ParameterGroup::new();
        params.visit(|name, t, _| g.push(name, Tensor::zeros(t.rows(), t.cols()), true));
        g
    }

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let mut params = ModelParams::<f64>::init(tiny_dims(), 1).unwrap();
        let before = params.to_group();
        let grads = zero_grads(&params);
        let mut opt = Adamax::new(AdamaxConfig::default());
        opt.step(&mut params, &grads, 0.01).unwrap();
        let after = params.to_group();
        for (b, a) in before.entries().iter().zip(after.entries()) {
            assert_eq!(b.tensor, a.tensor, "{}", b.name);
        }
    }

    #[test]
    fn first_step_is_sign_like() {
        let mut params = ModelParams::<f64>::init(tiny_dims(), 2).unwrap();
        let before = params.to_group();
        let mut grads = zero_grads(&params);
        let g = grads.get_mut("semantic").unwrap();
        g.set(0, 0, 0.5);
        g.set(0, 1, -0.25);

        let mut opt = Adamax::new(AdamaxConfig::default());
        let lr = 0.1;
        opt.step(&mut params, &grads, lr).unwrap();

        let b = before.get("semantic").unwrap();
        let a = params.semantic.clone();
        // theta -= lr * g/(|g|+eps) ~ lr * sign(g)
        assert!((a.get(0, 0) - (b.get(0, 0) - lr)).abs() < 1e-6);
        assert!((a.get(0, 1) - (b.get(0, 1) + lr)).abs() < 1e-6);
        assert_eq!(a.get(0, 2), b.get(0, 2));
    }

    #[test]
    fn weight_decay_with_zero_lr_is_identity() {
        let mut params = ModelParams::<f64>::init(tiny_dims(), 3).unwrap();
        let before = params.to_group();
        let mut grads = zero_grads(&params);
        grads.get_mut("semantic").unwrap().set(0, 0, 1.0);
        let mut opt = Adamax::new(AdamaxConfig {
            weight_decay: 0.01,
            ..AdamaxConfig::default()
        });
        opt.step(&mut params, &grads, 0.0).unwrap();
        let after = params.to_group();
        for (b, a) in before.entries().iter().zip(after.entries()) {
            assert_eq!(b.tensor, a.tensor, "{}", b.name);
        }
    }

    #[test]
    fn five_steps_match_hand_rolled_trace() {
        // Minimize f(theta) = theta^2 with gradient 2*theta, one scalar
        // parameter, tracked against a manual Adamax recurrence.
        let dims = tiny_dims();
        let mut params = ModelParams::<f64>::init(dims, 4).unwrap();
        // Use one coordinate of the semantic table as "the" parameter; all
        // other gradients stay zero so only it moves.
        params.semantic.set(0, 0, 0.7);

        let (beta1, beta2, eps, lr) = (0.9, 0.999, 1e-8, 0.05);
        let mut opt = Adamax::new(AdamaxConfig {
            beta1,
            beta2,
            epsilon: eps,
            weight_decay: 0.0,
            decoupled: true,
        });

        let mut expected = 0.7f64;
        let mut m = 0.0f64;
        let mut u = 0.0f64;
        for step in 1..=5 {
            let mut grads = zero_grads(&params);
            let g = 2.0 * params.semantic.get(0, 0);
            grads.get_mut("semantic").unwrap().set(0, 0, g);
            opt.step(&mut params, &grads, lr).unwrap();

            let ge = 2.0 * expected;
            m = beta1 * m + (1.0 - beta1) * ge;
            u = (beta2 * u).max(ge.abs());
            expected -= lr / (1.0 - beta1.powi(step)) * m / (u + eps);

            assert!(
                (params.semantic.get(0, 0) - expected).abs() < 1e-12,
                "step {step}"
            );
        }
    }

    #[test]
    fn schedule_matches_closed_form() {
        let total = 100;
        let base = 0.01;
        let frac = 0.10;
        // Warmup spans ceil(0.1 * 100) = 10 steps.
        assert_eq!(lr_schedule(0, total, base, frac), 0.0);
        assert!((lr_schedule(5, total, base, frac) - base * 0.5).abs() < 1e-15);
        assert!((lr_schedule(10, total, base, frac) - base).abs() < 1e-15);
        for (step, want) in [
            (10usize, 1.0f64),
            (19, 0.9),
            (28, 0.8),
            (37, 0.7),
            (46, 0.6),
            (55, 0.5),
            (64, 0.4),
            (73, 0.3),
            (82, 0.2),
            (100, 0.0),
        ] {
            let expected = base * want;
            assert!(
                (lr_schedule(step, total, base, frac) - expected).abs() < 1e-15,
                "step {step}"
            );
        }
    }
}
