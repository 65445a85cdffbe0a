//! Adam optimizer with bias correction.

use super::{GradMap, Param, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Per-parameter first/second moment estimates, kept parallel to the owning
/// network's parameter order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    step_count: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[&Param]) -> Self {
        let first_moment = params
            .iter()
            .map(|p| Tensor::zeros(p.value().shape().to_vec()))
            .collect();
        let second_moment = params
            .iter()
            .map(|p| Tensor::zeros(p.value().shape().to_vec()))
            .collect();
        Self {
            config,
            step_count: 0,
            first_moment,
            second_moment,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }
}

/// One Adam update over `params`, consuming (and thereby zeroing) the
/// matching gradients in `grads`. Parameters without an accumulated
/// gradient are treated as having zero gradient.
pub fn adam_step(state: &mut AdamState, params: &mut [&mut Param], grads: &mut GradMap) {
    assert_eq!(
        params.len(),
        state.first_moment.len(),
        "adam state does not match the parameter list"
    );
    state.step_count += 1;
    let t = state.step_count;
    let cfg = state.config;
    let bias1 = 1.0 - cfg.beta1.powi(t as i32);
    let bias2 = 1.0 - cfg.beta2.powi(t as i32);

    for (i, param) in params.iter_mut().enumerate() {
        let grad = grads.take(param);
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        param.update(|tensor| {
            let data = tensor.data_mut();
            for j in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |t| t.data()[j]);
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                data[j] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = Param::new("w", Tensor::vector(vec![1.0, -2.0]));
        let mut state = AdamState::new(AdamConfig::default(), &[&p]);
        let mut grads = GradMap::new();
        adam_step(&mut state, &mut [&mut p], &mut grads);
        assert_eq!(p.value().data(), &[1.0, -2.0]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        // With constant gradient g the bias-corrected first step moves each
        // coordinate by ~lr * sign(g).
        let lr = 1e-3;
        let mut p = Param::new("w", Tensor::vector(vec![0.0, 0.0]));
        let mut state = AdamState::new(AdamConfig::with_learning_rate(lr), &[&p]);
        let mut grads = GradMap::new();
        let mut g = Graph::new();
        let w = g.param(&p);
        let coeffs = g.vector_input(vec![3.0, -7.0]);
        let prod = g.mul(w, coeffs).unwrap();
        let loss = g.sum(prod);
        g.backward(loss, &mut grads).unwrap();
        adam_step(&mut state, &mut [&mut p], &mut grads);
        let data = p.value().data();
        assert!((data[0] + lr).abs() < lr * 1e-6, "step was {}", data[0]);
        assert!((data[1] - lr).abs() < lr * 1e-6, "step was {}", data[1]);
        assert!(grads.is_empty(), "adam_step must drain gradients");
    }

    #[test]
    fn quadratic_bowl_converges() {
        // min sum((x - c)^2) at lr 1e-2 must reach < 1e-6 within 5000 steps.
        let target = [1.5, -0.75, 4.0];
        let mut p = Param::new("x", Tensor::vector(vec![0.0, 0.0, 0.0]));
        let mut state = AdamState::new(AdamConfig::with_learning_rate(1e-2), &[&p]);
        let mut grads = GradMap::new();
        let mut loss_value = f64::INFINITY;
        for _ in 0..5000 {
            let mut g = Graph::new();
            let x = g.param(&p);
            let c = g.vector_input(target.to_vec());
            let d = g.sub(x, c).unwrap();
            let sq = g.mul(d, d).unwrap();
            let loss = g.sum(sq);
            loss_value = g.scalar_value(loss);
            if loss_value < 1e-6 {
                break;
            }
            g.backward(loss, &mut grads).unwrap();
            adam_step(&mut state, &mut [&mut p], &mut grads);
        }
        assert!(loss_value < 1e-6, "final loss {loss_value}");
    }
}
