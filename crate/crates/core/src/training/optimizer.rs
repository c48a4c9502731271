use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Parameters;

/// Adam moments per parameter tensor plus the number of completed updates.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn for_params<P: Parameters>(params: &P) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .parameters()
            .iter()
            .map(|t| vec![0.0; t.len()])
            .collect();
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
        }
    }
}

/// Adam with weight decay applied directly to the weights rather than
/// through the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamW {
    /// One update at learning rate `lr`. `grads` must mirror `params`.
    pub fn step<P: Parameters>(
        &self,
        params: &mut P,
        grads: &P,
        state: &mut OptimizerState,
        lr: f64,
    ) -> Result<()> {
        let grads = grads.parameters();
        let mut tensors = params.parameters_mut();
        let shapes_match = tensors.len() == grads.len()
            && state.first_moment.len() == grads.len()
            && state.second_moment.len() == grads.len()
            && tensors
                .iter()
                .zip(&grads)
                .zip(&state.first_moment)
                .all(|((p, g), m)| p.len() == g.len() && m.len() == g.len());
        if !shapes_match {
            return Err(Error::InvalidInput(
                "parameter, gradient and optimizer-state shapes differ".into(),
            ));
        }
        state.step += 1;
        let t = state.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        for (((p, g), m), v) in tensors
            .iter_mut()
            .zip(&grads)
            .zip(&mut state.first_moment)
            .zip(&mut state.second_moment)
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p[i] = p[i] * decay - lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Linear ramp from 0 to `peak` over the warmup steps, then linear decay to
/// 0 at `total_steps`. `step` counts completed updates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearWarmup {
    pub peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LinearWarmup {
    pub fn new(peak: f64, warmup_fraction: f64, total_steps: u64) -> Self {
        Self {
            peak,
            warmup_steps: (warmup_fraction * total_steps as f64).ceil() as u64,
            total_steps,
        }
    }

    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        self.peak * (self.total_steps.saturating_sub(step) as f64 / span as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Linear;
    use crate::numerics::Matrix;

    #[derive(Clone)]
    struct Scalar(Vec<f64>);

    impl Parameters for Scalar {
        fn parameters(&self) -> Vec<&[f64]> {
            vec![&self.0]
        }
        fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn scalar_update_matches_hand_stepped_oracle() {
        let opt = AdamW {
            weight_decay: 0.01,
            ..AdamW::default()
        };
        let mut p = Scalar(vec![1.0]);
        let mut state = OptimizerState::for_params(&p);
        let expected = [
            0.89900000199999996,
            0.87895119893977505,
            0.81771861248192636,
        ];
        for (g, want) in [0.5, -0.3, 0.8].into_iter().zip(expected) {
            opt.step(&mut p, &Scalar(vec![g]), &mut state, 0.1).unwrap();
            assert!((p.0[0] - want).abs() < 1e-12, "{} vs {want}", p.0[0]);
        }
        assert_eq!(state.step, 3);
    }

    #[test]
    fn zero_gradients_without_decay_leave_params() {
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        let mut lin = Linear::new(Matrix::from_rows(&[[0.3, -0.7]]).unwrap(), vec![0.25]).unwrap();
        let before = lin.clone();
        let zero = Linear::zeros(2, 1);
        let mut state = OptimizerState::for_params(&lin);
        for _ in 0..5 {
            opt.step(&mut lin, &zero, &mut state, 1e-2).unwrap();
        }
        assert_eq!(lin, before);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut lin = Linear::zeros(2, 1);
        let mut state = OptimizerState::for_params(&lin);
        let err = AdamW::default().step(&mut lin, &Linear::zeros(3, 1), &mut state, 0.1);
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn schedule_endpoints() {
        let s = LinearWarmup::new(2e-3, 0.1, 100);
        assert_eq!(s.warmup_steps, 10);
        assert_eq!(s.lr(0), 0.0);
        assert!((s.lr(5) - 1e-3).abs() < 1e-15);
        assert!((s.lr(10) - 2e-3).abs() < 1e-12);
        assert!((s.lr(55) - 1e-3).abs() < 1e-12);
        assert!(s.lr(100).abs() < 1e-12);
        let flat = LinearWarmup::new(1.0, 0.0, 4);
        assert_eq!(flat.lr(0), 1.0);
        let all_warm = LinearWarmup::new(1.0, 1.0, 4);
        assert_eq!(all_warm.lr(4), 0.0);
    }
}
