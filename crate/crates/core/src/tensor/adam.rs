use super::{Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for a list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected ADAM update of `params` in place.
    pub fn step(
        &mut self,
        params: &mut [Tensor],
        grads: &[Tensor],
        cfg: &AdamConfig,
    ) -> Result<(), TensorError> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(TensorError::shape(
                "adam_step",
                format!(
                    "{} params, {} grads, {} state slots",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(TensorError::shape(
                    "adam_step",
                    format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pi, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = vec![Tensor::from_fn(&[3], |i| i as f64)];
        let before = params.clone();
        let mut state = AdamState::new(&params);
        state
            .step(&mut params, &[Tensor::zeros(&[3])], &AdamConfig::default())
            .unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = AdamConfig {
            lr: 0.01,
            ..Default::default()
        };
        for g in [3.0, -0.2, 1e3] {
            let mut params = vec![Tensor::zeros(&[1])];
            let mut state = AdamState::new(&params);
            state
                .step(&mut params, &[Tensor::filled(&[1], g)], &cfg)
                .unwrap();
            // m_hat = g, v_hat = g^2: update = lr * g / (|g| + eps).
            let expected = -cfg.lr * g / (g.abs() + cfg.eps);
            assert!((params[0].data()[0] - expected).abs() < 1e-12);
            assert!((params[0].data()[0].abs() - cfg.lr).abs() < 1e-8);
        }
    }

    #[test]
    fn converges_on_quadratic() {
        // f = 0.5 (x - x*)^T A (x - x*) with an anisotropic A.
        let target = [1.5, -2.0];
        let a = [[3.0, 0.5], [0.5, 1.0]];
        let mut params = vec![Tensor::zeros(&[2])];
        let mut state = AdamState::new(&params);
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        for _ in 0..200 {
            let x = params[0].data();
            let d = [x[0] - target[0], x[1] - target[1]];
            let g = Tensor::from_fn(&[2], |i| a[i][0] * d[0] + a[i][1] * d[1]);
            state.step(&mut params, &[g], &cfg).unwrap();
        }
        let x = params[0].data();
        let err = ((x[0] - target[0]).powi(2) + (x[1] - target[1]).powi(2)).sqrt();
        assert!(err < 1e-2, "{err}");
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut params = vec![Tensor::zeros(&[2])];
        let mut state = AdamState::new(&params);
        let err = state.step(&mut params, &[Tensor::zeros(&[3])], &AdamConfig::default());
        assert!(err.is_err());
    }
}
