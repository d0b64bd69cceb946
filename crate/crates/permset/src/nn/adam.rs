use super::tensor::Tensor;
use super::NnError;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// L2 regularization strength; the gradient is augmented by
    /// `2 * weight_decay * param` before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Bias-corrected Adam with per-tensor first/second moment accumulators.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    moments1: Vec<Tensor>,
    moments2: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            moments1: Vec::new(),
            moments2: Vec::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Moment accumulators in parameter order, for checkpointing.
    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.moments1, &self.moments2)
    }

    pub fn restore(&mut self, moments1: Vec<Tensor>, moments2: Vec<Tensor>, step: u64) {
        self.moments1 = moments1;
        self.moments2 = moments2;
        self.step = step;
    }

    /// One update over all (parameter, gradient) pairs. Pairs must be passed
    /// in the same order on every call.
    pub fn step(&mut self, pairs: &mut [(&mut Tensor, &mut Tensor)]) -> Result<(), NnError> {
        if self.moments1.is_empty() {
            self.moments1 = pairs.iter().map(|(p, _)| Tensor::zeros(p.shape())).collect();
            self.moments2 = self.moments1.clone();
        }
        if self.moments1.len() != pairs.len() {
            return Err(NnError::ParamShapeMismatch {
                expected: vec![self.moments1.len()],
                got: vec![pairs.len()],
            });
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);

        for (idx, (param, grad)) in pairs.iter_mut().enumerate() {
            if param.shape() != grad.shape() || param.shape() != self.moments1[idx].shape() {
                return Err(NnError::ParamShapeMismatch {
                    expected: param.shape().to_vec(),
                    got: grad.shape().to_vec(),
                });
            }
            let m = self.moments1[idx].data_mut();
            let v = self.moments2[idx].data_mut();
            let p = param.data_mut();
            let g = grad.data();
            for i in 0..p.len() {
                let gi = g[i] + 2.0 * c.weight_decay * p[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= c.learning_rate * mh / (vh.sqrt() + c.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs_of<'a>(
        params: &'a mut [Tensor],
        grads: &'a mut [Tensor],
    ) -> Vec<(&'a mut Tensor, &'a mut Tensor)> {
        params.iter_mut().zip(grads.iter_mut()).collect()
    }

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let mut opt = AdamState::new(AdamConfig::default());
        let mut params = vec![Tensor::vector(vec![1.0, -2.0, 0.5])];
        let before = params[0].clone();
        let mut grads = vec![Tensor::zeros(&[3])];
        for _ in 0..10 {
            opt.step(&mut pairs_of(&mut params, &mut grads)).unwrap();
        }
        assert_eq!(params[0], before);
        assert_eq!(opt.step_count(), 10);
    }

    #[test]
    fn single_step_matches_closed_form() {
        // fresh state, one step: m_hat = g, v_hat = g^2,
        // delta = -lr * g / (|g| + eps)
        let cfg = AdamConfig::default();
        let mut opt = AdamState::new(cfg);
        let g = [0.3, -1.7, 0.002];
        let mut params = vec![Tensor::vector(vec![1.0, 2.0, 3.0])];
        let mut grads = vec![Tensor::vector(g.to_vec())];
        opt.step(&mut pairs_of(&mut params, &mut grads)).unwrap();
        for (i, &gi) in g.iter().enumerate() {
            let expect = [1.0, 2.0, 3.0][i] - cfg.learning_rate * gi / (gi.abs() + cfg.epsilon);
            assert!(
                (params[0].data()[i] - expect).abs() < 1e-15,
                "param {i}: {} vs {expect}",
                params[0].data()[i]
            );
        }
    }

    #[test]
    fn pure_decay_shrinks_parameter() {
        let mut cfg = AdamConfig::default();
        cfg.weight_decay = 0.0001;
        let mut opt = AdamState::new(cfg);
        let mut params = vec![Tensor::vector(vec![1.0])];
        let mut grads = vec![Tensor::zeros(&[1])];
        opt.step(&mut pairs_of(&mut params, &mut grads)).unwrap();
        assert!(params[0].data()[0] < 1.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut opt = AdamState::new(AdamConfig::default());
        let mut params = vec![Tensor::zeros(&[3])];
        let mut grads = vec![Tensor::zeros(&[2])];
        assert!(opt.step(&mut pairs_of(&mut params, &mut grads)).is_err());
    }
}
