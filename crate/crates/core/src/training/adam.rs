//! Adam optimizer over a parameter set.

use ndarray::ArrayD;

use crate::autodiff::{ParamSet, Real};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First/second moment state, one pair per parameter tensor.
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Adam<T> {
        Adam {
            config,
            step: 0,
            m: params.ids().map(|id| ArrayD::zeros(params.value(id).raw_dim())).collect(),
            v: params.ids().map(|id| ArrayD::zeros(params.value(id).raw_dim())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update with gradients aligned to the parameter order.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[ArrayD<T>]) {
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64(self.config.beta1);
        let b2 = T::from_f64(self.config.beta2);
        let one = T::one();
        let lr = T::from_f64(self.config.learning_rate);
        let eps = T::from_f64(self.config.epsilon);
        let bc1 = one - T::from_f64(self.config.beta1.powi(t));
        let bc2 = one - T::from_f64(self.config.beta2.powi(t));

        for (idx, id) in params.ids().enumerate().map(|(i, _)| i).zip(params.ids().collect::<Vec<_>>()) {
            let g = grads[idx].as_slice().expect("standard layout");
            let m = self.m[idx].as_slice_mut().expect("standard layout");
            let v = self.v[idx].as_slice_mut().expect("standard layout");
            let p = params.value_mut(id).as_slice_mut().expect("standard layout");
            for k in 0..g.len() {
                m[k] = b1 * m[k] + (one - b1) * g[k];
                v[k] = b2 * v[k] + (one - b2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] = p[k] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    /// One step against the textbook update formula, computed by hand.
    #[test]
    fn single_step_matches_scalar_formula() {
        let mut params = ParamSet::<f64>::new();
        let id = params.add("theta", ArrayD::from_elem(IxDyn(&[1]), 2.0));
        let config = AdamConfig { learning_rate: 0.1, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 };
        let mut opt = Adam::new(config, &params);

        let g = 0.4f64;
        opt.step(&mut params, &[ArrayD::from_elem(IxDyn(&[1]), g)]);

        let m = 0.1 * g;
        let v = 0.001 * g * g;
        let m_hat = m / (1.0 - 0.9f64);
        let v_hat = v / (1.0 - 0.999f64);
        let expect = 2.0 - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        let got = params.value(id)[[0]];
        assert!((got - expect).abs() <= 1e-9, "{got} vs {expect}");

        // Second step, still by hand.
        let g2 = -0.2f64;
        opt.step(&mut params, &[ArrayD::from_elem(IxDyn(&[1]), g2)]);
        let m2 = 0.9 * m + 0.1 * g2;
        let v2 = 0.999 * v + 0.001 * g2 * g2;
        let m_hat2 = m2 / (1.0 - 0.9f64.powi(2));
        let v_hat2 = v2 / (1.0 - 0.999f64.powi(2));
        let expect2 = expect - 0.1 * m_hat2 / (v_hat2.sqrt() + 1e-8);
        let got2 = params.value(id)[[0]];
        assert!((got2 - expect2).abs() <= 1e-9, "{got2} vs {expect2}");
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bit_identical() {
        let mut params = ParamSet::<f32>::new();
        let id = params.add("w", ArrayD::from_shape_fn(IxDyn(&[4, 3]), |ix| (ix[0] * 3 + ix[1]) as f32 * 0.37));
        let before = params.value(id).clone();
        let config = AdamConfig { learning_rate: 0.0, ..AdamConfig::default() };
        let mut opt = Adam::new(config, &params);
        for _ in 0..5 {
            opt.step(&mut params, &[ArrayD::from_elem(IxDyn(&[4, 3]), 1.5f32)]);
        }
        let after = params.value(id);
        for (a, b) in before.iter().zip(after.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
