use super::{same_shape, ParamStore, Real, Tensor};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for one [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F> {
    pub config: AdamConfig,
    pub step_count: u64,
    pub first_moment: Vec<Tensor<F>>,
    pub second_moment: Vec<Tensor<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &ParamStore<F>, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor<F>> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState {
            config,
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// One update of every parameter from its gradient.
    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &[Tensor<F>]) -> Result<()> {
        if grads.len() != params.len() || self.first_moment.len() != params.len() {
            return Err(crate::Error::shape(
                "adam_step",
                format!("{} params, {} grads, {} moments", params.len(), grads.len(), self.first_moment.len()),
            ));
        }
        for ((p, g), m) in params.tensors().iter().zip(grads).zip(&self.first_moment) {
            same_shape("adam_step", p.shape(), g.shape())?;
            same_shape("adam_step", p.shape(), m.shape())?;
        }
        self.step_count += 1;
        let c = self.config;
        let t = self.step_count as i32;
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let (one_b1, one_b2) = (F::one() - b1, F::one() - b2);
        let corr1 = F::of(1.0 - c.beta1.powi(t));
        let corr2 = F::of(1.0 - c.beta2.powi(t));
        let lr = F::of(c.learning_rate);
        let eps = F::of(c.epsilon);
        for (i, g) in grads.iter().enumerate() {
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            let p = params.tensors_mut()[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + one_b1 * gj;
                v[j] = b2 * v[j] + one_b2 * gj * gj;
                let m_hat = m[j] / corr1;
                let v_hat = v[j] / corr2;
                p[j] = p[j] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (i, &v) in values.iter().enumerate() {
            s.add(format!("p{i}"), Tensor::from_f64(&[1], &[v]).unwrap());
        }
        s
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut params = store(&[1.5, -2.0]);
        let before = params.clone();
        let mut adam = AdamState::new(&params, AdamConfig::default());
        let zeros = vec![Tensor::zeros(&[1]), Tensor::zeros(&[1])];
        adam.step(&mut params, &zeros).unwrap();
        assert_eq!(params, before);
        assert!(adam.first_moment.iter().chain(&adam.second_moment).all(|m| m.item() == 0.0));
        assert_eq!(adam.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = store(&[3.0]);
        let config = AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        };
        let mut adam = AdamState::new(&params, config);
        adam.step(&mut params, &[Tensor::from_f64(&[1], &[1.0]).unwrap()]).unwrap();
        // m̂ = v̂ = 1, so the step is lr / (1 + eps).
        assert!((params.tensors()[0].item() - (3.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn parameters_update_independently() {
        let mut joint = store(&[1.0, 2.0]);
        let mut adam = AdamState::new(&joint, AdamConfig::default());
        let g = |v: f64| Tensor::from_f64(&[1], &[v]).unwrap();
        adam.step(&mut joint, &[g(0.5), g(-3.0)]).unwrap();

        for (i, (start, grad)) in [(1.0, 0.5), (2.0, -3.0)].into_iter().enumerate() {
            let mut single = store(&[start]);
            let mut a = AdamState::new(&single, AdamConfig::default());
            a.step(&mut single, &[g(grad)]).unwrap();
            assert_eq!(single.tensors()[0].item(), joint.tensors()[i].item());
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut params = store(&[1.0]);
        let mut adam = AdamState::new(&params, AdamConfig::default());
        assert!(adam.step(&mut params, &[Tensor::zeros(&[2])]).is_err());
        assert!(adam.step(&mut params, &[]).is_err());
        assert_eq!(adam.step_count, 0);
    }
}
