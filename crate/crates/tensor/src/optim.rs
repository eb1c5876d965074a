use crate::{Scalar, Tensor};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
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

/// Adam state for an ordered list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self {
            config,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// One bias-corrected update. `grads[i] == None` leaves parameter `i` and
    /// its moments untouched.
    pub fn update(&mut self, params: &mut [Tensor<T>], grads: &[Option<&Tensor<T>>]) {
        assert_eq!(params.len(), grads.len(), "adam: parameter/gradient count");
        assert_eq!(params.len(), self.first_moment.len(), "adam: state size");
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let step_size = T::lit(c.lr / bc1);
        let bc2_sqrt = T::lit(bc2.sqrt());
        let eps = T::lit(c.eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            assert_eq!(p.shape(), g.shape(), "adam: gradient shape for parameter {i}");
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *p -= step_size * *m / (v.sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        let mut params = vec![Tensor::<f64>::new(vec![2], vec![1.0, -1.0]).unwrap()];
        let g = Tensor::new(vec![2], vec![3.0, -0.5]).unwrap();
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &params);
        opt.update(&mut params, &[Some(&g)]);
        let p = params[0].data();
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut params = vec![Tensor::<f64>::new(vec![1], vec![5.0]).unwrap()];
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &params);
        for _ in 0..500 {
            let g = params[0].map(|x| 2.0 * (x - 2.0));
            opt.update(&mut params, &[Some(&g)]);
        }
        assert!((params[0].item() - 2.0).abs() < 1e-2);
    }

    #[test]
    fn skipped_gradients_leave_params() {
        let mut params = vec![Tensor::<f32>::ones(vec![3])];
        let mut opt = Adam::new(AdamConfig::default(), &params);
        opt.update(&mut params, &[None]);
        assert_eq!(params[0], Tensor::ones(vec![3]));
        assert_eq!(opt.step, 1);
    }
}
