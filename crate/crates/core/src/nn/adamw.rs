use crate::error::{Error, Result};
use crate::math;
use crate::nn::params::ParamSet;

/// AdamW with decoupled weight decay and bias correction.
#[derive(Debug, Clone, Copy)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(lr: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    /// One update over every parameter, then zeroes the gradient buffers.
    ///
    /// Rejects the whole step (parameters untouched, gradients kept for
    /// inspection) if any gradient is non-finite.
    pub fn step(&self, params: &mut ParamSet) -> Result<()> {
        for p in params.entries() {
            if !math::all_finite(&p.grad) {
                return Err(Error::NonFinite(alloc::format!(
                    "gradient of parameter {:?} is NaN/Inf; step rejected",
                    p.name
                )));
            }
        }
        let t = params.bump_step();
        let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
        let lr = self.lr;
        let wd = self.weight_decay;
        for p in params.entries_mut() {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                p.m[i] = self.beta1 * p.m[i] + (1.0 - self.beta1) * g;
                p.v[i] = self.beta2 * p.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = p.m[i] / bc1;
                let v_hat = p.v[i] / bc2;
                p.value[i] -= lr * (m_hat / (math::sqrt(v_hat) + self.eps) + wd * p.value[i]);
            }
            p.grad.fill(0.0);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Init;
    use crate::rng::Rng;

    fn single_param(theta: f64) -> ParamSet {
        let mut rng = Rng::new(0);
        let mut ps = ParamSet::new();
        ps.register("theta", &[1], Init::Zeros, &mut rng).unwrap();
        let id = ps.id("theta").unwrap();
        ps.value_mut(id)[0] = theta;
        ps
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut ps = single_param(1.5);
        let id = ps.id("theta").unwrap();
        AdamW::new(0.1).step(&mut ps).unwrap();
        assert_eq!(ps.value(id)[0], 1.5);
    }

    #[test]
    fn first_step_is_bias_corrected_sign_step() {
        let mut ps = single_param(1.0);
        let id = ps.id("theta").unwrap();
        ps.grad_mut(id)[0] = 1.0;
        AdamW::new(0.1).step(&mut ps).unwrap();
        // m_hat = v_hat = 1 after bias correction, so theta -> 1 - 0.1/(1+eps)
        assert!((ps.value(id)[0] - 0.9).abs() < 1e-8);
        assert_eq!(ps.grad(id)[0], 0.0, "gradients zeroed after step");
    }

    #[test]
    fn decoupled_decay_is_exact() {
        let mut ps = single_param(2.0);
        let id = ps.id("theta").unwrap();
        let opt = AdamW::new(0.1).with_weight_decay(0.01);
        opt.step(&mut ps).unwrap();
        assert_eq!(ps.value(id)[0], 2.0 * (1.0 - 0.1 * 0.01));
    }

    #[test]
    fn zero_lr_leaves_parameters_bitwise_unchanged() {
        let mut ps = single_param(0.7531);
        let id = ps.id("theta").unwrap();
        ps.grad_mut(id)[0] = -3.3;
        AdamW::new(0.0).with_weight_decay(0.1).step(&mut ps).unwrap();
        assert_eq!(ps.value(id)[0].to_bits(), 0.7531f64.to_bits());
    }

    #[test]
    fn non_finite_gradient_rejected_with_name() {
        let mut ps = single_param(1.0);
        let id = ps.id("theta").unwrap();
        ps.grad_mut(id)[0] = f64::NAN;
        let err = AdamW::new(0.1).step(&mut ps).unwrap_err();
        match err {
            Error::NonFinite(msg) => assert!(msg.contains("theta")),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(ps.value(id)[0], 1.0);
        assert_eq!(ps.step(), 0, "rejected step does not advance the counter");
    }
}
