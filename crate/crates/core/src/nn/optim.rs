use super::model::Parameterized;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, params: &[&Tensor]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn for_target<P: Parameterized + ?Sized>(lr: f64, target: &P) -> Self {
        Self::new(lr, &target.parameters())
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<P: Parameterized + ?Sized>(&mut self, target: &mut P, grads: &[Tensor]) -> Result<()> {
        if target.is_frozen() {
            return Err(Error::Frozen("optimizer step on a frozen model".into()));
        }
        let mut params = target.parameters_mut();
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "{} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::Shape(format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape())));
            }
            g.check_finite("gradient passed to adam")?;
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let iter = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((pv, &gv), (mv, vv)) in iter {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Scalars(Vec<Tensor>, bool);

    impl Parameterized for Scalars {
        fn parameters(&self) -> Vec<&Tensor> {
            self.0.iter().collect()
        }
        fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
            self.0.iter_mut().collect()
        }
        fn parameter_names(&self) -> Vec<String> {
            (0..self.0.len()).map(|i| format!("p{i}")).collect()
        }
        fn is_frozen(&self) -> bool {
            self.1
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = Scalars(vec![Tensor::vector(vec![1.5, -2.0])], false);
        let mut opt = Adam::for_target(0.1, &s);
        opt.step(&mut s, &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(s.0[0].data(), &[1.5, -2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = Scalars(vec![Tensor::vector(vec![1.0])], false);
        let mut opt = Adam::for_target(0.1, &s);
        opt.step(&mut s, &[Tensor::vector(vec![1.0])]).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((s.0[0].data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn two_steps_decrease_quadratic() {
        // f(p) = (p - 3)^2, gradient 2(p - 3)
        let mut s = Scalars(vec![Tensor::vector(vec![0.0])], false);
        let f = |p: f64| (p - 3.0) * (p - 3.0);
        let mut opt = Adam::for_target(0.1, &s);
        let mut prev = f(0.0);
        for _ in 0..2 {
            let p = s.0[0].data()[0];
            opt.step(&mut s, &[Tensor::vector(vec![2.0 * (p - 3.0)])]).unwrap();
            let now = f(s.0[0].data()[0]);
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn frozen_target_is_rejected() {
        let mut s = Scalars(vec![Tensor::vector(vec![1.0])], true);
        let mut opt = Adam::for_target(0.1, &s);
        let err = opt.step(&mut s, &[Tensor::vector(vec![1.0])]).unwrap_err();
        assert!(matches!(err, Error::Frozen(_)));
        assert_eq!(s.0[0].data(), &[1.0]);
    }
}
