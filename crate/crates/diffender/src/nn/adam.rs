//! Adam optimizer over flat parameter vectors.

use super::{c, Scalar};

/// Standard Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    lr: F,
    beta1: F,
    beta2: F,
    eps: F,
    m: Vec<F>,
    v: Vec<F>,
    t: u32,
}

impl<F: Scalar> Adam<F> {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Adam {
            lr: c(lr),
            beta1: c(0.9),
            beta2: c(0.999),
            eps: c(1e-8),
            m: vec![F::zero(); n_params],
            v: vec![F::zero(); n_params],
            t: 0,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = c(lr);
    }

    pub fn step(&mut self, params: &mut [F], grads: &[F]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let b1t = F::one() - self.beta1.powi(self.t as i32);
        let b2t = F::one() - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (F::one() - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (F::one() - self.beta2) * g * g;
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] = params[i] - self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        // f(x) = sum((x - 3)^2)
        let mut x = vec![0.0f64; 4];
        let mut opt = Adam::new(4, 0.1);
        for _ in 0..500 {
            let g: Vec<f64> = x.iter().map(|&xi| 2.0 * (xi - 3.0)).collect();
            opt.step(&mut x, &g);
        }
        for &xi in &x {
            assert!((xi - 3.0).abs() < 1e-3, "xi={xi}");
        }
    }
}
