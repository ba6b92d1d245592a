use ndarray::Array2;

use super::loss::Gradients;
use crate::adapter::{AdapterParams, Tower};

/// Adam with bias correction over every adapter parameter, `log_tau` included.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: [Array2<f64>; 3],
    v: [Array2<f64>; 3],
    m_tau: f64,
    v_tau: f64,
}

impl Adam {
    pub fn new(dim: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: std::array::from_fn(|_| Array2::zeros((dim, dim))),
            v: std::array::from_fn(|_| Array2::zeros((dim, dim))),
            m_tau: 0.0,
            v_tau: 0.0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, params: &mut AdapterParams, g: &Gradients) {
        self.step += 1;
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        for (k, t) in Tower::ALL.into_iter().enumerate() {
            let grad = g.matrix(t);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            ndarray::Zip::from(params.matrix_mut(t)).and(m).and(v).and(grad).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
        self.m_tau = b1 * self.m_tau + (1.0 - b1) * g.log_tau;
        self.v_tau = b2 * self.v_tau + (1.0 - b2) * g.log_tau * g.log_tau;
        params.log_tau -= lr * (self.m_tau / c1) / ((self.v_tau / c2).sqrt() + eps);
    }
}
