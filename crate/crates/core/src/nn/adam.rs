//! Adam with bias correction; moments are kept in step with a fixed
//! parameter traversal order so optimizer state can be checkpointed.

use super::{Float, Param};
use ndarray::ArrayD;

#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    pub t: u64,
    pub m: Vec<ArrayD<F>>,
    pub v: Vec<ArrayD<F>>,
}

impl<F: Float> Adam<F> {
    pub fn new(lr: f64, betas: (f64, f64), eps: f64) -> Self {
        Self {
            lr: F::of_f64(lr),
            beta1: F::of_f64(betas.0),
            beta2: F::of_f64(betas.1),
            eps: F::of_f64(eps),
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update over `params`; order and count must be stable across calls.
    pub fn step(&mut self, params: &mut [&mut Param<F>]) {
        if self.m.is_empty() {
            self.m = params
                .iter()
                .map(|p| ArrayD::zeros(p.value.raw_dim()))
                .collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "optimizer/parameter set mismatch");
        self.t += 1;
        let t = self.t as i32;
        let bc1 = F::one() - self.beta1.powi(t);
        let bc2 = F::one() - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, mi, vi| {
                    *mi = self.beta1 * *mi + (F::one() - self.beta1) * g;
                    *vi = self.beta2 * *vi + (F::one() - self.beta2) * g * g;
                    let m_hat = *mi / bc1;
                    let v_hat = *vi / bc2;
                    *w = *w - self.lr * m_hat / (v_hat.sqrt() + self.eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction, |step 1| == lr for any nonzero gradient.
        let mut p = Param::new(ndarray::ArrayD::from_elem(vec![2], 1.0f64));
        p.grad.fill(0.3);
        let mut adam = Adam::new(0.01, (0.9, 0.999), 1e-8);
        adam.step(&mut [&mut p]);
        for &v in p.value.iter() {
            assert!((v - (1.0 - 0.01)).abs() < 1e-6, "got {v}");
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Param::new(ndarray::ArrayD::from_elem(vec![1], 5.0f64));
        let mut adam = Adam::new(0.1, (0.5, 0.999), 1e-8);
        for _ in 0..500 {
            p.zero_grad();
            let x = p.value[[0]];
            p.grad[[0]] = 2.0 * x;
            adam.step(&mut [&mut p]);
        }
        assert!(p.value[[0]].abs() < 1e-2);
    }
}
