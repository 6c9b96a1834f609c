//! Adam over a flat parameter vector.

use crate::nn::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<R> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<R>,
    pub v: Vec<R>,
}

impl<R: Real> Adam<R> {
    pub fn new(len: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: vec![R::zero(); len],
            v: vec![R::zero(); len],
        }
    }

    pub fn update(&mut self, params: &mut [R], grads: &[R]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let step_size = R::cst(self.lr / bc1);
        let inv_sqrt_bc2 = R::cst(1.0 / bc2.sqrt());
        let (b1, b2) = (R::cst(self.beta1), R::cst(self.beta2));
        let (c1, c2) = (R::cst(1.0 - self.beta1), R::cst(1.0 - self.beta2));
        let eps = R::cst(self.eps);
        for i in 0..params.len() {
            let g = grads[i];
            let m = b1 * self.m[i] + c1 * g;
            let v = b2 * self.v[i] + c2 * g * g;
            self.m[i] = m;
            self.v[i] = v;
            params[i] -= step_size * m / (v.sqrt() * inv_sqrt_bc2 + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = vec![1.0f64, -1.0];
        let mut opt = Adam::new(2, 0.1, 0.9, 0.999, 1e-8);
        opt.update(&mut p, &[3.0, -0.5]);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn zero_gradients_never_move_parameters() {
        let mut p = vec![0.25f32; 4];
        let mut opt = Adam::new(4, 0.1, 0.9, 0.999, 1e-8);
        for _ in 0..10 {
            opt.update(&mut p, &[0.0; 4]);
        }
        assert_eq!(p, vec![0.25; 4]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = vec![5.0f64];
        let mut opt = Adam::new(1, 0.1, 0.9, 0.999, 1e-8);
        for _ in 0..500 {
            let g = [2.0 * (p[0] - 2.0)];
            opt.update(&mut p, &g);
        }
        assert!((p[0] - 2.0).abs() < 1e-2);
    }
}
