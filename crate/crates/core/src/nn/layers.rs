//! Dense layers with explicit forward caches and backward passes.
//!
//! Activations are row-major `rows x dim` buffers. Backward functions
//! accumulate parameter gradients into a buffer laid out like the parameters.

use super::params::{Init, Layout, Slot};
use super::real::{gemm, matmul, Real, View};

pub const LN_EPS: f64 = 1e-5;

/// `y = x W + b` with `W` stored `[din, dout]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: Slot,
    pub b: Option<Slot>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(layout: &mut Layout, name: &str, din: usize, dout: usize, bias: bool, std: f64) -> Self {
        let w = layout.push(format!("{name}.weight"), &[din, dout], Init::TruncNormal(std));
        let b = bias.then(|| layout.push(format!("{name}.bias"), &[dout], Init::Zeros));
        Linear { w, b, din, dout }
    }

    pub fn forward<R: Real>(&self, p: &[R], x: &[R], rows: usize) -> Vec<R> {
        debug_assert_eq!(x.len(), rows * self.din);
        let mut y = match self.b {
            Some(b) => {
                let b = b.of(p);
                let mut y = Vec::with_capacity(rows * self.dout);
                for _ in 0..rows {
                    y.extend_from_slice(b);
                }
                y
            }
            None => vec![R::zero(); rows * self.dout],
        };
        gemm(
            R::one(),
            View::dense(x, rows, self.din),
            View::dense(self.w.of(p), self.din, self.dout),
            R::one(),
            &mut y,
            self.dout,
        );
        y
    }

    /// Accumulates `dW`, `db` into `grads`; returns `dx` when requested.
    pub fn backward<R: Real>(
        &self,
        p: &[R],
        x: &[R],
        rows: usize,
        dy: &[R],
        grads: &mut [R],
        want_dx: bool,
    ) -> Option<Vec<R>> {
        debug_assert_eq!(dy.len(), rows * self.dout);
        gemm(
            R::one(),
            View::dense(x, rows, self.din).t(),
            View::dense(dy, rows, self.dout),
            R::one(),
            self.w.of_mut(grads),
            self.dout,
        );
        if let Some(b) = self.b {
            let db = b.of_mut(grads);
            for row in dy.chunks_exact(self.dout) {
                for (g, v) in db.iter_mut().zip(row) {
                    *g += *v;
                }
            }
        }
        want_dx.then(|| {
            matmul(
                View::dense(dy, rows, self.dout),
                View::dense(self.w.of(p), self.din, self.dout).t(),
            )
        })
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: Slot,
    pub bias: Slot,
    pub dim: usize,
}

pub struct LnCache<R> {
    pub xhat: Vec<R>,
    pub rstd: Vec<R>,
}

impl LayerNorm {
    pub fn new(layout: &mut Layout, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: layout.push(format!("{name}.weight"), &[dim], Init::Ones),
            bias: layout.push(format!("{name}.bias"), &[dim], Init::Zeros),
            dim,
        }
    }

    pub fn forward<R: Real>(&self, p: &[R], x: &[R]) -> (Vec<R>, LnCache<R>) {
        let d = self.dim;
        let rows = x.len() / d;
        let (g, b) = (self.gain.of(p), self.bias.of(p));
        let eps = R::cst(LN_EPS);
        let inv_d = R::one() / R::cst(d as f64);
        let mut y = vec![R::zero(); x.len()];
        let mut xhat = vec![R::zero(); x.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<R>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() * inv_d;
            let rs = R::one() / (var + eps).sqrt();
            rstd.push(rs);
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                y[r * d + c] = h * g[c] + b[c];
            }
        }
        (y, LnCache { xhat, rstd })
    }

    pub fn backward<R: Real>(&self, p: &[R], cache: &LnCache<R>, dy: &[R], grads: &mut [R]) -> Vec<R> {
        let d = self.dim;
        let rows = dy.len() / d;
        let g = self.gain.of(p);
        {
            let (gain_off, bias_off) = (self.gain.offset, self.bias.offset);
            for r in 0..rows {
                for c in 0..d {
                    let v = dy[r * d + c];
                    grads[gain_off + c] += v * cache.xhat[r * d + c];
                    grads[bias_off + c] += v;
                }
            }
        }
        let inv_d = R::one() / R::cst(d as f64);
        let mut dx = vec![R::zero(); dy.len()];
        let mut dxhat = vec![R::zero(); d];
        for r in 0..rows {
            let xh = &cache.xhat[r * d..(r + 1) * d];
            let mut s1 = R::zero();
            let mut s2 = R::zero();
            for c in 0..d {
                let v = dy[r * d + c] * g[c];
                dxhat[c] = v;
                s1 += v;
                s2 += v * xh[c];
            }
            let (m1, m2) = (s1 * inv_d, s2 * inv_d);
            let rs = cache.rstd[r];
            for c in 0..d {
                dx[r * d + c] = rs * (dxhat[c] - m1 - xh[c] * m2);
            }
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<R: Real>(x: R) -> R {
    let half = R::cst(0.5);
    let t = (R::cst(GELU_C) * (x + R::cst(GELU_A) * x * x * x)).tanh();
    half * x * (R::one() + t)
}

pub fn gelu_grad<R: Real>(x: R) -> R {
    let half = R::cst(0.5);
    let c = R::cst(GELU_C);
    let a = R::cst(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (R::one() + t) + half * x * (R::one() - t * t) * c * (R::one() + R::cst(3.0) * a * x * x)
}

/// GELU over a buffer. Returns the activations and the inner `tanh`
/// values, which the backward pass reuses.
pub fn gelu_forward<R: Real>(pre: &[R]) -> (Vec<R>, Vec<R>) {
    let (c, a, two) = (R::cst(GELU_C), R::cst(GELU_A), R::cst(2.0));
    // tanh(u) = 1 - 2 / (exp(2u) + 1)
    let mut t: Vec<R> = pre.iter().map(|&x| two * c * (x + a * x * x * x)).collect();
    R::exp_slice(&mut t);
    for v in t.iter_mut() {
        *v = R::one() - two / (*v + R::one());
    }
    let half = R::cst(0.5);
    let act = pre.iter().zip(&t).map(|(&x, &t)| half * x * (R::one() + t)).collect();
    (act, t)
}

pub fn gelu_backward<R: Real>(pre: &[R], tanh: &[R], d_act: &[R]) -> Vec<R> {
    let (half, c, a3) = (R::cst(0.5), R::cst(GELU_C), R::cst(3.0 * GELU_A));
    pre.iter()
        .zip(tanh)
        .zip(d_act)
        .map(|((&x, &t), &g)| g * (half * (R::one() + t) + half * x * (R::one() - t * t) * c * (R::one() + a3 * x * x)))
        .collect()
}

/// In-place numerically stable softmax over one row.
pub fn softmax_in_place<R: Real>(row: &mut [R]) {
    let max = row.iter().copied().fold(R::neg_infinity(), R::max);
    for v in row.iter_mut() {
        *v -= max;
    }
    R::exp_slice(row);
    let sum: R = row.iter().copied().sum();
    let inv = R::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}
