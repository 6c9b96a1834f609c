//! Central finite-difference probes for verifying analytic gradients.

use rand::seq::index::sample;
use rand::Rng;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (parameter index, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative error with a floor on the denominator so that two near-zero
/// gradients compare as equal.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / denom
}

/// Compares `analytic[i]` with `(loss(p + h e_i) - loss(p - h e_i)) / 2h`
/// for each requested index.
pub fn check_indices<F>(params: &mut [f64], analytic: &[f64], indices: &[usize], h: f64, mut loss: F) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for &i in indices {
        let orig = params[i];
        params[i] = orig + h;
        let up = loss(params);
        params[i] = orig - h;
        let down = loss(params);
        params[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        report.checked += 1;
        if err >= report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some((i, analytic[i], numeric));
        }
    }
    report
}

/// Picks `count` distinct parameter indices (all of them if fewer exist).
pub fn random_indices<G: Rng + ?Sized>(rng: &mut G, len: usize, count: usize) -> Vec<usize> {
    if count >= len {
        return (0..len).collect();
    }
    sample(rng, len, count).into_vec()
}
