//! Finite-difference oracles and tolerance helpers used by the validation
//! suites. These deliberately avoid the tape: they probe scalar functions of
//! raw parameter vectors so a check never shares code with what it checks.

/// Relative error with a floor so near-zero pairs compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-10 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

/// Central difference of a scalar function of one packed parameter vector.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], k: usize, h: f64) -> f64 {
    let mut xs = x.to_vec();
    xs[k] += h;
    let up = f(&xs);
    xs[k] = x[k] - h;
    let dn = f(&xs);
    (up - dn) / (2.0 * h)
}

/// Central-difference gradient over every entry of `x`.
pub fn central_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len()).map(|k| central_diff(&mut f, x, k, h)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_quadratic() {
        let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[1];
        let g = central_gradient(f, &[2.0, 5.0], 1e-6);
        assert!(rel_err(g[0], 4.0) < 1e-9);
        assert!(rel_err(g[1], 3.0) < 1e-9);
    }
}
