//! B-spline basis evaluation via the Cox-de Boor recursion, plus the knot
//! bookkeeping and least-squares machinery the adaptive activation layers use.

const MAX_WORK: usize = 64;

/// Knot vector with a fixed degree and a fixed number of active basis
/// functions. For degree `d` and `k` grid intervals the layer carries
/// `d + k - 1` spline coefficients over `k + 2d + 1` nondecreasing knots;
/// the active basis functions are the first `d + k - 1` of the family the
/// knots support.
#[derive(Clone, Debug, PartialEq)]
pub struct KnotVector {
    knots: Vec<f64>,
    degree: usize,
    n_basis: usize,
    /// Set when the knots are (numerically) evenly spaced; enables O(1)
    /// interval lookup in the hot evaluation path.
    uniform_step: Option<f64>,
}

impl KnotVector {
    /// Uniform knots such that the partition-of-unity span of the active
    /// basis functions is exactly `[lo, hi]`.
    pub fn uniform(lo: f64, hi: f64, degree: usize, grid_intervals: usize) -> Self {
        assert!(hi > lo, "knot span must be nonempty: [{lo}, {hi}]");
        assert!(grid_intervals >= 2);
        let n_basis = degree + grid_intervals - 1;
        let total = grid_intervals + 2 * degree + 1;
        let step = (hi - lo) / (n_basis - degree) as f64;
        let knots = (0..total)
            .map(|i| lo + (i as f64 - degree as f64) * step)
            .collect();
        KnotVector { knots, degree, n_basis, uniform_step: Some(step) }
    }

    pub fn from_knots(knots: Vec<f64>, degree: usize, n_basis: usize) -> Self {
        assert!(knots.len() >= n_basis + degree + 1, "too few knots for basis count");
        assert!(knots.windows(2).all(|w| w[0] <= w[1]), "knots must be nondecreasing");
        let step = (knots[knots.len() - 1] - knots[0]) / (knots.len() - 1) as f64;
        let uniform = step > 0.0
            && knots
                .windows(2)
                .all(|w| ((w[1] - w[0]) - step).abs() <= 1e-12 * step.max(1.0));
        KnotVector {
            knots,
            degree,
            n_basis,
            uniform_step: uniform.then_some(step),
        }
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn n_basis(&self) -> usize {
        self.n_basis
    }

    /// Span on which the active basis functions sum to one.
    pub fn interior_span(&self) -> (f64, f64) {
        (self.knots[self.degree], self.knots[self.n_basis])
    }

    /// Index m with knots[m] <= x < knots[m+1], or None outside the span.
    #[inline]
    fn locate(&self, x: f64) -> Option<usize> {
        let t = &self.knots;
        if x < t[0] || x >= t[t.len() - 1] {
            return None;
        }
        match self.uniform_step {
            Some(step) => {
                let m = (((x - t[0]) / step) as usize).min(t.len() - 2);
                // Division can land one off at interval edges.
                if x < t[m] {
                    Some(m - 1)
                } else if x >= t[m + 1] {
                    Some(m + 1)
                } else {
                    Some(m)
                }
            }
            None => {
                let m = t.partition_point(|&k| k <= x) - 1;
                Some(m.min(t.len() - 2))
            }
        }
    }

    /// Evaluate the `deriv`-th derivative of every active basis function at
    /// `x`, writing `n_basis` values into `out`.
    ///
    /// Derivatives of order above `degree` are identically zero. 0/0 in the
    /// recursion is taken as 0, so repeated knots are tolerated. Only the
    /// `degree - deriv + 1` functions whose support covers x are nonzero, so
    /// the evaluation runs over that band.
    pub fn eval_all(&self, x: f64, deriv: usize, out: &mut [f64]) {
        assert_eq!(out.len(), self.n_basis);
        out.fill(0.0);
        if deriv > self.degree {
            return;
        }
        let Some(m) = self.locate(x) else { return };
        let t = &self.knots;
        let p = self.degree;
        let m = m as i64;
        let last = (t.len() - 1) as i64;
        // A basis function B_i^q exists when its knots t_i..t_{i+q+1} do.
        let exists = |i: i64, q: i64| i >= 0 && i + q + 1 <= last;
        let kt = |i: i64| t[i as usize];

        // Banded values at degree q: band[r] = B_{m-q+r}^q(x), r = 0..=q,
        // with entries for nonexistent functions held at zero.
        let base = (p - deriv) as i64;
        assert!(p + 2 <= MAX_WORK);
        let mut band = [0.0f64; MAX_WORK];
        let mut prev = [0.0f64; MAX_WORK];
        band[0] = 1.0;
        for q in 1..=base {
            prev[..=q as usize].copy_from_slice(&band[..=q as usize]);
            for r in 0..=q {
                let i = m - q + r;
                let mut v = 0.0;
                // Left term uses B_i^{q-1} = prev[r-1].
                if r >= 1 && exists(i, q) {
                    let den = kt(i + q) - kt(i);
                    if den > 0.0 {
                        v += (x - kt(i)) / den * prev[(r - 1) as usize];
                    }
                }
                // Right term uses B_{i+1}^{q-1} = prev[r].
                if r <= q - 1 && exists(i + 1, q - 1) && i + q + 1 <= last {
                    let den = kt(i + q + 1) - kt(i + 1);
                    if den > 0.0 {
                        v += (kt(i + q + 1) - x) / den * prev[r as usize];
                    }
                }
                band[r as usize] = v;
            }
        }
        // Derivative recursion, widening the band by one per order.
        for step in 0..deriv as i64 {
            let q = base + step + 1;
            prev[..q as usize].copy_from_slice(&band[..q as usize]);
            for r in 0..=q {
                let i = m - q + r;
                let mut v = 0.0;
                if r >= 1 && exists(i, q - 1) && i + q <= last {
                    let den = kt(i + q) - kt(i);
                    if den > 0.0 {
                        v += prev[(r - 1) as usize] / den;
                    }
                }
                if r <= q - 1 && exists(i + 1, q - 1) && i + q + 1 <= last {
                    let den = kt(i + q + 1) - kt(i + 1);
                    if den > 0.0 {
                        v -= prev[r as usize] / den;
                    }
                }
                band[r as usize] = q as f64 * v;
            }
        }
        // Scatter the band (indices m-p ..= m) into the active range.
        for r in 0..=(p as i64) {
            let i = m - p as i64 + r;
            if i >= 0 && (i as usize) < self.n_basis {
                out[i as usize] = band[r as usize];
            }
        }
    }

    /// Dense design matrix: rows = points, cols = active basis functions.
    pub fn design_matrix(&self, xs: &[f64]) -> Vec<f64> {
        let nb = self.n_basis;
        let mut m = vec![0.0; xs.len() * nb];
        for (r, &x) in xs.iter().enumerate() {
            self.eval_all(x, 0, &mut m[r * nb..(r + 1) * nb]);
        }
        m
    }
}

/// Single basis function by the textbook Cox-de Boor recursion.
/// Base case: `B_i^0` is the indicator of `[knots[i], knots[i+1])`; 0/0 is 0.
pub fn bspline_basis(knots: &[f64], degree: usize, i: usize, x: f64) -> f64 {
    if degree == 0 {
        return if knots[i] <= x && x < knots[i + 1] { 1.0 } else { 0.0 };
    }
    let den1 = knots[i + degree] - knots[i];
    let den2 = knots[i + degree + 1] - knots[i + 1];
    let a = if den1 > 0.0 {
        (x - knots[i]) / den1 * bspline_basis(knots, degree - 1, i, x)
    } else {
        0.0
    };
    let b = if den2 > 0.0 {
        (knots[i + degree + 1] - x) / den2 * bspline_basis(knots, degree - 1, i + 1, x)
    } else {
        0.0
    };
    a + b
}

/// Solve the dense system `a x = b` in place (Gaussian elimination with
/// partial pivoting). `a` is n x n row-major. Returns None when singular.
pub fn solve_dense(a: &mut [f64], b: &mut [f64], n: usize) -> Option<()> {
    for col in 0..n {
        let mut piv = col;
        let mut best = a[col * n + col].abs();
        for r in col + 1..n {
            let v = a[r * n + col].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best < 1e-14 {
            return None;
        }
        if piv != col {
            for j in 0..n {
                a.swap(col * n + j, piv * n + j);
            }
            b.swap(col, piv);
        }
        let d = a[col * n + col];
        for r in col + 1..n {
            let f = a[r * n + col] / d;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                a[r * n + j] -= f * a[col * n + j];
            }
            b[r] -= f * b[col];
        }
    }
    for col in (0..n).rev() {
        let mut v = b[col];
        for j in col + 1..n {
            v -= a[col * n + j] * b[j];
        }
        b[col] = v / a[col * n + col];
    }
    Some(())
}

/// Ordinary least squares `min ||design c - y||` for several right-hand
/// sides sharing one design matrix (rows x nb). Basis columns without any
/// support in the batch are pinned to zero and excluded from the solve.
pub fn least_squares_multi(design: &[f64], rows: usize, nb: usize, targets: &[Vec<f64>]) -> Vec<Vec<f64>> {
    // Active columns: those with nonzero presence in the batch.
    let mut active = Vec::new();
    for c in 0..nb {
        let mass: f64 = (0..rows).map(|r| design[r * nb + c].abs()).sum();
        if mass > 1e-12 {
            active.push(c);
        }
    }
    let na = active.len();
    // Gram matrix over active columns.
    let mut gram = vec![0.0; na * na];
    for (ai, &ci) in active.iter().enumerate() {
        for (aj, &cj) in active.iter().enumerate().skip(ai) {
            let mut s = 0.0;
            for r in 0..rows {
                s += design[r * nb + ci] * design[r * nb + cj];
            }
            gram[ai * na + aj] = s;
            gram[aj * na + ai] = s;
        }
    }
    targets
        .iter()
        .map(|y| {
            let mut rhs: Vec<f64> = active
                .iter()
                .map(|&c| (0..rows).map(|r| design[r * nb + c] * y[r]).sum())
                .collect();
            let mut g = gram.clone();
            let solved = solve_dense(&mut g, &mut rhs, na).is_some();
            if !solved {
                // Ridge fallback for a degenerate batch.
                let mut g2 = gram.clone();
                let tr: f64 = (0..na).map(|i| gram[i * na + i]).sum::<f64>().max(1e-30);
                let lam = 1e-10 * tr / na as f64;
                for i in 0..na {
                    g2[i * na + i] += lam;
                }
                rhs = active
                    .iter()
                    .map(|&c| (0..rows).map(|r| design[r * nb + c] * y[r]).sum())
                    .collect();
                solve_dense(&mut g2, &mut rhs, na).expect("ridge-regularized solve failed");
            }
            let mut full = vec![0.0; nb];
            for (ai, &c) in active.iter().enumerate() {
                full[c] = rhs[ai];
            }
            full
        })
        .collect()
}

/// Linear-interpolation quantile of an unsorted sample.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        v[lo]
    } else {
        let w = pos - lo as f64;
        v[lo] * (1.0 - w) + v[hi] * w
    }
}
