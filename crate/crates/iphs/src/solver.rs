//! Box-constrained smooth minimization by projected L-BFGS with Armijo
//! backtracking, used as the inner solver of the augmented Lagrangian loop.

use nalgebra::DVector;
use std::collections::VecDeque;

#[derive(Debug, Clone)]
pub struct LbfgsOpts {
    /// Number of curvature pairs kept.
    pub memory: usize,
    pub max_iters: usize,
    /// Stop when the projected gradient sup-norm falls below this.
    pub pg_tol: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo_c: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsOpts {
    fn default() -> Self {
        Self { memory: 10, max_iters: 500, pg_tol: 1e-8, armijo_c: 1e-4, max_line_search: 40 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LbfgsStatus {
    Converged,
    MaxIters,
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub pg_norm: f64,
    pub iterations: usize,
    pub status: LbfgsStatus,
}

/// Cholesky factor of a symmetric positive-definite banded matrix, stored as
/// lower bands: `band[(d, j)]` holds entry `(j + d, j)` for `d = 0..=bw`.
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    n: usize,
    bw: usize,
    band: nalgebra::DMatrix<f64>,
}

impl BandedCholesky {
    /// Factor in place; returns `None` when a pivot is not positive.
    pub fn new(n: usize, bw: usize, mut band: nalgebra::DMatrix<f64>) -> Option<Self> {
        assert_eq!(band.nrows(), bw + 1);
        assert_eq!(band.ncols(), n);
        for j in 0..n {
            let mut v = band[(0, j)];
            for k in j.saturating_sub(bw)..j {
                let l = band[(j - k, k)];
                v -= l * l;
            }
            if v <= 0.0 {
                return None;
            }
            let ljj = v.sqrt();
            band[(0, j)] = ljj;
            for i in j + 1..(j + bw + 1).min(n) {
                let mut v = band[(i - j, j)];
                for k in i.saturating_sub(bw)..j {
                    v -= band[(i - k, k)] * band[(j - k, k)];
                }
                band[(i - j, j)] = v / ljj;
            }
        }
        Some(Self { n, bw, band })
    }

    /// Solve `A x = b` from the stored factor.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        for j in 0..self.n {
            x[j] /= self.band[(0, j)];
            let xj = x[j];
            for i in j + 1..(j + self.bw + 1).min(self.n) {
                x[i] -= self.band[(i - j, j)] * xj;
            }
        }
        for j in (0..self.n).rev() {
            let mut v = x[j];
            for i in j + 1..(j + self.bw + 1).min(self.n) {
                v -= self.band[(i - j, j)] * x[i];
            }
            x[j] = v / self.band[(0, j)];
        }
        x
    }
}

fn project(x: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| x[i].clamp(lo[i], hi[i]))
}

/// Sup-norm of `P(x - grad) - x`, the standard box-constrained stationarity
/// measure.
pub fn projected_gradient_norm(
    x: &DVector<f64>,
    grad: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
) -> f64 {
    let mut norm: f64 = 0.0;
    for i in 0..x.len() {
        let step = (x[i] - grad[i]).clamp(lo[i], hi[i]) - x[i];
        norm = norm.max(step.abs());
    }
    norm
}

/// Minimize `f` over the box `[lo, hi]` starting from `x0`.
pub fn minimize_box<F>(
    f: F,
    x0: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    opts: &LbfgsOpts,
) -> LbfgsResult
where
    F: Fn(&DVector<f64>) -> (f64, DVector<f64>),
{
    minimize_box_precond(f, x0, lo, hi, opts, None)
}

/// [`minimize_box`] with an optional preconditioner: `h0` applies a fixed
/// positive-definite initial inverse Hessian to a vector and replaces the
/// usual Barzilai-Borwein scaling in the two-loop recursion.
pub fn minimize_box_precond<F>(
    f: F,
    x0: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    opts: &LbfgsOpts,
    h0: Option<&dyn Fn(&DVector<f64>) -> DVector<f64>>,
) -> LbfgsResult
where
    F: Fn(&DVector<f64>) -> (f64, DVector<f64>),
{
    let n = x0.len();
    let mut x = project(x0, lo, hi);
    let (mut fx, mut gx) = f(&x);
    let mut s_hist: VecDeque<DVector<f64>> = VecDeque::with_capacity(opts.memory);
    let mut y_hist: VecDeque<DVector<f64>> = VecDeque::with_capacity(opts.memory);
    let mut gamma = 1.0;

    for iter in 0..opts.max_iters {
        let pg = projected_gradient_norm(&x, &gx, lo, hi);
        if pg <= opts.pg_tol {
            return LbfgsResult { x, value: fx, pg_norm: pg, iterations: iter, status: LbfgsStatus::Converged };
        }

        // Two-metric projection: variables pinned by equal bounds or sitting
        // at a bound with the gradient pushing outward get a plain projected
        // gradient component; the quasi-Newton direction is built on the
        // remaining free variables only, so that clipping the step cannot
        // turn it into an ascent direction.
        let active: Vec<bool> = (0..n)
            .map(|i| {
                let eps = 1e-10 * (1.0 + x[i].abs());
                lo[i] == hi[i]
                    || (x[i] - lo[i] <= eps && gx[i] > 0.0)
                    || (hi[i] - x[i] <= eps && gx[i] < 0.0)
            })
            .collect();
        let mut q = gx.clone();
        for i in 0..n {
            if active[i] {
                q[i] = 0.0;
            }
        }
        let mut alphas = Vec::with_capacity(s_hist.len());
        for (s, y) in s_hist.iter().zip(y_hist.iter()).rev() {
            let rho = 1.0 / y.dot(s);
            let a = rho * s.dot(&q);
            q -= y * a;
            alphas.push((a, rho));
        }
        match h0 {
            Some(apply) => {
                q = apply(&q);
                for i in 0..n {
                    if active[i] {
                        q[i] = 0.0;
                    }
                }
            }
            None => q *= gamma,
        }
        for ((s, y), (a, rho)) in s_hist.iter().zip(y_hist.iter()).zip(alphas.into_iter().rev()) {
            let b = rho * y.dot(&q);
            q += s * (a - b);
        }
        for i in 0..n {
            if active[i] {
                q[i] = gx[i];
            }
        }
        let mut dir = -q;

        // Safeguard: fall back to steepest descent if not a descent direction.
        if dir.dot(&gx) >= 0.0 {
            dir = -gx.clone();
        }

        // Backtracking Armijo line search along the projected arc; a
        // machine-precision slack keeps tiny steps from stalling on
        // rounding noise.
        let f_ref = fx;
        let slack = 1e-14 * (1.0 + fx.abs());
        let mut step = if s_hist.is_empty() && h0.is_none() {
            (1.0 / gx.amax().max(1.0)).min(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        for _ in 0..opts.max_line_search {
            let x_new = project(&(&x + &dir * step), lo, hi);
            let dx = &x_new - &x;
            if dx.norm() <= 1e-16 * (1.0 + x.norm()) {
                break;
            }
            let (f_new, g_new) = f(&x_new);
            if f_new <= f_ref + opts.armijo_c * gx.dot(&dx) + slack {
                accepted = Some((x_new, f_new, g_new, dx));
                break;
            }
            step *= 0.5;
        }

        let Some((x_new, f_new, g_new, dx)) = accepted else {
            let pg = projected_gradient_norm(&x, &gx, lo, hi);
            return LbfgsResult {
                x,
                value: fx,
                pg_norm: pg,
                iterations: iter,
                status: if pg <= opts.pg_tol { LbfgsStatus::Converged } else { LbfgsStatus::LineSearchFailed },
            };
        };

        let yk = &g_new - &gx;
        let sy = yk.dot(&dx);
        // Skip the update on non-positive curvature.
        if sy > 1e-12 * dx.norm() * yk.norm() {
            if s_hist.len() == opts.memory {
                s_hist.pop_front();
                y_hist.pop_front();
            }
            gamma = sy / yk.dot(&yk).max(1e-300);
            s_hist.push_back(dx);
            y_hist.push_back(yk);
        }
        x = x_new;
        fx = f_new;
        gx = g_new;
        let _ = n;
    }

    let pg = projected_gradient_norm(&x, &gx, lo, hi);
    LbfgsResult { x, value: fx, pg_norm: pg, iterations: opts.max_iters, status: LbfgsStatus::MaxIters }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unbounded(n: usize) -> (DVector<f64>, DVector<f64>) {
        (DVector::from_element(n, -1e30), DVector::from_element(n, 1e30))
    }

    #[test]
    fn quadratic_unconstrained() {
        // min (x1-3)^2 + 10 (x2+1)^2
        let f = |x: &DVector<f64>| {
            let v = (x[0] - 3.0).powi(2) + 10.0 * (x[1] + 1.0).powi(2);
            let g = DVector::from_vec(vec![2.0 * (x[0] - 3.0), 20.0 * (x[1] + 1.0)]);
            (v, g)
        };
        let (lo, hi) = unbounded(2);
        let r = minimize_box(f, &DVector::zeros(2), &lo, &hi, &LbfgsOpts::default());
        assert_eq!(r.status, LbfgsStatus::Converged);
        assert!((r.x[0] - 3.0).abs() < 1e-6 && (r.x[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn quadratic_active_bound() {
        // Unconstrained minimum at (3, -1); box forces x1 <= 1.
        let f = |x: &DVector<f64>| {
            let v = (x[0] - 3.0).powi(2) + (x[1] + 1.0).powi(2);
            let g = DVector::from_vec(vec![2.0 * (x[0] - 3.0), 2.0 * (x[1] + 1.0)]);
            (v, g)
        };
        let lo = DVector::from_vec(vec![-5.0, -5.0]);
        let hi = DVector::from_vec(vec![1.0, 5.0]);
        let r = minimize_box(f, &DVector::zeros(2), &lo, &hi, &LbfgsOpts::default());
        assert_eq!(r.status, LbfgsStatus::Converged);
        assert!((r.x[0] - 1.0).abs() < 1e-8 && (r.x[1] + 1.0).abs() < 1e-8);
    }

    #[test]
    fn rosenbrock() {
        let f = |x: &DVector<f64>| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = DVector::from_vec(vec![
                -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                200.0 * (b - a * a),
            ]);
            (v, g)
        };
        let (lo, hi) = unbounded(2);
        let opts = LbfgsOpts { max_iters: 2000, pg_tol: 1e-10, ..Default::default() };
        let r = minimize_box(f, &DVector::from_vec(vec![-1.2, 1.0]), &lo, &hi, &opts);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6, "{:?}", r);
    }

    #[test]
    fn high_dimensional_convex() {
        // min sum_i i * (x_i - 1/i)^2 in 200 dimensions.
        let n = 200;
        let f = move |x: &DVector<f64>| {
            let mut v = 0.0;
            let mut g = DVector::zeros(n);
            for i in 0..n {
                let w = (i + 1) as f64;
                let d = x[i] - 1.0 / w;
                v += w * d * d;
                g[i] = 2.0 * w * d;
            }
            (v, g)
        };
        let (lo, hi) = unbounded(n);
        let opts = LbfgsOpts { max_iters: 3000, pg_tol: 1e-10, ..Default::default() };
        let r = minimize_box(f, &DVector::zeros(n), &lo, &hi, &opts);
        for i in 0..n {
            assert!((r.x[i] - 1.0 / (i as f64 + 1.0)).abs() < 1e-6);
        }
    }
}
