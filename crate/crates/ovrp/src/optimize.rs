//! Quasi-Newton maximization and finite-difference engines.
//!
//! The optimizer is a dense BFGS with backtracking (Armijo) line search,
//! maximizing a smooth objective of modest dimension. Objective evaluation
//! failures (for this crate: likelihood underflow in degenerate parameter
//! regions) are treated as `-inf`, so the line search backtracks out of
//! them instead of aborting.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;
/// Improvement below this, together with a sub-tolerance step, counts as
/// step convergence.
const IMPROVEMENT_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy)]
pub struct OptimOptions {
    pub max_iterations: usize,
    /// Absolute tolerance on the Euclidean gradient norm.
    pub gradient_tolerance: f64,
    /// Euclidean step-length tolerance.
    pub step_tolerance: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self { max_iterations: 500, gradient_tolerance: 1e-6, step_tolerance: 1e-9 }
    }
}

#[derive(Debug, Clone)]
pub struct OptimOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Accepted objective values, one per iteration; nondecreasing.
    pub trace: Vec<f64>,
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Maximize `f` from `x0` using BFGS with gradient callback `grad`.
///
/// `f` returning an error means the point is outside the admissible region
/// (treated as `-inf`). An error from `grad` at an accepted point stops the
/// run at the best point found with `converged = false`; an error from the
/// very first evaluation is fatal.
pub fn maximize<F, G>(f: F, grad: G, x0: &[f64], opts: &OptimOptions) -> Result<OptimOutcome>
where
    F: Fn(&[f64]) -> Result<f64>,
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut fx = f(&x)?;
    let mut g = grad(&x)?;
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut trace = Vec::new();
    let mut first_update_pending = true;

    let mut iterations = 0;
    let mut converged = false;
    let mut gradient_norm = norm2(&g);

    if gradient_norm <= opts.gradient_tolerance {
        return Ok(OptimOutcome {
            x,
            value: fx,
            gradient_norm,
            iterations: 0,
            converged: true,
            trace,
        });
    }

    'outer: while iterations < opts.max_iterations {
        iterations += 1;

        // ascent direction d = H g (H approximates the inverse of -Hessian)
        let gv = nalgebra::DVector::from_column_slice(&g);
        let mut d: Vec<f64> = (&h * &gv).iter().copied().collect();
        let mut slope: f64 = d.iter().zip(&g).map(|(di, gi)| di * gi).sum();
        if !(slope > 0.0) || !slope.is_finite() {
            // curvature approximation broke down; restart from steepest ascent
            h = DMatrix::identity(n, n);
            first_update_pending = true;
            d = g.clone();
            slope = g.iter().map(|gi| gi * gi).sum();
        }

        // backtracking line search on t
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let cand: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + t * di).collect();
            match f(&cand) {
                Ok(fc) if fc >= fx + ARMIJO_C1 * t * slope && fc.is_finite() => {
                    accepted = Some((cand, fc));
                    break;
                }
                _ => t *= 0.5,
            }
        }
        let Some((x_new, f_new)) = accepted else {
            // no admissible improving step along d: report step convergence
            // if the gradient is also quiet, else give up unconverged
            converged = gradient_norm <= opts.gradient_tolerance;
            break 'outer;
        };

        let step: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let step_norm = norm2(&step);
        let improvement = f_new - fx;

        let g_new = match grad(&x_new) {
            Ok(gn) => gn,
            Err(_) => {
                x = x_new;
                fx = f_new;
                trace.push(fx);
                converged = false;
                break 'outer;
            }
        };

        // BFGS update with curvature guard; y = -(g_new - g) in
        // minimization terms, folded into the ascent formulation here.
        let yv: Vec<f64> = g.iter().zip(&g_new).map(|(old, new)| old - new).collect();
        let sy: f64 = step.iter().zip(&yv).map(|(s, y)| s * y).sum();
        if sy > 1e-10 * norm2(&step) * norm2(&yv) {
            if first_update_pending {
                let yy: f64 = yv.iter().map(|y| y * y).sum();
                if yy > 0.0 {
                    h *= sy / yy;
                }
                first_update_pending = false;
            }
            let s = nalgebra::DVector::from_column_slice(&step);
            let y = nalgebra::DVector::from_column_slice(&yv);
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = (y.transpose() * &hy)[(0, 0)];
            // H <- H - rho (s y'H + Hy s') + rho^2 s (y'Hy) s' + rho s s'
            let s_hy = &s * hy.transpose();
            h -= rho * (&s_hy + s_hy.transpose());
            h += (rho * rho * yhy + rho) * (&s * s.transpose());
        }

        x = x_new;
        fx = f_new;
        g = g_new;
        gradient_norm = norm2(&g);
        trace.push(fx);

        if gradient_norm <= opts.gradient_tolerance {
            converged = true;
            break;
        }
        if step_norm < opts.step_tolerance && improvement < IMPROVEMENT_TOLERANCE {
            converged = true;
            break;
        }
    }

    Ok(OptimOutcome { x, value: fx, gradient_norm, iterations, converged, trace })
}

/// Central-difference gradient with per-coordinate steps.
pub fn central_gradient<F>(f: F, x: &[f64], step: impl Fn(f64) -> f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    let evals: Vec<Result<f64>> = (0..x.len())
        .map(|i| {
            let h = step(x[i]);
            let mut hi = x.to_vec();
            hi[i] += h;
            let mut lo = x.to_vec();
            lo[i] -= h;
            Ok((f(&hi)? - f(&lo)?) / (2.0 * h))
        })
        .collect();
    evals.into_iter().collect()
}

/// Symmetric central-difference Hessian. Off-diagonal entries use the
/// four-point cross formula; the result is symmetric by construction.
pub fn central_hessian<F>(f: F, x: &[f64], step: impl Fn(f64) -> f64) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    let n = x.len();
    let f0 = f(x)?;
    let h: Vec<f64> = x.iter().map(|&xi| step(xi)).collect();

    let eval_at = |offsets: &[(usize, f64)]| -> Result<f64> {
        let mut p = x.to_vec();
        for &(i, d) in offsets {
            p[i] += d;
        }
        f(&p)
    };

    // upper-triangle tasks
    let pairs: Vec<(usize, usize)> =
        (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let entries: Vec<Result<f64>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            if i == j {
                let fp = eval_at(&[(i, h[i])])?;
                let fm = eval_at(&[(i, -h[i])])?;
                Ok((fp - 2.0 * f0 + fm) / (h[i] * h[i]))
            } else {
                let fpp = eval_at(&[(i, h[i]), (j, h[j])])?;
                let fpm = eval_at(&[(i, h[i]), (j, -h[j])])?;
                let fmp = eval_at(&[(i, -h[i]), (j, h[j])])?;
                let fmm = eval_at(&[(i, -h[i]), (j, -h[j])])?;
                Ok((fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j]))
            }
        })
        .collect();

    let mut hess = DMatrix::<f64>::zeros(n, n);
    for (&(i, j), entry) in pairs.iter().zip(entries) {
        let v = entry?;
        hess[(i, j)] = v;
        hess[(j, i)] = v;
    }
    if hess.iter().any(|v| v.is_nan()) {
        return Err(Error::Internal("Hessian has NaN entries".into()));
    }
    Ok(hess)
}

/// Central-difference Jacobian of a vector-valued map; row `k` holds
/// `d g_k / d x_i`.
pub fn central_jacobian<G>(g: G, x: &[f64], step: impl Fn(f64) -> f64) -> Result<DMatrix<f64>>
where
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let n = x.len();
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut out_dim = None;
    for i in 0..n {
        let h = step(x[i]);
        let mut hi = x.to_vec();
        hi[i] += h;
        let mut lo = x.to_vec();
        lo[i] -= h;
        let ghi = g(&hi)?;
        let glo = g(&lo)?;
        if ghi.len() != glo.len() {
            return Err(Error::Internal("jacobian: inconsistent output dimension".into()));
        }
        match out_dim {
            None => out_dim = Some(ghi.len()),
            Some(m) if m == ghi.len() => {}
            _ => return Err(Error::Internal("jacobian: inconsistent output dimension".into())),
        }
        columns.push(ghi.iter().zip(&glo).map(|(a, b)| (a - b) / (2.0 * h)).collect());
    }
    let m = out_dim.unwrap_or(0);
    Ok(DMatrix::from_fn(m, n, |r, c| columns[c][r]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maximizes_concave_quadratic() {
        // f(x) = -(x - m)'A(x - m)/2 with A = diag(1, 4, 9)
        let m = [1.0, -2.0, 0.5];
        let a = [1.0, 4.0, 9.0];
        let f = |x: &[f64]| -> Result<f64> {
            Ok(-0.5
                * x.iter()
                    .zip(&m)
                    .zip(&a)
                    .map(|((xi, mi), ai)| ai * (xi - mi) * (xi - mi))
                    .sum::<f64>())
        };
        let grad = |x: &[f64]| -> Result<Vec<f64>> {
            Ok(x.iter().zip(&m).zip(&a).map(|((xi, mi), ai)| -ai * (xi - mi)).collect())
        };
        let out = maximize(f, grad, &[0.0, 0.0, 0.0], &OptimOptions::default()).unwrap();
        assert!(out.converged);
        for (xi, mi) in out.x.iter().zip(&m) {
            assert!((xi - mi).abs() < 1e-6, "{xi} vs {mi}");
        }
        // monotone trace
        for w in out.trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-14);
        }
    }

    #[test]
    fn maximizes_nonquadratic_with_fd_gradient() {
        // smooth non-quadratic: f = -log(1 + |x - m|^2) maximized at m
        let m = [0.3, -0.7, 1.1, 0.0];
        let f = |x: &[f64]| -> Result<f64> {
            let ss: f64 = x.iter().zip(&m).map(|(xi, mi)| (xi - mi) * (xi - mi)).sum();
            Ok(-(1.0 + ss).ln())
        };
        let grad =
            |x: &[f64]| -> Result<Vec<f64>> { central_gradient(&f, x, |_| 1e-6) };
        let out = maximize(&f, grad, &[2.0, 2.0, 2.0, 2.0], &OptimOptions::default()).unwrap();
        assert!(out.converged, "gradient norm {}", out.gradient_norm);
        for (xi, mi) in out.x.iter().zip(&m) {
            assert!((xi - mi).abs() < 1e-4);
        }
    }

    #[test]
    fn rejects_inadmissible_regions() {
        // objective undefined for x > 1; optimum at the x=1 boundary region
        let f = |x: &[f64]| -> Result<f64> {
            if x[0] > 1.0 {
                Err(Error::LikelihoodUnderflow { y: 1, r: 1, profile: 0 })
            } else {
                Ok(x[0] - 0.5 * (x[0] * x[0]))
            }
        };
        let grad = |x: &[f64]| -> Result<Vec<f64>> { Ok(vec![1.0 - x[0]]) };
        let out = maximize(f, grad, &[-3.0], &OptimOptions::default()).unwrap();
        assert!(out.x[0] <= 1.0 + 1e-12);
        assert!((out.x[0] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn finite_difference_gradient_exact_on_quadratic() {
        // central differences are exact for quadratics up to roundoff
        let f = |x: &[f64]| -> Result<f64> {
            Ok(3.0 * x[0] * x[0] - 2.0 * x[0] * x[1] + 0.5 * x[1] * x[1] + 4.0 * x[0] - x[1])
        };
        let x = [0.7, -1.3];
        let g = central_gradient(f, &x, |_| 1e-4).unwrap();
        let expect = [6.0 * x[0] - 2.0 * x[1] + 4.0, -2.0 * x[0] + x[1] - 1.0];
        for (got, want) in g.iter().zip(&expect) {
            assert!((got - want).abs() < 1e-8, "{got} vs {want}");
        }
    }

    #[test]
    fn finite_difference_hessian_exact_on_quadratic() {
        let f = |x: &[f64]| -> Result<f64> {
            Ok(2.0 * x[0] * x[0] + 1.5 * x[0] * x[1] + 4.0 * x[1] * x[1]
                - x[0] * x[2]
                + 0.25 * x[2] * x[2])
        };
        let h = central_hessian(f, &[0.3, -0.4, 1.2], |_| 1e-4).unwrap();
        let expect =
            [[4.0, 1.5, -1.0], [1.5, 8.0, 0.0], [-1.0, 0.0, 0.5]];
        for i in 0..3 {
            for j in 0..3 {
                assert!(
                    (h[(i, j)] - expect[i][j]).abs() < 1e-6,
                    "H[{i}][{j}] = {} vs {}",
                    h[(i, j)],
                    expect[i][j]
                );
            }
        }
    }

    #[test]
    fn jacobian_exact_on_linear_map() {
        let g = |x: &[f64]| -> Result<Vec<f64>> {
            Ok(vec![2.0 * x[0] - x[1] + 3.0, 0.5 * x[0] + 4.0 * x[1] - 1.0, x[1]])
        };
        let j = central_jacobian(g, &[0.2, -0.8], |_| 1e-5).unwrap();
        let expect = [[2.0, -1.0], [0.5, 4.0], [0.0, 1.0]];
        for r in 0..3 {
            for c in 0..2 {
                assert!((j[(r, c)] - expect[r][c]).abs() < 1e-9);
            }
        }
    }
}
