//! Univariate ordered-probit fits: the outcome-side marginal (respondents
//! only) and the response-side marginal with the unit-nonresponse mass
//! folded in through strata shares.
//!
//! These serve as starting values for the joint fit and as the standalone
//! references a zero-correlation joint fit must reproduce, so the cell
//! probabilities here are deliberately computed through plain univariate
//! CDF differences, not the bivariate kernel.

use crate::bvn::phi;
use crate::error::{Error, Result};
use crate::likelihood::{dot, CellTable};
use crate::model::Stratum;
use crate::optimize::{central_gradient, maximize, OptimOptions};

/// Coefficients and cutpoints of a fitted univariate ordered probit, on the
/// same top-threshold-zero normalization as the joint model.
#[derive(Debug, Clone)]
pub struct OrderedProbitFit {
    pub coef: Vec<f64>,
    pub cuts: Vec<f64>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Aggregated univariate observations: `(category, design vector, mult)`.
type Obs = Vec<(usize, Vec<f64>, f64)>;

fn aggregate<'a>(
    cells: impl Iterator<Item = (usize, &'a [f64], f64)>,
) -> Obs {
    let mut map: Vec<(usize, Vec<f64>, f64)> = Vec::new();
    for (cat, design, mult) in cells {
        if let Some(entry) =
            map.iter_mut().find(|(c, d, _)| *c == cat && d.as_slice() == design)
        {
            entry.2 += mult;
        } else {
            map.push((cat, design.to_vec(), mult));
        }
    }
    map
}

/// Which equation the marginal models; the two sides bound their top
/// observed category differently.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    /// Outcome: `Y` categories over `Y-1` finite cuts (top cut zero);
    /// category `Y` extends to `+inf`.
    Outcome,
    /// Response: `R` respondent categories over `R` finite cuts (top cut
    /// zero); the region above zero is unit nonresponse, entering only
    /// through the aggregate mass term.
    Response,
}

/// Free layout for a marginal fit: `[coef | log gaps between finite cuts]`.
/// Returns the finite cuts including the trailing normalized zero.
fn unpack_marginal(v: &[f64], d: usize, n_cuts: usize) -> (Vec<f64>, Vec<f64>) {
    let coef = v[..d].to_vec();
    let gaps = &v[d..];
    debug_assert_eq!(gaps.len() + 1, n_cuts);
    let mut cuts = vec![0.0; n_cuts];
    let mut acc = 0.0;
    for j in (0..gaps.len()).rev() {
        acc += gaps[j].clamp(-30.0, 30.0).exp();
        cuts[j] = -acc;
    }
    (coef, cuts)
}

fn marginal_loglik(
    v: &[f64],
    d: usize,
    side: Side,
    n_cuts: usize,
    obs: &Obs,
    nonresponse: Option<(&[Stratum], f64)>,
) -> Result<f64> {
    let (coef, cuts) = unpack_marginal(v, d, n_cuts);
    let mut total = 0.0;
    for (cat, design, mult) in obs {
        let shift = dot(&coef, design);
        let hi = match side {
            Side::Outcome if *cat == n_cuts + 1 => f64::INFINITY,
            _ => cuts[*cat - 1] - shift,
        };
        let lo = if *cat == 1 { f64::NEG_INFINITY } else { cuts[*cat - 2] - shift };
        let p = phi(hi) - phi(lo);
        if p < 1e-300 {
            return Err(Error::LikelihoodUnderflow { y: *cat, r: 0, profile: 0 });
        }
        total += mult * p.ln();
    }
    if let Some((strata, n_miss)) = nonresponse {
        if n_miss > 0.0 {
            // mass above the zero top cut is Phi(b'z)
            let mass: f64 = strata.iter().map(|s| s.share * phi(dot(&coef, &s.z))).sum();
            if mass < 1e-300 {
                return Err(Error::NonresponseMassUnderflow);
            }
            total += n_miss * mass.ln();
        }
    }
    Ok(total)
}

fn run_fit(
    obs: &Obs,
    d: usize,
    side: Side,
    n_cuts: usize,
    nonresponse: Option<(&[Stratum], f64)>,
    opts: &OptimOptions,
) -> Result<OrderedProbitFit> {
    let x0 = vec![0.0; d + n_cuts - 1];
    let f = |v: &[f64]| marginal_loglik(v, d, side, n_cuts, obs, nonresponse);
    let g = |v: &[f64]| central_gradient(&f, v, crate::likelihood::gradient_step);
    let outcome = maximize(&f, g, &x0, opts)?;
    let (coef, cuts) = unpack_marginal(&outcome.x, d, n_cuts);
    Ok(OrderedProbitFit {
        coef,
        cuts,
        loglik: outcome.value,
        converged: outcome.converged,
        iterations: outcome.iterations,
    })
}

/// Ordered probit of the outcome on `x` over respondents. The returned
/// `cuts` are `gamma` (length `Y-1`, top entry zero).
pub fn fit_outcome(table: &CellTable, opts: &OptimOptions) -> Result<OrderedProbitFit> {
    let spec = table.spec();
    let obs = aggregate(table.iter_cells().map(|(y, _, x, _, m)| (y, x, m)));
    run_fit(&obs, spec.dx, Side::Outcome, spec.y_categories - 1, None, opts)
}

/// Ordered probit of the proxy on `z` over respondents, with the
/// unit-nonresponse category's mass entering through strata shares. The
/// returned `cuts` are `theta` (length `R`, top entry zero).
pub fn fit_response(
    table: &CellTable,
    strata: &[Stratum],
    n_miss: f64,
    opts: &OptimOptions,
) -> Result<OrderedProbitFit> {
    let spec = table.spec();
    let obs = aggregate(table.iter_cells().map(|(_, r, _, z, m)| (r, z, m)));
    run_fit(&obs, spec.dz, Side::Response, spec.r_categories, Some((strata, n_miss)), opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelSpec, RespondentRecord};

    fn probit_opts() -> OptimOptions {
        OptimOptions { max_iterations: 300, gradient_tolerance: 1e-8, step_tolerance: 1e-11 }
    }

    #[test]
    fn intercept_only_equal_frequencies() {
        // Y = 3, equal thirds: the MLE has Phi(-a) = 2/3 and
        // gamma_1 = -2 Phi^{-1}(2/3) with the top cut at zero.
        let spec = ModelSpec::new(3, 2, 1, 1).unwrap();
        let mut records = Vec::new();
        for y in 1..=3 {
            for r in 1..=2 {
                for _ in 0..10 {
                    records.push(RespondentRecord::new(y, r, vec![1.0], vec![1.0]));
                }
            }
        }
        let table = CellTable::from_records(&records, &spec).unwrap();
        let fit = fit_outcome(&table, &probit_opts()).unwrap();
        assert!(fit.converged);
        let q23 = 0.43072729929545749;
        assert!((fit.coef[0] - (-q23)).abs() < 1e-5, "alpha {}", fit.coef[0]);
        assert!((fit.cuts[0] - (-2.0 * q23)).abs() < 1e-5, "gamma1 {}", fit.cuts[0]);
        assert_eq!(fit.cuts[1], 0.0);
    }

    #[test]
    fn response_fit_recovers_nonresponse_share() {
        // Intercept-only z with R = 1: the only information is the split
        // between respondents and n_miss, so Phi(beta) = q.
        let spec = ModelSpec::new(2, 1, 1, 1).unwrap();
        let records: Vec<RespondentRecord> = (0..60)
            .map(|i| RespondentRecord::new(1 + (i % 2), 1, vec![1.0], vec![1.0]))
            .collect();
        let table = CellTable::from_records(&records, &spec).unwrap();
        let strata = vec![Stratum { id: "s".into(), x: vec![1.0], z: vec![1.0], share: 1.0 }];
        let fit = fit_response(&table, &strata, 40.0, &probit_opts()).unwrap();
        assert!(fit.converged);
        // q = 40 / 100
        let expect = crate::bvn::std_normal_quantile(0.4).unwrap();
        assert!((fit.coef[0] - expect).abs() < 1e-5, "beta {}", fit.coef[0]);
    }
}
