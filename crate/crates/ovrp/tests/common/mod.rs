//! Shared test support: Monte-Carlo oracles for rectangle probabilities
//! and a reference synthetic design used across integration suites.
//!
//! The oracles here are deliberately independent of the production
//! quadrature path: they draw latent normals directly and count events.

#![allow(dead_code)]

use ovrp::bvn::RectBounds;
use ovrp::model::{ModelSpec, ParamSet, Stratum};
use ovrp::simulate::SimConfig;
use rand::rngs::SmallRng;
use rand::{RngExt, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

/// Monte-Carlo estimate of `P(X <= a, Y <= b)` with antithetic pairs:
/// `n_pairs` draws yield `2 * n_pairs` indicator evaluations.
pub fn mc_bvn_cdf(a: f64, b: f64, rho: f64, n_pairs: usize, seed: u64) -> f64 {
    mc_rect_prob(
        RectBounds::new(f64::NEG_INFINITY, a, f64::NEG_INFINITY, b).unwrap(),
        rho,
        n_pairs,
        seed,
    )
}

/// Monte-Carlo estimate of a rectangle mass under correlation `rho`.
pub fn mc_rect_prob(bounds: RectBounds, rho: f64, n_pairs: usize, seed: u64) -> f64 {
    let mut rng = SmallRng::seed_from_u64(seed);
    let chol = (1.0 - rho * rho).sqrt();
    let mut hits = 0u64;
    let inside = |eps: f64, eta: f64| -> bool {
        eps > bounds.lo1 && eps <= bounds.hi1 && eta > bounds.lo2 && eta <= bounds.hi2
    };
    for _ in 0..n_pairs {
        let u: f64 = StandardNormal.sample(&mut rng);
        let w: f64 = StandardNormal.sample(&mut rng);
        let eta = rho * u + chol * w;
        if inside(u, eta) {
            hits += 1;
        }
        if inside(-u, -eta) {
            hits += 1;
        }
    }
    hits as f64 / (2.0 * n_pairs as f64)
}

/// Monte-Carlo estimate of a joint `(y, r)` cell probability by simulating
/// the latent pair and discretizing through the thresholds.
pub fn mc_cell_prob(
    y: usize,
    r: usize,
    x: &[f64],
    z: &[f64],
    p: &ParamSet,
    n_draws: usize,
    seed: u64,
) -> f64 {
    let mut rng = SmallRng::seed_from_u64(seed);
    let chol = (1.0 - p.rho * p.rho).sqrt();
    let xb: f64 = p.alpha.iter().zip(x).map(|(a, v)| a * v).sum();
    let zb: f64 = p.beta.iter().zip(z).map(|(b, v)| b * v).sum();
    let mut hits = 0u64;
    for _ in 0..n_draws {
        let eps: f64 = StandardNormal.sample(&mut rng);
        let w: f64 = StandardNormal.sample(&mut rng);
        let eta = p.rho * eps + chol * w;
        let y_draw = 1 + p.gamma.iter().filter(|&&g| xb + eps > g).count();
        let r_draw = 1 + p.theta.iter().filter(|&&t| zb + eta > t).count();
        if y_draw == y && r_draw == r {
            hits += 1;
        }
    }
    hits as f64 / n_draws as f64
}

/// The reference synthetic design: 60 strata built from a 5 x 4 x 3 grid
/// of covariate levels, Y = 5 outcome categories, R = 7 proxy categories.
/// `u` enters both equations, `w` only the outcome, `e` only the response
/// (the exclusion-restriction shifter). Truth gives roughly 50% unit
/// nonresponse.
pub fn reference_config(rho: f64, n_population: usize, seed: u64) -> SimConfig {
    let spec = ModelSpec::new(5, 7, 3, 3).unwrap();
    let truth = ParamSet {
        alpha: vec![0.3, 0.5, -0.4],
        beta: vec![0.0, 0.4, 0.6],
        gamma: vec![-1.8, -1.0, -0.4, 0.0],
        theta: vec![-2.2, -1.6, -1.15, -0.8, -0.5, -0.25, 0.0],
        rho,
    };
    let u_levels = [-1.0, -0.5, 0.0, 0.5, 1.0];
    let w_levels = [-0.6, -0.2, 0.2, 0.6];
    let e_levels = [-0.8, 0.0, 0.8];
    let mut raw_shares = Vec::with_capacity(60);
    let mut strata = Vec::with_capacity(60);
    for k in 0..60usize {
        let u = u_levels[k % 5];
        let w = w_levels[(k / 5) % 4];
        let e = e_levels[k / 20];
        raw_shares.push(0.5 + ((k * 37) % 100) as f64 / 100.0);
        strata.push(Stratum {
            id: format!("s{k:02}"),
            x: vec![1.0, u, w],
            z: vec![1.0, u, e],
            share: 0.0,
        });
    }
    let total: f64 = raw_shares.iter().sum();
    for (s, raw) in strata.iter_mut().zip(&raw_shares) {
        s.share = raw / total;
    }
    SimConfig { spec, truth, strata, n_population, seed }
}

/// Per-record (non-aggregated) reference evaluation of the respondent
/// log-likelihood plus the nonresponse term, built on `cell_prob` only.
pub fn naive_log_likelihood(
    records: &[ovrp::model::RespondentRecord],
    strata: &[Stratum],
    n_miss: f64,
    p: &ParamSet,
) -> f64 {
    let mut total = 0.0;
    for rec in records {
        let prob = ovrp::likelihood::cell_prob(rec.y, rec.r, &rec.x, &rec.z, p).unwrap();
        total += prob.ln();
    }
    if n_miss > 0.0 {
        let mass: f64 = strata
            .iter()
            .map(|s| s.share * ovrp::likelihood::nonresponse_prob(&s.z, p))
            .sum();
        total += n_miss * mass.ln();
    }
    total
}
