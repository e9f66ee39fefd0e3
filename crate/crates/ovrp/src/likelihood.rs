//! Log-likelihood evaluation: respondent cell probabilities as bivariate
//! normal rectangles plus the unit-nonresponse mass term weighted by the
//! (possibly fractional) number of missing units.
//!
//! Identical `(y, r, x, z)` tuples are aggregated before evaluation since
//! rectangle kernels dominate runtime; for each unique covariate profile
//! the full corner-CDF grid is computed once and every cell mass is an
//! inclusion-exclusion of four grid corners, bit-identical to
//! [`crate::bvn::rect_prob`] on the same rectangle.
//!
//! Evaluation is parallel across profiles, but partial terms are always
//! combined in a fixed order (cells sorted by `(y, r, lexicographic x, z)`),
//! so results are bit-stable across thread counts.

use rayon::prelude::*;

use crate::bvn::{bvn_lower, clamp_rect_mass, combine_corners, phi, RectBounds};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, ParamSet, RespondentRecord, Stratum};

/// Cell probabilities below this are treated as numerically zero and make
/// the log-likelihood undefined for occupied cells.
const UNDERFLOW_FLOOR: f64 = 1e-300;

/// Unit-nonresponse design: the number of missing units entering the
/// likelihood. Real-valued so sensitivity rates map to exact masses
/// without rounding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NonresponseDesign {
    pub n_miss: f64,
}

impl NonresponseDesign {
    pub fn known_count(n_miss: f64) -> Result<Self> {
        if !(n_miss >= 0.0) || !n_miss.is_finite() {
            return Err(Error::InvalidArgument(format!("n_miss must be >= 0, got {n_miss}")));
        }
        Ok(Self { n_miss })
    }

    /// Derive `n_miss` from an assumed nonresponse rate `q` in `[0, 1)`:
    /// `n_miss = n_respondents * q / (1 - q)`.
    pub fn from_rate(rate: f64, n_respondents: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("rate must be in [0,1), got {rate}")));
        }
        Ok(Self { n_miss: n_respondents * rate / (1.0 - rate) })
    }

    pub fn none() -> Self {
        Self { n_miss: 0.0 }
    }

    /// The nonresponse rate implied by this design for a respondent count.
    pub fn implied_rate(&self, n_respondents: f64) -> f64 {
        if self.n_miss == 0.0 {
            0.0
        } else {
            self.n_miss / (self.n_miss + n_respondents)
        }
    }
}

#[derive(Debug, Clone)]
struct Profile {
    x: Vec<f64>,
    z: Vec<f64>,
    cell_start: usize,
    cell_end: usize,
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    y: usize,
    r: usize,
    mult: f64,
}

/// Respondent records aggregated into unique `(y, r, x, z)` cells with
/// multiplicities, grouped by covariate profile.
#[derive(Debug, Clone)]
pub struct CellTable {
    spec: ModelSpec,
    profiles: Vec<Profile>,
    cells: Vec<Cell>,
    /// Permutation of cell indices realizing the deterministic summation
    /// order `(y, r, lexicographic x, z)`.
    sum_order: Vec<usize>,
    n_records: usize,
    total_multiplicity: f64,
}

fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (u, v) in a.iter().zip(b) {
        match u.total_cmp(v) {
            std::cmp::Ordering::Equal => continue,
            other => return other,
        }
    }
    a.len().cmp(&b.len())
}

impl CellTable {
    /// Aggregate records with multiplicity = record count. Weights are
    /// ignored here; they only matter to
    /// [`CellTable::from_records_weighted`].
    pub fn from_records(records: &[RespondentRecord], spec: &ModelSpec) -> Result<Self> {
        Self::build(records, spec, false)
    }

    /// Aggregate records with multiplicity = sum of survey weights
    /// (possibly non-integer). Zero-weight records are dropped.
    pub fn from_records_weighted(records: &[RespondentRecord], spec: &ModelSpec) -> Result<Self> {
        Self::build(records, spec, true)
    }

    fn build(records: &[RespondentRecord], spec: &ModelSpec, weighted: bool) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Data("cannot build a cell table from zero records".into()));
        }
        for (i, rec) in records.iter().enumerate() {
            if rec.y < 1 || rec.y > spec.y_categories || rec.r < 1 || rec.r > spec.r_categories {
                return Err(Error::Data(format!(
                    "record {i}: (y={}, r={}) outside model ranges",
                    rec.y, rec.r
                )));
            }
            if rec.x.len() != spec.dx || rec.z.len() != spec.dz {
                return Err(Error::DimensionMismatch(format!(
                    "record {i}: covariate lengths ({}, {}) != spec ({}, {})",
                    rec.x.len(),
                    rec.z.len(),
                    spec.dx,
                    spec.dz
                )));
            }
            if weighted && !(rec.weight >= 0.0 && rec.weight.is_finite()) {
                return Err(Error::Data(format!("record {i}: invalid weight {}", rec.weight)));
            }
        }

        let mut order: Vec<usize> = (0..records.len()).collect();
        order.sort_by(|&i, &j| {
            let (a, b) = (&records[i], &records[j]);
            lex_cmp(&a.x, &b.x)
                .then_with(|| lex_cmp(&a.z, &b.z))
                .then_with(|| a.y.cmp(&b.y))
                .then_with(|| a.r.cmp(&b.r))
        });

        let mut profiles: Vec<Profile> = Vec::new();
        let mut cells: Vec<Cell> = Vec::new();
        for &idx in &order {
            let rec = &records[idx];
            let mult = if weighted { rec.weight } else { 1.0 };
            if weighted && mult == 0.0 {
                continue;
            }
            let same_profile = profiles.last().is_some_and(|p| p.x == rec.x && p.z == rec.z);
            if !same_profile {
                let start = cells.len();
                profiles.push(Profile {
                    x: rec.x.clone(),
                    z: rec.z.clone(),
                    cell_start: start,
                    cell_end: start,
                });
            }
            let profile = profiles.last_mut().expect("profile exists");
            let same_cell = profile.cell_end > profile.cell_start
                && cells.last().is_some_and(|c| c.y == rec.y && c.r == rec.r);
            if same_cell {
                cells.last_mut().expect("cell exists").mult += mult;
            } else {
                cells.push(Cell { y: rec.y, r: rec.r, mult });
                profile.cell_end = cells.len();
            }
        }
        if cells.is_empty() {
            return Err(Error::Data("all records have zero weight".into()));
        }

        let profile_of: Vec<usize> = profiles
            .iter()
            .enumerate()
            .flat_map(|(pi, p)| std::iter::repeat(pi).take(p.cell_end - p.cell_start))
            .collect();
        let mut sum_order: Vec<usize> = (0..cells.len()).collect();
        sum_order.sort_by(|&i, &j| {
            let (ci, cj) = (&cells[i], &cells[j]);
            ci.y.cmp(&cj.y).then_with(|| ci.r.cmp(&cj.r)).then_with(|| {
                let (pi, pj) = (&profiles[profile_of[i]], &profiles[profile_of[j]]);
                lex_cmp(&pi.x, &pj.x).then_with(|| lex_cmp(&pi.z, &pj.z))
            })
        });

        let total_multiplicity = cells.iter().map(|c| c.mult).sum();
        Ok(Self {
            spec: *spec,
            profiles,
            cells,
            sum_order,
            n_records: records.len(),
            total_multiplicity,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn n_profiles(&self) -> usize {
        self.profiles.len()
    }

    pub fn n_records(&self) -> usize {
        self.n_records
    }

    /// Sum of cell multiplicities (= record count when unweighted).
    pub fn total_multiplicity(&self) -> f64 {
        self.total_multiplicity
    }

    /// Iterate `(y, r, x, z, multiplicity)` over aggregated cells.
    pub fn iter_cells(&self) -> impl Iterator<Item = (usize, usize, &[f64], &[f64], f64)> {
        self.profiles.iter().flat_map(|p| {
            self.cells[p.cell_start..p.cell_end]
                .iter()
                .map(move |c| (c.y, c.r, p.x.as_slice(), p.z.as_slice(), c.mult))
        })
    }
}

pub(crate) fn dot(coef: &[f64], x: &[f64]) -> f64 {
    assert_eq!(coef.len(), x.len(), "design vector length mismatch");
    coef.iter().zip(x).map(|(a, b)| a * b).sum()
}

/// Latent-scale cutpoints for the outcome equation at a covariate profile:
/// `[-inf, gamma_1 - a'x, ..., gamma_{Y-1} - a'x, +inf]`.
pub(crate) fn outcome_cuts(p: &ParamSet, x: &[f64]) -> Vec<f64> {
    let shift = dot(&p.alpha, x);
    let mut cuts = Vec::with_capacity(p.gamma.len() + 2);
    cuts.push(f64::NEG_INFINITY);
    cuts.extend(p.gamma.iter().map(|g| g - shift));
    cuts.push(f64::INFINITY);
    cuts
}

/// Latent-scale cutpoints for the response equation (respondent categories
/// only): `[-inf, theta_1 - b'z, ..., theta_R - b'z]`.
pub(crate) fn response_cuts(p: &ParamSet, z: &[f64]) -> Vec<f64> {
    let shift = dot(&p.beta, z);
    let mut cuts = Vec::with_capacity(p.theta.len() + 1);
    cuts.push(f64::NEG_INFINITY);
    cuts.extend(p.theta.iter().map(|t| t - shift));
    cuts
}

/// Joint probability of `(y, r)` at covariates `(x, z)`: the bivariate
/// normal mass of the rectangle
/// `(gamma_{y-1} - a'x, gamma_y - a'x] x (theta_{r-1} - b'z, theta_r - b'z]`
/// with `gamma_0 = theta_0 = -inf`.
pub fn cell_prob(y: usize, r: usize, x: &[f64], z: &[f64], p: &ParamSet) -> Result<f64> {
    let y_max = p.gamma.len() + 1;
    let r_max = p.theta.len();
    if y < 1 || y > y_max || r < 1 || r > r_max {
        return Err(Error::InvalidArgument(format!(
            "cell_prob: (y={y}, r={r}) outside (1..={y_max}, 1..={r_max})"
        )));
    }
    let a = outcome_cuts(p, x);
    let b = response_cuts(p, z);
    let bounds = RectBounds::new(a[y - 1], a[y], b[r - 1], b[r])?;
    crate::bvn::rect_prob(bounds, p.rho)
}

/// Marginal probability of unit nonresponse at covariates `z`:
/// `P(r = R+1 | z) = Phi(b'z - theta_R) = Phi(b'z)` under the top-threshold
/// normalization.
pub fn nonresponse_prob(z: &[f64], p: &ParamSet) -> f64 {
    let top = *p.theta.last().expect("theta nonempty");
    phi(dot(&p.beta, z) - top)
}

/// Aggregate nonresponse mass `sum_k share_k * P(r = R+1 | z_k)`.
pub fn aggregate_nonresponse_mass(strata: &[Stratum], p: &ParamSet) -> f64 {
    strata.iter().map(|s| s.share * nonresponse_prob(&s.z, p)).sum()
}

/// Per-cell log terms in profile-major cell order. Each profile computes
/// its corner-CDF grid once; a cell's mass is the inclusion-exclusion of
/// four corners, exactly as `rect_prob` would produce.
fn cell_log_terms(table: &CellTable, p: &ParamSet) -> Result<Vec<f64>> {
    let eval_profile = |profile: &Profile| -> Result<Vec<f64>> {
        let a = outcome_cuts(p, &profile.x);
        let b = response_cuts(p, &profile.z);
        let n_b = b.len();
        // corner CDFs C[i*n_b + m] = P(eps <= a_i, eta <= b_m)
        let mut corners = vec![0.0f64; a.len() * n_b];
        for (i, &ai) in a.iter().enumerate() {
            for (m, &bm) in b.iter().enumerate() {
                corners[i * n_b + m] = bvn_lower(ai, bm, p.rho);
            }
        }
        let cells = &table.cells[profile.cell_start..profile.cell_end];
        let mut terms = Vec::with_capacity(cells.len());
        for c in cells {
            let (y, r) = (c.y, c.r);
            let raw = combine_corners(
                corners[y * n_b + r],
                corners[(y - 1) * n_b + r],
                corners[y * n_b + r - 1],
                corners[(y - 1) * n_b + r - 1],
            );
            let mass = clamp_rect_mass(raw)?;
            if mass < UNDERFLOW_FLOOR {
                return Err(Error::LikelihoodUnderflow { y, r, profile: profile.cell_start });
            }
            terms.push(c.mult * mass.ln());
        }
        Ok(terms)
    };

    let per_profile: Vec<Result<Vec<f64>>> = if table.profiles.len() >= 16 {
        table.profiles.par_iter().map(eval_profile).collect()
    } else {
        table.profiles.iter().map(eval_profile).collect()
    };

    let mut terms = Vec::with_capacity(table.cells.len());
    for result in per_profile {
        terms.extend(result?);
    }
    Ok(terms)
}

/// Log-likelihood at `p`: the respondent cell sum plus
/// `n_miss * log(sum_k share_k * P(nonresponse | z_k))`. When `n_miss = 0`
/// the nonresponse term is dropped before any log is taken, so a vanishing
/// nonresponse mass is only an error when it actually enters.
pub fn log_likelihood(
    table: &CellTable,
    strata: &[Stratum],
    nr: &NonresponseDesign,
    p: &ParamSet,
) -> Result<f64> {
    p.validate(&table.spec)?;
    let terms = cell_log_terms(table, p)?;
    let mut total = 0.0;
    for &idx in &table.sum_order {
        total += terms[idx];
    }
    if nr.n_miss > 0.0 {
        let mass = aggregate_nonresponse_mass(strata, p);
        if mass < UNDERFLOW_FLOOR {
            return Err(Error::NonresponseMassUnderflow);
        }
        total += nr.n_miss * mass.ln();
    }
    Ok(total)
}

/// Log-likelihood as a function of the unconstrained vector.
pub fn log_likelihood_free(
    table: &CellTable,
    strata: &[Stratum],
    nr: &NonresponseDesign,
    v: &[f64],
) -> Result<f64> {
    let p = crate::model::unpack_slice(v, &table.spec)?;
    log_likelihood(table, strata, nr, &p)
}

/// Per-coordinate central-difference step for gradients of the free
/// vector: `max(1e-6, 1e-7 |v_i|)`.
pub(crate) fn gradient_step(v_i: f64) -> f64 {
    (1e-7 * v_i.abs()).max(1e-6)
}

/// Central finite-difference gradient of the log-likelihood in the
/// unconstrained coordinates. Underflow at any displaced point propagates
/// as an error.
pub fn loglik_gradient(
    table: &CellTable,
    strata: &[Stratum],
    nr: &NonresponseDesign,
    v: &crate::model::FreeVector,
) -> Result<Vec<f64>> {
    loglik_gradient_slice(table, strata, nr, v.as_slice())
}

pub(crate) fn loglik_gradient_slice(
    table: &CellTable,
    strata: &[Stratum],
    nr: &NonresponseDesign,
    v: &[f64],
) -> Result<Vec<f64>> {
    let eval_coord = |i: usize| -> Result<f64> {
        let h = gradient_step(v[i]);
        let mut hi = v.to_vec();
        hi[i] += h;
        let mut lo = v.to_vec();
        lo[i] -= h;
        let f_hi = log_likelihood_free(table, strata, nr, &hi)?;
        let f_lo = log_likelihood_free(table, strata, nr, &lo)?;
        Ok((f_hi - f_lo) / (2.0 * h))
    };
    let parts: Vec<Result<f64>> = if v.len() >= 4 && table.profiles.len() >= 16 {
        (0..v.len()).into_par_iter().map(eval_coord).collect()
    } else {
        (0..v.len()).map(eval_coord).collect()
    };
    parts.into_iter().collect()
}
