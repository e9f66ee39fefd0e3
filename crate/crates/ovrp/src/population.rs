//! Derived outcome distributions and the nonresponse-rate sensitivity
//! grid.
//!
//! Post-fit quantities: the marginal outcome distribution averaged over
//! strata, the conditional distributions for respondents and
//! nonrespondents (rectangle numerators over univariate denominators,
//! averaged across strata), unadjusted and survey-weighted baseline
//! proportions, and a grid runner that refits the model at each assumed
//! nonresponse rate.
//!
//! Two aggregations of the conditional distributions are provided. The
//! default weights per-stratum conditionals by the unconditional shares
//! `p_k`. The alternative reweights by each stratum's probability of the
//! conditioning event (`p_k * P(target | z_k)`, normalized), which makes
//! the respondent/nonrespondent split internally consistent with the
//! marginal mixture; it is emitted under a flag rather than silently
//! replacing the default.

use rayon::prelude::*;
use serde::Serialize;

use crate::bvn::{phi, rect_prob, RectBounds};
use crate::error::{Error, Result};
use crate::estimator::{delta_method, fit, FitConfig, FitResult};
use crate::likelihood::{dot, outcome_cuts, CellTable, NonresponseDesign};
use crate::model::{unpack_slice, ModelSpec, ParamSet, RespondentRecord, Stratum};

/// Denominators below this make a conditional distribution degenerate.
const DENOMINATOR_FLOOR: f64 = 1e-12;

/// Which subpopulation a distribution estimate describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Population,
    Respondents,
    Nonrespondents,
    Raw,
    Weighted,
}

impl Target {
    pub fn as_str(&self) -> &'static str {
        match self {
            Target::Population => "population",
            Target::Respondents => "respondents",
            Target::Nonrespondents => "nonrespondents",
            Target::Raw => "raw",
            Target::Weighted => "weighted",
        }
    }
}

/// Per-category outcome proportions for one target subpopulation.
#[derive(Debug, Clone, Serialize)]
pub struct DistributionEstimate {
    pub target: Target,
    pub proportions: Vec<f64>,
    /// Delta-method standard errors; absent for raw/weighted baselines.
    pub se: Option<Vec<f64>>,
    pub n_miss_assumed: f64,
}

/// One point of the nonresponse-rate sensitivity sweep.
#[derive(Debug, Clone)]
pub struct SensitivityResult {
    pub rate: f64,
    pub fit: FitResult,
    pub distributions: Vec<DistributionEstimate>,
}

/// Marginal outcome distribution `P(y = j) = sum_k p_k [Phi(gamma_j - a'x_k)
/// - Phi(gamma_{j-1} - a'x_k)]`, normalized by the realized share total.
pub fn outcome_dist_population(p: &ParamSet, strata: &[Stratum]) -> Vec<f64> {
    let n_cats = p.gamma.len() + 1;
    let mut out = vec![0.0; n_cats];
    let mut share_total = 0.0;
    for s in strata {
        let cuts = outcome_cuts(p, &s.x);
        share_total += s.share;
        for j in 0..n_cats {
            out[j] += s.share * (phi(cuts[j + 1]) - phi(cuts[j]));
        }
    }
    for v in &mut out {
        *v /= share_total;
    }
    out
}

fn eta_interval(target: Target, bz: f64) -> Result<(f64, f64)> {
    match target {
        Target::Nonrespondents => Ok((-bz, f64::INFINITY)),
        Target::Respondents => Ok((f64::NEG_INFINITY, -bz)),
        _ => Err(Error::InvalidArgument(
            "conditional distributions exist only for respondents/nonrespondents".into(),
        )),
    }
}

/// Per-stratum conditional outcome distribution for one target: rectangle
/// numerators over the univariate conditioning mass.
fn conditional_for_stratum(p: &ParamSet, s: &Stratum, target: Target) -> Result<Vec<f64>> {
    let n_cats = p.gamma.len() + 1;
    let bz = dot(&p.beta, &s.z);
    let denom = match target {
        Target::Nonrespondents => phi(bz),
        Target::Respondents => 1.0 - phi(bz),
        _ => unreachable!(),
    };
    if denom < DENOMINATOR_FLOOR {
        return Err(Error::DegenerateStratum {
            id: s.id.clone(),
            reason: format!("{} mass {denom:e} below {DENOMINATOR_FLOOR:e}", target.as_str()),
        });
    }
    let (eta_lo, eta_hi) = eta_interval(target, bz)?;
    let cuts = outcome_cuts(p, &s.x);
    let mut dist = Vec::with_capacity(n_cats);
    for j in 0..n_cats {
        let numer = rect_prob(RectBounds::new(cuts[j], cuts[j + 1], eta_lo, eta_hi)?, p.rho)?;
        dist.push(numer / denom);
    }
    Ok(dist)
}

/// Outcome distribution among respondents or nonrespondents, averaged over
/// strata with unconditional shares `p_k` (the default aggregation).
pub fn outcome_dist_conditional(
    p: &ParamSet,
    strata: &[Stratum],
    target: Target,
) -> Result<Vec<f64>> {
    aggregate_conditional(p, strata, target, false)
}

/// Same, reweighting each stratum by its probability of the conditioning
/// event.
pub fn outcome_dist_conditional_reweighted(
    p: &ParamSet,
    strata: &[Stratum],
    target: Target,
) -> Result<Vec<f64>> {
    aggregate_conditional(p, strata, target, true)
}

fn aggregate_conditional(
    p: &ParamSet,
    strata: &[Stratum],
    target: Target,
    reweighted: bool,
) -> Result<Vec<f64>> {
    let n_cats = p.gamma.len() + 1;
    let mut out = vec![0.0; n_cats];
    let mut weight_total = 0.0;
    for s in strata {
        let cond = conditional_for_stratum(p, s, target)?;
        let w = if reweighted {
            let bz = dot(&p.beta, &s.z);
            let event = match target {
                Target::Nonrespondents => phi(bz),
                Target::Respondents => 1.0 - phi(bz),
                _ => unreachable!(),
            };
            s.share * event
        } else {
            s.share
        };
        weight_total += w;
        for j in 0..n_cats {
            out[j] += w * cond[j];
        }
    }
    if weight_total < DENOMINATOR_FLOOR {
        return Err(Error::DegenerateStratum {
            id: "<aggregate>".into(),
            reason: "aggregate conditioning mass vanished".into(),
        });
    }
    for v in &mut out {
        *v /= weight_total;
    }
    Ok(out)
}

/// Law-of-total-probability residuals, one per stratum: the largest
/// absolute gap over outcome categories between the marginal distribution
/// and the response/nonresponse mixture.
pub fn mixture_check(p: &ParamSet, strata: &[Stratum]) -> Result<Vec<f64>> {
    let n_cats = p.gamma.len() + 1;
    strata
        .iter()
        .map(|s| {
            let resp = conditional_for_stratum(p, s, Target::Respondents)?;
            let nonresp = conditional_for_stratum(p, s, Target::Nonrespondents)?;
            let bz = dot(&p.beta, &s.z);
            let p_nr = phi(bz);
            let cuts = outcome_cuts(p, &s.x);
            let mut worst = 0.0f64;
            for j in 0..n_cats {
                let marginal = phi(cuts[j + 1]) - phi(cuts[j]);
                let mixed = (1.0 - p_nr) * resp[j] + p_nr * nonresp[j];
                worst = worst.max((marginal - mixed).abs());
            }
            Ok(worst)
        })
        .collect()
}

/// Baseline outcome proportions over respondent records: raw frequencies
/// or survey-weight-normalized frequencies.
pub fn baseline_proportions(
    records: &[RespondentRecord],
    y_categories: usize,
    weighted: bool,
) -> Result<Vec<f64>> {
    if records.is_empty() {
        return Err(Error::Data("baseline proportions need at least one record".into()));
    }
    let mut out = vec![0.0; y_categories];
    let mut total = 0.0;
    for rec in records {
        if rec.y < 1 || rec.y > y_categories {
            return Err(Error::Data(format!("record y={} outside 1..={y_categories}", rec.y)));
        }
        let w = if weighted { rec.weight } else { 1.0 };
        out[rec.y - 1] += w;
        total += w;
    }
    if total <= 0.0 {
        return Err(Error::Data("total weight is zero".into()));
    }
    for v in &mut out {
        *v /= total;
    }
    Ok(out)
}

/// The stacked map `free vector -> [population | respondents |
/// nonrespondents]` proportions, used as the delta-method transform so one
/// Jacobian evaluation covers every model-derived target.
pub fn stacked_distributions<'a>(
    spec: &ModelSpec,
    strata: &'a [Stratum],
    reweighted: bool,
) -> impl Fn(&[f64]) -> Result<Vec<f64>> + 'a {
    let spec = *spec;
    move |v: &[f64]| {
        let p = unpack_slice(v, &spec)?;
        let mut out = outcome_dist_population(&p, strata);
        let (resp, nonresp) = if reweighted {
            (
                outcome_dist_conditional_reweighted(&p, strata, Target::Respondents)?,
                outcome_dist_conditional_reweighted(&p, strata, Target::Nonrespondents)?,
            )
        } else {
            (
                outcome_dist_conditional(&p, strata, Target::Respondents)?,
                outcome_dist_conditional(&p, strata, Target::Nonrespondents)?,
            )
        };
        out.extend(resp);
        out.extend(nonresp);
        Ok(out)
    }
}

/// Fit-derived distribution estimates (population, respondents,
/// nonrespondents) with delta-method standard errors.
pub fn distribution_estimates(
    fit: &FitResult,
    spec: &ModelSpec,
    strata: &[Stratum],
    n_miss: f64,
    reweighted: bool,
) -> Result<Vec<DistributionEstimate>> {
    let y = spec.y_categories;
    let g = stacked_distributions(spec, strata, reweighted);
    let delta = delta_method(g, fit)?;
    let targets = [Target::Population, Target::Respondents, Target::Nonrespondents];
    Ok(targets
        .iter()
        .enumerate()
        .map(|(t, &target)| DistributionEstimate {
            target,
            proportions: delta.values[t * y..(t + 1) * y].to_vec(),
            se: Some(delta.se[t * y..(t + 1) * y].to_vec()),
            n_miss_assumed: n_miss,
        })
        .collect())
}

/// Refit the model at each assumed nonresponse rate and derive the full
/// set of distribution estimates. Rates are processed concurrently;
/// results preserve input order, and per-rate nonconvergence is recorded
/// in that rate's `FitResult` rather than aborting the sweep.
pub fn sensitivity_grid(
    table: &CellTable,
    strata: &[Stratum],
    rates: &[f64],
    config: &FitConfig,
    reweighted: bool,
) -> Result<Vec<SensitivityResult>> {
    for &rate in rates {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "sensitivity rate {rate} outside [0,1)"
            )));
        }
    }
    let spec = *table.spec();
    let n_resp = table.total_multiplicity();
    let results: Vec<Result<SensitivityResult>> = rates
        .par_iter()
        .map(|&rate| {
            let nr = NonresponseDesign::from_rate(rate, n_resp)?;
            let fitted = fit(table, strata, &nr, config)?;
            let distributions =
                distribution_estimates(&fitted, &spec, strata, nr.n_miss, reweighted)?;
            Ok(SensitivityResult { rate, fit: fitted, distributions })
        })
        .collect();
    results.into_iter().collect()
}
