//! Domain types for data, strata, and structural parameters, plus the
//! bijective transform between the constrained parameter set and the
//! unconstrained vector the optimizer works on.
//!
//! Threshold normalization anchors the TOP threshold of each equation at
//! zero (`gamma[Y-1] = 0`, `theta[R] = 0` in 1-based terms) and builds the
//! remaining thresholds downward through cumulative exponentials, so both
//! equations carry identified intercepts in their covariate vectors. The
//! latent correlation maps through `tanh`.

use serde::Serialize;

use crate::error::{Error, Result};

/// Clamp for free threshold-gap exponents; gaps beyond `e^30` are
/// statistically meaningless and would overflow downstream arithmetic.
const GAP_EXPONENT_CLAMP: f64 = 30.0;
/// Clamp for the free correlation coordinate; `tanh(18)` is the largest
/// value still strictly below 1 in f64.
const RHO_Z_CLAMP: f64 = 18.0;

/// Shape of the two-equation model: outcome categories, observed proxy
/// categories (unit nonresponse is the implicit extra category `R+1`), and
/// the two design dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ModelSpec {
    pub y_categories: usize,
    pub r_categories: usize,
    pub dx: usize,
    pub dz: usize,
}

impl ModelSpec {
    pub fn new(y_categories: usize, r_categories: usize, dx: usize, dz: usize) -> Result<Self> {
        if y_categories < 2 {
            return Err(Error::InvalidArgument(format!(
                "y_categories must be >= 2, got {y_categories}"
            )));
        }
        if r_categories < 1 || dx < 1 || dz < 1 {
            return Err(Error::InvalidArgument(format!(
                "r_categories, dx, dz must be >= 1, got ({r_categories}, {dx}, {dz})"
            )));
        }
        Ok(Self { y_categories, r_categories, dx, dz })
    }

    /// Dimension of the unconstrained vector: two coefficient blocks, the
    /// free thresholds of each equation, and the correlation coordinate.
    pub fn free_dim(&self) -> usize {
        self.dx + self.dz + (self.y_categories - 2) + (self.r_categories - 1) + 1
    }

    /// Dimension of the stacked structural vector
    /// `[alpha, beta, gamma, theta, rho]` including the two normalized
    /// zero thresholds.
    pub fn structural_dim(&self) -> usize {
        self.dx + self.dz + (self.y_categories - 1) + self.r_categories + 1
    }
}

/// One respondent: ordinal outcome `y` in `1..=Y`, ordinal proxy `r` in
/// `1..=R`, design vectors, and an optional survey weight (default 1).
#[derive(Debug, Clone, PartialEq)]
pub struct RespondentRecord {
    pub y: usize,
    pub r: usize,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub weight: f64,
}

impl RespondentRecord {
    pub fn new(y: usize, r: usize, x: Vec<f64>, z: Vec<f64>) -> Self {
        Self { y, r, x, z, weight: 1.0 }
    }
}

/// A population cell: covariate profiles for both equations and a known
/// population share.
#[derive(Debug, Clone, PartialEq)]
pub struct Stratum {
    pub id: String,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub share: f64,
}

/// Structural parameters. Invariants: `gamma` and `theta` strictly
/// increasing with their last entries exactly zero, `|rho| < 1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamSet {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub theta: Vec<f64>,
    pub rho: f64,
}

impl ParamSet {
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.alpha.len() != spec.dx || self.beta.len() != spec.dz {
            return Err(Error::DimensionMismatch(format!(
                "alpha/beta lengths ({}, {}) do not match spec ({}, {})",
                self.alpha.len(),
                self.beta.len(),
                spec.dx,
                spec.dz
            )));
        }
        if self.gamma.len() != spec.y_categories - 1 {
            return Err(Error::DimensionMismatch(format!(
                "gamma length {} != Y-1 = {}",
                self.gamma.len(),
                spec.y_categories - 1
            )));
        }
        if self.theta.len() != spec.r_categories {
            return Err(Error::DimensionMismatch(format!(
                "theta length {} != R = {}",
                self.theta.len(),
                spec.r_categories
            )));
        }
        for (name, v) in [("gamma", &self.gamma), ("theta", &self.theta)] {
            if v.last().copied() != Some(0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be normalized with top threshold exactly 0"
                )));
            }
            if v.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be strictly increasing: {v:?}"
                )));
            }
            if v.iter().any(|t| !t.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} has non-finite entry")));
            }
        }
        if !(self.rho.abs() < 1.0) {
            return Err(Error::InvalidArgument(format!("|rho| must be < 1, got {}", self.rho)));
        }
        if self.alpha.iter().chain(self.beta.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("alpha/beta must be finite".into()));
        }
        Ok(())
    }

    /// Stack `[alpha, beta, gamma, theta, rho]` into one vector. The two
    /// normalized zero thresholds are included (with identically zero
    /// variance downstream).
    pub fn to_structural(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(
            self.alpha.len() + self.beta.len() + self.gamma.len() + self.theta.len() + 1,
        );
        v.extend_from_slice(&self.alpha);
        v.extend_from_slice(&self.beta);
        v.extend_from_slice(&self.gamma);
        v.extend_from_slice(&self.theta);
        v.push(self.rho);
        v
    }

    /// Labels aligned with [`ParamSet::to_structural`]. Coefficients are
    /// 0-based design columns; thresholds are 1-based category cutpoints.
    pub fn structural_names(spec: &ModelSpec) -> Vec<String> {
        let mut names = Vec::with_capacity(spec.structural_dim());
        names.extend((0..spec.dx).map(|i| format!("alpha[{i}]")));
        names.extend((0..spec.dz).map(|i| format!("beta[{i}]")));
        names.extend((1..spec.y_categories).map(|j| format!("gamma[{j}]")));
        names.extend((1..=spec.r_categories).map(|j| format!("theta[{j}]")));
        names.push("rho".into());
        names
    }
}

/// Unconstrained parameter vector, layout
/// `[alpha | beta | gamma gaps (log) | theta gaps (log) | atanh(rho)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FreeVector(pub Vec<f64>);

impl FreeVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Map a valid `ParamSet` to its unconstrained coordinates. Inverse of
/// [`unpack`]; errors if the invariants do not hold.
pub fn pack(params: &ParamSet, spec: &ModelSpec) -> Result<FreeVector> {
    params.validate(spec)?;
    let mut v = Vec::with_capacity(spec.free_dim());
    v.extend_from_slice(&params.alpha);
    v.extend_from_slice(&params.beta);
    for gaps in [&params.gamma, &params.theta] {
        for w in gaps.windows(2) {
            v.push((w[1] - w[0]).ln());
        }
    }
    v.push(params.rho.atanh());
    Ok(FreeVector(v))
}

/// Reconstruct a `ParamSet` from unconstrained coordinates. The output
/// satisfies all invariants by construction: gap exponents clamp to
/// `±30`, the correlation coordinate clamps to `±18`.
pub fn unpack(v: &FreeVector, spec: &ModelSpec) -> Result<ParamSet> {
    unpack_slice(v.as_slice(), spec)
}

pub fn unpack_slice(v: &[f64], spec: &ModelSpec) -> Result<ParamSet> {
    if v.len() != spec.free_dim() {
        return Err(Error::DimensionMismatch(format!(
            "free vector length {} != expected {}",
            v.len(),
            spec.free_dim()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("free vector has non-finite entry".into()));
    }
    let (dx, dz) = (spec.dx, spec.dz);
    let ny = spec.y_categories - 2;
    let nr = spec.r_categories - 1;
    let alpha = v[..dx].to_vec();
    let beta = v[dx..dx + dz].to_vec();
    let gamma = thresholds_from_gaps(&v[dx + dz..dx + dz + ny]);
    let theta = thresholds_from_gaps(&v[dx + dz + ny..dx + dz + ny + nr]);
    let rho = v[dx + dz + ny + nr].clamp(-RHO_Z_CLAMP, RHO_Z_CLAMP).tanh();
    Ok(ParamSet { alpha, beta, gamma, theta, rho })
}

fn thresholds_from_gaps(gaps: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; gaps.len() + 1];
    let mut acc = 0.0f64;
    for j in (0..gaps.len()).rev() {
        let gap = gaps[j].clamp(-GAP_EXPONENT_CLAMP, GAP_EXPONENT_CLAMP).exp();
        // keep strict monotonicity even when the accumulated magnitude
        // would otherwise absorb a clamped-tiny gap
        acc += gap.max(acc * (4.0 * f64::EPSILON));
        out[j] = -acc;
    }
    out
}

/// One validation finding; `code` is stable and machine-readable.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationIssue {
    pub code: &'static str,
    pub message: String,
}

/// Full-scan validation result; collection never aborts early.
#[derive(Debug, Clone, Default, Serialize)]
pub struct ValidationReport {
    pub errors: Vec<ValidationIssue>,
    pub warnings: Vec<ValidationIssue>,
    pub n_records: usize,
    pub n_zero_weight: usize,
    pub share_sum: f64,
    /// Occupancy of outcome categories `1..=Y`.
    pub y_counts: Vec<usize>,
    /// Occupancy of proxy categories `1..=R`.
    pub r_counts: Vec<usize>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }

    fn error(&mut self, code: &'static str, message: String) {
        self.errors.push(ValidationIssue { code, message });
    }

    fn warn(&mut self, code: &'static str, message: String) {
        self.warnings.push(ValidationIssue { code, message });
    }
}

/// Scan records and strata for identification and consistency problems:
/// empty categories (their thresholds would be unidentified), share sums,
/// dimension mismatches, and zero-weight records.
pub fn validate_dataset(
    records: &[RespondentRecord],
    strata: &[Stratum],
    spec: &ModelSpec,
) -> ValidationReport {
    let mut report = ValidationReport {
        y_counts: vec![0; spec.y_categories],
        r_counts: vec![0; spec.r_categories],
        ..Default::default()
    };
    report.n_records = records.len();

    if records.is_empty() {
        report.error("no_records", "no respondent records".into());
    }
    for (i, rec) in records.iter().enumerate() {
        if rec.y < 1 || rec.y > spec.y_categories {
            report.error(
                "category_range",
                format!("record {i}: y={} outside 1..={}", rec.y, spec.y_categories),
            );
        } else {
            report.y_counts[rec.y - 1] += 1;
        }
        if rec.r < 1 || rec.r > spec.r_categories {
            report.error(
                "category_range",
                format!("record {i}: r={} outside 1..={}", rec.r, spec.r_categories),
            );
        } else {
            report.r_counts[rec.r - 1] += 1;
        }
        if rec.x.len() != spec.dx || rec.z.len() != spec.dz {
            report.error(
                "dimension",
                format!(
                    "record {i}: covariate lengths ({}, {}) != spec ({}, {})",
                    rec.x.len(),
                    rec.z.len(),
                    spec.dx,
                    spec.dz
                ),
            );
        }
        if rec.x.iter().chain(rec.z.iter()).any(|v| !v.is_finite()) {
            report.error("non_finite", format!("record {i}: non-finite covariate"));
        }
        if !(rec.weight >= 0.0) || !rec.weight.is_finite() {
            report.error("weight", format!("record {i}: weight {} invalid", rec.weight));
        } else if rec.weight == 0.0 {
            report.n_zero_weight += 1;
        }
    }
    if !records.is_empty() {
        let empty_y: Vec<usize> =
            (1..=spec.y_categories).filter(|j| report.y_counts[j - 1] == 0).collect();
        let empty_r: Vec<usize> =
            (1..=spec.r_categories).filter(|j| report.r_counts[j - 1] == 0).collect();
        for j in empty_y {
            report.error("empty_category", format!("outcome category {j} empty"));
        }
        for j in empty_r {
            report.error("empty_category", format!("proxy category {j} empty"));
        }
    }
    if report.n_zero_weight > 0 {
        report.warn(
            "zero_weight",
            format!("{} zero-weight records", report.n_zero_weight),
        );
    }

    if strata.is_empty() {
        report.error("no_strata", "no strata".into());
    }
    let mut share_sum = 0.0;
    for (k, s) in strata.iter().enumerate() {
        if s.x.len() != spec.dx || s.z.len() != spec.dz {
            report.error(
                "dimension",
                format!(
                    "stratum {} ({}): covariate lengths ({}, {}) != spec ({}, {})",
                    k,
                    s.id,
                    s.x.len(),
                    s.z.len(),
                    spec.dx,
                    spec.dz
                ),
            );
        }
        if !(s.share > 0.0 && s.share <= 1.0) || !s.share.is_finite() {
            report.error(
                "share_range",
                format!("stratum {} ({}): share {} outside (0,1]", k, s.id, s.share),
            );
        }
        if s.x.iter().chain(s.z.iter()).any(|v| !v.is_finite()) {
            report.error("non_finite", format!("stratum {} ({}): non-finite covariate", k, s.id));
        }
        share_sum += s.share;
    }
    report.share_sum = share_sum;
    if !strata.is_empty() && (share_sum - 1.0).abs() > 1e-9 {
        report.error("share_sum", format!("shares sum {share_sum} != 1"));
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::SmallRng;
    use rand::{RngExt, SeedableRng};

    fn spec(y: usize, r: usize, dx: usize, dz: usize) -> ModelSpec {
        ModelSpec::new(y, r, dx, dz).unwrap()
    }

    #[test]
    fn free_dim_matches_parameter_count() {
        let s = spec(5, 7, 3, 4);
        assert_eq!(s.free_dim(), 3 + 4 + 3 + 6 + 1);
        // binary outcome, single proxy level: no free thresholds at all
        let s = spec(2, 1, 2, 3);
        assert_eq!(s.free_dim(), 2 + 3 + 1);
    }

    #[test]
    fn unpack_zero_vector() {
        let s = spec(3, 2, 1, 1);
        let p = unpack(&FreeVector(vec![0.0; s.free_dim()]), &s).unwrap();
        assert_eq!(p.alpha, vec![0.0]);
        assert_eq!(p.beta, vec![0.0]);
        assert_eq!(p.gamma, vec![-1.0, 0.0]);
        assert_eq!(p.theta, vec![-1.0, 0.0]);
        assert_eq!(p.rho, 0.0);
    }

    #[test]
    fn pack_threshold_gaps() {
        let s = spec(4, 1, 1, 1);
        let p = ParamSet {
            alpha: vec![0.0],
            beta: vec![0.0],
            gamma: vec![-1.3, -0.4, 0.0],
            theta: vec![0.0],
            rho: 0.0,
        };
        let v = pack(&p, &s).unwrap();
        let xi = &v.as_slice()[2..4];
        assert!((xi[0] - 0.9f64.ln()).abs() < 1e-15);
        assert!((xi[1] - 0.4f64.ln()).abs() < 1e-15);
        // zeta for rho = 0
        assert_eq!(*v.as_slice().last().unwrap(), 0.0);
    }

    #[test]
    fn rho_transform() {
        let s = spec(2, 1, 1, 1);
        let mut v = vec![0.0; s.free_dim()];
        *v.last_mut().unwrap() = 0.49f64.atanh();
        let p = unpack(&FreeVector(v), &s).unwrap();
        assert!((p.rho - 0.49).abs() < 1e-15);
    }

    #[test]
    fn roundtrip_random_paramsets() {
        let mut rng = SmallRng::seed_from_u64(0x0c0ffee);
        for _ in 0..1000 {
            let y = rng.random_range(2..6);
            let r = rng.random_range(1..8);
            let dx = rng.random_range(1..4);
            let dz = rng.random_range(1..4);
            let s = spec(y, r, dx, dz);
            let mut v: Vec<f64> = (0..s.free_dim()).map(|_| rng.random_range(-2.5..1.5)).collect();
            *v.last_mut().unwrap() = rng.random_range(-2.0..2.0);
            let p = unpack(&FreeVector(v.clone()), &s).unwrap();
            p.validate(&s).unwrap();
            let v2 = pack(&p, &s).unwrap();
            for (a, b) in v.iter().zip(v2.as_slice()) {
                assert!((a - b).abs() <= 1e-12, "free roundtrip: {a} vs {b}");
            }
            let p2 = unpack(&v2, &s).unwrap();
            for (a, b) in p.to_structural().iter().zip(p2.to_structural()) {
                assert!((a - b).abs() <= 1e-12, "structural roundtrip: {a} vs {b}");
            }
        }
    }

    #[test]
    fn pack_rejects_invalid() {
        let s = spec(3, 2, 1, 1);
        // top threshold not zero
        let p = ParamSet {
            alpha: vec![0.0],
            beta: vec![0.0],
            gamma: vec![-1.0, 0.5],
            theta: vec![-1.0, 0.0],
            rho: 0.0,
        };
        assert!(pack(&p, &s).is_err());
        // non-increasing
        let p = ParamSet {
            alpha: vec![0.0],
            beta: vec![0.0],
            gamma: vec![0.2, 0.0],
            theta: vec![-1.0, 0.0],
            rho: 0.0,
        };
        assert!(pack(&p, &s).is_err());
        // |rho| >= 1
        let p = ParamSet {
            alpha: vec![0.0],
            beta: vec![0.0],
            gamma: vec![-1.0, 0.0],
            theta: vec![-1.0, 0.0],
            rho: 1.0,
        };
        assert!(pack(&p, &s).is_err());
        // length mismatch in unpack
        assert!(unpack(&FreeVector(vec![0.0; 3]), &s).is_err());
    }

    proptest! {
        #[test]
        fn unpack_always_valid(
            y in 2usize..6,
            r in 1usize..8,
            raw in prop::collection::vec(-40.0f64..40.0, 0..24)
        ) {
            let s = spec(y, r, 2, 2);
            let mut v = vec![0.0; s.free_dim()];
            for (slot, val) in v.iter_mut().zip(raw.iter()) {
                *slot = *val;
            }
            let p = unpack(&FreeVector(v), &s).unwrap();
            prop_assert!(p.validate(&s).is_ok());
            prop_assert!(p.gamma.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(p.theta.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(p.rho.abs() < 1.0);
        }
    }

    #[test]
    fn validation_empty_category_and_shares() {
        let s = spec(2, 4, 1, 1);
        // no r=3 observations
        let records: Vec<RespondentRecord> = [(1, 1), (2, 2), (1, 4), (2, 1)]
            .iter()
            .map(|&(y, r)| RespondentRecord::new(y, r, vec![1.0], vec![1.0]))
            .collect();
        let strata = vec![
            Stratum { id: "a".into(), x: vec![1.0], z: vec![1.0], share: 0.5 },
            Stratum { id: "b".into(), x: vec![1.0], z: vec![1.0], share: 0.48 },
        ];
        let report = validate_dataset(&records, &strata, &s);
        assert!(!report.is_ok());
        assert!(report
            .errors
            .iter()
            .any(|e| e.message.contains("proxy category 3 empty")));
        assert!(report.errors.iter().any(|e| e.code == "share_sum" && e.message.contains("0.98")));
    }

    #[test]
    fn validation_clean_dataset() {
        let s = spec(2, 2, 1, 1);
        let records: Vec<RespondentRecord> = [(1, 1), (2, 2), (1, 2), (2, 1)]
            .iter()
            .map(|&(y, r)| RespondentRecord::new(y, r, vec![1.0], vec![1.0]))
            .collect();
        let strata = vec![Stratum { id: "a".into(), x: vec![1.0], z: vec![1.0], share: 1.0 }];
        let report = validate_dataset(&records, &strata, &s);
        assert!(report.is_ok(), "{:?}", report.errors);
        assert!(report.warnings.is_empty());
        assert_eq!(report.n_records, 4);
    }
}
