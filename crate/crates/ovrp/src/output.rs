//! Result serialization: the versioned JSON document schema, the
//! long-format distributions CSV for downstream plotting, and atomic file
//! writes (write-temp-then-rename).
//!
//! Floating-point values serialize in shortest-roundtrip form, so reading
//! a result back reproduces the exact binary values.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimator::FitResult;
use crate::likelihood::{CellTable, NonresponseDesign};
use crate::model::{ModelSpec, ParamSet};
use crate::population::{DistributionEstimate, SensitivityResult};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize)]
pub struct ModelBlock {
    pub y_categories: usize,
    pub r_categories: usize,
    pub dx: usize,
    pub dz: usize,
    pub n_respondents: usize,
    pub n_cells: usize,
    pub n_strata: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct NonresponseBlock {
    pub n_miss: f64,
    pub rate: f64,
}

/// Standard errors shaped like the parameter set (zero entries for the
/// normalized thresholds).
#[derive(Debug, Clone, Serialize)]
pub struct SeBlock {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub theta: Vec<f64>,
    pub rho: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RestartBlock {
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub started: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceBlock {
    pub converged: bool,
    pub any_restart_converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub restarts: Vec<RestartBlock>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DistributionBlock {
    pub target: &'static str,
    /// Assumed nonresponse rate behind the estimate; absent for the
    /// model-free baselines.
    pub rate: Option<f64>,
    pub n_miss_assumed: Option<f64>,
    pub proportions: Vec<f64>,
    pub se: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitDoc {
    pub schema_version: u32,
    pub timestamp_unix: u64,
    pub model: ModelBlock,
    pub nonresponse: NonresponseBlock,
    pub params: ParamSet,
    pub se: SeBlock,
    pub parameter_names: Vec<String>,
    /// Row-major lower triangle (with diagonal) of the structural
    /// covariance, ordered as `parameter_names`.
    pub cov_lower_triangle: Vec<f64>,
    pub loglik: f64,
    pub convergence: ConvergenceBlock,
    pub distributions: Vec<DistributionBlock>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SensitivityEntry {
    pub rate: f64,
    pub nonresponse: NonresponseBlock,
    pub params: ParamSet,
    pub se: SeBlock,
    pub loglik: f64,
    pub convergence: ConvergenceBlock,
    pub distributions: Vec<DistributionBlock>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SensitivityDoc {
    pub schema_version: u32,
    pub timestamp_unix: u64,
    pub model: ModelBlock,
    pub parameter_names: Vec<String>,
    pub results: Vec<SensitivityEntry>,
}

pub fn timestamp_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn model_block(table: &CellTable, n_strata: usize) -> ModelBlock {
    let spec = table.spec();
    ModelBlock {
        y_categories: spec.y_categories,
        r_categories: spec.r_categories,
        dx: spec.dx,
        dz: spec.dz,
        n_respondents: table.n_records(),
        n_cells: table.n_cells(),
        n_strata,
    }
}

fn se_block(fit: &FitResult, spec: &ModelSpec) -> SeBlock {
    let se = &fit.se_structural;
    let (dx, dz) = (spec.dx, spec.dz);
    let ny = spec.y_categories - 1;
    let nr = spec.r_categories;
    SeBlock {
        alpha: se[..dx].to_vec(),
        beta: se[dx..dx + dz].to_vec(),
        gamma: se[dx + dz..dx + dz + ny].to_vec(),
        theta: se[dx + dz + ny..dx + dz + ny + nr].to_vec(),
        rho: se[dx + dz + ny + nr],
    }
}

fn lower_triangle(m: &nalgebra::DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in 0..=i {
            out.push(m[(i, j)]);
        }
    }
    out
}

fn convergence_block(fit: &FitResult) -> ConvergenceBlock {
    ConvergenceBlock {
        converged: fit.converged,
        any_restart_converged: fit.any_restart_converged(),
        iterations: fit.iterations,
        gradient_norm: fit.gradient_norm,
        restarts: fit
            .restarts
            .iter()
            .map(|r| RestartBlock {
                loglik: r.loglik,
                converged: r.converged,
                iterations: r.iterations,
                started: r.started,
            })
            .collect(),
    }
}

pub fn distribution_block(est: &DistributionEstimate, rate: Option<f64>) -> DistributionBlock {
    DistributionBlock {
        target: est.target.as_str(),
        rate,
        n_miss_assumed: rate.map(|_| est.n_miss_assumed),
        proportions: est.proportions.clone(),
        se: est.se.clone(),
    }
}

pub fn build_fit_doc(
    fit: &FitResult,
    table: &CellTable,
    n_strata: usize,
    nr: &NonresponseDesign,
    distributions: Vec<DistributionBlock>,
) -> FitDoc {
    let spec = table.spec();
    FitDoc {
        schema_version: SCHEMA_VERSION,
        timestamp_unix: timestamp_unix(),
        model: model_block(table, n_strata),
        nonresponse: NonresponseBlock {
            n_miss: nr.n_miss,
            rate: nr.implied_rate(table.total_multiplicity()),
        },
        params: fit.params.clone(),
        se: se_block(fit, spec),
        parameter_names: ParamSet::structural_names(spec),
        cov_lower_triangle: lower_triangle(&fit.cov_structural),
        loglik: fit.loglik,
        convergence: convergence_block(fit),
        distributions,
        warnings: fit.warnings.clone(),
    }
}

pub fn build_sensitivity_doc(
    results: &[SensitivityResult],
    table: &CellTable,
    n_strata: usize,
    baselines: &[DistributionEstimate],
) -> SensitivityDoc {
    let spec = table.spec();
    let n_resp = table.total_multiplicity();
    SensitivityDoc {
        schema_version: SCHEMA_VERSION,
        timestamp_unix: timestamp_unix(),
        model: model_block(table, n_strata),
        parameter_names: ParamSet::structural_names(spec),
        results: results
            .iter()
            .map(|point| {
                let n_miss = n_resp * point.rate / (1.0 - point.rate);
                let mut distributions: Vec<DistributionBlock> = point
                    .distributions
                    .iter()
                    .map(|d| distribution_block(d, Some(point.rate)))
                    .collect();
                distributions
                    .extend(baselines.iter().map(|d| distribution_block(d, None)));
                SensitivityEntry {
                    rate: point.rate,
                    nonresponse: NonresponseBlock { n_miss, rate: point.rate },
                    params: point.fit.params.clone(),
                    se: se_block(&point.fit, spec),
                    loglik: point.fit.loglik,
                    convergence: convergence_block(&point.fit),
                    distributions,
                    warnings: point.fit.warnings.clone(),
                }
            })
            .collect(),
    }
}

/// Long-format distributions CSV with exactly the columns
/// `target,rate,category,proportion,se` in that order. Baseline rows leave
/// `rate` (and `se`) empty.
pub fn distributions_csv(blocks: &[DistributionBlock]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["target", "rate", "category", "proportion", "se"])?;
    for block in blocks {
        for (j, &p) in block.proportions.iter().enumerate() {
            let rate = block.rate.map(|r| r.to_string()).unwrap_or_default();
            let se = block
                .se
                .as_ref()
                .map(|se| se[j].to_string())
                .unwrap_or_default();
            w.write_record([
                block.target,
                &rate,
                &(j + 1).to_string(),
                &p.to_string(),
                &se,
            ])?;
        }
    }
    w.into_inner().map_err(|e| Error::Internal(format!("csv flush: {e}")))
}

pub fn to_json_pretty<T: Serialize>(doc: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(doc)
        .map_err(|e| Error::Internal(format!("json serialization: {e}")))?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Write through a temp file in the same directory, then rename, so
/// readers never observe a half-written file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => std::path::PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", file_name.to_string_lossy(), std::process::id()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::population::Target;

    #[test]
    fn csv_columns_exact() {
        let blocks = vec![
            DistributionBlock {
                target: "population",
                rate: Some(0.5),
                n_miss_assumed: Some(10.0),
                proportions: vec![0.25, 0.75],
                se: Some(vec![0.01, 0.02]),
            },
            DistributionBlock {
                target: "raw",
                rate: None,
                n_miss_assumed: None,
                proportions: vec![0.3, 0.7],
                se: None,
            },
        ];
        let bytes = distributions_csv(&blocks).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "target,rate,category,proportion,se");
        assert_eq!(lines.next().unwrap(), "population,0.5,1,0.25,0.01");
        assert_eq!(lines.next().unwrap(), "population,0.5,2,0.75,0.02");
        assert_eq!(lines.next().unwrap(), "raw,,1,0.3,");
        assert_eq!(lines.next().unwrap(), "raw,,2,0.7,");
        assert!(lines.next().is_none());
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.json");
        atomic_write(&path, b"first").unwrap();
        atomic_write(&path, b"second").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"second");
        // no temp litter
        let litter: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().contains("tmp"))
            .collect();
        assert!(litter.is_empty());
    }

    #[test]
    fn distribution_block_baseline_has_no_rate() {
        let est = DistributionEstimate {
            target: Target::Raw,
            proportions: vec![1.0],
            se: None,
            n_miss_assumed: 0.0,
        };
        let block = distribution_block(&est, None);
        assert_eq!(block.target, "raw");
        assert!(block.rate.is_none());
        assert!(block.n_miss_assumed.is_none());
    }
}
