//! TOML run manifests: data paths, column mappings, the nonresponse
//! source, fit settings, and output destinations. Command-line flags
//! override any of these, so a checked-in manifest plus a short command
//! line reproduces a study exactly.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::data::{ColumnMapping, CovariateSpec};
use crate::error::{Error, Result};
use crate::estimator::FitConfig;
use crate::model::{ModelSpec, ParamSet, Stratum};

/// Exactly one of `count`, `rate`, or `grid` must be set: a known number
/// of missing units, an assumed nonresponse rate, or a sensitivity sweep.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonresponseSource {
    pub count: Option<f64>,
    pub rate: Option<f64>,
    pub grid: Option<Vec<f64>>,
}

impl NonresponseSource {
    pub fn validate(&self) -> Result<()> {
        let set = usize::from(self.count.is_some())
            + usize::from(self.rate.is_some())
            + usize::from(self.grid.is_some());
        if set != 1 {
            return Err(Error::Config(
                "[nonresponse] must set exactly one of count, rate, grid".into(),
            ));
        }
        if let Some(c) = self.count {
            if !(c >= 0.0) || !c.is_finite() {
                return Err(Error::Config(format!("nonresponse count {c} must be >= 0")));
            }
        }
        if let Some(q) = self.rate {
            if !(0.0..1.0).contains(&q) {
                return Err(Error::Config(format!("nonresponse rate {q} must be in [0,1)")));
            }
        }
        if let Some(grid) = &self.grid {
            if grid.is_empty() {
                return Err(Error::Config("nonresponse grid is empty".into()));
            }
            for &q in grid {
                if !(0.0..1.0).contains(&q) {
                    return Err(Error::Config(format!("grid rate {q} must be in [0,1)")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataSection {
    respondents: PathBuf,
    strata: PathBuf,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ModelSection {
    y_categories: Option<usize>,
    r_categories: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ColumnsSection {
    y: String,
    r: String,
    weight: Option<String>,
    outcome: CovariateSpec,
    response: CovariateSpec,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FitSection {
    max_iterations: usize,
    gradient_tolerance: f64,
    step_tolerance: f64,
    n_restarts: usize,
    fix_rho_at: Option<f64>,
    seed: u64,
}

impl Default for FitSection {
    fn default() -> Self {
        let d = FitConfig::default();
        Self {
            max_iterations: d.max_iterations,
            gradient_tolerance: d.gradient_tolerance,
            step_tolerance: d.step_tolerance,
            n_restarts: d.n_restarts,
            fix_rho_at: None,
            seed: d.seed,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlagsSection {
    pub include_intercepts: bool,
    pub emit_conditional_distributions: bool,
    pub reweighted_nonresp_aggregation: bool,
}

impl Default for FlagsSection {
    fn default() -> Self {
        Self {
            include_intercepts: true,
            emit_conditional_distributions: true,
            reweighted_nonresp_aggregation: false,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub results: Option<PathBuf>,
    pub distributions_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfigFile {
    data: DataSection,
    #[serde(default)]
    model: ModelSection,
    columns: ColumnsSection,
    nonresponse: NonresponseSource,
    #[serde(default)]
    fit: FitSection,
    #[serde(default)]
    flags: FlagsSection,
    #[serde(default)]
    output: OutputSection,
}

/// A fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub respondents_path: PathBuf,
    pub strata_path: PathBuf,
    pub mapping: ColumnMapping,
    pub nonresponse: NonresponseSource,
    pub fit: FitConfig,
    pub flags: FlagsSection,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let file: RunConfigFile =
            toml::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        file.nonresponse.validate()?;
        let resolve = |p: &PathBuf| -> PathBuf {
            if p.is_absolute() {
                p.clone()
            } else {
                base_dir.join(p)
            }
        };
        let config = Self {
            respondents_path: resolve(&file.data.respondents),
            strata_path: resolve(&file.data.strata),
            mapping: ColumnMapping {
                y: file.columns.y,
                r: file.columns.r,
                weight: file.columns.weight,
                outcome: file.columns.outcome,
                response: file.columns.response,
                include_intercepts: file.flags.include_intercepts,
                y_categories: file.model.y_categories,
                r_categories: file.model.r_categories,
            },
            nonresponse: file.nonresponse,
            fit: FitConfig {
                max_iterations: file.fit.max_iterations,
                gradient_tolerance: file.fit.gradient_tolerance,
                step_tolerance: file.fit.step_tolerance,
                n_restarts: file.fit.n_restarts,
                fix_rho_at: file.fit.fix_rho_at,
                seed: file.fit.seed,
            },
            flags: file.flags,
            output: OutputSection {
                results: file.output.results.as_ref().map(&resolve),
                distributions_csv: file.output.distributions_csv.as_ref().map(&resolve),
            },
        };
        config.fit.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml_str(&text, base)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimModelSection {
    y_categories: usize,
    r_categories: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimTruthSection {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    gamma: Vec<f64>,
    theta: Vec<f64>,
    rho: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimStratumRow {
    id: Option<String>,
    share: f64,
    x: Vec<f64>,
    z: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimConfigFile {
    seed: u64,
    n_population: usize,
    model: SimModelSection,
    truth: SimTruthSection,
    strata: Vec<SimStratumRow>,
}

/// Load a simulation manifest into a validated [`crate::simulate::SimConfig`].
pub fn load_sim_config(path: &Path) -> Result<crate::simulate::SimConfig> {
    let text = std::fs::read_to_string(path)?;
    let file: SimConfigFile =
        toml::from_str(&text).map_err(|e| Error::Config(format!("sim config: {e}")))?;
    let truth = ParamSet {
        alpha: file.truth.alpha,
        beta: file.truth.beta,
        gamma: file.truth.gamma,
        theta: file.truth.theta,
        rho: file.truth.rho,
    };
    let spec = ModelSpec::new(
        file.model.y_categories,
        file.model.r_categories,
        truth.alpha.len().max(1),
        truth.beta.len().max(1),
    )?;
    truth.validate(&spec)?;
    let strata: Vec<Stratum> = file
        .strata
        .iter()
        .enumerate()
        .map(|(k, row)| Stratum {
            id: row.id.clone().unwrap_or_else(|| format!("stratum-{}", k + 1)),
            x: row.x.clone(),
            z: row.z.clone(),
            share: row.share,
        })
        .collect();
    Ok(crate::simulate::SimConfig {
        spec,
        truth,
        strata,
        n_population: file.n_population,
        seed: file.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[data]
respondents = "resp.csv"
strata = "strata.csv"

[columns]
y = "y"
r = "r"

[columns.outcome]
numeric = ["x1"]

[columns.response]
numeric = ["z1"]

[nonresponse]
rate = 0.5
"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = RunConfig::from_toml_str(MINIMAL, Path::new("/base")).unwrap();
        assert_eq!(cfg.respondents_path, Path::new("/base/resp.csv"));
        assert!(cfg.mapping.include_intercepts);
        assert_eq!(cfg.fit.max_iterations, 500);
        assert_eq!(cfg.fit.n_restarts, 3);
        assert_eq!(cfg.nonresponse.rate, Some(0.5));
        assert!(cfg.flags.emit_conditional_distributions);
        assert!(!cfg.flags.reweighted_nonresp_aggregation);
    }

    #[test]
    fn rejects_multiple_nonresponse_sources() {
        let text = MINIMAL.replace("rate = 0.5", "rate = 0.5\ncount = 100");
        let err = RunConfig::from_toml_str(&text, Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("exactly one"), "{err}");
    }

    #[test]
    fn rejects_unknown_keys() {
        let text = MINIMAL.replace("rate = 0.5", "rate = 0.5\n\n[extra]\nfoo = 1");
        assert!(RunConfig::from_toml_str(&text, Path::new(".")).is_err());
    }

    #[test]
    fn rejects_out_of_range_rates() {
        for bad in ["rate = 1.0", "rate = -0.1", "grid = [0.2, 1.5]"] {
            let text = MINIMAL.replace("rate = 0.5", bad);
            assert!(RunConfig::from_toml_str(&text, Path::new(".")).is_err(), "{bad}");
        }
    }
}
