//! Command-line surface: `fit`, `sensitivity`, `simulate`, `check`, and
//! `bvn-selftest`.
//!
//! Exit codes: 0 on success, 1 on data/config errors, 2 when no restart of
//! a requested fit converged. Errors print to standard error as one-line
//! JSON objects with a machine-readable `code`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::data;
use crate::error::{Error, Result};
use crate::estimator::{fit, FitResult};
use crate::likelihood::{CellTable, NonresponseDesign};
use crate::model::{validate_dataset, ModelSpec, RespondentRecord, Stratum};
use crate::output::{self, DistributionBlock};
use crate::population::{
    self, baseline_proportions, DistributionEstimate, Target,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DATA_ERROR: i32 = 1;
pub const EXIT_NONCONVERGENCE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "ovrp",
    version,
    about = "Ordinal outcome estimation under nonignorable unit nonresponse"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the model once and write a JSON result
    Fit(FitArgs),
    /// Refit across a grid of assumed nonresponse rates
    Sensitivity(SensitivityArgs),
    /// Draw a synthetic dataset from a simulation manifest
    Simulate(SimulateArgs),
    /// Validate data files and report identification problems
    Check(CheckArgs),
    /// Exercise the normal-probability kernel against closed forms
    BvnSelftest,
}

#[derive(Debug, Args)]
struct ConfigOverrides {
    /// Run manifest (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Override the respondent CSV path
    #[arg(long)]
    respondents: Option<PathBuf>,
    /// Override the strata CSV path
    #[arg(long)]
    strata: Option<PathBuf>,
    /// Override the JSON output path (default: stdout)
    #[arg(long)]
    output: Option<PathBuf>,
    /// Override the fit seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of jittered restarts
    #[arg(long)]
    restarts: Option<usize>,
    /// Override the iteration cap
    #[arg(long)]
    max_iterations: Option<usize>,
}

impl ConfigOverrides {
    fn load(&self) -> Result<RunConfig> {
        let mut config = RunConfig::load(&self.config)?;
        if let Some(p) = &self.respondents {
            config.respondents_path = p.clone();
        }
        if let Some(p) = &self.strata {
            config.strata_path = p.clone();
        }
        if let Some(p) = &self.output {
            config.output.results = Some(p.clone());
        }
        if let Some(s) = self.seed {
            config.fit.seed = s;
        }
        if let Some(r) = self.restarts {
            config.fit.n_restarts = r;
        }
        if let Some(m) = self.max_iterations {
            config.fit.max_iterations = m;
        }
        config.fit.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    common: ConfigOverrides,
    /// Assume this nonresponse rate (overrides [nonresponse])
    #[arg(long, conflicts_with = "count")]
    rate: Option<f64>,
    /// Assume this known count of missing units (overrides [nonresponse])
    #[arg(long)]
    count: Option<f64>,
    /// Freeze the latent correlation at this value (profile fit)
    #[arg(long)]
    fix_rho: Option<f64>,
}

#[derive(Debug, Args)]
struct SensitivityArgs {
    #[command(flatten)]
    common: ConfigOverrides,
    /// Comma-separated nonresponse rates (overrides [nonresponse].grid)
    #[arg(long, value_delimiter = ',')]
    rates: Option<Vec<f64>>,
    /// Override the long-format distributions CSV path
    #[arg(long)]
    distributions_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Simulation manifest (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Output directory for the generated dataset
    #[arg(long)]
    out: PathBuf,
    /// Also write the complete population truth table
    #[arg(long)]
    emit_truth: bool,
}

#[derive(Debug, Args)]
struct CheckArgs {
    #[command(flatten)]
    common: ConfigOverrides,
}

/// Parse arguments and dispatch. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version printing through the error
            let _ = e.print();
            return if e.use_stderr() { EXIT_DATA_ERROR } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Sensitivity(args) => cmd_sensitivity(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Check(args) => cmd_check(args),
        Command::BvnSelftest => cmd_bvn_selftest(),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            report_error(&err);
            EXIT_DATA_ERROR
        }
    }
}

fn report_error(err: &Error) {
    let doc = serde_json::json!({
        "error": { "code": err.code(), "message": err.to_string() }
    });
    eprintln!("{doc}");
}

struct LoadedData {
    records: Vec<RespondentRecord>,
    strata: Vec<Stratum>,
    spec: ModelSpec,
    warnings: Vec<String>,
}

fn load_and_validate(config: &RunConfig) -> Result<LoadedData> {
    let (records, codebook) = data::load_respondents(&config.respondents_path, &config.mapping)?;
    let (strata, warnings) = data::load_strata(&config.strata_path, &codebook)?;
    let spec = ModelSpec::new(
        codebook.y_categories,
        codebook.r_categories,
        codebook.outcome.dim(),
        codebook.response.dim(),
    )?;
    let report = validate_dataset(&records, &strata, &spec);
    if !report.is_ok() {
        let summary: Vec<String> =
            report.errors.iter().map(|e| e.message.clone()).collect();
        return Err(Error::Data(format!("validation failed: {}", summary.join("; "))));
    }
    Ok(LoadedData { records, strata, spec, warnings })
}

fn baselines(
    records: &[RespondentRecord],
    spec: &ModelSpec,
    has_weights: bool,
) -> Result<Vec<DistributionEstimate>> {
    let mut out = vec![DistributionEstimate {
        target: Target::Raw,
        proportions: baseline_proportions(records, spec.y_categories, false)?,
        se: None,
        n_miss_assumed: 0.0,
    }];
    if has_weights {
        out.push(DistributionEstimate {
            target: Target::Weighted,
            proportions: baseline_proportions(records, spec.y_categories, true)?,
            se: None,
            n_miss_assumed: 0.0,
        });
    }
    Ok(out)
}

fn fit_distribution_blocks(
    fit: &FitResult,
    loaded: &LoadedData,
    nr: &NonresponseDesign,
    config: &RunConfig,
) -> Result<Vec<DistributionBlock>> {
    let rate = nr.implied_rate(loaded.records.len() as f64);
    let estimates = population::distribution_estimates(
        fit,
        &loaded.spec,
        &loaded.strata,
        nr.n_miss,
        config.flags.reweighted_nonresp_aggregation,
    )?;
    let mut blocks = Vec::new();
    for est in &estimates {
        if !config.flags.emit_conditional_distributions && est.target != Target::Population {
            continue;
        }
        blocks.push(output::distribution_block(est, Some(rate)));
    }
    for est in &baselines(&loaded.records, &loaded.spec, config.mapping.weight.is_some())? {
        blocks.push(output::distribution_block(est, None));
    }
    Ok(blocks)
}

fn emit_json(bytes: Vec<u8>, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => output::atomic_write(p, &bytes),
        None => {
            let text = String::from_utf8_lossy(&bytes);
            println!("{text}");
            Ok(())
        }
    }
}

fn cmd_fit(args: FitArgs) -> Result<i32> {
    let mut config = args.common.load()?;
    if args.rate.is_some() || args.count.is_some() {
        config.nonresponse.count = args.count;
        config.nonresponse.rate = args.rate;
        config.nonresponse.grid = None;
        config.nonresponse.validate()?;
    }
    if args.fix_rho.is_some() {
        config.fit.fix_rho_at = args.fix_rho;
        config.fit.validate()?;
    }
    let loaded = load_and_validate(&config)?;
    let table = CellTable::from_records(&loaded.records, &loaded.spec)?;
    let n_resp = table.total_multiplicity();
    let nr = if let Some(count) = config.nonresponse.count {
        NonresponseDesign::known_count(count)?
    } else if let Some(rate) = config.nonresponse.rate {
        NonresponseDesign::from_rate(rate, n_resp)?
    } else {
        return Err(Error::Config(
            "fit needs [nonresponse] count or rate; use the sensitivity subcommand for a grid"
                .into(),
        ));
    };

    let mut fitted = fit(&table, &loaded.strata, &nr, &config.fit)?;
    fitted.warnings.extend(loaded.warnings.clone());
    let distributions = fit_distribution_blocks(&fitted, &loaded, &nr, &config)?;
    let doc = output::build_fit_doc(&fitted, &table, loaded.strata.len(), &nr, distributions);
    emit_json(output::to_json_pretty(&doc)?, config.output.results.as_deref())?;
    if let Some(csv_path) = &config.output.distributions_csv {
        output::atomic_write(csv_path, &output::distributions_csv(&doc.distributions)?)?;
    }
    Ok(if fitted.any_restart_converged() { EXIT_OK } else { EXIT_NONCONVERGENCE })
}

fn cmd_sensitivity(args: SensitivityArgs) -> Result<i32> {
    let mut config = args.common.load()?;
    if let Some(csv) = &args.distributions_csv {
        config.output.distributions_csv = Some(csv.clone());
    }
    let rates = match (&args.rates, &config.nonresponse.grid) {
        (Some(rates), _) => rates.clone(),
        (None, Some(grid)) => grid.clone(),
        (None, None) => {
            return Err(Error::Config(
                "sensitivity needs --rates or [nonresponse].grid".into(),
            ))
        }
    };
    let loaded = load_and_validate(&config)?;
    let table = CellTable::from_records(&loaded.records, &loaded.spec)?;
    let results = population::sensitivity_grid(
        &table,
        &loaded.strata,
        &rates,
        &config.fit,
        config.flags.reweighted_nonresp_aggregation,
    )?;
    let base = baselines(&loaded.records, &loaded.spec, config.mapping.weight.is_some())?;
    let doc = output::build_sensitivity_doc(&results, &table, loaded.strata.len(), &base);
    emit_json(output::to_json_pretty(&doc)?, config.output.results.as_deref())?;

    let csv_path = config.output.distributions_csv.clone().or_else(|| {
        config
            .output
            .results
            .as_ref()
            .map(|r| r.with_file_name(format!(
                "{}_distributions.csv",
                r.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
            )))
    });
    if let Some(csv_path) = csv_path {
        let mut blocks = Vec::new();
        for entry in &doc.results {
            for block in &entry.distributions {
                // baseline rows repeat per entry; emit them once
                if block.rate.is_none() && entry.rate != doc.results[0].rate {
                    continue;
                }
                blocks.push(block.clone());
            }
        }
        output::atomic_write(&csv_path, &output::distributions_csv(&blocks)?)?;
    }
    let any_converged = results.iter().any(|r| r.fit.any_restart_converged());
    Ok(if any_converged { EXIT_OK } else { EXIT_NONCONVERGENCE })
}

fn cmd_simulate(args: SimulateArgs) -> Result<i32> {
    let sim_config = crate::config::load_sim_config(&args.config)?;
    let out_dir = &args.out;
    let drawn = crate::simulate::draw_population(&sim_config)?;

    output::atomic_write(
        &out_dir.join("respondents.csv"),
        &data::respondents_to_csv(&drawn.respondents)?,
    )?;
    output::atomic_write(&out_dir.join("strata.csv"), &data::strata_to_csv(&sim_config.strata)?)?;

    let realized_rate = drawn.n_miss as f64 / sim_config.n_population as f64;
    let truth_doc = serde_json::json!({
        "schema_version": output::SCHEMA_VERSION,
        "seed": sim_config.seed,
        "n_population": sim_config.n_population,
        "n_respondents": drawn.respondents.len(),
        "n_miss": drawn.n_miss,
        "realized_nonresponse_rate": realized_rate,
        "truth": sim_config.truth,
    });
    output::atomic_write(
        &out_dir.join("truth.json"),
        format!("{:#}\n", truth_doc).as_bytes(),
    )?;

    let run_toml = simulated_run_manifest(&sim_config.spec, drawn.n_miss);
    output::atomic_write(&out_dir.join("run.toml"), run_toml.as_bytes())?;

    if args.emit_truth {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["stratum", "y", "r"]).map_err(Error::Csv)?;
        for t in &drawn.full_truth {
            w.write_record([
                sim_config.strata[t.stratum].id.clone(),
                t.y.to_string(),
                t.r.to_string(),
            ])
            .map_err(Error::Csv)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Internal(format!("csv flush: {e}")))?;
        output::atomic_write(&out_dir.join("full_truth.csv"), &bytes)?;
    }
    eprintln!(
        "simulated {} units ({} respondents, {} missing) into {}",
        sim_config.n_population,
        drawn.respondents.len(),
        drawn.n_miss,
        out_dir.display()
    );
    Ok(EXIT_OK)
}

/// A ready-to-run manifest for a simulated dataset: numeric x*/z* columns,
/// no added intercept (the design already carries one), and the realized
/// missing count as the nonresponse source.
fn simulated_run_manifest(spec: &ModelSpec, n_miss: usize) -> String {
    let xs: Vec<String> = (1..=spec.dx).map(|i| format!("\"x{i}\"")).collect();
    let zs: Vec<String> = (1..=spec.dz).map(|i| format!("\"z{i}\"")).collect();
    format!(
        "[data]\nrespondents = \"respondents.csv\"\nstrata = \"strata.csv\"\n\n\
         [model]\ny_categories = {y}\nr_categories = {r}\n\n\
         [columns]\ny = \"y\"\nr = \"r\"\nweight = \"weight\"\n\n\
         [columns.outcome]\nnumeric = [{xs}]\n\n\
         [columns.response]\nnumeric = [{zs}]\n\n\
         [nonresponse]\ncount = {n_miss}\n\n\
         [flags]\ninclude_intercepts = false\n\n\
         [output]\nresults = \"result.json\"\ndistributions_csv = \"distributions.csv\"\n",
        y = spec.y_categories,
        r = spec.r_categories,
        xs = xs.join(", "),
        zs = zs.join(", "),
    )
}

fn cmd_check(args: CheckArgs) -> Result<i32> {
    let config = args.common.load()?;
    let (records, codebook) = data::load_respondents(&config.respondents_path, &config.mapping)?;
    let (strata, warnings) = data::load_strata(&config.strata_path, &codebook)?;
    let spec = ModelSpec::new(
        codebook.y_categories,
        codebook.r_categories,
        codebook.outcome.dim(),
        codebook.response.dim(),
    )?;
    let report = validate_dataset(&records, &strata, &spec);
    let doc = serde_json::json!({
        "schema_version": output::SCHEMA_VERSION,
        "report": report,
        "codebook": codebook,
        "load_warnings": warnings,
    });
    println!("{doc:#}");
    Ok(if report.is_ok() { EXIT_OK } else { EXIT_DATA_ERROR })
}

fn cmd_bvn_selftest() -> Result<i32> {
    use crate::bvn;
    let mut all_pass = true;
    let mut check = |name: &str, max_err: f64, tolerance: f64| {
        let pass = max_err <= tolerance;
        all_pass &= pass;
        println!(
            "{}: max_error={max_err:.3e} tolerance={tolerance:.1e} {}",
            name,
            if pass { "PASS" } else { "FAIL" }
        );
    };

    // closed form at the origin
    let mut worst = 0.0f64;
    for i in 0..399 {
        let rho = -0.9975 + i as f64 * 0.005;
        let expect = 0.25 + rho.asin() / (2.0 * std::f64::consts::PI);
        worst = worst.max((bvn::bvn_cdf(0.0, 0.0, rho)?- expect).abs());
    }
    check("origin closed form", worst, 1e-9);

    // univariate reduction
    let mut worst = 0.0f64;
    for i in 0..100 {
        let a = -5.0 + 10.0 * i as f64 / 99.0;
        for j in 0..9 {
            let rho = -0.96 + 0.24 * j as f64;
            let expect = bvn::std_normal_cdf(a)?;
            worst = worst.max((bvn::bvn_cdf(a, f64::INFINITY, rho)? - expect).abs());
        }
    }
    check("univariate reduction", worst, 1e-12);

    // partition of the plane
    let cuts1 = [f64::NEG_INFINITY, -1.3, -0.2, 0.4, 1.7, f64::INFINITY];
    let cuts2 = [f64::NEG_INFINITY, -0.9, 0.1, 2.2, f64::INFINITY];
    let mut worst = 0.0f64;
    for &rho in &[-0.97, -0.6, 0.0, 0.3, 0.49, 0.926, 0.999] {
        let mut total = 0.0;
        for w in cuts1.windows(2) {
            for v in cuts2.windows(2) {
                total +=
                    bvn::rect_prob(bvn::RectBounds::new(w[0], w[1], v[0], v[1])?, rho)?;
            }
        }
        worst = worst.max((total - 1.0).abs());
    }
    check("rectangle partition mass", worst, 1e-9);

    // quantile roundtrip
    let mut worst = 0.0f64;
    for i in 1..2000 {
        let p = i as f64 / 2000.0;
        let x = bvn::std_normal_quantile(p)?;
        worst = worst.max((bvn::std_normal_cdf(x)? - p).abs());
    }
    check("quantile roundtrip", worst, 1e-13);

    println!("numeric warnings recorded: {}", bvn::numeric_warning_count());
    Ok(if all_pass { EXIT_OK } else { EXIT_DATA_ERROR })
}
