// Temporary timing probe; removed once acceptance budgets are set.
mod common;

use ovrp::estimator::{fit, FitConfig};
use ovrp::likelihood::{CellTable, NonresponseDesign};
use ovrp::simulate::draw_population;
use std::time::Instant;

#[test]
#[ignore]
fn time_reference_fit() {
    let cfg = common::reference_config(0.5, 20_000, 42);
    let t0 = Instant::now();
    let out = draw_population(&cfg).unwrap();
    println!(
        "simulate: {:?} ({} respondents, {} miss)",
        t0.elapsed(),
        out.respondents.len(),
        out.n_miss
    );

    let t0 = Instant::now();
    let table = CellTable::from_records(&out.respondents, &cfg.spec).unwrap();
    println!(
        "aggregate: {:?} ({} cells, {} profiles)",
        t0.elapsed(),
        table.n_cells(),
        table.n_profiles()
    );

    let nr = NonresponseDesign::known_count(out.n_miss as f64).unwrap();
    let t0 = Instant::now();
    let ll = ovrp::likelihood::log_likelihood(&table, &cfg.strata, &nr, &cfg.truth).unwrap();
    println!("one eval: {:?} (loglik {ll})", t0.elapsed());

    let t0 = Instant::now();
    let config = FitConfig { n_restarts: 1, ..FitConfig::default() };
    let result = fit(&table, &cfg.strata, &nr, &config).unwrap();
    println!(
        "fit: {:?} (converged={}, iters={}, rho_hat={:.4}, loglik={:.3})",
        t0.elapsed(),
        result.converged,
        result.iterations,
        result.params.rho,
        result.loglik
    );
    for (name, est, se) in itertools_zip(&result) {
        println!("  {name}: {est:.4} (se {se:.4})");
    }
}

fn itertools_zip(result: &ovrp::estimator::FitResult) -> Vec<(String, f64, f64)> {
    let names = ovrp::model::ParamSet::structural_names(&ovrp::model::ModelSpec::new(5, 7, 3, 3).unwrap());
    let vals = result.params.to_structural();
    names
        .into_iter()
        .zip(vals)
        .zip(result.se_structural.iter())
        .map(|((n, v), &s)| (n, v, s))
        .collect()
}
