//! Design-based Monte Carlo comparison of the estimator catalogue.

use std::sync::Arc;

use robust_sae::design::build_design;
use robust_sae::harness::{
    default_allocation, default_estimators, generate_population, run_simulation, PopGenConfig, SimulationConfig,
};

fn main() -> robust_sae::Result<()> {
    let k: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(20);
    let pop = Arc::new(generate_population(&PopGenConfig { n: 10_000, domains: 10, seed: 6, ..Default::default() })?);
    let design = build_design(&pop, &default_allocation(&pop))?;
    let report = run_simulation(&pop, &design, &default_estimators(), k, 2024, &SimulationConfig::default())?;

    println!("{k} replicates, sample size {}", design.sample_size());
    println!("{:<12} {:>10} {:>12} {:>12} {:>9}", "estimator", "mean|rb|", "median rrmse", "mean rrmse", "boundary");
    for (e, est) in report.estimators.iter().enumerate() {
        let s = report.summary(e);
        println!(
            "{:<12} {:>10.2} {:>12.2} {:>12.2} {:>9}",
            est.to_string(),
            s.mean_abs_rb,
            s.median_rrmse,
            s.mean_rrmse,
            report.boundary[e]
        );
    }
    Ok(())
}
