//! Bootstrap MSE of an M-quantile estimator from a single sample.

use std::sync::Arc;

use robust_sae::design::{build_design, draw_sample};
use robust_sae::harness::{
    bootstrap_mse, default_allocation, generate_population, BootstrapConfig, EstimationConfig, Estimator,
    PopGenConfig,
};

fn main() -> robust_sae::Result<()> {
    let pop = Arc::new(generate_population(&PopGenConfig { n: 8000, domains: 8, seed: 8, ..Default::default() })?);
    let design = build_design(&pop, &default_allocation(&pop))?;
    let sample = draw_sample(&design, &pop, 3)?;
    let cfg = BootstrapConfig { b: 10, l: 5, estimator: Estimator::Mqwr(1.0), ..Default::default() };
    let result = bootstrap_mse(&sample, &design, &EstimationConfig::default(), &cfg)?;

    println!("{} bootstrap replicates", result.replicates);
    result.write_csv(std::io::stdout())?;
    Ok(())
}
