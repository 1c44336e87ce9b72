//! Relative RMSE of the robustly bias-adjusted M-quantile estimator along a
//! grid of b_phi values, on common replicate samples.

use std::sync::Arc;

use robust_sae::design::build_design;
use robust_sae::harness::{
    default_allocation, default_bphi_grid, generate_population, sweep_bphi, PopGenConfig, SimulationConfig,
};

fn main() -> robust_sae::Result<()> {
    let pop = Arc::new(generate_population(&PopGenConfig { n: 8000, domains: 8, seed: 7, ..Default::default() })?);
    let design = build_design(&pop, &default_allocation(&pop))?;
    let mut grid = default_bphi_grid();
    grid.push(1e6);
    let report = sweep_bphi(&pop, &design, 20, &grid, 1, &SimulationConfig::default())?;

    println!("{:>8} {:>14} {:>12}", "b_phi", "median rrmse", "mean rrmse");
    for (b, v) in report.grid.iter().enumerate() {
        println!("{v:>8} {:>14.3} {:>12.3}", report.median_rrmse(b), report.mean_rrmse(b));
    }
    report.write_csv(std::io::stdout())?;
    Ok(())
}
