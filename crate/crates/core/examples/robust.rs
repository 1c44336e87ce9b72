//! Huber M-regression, the robust synthetic estimator and the robust EBLUP
//! on a sample containing a planted gross error.

use std::sync::Arc;

use robust_sae::design::{build_design, draw_sample};
use robust_sae::diagnostics::ols_fit_sample;
use robust_sae::frame::Variable;
use robust_sae::harness::{default_allocation, generate_population, PopGenConfig};
use robust_sae::model::ModelSpec;
use robust_sae::robust::{fit_mreg, fit_reblup, reblup_total_at, robust_synthetic_total_at, HuberConfig};

fn main() -> robust_sae::Result<()> {
    let cfg = PopGenConfig { n: 8000, domains: 8, contamination: 0.003, seed: 3, ..Default::default() };
    let pop = Arc::new(generate_population(&cfg)?);
    let design = build_design(&pop, &default_allocation(&pop))?;
    let sample = draw_sample(&design, &pop, 11)?;
    let spec = ModelSpec::default();

    let ols = ols_fit_sample(&sample, &spec)?;
    let huber = fit_mreg(&sample, &spec, HuberConfig::default())?;
    println!("tax1 slope: OLS {:.4}, Huber {:.4} (scale {:.2})", ols.coefficients[1], huber.beta[1], huber.scale);

    for b in [1.345, 3.0, 10.0] {
        let fit = fit_reblup(&sample, &spec, HuberConfig::new(b)?)?;
        println!("REBLUP b = {b}: sigma_u^2 = {:.2}, sigma_e^2 = {:.2}, boundary = {}", fit.sigma2_u_psi, fit.sigma2_e_psi, fit.boundary);
    }

    let reblup = fit_reblup(&sample, &spec, HuberConfig::default())?;
    println!("\n{:<6} {:>14} {:>14} {:>14}", "domain", "truth", "robust syn.", "REBLUP");
    for (d, name) in pop.domains().iter().enumerate() {
        println!(
            "{name:<6} {:>14.0} {:>14.0} {:>14.0}",
            pop.domain_total_at(Variable::Tto, d),
            robust_synthetic_total_at(&huber, &sample, d),
            reblup_total_at(&reblup, &sample, d)
        );
    }
    Ok(())
}
