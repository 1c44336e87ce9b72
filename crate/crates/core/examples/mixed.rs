//! Random-intercept model by industry: ML and REML fits and EBLUP totals.

use std::sync::Arc;

use robust_sae::design::{build_design, draw_sample};
use robust_sae::frame::Variable;
use robust_sae::harness::{default_allocation, generate_population, PopGenConfig};
use robust_sae::mixed::{eblup_total_at, fit_lmm, Criterion};
use robust_sae::model::{ModelSpec, VarianceStructure};

fn main() -> robust_sae::Result<()> {
    let pop = Arc::new(generate_population(&PopGenConfig { n: 8000, domains: 8, seed: 2, ..Default::default() })?);
    let design = build_design(&pop, &default_allocation(&pop))?;
    let sample = draw_sample(&design, &pop, 7)?;

    for (label, spec, criterion) in [
        ("homoscedastic ML", ModelSpec::default(), Criterion::Ml),
        ("homoscedastic REML", ModelSpec::default(), Criterion::Reml),
        ("variance by size class", ModelSpec::default().with_variance(VarianceStructure::BySc), Criterion::Ml),
    ] {
        let fit = fit_lmm(&sample, &spec, criterion)?;
        println!(
            "{label}: sigma_u^2 = {:.1}, logL = {:.1}, AIC = {:.1}, boundary = {}",
            fit.sigma2_u, fit.log_lik, fit.aic, fit.boundary
        );
    }

    let fit = fit_lmm(&sample, &ModelSpec::default(), Criterion::Ml)?;
    println!("\n{:<6} {:>14} {:>14} {:>10}", "domain", "truth", "EBLUP", "u_hat");
    for (d, name) in pop.domains().iter().enumerate() {
        println!(
            "{name:<6} {:>14.0} {:>14.0} {:>10.2}",
            pop.domain_total_at(Variable::Tto, d),
            eblup_total_at(&fit, &sample, d)?,
            fit.u_hat[d]
        );
    }
    Ok(())
}
