//! M-quantile regression: unit q-coefficients, domain orders and the naive,
//! bias-corrected and robustly bias-corrected domain totals.

use std::sync::Arc;

use robust_sae::design::{build_design, draw_sample};
use robust_sae::frame::Variable;
use robust_sae::harness::{default_allocation, generate_population, PopGenConfig};
use robust_sae::model::ModelSpec;
use robust_sae::mquantile::{
    default_grid, fit_mq_grid, mq_cd_total_at, mq_domain_fits, mq_naive_total_at, mq_wr_total_at, unit_q_coefficients,
    BiasAdjustConfig, MqOptions,
};
use robust_sae::robust::HuberConfig;

fn main() -> robust_sae::Result<()> {
    let cfg = PopGenConfig { n: 8000, domains: 8, contamination: 0.002, seed: 4, ..Default::default() };
    let pop = Arc::new(generate_population(&cfg)?);
    let design = build_design(&pop, &default_allocation(&pop))?;
    let sample = draw_sample(&design, &pop, 5)?;

    let fit = fit_mq_grid(&sample, &ModelSpec::default(), &default_grid(), HuberConfig::default(), None)?;
    let qc = unit_q_coefficients(&sample, &fit, false)?;
    let fits = mq_domain_fits(&sample, &fit, &qc, false, MqOptions::default())?;

    println!("{:<6} {:>6} {:>14} {:>14} {:>14} {:>14}", "domain", "q_d", "truth", "MQ", "MQ-CD", "MQ-WR(1)");
    for (d, name) in pop.domains().iter().enumerate() {
        let Some(q) = fits.q[d] else { continue };
        println!(
            "{name:<6} {q:>6.3} {:>14.0} {:>14.0} {:>14.0} {:>14.0}",
            pop.domain_total_at(Variable::Tto, d),
            mq_naive_total_at(&sample, &fits, d)?,
            mq_cd_total_at(&sample, &fits, d)?,
            mq_wr_total_at(&sample, &fits, d, BiasAdjustConfig::new(1.0)?)?
        );
    }
    Ok(())
}
