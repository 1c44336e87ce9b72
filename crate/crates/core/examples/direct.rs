//! Horvitz-Thompson and GREG domain totals from one stratified sample.

use std::sync::Arc;

use robust_sae::design::{build_design, draw_sample};
use robust_sae::direct::{ht_total_at, AuxSpec, GregFit};
use robust_sae::frame::Variable;
use robust_sae::harness::{default_allocation, generate_population, PopGenConfig};

fn main() -> robust_sae::Result<()> {
    let pop = Arc::new(generate_population(&PopGenConfig { n: 8000, domains: 8, seed: 1, ..Default::default() })?);
    let design = build_design(&pop, &default_allocation(&pop))?;
    let sample = draw_sample(&design, &pop, 42)?;
    println!("population {} units, sample {} units", pop.len(), sample.len());

    let greg = GregFit::fit(&sample, AuxSpec::default())?;
    println!("{:<6} {:>14} {:>14} {:>14}", "domain", "truth", "HT", "GREG");
    for (d, name) in pop.domains().iter().enumerate() {
        println!(
            "{name:<6} {:>14.0} {:>14.0} {:>14.0}",
            pop.domain_total_at(Variable::Tto, d),
            ht_total_at(&sample, d)?,
            greg.total(&sample, d)?
        );
    }
    Ok(())
}
