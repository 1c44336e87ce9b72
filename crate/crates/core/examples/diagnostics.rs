//! OLS working-model diagnostics: leverage, Cook's distance and the removal
//! of the most influential units.

use robust_sae::diagnostics::{cooks_distance, ols_fit_population, qq_data, reduce_population, ReductionRule};
use robust_sae::harness::{generate_population_flagged, PopGenConfig};
use robust_sae::model::ModelSpec;

fn main() -> robust_sae::Result<()> {
    let cfg = PopGenConfig { n: 5000, domains: 8, contamination: 0.002, seed: 5, ..Default::default() };
    let (pop, planted) = generate_population_flagged(&cfg)?;
    let spec = ModelSpec::default();
    let fit = ols_fit_population(&pop, &spec)?;
    let cooks = cooks_distance(&fit)?;

    let mut order: Vec<usize> = (0..pop.len()).collect();
    order.sort_by(|&a, &b| cooks.d[b].total_cmp(&cooks.d[a]));
    println!("{:<8} {:>12} {:>10} {:>8}", "id", "Cook's D", "leverage", "planted");
    for &i in &order[..10] {
        println!("{:<8} {:>12.4} {:>10.4} {:>8}", pop.unit(i).id, cooks.d[i], fit.leverages[i], planted[i]);
    }

    let qq = qq_data(&fit.residuals);
    let (q, r) = qq[qq.len() - 1];
    println!("\nlargest residual {r:.1} at normal quantile {q:.2}");

    let k = planted.iter().filter(|p| **p).count();
    let (reduced, removed) = reduce_population(&pop, &spec, ReductionRule::TopK(k))?;
    let hits = removed.iter().filter(|id| planted[pop.row_of_id(id).unwrap()]).count();
    println!("removed {k} units, {hits} of them planted; {} units remain", reduced.len());
    Ok(())
}
