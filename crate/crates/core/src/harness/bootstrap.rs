//! Parametric-residual bootstrap of the mean squared error of an M-quantile
//! small-domain estimator.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::design::{draw_sample, replicate_seed, DesignSpec};
use crate::error::{Result, SaeError};
use crate::frame::{Sample, Variable, SIZE_CLASSES};

use super::estimators::{EstimationConfig, Estimator, SampleContext};
use super::simulation::with_threads;

/// How bootstrap residuals are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResidualPool {
    /// From all centred sample residuals.
    Unconditional,
    /// From the centred residuals of the unit's own domain (the pooled set
    /// for domains without sampled units).
    Conditional,
    /// Pooled across domains within the unit's size class (the pooled set
    /// for classes without sampled units).
    #[default]
    BySizeClass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapConfig {
    /// Bootstrap populations.
    pub b: usize,
    /// Samples drawn from each bootstrap population.
    pub l: usize,
    pub estimator: Estimator,
    pub pool: ResidualPool,
    pub seed: u64,
    pub threads: Option<usize>,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            b: 50,
            l: 10,
            estimator: Estimator::Mqwr(1.0),
            pool: ResidualPool::BySizeClass,
            seed: 1,
            threads: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    pub domains: Vec<String>,
    /// Estimate from the original sample, per domain (NaN if unavailable).
    pub estimate: Vec<f64>,
    pub mse: Vec<f64>,
    /// Bootstrap replicates in which the estimator failed, per domain.
    pub failures: Vec<usize>,
    pub replicates: usize,
}

impl BootstrapResult {
    pub fn rmse(&self) -> Vec<f64> {
        self.mse.iter().map(|v| v.sqrt()).collect()
    }

    /// CSV: `domain,estimate,mse,rmse,rrmse_pct,failures`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["domain", "estimate", "mse", "rmse", "rrmse_pct", "failures"])?;
        let num = |v: f64| if v.is_finite() { v.to_string() } else { "NA".to_string() };
        for (d, dom) in self.domains.iter().enumerate() {
            let rmse = self.mse[d].sqrt();
            w.write_record([
                dom.clone(),
                num(self.estimate[d]),
                num(self.mse[d]),
                num(rmse),
                num(100.0 * rmse / self.estimate[d].abs()),
                self.failures[d].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Bootstrap MSE of `cfg.estimator` (an M-quantile estimator) for every domain.
///
/// Fits the M-quantile model on `sample`, builds `B` populations on the
/// sample's frame with `y* = x' beta_{q_d} + e*` (`e*` resampled from the
/// centred sample residuals), draws `L` samples from each under `design`,
/// and averages the squared error against each bootstrap population's totals.
pub fn bootstrap_mse(
    sample: &Sample,
    design: &DesignSpec,
    est_cfg: &EstimationConfig,
    cfg: &BootstrapConfig,
) -> Result<BootstrapResult> {
    if cfg.b == 0 || cfg.l == 0 {
        return Err(SaeError::invalid("bootstrap needs B >= 1 and L >= 1"));
    }
    if !matches!(cfg.estimator, Estimator::Mq | Estimator::Mqcd | Estimator::Mqwr(_) | Estimator::Mqw | Estimator::Mqcdw) {
        return Err(SaeError::invalid(format!("bootstrap supports M-quantile estimators only, got {}", cfg.estimator)));
    }
    if sample.is_empty() {
        return Err(SaeError::invalid("bootstrap needs a nonempty sample"));
    }
    let pop = sample.parent();
    let nd = pop.domains().len();
    let formula = est_cfg.spec.formula;
    let ests = [cfg.estimator];
    let ctx = SampleContext::for_estimators(sample, est_cfg, &ests);
    let estimate: Vec<f64> =
        ctx.estimate(cfg.estimator).totals.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect();
    let fits = ctx.mq_fits(false)?;
    let fallback = mean_coefficients(fits)?;
    let beta_of = |d: usize| fits.beta[d].as_deref().unwrap_or(&fallback);

    // centred residual pools
    let resid: Vec<f64> = (0..sample.len())
        .map(|k| {
            let u = sample.unit(k);
            u.tto - formula.predict(u, beta_of(sample.domain_of(k)))
        })
        .collect();
    let centre = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|r| r - m).collect::<Vec<f64>>()
    };
    let pooled = centre(&resid);
    let ymax = (0..sample.len()).map(|k| sample.unit(k).tto.abs()).fold(0.0, f64::max);
    if pooled.iter().all(|r| r.abs() <= 1e-10 * (1.0 + ymax)) {
        // noiseless model: every bootstrap estimate reproduces its truth
        return Ok(BootstrapResult {
            domains: pop.domains().to_vec(),
            estimate,
            mse: vec![0.0; nd],
            failures: vec![0; nd],
            replicates: cfg.b * cfg.l,
        });
    }
    let by_sc: Vec<Vec<f64>> = (1..=SIZE_CLASSES)
        .map(|sc| {
            let m: Vec<f64> = (0..sample.len()).filter(|&k| sample.unit(k).sc == sc).map(|k| resid[k]).collect();
            if m.is_empty() {
                pooled.clone()
            } else {
                centre(&m)
            }
        })
        .collect();
    let by_domain: Vec<Vec<f64>> = (0..nd)
        .map(|d| {
            let m: Vec<f64> = sample.domain_members(d).iter().map(|&k| resid[k]).collect();
            if m.is_empty() {
                pooled.clone()
            } else {
                centre(&m)
            }
        })
        .collect();
    let pool_of = |row: usize| -> &[f64] {
        match cfg.pool {
            ResidualPool::Unconditional => &pooled,
            ResidualPool::Conditional => &by_domain[pop.domain_of(row)],
            ResidualPool::BySizeClass => &by_sc[pop.unit(row).sc as usize - 1],
        }
    };
    let fitted: Vec<f64> = pop
        .units()
        .iter()
        .enumerate()
        .map(|(row, u)| formula.predict(u, beta_of(pop.domain_of(row))))
        .collect();

    let per_pop: Vec<(Vec<f64>, Vec<usize>)> = with_threads(cfg.threads, || {
        (0..cfg.b)
            .into_par_iter()
            .map(|b| -> Result<(Vec<f64>, Vec<usize>)> {
                let pop_seed = replicate_seed(cfg.seed, b as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(pop_seed);
                let y: Vec<f64> = fitted
                    .iter()
                    .enumerate()
                    .map(|(row, f)| {
                        let pool = pool_of(row);
                        f + pool[rng.random_range(0..pool.len())]
                    })
                    .collect();
                let boot = Arc::new(pop.with_outcome(&y)?);
                let truth: Vec<f64> = (0..nd).map(|d| boot.domain_total_at(Variable::Tto, d)).collect();
                let mut sq = vec![0.0; nd];
                let mut fails = vec![0; nd];
                for l in 0..cfg.l {
                    let s = draw_sample(design, &boot, replicate_seed(pop_seed ^ 0xB007_5742, l as u64))?;
                    let c = SampleContext::for_estimators(&s, est_cfg, &ests);
                    for (d, v) in c.estimate(cfg.estimator).totals.into_iter().enumerate() {
                        match v {
                            Some(v) => sq[d] += (v - truth[d]).powi(2),
                            None => fails[d] += 1,
                        }
                    }
                }
                Ok((sq, fails))
            })
            .collect::<Result<Vec<_>>>()
    })??;

    let mut sum = vec![0.0; nd];
    let mut failures = vec![0; nd];
    for (sq, fails) in &per_pop {
        for d in 0..nd {
            sum[d] += sq[d];
            failures[d] += fails[d];
        }
    }
    let total = cfg.b * cfg.l;
    let mse = (0..nd)
        .map(|d| if failures[d] < total { sum[d] / (total - failures[d]) as f64 } else { f64::NAN })
        .collect();
    Ok(BootstrapResult { domains: pop.domains().to_vec(), estimate, mse, failures, replicates: total })
}

/// Coefficients for domains without sampled units: the average over sampled domains.
fn mean_coefficients(fits: &crate::mquantile::MqDomainFits) -> Result<Vec<f64>> {
    let available: Vec<&Vec<f64>> = fits.beta.iter().flatten().collect();
    if available.is_empty() {
        return Err(SaeError::invalid("no domain has sampled units"));
    }
    let p = available[0].len();
    Ok((0..p).map(|j| available.iter().map(|b| b[j]).sum::<f64>() / available.len() as f64).collect())
}
