//! Sensitivity of the robustly bias-adjusted M-quantile estimator to `b_phi`,
//! using the same replicate samples for every value.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;

use crate::design::{draw_sample, replicate_seed, DesignSpec};
use crate::error::{Result, SaeError};
use crate::frame::{Population, Variable};
use crate::mquantile::{mq_wr_total_with_scale, BiasAdjustConfig};

use super::estimators::SampleContext;
use super::metrics::{finite_mean, finite_median, relative_bias, relative_rrmse};
use super::simulation::{with_threads, SimulationConfig};

/// The default sweep: 0.25 to 3 in steps of 0.25.
pub fn default_bphi_grid() -> Vec<f64> {
    (1..=12).map(|i| i as f64 * 0.25).collect()
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub grid: Vec<f64>,
    pub domains: Vec<String>,
    pub truth: Vec<f64>,
    pub k: usize,
    pub seed: u64,
    /// `[b_phi][domain]` percent relative RMSE.
    pub rrmse: Vec<Vec<f64>>,
    /// `[b_phi][domain]` percent relative bias.
    pub rb: Vec<Vec<f64>>,
    /// Failed replicates per domain (identical for every `b_phi`).
    pub failures: Vec<usize>,
}

impl SweepReport {
    pub fn median_rrmse(&self, b: usize) -> f64 {
        finite_median(&self.rrmse[b])
    }

    pub fn mean_rrmse(&self, b: usize) -> f64 {
        finite_mean(&self.rrmse[b])
    }

    /// Per-domain spread of relative RMSE across the grid.
    pub fn max_minus_min(&self) -> Vec<f64> {
        (0..self.domains.len()).map(|d| spread(self.rrmse.iter().map(|r| r[d]))).collect()
    }

    /// Relative RMSE of domain `d` along the grid.
    pub fn curve(&self, d: usize) -> Vec<f64> {
        self.rrmse.iter().map(|r| r[d]).collect()
    }

    /// Rows `b_phi,<domains>,median,mean` then a `max-min` row.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["b_phi".to_string()];
        header.extend(self.domains.iter().cloned());
        header.push("median".into());
        header.push("mean".into());
        w.write_record(&header)?;
        let num = |v: f64| if v.is_finite() { v.to_string() } else { "NA".to_string() };
        for (b, bphi) in self.grid.iter().enumerate() {
            let mut row = vec![bphi.to_string()];
            row.extend(self.rrmse[b].iter().map(|v| num(*v)));
            row.push(num(self.median_rrmse(b)));
            row.push(num(self.mean_rrmse(b)));
            w.write_record(&row)?;
        }
        let mut row = vec!["max-min".to_string()];
        row.extend(self.max_minus_min().into_iter().map(num));
        row.push(num(spread((0..self.grid.len()).map(|b| self.median_rrmse(b)))));
        row.push(num(spread((0..self.grid.len()).map(|b| self.mean_rrmse(b)))));
        w.write_record(&row)?;
        w.flush()?;
        Ok(())
    }
}

fn spread(v: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = v
        .filter(|x| x.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    if lo.is_finite() {
        hi - lo
    } else {
        f64::NAN
    }
}

/// Relative RMSE of the robustly bias-adjusted M-quantile estimator for each
/// `b_phi` in `grid` over `k` common replicate samples. Replicate `r` uses
/// `replicate_seed(seed, r)`, the same samples as [`super::run_simulation`].
pub fn sweep_bphi(
    pop: &Arc<Population>,
    design: &DesignSpec,
    k: usize,
    grid: &[f64],
    seed: u64,
    cfg: &SimulationConfig,
) -> Result<SweepReport> {
    if grid.is_empty() {
        return Err(SaeError::invalid("b_phi grid is empty"));
    }
    for b in grid {
        BiasAdjustConfig::new(*b)?;
    }
    if k == 0 {
        return Err(SaeError::invalid("K must be at least 1"));
    }
    let nd = pop.domains().len();
    let truth: Vec<f64> = (0..nd).map(|d| pop.domain_total_at(Variable::Tto, d)).collect();
    if let Some(d) = truth.iter().position(|t| *t == 0.0) {
        return Err(SaeError::invalid(format!("domain `{}` has a zero total", pop.domains()[d])));
    }
    let est_cfg = &cfg.estimation;
    // [replicate][b][domain]
    let reps: Vec<Vec<Vec<f64>>> = with_threads(cfg.threads, || {
        (0..k)
            .into_par_iter()
            .map(|r| -> Result<Vec<Vec<f64>>> {
                let sample = draw_sample(design, pop, replicate_seed(seed, r as u64))?;
                let ctx = SampleContext::new(&sample, est_cfg, false);
                let Ok(fits) = ctx.mq_fits(false) else {
                    return Ok(vec![vec![f64::NAN; nd]; grid.len()]);
                };
                Ok(grid
                    .iter()
                    .map(|&b_phi| {
                        (0..nd)
                            .map(|d| {
                                ctx.mq_scale(d)
                                    .and_then(|omega| {
                                        mq_wr_total_with_scale(&sample, fits, d, BiasAdjustConfig { b_phi }, omega).ok()
                                    })
                                    .filter(|v| v.is_finite())
                                    .unwrap_or(f64::NAN)
                            })
                            .collect()
                    })
                    .collect())
            })
            .collect::<Result<Vec<_>>>()
    })??;

    let mut rrmse = vec![vec![f64::NAN; nd]; grid.len()];
    let mut rb = vec![vec![f64::NAN; nd]; grid.len()];
    let mut failures = vec![0; nd];
    for d in 0..nd {
        for b in 0..grid.len() {
            let ok: Vec<f64> = reps.iter().map(|r| r[b][d]).filter(|v| v.is_finite()).collect();
            if b == 0 {
                failures[d] = k - ok.len();
            }
            if !ok.is_empty() {
                rrmse[b][d] = relative_rrmse(&ok, truth[d])?;
                rb[b][d] = relative_bias(&ok, truth[d])?;
            }
        }
    }
    Ok(SweepReport { grid: grid.to_vec(), domains: pop.domains().to_vec(), truth, k, seed, rrmse, rb, failures })
}
