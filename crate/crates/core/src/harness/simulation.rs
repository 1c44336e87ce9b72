//! Design-based Monte Carlo: repeated stratified samples from a fixed
//! population, per-domain relative bias and relative RMSE per estimator.

use std::io::{Read, Write};
use std::sync::Arc;

use rayon::prelude::*;

use crate::design::{draw_sample, replicate_seed, DesignSpec};
use crate::error::{Result, SaeError};
use crate::frame::{Population, Variable};

use super::estimators::{EstimationConfig, Estimator, SampleContext};
use super::metrics::{finite_mean, finite_median, relative_bias, relative_rrmse};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimulationConfig {
    pub estimation: EstimationConfig,
    /// Worker threads; `None` uses the ambient rayon pool.
    pub threads: Option<usize>,
}

/// Runs `f` on a pool with `threads` workers (or the ambient pool).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| SaeError::invalid(format!("cannot build thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Accuracy of one estimator in one domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    /// Percent relative bias; NaN when every replicate failed.
    pub rb: f64,
    /// Percent relative RMSE; NaN when every replicate failed.
    pub rrmse: f64,
    /// Replicates excluded because the estimator failed.
    pub failures: usize,
}

/// Across-domain summary of one estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub median_rb: f64,
    pub mean_rb: f64,
    pub mean_abs_rb: f64,
    pub median_rrmse: f64,
    pub mean_rrmse: f64,
}

impl Summary {
    pub fn from_cells(cells: &[Cell]) -> Summary {
        let rb: Vec<f64> = cells.iter().map(|c| c.rb).collect();
        let abs: Vec<f64> = rb.iter().map(|v| v.abs()).collect();
        let rr: Vec<f64> = cells.iter().map(|c| c.rrmse).collect();
        Summary {
            median_rb: finite_median(&rb),
            mean_rb: finite_mean(&rb),
            mean_abs_rb: finite_mean(&abs),
            median_rrmse: finite_median(&rr),
            mean_rrmse: finite_mean(&rr),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulationReport {
    pub estimators: Vec<Estimator>,
    pub domains: Vec<String>,
    /// True domain totals.
    pub truth: Vec<f64>,
    pub k: usize,
    pub seed: u64,
    pub config: EstimationConfig,
    /// `[estimator][domain][replicate]`; NaN marks a failed replicate.
    pub estimates: Vec<Vec<Vec<f64>>>,
    /// `[estimator][domain]`.
    pub cells: Vec<Vec<Cell>>,
    /// Replicates in which the estimator's variance-component fit hit `sigma_u^2 = 0`.
    pub boundary: Vec<usize>,
    /// False when every replicate of the estimator failed.
    pub valid: Vec<bool>,
}

fn cell(estimates: &[f64], truth: f64) -> Result<Cell> {
    let ok: Vec<f64> = estimates.iter().copied().filter(|v| v.is_finite()).collect();
    let failures = estimates.len() - ok.len();
    if ok.is_empty() {
        return Ok(Cell { rb: f64::NAN, rrmse: f64::NAN, failures });
    }
    Ok(Cell { rb: relative_bias(&ok, truth)?, rrmse: relative_rrmse(&ok, truth)?, failures })
}

impl SimulationReport {
    pub fn position(&self, est: Estimator) -> Option<usize> {
        self.estimators.iter().position(|e| *e == est)
    }

    pub fn summary(&self, e: usize) -> Summary {
        Summary::from_cells(&self.cells[e])
    }

    /// Empirical RMSE (absolute units) of estimator `e` in domain `d`.
    pub fn rmse(&self, e: usize, d: usize) -> f64 {
        self.cells[e][d].rrmse * self.truth[d].abs() / 100.0
    }

    /// Monte Carlo standard error of the relative bias (percent).
    pub fn rb_standard_error(&self, e: usize, d: usize) -> f64 {
        let ok: Vec<f64> = self.estimates[e][d].iter().copied().filter(|v| v.is_finite()).collect();
        let n = ok.len() as f64;
        let m = ok.iter().sum::<f64>() / n;
        let var = ok.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
        100.0 * (var / n).sqrt() / self.truth[d].abs()
    }

    /// CSV with columns `estimator,domain,truth,rb_pct,rrmse_pct,failures`,
    /// one row per cell followed by the five summary rows of each estimator.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["estimator", "domain", "truth", "rb_pct", "rrmse_pct", "failures"])?;
        let num = |v: f64| if v.is_finite() { v.to_string() } else { "NA".to_string() };
        for (e, est) in self.estimators.iter().enumerate() {
            let name = est.to_string();
            let total_fail: usize = self.cells[e].iter().map(|c| c.failures).sum();
            if !self.valid[e] {
                for (d, dom) in self.domains.iter().enumerate() {
                    w.write_record([&name, dom, &self.truth[d].to_string(), "invalid", "invalid", &self.k.to_string()])?;
                }
                continue;
            }
            for (d, dom) in self.domains.iter().enumerate() {
                let c = self.cells[e][d];
                w.write_record([&name, dom, &self.truth[d].to_string(), &num(c.rb), &num(c.rrmse), &c.failures.to_string()])?;
            }
            let s = self.summary(e);
            let fails = total_fail.to_string();
            w.write_record([&name, "median(rb)", "", &num(s.median_rb), "", &fails])?;
            w.write_record([&name, "mean(rb)", "", &num(s.mean_rb), "", &fails])?;
            w.write_record([&name, "mean|rb|", "", &num(s.mean_abs_rb), "", &fails])?;
            w.write_record([&name, "median(rrmse)", "", "", &num(s.median_rrmse), &fails])?;
            w.write_record([&name, "mean(rrmse)", "", "", &num(s.mean_rrmse), &fails])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One parsed row of a report CSV; numeric fields are `None` when empty or `NA`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub estimator: String,
    pub domain: String,
    pub truth: Option<f64>,
    pub rb_pct: Option<f64>,
    pub rrmse_pct: Option<f64>,
    pub failures: usize,
}

pub fn read_report<R: Read>(reader: R) -> Result<Vec<ReportRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expected = ["estimator", "domain", "truth", "rb_pct", "rrmse_pct", "failures"];
    for (i, name) in expected.iter().enumerate() {
        if headers.get(i) != Some(*name) {
            return Err(SaeError::MissingColumn((*name).to_string()));
        }
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let opt = |j: usize| -> Result<Option<f64>> {
            match &rec[j] {
                "" | "NA" | "invalid" => Ok(None),
                s => s.parse().map(Some).map_err(|_| SaeError::Row { row: i + 1, message: format!("bad number `{s}`") }),
            }
        };
        rows.push(ReportRow {
            estimator: rec[0].to_string(),
            domain: rec[1].to_string(),
            truth: opt(2)?,
            rb_pct: opt(3)?,
            rrmse_pct: opt(4)?,
            failures: rec[5]
                .parse()
                .map_err(|_| SaeError::Row { row: i + 1, message: format!("bad failure count `{}`", &rec[5]) })?,
        });
    }
    Ok(rows)
}

/// Per-replicate output: `[estimator][domain]` totals and boundary flags.
type Replicate = (Vec<Vec<f64>>, Vec<bool>);

fn run_replicate(
    pop: &Arc<Population>,
    design: &DesignSpec,
    estimators: &[Estimator],
    seed: u64,
    cfg: &EstimationConfig,
) -> Result<Replicate> {
    let sample = draw_sample(design, pop, seed)?;
    let ctx = SampleContext::for_estimators(&sample, cfg, estimators);
    let mut totals = Vec::with_capacity(estimators.len());
    let mut flags = Vec::with_capacity(estimators.len());
    for &e in estimators {
        let r = ctx.estimate(e);
        if let Some(msg) = &r.error {
            log::debug!("{e} failed: {msg}");
        }
        totals.push(r.totals.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect());
        flags.push(r.boundary);
    }
    Ok((totals, flags))
}

/// Draws `k` samples (seed of replicate `r` is `replicate_seed(seed, r)`),
/// applies every estimator and tabulates accuracy against the population
/// totals. Replicates run in parallel and are merged in index order.
pub fn run_simulation(
    pop: &Arc<Population>,
    design: &DesignSpec,
    estimators: &[Estimator],
    k: usize,
    seed: u64,
    cfg: &SimulationConfig,
) -> Result<SimulationReport> {
    if estimators.is_empty() {
        return Err(SaeError::invalid("no estimators configured"));
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
    let reps: Vec<Replicate> = with_threads(cfg.threads, || {
        (0..k)
            .into_par_iter()
            .map(|r| run_replicate(pop, design, estimators, replicate_seed(seed, r as u64), est_cfg))
            .collect::<Result<Vec<_>>>()
    })??;

    let ne = estimators.len();
    let mut estimates = vec![vec![Vec::with_capacity(k); nd]; ne];
    let mut boundary = vec![0; ne];
    for (totals, flags) in &reps {
        for e in 0..ne {
            for d in 0..nd {
                estimates[e][d].push(totals[e][d]);
            }
            boundary[e] += flags[e] as usize;
        }
    }
    let mut cells = Vec::with_capacity(ne);
    let mut valid = Vec::with_capacity(ne);
    for per_domain in &estimates {
        let row: Vec<Cell> = per_domain.iter().zip(&truth).map(|(v, t)| cell(v, *t)).collect::<Result<_>>()?;
        valid.push(row.iter().any(|c| c.failures < k));
        cells.push(row);
    }
    for (e, est) in estimators.iter().enumerate() {
        if !valid[e] {
            log::warn!("estimator {est} failed in every replicate");
        }
    }
    Ok(SimulationReport {
        estimators: estimators.to_vec(),
        domains: pop.domains().to_vec(),
        truth,
        k,
        seed,
        config: est_cfg.clone(),
        estimates,
        cells,
        boundary,
        valid,
    })
}
