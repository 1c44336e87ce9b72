//! M-quantile regression over a grid of orders, unit q-coefficients and the
//! M-quantile domain estimators (naive, bias-corrected and robust bias-corrected).

use std::str::FromStr;

use crate::error::{Result, SaeError};
use crate::frame::Sample;
use crate::linalg::{median, Rows};
use crate::model::{domain_x_totals, Design, Formula, ModelSpec};
use crate::robust::{huber_psi, irls, observed_plus, outcomes, HuberConfig, MAD_CONSTANT};

/// `{0.001, 0.01, 0.02, ..., 0.99, 0.999}`.
pub fn default_grid() -> Vec<f64> {
    let mut g = vec![0.001];
    g.extend((1..=99).map(|k| k as f64 / 100.0));
    g.push(0.999);
    g
}

/// Parses `default`, `lo:hi:step` or a comma separated list of orders.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let spec = spec.trim();
    let grid = if spec == "default" {
        default_grid()
    } else if let Some((lo, rest)) = spec.split_once(':') {
        let (hi, step) = rest
            .split_once(':')
            .ok_or_else(|| SaeError::invalid(format!("grid `{spec}`: expected lo:hi:step")))?;
        let num = |s: &str| {
            s.trim().parse::<f64>().map_err(|_| SaeError::invalid(format!("grid `{spec}`: bad number `{s}`")))
        };
        let (lo, hi, step) = (num(lo)?, num(hi)?, num(step)?);
        if !(step > 0.0) || hi < lo {
            return Err(SaeError::invalid(format!("grid `{spec}`: empty range")));
        }
        let n = ((hi - lo) / step + 1e-9).floor() as usize;
        (0..=n).map(|k| lo + k as f64 * step).collect()
    } else {
        spec.split(',')
            .map(|s| {
                s.trim().parse::<f64>().map_err(|_| SaeError::invalid(format!("grid: bad order `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?
    };
    validate_grid(&grid)?;
    Ok(grid)
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(SaeError::invalid("empty quantile grid"));
    }
    if grid.iter().any(|q| !(*q > 0.0 && *q < 1.0)) {
        return Err(SaeError::invalid("quantile orders must lie in (0, 1)"));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(SaeError::invalid("quantile grid must be strictly increasing"));
    }
    Ok(())
}

/// Coefficients of one M-quantile fit per grid order.
#[derive(Debug, Clone)]
pub struct MQFitGrid {
    pub formula: Formula,
    pub grid: Vec<f64>,
    pub cfg: HuberConfig,
    /// Unweighted coefficients per order, original units.
    pub beta_q: Vec<Vec<f64>>,
    pub scale_q: Vec<f64>,
    /// Survey-weighted coefficients per order, when weights were supplied.
    pub beta_wq: Option<Vec<Vec<f64>>>,
    pub scale_wq: Option<Vec<f64>>,
    design: Design,
    y: Vec<f64>,
    weights: Option<Vec<f64>>,
}

fn fit_along_grid(
    x: &Rows,
    y: &[f64],
    w: Option<&[f64]>,
    grid: &[f64],
    cfg: HuberConfig,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    // start at the order nearest 0.5 and walk outwards, warm-starting each fit
    let mid = (0..grid.len())
        .min_by(|&a, &b| (grid[a] - 0.5).abs().total_cmp(&(grid[b] - 0.5).abs()))
        .unwrap();
    let mut beta = vec![Vec::new(); grid.len()];
    let mut scale = vec![0.0; grid.len()];
    let what = |q: f64| format!("M-quantile fit at q = {q}");
    let first = irls(x, y, w, grid[mid], cfg, None, &what(grid[mid]))?;
    beta[mid] = first.beta;
    scale[mid] = first.scale;
    for k in (0..mid).rev() {
        let r = irls(x, y, w, grid[k], cfg, Some(&beta[k + 1]), &what(grid[k]))?;
        beta[k] = r.beta;
        scale[k] = r.scale;
    }
    for k in mid + 1..grid.len() {
        let r = irls(x, y, w, grid[k], cfg, Some(&beta[k - 1]), &what(grid[k]))?;
        beta[k] = r.beta;
        scale[k] = r.scale;
    }
    Ok((beta, scale))
}

/// Fits M-quantile regressions at every grid order, plus survey-weighted fits
/// when `weights` is given.
pub fn fit_mq_grid(
    sample: &Sample,
    spec: &ModelSpec,
    grid: &[f64],
    cfg: HuberConfig,
    weights: Option<&[f64]>,
) -> Result<MQFitGrid> {
    validate_grid(grid)?;
    let design = Design::for_sample(spec.formula, sample);
    let y = outcomes(sample);
    if let Some(w) = weights {
        if w.len() != y.len() || w.iter().any(|v| !(*v > 0.0)) {
            return Err(SaeError::invalid("survey weights must be positive, one per sampled unit"));
        }
    }
    let (b, s) = fit_along_grid(&design.x, &y, None, grid, cfg)?;
    let (beta_wq, scale_wq) = match weights {
        Some(w) => {
            let (b, s) = fit_along_grid(&design.x, &y, Some(w), grid, cfg)?;
            (Some(b.iter().map(|v| design.to_original(v)).collect()), Some(s))
        }
        None => (None, None),
    };
    Ok(MQFitGrid {
        formula: spec.formula,
        grid: grid.to_vec(),
        cfg,
        beta_q: b.iter().map(|v| design.to_original(v)).collect(),
        scale_q: s,
        beta_wq,
        scale_wq,
        design,
        y,
        weights: weights.map(|w| w.to_vec()),
    })
}

impl MQFitGrid {
    fn coefficients(&self, weighted: bool) -> Result<&[Vec<f64>]> {
        if weighted {
            self.beta_wq
                .as_deref()
                .ok_or_else(|| SaeError::invalid("weighted M-quantile fit requested without weights"))
        } else {
            Ok(&self.beta_q)
        }
    }

    /// Linear interpolation of the grid coefficients at order `q` (clamped to the grid).
    pub fn interpolate(&self, q: f64, weighted: bool) -> Result<Vec<f64>> {
        let betas = self.coefficients(weighted)?;
        let g = &self.grid;
        if q <= g[0] {
            return Ok(betas[0].clone());
        }
        if q >= g[g.len() - 1] {
            return Ok(betas[g.len() - 1].clone());
        }
        let k = g.partition_point(|v| *v <= q) - 1;
        let t = (q - g[k]) / (g[k + 1] - g[k]);
        Ok(betas[k].iter().zip(&betas[k + 1]).map(|(a, b)| a + t * (b - a)).collect())
    }

    /// A fresh fit at order `q`, warm-started from the interpolated grid coefficients.
    pub fn refit(&self, q: f64, weighted: bool) -> Result<Vec<f64>> {
        if !(q > 0.0 && q < 1.0) {
            return Err(SaeError::invalid(format!("quantile order {q} outside (0, 1)")));
        }
        let init = self.design.to_scaled(&self.interpolate(q, weighted)?);
        let w = if weighted { self.weights.as_deref() } else { None };
        let r = irls(
            &self.design.x,
            &self.y,
            w,
            q,
            self.cfg,
            Some(&init),
            &format!("M-quantile fit at q = {q}"),
        )?;
        Ok(self.design.to_original(&r.beta))
    }
}

/// Unit-level M-quantile coefficients and their domain averages.
#[derive(Debug, Clone)]
pub struct QCoefficients {
    /// Per sampled unit.
    pub q: Vec<f64>,
    pub clipped: Vec<bool>,
    /// Fitted values not monotone in q at this unit; the smallest crossing was used.
    pub non_monotone: Vec<bool>,
    /// Per population domain: mean of `q_i` (None when unsampled).
    pub q_bar: Vec<Option<f64>>,
    /// Per population domain: survey-weight weighted mean of `q_i`.
    pub q_tilde: Vec<Option<f64>>,
}

/// Order at which the fitted line passes through `y`, given fitted values per grid order.
fn crossing(grid: &[f64], fitted: &[f64], y: f64) -> (f64, bool, bool) {
    let non_monotone = fitted.windows(2).any(|w| w[1] < w[0] - 1e-12 * (1.0 + w[0].abs()));
    let hit = |f: f64| (f - y).abs() <= 1e-10 * (1.0 + y.abs());
    for k in 0..grid.len() {
        if hit(fitted[k]) {
            // a run of hits (e.g. a perfect fit) maps to its midpoint
            let end = (k..grid.len()).take_while(|&j| hit(fitted[j])).last().unwrap();
            return (0.5 * (grid[k] + grid[end]), false, non_monotone);
        }
        if k + 1 < grid.len() && (fitted[k] - y) * (fitted[k + 1] - y) < 0.0 {
            let t = (y - fitted[k]) / (fitted[k + 1] - fitted[k]);
            return (grid[k] + t * (grid[k + 1] - grid[k]), false, non_monotone);
        }
    }
    let last = grid.len() - 1;
    // outside every fitted value
    let below = fitted.iter().all(|f| y < *f);
    let q = if below {
        grid[0]
    } else if fitted.iter().all(|f| y > *f) {
        grid[last]
    } else if (y - fitted[0]).abs() <= (y - fitted[last]).abs() {
        grid[0]
    } else {
        grid[last]
    };
    (q, true, non_monotone)
}

/// q-coefficients from the unweighted (`weighted = false`) or survey-weighted grid.
pub fn unit_q_coefficients(sample: &Sample, fit: &MQFitGrid, weighted: bool) -> Result<QCoefficients> {
    let betas = fit.coefficients(weighted)?;
    let n = sample.len();
    let mut q = vec![0.0; n];
    let mut clipped = vec![false; n];
    let mut non_monotone = vec![false; n];
    let mut fitted = vec![0.0; fit.grid.len()];
    for k in 0..n {
        let u = sample.unit(k);
        for (f, b) in fitted.iter_mut().zip(betas) {
            *f = fit.formula.predict(u, b);
        }
        let (qi, c, nm) = crossing(&fit.grid, &fitted, u.tto);
        q[k] = qi;
        clipped[k] = c;
        non_monotone[k] = nm;
    }
    if non_monotone.iter().any(|&b| b) {
        log::debug!(
            "{} units with non-monotone M-quantile fitted values",
            non_monotone.iter().filter(|&&b| b).count()
        );
    }
    let nd = sample.parent().domains().len();
    let mut q_bar = vec![None; nd];
    let mut q_tilde = vec![None; nd];
    for d in 0..nd {
        let m = sample.domain_members(d);
        if m.is_empty() {
            continue;
        }
        q_bar[d] = Some(m.iter().map(|&k| q[k]).sum::<f64>() / m.len() as f64);
        let ws: f64 = m.iter().map(|&k| sample.d(k)).sum();
        q_tilde[d] = Some(m.iter().map(|&k| sample.d(k) * q[k]).sum::<f64>() / ws);
    }
    Ok(QCoefficients { q, clipped, non_monotone, q_bar, q_tilde })
}

/// Robust residual scale `median|r - median(r)| / 0.6745`; the flag is set
/// (and 0 returned) when the scale is degenerate.
pub fn robust_scale(residuals: &[f64]) -> (f64, bool) {
    if residuals.is_empty() {
        return (0.0, true);
    }
    let m = median(residuals);
    let dev: Vec<f64> = residuals.iter().map(|r| (r - m).abs()).collect();
    let s = median(&dev) / MAD_CONSTANT;
    if s > 0.0 {
        (s, false)
    } else {
        (0.0, true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasAdjustConfig {
    pub b_phi: f64,
}

impl Default for BiasAdjustConfig {
    fn default() -> Self {
        BiasAdjustConfig { b_phi: 1.0 }
    }
}

impl BiasAdjustConfig {
    pub fn new(b_phi: f64) -> Result<Self> {
        if !(b_phi > 0.0) {
            return Err(SaeError::invalid(format!("b_phi must be > 0, got {b_phi}")));
        }
        Ok(BiasAdjustConfig { b_phi })
    }
}

/// Which domain average of the unit coefficients selects the domain order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QAverage {
    #[default]
    Mean,
    WeightedMean,
}

/// How coefficients at the domain order are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QRefit {
    #[default]
    Fresh,
    Interpolate,
}

impl FromStr for QRefit {
    type Err = SaeError;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "fresh" => Ok(QRefit::Fresh),
            "interpolate" => Ok(QRefit::Interpolate),
            _ => Err(SaeError::invalid(format!("unknown refit mode `{s}` (expected fresh|interpolate)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MqOptions {
    pub average: QAverage,
    pub refit: QRefit,
}

/// Coefficients at each sampled domain's order.
#[derive(Debug, Clone)]
pub struct MqDomainFits {
    pub formula: Formula,
    pub weighted: bool,
    pub q: Vec<Option<f64>>,
    pub beta: Vec<Option<Vec<f64>>>,
}

impl MqDomainFits {
    fn beta_at(&self, sample: &Sample, domain: usize) -> Result<&[f64]> {
        self.beta[domain]
            .as_deref()
            .ok_or_else(|| SaeError::EmptyDomain(sample.parent().domains()[domain].clone()))
    }
}

fn domain_fit(
    fit: &MQFitGrid,
    qc: &QCoefficients,
    domain: usize,
    weighted: bool,
    opts: MqOptions,
) -> Result<(Option<f64>, Option<Vec<f64>>)> {
    let q = match opts.average {
        QAverage::Mean => qc.q_bar[domain],
        QAverage::WeightedMean => qc.q_tilde[domain],
    };
    let Some(q) = q else { return Ok((None, None)) };
    let beta = match opts.refit {
        QRefit::Fresh => fit.refit(q, weighted)?,
        QRefit::Interpolate => fit.interpolate(q, weighted)?,
    };
    Ok((Some(q), Some(beta)))
}

/// Coefficients at the order of every sampled domain.
pub fn mq_domain_fits(
    sample: &Sample,
    fit: &MQFitGrid,
    qc: &QCoefficients,
    weighted: bool,
    opts: MqOptions,
) -> Result<MqDomainFits> {
    let nd = sample.parent().domains().len();
    let mut q = vec![None; nd];
    let mut beta = vec![None; nd];
    for d in 0..nd {
        let (qd, bd) = domain_fit(fit, qc, d, weighted, opts)?;
        q[d] = qd;
        beta[d] = bd;
    }
    Ok(MqDomainFits { formula: fit.formula, weighted, q, beta })
}

fn single_domain(
    sample: &Sample,
    fit: &MQFitGrid,
    qc: &QCoefficients,
    ind: &str,
    weighted: bool,
    opts: MqOptions,
) -> Result<(usize, MqDomainFits)> {
    let d = sample.parent().domain_index(ind)?;
    let nd = sample.parent().domains().len();
    let (qd, bd) = domain_fit(fit, qc, d, weighted, opts)?;
    let mut q = vec![None; nd];
    let mut beta = vec![None; nd];
    q[d] = qd;
    beta[d] = bd;
    Ok((d, MqDomainFits { formula: fit.formula, weighted, q, beta }))
}

/// Observed values plus M-quantile predictions at the domain order for the
/// non-sampled units (weighted coefficients when `fits.weighted`).
pub fn mq_naive_total_at(sample: &Sample, fits: &MqDomainFits, domain: usize) -> Result<f64> {
    let beta = fits.beta_at(sample, domain)?;
    Ok(observed_plus(sample, domain, fits.formula, beta, 0.0))
}

fn domain_residuals(sample: &Sample, formula: Formula, beta: &[f64], domain: usize) -> Vec<f64> {
    sample
        .domain_members(domain)
        .iter()
        .map(|&k| {
            let u = sample.unit(k);
            u.tto - formula.predict(u, beta)
        })
        .collect()
}

/// Bias-corrected total. Unweighted: naive plus `(N - n)/n` times the domain
/// residual sum. Weighted: `sum w y + (X_U - sum w x)' beta_w`.
pub fn mq_cd_total_at(sample: &Sample, fits: &MqDomainFits, domain: usize) -> Result<f64> {
    let beta = fits.beta_at(sample, domain)?;
    let pop = sample.parent();
    let members = sample.domain_members(domain);
    if fits.weighted {
        let x_tot = &domain_x_totals(pop, fits.formula)[domain];
        let mut wy = 0.0;
        let mut wx = vec![0.0; beta.len()];
        let mut row = vec![0.0; beta.len()];
        for &k in members {
            let u = sample.unit(k);
            let w = sample.d(k);
            wy += w * u.tto;
            fits.formula.fill(u, &mut row);
            for (a, v) in wx.iter_mut().zip(&row) {
                *a += w * v;
            }
        }
        let adj: f64 = x_tot.iter().zip(&wx).zip(beta).map(|((t, s), b)| (t - s) * b).sum();
        return Ok(wy + adj);
    }
    let n = members.len() as f64;
    let big_n = pop.domain_size(domain) as f64;
    let resid: f64 = domain_residuals(sample, fits.formula, beta, domain).iter().sum();
    Ok(observed_plus(sample, domain, fits.formula, beta, 0.0) + (big_n - n) / n * resid)
}

/// Residual scale used by the robust bias correction: the domain MAD, or the
/// all-sample MAD when the domain one is degenerate.
pub fn mq_domain_scale(sample: &Sample, fits: &MqDomainFits, domain: usize) -> Result<f64> {
    let beta = fits.beta_at(sample, domain)?;
    let (s, degenerate) = robust_scale(&domain_residuals(sample, fits.formula, beta, domain));
    if !degenerate {
        return Ok(s);
    }
    let mut all = Vec::with_capacity(sample.len());
    for d in 0..sample.parent().domains().len() {
        if let Some(b) = fits.beta[d].as_deref() {
            all.extend(domain_residuals(sample, fits.formula, b, d));
        }
    }
    Ok(robust_scale(&all).0)
}

/// Naive total plus `(N - n)/n sum omega phi(r / omega)` with a Huber `phi`.
pub fn mq_wr_total_at(
    sample: &Sample,
    fits: &MqDomainFits,
    domain: usize,
    bias: BiasAdjustConfig,
) -> Result<f64> {
    let omega = mq_domain_scale(sample, fits, domain)?;
    mq_wr_total_with_scale(sample, fits, domain, bias, omega)
}

/// As [`mq_wr_total_at`] with a given residual scale `omega`.
pub fn mq_wr_total_with_scale(
    sample: &Sample,
    fits: &MqDomainFits,
    domain: usize,
    bias: BiasAdjustConfig,
    omega: f64,
) -> Result<f64> {
    if !(bias.b_phi > 0.0) {
        return Err(SaeError::invalid(format!("b_phi must be > 0, got {}", bias.b_phi)));
    }
    let beta = fits.beta_at(sample, domain)?;
    let pop = sample.parent();
    let n = sample.domain_members(domain).len() as f64;
    let big_n = pop.domain_size(domain) as f64;
    let phi = HuberConfig { b: bias.b_phi };
    let correction: f64 = if omega > 0.0 {
        domain_residuals(sample, fits.formula, beta, domain)
            .iter()
            .map(|r| omega * huber_psi(r / omega, phi))
            .sum()
    } else {
        0.0
    };
    Ok(observed_plus(sample, domain, fits.formula, beta, 0.0) + (big_n - n) / n * correction)
}

pub fn mq_naive_total(
    sample: &Sample,
    fit: &MQFitGrid,
    qc: &QCoefficients,
    ind: &str,
    weighted: bool,
    opts: MqOptions,
) -> Result<f64> {
    let (d, fits) = single_domain(sample, fit, qc, ind, weighted, opts)?;
    mq_naive_total_at(sample, &fits, d)
}

pub fn mq_cd_total(
    sample: &Sample,
    fit: &MQFitGrid,
    qc: &QCoefficients,
    ind: &str,
    weighted: bool,
    opts: MqOptions,
) -> Result<f64> {
    let (d, fits) = single_domain(sample, fit, qc, ind, weighted, opts)?;
    mq_cd_total_at(sample, &fits, d)
}

pub fn mq_wr_total(
    sample: &Sample,
    fit: &MQFitGrid,
    qc: &QCoefficients,
    ind: &str,
    bias: BiasAdjustConfig,
    opts: MqOptions,
) -> Result<f64> {
    let (d, fits) = single_domain(sample, fit, qc, ind, false, opts)?;
    mq_wr_total_at(sample, &fits, d, bias)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_shape() {
        let g = default_grid();
        assert_eq!(g.len(), 101);
        assert_eq!(g[0], 0.001);
        assert_eq!(g[1], 0.01);
        assert_eq!(g[50], 0.5);
        assert_eq!(g[100], 0.999);
        assert!(validate_grid(&g).is_ok());
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("0.25,0.5,0.75").unwrap(), vec![0.25, 0.5, 0.75]);
        assert_eq!(parse_grid("0.1:0.3:0.1").unwrap().len(), 3);
        assert!(parse_grid("0.5,0.25").is_err());
        assert!(parse_grid("0,0.5").is_err());
        assert_eq!(parse_grid("default").unwrap().len(), 101);
    }

    #[test]
    fn robust_scale_examples() {
        let (s, deg) = robust_scale(&[-1.0, 0.0, 1.0]);
        assert!(!deg);
        assert!((s - 1.0 / 0.6745).abs() < 1e-12);
        assert!((s - 1.4826).abs() < 1e-4);
        assert_eq!(robust_scale(&[2.0, 2.0, 2.0]), (0.0, true));
        let r = [0.3, -1.2, 4.0, 2.2, -0.7];
        let c = -3.5;
        let scaled: Vec<f64> = r.iter().map(|v| c * v).collect();
        assert!((robust_scale(&scaled).0 - c.abs() * robust_scale(&r).0).abs() < 1e-12);
    }

    #[test]
    fn crossing_rules() {
        let grid = [0.25, 0.5, 0.75];
        assert_eq!(crossing(&grid, &[1.0, 2.0, 3.0], 2.0), (0.5, false, false));
        assert_eq!(crossing(&grid, &[2.0, 2.0, 2.0], 2.0), (0.5, false, false));
        assert_eq!(crossing(&grid, &[1.0, 2.0, 3.0], 2.5), (0.625, false, false));
        assert_eq!(crossing(&grid, &[1.0, 2.0, 3.0], 9.0), (0.75, true, false));
        assert_eq!(crossing(&grid, &[1.0, 2.0, 3.0], 0.0), (0.25, true, false));
        // non-monotone: smallest crossing wins
        let (q, c, nm) = crossing(&grid, &[1.0, 3.0, 2.0], 2.5);
        assert!(nm && !c);
        assert!((q - 0.4375).abs() < 1e-15);
    }

    #[test]
    fn bias_config_validates() {
        assert!(BiasAdjustConfig::new(0.0).is_err());
        assert!(BiasAdjustConfig::new(2.0).is_ok());
    }
}
