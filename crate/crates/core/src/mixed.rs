//! Two-level random intercept model `y = X beta + Z u + e` with domain
//! intercepts, fitted by (restricted) maximum likelihood.
//!
//! The level-1 variance of unit `i` is `theta_g(i) * c_i` (see
//! [`VarianceStructure`]). Because `V` is block diagonal with blocks
//! `sigma_u^2 11' + R_d`, every likelihood evaluation reduces to per
//! `(domain, variance group)` sufficient statistics, which makes the
//! profiled optimisation cheap regardless of the sample size.

use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Result, SaeError};
use crate::frame::Sample;
use crate::linalg::solve_spd;
use crate::model::{
    domain_prediction, nonsampled_prediction, domain_x_totals, Design, ModelSpec, PredictionMode,
    VarianceStructure,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Criterion {
    #[default]
    Ml,
    Reml,
}

impl FromStr for Criterion {
    type Err = SaeError;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "ml" => Ok(Criterion::Ml),
            "reml" => Ok(Criterion::Reml),
            _ => Err(SaeError::invalid(format!("unknown criterion `{s}` (expected ml|reml)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmmOptions {
    /// Optional start `(sigma2_u, level-1 variances)`.
    pub start: Option<(f64, Vec<f64>)>,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LmmOptions {
    fn default() -> Self {
        LmmOptions { start: None, tol: 1e-8, max_iter: 200 }
    }
}

#[derive(Debug, Clone)]
pub struct MixedFit {
    pub spec: ModelSpec,
    pub criterion: Criterion,
    /// Fixed effects in original units, ordered as [`crate::model::Formula::names`].
    pub beta: Vec<f64>,
    pub sigma2_u: f64,
    /// Level-1 variance parameters, one per variance group.
    pub level1: Vec<f64>,
    /// Predicted random effect per population domain (0 for unsampled domains).
    pub u_hat: Vec<f64>,
    pub log_lik: f64,
    pub aic: f64,
    pub bic: f64,
    pub n_params: usize,
    pub n_obs: usize,
    pub boundary: bool,
    pub converged: bool,
    pub iterations: usize,
}

impl MixedFit {
    /// `(AIC, BIC, logL)`.
    pub fn information_criteria(&self) -> (f64, f64, f64) {
        (self.aic, self.bic, self.log_lik)
    }

    /// Level-1 variance of a unit under the fitted structure.
    pub fn level1_variance(&self, u: &crate::frame::Unit) -> f64 {
        self.level1[self.spec.variance.group(u)] * self.spec.variance.factor(u)
    }

    /// Parameter summary as `(parameter, estimate)` rows.
    pub fn summary_rows(&self) -> Vec<(String, f64)> {
        let mut rows: Vec<(String, f64)> = self
            .spec
            .formula
            .names()
            .iter()
            .zip(&self.beta)
            .map(|(n, b)| (format!("beta[{n}]"), *b))
            .collect();
        rows.push(("sigma2_u".into(), self.sigma2_u));
        for (n, v) in self.spec.variance.parameter_names().into_iter().zip(&self.level1) {
            rows.push((n, *v));
        }
        rows.push(("logL".into(), self.log_lik));
        rows.push(("AIC".into(), self.aic));
        rows.push(("BIC".into(), self.bic));
        rows.push(("boundary".into(), if self.boundary { 1.0 } else { 0.0 }));
        rows.push(("converged".into(), if self.converged { 1.0 } else { 0.0 }));
        rows
    }

    pub fn write_summary<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["parameter", "estimate"])?;
        for (n, v) in self.summary_rows() {
            w.write_record([n, v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Sufficient statistics of one `(domain, variance group)` cell, with the
/// known level-1 factor `c_i` divided out.
#[derive(Debug, Clone)]
struct CellStats {
    slot: usize,
    group: usize,
    n: usize,
    m: f64,
    t: DVector<f64>,
    s: DMatrix<f64>,
    ty: f64,
    sxy: DVector<f64>,
    syy: f64,
}

#[derive(Debug, Clone)]
struct LmmData {
    n: usize,
    p: usize,
    groups: usize,
    /// Population domain index per slot.
    domains: Vec<usize>,
    cells: Vec<CellStats>,
    group_n: Vec<usize>,
    sum_log_c: f64,
    log_scale_det: f64,
}

#[derive(Debug, Clone)]
struct Eval {
    beta: DVector<f64>,
    quad: f64,
    logdet_v: f64,
    logdet_xvx: f64,
}

impl LmmData {
    fn build(sample: &Sample, spec: &ModelSpec, design: &Design) -> LmmData {
        let p = design.ncols();
        let groups = spec.variance.groups();
        let pop = sample.parent();
        let mut domains = Vec::new();
        let mut cells = Vec::new();
        let mut group_n = vec![0; groups];
        let mut sum_log_c = 0.0;
        for d in 0..pop.domains().len() {
            let members = sample.domain_members(d);
            if members.is_empty() {
                continue;
            }
            let slot = domains.len();
            domains.push(d);
            let mut per_group: Vec<Option<CellStats>> = vec![None; groups];
            for &k in members {
                let u = sample.unit(k);
                let g = spec.variance.group(u);
                let c = spec.variance.factor(u);
                sum_log_c += c.ln();
                group_n[g] += 1;
                let cell = per_group[g].get_or_insert_with(|| CellStats {
                    slot,
                    group: g,
                    n: 0,
                    m: 0.0,
                    t: DVector::zeros(p),
                    s: DMatrix::zeros(p, p),
                    ty: 0.0,
                    sxy: DVector::zeros(p),
                    syy: 0.0,
                });
                let x = design.x.row(k);
                let y = u.tto;
                let ic = 1.0 / c;
                cell.n += 1;
                cell.m += ic;
                cell.ty += y * ic;
                cell.syy += y * y * ic;
                for a in 0..p {
                    cell.t[a] += x[a] * ic;
                    cell.sxy[a] += x[a] * y * ic;
                    for b in a..p {
                        cell.s[(a, b)] += x[a] * x[b] * ic;
                    }
                }
            }
            for mut cell in per_group.into_iter().flatten() {
                for a in 0..p {
                    for b in 0..a {
                        cell.s[(a, b)] = cell.s[(b, a)];
                    }
                }
                cells.push(cell);
            }
        }
        LmmData {
            n: sample.len(),
            p,
            groups,
            domains,
            cells,
            group_n,
            sum_log_c,
            log_scale_det: design.scale.iter().map(|s| 2.0 * s.ln()).sum(),
        }
    }

    /// GLS quantities for `V = lambda ZZ' + diag(rho_g c_i)`.
    fn evaluate(&self, lambda: f64, rho: &[f64]) -> Result<Eval> {
        let p = self.p;
        let nd = self.domains.len();
        let mut a = vec![0.0; nd];
        let mut bx = vec![DVector::<f64>::zeros(p); nd];
        let mut by = vec![0.0; nd];
        let mut xvx = DMatrix::<f64>::zeros(p, p);
        let mut xvy = DVector::<f64>::zeros(p);
        let mut yvy = 0.0;
        let mut logdet_v = 0.0;
        for c in &self.cells {
            let ir = 1.0 / rho[c.group];
            a[c.slot] += c.m * ir;
            bx[c.slot].axpy(ir, &c.t, 1.0);
            by[c.slot] += c.ty * ir;
            xvx += &c.s * ir;
            xvy.axpy(ir, &c.sxy, 1.0);
            yvy += c.syy * ir;
            logdet_v += c.n as f64 * rho[c.group].ln();
        }
        for d in 0..nd {
            let gamma = lambda / (1.0 + lambda * a[d]);
            if gamma != 0.0 {
                xvx.ger(-gamma, &bx[d], &bx[d], 1.0);
                xvy.axpy(-gamma * by[d], &bx[d], 1.0);
                yvy -= gamma * by[d] * by[d];
            }
            logdet_v += (1.0 + lambda * a[d]).ln();
        }
        let beta = solve_spd(xvx.clone(), &xvy, "mixed model fixed effects")?;
        let quad = (yvy - beta.dot(&xvy)).max(0.0);
        let logdet_xvx = match xvx.cholesky() {
            Some(ch) => 2.0 * ch.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>(),
            None => return Err(SaeError::Singular("mixed model fixed effects".into())),
        };
        Ok(Eval { beta, quad, logdet_v, logdet_xvx })
    }

    fn dof(&self, criterion: Criterion) -> f64 {
        match criterion {
            Criterion::Ml => self.n as f64,
            Criterion::Reml => (self.n - self.p) as f64,
        }
    }

    /// Profiled log-likelihood (scale of group 0 concentrated out) and the scale.
    fn profiled(&self, lambda: f64, rho: &[f64], criterion: Criterion) -> Result<(f64, f64, Eval)> {
        let e = self.evaluate(lambda, rho)?;
        let m = self.dof(criterion);
        let theta1 = e.quad / m;
        if !(theta1 > 0.0) {
            return Err(SaeError::DegenerateScale("zero residual variance".into()));
        }
        let two_pi = (2.0 * std::f64::consts::PI).ln();
        let mut ll = -0.5 * (m * (two_pi + 1.0 + theta1.ln()) + e.logdet_v + self.sum_log_c);
        if criterion == Criterion::Reml {
            ll -= 0.5 * (e.logdet_xvx + self.log_scale_det);
        }
        Ok((ll, theta1, e))
    }

    /// Groups with data beyond the reference group 0 get a free ratio.
    fn free_groups(&self) -> Vec<usize> {
        (1..self.groups).filter(|&g| self.group_n[g] > 0).collect()
    }

    fn reference_group(&self) -> usize {
        (0..self.groups).find(|&g| self.group_n[g] > 0).unwrap_or(0)
    }
}

const LOG_LAMBDA_MIN: f64 = -30.0;

struct Params<'a> {
    data: &'a LmmData,
    free: Vec<usize>,
    reference: usize,
}

impl Params<'_> {
    fn rho(&self, log_ratios: &[f64]) -> Vec<f64> {
        let mut rho = vec![1.0; self.data.groups];
        for (g, lr) in self.free.iter().zip(log_ratios) {
            rho[*g] = lr.exp();
        }
        // the reference group may be > 0 when group 0 is absent
        let r0 = rho[self.reference];
        rho.iter_mut().for_each(|r| *r /= r0);
        rho
    }
}

/// Maximises `f` by Newton steps with finite-difference derivatives,
/// Levenberg damping and backtracking.
fn newton_maximize(
    f: &dyn Fn(&[f64]) -> Option<f64>,
    x0: Vec<f64>,
    lower0: Option<f64>,
    tol: f64,
    max_iter: usize,
) -> (Vec<f64>, f64, bool, usize) {
    let dim = x0.len();
    let mut x = x0;
    if let Some(lo) = lower0 {
        x[0] = x[0].max(lo);
    }
    let mut fx = f(&x).unwrap_or(f64::NEG_INFINITY);
    if dim == 0 {
        return (x, fx, true, 0);
    }
    let h = 1e-4;
    let clamp = |v: &mut Vec<f64>| {
        if let Some(lo) = lower0 {
            v[0] = v[0].max(lo);
        }
    };
    for it in 1..=max_iter {
        let mut grad = DVector::zeros(dim);
        let mut hess = DMatrix::zeros(dim, dim);
        let eval_at = |dx: &[(usize, f64)]| {
            let mut y = x.clone();
            for &(i, d) in dx {
                y[i] += d;
            }
            f(&y).unwrap_or(f64::NEG_INFINITY)
        };
        for i in 0..dim {
            let fp = eval_at(&[(i, h)]);
            let fm = eval_at(&[(i, -h)]);
            grad[i] = (fp - fm) / (2.0 * h);
            hess[(i, i)] = (fp - 2.0 * fx + fm) / (h * h);
            for j in 0..i {
                let fpp = eval_at(&[(i, h), (j, h)]);
                let fpm = eval_at(&[(i, h), (j, -h)]);
                let fmp = eval_at(&[(i, -h), (j, h)]);
                let fmm = eval_at(&[(i, -h), (j, -h)]);
                let v = (fpp - fpm - fmp + fmm) / (4.0 * h * h);
                hess[(i, j)] = v;
                hess[(j, i)] = v;
            }
        }
        if grad.iter().any(|g| !g.is_finite()) || hess.iter().any(|v| !v.is_finite()) {
            return (x, fx, false, it);
        }
        let eig = SymmetricEigen::new(hess.clone());
        let top = eig.eigenvalues.max();
        let shift = if top > -1e-8 { top + 1e-6 * (1.0 + top.abs()) } else { 0.0 };
        let neg_h = -(hess - DMatrix::identity(dim, dim) * shift);
        let mut step = match neg_h.cholesky() {
            Some(ch) => ch.solve(&grad),
            None => grad.clone(),
        };
        let longest = step.amax();
        if longest > 3.0 {
            step *= 3.0 / longest;
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut cand: Vec<f64> = x.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
            clamp(&mut cand);
            let fc = f(&cand).unwrap_or(f64::NEG_INFINITY);
            if fc >= fx {
                accepted = Some((cand, fc));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, fc)) = accepted else {
            // no ascent direction at finite-difference resolution
            return (x, fx, grad.amax() < 1e-3, it);
        };
        let moved: f64 = cand.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let rel = (fc - fx).abs() / fx.abs().max(1.0);
        x = cand;
        fx = fc;
        if rel < tol && (moved < 1e-5 || rel < 1e-14) {
            return (x, fx, true, it);
        }
        if let Some(lo) = lower0 {
            if x[0] <= lo && grad[0] <= 0.0 && dim == 1 {
                return (x, fx, true, it);
            }
        }
    }
    (x, fx, false, max_iter)
}

/// Fits the two-level model by ML or REML.
pub fn fit_lmm(sample: &Sample, spec: &ModelSpec, criterion: Criterion) -> Result<MixedFit> {
    fit_lmm_with(sample, spec, criterion, &LmmOptions::default())
}

pub fn fit_lmm_with(
    sample: &Sample,
    spec: &ModelSpec,
    criterion: Criterion,
    opts: &LmmOptions,
) -> Result<MixedFit> {
    if sample.domains_present() < 2 {
        return Err(SaeError::TooFewDomains("mixed model fit"));
    }
    let design = Design::for_sample(spec.formula, sample);
    let data = LmmData::build(sample, spec, &design);
    if data.n <= data.p {
        return Err(SaeError::Singular("mixed model: fewer observations than coefficients".into()));
    }
    let free = data.free_groups();
    let reference = data.reference_group();
    let params = Params { data: &data, free: free.clone(), reference };

    let objective = |x: &[f64]| -> Option<f64> {
        let lambda = x[0].exp();
        let rho = params.rho(&x[1..]);
        data.profiled(lambda, &rho, criterion).ok().map(|r| r.0)
    };
    let boundary_objective = |x: &[f64]| -> Option<f64> {
        let rho = params.rho(x);
        data.profiled(0.0, &rho, criterion).ok().map(|r| r.0)
    };

    // Start: OLS residual variance ratios per group, coarse scan over lambda.
    let (x0, start_lambda) = match &opts.start {
        Some((s2u, l1)) => {
            if l1.len() != data.groups || l1.iter().any(|v| !(*v > 0.0)) || *s2u < 0.0 {
                return Err(SaeError::invalid("start values do not match the variance structure"));
            }
            let r0 = l1[reference];
            let ratios: Vec<f64> = free.iter().map(|&g| (l1[g] / r0).ln()).collect();
            let eta = if *s2u > 0.0 { (s2u / r0).ln().max(LOG_LAMBDA_MIN) } else { LOG_LAMBDA_MIN };
            (ratios, Some(eta))
        }
        None => (initial_ratios(&data, &free, reference)?, None),
    };
    let eta0 = match start_lambda {
        Some(e) => e,
        None => {
            let mut best = (f64::NEG_INFINITY, 0.0);
            let mut eta = -16.0;
            while eta <= 8.0 {
                let mut x = vec![eta];
                x.extend_from_slice(&x0);
                if let Some(v) = objective(&x) {
                    if v > best.0 {
                        best = (v, eta);
                    }
                }
                eta += 1.0;
            }
            best.1
        }
    };
    let mut start = vec![eta0];
    start.extend_from_slice(&x0);
    let (xi, fi, conv_i, it_i) =
        newton_maximize(&objective, start, Some(LOG_LAMBDA_MIN), opts.tol, opts.max_iter);
    let (xb, fb, conv_b, it_b) =
        newton_maximize(&boundary_objective, x0.clone(), None, opts.tol, opts.max_iter);

    let interior_at_bound = xi[0] <= LOG_LAMBDA_MIN + 1e-9;
    let use_boundary = interior_at_bound || fb >= fi;
    let (lambda, ratios, converged, iterations) = if use_boundary {
        (0.0, xb, conv_b, it_i + it_b)
    } else {
        (xi[0].exp(), xi[1..].to_vec(), conv_i, it_i + it_b)
    };
    if !converged {
        return Err(SaeError::NoConvergence {
            what: "mixed model likelihood maximisation".into(),
            iterations,
        });
    }
    let rho = params.rho(&ratios);
    let (_, theta1, eval) = data.profiled(lambda, &rho, criterion)?;
    let level1: Vec<f64> = rho.iter().map(|r| r * theta1).collect();
    let sigma2_u = lambda * theta1;
    let log_lik = full_log_lik(&data, sigma2_u, &level1, criterion)?;
    finish(sample, spec, criterion, &design, &data, eval.beta, sigma2_u, level1, log_lik, iterations)
}

fn initial_ratios(data: &LmmData, free: &[usize], reference: usize) -> Result<Vec<f64>> {
    let ones = vec![1.0; data.groups];
    let e = data.evaluate(0.0, &ones)?;
    let mut ss = vec![0.0; data.groups];
    for c in &data.cells {
        // sum (y - x'b)^2 / c over the cell
        let sb = &c.s * &e.beta;
        ss[c.group] += c.syy - 2.0 * e.beta.dot(&c.sxy) + e.beta.dot(&sb);
    }
    let var = |g: usize| (ss[g].max(1e-300) / data.group_n[g] as f64).max(1e-300);
    let v0 = var(reference);
    Ok(free.iter().map(|&g| (var(g) / v0).ln()).collect())
}

/// Unprofiled log-likelihood at explicit variance parameters.
fn full_log_lik(data: &LmmData, sigma2_u: f64, level1: &[f64], criterion: Criterion) -> Result<f64> {
    let e = data.evaluate(sigma2_u, level1)?;
    let m = data.dof(criterion);
    let two_pi = (2.0 * std::f64::consts::PI).ln();
    let mut ll = -0.5 * (m * two_pi + e.logdet_v + data.sum_log_c + e.quad);
    if criterion == Criterion::Reml {
        ll -= 0.5 * (e.logdet_xvx + data.log_scale_det);
    }
    Ok(ll)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    sample: &Sample,
    spec: &ModelSpec,
    criterion: Criterion,
    design: &Design,
    data: &LmmData,
    beta_scaled: DVector<f64>,
    sigma2_u: f64,
    level1: Vec<f64>,
    log_lik: f64,
    iterations: usize,
) -> Result<MixedFit> {
    let pop = sample.parent();
    let mut u_hat = vec![0.0; pop.domains().len()];
    if sigma2_u > 0.0 {
        let nd = data.domains.len();
        let mut a = vec![0.0; nd];
        let mut resid = vec![0.0; nd];
        for c in &data.cells {
            let ir = 1.0 / level1[c.group];
            a[c.slot] += c.m * ir;
            resid[c.slot] += (c.ty - c.t.dot(&beta_scaled)) * ir;
        }
        for (slot, &d) in data.domains.iter().enumerate() {
            u_hat[d] = sigma2_u / (1.0 + sigma2_u * a[slot]) * resid[slot];
        }
    }
    let n_params = data.p + 1 + 1 + data.free_groups().len();
    let n = data.n as f64;
    let scale_var = {
        let ys: Vec<f64> = (0..sample.len()).map(|k| sample.unit(k).tto).collect();
        let mean = ys.iter().sum::<f64>() / n;
        ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n
    };
    Ok(MixedFit {
        spec: *spec,
        criterion,
        beta: design.to_original(beta_scaled.as_slice()),
        sigma2_u,
        level1,
        u_hat,
        log_lik,
        aic: -2.0 * log_lik + 2.0 * n_params as f64,
        bic: -2.0 * log_lik + n_params as f64 * n.ln(),
        n_params,
        n_obs: data.n,
        boundary: sigma2_u <= 1e-8 * scale_var,
        converged: true,
        iterations,
    })
}

/// EBLUP of the domain total of `tto`.
pub fn eblup_total(fit: &MixedFit, sample: &Sample, ind: &str) -> Result<f64> {
    let d = sample.parent().domain_index(ind)?;
    eblup_total_at(fit, sample, d)
}

pub fn eblup_total_at(fit: &MixedFit, sample: &Sample, domain: usize) -> Result<f64> {
    let pop = sample.parent();
    let formula = fit.spec.formula;
    let u = fit.u_hat[domain];
    match fit.spec.prediction {
        PredictionMode::ObservedPlusPredicted => {
            let members = sample.domain_members(domain);
            let observed: f64 = members.iter().map(|&k| sample.unit(k).tto).sum();
            let predicted = match nonsampled_prediction(pop, sample, formula, domain, &fit.beta) {
                Some(v) => v + (pop.domain_size(domain) - members.len()) as f64 * u,
                None => 0.0,
            };
            Ok(observed + predicted)
        }
        PredictionMode::AllPredicted => Ok(domain_prediction(pop, formula, domain, &fit.beta)
            + pop.domain_size(domain) as f64 * u),
    }
}

/// Survey-weighted pseudo-EBLUP fit (weighted estimating equation for beta).
#[derive(Debug, Clone)]
pub struct PseudoEblupFit {
    pub spec: ModelSpec,
    pub beta_w: Vec<f64>,
    /// Per population domain: shrinkage factor, or `None` if unsampled.
    pub gamma: Vec<Option<f64>>,
    pub delta: Vec<Option<f64>>,
    ybar_w: Vec<f64>,
    xbar_w: Vec<Vec<f64>>,
}

/// `gamma = sigma_u^2 / (sigma_u^2 + sigma_e^2 delta)`.
pub fn shrinkage(sigma2_u: f64, sigma2_e: f64, delta: f64) -> f64 {
    sigma2_u / (sigma2_u + sigma2_e * delta)
}

impl PseudoEblupFit {
    /// Variance components come from `variance_source`, which must use the
    /// homoscedastic level-1 structure.
    pub fn fit(sample: &Sample, spec: &ModelSpec, variance_source: &MixedFit) -> Result<Self> {
        if variance_source.spec.variance != VarianceStructure::Homo {
            return Err(SaeError::invalid(
                "pseudo-EBLUP needs variance components from a homoscedastic fit",
            ));
        }
        let (s2u, s2e) = (variance_source.sigma2_u, variance_source.level1[0]);
        let pop = sample.parent();
        let design = Design::for_sample(spec.formula, sample);
        let p = design.ncols();
        let nd = pop.domains().len();
        let mut gamma = vec![None; nd];
        let mut delta = vec![None; nd];
        let mut ybar_w = vec![0.0; nd];
        let mut xbar_w = vec![vec![0.0; p]; nd];
        let mut lhs = DMatrix::<f64>::zeros(p, p);
        let mut rhs = DVector::<f64>::zeros(p);
        for d in 0..nd {
            let members = sample.domain_members(d);
            if members.is_empty() {
                continue;
            }
            let wsum: f64 = members.iter().map(|&k| sample.d(k)).sum();
            if !(wsum > 0.0) {
                return Err(SaeError::invalid("zero survey weights"));
            }
            let mut dl = 0.0;
            for &k in members {
                let wt = sample.d(k) / wsum;
                dl += wt * wt;
                ybar_w[d] += wt * sample.unit(k).tto;
                for (a, v) in design.x.row(k).iter().enumerate() {
                    xbar_w[d][a] += wt * v;
                }
            }
            let g = shrinkage(s2u, s2e, dl);
            gamma[d] = Some(g);
            delta[d] = Some(dl);
            for &k in members {
                let w = sample.d(k);
                let x = design.x.row(k);
                let y = sample.unit(k).tto;
                for a in 0..p {
                    let za = x[a] - g * xbar_w[d][a];
                    rhs[a] += w * za * y;
                    for b in 0..p {
                        lhs[(a, b)] += w * x[a] * (x[b] - g * xbar_w[d][b]);
                    }
                }
            }
        }
        let beta = lhs
            .lu()
            .solve(&rhs)
            .ok_or_else(|| SaeError::Singular("pseudo-EBLUP estimating equation".into()))?;
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(SaeError::Singular("pseudo-EBLUP estimating equation".into()));
        }
        let beta_w = design.to_original(beta.as_slice());
        // weighted means back to original units
        for xb in xbar_w.iter_mut() {
            for (v, s) in xb.iter_mut().zip(&design.scale) {
                *v *= s;
            }
        }
        Ok(PseudoEblupFit { spec: *spec, beta_w, gamma, delta, ybar_w, xbar_w })
    }

    /// `gamma N ybar_w + (X_tot - gamma N xbar_w)' beta_w`.
    pub fn total(&self, sample: &Sample, domain: usize) -> Result<f64> {
        let pop = sample.parent();
        let g = self.gamma[domain]
            .ok_or_else(|| SaeError::EmptyDomain(pop.domains()[domain].clone()))?;
        let big_n = pop.domain_size(domain) as f64;
        let x_tot = &domain_x_totals(pop, self.spec.formula)[domain];
        let synth: f64 = x_tot
            .iter()
            .zip(&self.xbar_w[domain])
            .zip(&self.beta_w)
            .map(|((xt, xb), b)| (xt - g * big_n * xb) * b)
            .sum();
        Ok(g * big_n * self.ybar_w[domain] + synth)
    }
}

pub fn pseudo_eblup_total(
    sample: &Sample,
    spec: &ModelSpec,
    variance_source: &MixedFit,
    ind: &str,
) -> Result<f64> {
    let d = sample.parent().domain_index(ind)?;
    PseudoEblupFit::fit(sample, spec, variance_source)?.total(sample, d)
}
