//! Huber M-estimation: M-regression, the robust synthetic estimator and the
//! robust EBLUP of a random intercept model.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Result, SaeError};
use crate::frame::Sample;
use crate::linalg::{median_in_place, solve_spd, weighted_gram, weighted_xty, wls, Rows};
use crate::mixed::{fit_lmm, Criterion};
use crate::model::{nonsampled_prediction, Design, Formula, ModelSpec, VarianceStructure};

/// Normal consistency factor of the median absolute deviation.
pub const MAD_CONSTANT: f64 = 0.6745;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HuberConfig {
    pub b: f64,
}

impl Default for HuberConfig {
    fn default() -> Self {
        HuberConfig { b: 1.345 }
    }
}

impl HuberConfig {
    pub fn new(b: f64) -> Result<Self> {
        if !(b > 0.0) {
            return Err(SaeError::invalid(format!("Huber tuning constant must be > 0, got {b}")));
        }
        Ok(HuberConfig { b })
    }
}

/// `a min(1, b/|a|)`.
pub fn huber_psi(a: f64, cfg: HuberConfig) -> f64 {
    a.clamp(-cfg.b, cfg.b)
}

/// Asymmetric influence function of order `q`; `psi_q = psi` at `q = 0.5`.
pub fn psi_q(a: f64, q: f64, cfg: HuberConfig) -> f64 {
    2.0 * huber_psi(a, cfg) * if a > 0.0 { q } else { 1.0 - q }
}

/// `psi_q(a) / a`, with the limit at 0.
pub fn irls_weight(a: f64, q: f64, cfg: HuberConfig) -> f64 {
    let side = if a > 0.0 { q } else { 1.0 - q };
    let shrink = if a.abs() <= cfg.b { 1.0 } else { cfg.b / a.abs() };
    2.0 * side * shrink
}

/// `E[psi(Z)^2]` for standard normal `Z`.
pub fn huber_consistency(cfg: HuberConfig) -> f64 {
    let b = cfg.b;
    if b > 40.0 {
        return 1.0;
    }
    let n = Normal::standard();
    2.0 * n.cdf(b) - 1.0 - 2.0 * b * n.pdf(b) + 2.0 * b * b * (1.0 - n.cdf(b))
}

pub(crate) const IRLS_TOL: f64 = 1e-8;
pub(crate) const IRLS_MAX_ITER: usize = 5000;
/// Joint coefficient/scale steps tried before the nested fallback.
const JOINT_MAX_ITER: usize = 500;
const ANDERSON_DEPTH: usize = 5;
const STALL_LIMIT: usize = 25;

/// Anderson mixing of the last few fixed-point images `g_j` with residuals
/// `f_j`: `g_k - dG gamma`, `gamma = argmin |f_k - dF gamma|`.
fn anderson_mix(g: &[Vec<f64>], f: &[Vec<f64>]) -> Option<Vec<f64>> {
    let m = g.len().checked_sub(1)?;
    if m == 0 {
        return None;
    }
    let p = g[0].len();
    let df = DMatrix::from_fn(p, m, |i, j| f[j + 1][i] - f[j][i]);
    let fk = DVector::from_fn(p, |i, _| f[m][i]);
    let gamma = df.svd(true, true).solve(&fk, 1e-12).ok()?;
    let out: Vec<f64> = (0..p)
        .map(|i| g[m][i] - (0..m).map(|j| (g[j + 1][i] - g[j][i]) * gamma[j]).sum::<f64>())
        .collect();
    out.iter().all(|v| v.is_finite()).then_some(out)
}

/// Anderson-accelerated fixed-point driver. The history is dropped whenever
/// the step grows; once the step stops improving the driver falls back to
/// plain iteration for good.
struct Accelerator {
    hist_g: Vec<Vec<f64>>,
    hist_f: Vec<Vec<f64>>,
    last_delta: f64,
    best_delta: f64,
    stalled: usize,
    active: bool,
}

impl Accelerator {
    fn new() -> Self {
        Accelerator {
            hist_g: Vec::new(),
            hist_f: Vec::new(),
            last_delta: f64::INFINITY,
            best_delta: f64::INFINITY,
            stalled: 0,
            active: true,
        }
    }

    /// Next iterate given the image `g` of the current one and `f = g - beta`.
    fn next(&mut self, g: Vec<f64>, f: Vec<f64>, delta: f64) -> Vec<f64> {
        if !self.active {
            return g;
        }
        if delta < self.best_delta {
            self.best_delta = delta;
            self.stalled = 0;
        } else {
            self.stalled += 1;
            if self.stalled >= STALL_LIMIT {
                self.active = false;
                return g;
            }
        }
        if delta > self.last_delta {
            self.hist_g.clear();
            self.hist_f.clear();
        }
        self.last_delta = delta;
        self.hist_g.push(g.clone());
        self.hist_f.push(f);
        if self.hist_g.len() > ANDERSON_DEPTH + 1 {
            self.hist_g.remove(0);
            self.hist_f.remove(0);
        }
        anderson_mix(&self.hist_g, &self.hist_f).unwrap_or(g)
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, b| m.max(b.abs()))
}

struct Problem<'a> {
    x: &'a Rows,
    y: &'a [f64],
    base: Vec<f64>,
    q: f64,
    cfg: HuberConfig,
    what: &'a str,
}

impl Problem<'_> {
    fn residuals(&self, beta: &[f64]) -> Vec<f64> {
        (0..self.y.len()).map(|i| self.y[i] - self.x.dot_row(i, beta)).collect()
    }

    fn scale(&self, beta: &[f64]) -> f64 {
        let mut a: Vec<f64> = self.residuals(beta).iter().map(|r| r.abs()).collect();
        median_in_place(&mut a) / MAD_CONSTANT
    }

    /// One reweighted least-squares step at scale `s`.
    fn step(&self, resid: &[f64], s: f64) -> Result<Vec<f64>> {
        let wt: Vec<f64> =
            resid.iter().zip(&self.base).map(|(r, b)| b * irls_weight(r / s, self.q, self.cfg)).collect();
        Ok(wls(self.x, self.y, &wt)?.iter().copied().collect())
    }

    fn no_convergence(&self) -> SaeError {
        SaeError::NoConvergence { what: self.what.to_string(), iterations: IRLS_MAX_ITER }
    }

    /// `sum_i w_i rho_q(r_i / s)` with `rho_q' = psi_q`.
    fn objective(&self, resid: &[f64], s: f64) -> f64 {
        let b = self.cfg.b;
        resid
            .iter()
            .zip(&self.base)
            .map(|(r, w)| {
                let a = r / s;
                let side = if a > 0.0 { self.q } else { 1.0 - self.q };
                let rho = if a.abs() <= b { 0.5 * a * a } else { b * a.abs() - 0.5 * b * b };
                2.0 * w * side * rho
            })
            .sum()
    }

    /// Semismooth Newton direction at fixed scale; `None` when too few
    /// residuals sit in the quadratic zone to make the curvature invertible.
    fn newton_direction(&self, resid: &[f64], s: f64) -> Option<Vec<f64>> {
        let mut curv = Vec::with_capacity(resid.len());
        let mut grad = Vec::with_capacity(resid.len());
        for (r, w) in resid.iter().zip(&self.base) {
            let a = r / s;
            let side = if a > 0.0 { self.q } else { 1.0 - self.q };
            curv.push(if a.abs() <= self.cfg.b { 2.0 * w * side } else { 0.0 });
            grad.push(w * psi_q(a, self.q, self.cfg));
        }
        let h = weighted_gram(self.x, &curv);
        let g = weighted_xty(self.x, &grad, &vec![1.0; grad.len()]);
        let d = solve_spd(h, &g, "M-estimation curvature").ok()?;
        Some(d.iter().map(|v| v * s).collect())
    }

    /// Coefficients at the fixed scale `s`, a convex problem, from `beta`.
    fn solve_fixed(&self, beta: &[f64], s: f64, used: &mut usize) -> Result<Vec<f64>> {
        let mut beta = beta.to_vec();
        let mut resid = self.residuals(&beta);
        let mut obj = self.objective(&resid, s);
        loop {
            *used += 1;
            if *used > IRLS_MAX_ITER {
                return Err(self.no_convergence());
            }
            let next = match self.newton_direction(&resid, s) {
                Some(d) => {
                    let mut t = 1.0;
                    loop {
                        let cand: Vec<f64> = beta.iter().zip(&d).map(|(b, d)| b + t * d).collect();
                        let r = self.residuals(&cand);
                        let o = self.objective(&r, s);
                        if o <= obj {
                            break Some((cand, r, o));
                        }
                        t *= 0.5;
                        if t < 1e-12 {
                            break None;
                        }
                    }
                }
                None => None,
            };
            let (cand, r, o) = match next {
                Some(v) => v,
                None => {
                    let g = self.step(&resid, s)?;
                    let r = self.residuals(&g);
                    let o = self.objective(&r, s);
                    (g, r, o)
                }
            };
            let delta = cand.iter().zip(&beta).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            let done = delta <= 1e-2 * IRLS_TOL * max_abs(&cand).max(1e-300);
            (beta, resid, obj) = (cand, r, o);
            if done {
                return Ok(beta);
            }
        }
    }

    /// Fallback for when the joint iteration does not settle: the scale
    /// equation `s = MAD(r(beta(s))) / 0.6745`, with `beta(s)` the solution at
    /// fixed scale, is solved by bisection on `log s`.
    fn solve_nested(&self, mut beta: Vec<f64>, start_norm: f64, mut used: usize) -> Result<Irls> {
        let s0 = self.scale(&beta);
        if !(s0 > 0.0) {
            return Err(self.no_convergence());
        }
        let gap = |s: f64, beta: &mut Vec<f64>, used: &mut usize| -> Result<f64> {
            *beta = self.solve_fixed(beta, s, used)?;
            Ok(self.scale(beta) - s)
        };
        // bracket a sign change: gap(lo) > 0 > gap(hi)
        let mut s = s0;
        let mut h = gap(s, &mut beta, &mut used)?;
        let (mut lo, mut hi) = (s, s);
        if h != 0.0 {
            let up = h > 0.0;
            let mut found = false;
            for _ in 0..80 {
                let next = if up { 2.0 * s } else { 0.5 * s };
                let hn = gap(next, &mut beta, &mut used)?;
                if (hn > 0.0) != up || hn == 0.0 {
                    (lo, hi) = if up { (s, next) } else { (next, s) };
                    found = true;
                    h = hn;
                    break;
                }
                s = next;
                h = hn;
            }
            if !found {
                return Err(self.no_convergence());
            }
        }
        while h != 0.0 && hi / lo - 1.0 > 1e-13 {
            s = (lo * hi).sqrt();
            h = gap(s, &mut beta, &mut used)?;
            if h > 0.0 {
                lo = s;
            } else {
                hi = s;
            }
        }
        // accept only a genuine fixed point of the joint iteration
        let g = self.step(&self.residuals(&beta), self.scale(&beta))?;
        let delta = g.iter().zip(&beta).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        if delta > IRLS_TOL * max_abs(&g).max(start_norm).max(1e-300) {
            return Err(self.no_convergence());
        }
        let scale = self.scale(&g);
        Ok(Irls { beta: g, scale, iterations: used, degenerate: false })
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Irls {
    pub beta: Vec<f64>,
    pub scale: f64,
    pub iterations: usize,
    pub degenerate: bool,
}

/// Iteratively reweighted least squares for `sum w_i psi_q(r_i / s) x_i = 0`,
/// with `s` the median absolute residual over 0.6745, re-estimated each step.
pub(crate) fn irls(
    x: &Rows,
    y: &[f64],
    survey_w: Option<&[f64]>,
    q: f64,
    cfg: HuberConfig,
    init: Option<&[f64]>,
    what: &str,
) -> Result<Irls> {
    let n = x.nrows();
    let base: Vec<f64> = match survey_w {
        Some(w) => w.to_vec(),
        None => vec![1.0; n],
    };
    let mut beta: Vec<f64> = match init {
        Some(b) => b.to_vec(),
        None => wls(x, y, &base)?.iter().copied().collect(),
    };
    let prob = Problem { x, y, base, q, cfg, what };
    let start_norm = max_abs(&beta);
    let y_norm = max_abs(y);
    let mut acc = Accelerator::new();
    for it in 1..=JOINT_MAX_ITER {
        let resid = prob.residuals(&beta);
        let mut absr: Vec<f64> = resid.iter().map(|r| r.abs()).collect();
        let scale = median_in_place(&mut absr) / MAD_CONSTANT;
        if !(scale > 1e-14 * (1.0 + y_norm)) {
            if resid.iter().all(|r| r.abs() <= 1e-10 * (1.0 + y_norm)) {
                return Ok(Irls { beta, scale: 0.0, iterations: it, degenerate: true });
            }
            return Err(SaeError::DegenerateScale(format!(
                "{what}: more than half of the residuals are zero"
            )));
        }
        let g = prob.step(&resid, scale)?;
        let f: Vec<f64> = g.iter().zip(&beta).map(|(a, b)| a - b).collect();
        let delta = max_abs(&f);
        let norm = max_abs(&g).max(start_norm);
        if delta <= IRLS_TOL * norm.max(1e-300) {
            let scale = prob.scale(&g);
            return Ok(Irls { beta: g, scale, iterations: it, degenerate: false });
        }
        beta = acc.next(g, f, delta);
    }
    prob.solve_nested(beta, start_norm, JOINT_MAX_ITER)
}

/// Outcome vector of a sample.
pub(crate) fn outcomes(sample: &Sample) -> Vec<f64> {
    (0..sample.len()).map(|k| sample.unit(k).tto).collect()
}

#[derive(Debug, Clone)]
pub struct RobustFit {
    pub formula: Formula,
    /// Coefficients in original units.
    pub beta: Vec<f64>,
    pub scale: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Set when the fit is exact and the residual scale is 0.
    pub degenerate: bool,
}

/// Huber M-regression of `tto` on the fixed-effect design (no domain terms).
pub fn fit_mreg(sample: &Sample, spec: &ModelSpec, cfg: HuberConfig) -> Result<RobustFit> {
    let design = Design::for_sample(spec.formula, sample);
    let y = outcomes(sample);
    let r = irls(&design.x, &y, None, 0.5, cfg, None, "M-regression")?;
    Ok(RobustFit {
        formula: spec.formula,
        beta: design.to_original(&r.beta),
        scale: r.scale,
        iterations: r.iterations,
        converged: true,
        degenerate: r.degenerate,
    })
}

/// Observed values plus robust predictions for the non-sampled domain units.
pub fn robust_synthetic_total(fit: &RobustFit, sample: &Sample, ind: &str) -> Result<f64> {
    let d = sample.parent().domain_index(ind)?;
    Ok(robust_synthetic_total_at(fit, sample, d))
}

pub fn robust_synthetic_total_at(fit: &RobustFit, sample: &Sample, domain: usize) -> f64 {
    observed_plus(sample, domain, fit.formula, &fit.beta, 0.0)
}

/// `sum_{s_d} y + sum_{r_d} (x' beta + u)`.
pub(crate) fn observed_plus(
    sample: &Sample,
    domain: usize,
    formula: Formula,
    beta: &[f64],
    u: f64,
) -> f64 {
    let pop = sample.parent();
    let members = sample.domain_members(domain);
    let observed: f64 = members.iter().map(|&k| sample.unit(k).tto).sum();
    match nonsampled_prediction(pop, sample, formula, domain, beta) {
        Some(v) => observed + v + (pop.domain_size(domain) - members.len()) as f64 * u,
        None => observed,
    }
}

#[derive(Debug, Clone)]
pub struct RobustMixedFit {
    pub spec: ModelSpec,
    pub cfg: HuberConfig,
    /// Fixed effects in original units.
    pub beta_psi: Vec<f64>,
    pub sigma2_u_psi: f64,
    pub sigma2_e_psi: f64,
    /// Robust random effect per population domain (0 when unsampled).
    pub u_hat_psi: Vec<f64>,
    pub boundary: bool,
    pub converged: bool,
    pub iterations: usize,
}

const REBLUP_TOL: f64 = 1e-8;
const REBLUP_MAX_ITER: usize = 1000;

struct Blocks {
    /// Sample positions per sampled domain.
    members: Vec<Vec<usize>>,
    domains: Vec<usize>,
}

/// Per-domain pieces of `V_d^{-1} = (I - k_d J) / sigma_e^2`.
fn vinv_k(s2u: f64, s2e: f64, n: usize) -> f64 {
    s2u / (s2e + n as f64 * s2u)
}

/// Robust EBLUP fit of the homoscedastic random intercept model.
///
/// Fixed effects solve `X' V^-1 U^1/2 psi(r) = 0`, variance components the
/// robustified score equations with `c = E[psi(Z)^2]`, and the random effects
/// the psi-modified mixed model equations, domain by domain.
pub fn fit_reblup(sample: &Sample, spec: &ModelSpec, cfg: HuberConfig) -> Result<RobustMixedFit> {
    if spec.variance != VarianceStructure::Homo {
        return Err(SaeError::invalid("the robust EBLUP supports the homoscedastic structure only"));
    }
    if sample.domains_present() < 2 {
        return Err(SaeError::TooFewDomains("robust EBLUP fit"));
    }
    let start = fit_lmm(sample, spec, Criterion::Ml)?;
    let design = Design::for_sample(spec.formula, sample);
    let x = &design.x;
    let p = x.ncols();
    let y = outcomes(sample);
    let n = y.len();
    let pop = sample.parent();
    let blocks = {
        let mut members = Vec::new();
        let mut domains = Vec::new();
        for d in 0..pop.domains().len() {
            let m = sample.domain_members(d);
            if !m.is_empty() {
                members.push(m.to_vec());
                domains.push(d);
            }
        }
        Blocks { members, domains }
    };
    let mean = y.iter().sum::<f64>() / n as f64;
    let var_y = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let tol_u = 1e-8 * var_y;
    let c = huber_consistency(cfg);

    let mut beta = design.to_scaled(&start.beta);
    let mut s2u = start.sigma2_u.max(0.0);
    let mut s2e = start.level1[0];
    let mut last_change = f64::INFINITY;
    let mut damping = 1.0;
    let mut converged = false;
    let mut iterations = 0;
    let mut resid = vec![0.0; n];
    for it in 1..=REBLUP_MAX_ITER {
        iterations = it;
        // fixed effects: one reweighted GLS step
        let sd = (s2u + s2e).sqrt();
        for i in 0..n {
            resid[i] = y[i] - x.dot_row(i, &beta);
        }
        let w: Vec<f64> = resid.iter().map(|r| irls_weight(r / sd, 0.5, cfg)).collect();
        let mut lhs = DMatrix::<f64>::zeros(p, p);
        let mut rhs = DVector::<f64>::zeros(p);
        for m in &blocks.members {
            let k = vinv_k(s2u, s2e, m.len());
            let mut xsum = DVector::<f64>::zeros(p);
            let mut wxsum = DVector::<f64>::zeros(p);
            let mut wysum = 0.0;
            for &i in m {
                let xi = x.row(i);
                for a in 0..p {
                    xsum[a] += xi[a];
                    wxsum[a] += w[i] * xi[a];
                    rhs[a] += xi[a] * w[i] * y[i];
                    for b in 0..p {
                        lhs[(a, b)] += xi[a] * w[i] * xi[b];
                    }
                }
                wysum += w[i] * y[i];
            }
            lhs.ger(-k, &xsum, &wxsum, 1.0);
            rhs.axpy(-k * wysum, &xsum, 1.0);
        }
        let next = lhs
            .lu()
            .solve(&rhs)
            .filter(|b| b.iter().all(|v| v.is_finite()))
            .ok_or_else(|| SaeError::Singular("robust EBLUP fixed effects".into()))?;
        let next: Vec<f64> = next.iter().copied().collect();

        // variance components: theta = (c A)^-1 a at the new beta
        for i in 0..n {
            resid[i] = y[i] - x.dot_row(i, &next);
        }
        let (t_u, t_e) = variance_step(&blocks, &resid, s2u, s2e, c, cfg);
        let (mut n_u, mut n_e) = (t_u, t_e);
        let change = {
            let db = next.iter().zip(&beta).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
                / next.iter().fold(1e-300f64, |m, b| m.max(b.abs()));
            let dt = ((n_u - s2u).abs() + (n_e - s2e).abs()) / (s2u + s2e);
            db.max(dt)
        };
        if change > last_change {
            damping = 0.5;
        }
        n_u = s2u + damping * (n_u - s2u);
        n_e = s2e + damping * (n_e - s2e);
        beta = next;
        s2u = n_u.max(0.0);
        s2e = n_e;
        if !(s2e > 0.0) || !s2u.is_finite() {
            return Err(SaeError::DegenerateScale("robust EBLUP level-1 variance".into()));
        }
        last_change = change;
        if change < REBLUP_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(SaeError::NoConvergence { what: "robust EBLUP".into(), iterations });
    }
    let boundary = s2u < tol_u;
    if boundary {
        s2u = 0.0;
    }
    for i in 0..n {
        resid[i] = y[i] - x.dot_row(i, &beta);
    }
    let mut u_hat = vec![0.0; pop.domains().len()];
    if !boundary {
        for (m, &d) in blocks.members.iter().zip(&blocks.domains) {
            let e: Vec<f64> = m.iter().map(|&i| resid[i]).collect();
            u_hat[d] = robust_random_effect(&e, s2u, s2e, cfg);
        }
    }
    Ok(RobustMixedFit {
        spec: *spec,
        cfg,
        beta_psi: design.to_original(&beta),
        sigma2_u_psi: s2u,
        sigma2_e_psi: s2e,
        u_hat_psi: u_hat,
        boundary,
        converged,
        iterations,
    })
}

/// One fixed-point step for `(sigma_u^2, sigma_e^2)`; a negative `sigma_u^2`
/// is projected to 0 and `sigma_e^2` re-solved on its own equation.
fn variance_step(
    blocks: &Blocks,
    resid: &[f64],
    s2u: f64,
    s2e: f64,
    c: f64,
    cfg: HuberConfig,
) -> (f64, f64) {
    let sd = (s2u + s2e).sqrt();
    let alpha = 1.0 / s2e;
    let (mut a_u, mut a_e) = (0.0, 0.0);
    let (mut t_uu, mut t_ue, mut t_ee) = (0.0, 0.0, 0.0);
    for m in &blocks.members {
        let nd = m.len() as f64;
        let beta_j = -vinv_k(s2u, s2e, m.len()) * alpha;
        // v = U^1/2 psi(r); z = V^-1 v
        let v: Vec<f64> = m.iter().map(|&i| sd * huber_psi(resid[i] / sd, cfg)).collect();
        let vsum: f64 = v.iter().sum();
        let z: Vec<f64> = v.iter().map(|vi| alpha * vi + beta_j * vsum).collect();
        let zsum: f64 = z.iter().sum();
        a_u += zsum * zsum;
        a_e += z.iter().map(|t| t * t).sum::<f64>();
        let s1 = nd * alpha + beta_j * nd * nd;
        t_uu += s1 * s1;
        t_ue += nd * (alpha + beta_j * nd).powi(2);
        t_ee += nd * alpha * alpha + (2.0 * alpha * beta_j + nd * beta_j * beta_j) * nd;
    }
    let det = c * c * (t_uu * t_ee - t_ue * t_ue);
    let u = c * (t_ee * a_u - t_ue * a_e) / det;
    let e = c * (t_uu * a_e - t_ue * a_u) / det;
    if u >= 0.0 && e > 0.0 && det.is_finite() && det != 0.0 {
        (u, e)
    } else {
        // sigma_u^2 = 0: V = sigma_e^2 I, so sigma_e^2 = sigma_e^2 sum psi^2 / (c n)
        let sd0 = s2e.sqrt();
        let (mut a0, mut n0) = (0.0, 0.0);
        for m in &blocks.members {
            for &i in m {
                a0 += huber_psi(resid[i] / sd0, cfg).powi(2);
                n0 += 1.0;
            }
        }
        (0.0, s2e * a0 / (c * n0))
    }
}

/// Solves `sum_j psi((e_j - u)/sigma_e)/sigma_e - psi(u/sigma_u)/sigma_u = 0` by bisection.
pub fn robust_random_effect(e: &[f64], s2u: f64, s2e: f64, cfg: HuberConfig) -> f64 {
    if s2u <= 0.0 {
        return 0.0;
    }
    let (su, se) = (s2u.sqrt(), s2e.sqrt());
    let g = |u: f64| {
        e.iter().map(|ej| huber_psi((ej - u) / se, cfg)).sum::<f64>() / se
            - huber_psi(u / su, cfg) / su
    };
    let spread = e.iter().fold(0.0f64, |m, v| m.max(v.abs())) + se + su;
    let (mut lo, mut hi) = (-spread, spread);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * spread {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Observed values plus robust mixed-model predictions for the non-sampled units.
pub fn reblup_total(fit: &RobustMixedFit, sample: &Sample, ind: &str) -> Result<f64> {
    let d = sample.parent().domain_index(ind)?;
    Ok(reblup_total_at(fit, sample, d))
}

pub fn reblup_total_at(fit: &RobustMixedFit, sample: &Sample, domain: usize) -> f64 {
    observed_plus(sample, domain, fit.spec.formula, &fit.beta_psi, fit.u_hat_psi[domain])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psi_examples() {
        let cfg = HuberConfig::default();
        assert_eq!(huber_psi(0.0, cfg), 0.0);
        assert_eq!(huber_psi(1.0, cfg), 1.0);
        assert!((huber_psi(-3.0, cfg) - (-3.0 * (1.345 / 3.0))).abs() < 1e-15);
    }

    #[test]
    fn psi_q_at_median_is_psi() {
        let cfg = HuberConfig::default();
        for a in [-4.0, -1.0, 0.0, 0.3, 2.5] {
            assert_eq!(psi_q(a, 0.5, cfg), huber_psi(a, cfg));
            assert_eq!(irls_weight(a, 0.5, cfg), if a.abs() <= 1.345 { 1.0 } else { 1.345 / a.abs() });
        }
    }

    #[test]
    fn weight_halves_at_twice_b() {
        let cfg = HuberConfig::new(1.5).unwrap();
        assert!((irls_weight(3.0, 0.5, cfg) - 0.5).abs() < 1e-15);
        assert!((irls_weight(-3.0, 0.5, cfg) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn consistency_constant() {
        assert!((huber_consistency(HuberConfig::new(1e6).unwrap()) - 1.0).abs() < 1e-12);
        // numeric integral of psi^2 against the normal density
        let cfg = HuberConfig::default();
        let n = Normal::standard();
        let h = 1e-4;
        let mut s = 0.0;
        let mut z = -12.0;
        while z < 12.0 {
            let m = z + 0.5 * h;
            s += huber_psi(m, cfg).powi(2) * n.pdf(m) * h;
            z += h;
        }
        assert!((huber_consistency(cfg) - s).abs() < 1e-8);
    }

    #[test]
    fn rejects_nonpositive_b() {
        assert!(HuberConfig::new(0.0).is_err());
        assert!(HuberConfig::new(-1.0).is_err());
    }

    #[test]
    fn irls_intercept_outlier() {
        let x = Rows::new(vec![1.0; 4], 1);
        let y = [0.0, 0.0, 0.0, 100.0];
        let r = irls(&x, &y, None, 0.5, HuberConfig::default(), None, "t").unwrap();
        assert!(r.beta[0] < 1.0 && r.beta[0] >= 0.0, "{}", r.beta[0]);
    }

    #[test]
    fn random_effect_solves_its_equation() {
        let cfg = HuberConfig::default();
        let e = [1.0, 2.0, 40.0, 0.5];
        let (s2u, s2e) = (2.0, 3.0);
        let u = robust_random_effect(&e, s2u, s2e, cfg);
        let g: f64 = e.iter().map(|ej| huber_psi((ej - u) / s2e.sqrt(), cfg)).sum::<f64>()
            / s2e.sqrt()
            - huber_psi(u / s2u.sqrt(), cfg) / s2u.sqrt();
        assert!(g.abs() < 1e-10);
    }
}
