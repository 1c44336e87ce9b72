//! Working-model diagnostics: OLS residuals and leverages, Cook's distance,
//! influence-based population reduction and normal probability plot data.

use std::collections::HashSet;
use std::io::Write;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Result, SaeError};
use crate::frame::{Population, Sample, Unit};
use crate::linalg::{inverse_spd, weighted_gram, wls};
use crate::model::{Design, ModelSpec};

#[derive(Debug, Clone)]
pub struct OlsFit {
    /// Coefficients in original units.
    pub coefficients: Vec<f64>,
    pub fitted: Vec<f64>,
    pub residuals: Vec<f64>,
    pub leverages: Vec<f64>,
    /// `RSS / (n - p)`; NaN for a saturated fit.
    pub s2: f64,
    pub p: usize,
}

impl OlsFit {
    pub fn n(&self) -> usize {
        self.residuals.len()
    }
}

/// Ordinary least squares on the fixed part of the working model.
pub fn ols_fit<'a>(units: impl IntoIterator<Item = &'a Unit>, spec: &ModelSpec) -> Result<OlsFit> {
    let units: Vec<&Unit> = units.into_iter().collect();
    let design = Design::from_units(spec.formula, units.iter().copied());
    let n = units.len();
    let p = design.ncols();
    if n < p {
        return Err(SaeError::Singular(format!("OLS: {n} observations for {p} coefficients")));
    }
    let y: Vec<f64> = units.iter().map(|u| u.tto).collect();
    let ones = vec![1.0; n];
    let beta = wls(&design.x, &y, &ones)?;
    let inv = inverse_spd(&weighted_gram(&design.x, &ones), "OLS")?;
    let mut fitted = Vec::with_capacity(n);
    let mut residuals = Vec::with_capacity(n);
    let mut leverages = Vec::with_capacity(n);
    for (i, row) in design.x.iter().enumerate() {
        let f = design.x.dot_row(i, beta.as_slice());
        fitted.push(f);
        residuals.push(y[i] - f);
        let mut h = 0.0;
        for a in 0..p {
            let mut t = 0.0;
            for b in 0..p {
                t += inv[(a, b)] * row[b];
            }
            h += row[a] * t;
        }
        leverages.push(h.clamp(0.0, 1.0));
    }
    let rss: f64 = residuals.iter().map(|r| r * r).sum();
    let s2 = if n > p { rss / (n - p) as f64 } else { f64::NAN };
    Ok(OlsFit { coefficients: design.to_original(beta.as_slice()), fitted, residuals, leverages, s2, p })
}

pub fn ols_fit_population(pop: &Population, spec: &ModelSpec) -> Result<OlsFit> {
    ols_fit(pop.units(), spec)
}

pub fn ols_fit_sample(sample: &Sample, spec: &ModelSpec) -> Result<OlsFit> {
    ols_fit((0..sample.len()).map(|k| sample.unit(k)), spec)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CooksDistances {
    pub d: Vec<f64>,
    /// Units with leverage 1, where the distance is undefined (reported as infinite).
    pub infinite: Vec<bool>,
}

const SATURATED: f64 = 1.0 - 1e-10;

/// `D_i = r_i^2 h_ii / (p s^2 (1 - h_ii)^2)`.
pub fn cooks_distance(fit: &OlsFit) -> Result<CooksDistances> {
    if fit.n() <= fit.p {
        return Err(SaeError::invalid("Cook's distance needs more observations than coefficients"));
    }
    let mut d = Vec::with_capacity(fit.n());
    let mut infinite = Vec::with_capacity(fit.n());
    for (r, h) in fit.residuals.iter().zip(&fit.leverages) {
        if *h >= SATURATED {
            d.push(f64::INFINITY);
            infinite.push(true);
        } else if *r == 0.0 {
            d.push(0.0);
            infinite.push(false);
        } else {
            d.push(r * r * h / (fit.p as f64 * fit.s2 * (1.0 - h).powi(2)));
            infinite.push(false);
        }
    }
    Ok(CooksDistances { d, infinite })
}

/// When [`reduce_population`] stops.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReductionRule {
    /// Remove exactly `k` units.
    TopK(usize),
    /// Remove while the largest distance exceeds the threshold.
    Threshold(f64),
}

/// Repeatedly drops the unit with the largest Cook's distance and refits.
/// Returns the reduced population and the removed ids in removal order.
pub fn reduce_population(
    pop: &Population,
    spec: &ModelSpec,
    rule: ReductionRule,
) -> Result<(Population, Vec<String>)> {
    if let ReductionRule::Threshold(t) = rule {
        if !(t >= 0.0) {
            return Err(SaeError::invalid(format!("Cook's distance threshold must be >= 0, got {t}")));
        }
    }
    let mut active: Vec<usize> = (0..pop.len()).collect();
    let mut left: Vec<usize> = pop.strata().iter().map(|s| s.size()).collect();
    let mut removed = Vec::new();
    loop {
        if let ReductionRule::TopK(k) = rule {
            if removed.len() >= k {
                break;
            }
        }
        let fit = ols_fit(active.iter().map(|&r| pop.unit(r)), spec)?;
        let cooks = cooks_distance(&fit)?;
        // first maximum wins, so ties resolve by population order
        let (pos, dmax) = cooks
            .d
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
        if let ReductionRule::Threshold(t) = rule {
            if !(dmax > t) {
                break;
            }
        }
        let row = active[pos];
        let stratum = pop.stratum_of(row);
        if left[stratum] == 1 {
            let u = pop.unit(row);
            return Err(SaeError::EmptiesStratum { ind: u.ind.clone(), sc: u.sc });
        }
        left[stratum] -= 1;
        removed.push(row);
        active.remove(pos);
    }
    let ids = removed.iter().map(|&r| pop.unit(r).id.clone()).collect();
    let set: HashSet<usize> = removed.into_iter().collect();
    Ok((pop.without_rows(&set)?, ids))
}

/// Ordered residuals paired with normal quantiles at `(i - 0.5)/n`.
pub fn qq_data(residuals: &[f64]) -> Vec<(f64, f64)> {
    let n = residuals.len();
    let mut sorted = residuals.to_vec();
    sorted.sort_by(f64::total_cmp);
    let normal = Normal::standard();
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, r)| (normal.inverse_cdf((i as f64 + 0.5) / n as f64), r))
        .collect()
}

/// Per-unit diagnostics CSV: `id,ind,sc,fitted,residual,leverage,cooks_d,infinite`.
pub fn write_unit_diagnostics<'a, W: Write>(
    units: impl IntoIterator<Item = &'a Unit>,
    fit: &OlsFit,
    cooks: &CooksDistances,
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["id", "ind", "sc", "fitted", "residual", "leverage", "cooks_d", "infinite"])?;
    for (i, u) in units.into_iter().enumerate() {
        w.write_record([
            u.id.clone(),
            u.ind.clone(),
            u.sc.to_string(),
            fit.fitted[i].to_string(),
            fit.residuals[i].to_string(),
            fit.leverages[i].to_string(),
            cooks.d[i].to_string(),
            (cooks.infinite[i] as u8).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Normal probability plot CSV: `theoretical,residual`.
pub fn write_qq<W: Write>(pairs: &[(f64, f64)], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["theoretical", "residual"])?;
    for (t, r) in pairs {
        w.write_record([t.to_string(), r.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qq_small_cases() {
        assert_eq!(qq_data(&[3.5]), vec![(0.0, 3.5)]);
        let p = qq_data(&[2.0, -2.0]);
        assert_eq!(p[0].1, -2.0);
        assert!((p[0].0 + p[1].0).abs() < 1e-12);
        assert!(p[0].0 < 0.0);
    }
}
