//! Working-model specification and fixed-effect design matrices.

use std::fmt;
use std::str::FromStr;

use crate::error::SaeError;
use crate::frame::{Population, Sample, Unit};
use crate::linalg::Rows;

/// Fixed-effect structure.
///
/// `Full` is `{1, tax1, sc, wp, tax1*wp}` and `Reduced` is `{1, tax1, sc}`,
/// with `sc` entering as reference-coded dummies (baseline `sc = 1`).
/// `Intercept` and `Linear` (`{1, tax1}`) are nested sub-models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Formula {
    Intercept,
    Linear,
    Reduced,
    #[default]
    Full,
}

const FULL_NAMES: [&str; 8] = ["(intercept)", "tax1", "sc2", "sc3", "sc4", "sc5", "wp", "tax1:wp"];

impl Formula {
    pub fn ncols(self) -> usize {
        match self {
            Formula::Intercept => 1,
            Formula::Linear => 2,
            Formula::Reduced => 6,
            Formula::Full => 8,
        }
    }

    pub fn names(self) -> &'static [&'static str] {
        &FULL_NAMES[..self.ncols()]
    }

    /// Writes the design row of `u` into `out` (length [`Formula::ncols`]).
    pub fn fill(self, u: &Unit, out: &mut [f64]) {
        out[0] = 1.0;
        if self == Formula::Intercept {
            return;
        }
        out[1] = u.tax1;
        if self == Formula::Linear {
            return;
        }
        for c in 2..=5u8 {
            out[c as usize] = if u.sc == c { 1.0 } else { 0.0 };
        }
        if self == Formula::Full {
            out[6] = u.wp as f64;
            out[7] = u.tax1 * u.wp as f64;
        }
    }

    pub fn row(self, u: &Unit) -> Vec<f64> {
        let mut out = vec![0.0; self.ncols()];
        self.fill(u, &mut out);
        out
    }

    /// `x_i' beta` with `beta` in original units.
    pub fn predict(self, u: &Unit, beta: &[f64]) -> f64 {
        let mut buf = [0.0; 8];
        self.fill(u, &mut buf[..self.ncols()]);
        crate::linalg::dot(&buf[..self.ncols()], beta)
    }
}

/// Level-1 variance structure of the two-level model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VarianceStructure {
    /// `var(e_i) = sigma_e^2`.
    #[default]
    Homo,
    /// One variance per size class.
    BySc,
    /// `var(e_i) = wp_i^4 sigma_eps^2`.
    Wp2,
}

impl VarianceStructure {
    /// Number of level-1 variance parameters.
    pub fn groups(self) -> usize {
        match self {
            VarianceStructure::BySc => 5,
            _ => 1,
        }
    }

    /// Variance group of a unit (0-based).
    pub fn group(self, u: &Unit) -> usize {
        match self {
            VarianceStructure::BySc => (u.sc - 1) as usize,
            _ => 0,
        }
    }

    /// Known multiplier `c_i` with `var(e_i) = theta_group * c_i`.
    pub fn factor(self, u: &Unit) -> f64 {
        match self {
            VarianceStructure::Wp2 => (u.wp as f64).powi(4),
            _ => 1.0,
        }
    }

    pub fn parameter_names(self) -> Vec<String> {
        match self {
            VarianceStructure::Homo => vec!["sigma2_e".into()],
            VarianceStructure::BySc => (1..=5).map(|c| format!("sigma2_e_sc{c}")).collect(),
            VarianceStructure::Wp2 => vec!["sigma2_eps".into()],
        }
    }
}

/// How domain totals are assembled from unit predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PredictionMode {
    /// Observed values for sampled units, predictions for the rest.
    #[default]
    ObservedPlusPredicted,
    /// Predictions for every domain unit, sampled or not.
    AllPredicted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ModelSpec {
    pub formula: Formula,
    pub variance: VarianceStructure,
    pub prediction: PredictionMode,
}

impl ModelSpec {
    pub fn new(formula: Formula) -> Self {
        ModelSpec { formula, ..Default::default() }
    }

    pub fn with_variance(mut self, variance: VarianceStructure) -> Self {
        self.variance = variance;
        self
    }

    pub fn with_prediction(mut self, prediction: PredictionMode) -> Self {
        self.prediction = prediction;
        self
    }
}

/// Column-equilibrated design matrix for a set of units.
///
/// Columns are divided by their root mean square so that `tax1`-sized
/// columns and dummies share a scale; [`Design::to_original`] undoes it.
#[derive(Debug, Clone)]
pub struct Design {
    pub formula: Formula,
    pub x: Rows,
    pub scale: Vec<f64>,
}

impl Design {
    pub fn from_units<'a>(formula: Formula, units: impl IntoIterator<Item = &'a Unit>) -> Design {
        let p = formula.ncols();
        let mut data = Vec::new();
        let mut buf = vec![0.0; p];
        for u in units {
            formula.fill(u, &mut buf);
            data.extend_from_slice(&buf);
        }
        let n = data.len() / p;
        let mut scale = vec![0.0; p];
        for row in data.chunks_exact(p) {
            for (s, v) in scale.iter_mut().zip(row) {
                *s += v * v;
            }
        }
        for s in scale.iter_mut() {
            *s = if *s > 0.0 { (*s / n.max(1) as f64).sqrt() } else { 1.0 };
        }
        for row in data.chunks_exact_mut(p) {
            for (v, s) in row.iter_mut().zip(&scale) {
                *v /= s;
            }
        }
        Design { formula, x: Rows::new(data, p), scale }
    }

    pub fn for_sample(formula: Formula, sample: &Sample) -> Design {
        Design::from_units(formula, (0..sample.len()).map(|k| sample.unit(k)))
    }

    pub fn for_population(formula: Formula, pop: &Population) -> Design {
        Design::from_units(formula, pop.units())
    }

    pub fn nrows(&self) -> usize {
        self.x.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.x.ncols()
    }

    /// Coefficients on the scaled columns to coefficients on raw columns.
    pub fn to_original(&self, scaled: &[f64]) -> Vec<f64> {
        scaled.iter().zip(&self.scale).map(|(b, s)| b / s).collect()
    }

    pub fn to_scaled(&self, original: &[f64]) -> Vec<f64> {
        original.iter().zip(&self.scale).map(|(b, s)| b * s).collect()
    }
}

/// Per-domain population totals of the design columns, in original units.
pub fn domain_x_totals(pop: &Population, formula: Formula) -> Vec<Vec<f64>> {
    let p = formula.ncols();
    let mut out = vec![vec![0.0; p]; pop.domains().len()];
    let mut buf = vec![0.0; p];
    for (row, u) in pop.units().iter().enumerate() {
        formula.fill(u, &mut buf);
        for (t, v) in out[pop.domain_of(row)].iter_mut().zip(&buf) {
            *t += v;
        }
    }
    out
}

/// Sum over a domain's non-sampled units of `x_i' beta`, or `None` when every
/// domain unit is in the sample.
pub fn nonsampled_prediction(
    pop: &Population,
    sample: &Sample,
    formula: Formula,
    domain: usize,
    beta: &[f64],
) -> Option<f64> {
    let members = sample.domain_members(domain);
    if members.len() == pop.domain_size(domain) {
        return None;
    }
    let in_sample: std::collections::HashSet<usize> =
        members.iter().map(|&k| sample.rows()[k]).collect();
    Some(
        pop.domain_rows(domain)
            .iter()
            .filter(|r| !in_sample.contains(r))
            .map(|&r| formula.predict(pop.unit(r), beta))
            .sum(),
    )
}

/// Sum over all domain units of `x_i' beta`.
pub fn domain_prediction(pop: &Population, formula: Formula, domain: usize, beta: &[f64]) -> f64 {
    pop.domain_rows(domain).iter().map(|&r| formula.predict(pop.unit(r), beta)).sum()
}

fn parse_err(kind: &str, s: &str, allowed: &str) -> SaeError {
    SaeError::invalid(format!("unknown {kind} `{s}` (expected {allowed})"))
}

impl FromStr for Formula {
    type Err = SaeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Formula::Full),
            "reduced" => Ok(Formula::Reduced),
            "linear" => Ok(Formula::Linear),
            "intercept" => Ok(Formula::Intercept),
            _ => Err(parse_err("model", s, "full|reduced|linear|intercept")),
        }
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Formula::Full => "full",
            Formula::Reduced => "reduced",
            Formula::Linear => "linear",
            Formula::Intercept => "intercept",
        })
    }
}

impl FromStr for VarianceStructure {
    type Err = SaeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "homo" => Ok(VarianceStructure::Homo),
            "by_sc" => Ok(VarianceStructure::BySc),
            "wp2" => Ok(VarianceStructure::Wp2),
            _ => Err(parse_err("variance structure", s, "homo|by_sc|wp2")),
        }
    }
}

impl fmt::Display for VarianceStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VarianceStructure::Homo => "homo",
            VarianceStructure::BySc => "by_sc",
            VarianceStructure::Wp2 => "wp2",
        })
    }
}

impl FromStr for PredictionMode {
    type Err = SaeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "observed" | "observed_plus_predicted" => Ok(PredictionMode::ObservedPlusPredicted),
            "all" | "all_predicted" => Ok(PredictionMode::AllPredicted),
            _ => Err(parse_err("prediction mode", s, "observed|all")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_nests_reduced() {
        let u = Unit { id: "a".into(), ind: "I".into(), sc: 3, wp: 7, tax1: 2.0, tto: 0.0 };
        let full = Formula::Full.row(&u);
        let reduced = Formula::Reduced.row(&u);
        assert_eq!(&full[..6], &reduced[..]);
        assert_eq!(full, vec![1.0, 2.0, 0.0, 1.0, 0.0, 0.0, 7.0, 14.0]);
    }

    #[test]
    fn scaling_round_trips() {
        let units: Vec<Unit> = (1..=4)
            .map(|i| Unit {
                id: i.to_string(),
                ind: "I".into(),
                sc: 1,
                wp: 1,
                tax1: 1000.0 * i as f64,
                tto: 0.0,
            })
            .collect();
        let d = Design::from_units(Formula::Linear, &units);
        let beta = [3.0, 0.5];
        let scaled = d.to_scaled(&beta);
        for (k, u) in units.iter().enumerate() {
            let a = d.x.dot_row(k, &scaled);
            assert!((a - Formula::Linear.predict(u, &beta)).abs() < 1e-9);
        }
    }
}
