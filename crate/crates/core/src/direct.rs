//! Design-based direct estimators: Horvitz-Thompson and GREG.
//!
//! The GREG auxiliaries are `tax1` split into cells `ind x size-class group`,
//! with size-class groups 1-9 and 10-49 working persons. Each cell contributes
//! one slope-only column, so the design-weighted normal equations are diagonal
//! and the regression coefficient of a cell is a weighted ratio.

use std::collections::BTreeMap;
use std::io::Write;

use crate::error::{Result, SaeError};
use crate::frame::{Population, Sample, Unit};

/// Auxiliary cell layout for GREG calibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuxSpec {
    /// Size classes `<= split_sc` form the first group.
    pub split_sc: u8,
}

impl Default for AuxSpec {
    /// Groups `{1-9 wp}` (sc 1..=3) and `{10-49 wp}` (sc 4..=5).
    fn default() -> Self {
        AuxSpec { split_sc: 3 }
    }
}

impl AuxSpec {
    pub fn group(&self, u: &Unit) -> usize {
        if u.sc <= self.split_sc {
            0
        } else {
            1
        }
    }

    pub fn group_label(&self, g: usize) -> &'static str {
        if g == 0 {
            "1-9"
        } else {
            "10-49"
        }
    }

    fn cell(&self, pop: &Population, row: usize) -> (usize, usize) {
        (pop.domain_of(row), self.group(pop.unit(row)))
    }
}

/// Horvitz-Thompson total of `tto` in a domain.
///
/// Errors when the domain is unknown or has no sampled units.
pub fn ht_total(sample: &Sample, ind: &str) -> Result<f64> {
    let d = sample.parent().domain_index(ind)?;
    ht_total_at(sample, d)
}

pub fn ht_total_at(sample: &Sample, domain: usize) -> Result<f64> {
    let members = sample.domain_members(domain);
    if members.is_empty() {
        return Err(SaeError::EmptyDomain(sample.parent().domains()[domain].clone()));
    }
    Ok(members.iter().map(|&k| sample.d(k) * sample.unit(k).tto).sum())
}

/// One calibration cell: population and HT totals of `tax1`, and the fitted slope.
#[derive(Debug, Clone, PartialEq)]
pub struct CellFit {
    pub domain: usize,
    pub group: usize,
    pub population_tax1: f64,
    pub ht_tax1: f64,
    pub ht_y: f64,
    pub beta: f64,
    /// `sum d_i tax1_i^2` over the sampled cell units.
    pub gram: f64,
}

/// GREG fit shared by every domain of one sample.
#[derive(Debug, Clone)]
pub struct GregFit {
    pub aux: AuxSpec,
    pub cells: Vec<CellFit>,
    cell_index: BTreeMap<(usize, usize), usize>,
}

impl GregFit {
    /// Design-weighted least squares of `tto` on the cell-wise `tax1` columns.
    pub fn fit(sample: &Sample, aux: AuxSpec) -> Result<GregFit> {
        let pop = sample.parent();
        let mut cells: BTreeMap<(usize, usize), CellFit> = BTreeMap::new();
        for (row, u) in pop.units().iter().enumerate() {
            let (domain, group) = aux.cell(pop, row);
            cells
                .entry((domain, group))
                .or_insert(CellFit {
                    domain,
                    group,
                    population_tax1: 0.0,
                    ht_tax1: 0.0,
                    ht_y: 0.0,
                    beta: 0.0,
                    gram: 0.0,
                })
                .population_tax1 += u.tax1;
        }
        let mut sxy: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for k in 0..sample.len() {
            let key = aux.cell(pop, sample.rows()[k]);
            let (u, d) = (sample.unit(k), sample.d(k));
            let c = cells.get_mut(&key).expect("sampled unit belongs to a population cell");
            c.ht_tax1 += d * u.tax1;
            c.ht_y += d * u.tto;
            c.gram += d * u.tax1 * u.tax1;
            *sxy.entry(key).or_default() += d * u.tax1 * u.tto;
            *counts.entry(key).or_default() += 1;
        }
        for (key, c) in cells.iter_mut() {
            let label = || format!("({}, wp {})", pop.domains()[key.0], aux.group_label(key.1));
            if counts.get(key).copied().unwrap_or(0) == 0 {
                return Err(SaeError::EmptyCell(label()));
            }
            if c.gram <= 0.0 {
                if c.population_tax1 == 0.0 {
                    // tax1 is identically zero in this cell; its column never enters.
                    continue;
                }
                return Err(SaeError::Singular(format!("GREG cell {} has zero tax1", label())));
            }
            c.beta = sxy[key] / c.gram;
        }
        let cell_index = cells.keys().enumerate().map(|(i, k)| (*k, i)).collect();
        Ok(GregFit { aux, cells: cells.into_values().collect(), cell_index })
    }

    /// `HT + beta' (X - x_HT)` for one domain.
    pub fn total(&self, sample: &Sample, domain: usize) -> Result<f64> {
        let ht = ht_total_at(sample, domain)?;
        let correction: f64 = self
            .cells
            .iter()
            .filter(|c| c.domain == domain)
            .map(|c| c.beta * (c.population_tax1 - c.ht_tax1))
            .sum();
        Ok(ht + correction)
    }

    /// Calibrated weights `w_i = d_i (1 + (X_c - x_c,HT) tax1_i / sum d tax1^2)`.
    pub fn weights(&self, sample: &Sample) -> Vec<f64> {
        let pop = sample.parent();
        (0..sample.len())
            .map(|k| {
                let key = self.aux.cell(pop, sample.rows()[k]);
                let c = &self.cells[self.cell_index[&key]];
                let d = sample.d(k);
                if c.gram > 0.0 {
                    d * (1.0 + (c.population_tax1 - c.ht_tax1) * sample.unit(k).tax1 / c.gram)
                } else {
                    d
                }
            })
            .collect()
    }

    /// Writes the audit table of calibration cells.
    pub fn write_cells<W: Write>(&self, pop: &Population, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["ind", "wp_group", "pop_tax1", "ht_tax1", "beta"])?;
        for c in &self.cells {
            w.write_record([
                pop.domains()[c.domain].clone(),
                self.aux.group_label(c.group).to_owned(),
                c.population_tax1.to_string(),
                c.ht_tax1.to_string(),
                c.beta.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// GREG estimate of the `tto` total in domain `ind`.
pub fn greg_total(sample: &Sample, aux: AuxSpec, ind: &str) -> Result<f64> {
    let d = sample.parent().domain_index(ind)?;
    GregFit::fit(sample, aux)?.total(sample, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn u(id: &str, ind: &str, sc: u8, tax1: f64, tto: f64) -> Unit {
        let wp = crate::frame::wp_band(sc).unwrap().0;
        Unit { id: id.into(), ind: ind.into(), sc, wp, tax1, tto }
    }

    fn sample(units: Vec<Unit>, take: &[(usize, f64)]) -> Sample {
        let pop = Arc::new(Population::new(units).unwrap());
        Sample::new(pop, take.iter().map(|t| t.0).collect(), take.iter().map(|t| 1.0 / t.1).collect())
            .unwrap()
    }

    #[test]
    fn ht_examples() {
        let s = sample(
            vec![u("a", "A", 1, 1.0, 10.0), u("b", "A", 1, 1.0, 5.0), u("c", "A", 1, 1.0, 0.0)],
            &[(0, 2.0), (1, 4.0)],
        );
        assert_eq!(ht_total(&s, "A").unwrap(), 40.0);

        let s = sample(
            vec![u("a", "A", 1, 1.0, 1.0), u("b", "B", 1, 1.0, 7.0), u("c", "A", 1, 1.0, 0.0)],
            &[(0, 2.0), (1, 3.0)],
        );
        assert_eq!(ht_total(&s, "A").unwrap(), 2.0);
        assert!(matches!(ht_total(&s, "Z"), Err(SaeError::UnknownDomain(_))));
    }

    #[test]
    fn ht_empty_domain_is_error() {
        let s = sample(vec![u("a", "A", 1, 1.0, 1.0), u("b", "B", 1, 1.0, 7.0)], &[(0, 1.0)]);
        assert!(matches!(ht_total(&s, "B"), Err(SaeError::EmptyDomain(_))));
    }

    #[test]
    fn greg_exact_under_proportional_model() {
        let units = vec![
            u("a", "A", 1, 2.0, 6.0),
            u("b", "A", 2, 4.0, 12.0),
            u("c", "A", 4, 10.0, 30.0),
            u("d", "A", 4, 3.0, 9.0),
            u("e", "A", 1, 5.0, 15.0),
        ];
        let s = sample(units, &[(0, 3.0), (2, 2.0)]);
        let truth = s.parent().domain_total(crate::frame::Variable::Tto, "A").unwrap();
        assert!((greg_total(&s, AuxSpec::default(), "A").unwrap() - truth).abs() < 1e-12);
    }

    #[test]
    fn greg_equals_ht_when_aux_matches() {
        // Census: HT auxiliary totals equal population totals.
        let units = vec![u("a", "A", 1, 2.0, 7.0), u("b", "A", 4, 4.0, 1.0)];
        let s = sample(units, &[(0, 1.0), (1, 1.0)]);
        let aux = AuxSpec::default();
        assert_eq!(greg_total(&s, aux, "A").unwrap(), ht_total(&s, "A").unwrap());
    }

    #[test]
    fn greg_hand_computed_two_cells() {
        // Oracle by explicit weighted least squares on the two cell columns.
        let units = vec![
            u("a", "A", 1, 2.0, 5.0),
            u("b", "A", 2, 3.0, 7.0),
            u("c", "A", 1, 4.0, 9.0),
            u("d", "A", 4, 10.0, 18.0),
            u("e", "A", 5, 20.0, 45.0),
            u("f", "A", 4, 6.0, 12.0),
        ];
        let s = sample(units, &[(0, 2.0), (1, 1.5), (3, 2.0), (4, 1.0)]);
        // cell 1-9: sampled (tax1, y, d) = (2,5,2), (3,7,1.5); pop tax1 = 2+3+4 = 9
        let b1 = (2.0 * 2.0 * 5.0 + 1.5 * 3.0 * 7.0) / (2.0 * 4.0 + 1.5 * 9.0);
        let x1_ht = 2.0 * 2.0 + 1.5 * 3.0;
        // cell 10-49: (10,18,2), (20,45,1); pop tax1 = 10+20+6 = 36
        let b2 = (2.0 * 10.0 * 18.0 + 20.0 * 45.0) / (2.0 * 100.0 + 400.0);
        let x2_ht = 2.0 * 10.0 + 20.0;
        let ht = 2.0 * 5.0 + 1.5 * 7.0 + 2.0 * 18.0 + 45.0;
        let expect = ht + b1 * (9.0 - x1_ht) + b2 * (36.0 - x2_ht);
        let got = greg_total(&s, AuxSpec::default(), "A").unwrap();
        assert!((got - expect).abs() < 1e-12 * expect.abs());

        // calibrated weights reproduce the estimate and the aux totals
        let fit = GregFit::fit(&s, AuxSpec::default()).unwrap();
        let w = fit.weights(&s);
        let via_w: f64 = (0..s.len()).map(|k| w[k] * s.unit(k).tto).sum();
        assert!((via_w - expect).abs() < 1e-12 * expect.abs());
        let cal1: f64 = (0..s.len()).filter(|&k| s.unit(k).sc <= 3).map(|k| w[k] * s.unit(k).tax1).sum();
        assert!((cal1 - 9.0).abs() < 1e-12);
    }

    #[test]
    fn greg_empty_cell_is_error() {
        let units = vec![u("a", "A", 1, 2.0, 5.0), u("b", "A", 4, 3.0, 7.0)];
        let s = sample(units, &[(0, 1.0)]);
        assert!(matches!(greg_total(&s, AuxSpec::default(), "A"), Err(SaeError::EmptyCell(_))));
    }
}
