//! Population and sample data model, CSV interchange and domain bookkeeping.
//!
//! A [`Population`] is the finite frame of business units. Domains are the
//! distinct industry codes (`ind`); strata are `(ind, sc)` pairs. A [`Sample`]
//! is a set of row indices into a shared parent population together with the
//! inclusion probability of every sampled unit.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Result, SaeError};

/// Number of size classes covered by the frame.
pub const SIZE_CLASSES: u8 = 5;

/// Size class implied by a working-persons count: 1, 2-4, 5-9, 10-19, 20-49.
pub fn size_class_for(wp: u32) -> Option<u8> {
    match wp {
        1 => Some(1),
        2..=4 => Some(2),
        5..=9 => Some(3),
        10..=19 => Some(4),
        20..=49 => Some(5),
        _ => None,
    }
}

/// Inclusive working-persons band of a size class.
pub fn wp_band(sc: u8) -> Option<(u32, u32)> {
    match sc {
        1 => Some((1, 1)),
        2 => Some((2, 4)),
        3 => Some((5, 9)),
        4 => Some((10, 19)),
        5 => Some((20, 49)),
        _ => None,
    }
}

/// One business record.
#[derive(Debug, Clone, PartialEq)]
pub struct Unit {
    pub id: String,
    /// Industry code; the estimation domain.
    pub ind: String,
    /// Size class, 1..=5.
    pub sc: u8,
    /// Working persons.
    pub wp: u32,
    /// Prior-year tax turnover (auxiliary).
    pub tax1: f64,
    /// Target tax turnover.
    pub tto: f64,
}

impl Unit {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if self.ind.is_empty() {
            return Err(format!("unit `{}` has an empty industry code", self.id));
        }
        let Some((lo, hi)) = wp_band(self.sc) else {
            return Err(format!("unit `{}`: size class {} outside 1..=5", self.id, self.sc));
        };
        if self.wp < lo || self.wp > hi {
            let implied = size_class_for(self.wp)
                .map(|c| {
                    let (a, b) = wp_band(c).unwrap();
                    format!("wp {} implies band {a}-{b}", self.wp)
                })
                .unwrap_or_else(|| format!("wp {} outside 1-49", self.wp));
            return Err(format!(
                "unit `{}`: size class {} inconsistent with working persons ({implied})",
                self.id, self.sc
            ));
        }
        if !self.tax1.is_finite() || self.tax1 < 0.0 {
            return Err(format!("unit `{}`: tax1 must be finite and nonnegative", self.id));
        }
        if !self.tto.is_finite() {
            return Err(format!("unit `{}`: tto must be finite", self.id));
        }
        Ok(())
    }
}

/// Variable selector for totals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variable {
    Tto,
    Tax1,
    Wp,
}

impl Variable {
    pub fn of(self, unit: &Unit) -> f64 {
        match self {
            Variable::Tto => unit.tto,
            Variable::Tax1 => unit.tax1,
            Variable::Wp => unit.wp as f64,
        }
    }
}

/// A design stratum: all population units sharing `(ind, sc)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Stratum {
    pub domain: usize,
    pub sc: u8,
    pub rows: Vec<usize>,
}

impl Stratum {
    pub fn size(&self) -> usize {
        self.rows.len()
    }
}

#[derive(Debug, Clone)]
pub struct Population {
    units: Vec<Unit>,
    domains: Vec<String>,
    domain_of: Vec<usize>,
    domain_rows: Vec<Vec<usize>>,
    strata: Vec<Stratum>,
    stratum_of: Vec<usize>,
    id_index: HashMap<String, usize>,
}

impl PartialEq for Population {
    fn eq(&self, other: &Self) -> bool {
        self.units == other.units
    }
}

impl Population {
    /// Builds the domain and stratum index. Domains are ordered by code.
    pub fn new(units: Vec<Unit>) -> Result<Self> {
        let mut id_index = HashMap::with_capacity(units.len());
        for (row, u) in units.iter().enumerate() {
            u.validate().map_err(|message| SaeError::Row { row: row + 1, message })?;
            if id_index.insert(u.id.clone(), row).is_some() {
                return Err(SaeError::DuplicateId(u.id.clone()));
            }
        }
        let domain_set: std::collections::BTreeSet<&str> =
            units.iter().map(|u| u.ind.as_str()).collect();
        let domains: Vec<String> = domain_set.into_iter().map(str::to_owned).collect();
        let lookup: HashMap<&str, usize> =
            domains.iter().enumerate().map(|(i, d)| (d.as_str(), i)).collect();
        let domain_of: Vec<usize> = units.iter().map(|u| lookup[u.ind.as_str()]).collect();

        let mut domain_rows = vec![Vec::new(); domains.len()];
        let mut cells: BTreeMap<(usize, u8), Vec<usize>> = BTreeMap::new();
        for (row, u) in units.iter().enumerate() {
            domain_rows[domain_of[row]].push(row);
            cells.entry((domain_of[row], u.sc)).or_default().push(row);
        }
        let mut stratum_of = vec![0; units.len()];
        let strata: Vec<Stratum> = cells
            .into_iter()
            .enumerate()
            .map(|(h, ((domain, sc), rows))| {
                for &r in &rows {
                    stratum_of[r] = h;
                }
                Stratum { domain, sc, rows }
            })
            .collect();

        Ok(Population {
            units,
            domains,
            domain_of,
            domain_rows,
            strata,
            stratum_of,
            id_index,
        })
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    pub fn unit(&self, row: usize) -> &Unit {
        &self.units[row]
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn domains(&self) -> &[String] {
        &self.domains
    }

    pub fn domain_index(&self, ind: &str) -> Result<usize> {
        self.domains
            .binary_search_by(|d| d.as_str().cmp(ind))
            .map_err(|_| SaeError::UnknownDomain(ind.to_owned()))
    }

    /// Domain index of a population row.
    pub fn domain_of(&self, row: usize) -> usize {
        self.domain_of[row]
    }

    pub fn domain_rows(&self, domain: usize) -> &[usize] {
        &self.domain_rows[domain]
    }

    pub fn domain_size(&self, domain: usize) -> usize {
        self.domain_rows[domain].len()
    }

    pub fn strata(&self) -> &[Stratum] {
        &self.strata
    }

    pub fn stratum_of(&self, row: usize) -> usize {
        self.stratum_of[row]
    }

    pub fn stratum_index(&self, ind: &str, sc: u8) -> Option<usize> {
        let d = self.domain_index(ind).ok()?;
        self.strata.iter().position(|s| s.domain == d && s.sc == sc)
    }

    pub fn row_of_id(&self, id: &str) -> Option<usize> {
        self.id_index.get(id).copied()
    }

    /// Exact sum of `var` over the population units of domain `ind`.
    pub fn domain_total(&self, var: Variable, ind: &str) -> Result<f64> {
        let d = self.domain_index(ind)?;
        Ok(self.domain_total_at(var, d))
    }

    pub fn domain_total_at(&self, var: Variable, domain: usize) -> f64 {
        self.domain_rows[domain].iter().map(|&r| var.of(&self.units[r])).sum()
    }

    pub fn total(&self, var: Variable) -> f64 {
        self.units.iter().map(|u| var.of(u)).sum()
    }

    /// Same frame with the outcome replaced, e.g. for bootstrap populations.
    pub fn with_outcome(&self, tto: &[f64]) -> Result<Population> {
        if tto.len() != self.units.len() {
            return Err(SaeError::invalid("outcome vector length differs from population size"));
        }
        let mut next = self.clone();
        for (u, &y) in next.units.iter_mut().zip(tto) {
            u.tto = y;
        }
        Ok(next)
    }

    /// Population without the given rows. Stratum and domain indices are rebuilt.
    pub fn without_rows(&self, removed: &HashSet<usize>) -> Result<Population> {
        let units = self
            .units
            .iter()
            .enumerate()
            .filter(|(i, _)| !removed.contains(i))
            .map(|(_, u)| u.clone())
            .collect();
        Population::new(units)
    }

    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Population> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let cols = ColumnMap::resolve(rdr.headers()?, &POPULATION_COLUMNS)?;
        let mut units = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            units.push(cols.unit(&rec, i + 1)?);
        }
        Population::new(units)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Population> {
        Population::from_csv_reader(std::fs::File::open(path)?)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(POPULATION_COLUMNS)?;
        for u in &self.units {
            w.write_record(unit_fields(u))?;
        }
        w.flush()?;
        Ok(())
    }
}

pub const POPULATION_COLUMNS: [&str; 6] = ["id", "ind", "sc", "wp", "tax1", "tto"];
pub const SAMPLE_COLUMNS: [&str; 8] = ["id", "ind", "sc", "wp", "tax1", "tto", "pi", "d"];

fn unit_fields(u: &Unit) -> [String; 6] {
    [
        u.id.clone(),
        u.ind.clone(),
        u.sc.to_string(),
        u.wp.to_string(),
        u.tax1.to_string(),
        u.tto.to_string(),
    ]
}

struct ColumnMap {
    idx: Vec<usize>,
}

impl ColumnMap {
    fn resolve(headers: &csv::StringRecord, names: &[&str]) -> Result<ColumnMap> {
        let idx = names
            .iter()
            .map(|name| {
                headers
                    .iter()
                    .position(|h| h == *name)
                    .ok_or_else(|| SaeError::MissingColumn((*name).to_owned()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ColumnMap { idx })
    }

    fn field<'a>(&self, rec: &'a csv::StringRecord, col: usize, row: usize) -> Result<&'a str> {
        rec.get(self.idx[col]).ok_or_else(|| SaeError::Row {
            row,
            message: "too few fields".into(),
        })
    }

    fn parse<T: std::str::FromStr>(
        &self,
        rec: &csv::StringRecord,
        col: usize,
        name: &str,
        row: usize,
    ) -> Result<T> {
        let raw = self.field(rec, col, row)?;
        if raw.is_empty() {
            return Err(SaeError::Row { row, message: format!("missing value for `{name}`") });
        }
        raw.parse().map_err(|_| SaeError::Row {
            row,
            message: format!("non-numeric value `{raw}` for `{name}`"),
        })
    }

    fn unit(&self, rec: &csv::StringRecord, row: usize) -> Result<Unit> {
        let unit = Unit {
            id: self.field(rec, 0, row)?.to_owned(),
            ind: self.field(rec, 1, row)?.to_owned(),
            sc: self.parse(rec, 2, "sc", row)?,
            wp: self.parse(rec, 3, "wp", row)?,
            tax1: self.parse(rec, 4, "tax1", row)?,
            tto: self.parse(rec, 5, "tto", row)?,
        };
        unit.validate().map_err(|message| SaeError::Row { row, message })?;
        Ok(unit)
    }
}

/// A without-replacement sample from a shared parent population.
#[derive(Debug, Clone)]
pub struct Sample {
    parent: Arc<Population>,
    rows: Vec<usize>,
    pi: Vec<f64>,
    by_domain: Vec<Vec<usize>>,
    n_h: Vec<usize>,
}

impl Sample {
    /// `rows` index into `parent`; `pi` are the matching inclusion probabilities.
    pub fn new(parent: Arc<Population>, rows: Vec<usize>, pi: Vec<f64>) -> Result<Sample> {
        if rows.len() != pi.len() {
            return Err(SaeError::invalid("rows and inclusion probabilities differ in length"));
        }
        let mut seen = HashSet::with_capacity(rows.len());
        for (k, (&r, &p)) in rows.iter().zip(&pi).enumerate() {
            if r >= parent.len() {
                return Err(SaeError::Row { row: k + 1, message: format!("row {r} not in parent") });
            }
            if !seen.insert(r) {
                return Err(SaeError::DuplicateId(parent.unit(r).id.clone()));
            }
            if !(p > 0.0 && p <= 1.0) {
                return Err(SaeError::Row {
                    row: k + 1,
                    message: format!("inclusion probability {p} outside (0, 1]"),
                });
            }
        }
        let mut by_domain = vec![Vec::new(); parent.domains().len()];
        let mut n_h = vec![0; parent.strata().len()];
        for (k, &r) in rows.iter().enumerate() {
            by_domain[parent.domain_of(r)].push(k);
            n_h[parent.stratum_of(r)] += 1;
        }
        Ok(Sample { parent, rows, pi, by_domain, n_h })
    }

    pub fn parent(&self) -> &Arc<Population> {
        &self.parent
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn unit(&self, k: usize) -> &Unit {
        self.parent.unit(self.rows[k])
    }

    pub fn pi(&self, k: usize) -> f64 {
        self.pi[k]
    }

    /// Design weight `1 / pi`.
    pub fn d(&self, k: usize) -> f64 {
        1.0 / self.pi[k]
    }

    pub fn weights(&self) -> Vec<f64> {
        self.pi.iter().map(|p| 1.0 / p).collect()
    }

    pub fn domain_of(&self, k: usize) -> usize {
        self.parent.domain_of(self.rows[k])
    }

    /// Sample positions (not population rows) that fall in `domain`.
    pub fn domain_members(&self, domain: usize) -> &[usize] {
        &self.by_domain[domain]
    }

    /// Achieved sample size per parent stratum.
    pub fn stratum_counts(&self) -> &[usize] {
        &self.n_h
    }

    /// Number of distinct domains with at least one sampled unit.
    pub fn domains_present(&self) -> usize {
        self.by_domain.iter().filter(|m| !m.is_empty()).count()
    }

    /// Same sampled rows on a different population with identical frame layout.
    pub fn rebind(&self, parent: Arc<Population>) -> Result<Sample> {
        if parent.len() != self.parent.len() {
            return Err(SaeError::invalid("rebind target has a different frame size"));
        }
        Sample::new(parent, self.rows.clone(), self.pi.clone())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(SAMPLE_COLUMNS)?;
        for k in 0..self.len() {
            let mut rec: Vec<String> = unit_fields(self.unit(k)).into();
            rec.push(self.pi[k].to_string());
            rec.push(self.d(k).to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a sample CSV and binds every row to `parent` by id.
    pub fn from_csv_reader<R: Read>(reader: R, parent: Arc<Population>) -> Result<Sample> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let cols = ColumnMap::resolve(&headers, &SAMPLE_COLUMNS)?;
        let mut rows = Vec::new();
        let mut pi = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row = i + 1;
            let unit = cols.unit(&rec, row)?;
            let p: f64 = cols.parse(&rec, 6, "pi", row)?;
            let d: f64 = cols.parse(&rec, 7, "d", row)?;
            if !(p > 0.0 && p <= 1.0) {
                return Err(SaeError::Row { row, message: format!("pi {p} outside (0, 1]") });
            }
            if (d * p - 1.0).abs() > 1e-9 {
                return Err(SaeError::Row { row, message: format!("d {d} is not 1/pi") });
            }
            let r = parent.row_of_id(&unit.id).ok_or_else(|| SaeError::Row {
                row,
                message: format!("unit `{}` not in population", unit.id),
            })?;
            if parent.unit(r) != &unit {
                return Err(SaeError::Row {
                    row,
                    message: format!("unit `{}` differs from its population record", unit.id),
                });
            }
            rows.push(r);
            pi.push(p);
        }
        Sample::new(parent, rows, pi)
    }

    pub fn load(path: impl AsRef<Path>, parent: Arc<Population>) -> Result<Sample> {
        Sample::from_csv_reader(std::fs::File::open(path)?, parent)
    }
}
