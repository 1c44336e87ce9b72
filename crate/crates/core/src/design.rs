//! Stratified simple random sampling without replacement, with take-all strata.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SaeError};
use crate::frame::{Population, Sample, SIZE_CLASSES};

/// Requested sample size per `(ind, sc)` stratum.
pub type Allocation = BTreeMap<(String, u8), i64>;

#[derive(Debug, Clone, PartialEq)]
pub struct StratumDesign {
    /// Index into [`Population::strata`].
    pub stratum: usize,
    pub ind: String,
    pub sc: u8,
    pub population_size: usize,
    pub sample_size: usize,
    pub take_all: bool,
}

impl StratumDesign {
    pub fn pi(&self) -> f64 {
        self.sample_size as f64 / self.population_size as f64
    }

    pub fn weight(&self) -> f64 {
        self.population_size as f64 / self.sample_size as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignSpec {
    strata: Vec<StratumDesign>,
    population_len: usize,
    warnings: Vec<String>,
}

impl DesignSpec {
    pub fn strata(&self) -> &[StratumDesign] {
        &self.strata
    }

    /// Over-allocation notices produced while building the design.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn sample_size(&self) -> usize {
        self.strata.iter().map(|s| s.sample_size).sum()
    }

    /// A design that enumerates every stratum completely.
    pub fn census(pop: &Population) -> DesignSpec {
        let alloc = pop
            .strata()
            .iter()
            .map(|s| ((pop.domains()[s.domain].clone(), s.sc), s.size() as i64))
            .collect();
        build_design(pop, &alloc).expect("census allocation is always valid")
    }
}

/// Validates an allocation against the population and derives inclusion probabilities.
///
/// Requests above `N_h` are clipped to a take-all stratum and reported in
/// [`DesignSpec::warnings`].
pub fn build_design(pop: &Population, allocation: &Allocation) -> Result<DesignSpec> {
    for (ind, sc) in allocation.keys() {
        if pop.stratum_index(ind, *sc).is_none() {
            return Err(SaeError::UnknownStratum { ind: ind.clone(), sc: *sc });
        }
    }
    let mut strata = Vec::with_capacity(pop.strata().len());
    let mut warnings = Vec::new();
    for (h, s) in pop.strata().iter().enumerate() {
        let ind = pop.domains()[s.domain].clone();
        let requested = *allocation
            .get(&(ind.clone(), s.sc))
            .ok_or_else(|| SaeError::MissingAllocation { ind: ind.clone(), sc: s.sc })?;
        if requested <= 0 {
            return Err(SaeError::InvalidAllocation { ind, sc: s.sc, n: requested });
        }
        let big_n = s.size();
        let mut n = requested as usize;
        if n > big_n {
            let msg = format!(
                "stratum ({ind}, sc {}): allocation {n} exceeds N_h = {big_n}; clipped to take-all",
                s.sc
            );
            log::warn!("{msg}");
            warnings.push(msg);
            n = big_n;
        }
        strata.push(StratumDesign {
            stratum: h,
            ind,
            sc: s.sc,
            population_size: big_n,
            sample_size: n,
            take_all: n == big_n,
        });
    }
    Ok(DesignSpec { strata, population_len: pop.len(), warnings })
}

/// Per-replicate seed derivation (splitmix64 finalizer over `seed` and `k`).
pub fn replicate_seed(seed: u64, k: u64) -> u64 {
    let mut z = seed ^ k.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws `n_h` units per stratum uniformly without replacement.
///
/// The draw is a pure function of `(design, pop, seed)`.
pub fn draw_sample(design: &DesignSpec, pop: &Arc<Population>, seed: u64) -> Result<Sample> {
    if design.population_len != pop.len() || design.strata.len() != pop.strata().len() {
        return Err(SaeError::invalid("design was built against a different population"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(design.sample_size());
    let mut pi = Vec::with_capacity(design.sample_size());
    let mut scratch: Vec<usize> = Vec::new();
    for sd in &design.strata {
        let stratum = &pop.strata()[sd.stratum];
        if stratum.size() != sd.population_size {
            return Err(SaeError::invalid("design was built against a different population"));
        }
        let p = sd.pi();
        if sd.take_all {
            rows.extend_from_slice(&stratum.rows);
            pi.extend(std::iter::repeat_n(1.0, stratum.size()));
            continue;
        }
        // Partial Fisher-Yates over the stratum's rows.
        scratch.clear();
        scratch.extend_from_slice(&stratum.rows);
        let big_n = scratch.len();
        for i in 0..sd.sample_size {
            let j = rng.random_range(i..big_n);
            scratch.swap(i, j);
        }
        let mut chosen = scratch[..sd.sample_size].to_vec();
        chosen.sort_unstable();
        pi.extend(std::iter::repeat_n(p, chosen.len()));
        rows.extend(chosen);
    }
    Sample::new(pop.clone(), rows, pi)
}

/// Allocation with stratum sampling rates by size class.
///
/// `n_h = max(min_n, round(rate_sc * N_h))`; strata with `N_h <= take_all_max`
/// are fully enumerated. Not an optimal allocation, just a convenient input
/// for generated populations.
pub fn allocation_by_rates(
    pop: &Population,
    rates: &[f64; SIZE_CLASSES as usize],
    min_n: usize,
    take_all_max: usize,
) -> Allocation {
    pop.strata()
        .iter()
        .map(|s| {
            let big_n = s.size();
            let n = if big_n <= take_all_max {
                big_n
            } else {
                let r = rates[(s.sc - 1) as usize];
                ((r * big_n as f64).round() as usize).max(min_n).min(big_n)
            };
            ((pop.domains()[s.domain].clone(), s.sc), n as i64)
        })
        .collect()
}

pub fn read_allocation<R: Read>(reader: R) -> Result<Allocation> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| SaeError::MissingColumn(name.to_owned()))
    };
    let (ci, cs, cn) = (col("ind")?, col("sc")?, col("n_h")?);
    let mut out = Allocation::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let bad = |what: &str| SaeError::Row { row, message: format!("invalid `{what}`") };
        let ind = rec.get(ci).ok_or_else(|| bad("ind"))?.to_owned();
        let sc: u8 = rec.get(cs).and_then(|v| v.parse().ok()).ok_or_else(|| bad("sc"))?;
        let n: i64 = rec.get(cn).and_then(|v| v.parse().ok()).ok_or_else(|| bad("n_h"))?;
        if out.insert((ind, sc), n).is_some() {
            return Err(SaeError::Row { row, message: "duplicate stratum".into() });
        }
    }
    Ok(out)
}

pub fn load_allocation(path: impl AsRef<Path>) -> Result<Allocation> {
    read_allocation(std::fs::File::open(path)?)
}

pub fn write_allocation<W: Write>(alloc: &Allocation, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["ind", "sc", "n_h"])?;
    for ((ind, sc), n) in alloc {
        w.write_record([ind.clone(), sc.to_string(), n.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
