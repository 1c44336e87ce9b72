//! Synthetic business populations with a skewed, heteroscedastic outcome and
//! planted outliers.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::design::{allocation_by_rates, Allocation};
use crate::error::{Result, SaeError};
use crate::frame::{wp_band, Population, Unit, SIZE_CLASSES};

const NSC: usize = SIZE_CLASSES as usize;

#[derive(Debug, Clone, PartialEq)]
pub struct PopGenConfig {
    /// Population size.
    pub n: usize,
    /// Number of industries (domains).
    pub domains: usize,
    /// Ratio of the largest to the smallest domain share.
    pub domain_size_ratio: f64,
    /// Relative unit counts per size class.
    pub sc_shares: [f64; NSC],
    /// Within a size-class band, `P(wp) ∝ wp^-wp_decay`.
    pub wp_decay: f64,
    /// `ln tax1 = intercept + slope ln wp + domain shift + sd z`.
    pub tax1_log_intercept: f64,
    pub tax1_log_wp_slope: f64,
    pub tax1_log_sd: f64,
    /// Standard deviation of the per-domain shift in `ln tax1`.
    pub domain_tax1_sd: f64,
    /// Coefficients of intercept, tax1, sc, wp, tax1*wp.
    pub beta: [f64; 5],
    pub sigma_u: f64,
    /// Level-1 error sd is `noise_scale * wp^2`.
    pub noise_scale: f64,
    /// Gamma shape of the centred level-1 error; skewness is `2 / sqrt(shape)`.
    pub noise_shape: f64,
    /// Fraction of units given a positive gross error of `kappa * (1 + |z|)`
    /// clean-error standard deviations.
    pub contamination: f64,
    pub kappa: f64,
    pub seed: u64,
}

impl Default for PopGenConfig {
    fn default() -> Self {
        PopGenConfig {
            n: 63_958,
            domains: 20,
            domain_size_ratio: 75.0,
            sc_shares: [0.50, 0.30, 0.12, 0.05, 0.03],
            wp_decay: 1.0,
            tax1_log_intercept: 4.5,
            tax1_log_wp_slope: 1.2,
            tax1_log_sd: 0.6,
            domain_tax1_sd: 0.3,
            beta: [2.0, 1.03, 5.0, 3.0, 0.0005],
            sigma_u: 10.0,
            noise_scale: 0.17,
            noise_shape: 1.0,
            contamination: 0.0005,
            kappa: 250.0,
            seed: 20_240_601,
        }
    }
}

impl PopGenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SaeError::invalid(m));
        if self.domains == 0 {
            return bad("at least one domain is required".into());
        }
        if !(self.domain_size_ratio >= 1.0) || !self.domain_size_ratio.is_finite() {
            return bad(format!("domain size ratio must be >= 1, got {}", self.domain_size_ratio));
        }
        if self.sc_shares.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return bad("size-class shares must be positive".into());
        }
        if !(0.0..1.0).contains(&self.contamination) {
            return bad(format!("contamination fraction must be in [0, 1), got {}", self.contamination));
        }
        if !(self.kappa >= 1.0) || !self.kappa.is_finite() {
            return bad(format!("kappa must be >= 1, got {}", self.kappa));
        }
        if !(self.noise_shape > 0.0) {
            return bad(format!("noise shape must be > 0, got {}", self.noise_shape));
        }
        for (name, v) in [
            ("noise scale", self.noise_scale),
            ("sigma_u", self.sigma_u),
            ("tax1 log sd", self.tax1_log_sd),
            ("domain tax1 sd", self.domain_tax1_sd),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !self.wp_decay.is_finite() || !self.tax1_log_intercept.is_finite() || !self.tax1_log_wp_slope.is_finite()
        {
            return bad("tax1 and wp parameters must be finite".into());
        }
        if self.beta.iter().any(|b| !b.is_finite()) {
            return bad("outcome coefficients must be finite".into());
        }
        Ok(())
    }
}

/// Domain code for index `d` (0-based).
pub fn domain_code(d: usize) -> String {
    format!("D{:02}", d + 1)
}

fn domain_weights(cfg: &PopGenConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let d = cfg.domains;
    let mut w: Vec<f64> = (0..d)
        .map(|i| if d == 1 { 1.0 } else { cfg.domain_size_ratio.powf(i as f64 / (d - 1) as f64) })
        .collect();
    w.shuffle(rng);
    w
}

/// Largest-remainder rounding with at least one unit per cell.
fn apportion(n: usize, weights: &[f64]) -> Result<Vec<usize>> {
    if n < weights.len() {
        return Err(SaeError::invalid(format!(
            "population size {n} cannot fill {} domain x size-class cells",
            weights.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    let ideal: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut counts: Vec<usize> = ideal.iter().map(|v| (v.floor() as usize).max(1)).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    loop {
        let sum: usize = counts.iter().sum();
        if sum == n {
            return Ok(counts);
        }
        if sum < n {
            order.sort_by(|&a, &b| {
                (ideal[b] - counts[b] as f64).total_cmp(&(ideal[a] - counts[a] as f64)).then(a.cmp(&b))
            });
            for &c in order.iter().take(n - sum) {
                counts[c] += 1;
            }
        } else {
            order.sort_by(|&a, &b| {
                (counts[b] as f64 - ideal[b]).total_cmp(&(counts[a] as f64 - ideal[a])).then(a.cmp(&b))
            });
            let mut excess = sum - n;
            for &c in &order {
                if excess == 0 {
                    break;
                }
                if counts[c] > 1 {
                    counts[c] -= 1;
                    excess -= 1;
                }
            }
        }
    }
}

/// Unit counts per domain and size class implied by the configuration.
pub fn cell_counts(cfg: &PopGenConfig) -> Result<Vec<[usize; NSC]>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    cell_counts_with(cfg, &mut rng)
}

fn cell_counts_with(cfg: &PopGenConfig, rng: &mut ChaCha8Rng) -> Result<Vec<[usize; NSC]>> {
    let dw = domain_weights(cfg, rng);
    let weights: Vec<f64> =
        dw.iter().flat_map(|d| cfg.sc_shares.iter().map(move |s| d * s)).collect();
    let flat = apportion(cfg.n, &weights)?;
    Ok(flat
        .chunks(NSC)
        .map(|c| {
            let mut a = [0; NSC];
            a.copy_from_slice(c);
            a
        })
        .collect())
}

fn draw_wp(sc: u8, decay: f64, rng: &mut ChaCha8Rng) -> u32 {
    let (lo, hi) = wp_band(sc).expect("size class in range");
    let w: Vec<f64> = (lo..=hi).map(|v| (v as f64).powf(-decay)).collect();
    let total: f64 = w.iter().sum();
    let mut t = rng.random::<f64>() * total;
    for (i, wi) in w.iter().enumerate() {
        t -= wi;
        if t < 0.0 {
            return lo + i as u32;
        }
    }
    hi
}

/// Draws a population; deterministic given `cfg.seed`.
pub fn generate_population(cfg: &PopGenConfig) -> Result<Population> {
    generate_population_flagged(cfg).map(|(pop, _)| pop)
}

/// Like [`generate_population`], also returning which rows carry a planted
/// gross error.
pub fn generate_population_flagged(cfg: &PopGenConfig) -> Result<(Population, Vec<bool>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let counts = cell_counts_with(cfg, &mut rng)?;
    let gamma = Gamma::new(cfg.noise_shape, 1.0).map_err(|e| SaeError::invalid(e.to_string()))?;
    let shape_sd = cfg.noise_shape.sqrt();
    let b = cfg.beta;
    let mut units = Vec::with_capacity(cfg.n);
    let mut noise = Vec::with_capacity(cfg.n);
    let mut gross = Vec::with_capacity(cfg.n);
    for (d, cells) in counts.iter().enumerate() {
        let ind = domain_code(d);
        let z: f64 = StandardNormal.sample(&mut rng);
        let shift = cfg.domain_tax1_sd * z;
        let z: f64 = StandardNormal.sample(&mut rng);
        let u = cfg.sigma_u * z;
        for (c, &m) in cells.iter().enumerate() {
            let sc = c as u8 + 1;
            for _ in 0..m {
                let wp = draw_wp(sc, cfg.wp_decay, &mut rng);
                let z: f64 = StandardNormal.sample(&mut rng);
                let ln_tax1 =
                    cfg.tax1_log_intercept + cfg.tax1_log_wp_slope * (wp as f64).ln() + shift + cfg.tax1_log_sd * z;
                let tax1 = ln_tax1.exp();
                let g: f64 = gamma.sample(&mut rng);
                noise.push(cfg.noise_scale * (wp as f64).powi(2) * (g - cfg.noise_shape) / shape_sd);
                let z: f64 = StandardNormal.sample(&mut rng);
                gross.push((rng.random::<f64>() < cfg.contamination).then_some(1.0 + z.abs()));
                let wpf = wp as f64;
                let tto = b[0] + b[1] * tax1 + b[2] * sc as f64 + b[3] * wpf + b[4] * tax1 * wpf + u;
                units.push(Unit { id: format!("{}", 100_000 + units.len()), ind: ind.clone(), sc, wp, tax1, tto });
            }
        }
    }
    // gross errors are positive and sized by the spread of the clean errors
    let n = noise.len() as f64;
    let mean = noise.iter().sum::<f64>() / n;
    let sd = (noise.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt();
    for ((unit, e), g) in units.iter_mut().zip(&noise).zip(&gross) {
        unit.tto += e + g.map_or(0.0, |g| cfg.kappa * sd * g);
    }
    let flags = gross.iter().map(Option::is_some).collect();
    Ok((Population::new(units)?, flags))
}

/// Sampling rates by size class used for generated populations: small
/// businesses are sampled lightly, the largest heavily.
pub const DEFAULT_RATES: [f64; NSC] = [0.03, 0.06, 0.15, 0.30, 0.50];
/// Minimum stratum sample size.
pub const DEFAULT_MIN_N: usize = 3;
/// Strata at most this large are enumerated completely.
pub const DEFAULT_TAKE_ALL_MAX: usize = 6;

/// The default stratified allocation for a generated population.
pub fn default_allocation(pop: &Population) -> Allocation {
    allocation_by_rates(pop, &DEFAULT_RATES, DEFAULT_MIN_N, DEFAULT_TAKE_ALL_MAX)
}
