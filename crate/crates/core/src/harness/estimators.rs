//! The estimator catalogue used by the harness and the command line, and a
//! per-sample context that shares model fits between estimators.

use std::cell::OnceCell;
use std::fmt;
use std::str::FromStr;

use crate::direct::{ht_total_at, AuxSpec, GregFit};
use crate::error::{Result, SaeError};
use crate::frame::Sample;
use crate::mixed::{eblup_total_at, fit_lmm, Criterion, MixedFit, PseudoEblupFit};
use crate::model::{Formula, ModelSpec, VarianceStructure};
use crate::mquantile::{
    default_grid, fit_mq_grid, mq_cd_total_at, mq_domain_fits, mq_domain_scale, mq_naive_total_at,
    mq_wr_total_with_scale, unit_q_coefficients, BiasAdjustConfig, MQFitGrid, MqDomainFits, MqOptions,
};
use crate::robust::{fit_mreg, fit_reblup, reblup_total_at, robust_synthetic_total_at, HuberConfig, RobustFit, RobustMixedFit};

/// A small-domain estimator of the `tto` total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Estimator {
    Ht,
    Greg,
    Eblup(VarianceStructure),
    /// Survey-weighted pseudo-EBLUP with homoscedastic variance components.
    Peblup,
    /// Robust synthetic (M-regression).
    Msyn,
    Reblup,
    Mq,
    Mqw,
    Mqcd,
    Mqcdw,
    /// Robustly bias-adjusted M-quantile with the given `b_phi`.
    Mqwr(f64),
}

impl FromStr for Estimator {
    type Err = SaeError;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let s = s.trim();
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let no_arg = |e: Estimator| match arg {
            None => Ok(e),
            Some(a) => Err(SaeError::invalid(format!("estimator `{name}` takes no argument, got `{a}`"))),
        };
        match name {
            "ht" => no_arg(Estimator::Ht),
            "greg" => no_arg(Estimator::Greg),
            "eblup" => Ok(Estimator::Eblup(arg.map(str::parse).transpose()?.unwrap_or_default())),
            "peblup" => no_arg(Estimator::Peblup),
            "msyn" => no_arg(Estimator::Msyn),
            "reblup" => no_arg(Estimator::Reblup),
            "mq" => no_arg(Estimator::Mq),
            "mqw" => no_arg(Estimator::Mqw),
            "mqcd" => no_arg(Estimator::Mqcd),
            "mqcdw" => no_arg(Estimator::Mqcdw),
            "mqwr" => {
                let b = match arg {
                    Some(a) => a
                        .parse::<f64>()
                        .map_err(|_| SaeError::invalid(format!("invalid b_phi `{a}` for mqwr")))?,
                    None => BiasAdjustConfig::default().b_phi,
                };
                BiasAdjustConfig::new(b)?;
                Ok(Estimator::Mqwr(b))
            }
            _ => Err(SaeError::invalid(format!(
                "unknown estimator `{s}` (expected ht|greg|eblup[:homo|by_sc|wp2]|peblup|msyn|reblup|mq|mqw|mqcd|mqcdw|mqwr[:b_phi])"
            ))),
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Estimator::Ht => f.write_str("ht"),
            Estimator::Greg => f.write_str("greg"),
            Estimator::Eblup(VarianceStructure::Homo) => f.write_str("eblup"),
            Estimator::Eblup(v) => write!(f, "eblup:{v}"),
            Estimator::Peblup => f.write_str("peblup"),
            Estimator::Msyn => f.write_str("msyn"),
            Estimator::Reblup => f.write_str("reblup"),
            Estimator::Mq => f.write_str("mq"),
            Estimator::Mqw => f.write_str("mqw"),
            Estimator::Mqcd => f.write_str("mqcd"),
            Estimator::Mqcdw => f.write_str("mqcdw"),
            Estimator::Mqwr(b) => write!(f, "mqwr:{b}"),
        }
    }
}

impl Estimator {
    fn weighted_mq(self) -> bool {
        matches!(self, Estimator::Mqw | Estimator::Mqcdw)
    }
}

/// Comma-separated estimator list.
pub fn parse_estimators(list: &str) -> Result<Vec<Estimator>> {
    let out: Vec<Estimator> = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(SaeError::invalid("empty estimator list"));
    }
    Ok(out)
}

/// The headline set: direct, EBLUP variants, pseudo-EBLUP, robust synthetic
/// and the M-quantile family with `b_phi` in {1, 2, 3}.
pub fn default_estimators() -> Vec<Estimator> {
    use Estimator::*;
    vec![
        Ht,
        Greg,
        Eblup(VarianceStructure::Homo),
        Eblup(VarianceStructure::BySc),
        Peblup,
        Msyn,
        Mq,
        Mqcd,
        Mqwr(1.0),
        Mqwr(2.0),
        Mqwr(3.0),
        Mqw,
        Mqcdw,
    ]
}

/// Model and tuning settings shared by all estimators.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimationConfig {
    /// Formula and prediction mode; the variance structure is taken from each
    /// EBLUP estimator instead.
    pub spec: ModelSpec,
    pub criterion: Criterion,
    pub huber: HuberConfig,
    pub grid: Vec<f64>,
    pub mq: MqOptions,
    pub aux: AuxSpec,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        EstimationConfig {
            spec: ModelSpec::new(Formula::Full),
            criterion: Criterion::Ml,
            huber: HuberConfig::default(),
            grid: default_grid(),
            mq: MqOptions::default(),
            aux: AuxSpec::default(),
        }
    }
}

type Shared<T> = std::result::Result<T, String>;

struct MqBranch {
    fits: MqDomainFits,
    /// Residual scale per domain for the robust bias correction.
    scale: Vec<Option<f64>>,
}

/// Lazily computed fits for one sample. Each fit runs at most once, however
/// many estimators use it.
pub struct SampleContext<'a> {
    sample: &'a Sample,
    cfg: &'a EstimationConfig,
    with_weights: bool,
    greg: OnceCell<Shared<GregFit>>,
    lmm: [OnceCell<Shared<MixedFit>>; 3],
    peblup: OnceCell<Shared<PseudoEblupFit>>,
    mreg: OnceCell<Shared<RobustFit>>,
    reblup: OnceCell<Shared<RobustMixedFit>>,
    grid: OnceCell<Shared<MQFitGrid>>,
    mq: [OnceCell<Shared<MqBranch>>; 2],
}

/// Estimates of one estimator on one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainEstimates {
    /// Per population domain; `None` where the estimator failed.
    pub totals: Vec<Option<f64>>,
    /// The underlying variance-component fit sits on the `sigma_u^2 = 0` boundary.
    pub boundary: bool,
    /// Why the whole estimator failed, if it did.
    pub error: Option<String>,
}

fn variance_slot(v: VarianceStructure) -> usize {
    match v {
        VarianceStructure::Homo => 0,
        VarianceStructure::BySc => 1,
        VarianceStructure::Wp2 => 2,
    }
}

impl<'a> SampleContext<'a> {
    /// `with_weights` makes the M-quantile grid include survey-weighted fits;
    /// set it when any weighted M-quantile estimator will be requested.
    pub fn new(sample: &'a Sample, cfg: &'a EstimationConfig, with_weights: bool) -> Self {
        SampleContext {
            sample,
            cfg,
            with_weights,
            greg: OnceCell::new(),
            lmm: Default::default(),
            peblup: OnceCell::new(),
            mreg: OnceCell::new(),
            reblup: OnceCell::new(),
            grid: OnceCell::new(),
            mq: Default::default(),
        }
    }

    /// A context prepared for the given estimator set.
    pub fn for_estimators(sample: &'a Sample, cfg: &'a EstimationConfig, estimators: &[Estimator]) -> Self {
        Self::new(sample, cfg, estimators.iter().any(|e| e.weighted_mq()))
    }

    pub fn sample(&self) -> &Sample {
        self.sample
    }

    fn lmm(&self, v: VarianceStructure) -> &Shared<MixedFit> {
        self.lmm[variance_slot(v)].get_or_init(|| {
            fit_lmm(self.sample, &self.cfg.spec.with_variance(v), self.cfg.criterion).map_err(|e| e.to_string())
        })
    }

    fn mq_grid(&self) -> &Shared<MQFitGrid> {
        self.grid.get_or_init(|| {
            let w = self.with_weights.then(|| self.sample.weights());
            fit_mq_grid(self.sample, &self.cfg.spec, &self.cfg.grid, self.cfg.huber, w.as_deref())
                .map_err(|e| e.to_string())
        })
    }

    fn mq_branch(&self, weighted: bool) -> &Shared<MqBranch> {
        self.mq[weighted as usize].get_or_init(|| {
            let grid = self.mq_grid().as_ref().map_err(Clone::clone)?;
            let run = || -> Result<MqBranch> {
                let qc = unit_q_coefficients(self.sample, grid, weighted)?;
                let fits = mq_domain_fits(self.sample, grid, &qc, weighted, self.cfg.mq)?;
                let scale = (0..fits.beta.len())
                    .map(|d| mq_domain_scale(self.sample, &fits, d).ok())
                    .collect();
                Ok(MqBranch { fits, scale })
            };
            run().map_err(|e| e.to_string())
        })
    }

    /// M-quantile coefficients at each domain's order (unweighted or weighted).
    pub fn mq_fits(&self, weighted: bool) -> Result<&MqDomainFits> {
        if weighted && !self.with_weights {
            return Err(SaeError::invalid("context was built without survey-weighted M-quantile fits"));
        }
        self.mq_branch(weighted).as_ref().map(|b| &b.fits).map_err(|e| SaeError::invalid(e.clone()))
    }

    /// Residual scale of the robust bias correction in `domain`.
    pub fn mq_scale(&self, domain: usize) -> Option<f64> {
        self.mq_branch(false).as_ref().ok().and_then(|b| b.scale[domain])
    }

    /// Runs `est` over every population domain.
    pub fn estimate(&self, est: Estimator) -> DomainEstimates {
        let sample = self.sample;
        let nd = sample.parent().domains().len();
        let per_domain = |f: &dyn Fn(usize) -> Result<f64>| -> Vec<Option<f64>> {
            (0..nd).map(|d| f(d).ok().filter(|v| v.is_finite())).collect()
        };
        let fail = |e: &String| DomainEstimates { totals: vec![None; nd], boundary: false, error: Some(e.clone()) };
        let ok = |totals, boundary| DomainEstimates { totals, boundary, error: None };
        match est {
            Estimator::Ht => ok(per_domain(&|d| ht_total_at(sample, d)), false),
            Estimator::Greg => {
                match self.greg.get_or_init(|| GregFit::fit(sample, self.cfg.aux).map_err(|e| e.to_string())) {
                    Ok(g) => ok(per_domain(&|d| g.total(sample, d)), false),
                    Err(e) => fail(e),
                }
            }
            Estimator::Eblup(v) => match self.lmm(v) {
                Ok(fit) => ok(per_domain(&|d| {
                    if sample.domain_members(d).is_empty() {
                        return Err(SaeError::EmptyDomain(sample.parent().domains()[d].clone()));
                    }
                    eblup_total_at(fit, sample, d)
                }), fit.boundary),
                Err(e) => fail(e),
            },
            Estimator::Peblup => {
                let res = self.peblup.get_or_init(|| {
                    let src = self.lmm(VarianceStructure::Homo).as_ref().map_err(Clone::clone)?;
                    PseudoEblupFit::fit(sample, &self.cfg.spec, src).map_err(|e| e.to_string())
                });
                match res {
                    Ok(p) => {
                        let boundary = self.lmm(VarianceStructure::Homo).as_ref().map(|f| f.boundary).unwrap_or(false);
                        ok(per_domain(&|d| p.total(sample, d)), boundary)
                    }
                    Err(e) => fail(e),
                }
            }
            Estimator::Msyn => {
                match self.mreg.get_or_init(|| fit_mreg(sample, &self.cfg.spec, self.cfg.huber).map_err(|e| e.to_string())) {
                    Ok(f) => ok(per_domain(&|d| {
                        if sample.domain_members(d).is_empty() {
                            return Err(SaeError::EmptyDomain(sample.parent().domains()[d].clone()));
                        }
                        Ok(robust_synthetic_total_at(f, sample, d))
                    }), false),
                    Err(e) => fail(e),
                }
            }
            Estimator::Reblup => {
                let spec = self.cfg.spec.with_variance(VarianceStructure::Homo);
                match self.reblup.get_or_init(|| fit_reblup(sample, &spec, self.cfg.huber).map_err(|e| e.to_string())) {
                    Ok(f) => ok(per_domain(&|d| {
                        if sample.domain_members(d).is_empty() {
                            return Err(SaeError::EmptyDomain(sample.parent().domains()[d].clone()));
                        }
                        Ok(reblup_total_at(f, sample, d))
                    }), f.boundary),
                    Err(e) => fail(e),
                }
            }
            Estimator::Mq | Estimator::Mqw | Estimator::Mqcd | Estimator::Mqcdw => {
                let weighted = est.weighted_mq();
                match self.mq_branch(weighted) {
                    Ok(b) => {
                        let totals = if matches!(est, Estimator::Mq | Estimator::Mqw) {
                            per_domain(&|d| mq_naive_total_at(sample, &b.fits, d))
                        } else {
                            per_domain(&|d| mq_cd_total_at(sample, &b.fits, d))
                        };
                        ok(totals, false)
                    }
                    Err(e) => fail(e),
                }
            }
            Estimator::Mqwr(b_phi) => match self.mq_branch(false) {
                Ok(b) => {
                    let bias = BiasAdjustConfig { b_phi };
                    ok(per_domain(&|d| {
                        let omega = b.scale[d].ok_or_else(|| SaeError::DegenerateScale("domain residuals".into()))?;
                        mq_wr_total_with_scale(sample, &b.fits, d, bias, omega)
                    }), false)
                }
                Err(e) => fail(e),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_round_trip() {
        for s in ["ht", "greg", "eblup", "eblup:by_sc", "eblup:wp2", "peblup", "msyn", "reblup", "mq", "mqw", "mqcd", "mqcdw", "mqwr:2.5"] {
            let e: Estimator = s.parse().unwrap();
            assert_eq!(e.to_string(), s);
        }
        assert_eq!("mqwr".parse::<Estimator>().unwrap(), Estimator::Mqwr(1.0));
        assert_eq!("eblup:homo".parse::<Estimator>().unwrap(), Estimator::Eblup(VarianceStructure::Homo));
        assert!("mqwr:0".parse::<Estimator>().is_err());
        assert!("ht:1".parse::<Estimator>().is_err());
        assert!("bogus".parse::<Estimator>().is_err());
        assert!(parse_estimators(" , ").is_err());
        assert_eq!(parse_estimators("ht,mq").unwrap(), vec![Estimator::Ht, Estimator::Mq]);
    }
}
