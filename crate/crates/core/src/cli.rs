//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 data or
//! convergence error.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{ArgGroup, Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::design::{build_design, draw_sample, load_allocation, Allocation, DesignSpec};
use crate::diagnostics::{
    cooks_distance, ols_fit_population, ols_fit_sample, qq_data, reduce_population, write_qq,
    write_unit_diagnostics, ReductionRule,
};
use crate::error::{Result, SaeError};
use crate::frame::{Population, Sample};
use crate::harness::bootstrap::ResidualPool;
use crate::harness::{
    bootstrap_mse, default_allocation, default_estimators, generate_population_flagged, parse_estimators,
    run_simulation, sweep_bphi, BootstrapConfig, EstimationConfig, Estimator, PopGenConfig, SampleContext,
    SimulationConfig,
};
use crate::direct::{AuxSpec, GregFit};
use crate::mixed::{fit_lmm, Criterion};
use crate::model::{Formula, ModelSpec, PredictionMode, VarianceStructure};
use crate::mquantile::{parse_grid, BiasAdjustConfig, QRefit};
use crate::robust::HuberConfig;

const SUBCOMMANDS: [&str; 8] =
    ["gen-pop", "sample", "estimate", "diagnose", "reduce-pop", "simulate", "sweep", "bootstrap-mse"];

#[derive(Parser, Debug)]
#[command(name = "robust-sae", version, about = "Robust small-domain estimation of business-survey totals")]
struct Cli {
    /// File of `key = value` lines naming long options of the subcommand; command-line flags win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic contaminated business population.
    GenPop(GenPopArgs),
    /// Draw one stratified sample.
    Sample(SampleArgs),
    /// Domain totals from one sample.
    Estimate(EstimateArgs),
    /// OLS working-model diagnostics: leverage, Cook's distance, normal-plot data.
    Diagnose(DiagnoseArgs),
    /// Remove the most influential units one at a time.
    ReducePop(ReduceArgs),
    /// Design-based Monte Carlo comparison of estimators.
    Simulate(SimulateArgs),
    /// Sensitivity of the bias-adjusted M-quantile estimator to b_phi.
    Sweep(SweepArgs),
    /// Bootstrap MSE of an M-quantile estimator.
    BootstrapMse(BootstrapArgs),
}

#[derive(Args, Debug)]
struct GenPopArgs {
    #[arg(long)]
    out: PathBuf,
    /// Also write the ids of units given a gross error.
    #[arg(long)]
    planted: Option<PathBuf>,
    #[arg(long)]
    units: Option<usize>,
    #[arg(long)]
    domains: Option<usize>,
    #[arg(long)]
    contamination: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    sigma_u: Option<f64>,
    #[arg(long)]
    noise_scale: Option<f64>,
    #[arg(long)]
    noise_shape: Option<f64>,
}

#[derive(Args, Debug)]
struct DesignArgs {
    #[arg(long, value_name = "CSV")]
    pop: PathBuf,
    /// Allocation CSV `ind,sc,n_h` (default: rates by size class).
    #[arg(long, value_name = "CSV")]
    allocation: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[command(flatten)]
    design: DesignArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long, default_value = "full")]
    model: Formula,
    #[arg(long, default_value = "observed")]
    prediction: PredictionMode,
    #[arg(long, default_value = "ml")]
    criterion: Criterion,
    /// Huber constant of the M-type fits.
    #[arg(long, default_value_t = 1.345)]
    b_psi: f64,
    /// M-quantile grid: `default`, `lo:hi:step` or a list.
    #[arg(long, default_value = "default", value_parser = parse_grid)]
    q_grid: ::std::vec::Vec<f64>,
    #[arg(long, default_value = "fresh")]
    refit: QRefit,
}

impl ModelArgs {
    fn config(&self) -> Result<EstimationConfig> {
        let mut cfg = EstimationConfig {
            spec: ModelSpec::new(self.model).with_prediction(self.prediction),
            criterion: self.criterion,
            huber: HuberConfig::new(self.b_psi)?,
            grid: self.q_grid.clone(),
            ..Default::default()
        };
        cfg.mq.refit = self.refit;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[arg(long, value_name = "CSV")]
    pop: PathBuf,
    #[arg(long, value_name = "CSV")]
    sample: PathBuf,
    /// Comma-separated estimators, e.g. `ht,greg,eblup:by_sc,mqwr:2`.
    #[arg(long, value_parser = parse_estimators, conflicts_with = "method")]
    estimators: Option<::std::vec::Vec<Estimator>>,
    /// A single estimator by name; `--variance` and `--b-phi` qualify eblup and mqwr.
    #[arg(long)]
    method: Option<String>,
    #[arg(long, default_value = "homo")]
    variance: VarianceStructure,
    #[arg(long, default_value_t = 1.0)]
    b_phi: f64,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
    /// Parameter estimates of the first EBLUP's mixed-model fit.
    #[arg(long, value_name = "CSV")]
    fit_summary: Option<PathBuf>,
    /// GREG calibration cells (population and HT tax1 totals, slope).
    #[arg(long, value_name = "CSV")]
    greg_cells: Option<PathBuf>,
}

impl EstimateArgs {
    fn estimators(&self) -> std::result::Result<Vec<Estimator>, Failure> {
        let Some(m) = &self.method else {
            return Ok(self.estimators.clone().unwrap_or_else(default_estimators));
        };
        let est = match m.as_str() {
            "eblup" => Estimator::Eblup(self.variance),
            "mqwr" => {
                BiasAdjustConfig::new(self.b_phi).map_err(|e| Failure::Usage(e.to_string()))?;
                Estimator::Mqwr(self.b_phi)
            }
            other => other.parse().map_err(|e: SaeError| Failure::Usage(e.to_string()))?,
        };
        Ok(vec![est])
    }
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[arg(long, value_name = "CSV")]
    pop: PathBuf,
    /// Diagnose this sample instead of the whole population.
    #[arg(long, value_name = "CSV")]
    sample: Option<PathBuf>,
    #[arg(long, default_value = "full")]
    model: Formula,
    /// Per-unit diagnostics.
    #[arg(long)]
    out: PathBuf,
    /// Normal probability plot data.
    #[arg(long)]
    qq: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("rule").required(true).args(["top_k", "threshold"])))]
struct ReduceArgs {
    #[arg(long, value_name = "CSV")]
    pop: PathBuf,
    #[arg(long, default_value = "full")]
    model: Formula,
    #[arg(long)]
    top_k: Option<usize>,
    /// Remove while the largest Cook's distance exceeds this value.
    #[arg(long, alias = "cooks-threshold")]
    threshold: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Removed ids in removal order.
    #[arg(long)]
    removed: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    design: DesignArgs,
    #[arg(long, value_parser = parse_estimators)]
    estimators: Option<::std::vec::Vec<Estimator>>,
    /// Replicate samples.
    #[arg(short = 'K', long = "replicates", default_value_t = 500)]
    k: usize,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    design: DesignArgs,
    /// b_phi values: `lo:hi:step` or a list.
    #[arg(long, default_value = "0.25:3:0.25", value_parser = parse_bphi_grid)]
    grid: ::std::vec::Vec<f64>,
    #[arg(short = 'K', long = "replicates", default_value_t = 500)]
    k: usize,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BootstrapArgs {
    #[command(flatten)]
    design: DesignArgs,
    /// Sample to bootstrap (default: a fresh draw with --seed).
    #[arg(long, value_name = "CSV")]
    sample: Option<PathBuf>,
    #[arg(long, default_value = "mqwr:1")]
    estimator: Estimator,
    /// Bootstrap populations.
    #[arg(short = 'B', long = "populations", default_value_t = 50)]
    b: usize,
    /// Samples per bootstrap population.
    #[arg(short = 'L', long = "samples", default_value_t = 10)]
    l: usize,
    #[arg(long, default_value = "by_sc", value_parser = parse_pool)]
    pool: ResidualPool,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
}

fn parse_pool(s: &str) -> std::result::Result<ResidualPool, String> {
    match s {
        "unconditional" => Ok(ResidualPool::Unconditional),
        "conditional" => Ok(ResidualPool::Conditional),
        "by_sc" => Ok(ResidualPool::BySizeClass),
        _ => Err(format!("unknown residual pool `{s}` (expected by_sc|unconditional|conditional)")),
    }
}

/// `lo:hi:step` or a comma-separated list of positive values.
fn parse_bphi_grid(s: &str) -> std::result::Result<Vec<f64>, String> {
    let num = |v: &str| v.trim().parse::<f64>().map_err(|_| format!("bad number `{v}`"));
    let grid: Vec<f64> = match s.split(':').collect::<Vec<_>>()[..] {
        [lo, hi, step] => {
            let (lo, hi, step) = (num(lo)?, num(hi)?, num(step)?);
            if !(step > 0.0) || hi < lo {
                return Err(format!("empty range `{s}`"));
            }
            let n = ((hi - lo) / step + 1e-9).floor() as usize;
            (0..=n).map(|k| lo + k as f64 * step).collect()
        }
        [_] => s.split(',').map(num).collect::<std::result::Result<_, _>>()?,
        _ => return Err(format!("expected lo:hi:step or a list, got `{s}`")),
    };
    if grid.is_empty() || grid.iter().any(|b| !(*b > 0.0)) {
        return Err("b_phi values must be positive".into());
    }
    Ok(grid)
}

enum Failure {
    Usage(String),
    Data(SaeError),
}

impl From<SaeError> for Failure {
    fn from(e: SaeError) -> Self {
        Failure::Data(e)
    }
}

/// Turns `key = value` lines into `--key value` tokens.
fn config_tokens(path: &Path) -> std::result::Result<Vec<String>, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read config file {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("{}:{}: expected `key = value`", path.display(), i + 1)))?;
        let key = key.trim().replace('_', "-");
        if key == "config" {
            return Err(Failure::Usage("config files cannot include other config files".into()));
        }
        out.push(format!("--{key}"));
        out.push(value.trim().to_string());
    }
    Ok(out)
}

/// Splices config-file options in right after the subcommand so that later
/// command-line occurrences override them.
fn expand_config(argv: Vec<String>) -> std::result::Result<Vec<String>, Failure> {
    let mut path = None;
    for (i, a) in argv.iter().enumerate() {
        if a == "--config" {
            path = argv.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else { return Ok(argv) };
    let Some(at) = argv.iter().skip(1).position(|a| SUBCOMMANDS.contains(&a.as_str())) else {
        return Ok(argv);
    };
    let tokens = config_tokens(Path::new(&path))?;
    let mut out = argv[..at + 2].to_vec();
    out.extend(tokens);
    out.extend_from_slice(&argv[at + 2..]);
    Ok(out)
}

/// Writes through a temporary file in the target directory, then renames it.
fn write_atomic(path: &Path, f: impl FnOnce(&mut BufWriter<&mut File>) -> Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        f(&mut w)?;
        w.flush()?;
    }
    tmp.persist(path).map_err(|e| SaeError::Io(e.error))?;
    Ok(())
}

fn load_design(args: &DesignArgs) -> Result<(Arc<Population>, DesignSpec)> {
    let pop = Population::load(&args.pop)?;
    let alloc: Allocation = match &args.allocation {
        Some(p) => load_allocation(p)?,
        None => default_allocation(&pop),
    };
    let design = build_design(&pop, &alloc)?;
    for w in design.warnings() {
        eprintln!("warning: {w}");
    }
    Ok((Arc::new(pop), design))
}

fn check_threads(threads: Option<usize>) -> std::result::Result<(), Failure> {
    match threads {
        Some(0) => Err(Failure::Usage("--threads must be at least 1".into())),
        _ => Ok(()),
    }
}

fn execute(cli: Cli) -> std::result::Result<(), Failure> {
    check_threads(cli.threads)?;
    let seed = cli.seed.unwrap_or(1);
    let usage = |e: SaeError| Failure::Usage(e.to_string());
    let sim_cfg = |m: &ModelArgs| -> std::result::Result<SimulationConfig, Failure> {
        Ok(SimulationConfig { estimation: m.config().map_err(usage)?, threads: cli.threads })
    };
    match &cli.command {
        Command::GenPop(a) => {
            let d = PopGenConfig::default();
            let cfg = PopGenConfig {
                n: a.units.unwrap_or(d.n),
                domains: a.domains.unwrap_or(d.domains),
                contamination: a.contamination.unwrap_or(d.contamination),
                kappa: a.kappa.unwrap_or(d.kappa),
                sigma_u: a.sigma_u.unwrap_or(d.sigma_u),
                noise_scale: a.noise_scale.unwrap_or(d.noise_scale),
                noise_shape: a.noise_shape.unwrap_or(d.noise_shape),
                seed: cli.seed.unwrap_or(d.seed),
                ..d
            };
            cfg.validate().map_err(usage)?;
            let (pop, flags) = generate_population_flagged(&cfg)?;
            write_atomic(&a.out, |w| pop.write_csv(w))?;
            if let Some(p) = &a.planted {
                write_atomic(p, |w| {
                    let mut c = csv::Writer::from_writer(w);
                    c.write_record(["id"])?;
                    for (row, _) in flags.iter().enumerate().filter(|(_, f)| **f) {
                        c.write_record([&pop.unit(row).id])?;
                    }
                    c.flush()?;
                    Ok(())
                })?;
            }
        }
        Command::Sample(a) => {
            let (pop, design) = load_design(&a.design)?;
            let s = draw_sample(&design, &pop, seed)?;
            write_atomic(&a.out, |w| s.write_csv(w))?;
        }
        Command::Estimate(a) => {
            let cfg = a.model.config().map_err(usage)?;
            let pop = Arc::new(Population::load(&a.pop)?);
            let sample = Sample::load(&a.sample, pop.clone())?;
            let ests = a.estimators()?;
            let ctx = SampleContext::for_estimators(&sample, &cfg, &ests);
            if let Some(p) = &a.fit_summary {
                let Some(v) = ests.iter().find_map(|e| match e {
                    Estimator::Eblup(v) => Some(*v),
                    _ => None,
                }) else {
                    return Err(Failure::Usage("--fit-summary needs an eblup estimator".into()));
                };
                let fit = fit_lmm(&sample, &cfg.spec.with_variance(v), cfg.criterion)?;
                write_atomic(p, |w| fit.write_summary(w))?;
            }
            if let Some(p) = &a.greg_cells {
                let fit = GregFit::fit(&sample, AuxSpec::default())?;
                write_atomic(p, |w| fit.write_cells(&pop, w))?;
            }
            let results: Vec<_> = ests.iter().map(|e| (e, ctx.estimate(*e))).collect();
            write_atomic(&a.out, |w| {
                let mut c = csv::Writer::from_writer(w);
                c.write_record(["estimator", "domain", "estimate", "boundary", "error"])?;
                for (e, r) in &results {
                    for (d, dom) in pop.domains().iter().enumerate() {
                        let v = r.totals[d].map(|v| v.to_string()).unwrap_or_else(|| "NA".into());
                        let err = r.error.clone().unwrap_or_default();
                        c.write_record([e.to_string(), dom.clone(), v, (r.boundary as u8).to_string(), err])?;
                    }
                }
                c.flush()?;
                Ok(())
            })?;
        }
        Command::Diagnose(a) => {
            let spec = ModelSpec::new(a.model);
            let pop = Arc::new(Population::load(&a.pop)?);
            let sample = a.sample.as_ref().map(|p| Sample::load(p, pop.clone())).transpose()?;
            let (fit, units): (_, Vec<_>) = match &sample {
                Some(s) => (ols_fit_sample(s, &spec)?, (0..s.len()).map(|k| s.unit(k)).collect()),
                None => (ols_fit_population(&pop, &spec)?, pop.units().iter().collect()),
            };
            let cooks = cooks_distance(&fit)?;
            write_atomic(&a.out, |w| write_unit_diagnostics(units.iter().copied(), &fit, &cooks, w))?;
            if let Some(p) = &a.qq {
                write_atomic(p, |w| write_qq(&qq_data(&fit.residuals), w))?;
            }
        }
        Command::ReducePop(a) => {
            let rule = match (a.top_k, a.threshold) {
                (Some(k), _) => ReductionRule::TopK(k),
                (None, Some(t)) => ReductionRule::Threshold(t),
                (None, None) => unreachable!("clap requires one rule"),
            };
            let pop = Population::load(&a.pop)?;
            let (reduced, removed) = reduce_population(&pop, &ModelSpec::new(a.model), rule)?;
            write_atomic(&a.out, |w| reduced.write_csv(w))?;
            if let Some(p) = &a.removed {
                write_atomic(p, |w| {
                    let mut c = csv::Writer::from_writer(w);
                    c.write_record(["id"])?;
                    for id in &removed {
                        c.write_record([id])?;
                    }
                    c.flush()?;
                    Ok(())
                })?;
            }
        }
        Command::Simulate(a) => {
            let cfg = sim_cfg(&a.model)?;
            let (pop, design) = load_design(&a.design)?;
            let ests = a.estimators.clone().unwrap_or_else(default_estimators);
            let report = run_simulation(&pop, &design, &ests, a.k, seed, &cfg)?;
            write_atomic(&a.out, |w| report.write_csv(w))?;
        }
        Command::Sweep(a) => {
            let cfg = sim_cfg(&a.model)?;
            let (pop, design) = load_design(&a.design)?;
            let report = sweep_bphi(&pop, &design, a.k, &a.grid, seed, &cfg)?;
            write_atomic(&a.out, |w| report.write_csv(w))?;
        }
        Command::BootstrapMse(a) => {
            let est_cfg = a.model.config().map_err(usage)?;
            let (pop, design) = load_design(&a.design)?;
            let sample = match &a.sample {
                Some(p) => Sample::load(p, pop.clone())?,
                None => draw_sample(&design, &pop, seed)?,
            };
            let cfg = BootstrapConfig {
                b: a.b,
                l: a.l,
                estimator: a.estimator,
                pool: a.pool,
                seed,
                threads: cli.threads,
            };
            let result = bootstrap_mse(&sample, &design, &est_cfg, &cfg)?;
            write_atomic(&a.out, |w| result.write_csv(w))?;
        }
    }
    Ok(())
}

/// Runs the command line `argv` (program name first) and returns the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let outcome = expand_config(argv).and_then(|argv| {
        let cmd = Cli::command().args_override_self(true).mut_subcommands(|s| s.args_override_self(true));
        let matches = cmd.try_get_matches_from(argv).map_err(|e| match e.kind() {
            clap::error::ErrorKind::DisplayHelp
            | clap::error::ErrorKind::DisplayVersion
            | clap::error::ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                print!("{e}");
                Failure::Usage(String::new())
            }
            _ => Failure::Usage(e.render().to_string()),
        });
        let cli = Cli::from_arg_matches(&matches?).map_err(|e| Failure::Usage(e.to_string()))?;
        execute(cli)
    });
    match outcome {
        Ok(()) => 0,
        // help and version output
        Err(Failure::Usage(msg)) if msg.is_empty() => 0,
        Err(Failure::Usage(msg)) => {
            eprint!("{msg}");
            if !msg.ends_with('\n') {
                eprintln!();
            }
            1
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bphi_grid_forms() {
        assert_eq!(parse_bphi_grid("0.25:1:0.25").unwrap(), vec![0.25, 0.5, 0.75, 1.0]);
        assert_eq!(parse_bphi_grid("1,2,1e6").unwrap(), vec![1.0, 2.0, 1e6]);
        assert!(parse_bphi_grid("0:1:0.5").is_err());
        assert!(parse_bphi_grid("1:2").is_err());
    }

    #[test]
    fn help_and_usage_codes() {
        assert_eq!(run(["robust-sae", "--help"]), 0);
        assert_eq!(run(["robust-sae", "simulate", "--help"]), 0);
        assert_eq!(run(["robust-sae", "frobnicate"]), 1);
        assert_eq!(run(["robust-sae", "simulate", "--pop", "x.csv", "--out", "y.csv", "--estimators", "nope"]), 1);
        assert_eq!(run(["robust-sae", "simulate", "--pop", "/nonexistent.csv", "--out", "y.csv", "-K", "1"]), 2);
    }
}
