//! Synthetic populations and the design-based evaluation protocol: repeated
//! sampling with relative bias / RMSE tables, the `b_phi` sweep and the
//! bootstrap MSE estimator.

pub mod bootstrap;
pub mod estimators;
pub mod metrics;
pub mod popgen;
pub mod simulation;
pub mod sweep;

pub use bootstrap::{bootstrap_mse, BootstrapConfig, BootstrapResult, ResidualPool};
pub use estimators::{default_estimators, parse_estimators, EstimationConfig, Estimator, SampleContext};
pub use metrics::{relative_bias, relative_rrmse};
pub use popgen::{default_allocation, generate_population, generate_population_flagged, PopGenConfig};
pub use simulation::{run_simulation, SimulationConfig, SimulationReport};
pub use sweep::{default_bphi_grid, sweep_bphi, SweepReport};
