//! Small-domain estimation of business-survey totals under skewed,
//! outlier-prone data, with a design-based Monte Carlo harness.

pub mod design;
pub mod cli;
pub mod diagnostics;
pub mod direct;
pub mod error;
pub mod frame;
pub mod harness;
pub mod linalg;
pub mod mixed;
pub mod model;
pub mod mquantile;
pub mod robust;

pub use error::{Result, SaeError};
