//! Latent-class model of employment-state mobility and wage dynamics:
//! likelihoods, EM estimation, simulation, lifetime values and diagnostics.

pub mod design;
pub mod diagnostics;
pub mod em;
pub mod error;
mod io_util;
pub mod kernels;
pub mod lifetime;
pub mod math;
pub mod model;
mod par;
pub mod params;
pub mod panel_io;
pub mod params_io;
pub mod published;
pub mod simulate;
pub mod types;

pub use design::Design;
pub use error::{Error, Result};
pub use io_util::write_atomic;
pub use params::{
    IncomeParams, LogitCoefs, MobilityParams, ModelConfig, ParameterSet, ReplacementRate, RhoMode,
};
pub use types::{
    ClassPair, Education, EmploymentState, FixedCovariates, IndividualHistory,
    TimeVaryingCovariates, YearRecord,
};
