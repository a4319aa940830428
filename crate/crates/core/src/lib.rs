//! Conditional Gaussian mixture models (mixtures of Gaussian regressions
//! with a multinomial-logit gate) for imputing item nonresponse.
//!
//! The numerical core is generic over the scalar type; the aliases below
//! fix it to `f64`.

pub mod em;
pub mod error;
pub mod imputation;
pub mod io;
pub mod kmeans;
pub mod linalg;
pub mod model;
pub mod penalized;
pub mod rng;
pub mod scalar;
pub mod sim;

pub use em::{fit_em, refine, select_g, FitConfig, InitMethod};
pub use error::{CgmmError, Result};
pub use imputation::{impute, jackknife_cgmm, JackknifeConfig};
pub use model::DesignSpec;
pub use penalized::{fit_penalized_cv, PenaltyConfig};
pub use scalar::Real;

pub type Matrix = linalg::Matrix<f64>;
pub type Dataset = model::Dataset<f64>;
pub type Params = model::CgmmParams<f64>;
pub type FitReport = em::FitReport<f64>;
pub type ImputationResult = imputation::ImputationResult<f64>;
pub type JackknifeReport = imputation::JackknifeReport<f64>;
pub type PenalizedParams = penalized::PenalizedParams<f64>;
pub type PenalizedFit = penalized::PenalizedFit<f64>;
