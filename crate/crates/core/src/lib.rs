//! Loss estimation for information criteria in multivariate linear
//! regression and normal-mean models.
//!
//! - [`matstat`]: SPD matrices, seeded random streams, matrix-normal and
//!   Wishart sampling, singular-value helpers.
//! - [`regression`]: maximum-likelihood fit and the Kullback–Leibler
//!   discrepancy of a fitted model.
//! - [`criteria`]: AIC, AICc and their modified versions, SURE and related
//!   loss estimators.
//! - [`mcengine`]: seeded Monte Carlo experiments (MSE of loss estimators,
//!   variable selection frequencies).
//! - [`verify`]: numerical checks of the matrix identities the estimators
//!   rest on.

pub mod criteria;
pub mod error;
pub mod matstat;
pub mod mcengine;
pub mod regression;
pub mod stats;
pub mod verify;

pub use criteria::{CriterionName, CriterionValue, Hypothesis, ModelDims};
pub use error::{Error, Result};
pub use matstat::{Matrix, RngStream, SpdMatrix};
pub use regression::{FitResult, RegressionTruth};
