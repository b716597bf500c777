//! Group-lasso penalized EM for high-dimensional mixtures of linear
//! regressions, with a multivariate-response variant, initializers and a
//! simulation harness.

pub mod em;
pub mod error;
pub mod grouplasso;
pub mod init;
pub mod io;
pub mod model;
pub mod multivariate;
pub mod simbench;

pub use em::{bic, bic_select, em_fit, fit_path, EmConfig, EmTrace, FitResult, LambdaMode, Sigma2Mode};
pub use error::{Error, Result};
pub use grouplasso::{solve_mstep, MStepProblem, SolverOptions, SolverReport};
pub use init::{initialize, InitStrategy, InitVariant};
pub use model::{Dataset, MixtureParams, Responsibilities};
pub use multivariate::{mv_em_fit, mv_fit_path, MvEmConfig};
