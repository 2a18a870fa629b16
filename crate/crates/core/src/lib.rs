//! Ideal point estimation for roll-call data under the two-parameter
//! logistic model with Gaussian bill effects: Pólya–Gamma variational EM,
//! the Jaakkola–Jordan surrogate, variational Louis and parametric bootstrap
//! standard errors, and a quadrature oracle for small instances.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bootstrap;
pub mod error;
pub mod io;
pub mod jj_vem;
pub mod linalg;
pub mod louis;
pub mod model;
pub mod par;
pub mod pg_vem;
pub mod pipeline;
pub mod quadrature;
pub mod report;
pub mod rng;
pub mod sim;
pub mod stats;

pub use bootstrap::{parametric_bootstrap, BootstrapConfig, BootstrapResult};
pub use error::{Error, Result};
pub use jj_vem::{fit_jj_vem, JJVemConfig};
pub use linalg::Sym2;
pub use louis::{louis_se, louis_se_variant, LouisConfig, LouisResult, LouisVariant};
pub use model::{align_estimates, Estimator, FitResult, ModelParams, RollCall};
pub use pg_vem::{fit_pg_vem, InitStrategy, PGVemConfig};
pub use quadrature::{fisher_numeric, marginal_loglik_quadrature, mle_direct, QuadConfig};
