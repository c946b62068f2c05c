//! Empirical best linear unbiased prediction in the multivariate Fay-Herriot
//! model with an unrestricted random-effect covariance matrix.
//!
//! [`covariance`] holds the moment estimators of `Ψ` and [`gls`] the (E)BLUP.
//! The analytic mean squared error matrix lives in [`msem`], the seeded Monte
//! Carlo harness in [`sim`]. File handling is in [`io`] and [`cli`].

pub mod cli;
pub mod covariance;
pub mod error;
pub mod gls;
pub mod io;
pub mod linalg;
pub mod model;
pub mod msem;
pub mod sim;

pub use covariance::{
    estimate_psi, ols_beta, psd_project, psi0_bias, psi_pr0, psi_pr1, univariate_psi, CovarianceEstimate,
    PsdProjection, PsiVariant,
};
pub use error::{Error, Result};
pub use gls::{
    beta_inference, blup, eblup, eblup_all, gls_beta, univariate_eblup, CoefficientRow, GlsFit, Prediction,
    PsiSource,
};
pub use model::{marginal_covariance, validate_dataset, AreaRecord, Dataset, ModelParams};
pub use msem::{g1, g2, g3, g4, msem_estimate, msem_second_order, MsemReport};
