//! Gaussian copula numerical kernels.

mod bvn;
mod corr;
mod kernels;
mod mvn;
mod normal;
mod tvn;
pub mod trivariate;

pub use bvn::bvn_cdf;
pub use corr::{AssocMatrix, CorrMatrix, PSD_TOL};
pub use kernels::{
    copula_cdf, copula_density2, copula_h1, copula_partial2_md, copula_partial_md,
    drho_copula_cdf2, drho_copula_h, drho_partial2_copula, drho_partial_copula, h1_d, h2_d,
    mvn_cdf_grad, Partial, WithGrad,
};
pub use mvn::{default_tol, mvn_cdf, MvnEstimate, MAX_DIM, QMC_SEED};
pub use normal::{
    bvn_pdf, normal_score, std_normal_cdf, std_normal_pdf, std_normal_quantile, U_CLAMP,
};

pub(crate) use corr::{min_eigenvalue, select};
pub(crate) use kernels::{copula_term, density2_scores, dlog_density2, drho_h_scores, h_scores};
