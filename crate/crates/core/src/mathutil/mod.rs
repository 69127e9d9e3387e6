//! Special functions and small dense optimizers shared by the model code.

mod optimize;
mod special;

pub use optimize::{
    bounded_minimize, minimize_with_gradient, nelder_mead, numerical_gradient, Minimum,
    OptimizerSettings, Status,
};
pub use special::{chi2_cdf, chi2_quantile, chi2_sf, regularized_gamma_p, regularized_gamma_q};
