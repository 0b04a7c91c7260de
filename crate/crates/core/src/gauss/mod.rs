//! Gaussian special functions, quadrature, seeded streams and orthant probabilities.

mod orthant;
mod quadrature;
mod rng;
mod special;

pub use orthant::{
    mvn_orthant_is, mvn_orthant_mc, psd_factor, LogOrthantEstimate, MvnSpec, OrthantEstimate,
};
pub use quadrature::{gauss_expectation, integrate, QuadEstimate, QuadratureConfig};
pub use rng::RngStream;
pub use special::{
    log_normal_interval, log_phi, log_phi_bar, mills_lower, mills_lower_unchecked, mills_upper,
    mills_upper_unchecked, phi, phi_bar, phi_cdf, std_normal_pdf, std_normal_quantile,
    std_normal_survival, std_normal_upper_quantile, LN_SQRT_2PI, SQRT_2PI,
};
