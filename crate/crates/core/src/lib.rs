//! Convolution-smoothed quantile regression.
//!
//! The crate fits linear quantile regression by minimizing the check loss
//! convolved with a kernel, which gives a convex, twice differentiable
//! objective that plain first-order methods handle at large `n` and `p`.
//!
//! * [`kernels`]: kernel densities, integrated kernels, smoothed check losses
//!   and the higher-order Gaussian family.
//! * [`model`]: the [`Dataset`] container, standardization and CSV loading.
//! * [`solver`]: gradient descent with Barzilai-Borwein steps, the Huber
//!   warm start and the non-convex Horowitz baseline.
//! * [`inference`]: multiplier bootstrap and confidence intervals.
//! * [`onestep`]: a single Newton correction with a higher-order kernel.
//! * [`oracles`]: brute-force references used to check everything above.
//! * [`simulate`]: synthetic designs and Monte Carlo experiment runners.

pub mod error;
pub mod inference;
pub mod kernels;
pub(crate) mod linalg;
pub mod model;
pub mod onestep;
pub mod oracles;
pub(crate) mod par;
pub mod simulate;
pub mod solver;
pub mod stats;

pub use error::{ConquerError, Result};
pub use inference::{
    bootstrap_fit, mb_norm_ci, normal_ci, percentile_ci, pivotal_ci, sandwich_covariance,
    BootstrapOptions, BootstrapResult, CiMethod, ConfidenceIntervals, Sandwich, VarianceScaling,
};
pub use kernels::{HigherOrderKernel, KernelKind, KernelName};
pub use model::{Dataset, StandardizeTransform};
pub use onestep::{one_step_fit, OneStepConfig, OneStepResult};
pub use solver::{default_bandwidth, fit_conquer, fit_horowitz, Bandwidth, FitConfig, FitResult};

pub(crate) mod serde_arr {
    use ndarray::Array1;
    use serde::Serializer;

    pub fn serialize<S: Serializer>(v: &Array1<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter())
    }
}
