//! Smoothing kernels and the convolution-smoothed check loss.
//!
//! Every second-order kernel here is a symmetric probability density. For
//! each one we carry the density `K`, its antiderivative `K̄`, and the closed
//! form of `ρ_τ * K_h`, written as `(h/2)·ℓ(u/h) + (τ - 1/2)·u` where `ℓ` is
//! the kernel's smoothed absolute value.
//!
//! The higher-order Gaussian kernels `G_{2r} = p_r·φ` are signed; their
//! integrated forms are not clamped to `[0, 1]` and may overshoot.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_bandwidth, check_tau, ConquerError, Result};
use crate::stats::{norm_cdf, norm_pdf};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// The five second-order smoothing kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Uniform,
    #[default]
    Gaussian,
    Logistic,
    Epanechnikov,
    Triangular,
}

impl KernelKind {
    pub const ALL: [KernelKind; 5] = [
        KernelKind::Uniform,
        KernelKind::Gaussian,
        KernelKind::Logistic,
        KernelKind::Epanechnikov,
        KernelKind::Triangular,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Uniform => "uniform",
            KernelKind::Gaussian => "gaussian",
            KernelKind::Logistic => "logistic",
            KernelKind::Epanechnikov => "epanechnikov",
            KernelKind::Triangular => "triangular",
        }
    }

    /// Half-width of the support, `None` for kernels supported on all of R.
    pub fn support_radius(self) -> Option<f64> {
        match self {
            KernelKind::Gaussian | KernelKind::Logistic => None,
            _ => Some(1.0),
        }
    }

    #[inline]
    pub fn density(self, u: f64) -> f64 {
        match self {
            KernelKind::Uniform => {
                if u.abs() <= 1.0 {
                    0.5
                } else {
                    0.0
                }
            }
            KernelKind::Gaussian => norm_pdf(u),
            KernelKind::Logistic => {
                let e = (-u.abs()).exp();
                e / ((1.0 + e) * (1.0 + e))
            }
            KernelKind::Epanechnikov => {
                if u.abs() <= 1.0 {
                    0.75 * (1.0 - u * u)
                } else {
                    0.0
                }
            }
            KernelKind::Triangular => {
                let a = u.abs();
                if a <= 1.0 {
                    1.0 - a
                } else {
                    0.0
                }
            }
        }
    }

    /// Integrated kernel `K̄(u) = ∫_{-∞}^u K(t) dt`.
    #[inline]
    pub fn cdf(self, u: f64) -> f64 {
        match self {
            KernelKind::Uniform => ((u + 1.0) * 0.5).clamp(0.0, 1.0),
            KernelKind::Gaussian => norm_cdf(u),
            KernelKind::Logistic => 1.0 / (1.0 + (-u).exp()),
            KernelKind::Epanechnikov => {
                if u <= -1.0 {
                    0.0
                } else if u >= 1.0 {
                    1.0
                } else {
                    0.5 + 0.75 * u - 0.25 * u * u * u
                }
            }
            KernelKind::Triangular => {
                if u <= -1.0 {
                    0.0
                } else if u >= 1.0 {
                    1.0
                } else if u <= 0.0 {
                    0.5 * (1.0 + u) * (1.0 + u)
                } else {
                    1.0 - 0.5 * (1.0 - u) * (1.0 - u)
                }
            }
        }
    }

    /// Smoothed absolute value `ℓ(u) = 2·∫|u + v| K(v) dv`, the unit-bandwidth
    /// shape shared by all smoothed check losses.
    #[inline]
    pub fn smoothed_abs(self, u: f64) -> f64 {
        let a = u.abs();
        match self {
            KernelKind::Uniform => {
                if a <= 1.0 {
                    0.5 * u * u + 0.5
                } else {
                    a
                }
            }
            KernelKind::Gaussian => {
                SQRT_2_OVER_PI * (-0.5 * u * u).exp() + u * (1.0 - 2.0 * norm_cdf(-u))
            }
            // u + 2 log(1 + e^{-u}) rewritten so e^{-u} never overflows
            KernelKind::Logistic => a + 2.0 * (-a).exp().ln_1p(),
            KernelKind::Epanechnikov => {
                if a <= 1.0 {
                    0.75 * u * u - u * u * u * u / 8.0 + 0.375
                } else {
                    a
                }
            }
            KernelKind::Triangular => {
                if a <= 1.0 {
                    u * u - a * a * a / 3.0 + 1.0 / 3.0
                } else {
                    a
                }
            }
        }
    }

    /// `ρ_τ * K_h` evaluated at `u` without argument checks.
    #[inline]
    pub(crate) fn smoothed_loss_unchecked(self, tau: f64, h: f64, u: f64) -> f64 {
        0.5 * h * self.smoothed_abs(u / h) + (tau - 0.5) * u
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelKind {
    type Err = ConquerError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(KernelKind::Uniform),
            "gaussian" => Ok(KernelKind::Gaussian),
            "logistic" => Ok(KernelKind::Logistic),
            "epanechnikov" => Ok(KernelKind::Epanechnikov),
            "triangular" => Ok(KernelKind::Triangular),
            other => Err(ConquerError::Config(format!("unknown kernel {other:?}"))),
        }
    }
}

/// Gaussian-based kernel of order `2r`, `G_{2r}(u) = p_r(u)·φ(u)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HigherOrderKernel {
    half_order: u8,
}

impl HigherOrderKernel {
    pub fn new(half_order: u32) -> Result<Self> {
        match half_order {
            1..=3 => Ok(Self {
                half_order: half_order as u8,
            }),
            r => Err(ConquerError::Domain(format!(
                "higher-order Gaussian kernels support r in {{1, 2, 3}}, got {r}"
            ))),
        }
    }

    /// Kernel of order `nu` (2, 4 or 6).
    pub fn of_order(nu: u32) -> Result<Self> {
        if nu % 2 != 0 {
            return Err(ConquerError::Domain(format!(
                "kernel order must be even, got {nu}"
            )));
        }
        Self::new(nu / 2)
    }

    pub fn half_order(self) -> u32 {
        self.half_order as u32
    }

    pub fn order(self) -> u32 {
        2 * self.half_order as u32
    }

    #[inline]
    fn density_poly(self, u: f64) -> f64 {
        let u2 = u * u;
        match self.half_order {
            1 => 1.0,
            2 => (3.0 - u2) / 2.0,
            _ => (u2 * u2 - 10.0 * u2 + 15.0) / 8.0,
        }
    }

    #[inline]
    fn cdf_poly(self, u: f64) -> f64 {
        match self.half_order {
            1 => 0.0,
            2 => u / 2.0,
            _ => (7.0 * u - u * u * u) / 8.0,
        }
    }

    #[inline]
    pub fn density(self, u: f64) -> f64 {
        self.density_poly(u) * norm_pdf(u)
    }

    /// `Ḡ_{2r}(u) = Φ(u) + P_r(u)·φ(u)`; not clamped.
    #[inline]
    pub fn cdf(self, u: f64) -> f64 {
        norm_cdf(u) + self.cdf_poly(u) * norm_pdf(u)
    }
}

/// A kernel name as accepted on the command line and in config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelName {
    Second(KernelKind),
    Higher(HigherOrderKernel),
}

impl FromStr for KernelName {
    type Err = ConquerError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian4" => Ok(KernelName::Higher(HigherOrderKernel::of_order(4)?)),
            "gaussian6" => Ok(KernelName::Higher(HigherOrderKernel::of_order(6)?)),
            other => other.parse().map(KernelName::Second),
        }
    }
}

impl fmt::Display for KernelName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelName::Second(k) => write!(f, "{k}"),
            KernelName::Higher(g) => write!(f, "gaussian{}", g.order()),
        }
    }
}

/// Check (pinball) loss `ρ_τ(u) = u·{τ - 1(u < 0)}`.
pub fn check_loss(tau: f64, u: f64) -> Result<f64> {
    check_tau(tau)?;
    Ok(check_loss_unchecked(tau, u))
}

#[inline]
pub(crate) fn check_loss_unchecked(tau: f64, u: f64) -> f64 {
    if u < 0.0 {
        u * (tau - 1.0)
    } else {
        u * tau
    }
}

pub fn kernel_density(kind: KernelKind, u: f64) -> f64 {
    kind.density(u)
}

pub fn kernel_cdf(kind: KernelKind, u: f64) -> f64 {
    kind.cdf(u)
}

/// Convolution-smoothed check loss `(ρ_τ * K_h)(u)` in closed form.
pub fn smoothed_check_loss(kind: KernelKind, tau: f64, h: f64, u: f64) -> Result<f64> {
    check_tau(tau)?;
    check_bandwidth(h)?;
    Ok(kind.smoothed_loss_unchecked(tau, h, u))
}

pub fn hk_density(r: u32, u: f64) -> Result<f64> {
    Ok(HigherOrderKernel::new(r)?.density(u))
}

pub fn hk_cdf(r: u32, u: f64) -> Result<f64> {
    Ok(HigherOrderKernel::new(r)?.cdf(u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
        let n = ((hi - lo) / step).round() as usize;
        (0..=n).map(|i| lo + i as f64 * step).collect()
    }

    #[test]
    fn check_loss_examples() {
        assert_eq!(check_loss(0.5, 2.0).unwrap(), 1.0);
        assert_abs_diff_eq!(check_loss(0.9, -1.0).unwrap(), 0.1, epsilon = 1e-15);
        assert_eq!(check_loss(0.3, 0.0).unwrap(), 0.0);
        assert!(check_loss(0.0, 1.0).is_err());
        assert!(check_loss(1.0, 1.0).is_err());
        assert!(check_loss(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn density_examples() {
        assert_abs_diff_eq!(
            kernel_density(KernelKind::Gaussian, 0.0),
            0.398_942_280_401_432_7,
            epsilon = 1e-15
        );
        assert_eq!(kernel_density(KernelKind::Epanechnikov, 2.0), 0.0);
        assert_eq!(kernel_density(KernelKind::Triangular, 0.25), 0.75);
    }

    #[test]
    fn cdf_examples() {
        assert_eq!(kernel_cdf(KernelKind::Gaussian, 0.0), 0.5);
        assert_eq!(kernel_cdf(KernelKind::Uniform, 1.0), 1.0);
        // 1/2 + 3/8 - 1/32
        assert_abs_diff_eq!(
            kernel_cdf(KernelKind::Epanechnikov, 0.5),
            0.84375,
            epsilon = 1e-15
        );
        for k in [KernelKind::Epanechnikov, KernelKind::Triangular] {
            assert_eq!(k.cdf(-1.5), 0.0);
            assert_eq!(k.cdf(3.0), 1.0);
        }
    }

    #[test]
    fn smoothed_loss_examples() {
        let g = smoothed_check_loss(KernelKind::Gaussian, 0.5, 1.0, 0.0).unwrap();
        assert_abs_diff_eq!(g, SQRT_2_OVER_PI / 2.0, epsilon = 1e-15);
        let l = smoothed_check_loss(KernelKind::Logistic, 0.5, 1.0, 0.0).unwrap();
        assert_abs_diff_eq!(l, std::f64::consts::LN_2, epsilon = 1e-15);
        let u = smoothed_check_loss(KernelKind::Uniform, 0.7, 0.5, 3.0).unwrap();
        assert_abs_diff_eq!(u, 2.1, epsilon = 1e-12);
        assert!(smoothed_check_loss(KernelKind::Uniform, 0.7, 0.0, 3.0).is_err());
        assert!(smoothed_check_loss(KernelKind::Uniform, 0.7, -1.0, 3.0).is_err());
    }

    #[test]
    fn logistic_loss_is_finite_far_out() {
        for u in [-1e4, -800.0, 800.0, 1e4] {
            let v = smoothed_check_loss(KernelKind::Logistic, 0.3, 1.0, u).unwrap();
            assert!(v.is_finite());
            assert_abs_diff_eq!(v, check_loss(0.3, u).unwrap(), epsilon = 1e-9);
        }
    }

    #[test]
    fn cdf_derivative_matches_density() {
        let eps = 1e-6;
        for kind in KernelKind::ALL {
            for u in grid(-2.0, 2.0, 0.5) {
                // compact kernels have kinks at -1, 0 (triangular) and 1
                if kind.support_radius().is_some() && (u.abs() == 1.0 || u == 0.0) {
                    continue;
                }
                let fd = (kind.cdf(u + eps) - kind.cdf(u - eps)) / (2.0 * eps);
                assert_abs_diff_eq!(fd, kind.density(u), epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn smoothed_loss_lower_bound_and_exactness_off_support() {
        for kind in KernelKind::ALL {
            let c = kind.smoothed_abs(0.0) / 2.0;
            for tau in [0.1, 0.5, 0.9] {
                for h in [0.1, 1.0] {
                    for u in grid(-5.0, 5.0, 0.1) {
                        let s = kind.smoothed_loss_unchecked(tau, h, u);
                        let rho = check_loss_unchecked(tau, u);
                        assert!(s >= rho - c * h - 1e-12);
                        // smoothing only ever adds mass: the convolution of a
                        // convex function with a density dominates it
                        assert!(s >= rho - 1e-12);
                        if kind.support_radius().is_some() && u.abs() > h {
                            assert_abs_diff_eq!(s, rho, epsilon = 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn smoothed_loss_is_convex_on_grid() {
        let pts = grid(-5.0, 5.0, 0.25);
        for kind in KernelKind::ALL {
            for tau in [0.1, 0.5, 0.9] {
                for h in [0.1, 1.0] {
                    let f = |u: f64| kind.smoothed_loss_unchecked(tau, h, u);
                    for &u in &pts {
                        for &v in &pts {
                            for lam in [0.25, 0.5] {
                                let mid = f(lam * u + (1.0 - lam) * v);
                                assert!(mid <= lam * f(u) + (1.0 - lam) * f(v) + 1e-12);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn higher_order_examples() {
        assert_abs_diff_eq!(hk_density(2, 0.0).unwrap(), 0.598_413_420_602_149, epsilon = 1e-12);
        assert_abs_diff_eq!(hk_density(1, 1.0).unwrap(), 0.241_970_724_519_143_37, epsilon = 1e-15);
        assert_eq!(hk_cdf(2, 0.0).unwrap(), 0.5);
        assert_abs_diff_eq!(hk_cdf(3, 1.0).unwrap(), 1.022_823, epsilon = 1e-6);
        for u in [0.3, 1.7, 4.0] {
            let s = hk_cdf(2, u).unwrap() + hk_cdf(2, -u).unwrap();
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-15);
        }
        assert!(hk_density(4, 0.0).is_err());
        assert!(hk_cdf(0, 0.0).is_err());
        assert!(HigherOrderKernel::of_order(5).is_err());
    }

    #[test]
    fn order_two_member_is_the_gaussian() {
        let g = HigherOrderKernel::new(1).unwrap();
        for u in grid(-4.0, 4.0, 0.1) {
            assert_eq!(g.density(u), KernelKind::Gaussian.density(u));
            assert_eq!(g.cdf(u), KernelKind::Gaussian.cdf(u));
        }
    }

    #[test]
    fn kernel_names_round_trip() {
        for kind in KernelKind::ALL {
            assert_eq!(kind.name().parse::<KernelKind>().unwrap(), kind);
        }
        assert_eq!(
            "gaussian6".parse::<KernelName>().unwrap().to_string(),
            "gaussian6"
        );
        assert!("Gaussian".parse::<KernelName>().is_err());
        assert!("gaussian8".parse::<KernelName>().is_err());
    }

    proptest! {
        #[test]
        fn densities_symmetric_cdfs_monotone(u in -8.0f64..8.0, d in 0.0f64..2.0) {
            for kind in KernelKind::ALL {
                prop_assert_eq!(kind.density(u), kind.density(-u));
                prop_assert!(kind.density(u) >= 0.0);
                prop_assert!(kind.cdf(u + d) >= kind.cdf(u));
                prop_assert!((kind.cdf(u) + kind.cdf(-u) - 1.0).abs() < 1e-14);
            }
        }

        #[test]
        fn higher_order_cdf_symmetry(u in -10.0f64..10.0) {
            for r in 1..=3 {
                let g = HigherOrderKernel::new(r).unwrap();
                prop_assert!((g.cdf(u) + g.cdf(-u) - 1.0).abs() < 1e-14);
            }
        }
    }
}
