//! Smoothed quantile loss, its derivatives, and the GD-BB solver.
//!
//! `fit_conquer` standardizes the covariates, warm-starts at a Huber
//! M-estimate, runs gradient descent with Barzilai-Borwein steps and maps the
//! coefficients back to the original scale. If the original-scale gradient
//! still exceeds the tolerance after the back-transform, the same iteration is
//! continued on the original design so the stopping rule holds on the caller's
//! data.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_bandwidth, check_tau, ConquerError, Result};
use crate::kernels::KernelKind;
use crate::model::{check_beta, destandardize_coefficients, standardize, Dataset, StandardizeTransform};
use crate::par::{axpy, dot, fill_rows, norm2, sum_rows};
use crate::stats::{mad_in_place, median, norm_cdf, norm_pdf, pairwise_sum};

/// Default gradient tolerance.
pub const DEFAULT_TOL: f64 = 1e-4;
/// Default iteration cap.
pub const DEFAULT_MAX_ITER: usize = 5000;
/// Largest Barzilai-Borwein step allowed.
pub const MAX_STEP: f64 = 100.0;
/// Huber threshold multiplier applied to the residual MAD.
pub const HUBER_MAD_FACTOR: f64 = 1.35;
/// Armijo constant and shrink factor of the backtracking line search.
pub const BACKTRACK_ALPHA: f64 = 0.3;
pub const BACKTRACK_BETA: f64 = 0.8;

/// Either a fixed bandwidth or the `((p + ln n) / n)^{2/5}` rule.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Bandwidth {
    #[default]
    Auto,
    Fixed(f64),
}

impl Bandwidth {
    pub fn resolve(self, n: usize, p: usize) -> Result<f64> {
        match self {
            Bandwidth::Auto => default_bandwidth(n, p),
            Bandwidth::Fixed(h) => {
                check_bandwidth(h)?;
                Ok(h)
            }
        }
    }
}

impl FromStr for Bandwidth {
    type Err = ConquerError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(Bandwidth::Auto);
        }
        let h: f64 = s
            .parse()
            .map_err(|_| ConquerError::Config(format!("bandwidth must be a number or \"auto\", got {s:?}")))?;
        check_bandwidth(h)?;
        Ok(Bandwidth::Fixed(h))
    }
}

impl fmt::Display for Bandwidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bandwidth::Auto => f.write_str("auto"),
            Bandwidth::Fixed(h) => write!(f, "{h}"),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum BandwidthRepr {
    Value(f64),
    Name(String),
}

impl Serialize for Bandwidth {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Bandwidth::Auto => BandwidthRepr::Name("auto".into()).serialize(s),
            Bandwidth::Fixed(h) => BandwidthRepr::Value(*h).serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for Bandwidth {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match BandwidthRepr::deserialize(d)? {
            BandwidthRepr::Value(h) if h > 0.0 && h.is_finite() => Ok(Bandwidth::Fixed(h)),
            BandwidthRepr::Value(h) => Err(serde::de::Error::custom(format!(
                "bandwidth must be positive, got {h}"
            ))),
            BandwidthRepr::Name(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Solver inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub tau: f64,
    pub kernel: KernelKind,
    pub bandwidth: Bandwidth,
    pub tol: f64,
    pub max_iter: usize,
    pub standardize: bool,
}

impl FitConfig {
    /// Gaussian kernel, automatic bandwidth, default tolerance and cap.
    pub fn new(tau: f64) -> Self {
        Self {
            tau,
            kernel: KernelKind::Gaussian,
            bandwidth: Bandwidth::Auto,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            standardize: true,
        }
    }

    pub fn kernel(mut self, kernel: KernelKind) -> Self {
        self.kernel = kernel;
        self
    }

    pub fn bandwidth(mut self, h: f64) -> Self {
        self.bandwidth = Bandwidth::Fixed(h);
        self
    }

    pub fn tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn standardize(mut self, on: bool) -> Self {
        self.standardize = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        if let Bandwidth::Fixed(h) = self.bandwidth {
            check_bandwidth(h)?;
        }
        if !(self.tol > 0.0) {
            return Err(ConquerError::Domain(format!(
                "gradient tolerance must be positive, got {}",
                self.tol
            )));
        }
        if self.max_iter == 0 {
            return Err(ConquerError::Domain("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

/// Solver output; `beta` is on the original covariate scale.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    #[serde(serialize_with = "crate::serde_arr::serialize")]
    pub beta: Array1<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
    pub h_used: f64,
    pub loss: f64,
    /// Barzilai-Borwein steps that fell back to a unit step.
    pub fallback_steps: usize,
    pub warm_start_iterations: Option<usize>,
    pub nonconvex: bool,
}

/// `((p + ln n) / n)^{2/5}`.
pub fn default_bandwidth(n: usize, p: usize) -> Result<f64> {
    if p == 0 || n <= p {
        return Err(ConquerError::Domain(format!(
            "default bandwidth needs n > p >= 1 (n = {n}, p = {p})"
        )));
    }
    let n = n as f64;
    Ok(((p as f64 + n.ln()) / n).powf(0.4))
}

pub use crate::stats::mad;

// ---------------------------------------------------------------------------
// Objectives

/// Convolution-smoothed loss on a dataset, optionally observation-weighted.
#[derive(Clone, Copy)]
pub(crate) struct SmoothedObjective<'a> {
    pub data: &'a Dataset,
    pub tau: f64,
    pub kernel: KernelKind,
    pub h: f64,
    pub weights: Option<&'a [f64]>,
}

impl<'a> SmoothedObjective<'a> {
    #[inline]
    fn weight(&self, i: usize) -> f64 {
        self.weights.map_or(1.0, |w| w[i])
    }

    pub fn loss(&self, beta: &[f64]) -> f64 {
        let (n, p) = (self.data.n(), self.data.p());
        let x = self.data.x_slice();
        let y = self.data.y_slice();
        let mut terms = vec![0.0; n];
        fill_rows(&mut terms, |i| {
            let r = y[i] - dot(&x[i * p..(i + 1) * p], beta);
            self.weight(i) * self.kernel.smoothed_loss_unchecked(self.tau, self.h, r)
        });
        pairwise_sum(&terms) / n as f64
    }

    pub fn gradient(&self, beta: &[f64]) -> Vec<f64> {
        let (n, p) = (self.data.n(), self.data.p());
        let x = self.data.x_slice();
        let y = self.data.y_slice();
        let mut g = sum_rows(n, p, |rows, acc| {
            for i in rows {
                let w = self.weight(i);
                if w == 0.0 {
                    continue;
                }
                let xi = &x[i * p..(i + 1) * p];
                let r = y[i] - dot(xi, beta);
                let c = w * (self.kernel.cdf(-r / self.h) - self.tau);
                axpy(c, xi, acc);
            }
        });
        let inv = 1.0 / n as f64;
        g.iter_mut().for_each(|v| *v *= inv);
        g
    }

    pub fn hessian(&self, beta: &[f64]) -> Array2<f64> {
        let (n, p) = (self.data.n(), self.data.p());
        let x = self.data.x_slice();
        let y = self.data.y_slice();
        let flat = sum_rows(n, p * p, |rows, acc| {
            for i in rows {
                let xi = &x[i * p..(i + 1) * p];
                let r = y[i] - dot(xi, beta);
                let k = self.weight(i) * self.kernel.density(r / self.h);
                if k == 0.0 {
                    continue;
                }
                for a in 0..p {
                    let ka = k * xi[a];
                    for b in a..p {
                        acc[a * p + b] += ka * xi[b];
                    }
                }
            }
        });
        symmetric_from_upper(flat, p, 1.0 / (n as f64 * self.h))
    }
}

pub(crate) fn symmetric_from_upper(flat: Vec<f64>, p: usize, scale: f64) -> Array2<f64> {
    let mut h = Array2::zeros((p, p));
    for a in 0..p {
        for b in a..p {
            let v = flat[a * p + b] * scale;
            h[[a, b]] = v;
            h[[b, a]] = v;
        }
    }
    h
}

fn checked_objective<'a>(
    data: &'a Dataset,
    beta: ArrayView1<f64>,
    tau: f64,
    kernel: KernelKind,
    h: f64,
) -> Result<(SmoothedObjective<'a>, Vec<f64>)> {
    check_tau(tau)?;
    check_bandwidth(h)?;
    check_beta(data, beta.len())?;
    Ok((
        SmoothedObjective {
            data,
            tau,
            kernel,
            h,
            weights: None,
        },
        beta.to_vec(),
    ))
}

/// `(1/n) Σ ℓ_h(y_i - <x_i, β>)`.
pub fn smoothed_loss(
    data: &Dataset,
    beta: ArrayView1<f64>,
    tau: f64,
    kernel: KernelKind,
    h: f64,
) -> Result<f64> {
    let (obj, b) = checked_objective(data, beta, tau, kernel, h)?;
    Ok(obj.loss(&b))
}

/// `(1/n) Σ w_i ℓ_h(y_i - <x_i, β>)`.
pub fn weighted_smoothed_loss(
    data: &Dataset,
    beta: ArrayView1<f64>,
    tau: f64,
    kernel: KernelKind,
    h: f64,
    weights: &[f64],
) -> Result<f64> {
    if weights.len() != data.n() {
        return Err(ConquerError::DimensionMismatch {
            what: "weights vs observations",
            expected: data.n(),
            got: weights.len(),
        });
    }
    let (mut obj, b) = checked_objective(data, beta, tau, kernel, h)?;
    obj.weights = Some(weights);
    Ok(obj.loss(&b))
}

/// `(1/n) Σ {K̄(-r_i/h) - τ} x_i`.
pub fn smoothed_gradient(
    data: &Dataset,
    beta: ArrayView1<f64>,
    tau: f64,
    kernel: KernelKind,
    h: f64,
) -> Result<Array1<f64>> {
    let (obj, b) = checked_objective(data, beta, tau, kernel, h)?;
    Ok(Array1::from(obj.gradient(&b)))
}

/// `(1/(n h)) Σ K(r_i/h) x_i x_iᵀ`.
pub fn smoothed_hessian(
    data: &Dataset,
    beta: ArrayView1<f64>,
    tau: f64,
    kernel: KernelKind,
    h: f64,
) -> Result<Array2<f64>> {
    let (obj, b) = checked_objective(data, beta, tau, kernel, h)?;
    Ok(obj.hessian(&b))
}

/// Huber loss `H_γ(u)`.
pub fn huber_loss(gamma: f64, u: f64) -> f64 {
    let a = u.abs();
    if a <= gamma {
        0.5 * u * u
    } else {
        gamma * (a - 0.5 * gamma)
    }
}

/// `(1/n) Σ H_γ(r_i)`.
pub fn huber_objective(data: &Dataset, beta: ArrayView1<f64>, gamma: f64) -> Result<f64> {
    check_beta(data, beta.len())?;
    let r = crate::model::residuals(data, beta)?;
    let terms: Vec<f64> = r.iter().map(|&u| huber_loss(gamma, u)).collect();
    Ok(pairwise_sum(&terms) / data.n() as f64)
}

/// Gradient of `(1/n) Σ H_γ(r_i)`.
pub fn huber_gradient(data: &Dataset, beta: ArrayView1<f64>, gamma: f64) -> Result<Array1<f64>> {
    check_beta(data, beta.len())?;
    let r = crate::model::residuals(data, beta)?;
    let r = r.as_slice().unwrap();
    let (n, p) = (data.n(), data.p());
    let x = data.x_slice();
    let g = sum_rows(n, p, |rows, acc| {
        for i in rows {
            axpy(-r[i].clamp(-gamma, gamma), &x[i * p..(i + 1) * p], acc);
        }
    });
    Ok(g.into_iter().map(|v| v / n as f64).collect())
}

// ---------------------------------------------------------------------------
// Barzilai-Borwein descent

/// Secant pair `(β^t - β^{t-1}, ∇^t - ∇^{t-1})` behind one BB step.
#[derive(Debug, Clone, PartialEq)]
pub struct BbState {
    pub delta: Vec<f64>,
    pub grad_diff: Vec<f64>,
}

impl BbState {
    pub fn new(beta: &[f64], beta_prev: &[f64], grad: &[f64], grad_prev: &[f64]) -> Self {
        Self {
            delta: beta.iter().zip(beta_prev).map(|(a, b)| a - b).collect(),
            grad_diff: grad.iter().zip(grad_prev).map(|(a, b)| a - b).collect(),
        }
    }

    /// The two BB step sizes `<δ,δ>/<δ,g>` and `<δ,g>/<g,g>`.
    pub fn step_sizes(&self) -> (f64, f64) {
        let dd = dot(&self.delta, &self.delta);
        let dg = dot(&self.delta, &self.grad_diff);
        let gg = dot(&self.grad_diff, &self.grad_diff);
        (dd / dg, dg / gg)
    }

    /// `min(η1, η2, 100)` when both are positive and finite, otherwise the
    /// unit fallback step; the flag reports the fallback.
    pub fn step(&self) -> (f64, bool) {
        let (eta1, eta2) = self.step_sizes();
        if eta1 > 0.0 && eta2 > 0.0 && eta1.is_finite() && eta2.is_finite() {
            (eta1.min(eta2).min(MAX_STEP), false)
        } else {
            (1.0, true)
        }
    }
}

/// Gradient source for the BB loop.
pub(crate) trait BbObjective {
    /// Gradient at `beta`. When the objective changes between iterations
    /// (the Huber threshold does), the gradient at `prev` under the new
    /// objective is returned as well.
    fn gradients(&mut self, beta: &[f64], prev: Option<&[f64]>) -> (Vec<f64>, Option<Vec<f64>>);
}

impl BbObjective for SmoothedObjective<'_> {
    fn gradients(&mut self, beta: &[f64], _prev: Option<&[f64]>) -> (Vec<f64>, Option<Vec<f64>>) {
        (self.gradient(beta), None)
    }
}

pub(crate) struct BbOutcome {
    pub beta: Vec<f64>,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub fallback_steps: usize,
}

fn ensure_finite(v: &[f64], iteration: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(ConquerError::NumericalDivergence { iteration })
    }
}

/// Gradient descent with a unit first step followed by BB steps.
pub(crate) fn gd_bb(
    obj: &mut impl BbObjective,
    init: Vec<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<BbOutcome> {
    let mut prev = init;
    let (mut grad_prev, _) = obj.gradients(&prev, None);
    ensure_finite(&grad_prev, 0)?;
    let norm0 = norm2(&grad_prev);
    if norm0 <= tol {
        return Ok(BbOutcome {
            beta: prev,
            grad_norm: norm0,
            iterations: 0,
            converged: true,
            fallback_steps: 0,
        });
    }
    let mut beta: Vec<f64> = prev.iter().zip(&grad_prev).map(|(b, g)| b - g).collect();
    let mut iterations = 1;
    let mut fallback_steps = 0;
    loop {
        ensure_finite(&beta, iterations)?;
        let (grad, refreshed_prev) = obj.gradients(&beta, Some(&prev));
        ensure_finite(&grad, iterations)?;
        if let Some(gp) = refreshed_prev {
            grad_prev = gp;
        }
        let grad_norm = norm2(&grad);
        if grad_norm <= tol || iterations >= max_iter {
            return Ok(BbOutcome {
                beta,
                grad_norm,
                iterations,
                converged: grad_norm <= tol,
                fallback_steps,
            });
        }
        let (eta, fell_back) = BbState::new(&beta, &prev, &grad, &grad_prev).step();
        fallback_steps += fell_back as usize;
        let next: Vec<f64> = beta.iter().zip(&grad).map(|(b, g)| b - eta * g).collect();
        prev = std::mem::replace(&mut beta, next);
        grad_prev = grad;
        iterations += 1;
    }
}

// ---------------------------------------------------------------------------
// Huber warm start

struct HuberObjective<'a> {
    data: &'a Dataset,
    floor: f64,
    resid: Vec<f64>,
    resid_prev: Vec<f64>,
    scratch: Vec<f64>,
    gamma: f64,
}

impl<'a> HuberObjective<'a> {
    fn new(data: &'a Dataset) -> Result<Self> {
        let abs_y: Vec<f64> = data.y().iter().map(|v| v.abs()).collect();
        let floor = 1e-8 * (1.0 + median(&abs_y)?);
        Ok(Self {
            data,
            floor,
            resid: vec![0.0; data.n()],
            resid_prev: vec![0.0; data.n()],
            scratch: vec![0.0; data.n()],
            gamma: 0.0,
        })
    }

    fn fill_residuals(&self, beta: &[f64], out: &mut [f64]) {
        let p = self.data.p();
        let x = self.data.x_slice();
        let y = self.data.y_slice();
        fill_rows(out, |i| y[i] - dot(&x[i * p..(i + 1) * p], beta));
    }

    fn refresh_gamma(&mut self) {
        self.scratch.copy_from_slice(&self.resid);
        let mad = mad_in_place(&mut self.scratch).expect("dataset is non-empty");
        let gamma = HUBER_MAD_FACTOR * mad;
        self.gamma = if gamma > self.floor { gamma } else { self.floor };
    }
}

impl BbObjective for HuberObjective<'_> {
    fn gradients(&mut self, beta: &[f64], prev: Option<&[f64]>) -> (Vec<f64>, Option<Vec<f64>>) {
        // residuals at `prev` are the ones computed on the previous call
        let mut fresh = std::mem::take(&mut self.resid_prev);
        self.fill_residuals(beta, &mut fresh);
        self.resid_prev = std::mem::replace(&mut self.resid, fresh);
        self.refresh_gamma();
        let (n, p) = (self.data.n(), self.data.p());
        let x = self.data.x_slice();
        let gamma = self.gamma;
        let r = &self.resid;
        let scale = 1.0 / n as f64;
        if prev.is_none() {
            let g = sum_rows(n, p, |rows, acc| {
                for i in rows {
                    axpy(-r[i].clamp(-gamma, gamma), &x[i * p..(i + 1) * p], acc);
                }
            });
            return (g.into_iter().map(|v| v * scale).collect(), None);
        }
        let rp = &self.resid_prev;
        let both = sum_rows(n, 2 * p, |rows, acc| {
            let (a, b) = acc.split_at_mut(p);
            for i in rows {
                let xi = &x[i * p..(i + 1) * p];
                axpy(-r[i].clamp(-gamma, gamma), xi, a);
                axpy(-rp[i].clamp(-gamma, gamma), xi, b);
            }
        });
        let g = both[..p].iter().map(|v| v * scale).collect();
        let gp = both[p..].iter().map(|v| v * scale).collect();
        (g, Some(gp))
    }
}

/// Outcome of the Huber warm start.
#[derive(Debug, Clone)]
pub struct HuberFit {
    pub beta: Array1<f64>,
    pub gamma: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Huber M-estimate by GD-BB from `β = 0`, with the threshold re-estimated as
/// `1.35·MAD` of the current residuals at every iteration. Expects a
/// standardized design.
pub fn huber_warm_start(data: &Dataset, tol: f64) -> Result<Array1<f64>> {
    huber_warm_start_full(data, tol, DEFAULT_MAX_ITER).map(|f| f.beta)
}

pub fn huber_warm_start_full(data: &Dataset, tol: f64, max_iter: usize) -> Result<HuberFit> {
    let mut obj = HuberObjective::new(data)?;
    let out = gd_bb(&mut obj, vec![0.0; data.p()], tol, max_iter)?;
    Ok(HuberFit {
        beta: Array1::from(out.beta),
        gamma: obj.gamma,
        grad_norm: out.grad_norm,
        iterations: out.iterations,
        converged: out.converged,
    })
}

// ---------------------------------------------------------------------------
// Conquer fit

/// A dataset prepared once (bandwidth resolved, design standardized) and then
/// minimized any number of times with different observation weights.
pub(crate) struct Prepared<'a> {
    pub data: &'a Dataset,
    pub standardized: Dataset,
    pub transform: StandardizeTransform,
    pub cfg: FitConfig,
    pub h: f64,
}

impl<'a> Prepared<'a> {
    pub fn new(data: &'a Dataset, cfg: &FitConfig) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.bandwidth.resolve(data.n(), data.p())?;
        let (standardized, transform) = standardize(data)?;
        Ok(Self {
            data,
            standardized,
            transform,
            cfg: cfg.clone(),
            h,
        })
    }

    fn objective<'b>(&'b self, data: &'b Dataset, weights: Option<&'b [f64]>) -> SmoothedObjective<'b> {
        SmoothedObjective {
            data,
            tau: self.cfg.tau,
            kernel: self.cfg.kernel,
            h: self.h,
            weights,
        }
    }

    /// Minimizes the (weighted) smoothed loss. `init` is on the original scale;
    /// without it the Huber warm start is used.
    pub fn minimize(&self, weights: Option<&[f64]>, init: Option<ArrayView1<f64>>) -> Result<FitResult> {
        let cfg = &self.cfg;
        let (init_std, warm_iters) = match init {
            Some(b) => {
                check_beta(self.data, b.len())?;
                (self.transform.standardize_coefficients(b)?, None)
            }
            None => {
                let hub = huber_warm_start_full(&self.standardized, cfg.tol, cfg.max_iter)?;
                (hub.beta, Some(hub.iterations))
            }
        };

        let mut iterations = 0;
        let mut fallback_steps = 0;
        let start_orig = if cfg.standardize {
            let mut obj = self.objective(&self.standardized, weights);
            let out = gd_bb(&mut obj, init_std.to_vec(), cfg.tol, cfg.max_iter)?;
            iterations += out.iterations;
            fallback_steps += out.fallback_steps;
            destandardize_coefficients(ArrayView1::from(&out.beta), &self.transform)?
        } else {
            destandardize_coefficients(init_std.view(), &self.transform)?
        };

        let mut obj = self.objective(self.data, weights);
        let remaining = cfg.max_iter.saturating_sub(iterations).max(1);
        let out = gd_bb(&mut obj, start_orig.to_vec(), cfg.tol, remaining)?;
        iterations += out.iterations;
        fallback_steps += out.fallback_steps;
        let loss = obj.loss(&out.beta);
        if !loss.is_finite() {
            return Err(ConquerError::NumericalDivergence { iteration: iterations });
        }
        Ok(FitResult {
            beta: Array1::from(out.beta),
            iterations,
            grad_norm: out.grad_norm,
            converged: out.converged,
            h_used: self.h,
            loss,
            fallback_steps,
            warm_start_iterations: warm_iters,
            nonconvex: false,
        })
    }
}

/// Convolution-smoothed quantile regression by GD-BB.
///
/// Non-convergence within `max_iter` is reported through
/// [`FitResult::converged`], not as an error.
pub fn fit_conquer(data: &Dataset, cfg: &FitConfig, init: Option<ArrayView1<f64>>) -> Result<FitResult> {
    Prepared::new(data, cfg)?.minimize(None, init)
}

// ---------------------------------------------------------------------------
// Horowitz baseline

/// `u·{τ - Φ(-u/h)}`: the indicator of the check loss replaced by a Gaussian
/// survival function. Differentiable but not convex.
pub fn horowitz_check_loss(tau: f64, h: f64, u: f64) -> f64 {
    u * (tau - norm_cdf(-u / h))
}

#[inline]
fn horowitz_derivative(tau: f64, h: f64, u: f64) -> f64 {
    let z = u / h;
    tau - norm_cdf(-z) + z * norm_pdf(z)
}

struct HorowitzObjective<'a> {
    data: &'a Dataset,
    tau: f64,
    h: f64,
}

impl HorowitzObjective<'_> {
    fn loss(&self, beta: &[f64]) -> f64 {
        let (n, p) = (self.data.n(), self.data.p());
        let x = self.data.x_slice();
        let y = self.data.y_slice();
        let mut terms = vec![0.0; n];
        fill_rows(&mut terms, |i| {
            horowitz_check_loss(self.tau, self.h, y[i] - dot(&x[i * p..(i + 1) * p], beta))
        });
        pairwise_sum(&terms) / n as f64
    }

    fn gradient(&self, beta: &[f64]) -> Vec<f64> {
        let (n, p) = (self.data.n(), self.data.p());
        let x = self.data.x_slice();
        let y = self.data.y_slice();
        let g = sum_rows(n, p, |rows, acc| {
            for i in rows {
                let xi = &x[i * p..(i + 1) * p];
                let r = y[i] - dot(xi, beta);
                axpy(-horowitz_derivative(self.tau, self.h, r), xi, acc);
            }
        });
        g.into_iter().map(|v| v / n as f64).collect()
    }

    /// Gradient descent with Armijo backtracking from a unit trial step.
    fn descend(&self, init: Vec<f64>, tol: f64, max_iter: usize) -> Result<BbOutcome> {
        let mut beta = init;
        let mut iterations = 0;
        loop {
            let g = self.gradient(&beta);
            ensure_finite(&g, iterations)?;
            let gnorm = norm2(&g);
            if gnorm <= tol || iterations >= max_iter {
                return Ok(BbOutcome {
                    beta,
                    grad_norm: gnorm,
                    iterations,
                    converged: gnorm <= tol,
                    fallback_steps: 0,
                });
            }
            let f0 = self.loss(&beta);
            let mut t = 1.0;
            let mut trial: Vec<f64>;
            loop {
                trial = beta.iter().zip(&g).map(|(b, gi)| b - t * gi).collect();
                let f = self.loss(&trial);
                if f <= f0 - BACKTRACK_ALPHA * t * gnorm * gnorm || t < 1e-12 {
                    break;
                }
                t *= BACKTRACK_BETA;
            }
            beta = trial;
            iterations += 1;
        }
    }
}

/// `(1/n) Σ u_i·{τ - Φ(-u_i/h)}` over the residuals.
pub fn horowitz_loss(data: &Dataset, beta: ArrayView1<f64>, tau: f64, h: f64) -> Result<f64> {
    check_tau(tau)?;
    check_bandwidth(h)?;
    check_beta(data, beta.len())?;
    Ok(HorowitzObjective { data, tau, h }.loss(&beta.to_vec()))
}

pub fn horowitz_gradient(data: &Dataset, beta: ArrayView1<f64>, tau: f64, h: f64) -> Result<Array1<f64>> {
    check_tau(tau)?;
    check_bandwidth(h)?;
    check_beta(data, beta.len())?;
    Ok(Array1::from(HorowitzObjective { data, tau, h }.gradient(&beta.to_vec())))
}

/// Horowitz-smoothed quantile regression (Gaussian kernel only) by gradient
/// descent with backtracking from a seeded standard-normal start. The result
/// is a stationary point, not necessarily a global minimizer.
pub fn fit_horowitz(data: &Dataset, cfg: &FitConfig, seed: u64) -> Result<FitResult> {
    if cfg.kernel != KernelKind::Gaussian {
        return Err(ConquerError::Domain(
            "the Horowitz baseline is defined for the Gaussian kernel only".into(),
        ));
    }
    let prep = Prepared::new(data, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init_std: Vec<f64> = (0..data.p()).map(|_| StandardNormal.sample(&mut rng)).collect();

    let mut iterations = 0;
    let start = if cfg.standardize {
        let obj = HorowitzObjective {
            data: &prep.standardized,
            tau: cfg.tau,
            h: prep.h,
        };
        let out = obj.descend(init_std, cfg.tol, cfg.max_iter)?;
        iterations += out.iterations;
        destandardize_coefficients(ArrayView1::from(&out.beta), &prep.transform)?
    } else {
        destandardize_coefficients(ArrayView1::from(&init_std), &prep.transform)?
    };
    let obj = HorowitzObjective {
        data,
        tau: cfg.tau,
        h: prep.h,
    };
    let remaining = cfg.max_iter.saturating_sub(iterations).max(1);
    let out = obj.descend(start.to_vec(), cfg.tol, remaining)?;
    iterations += out.iterations;
    Ok(FitResult {
        loss: obj.loss(&out.beta),
        beta: Array1::from(out.beta),
        iterations,
        grad_norm: out.grad_norm,
        converged: out.converged,
        h_used: prep.h,
        fallback_steps: 0,
        warm_start_iterations: None,
        nonconvex: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::finite_diff_gradient;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;

    fn random_data(n: usize, p: usize, seed: u64) -> (Dataset, Array1<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cov = Array2::from_shape_fn((n, p - 1), |_| rng.random_range(-2.0..2.0));
        let beta: Array1<f64> = (0..p).map(|j| 1.0 - 0.3 * j as f64).collect();
        let mut y = Array1::zeros(n);
        for i in 0..n {
            let mut v = beta[0];
            for j in 1..p {
                v += beta[j] * cov[[i, j - 1]];
            }
            let noise: f64 = StandardNormal.sample(&mut rng);
            y[i] = v + noise;
        }
        (Dataset::from_covariates(y, cov).unwrap(), beta)
    }

    #[test]
    fn default_bandwidth_values() {
        assert_abs_diff_eq!(default_bandwidth(2000, 100).unwrap(), 0.3107, epsilon = 5e-4);
        assert_abs_diff_eq!(default_bandwidth(800, 20).unwrap(), 0.2566, epsilon = 5e-5);
        assert!(default_bandwidth(8000, 100).unwrap() < default_bandwidth(2000, 100).unwrap());
        assert!(default_bandwidth(10, 10).is_err());
        assert!(default_bandwidth(10, 0).is_err());
    }

    #[test]
    fn bb_step_rules() {
        // secant pair from a quadratic with curvature 2: both steps are 1/2
        let s = BbState::new(&[1.0, 1.0], &[0.0, 0.0], &[2.0, 2.0], &[0.0, 0.0]);
        assert_eq!(s.step(), (0.5, false));
        // negative curvature -> unit fallback
        let s = BbState::new(&[1.0], &[0.0], &[-1.0], &[0.0]);
        assert_eq!(s.step(), (1.0, true));
        // flat segment, <δ, g> = 0
        let s = BbState::new(&[1.0, 0.0], &[0.0, 0.0], &[0.0, 1.0], &[0.0, 0.0]);
        assert_eq!(s.step(), (1.0, true));
        // tiny curvature is capped
        let s = BbState::new(&[1.0], &[0.0], &[1e-6], &[0.0]);
        assert_eq!(s.step(), (MAX_STEP, false));
    }

    #[test]
    fn single_zero_residual_loss() {
        let d = Dataset::new(array![2.0], array![[1.0]]).unwrap();
        let l = smoothed_loss(&d, array![2.0].view(), 0.5, KernelKind::Gaussian, 1.0).unwrap();
        assert_abs_diff_eq!(l, (2.0 / std::f64::consts::PI).sqrt() / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn argument_errors() {
        let (d, _) = random_data(10, 2, 1);
        let b = array![0.0, 0.0];
        assert!(smoothed_loss(&d, b.view(), 0.5, KernelKind::Gaussian, 0.0).is_err());
        assert!(smoothed_loss(&d, b.view(), 1.5, KernelKind::Gaussian, 1.0).is_err());
        assert!(smoothed_gradient(&d, array![0.0].view(), 0.5, KernelKind::Gaussian, 1.0).is_err());
        assert!(fit_conquer(&d, &FitConfig::new(0.0), None).is_err());
        assert!(fit_conquer(&d, &FitConfig::new(0.5).max_iter(0), None).is_err());
    }

    #[test]
    fn gradient_symmetric_intercept_only() {
        let d = Dataset::new(array![-2.0, -0.5, 0.5, 2.0], Array2::ones((4, 1))).unwrap();
        for kind in KernelKind::ALL {
            let g = smoothed_gradient(&d, array![0.0].view(), 0.5, kind, 0.7).unwrap();
            assert!(g[0].abs() < 1e-12, "{kind}: {}", g[0]);
        }
    }

    #[test]
    fn gradient_saturates_for_compact_kernels() {
        let (d, _) = random_data(20, 3, 2);
        // push every residual far above h
        let shift = d.y().iter().fold(f64::INFINITY, |a, &b| a.min(b)) - 10.0;
        let beta = array![shift, 0.0, 0.0];
        let g = smoothed_gradient(&d, beta.view(), 0.3, KernelKind::Epanechnikov, 0.5).unwrap();
        let mean_x = d.x().mean_axis(ndarray::Axis(0)).unwrap();
        for j in 0..3 {
            assert_abs_diff_eq!(g[j], -0.3 * mean_x[j], epsilon = 1e-12);
        }
        let hess = smoothed_hessian(&d, beta.view(), 0.3, KernelKind::Uniform, 0.5).unwrap();
        assert!(hess.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (d, _) = random_data(30, 4, 5);
        let beta = array![0.2, 0.5, -0.4, 1.1];
        for kind in KernelKind::ALL {
            let f = |b: &Array1<f64>| smoothed_loss(&d, b.view(), 0.4, kind, 0.8).unwrap();
            let fd = finite_diff_gradient(f, beta.view(), 1e-6).unwrap();
            let g = smoothed_gradient(&d, beta.view(), 0.4, kind, 0.8).unwrap();
            for j in 0..4 {
                assert!((fd[j] - g[j]).abs() <= 1e-5 * g[j].abs().max(1e-2), "{kind} {j}");
            }
        }
    }

    #[test]
    fn hessian_is_symmetric_psd() {
        let (d, _) = random_data(30, 4, 6);
        let beta = array![0.0, 0.3, 0.3, 0.3];
        let h = smoothed_hessian(&d, beta.view(), 0.5, KernelKind::Logistic, 0.5).unwrap();
        assert_eq!(h, h.t());
        assert!(crate::linalg::sym_eigenvalues(&h)[0] >= -1e-12);
    }

    #[test]
    fn mad_examples() {
        assert_eq!(mad(&[1.0, 2.0, 3.0, 10.0]).unwrap(), 1.0);
        assert_eq!(mad(&[2.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mad(&[-3.0, 0.0, 3.0]).unwrap(), 3.0);
        assert!(mad(&[]).is_err());
    }

    #[test]
    fn huber_recovers_exact_linear_data() {
        let (d, beta) = random_data(50, 3, 8);
        let (s, t) = standardize(&d).unwrap();
        let y = s.x().dot(&t.standardize_coefficients(beta.view()).unwrap());
        let s = s.with_response(y).unwrap();
        // the Huber gradient scales with the residuals here, so δ bounds ‖β - β*‖ up to conditioning
        let b = huber_warm_start(&s, 1e-8).unwrap();
        let truth = t.standardize_coefficients(beta.view()).unwrap();
        for j in 0..3 {
            assert_abs_diff_eq!(b[j], truth[j], epsilon = 1e-6);
        }
    }

    #[test]
    fn huber_symmetric_intercept_only() {
        let d = Dataset::new(array![-1.0, 0.0, 1.0], Array2::ones((3, 1))).unwrap();
        let b = huber_warm_start(&d, 1e-4).unwrap();
        assert!(b[0].abs() <= 1e-4);
    }

    #[test]
    fn huber_stopping_rule_holds() {
        let (d, _) = random_data(200, 5, 9);
        let (s, _) = standardize(&d).unwrap();
        let fit = huber_warm_start_full(&s, 1e-4, DEFAULT_MAX_ITER).unwrap();
        assert!(fit.converged);
        let g = huber_gradient(&s, fit.beta.view(), fit.gamma).unwrap();
        assert!(norm2(g.as_slice().unwrap()) <= 1e-4);
        // the threshold is the MAD rule at the final iterate
        let r = crate::model::residuals(&s, fit.beta.view()).unwrap();
        assert_abs_diff_eq!(fit.gamma, 1.35 * mad(r.as_slice().unwrap()).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn uniform_kernel_is_shifted_huber() {
        // (h/2)·ℓ^U(u/h) = H_h(u)/(2h) + h/4
        let (d, _) = random_data(40, 3, 10);
        let h = 0.6;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let b: Array1<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let q = smoothed_loss(&d, b.view(), 0.5, KernelKind::Uniform, h).unwrap();
            let hub = huber_objective(&d, b.view(), h).unwrap();
            assert_abs_diff_eq!(q - hub / (2.0 * h), h / 4.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn symmetric_intercept_fit_is_zero() {
        let d = Dataset::new(array![-3.0, -1.0, -0.2, 0.2, 1.0, 3.0], Array2::ones((6, 1))).unwrap();
        for kind in KernelKind::ALL {
            let fit = fit_conquer(&d, &FitConfig::new(0.5).kernel(kind).bandwidth(0.5), None).unwrap();
            assert!(fit.converged);
            assert!(fit.beta[0].abs() <= 10.0 * DEFAULT_TOL, "{kind}: {}", fit.beta[0]);
        }
    }

    #[test]
    fn fit_satisfies_first_order_condition() {
        let (d, _) = random_data(300, 4, 12);
        for tau in [0.1, 0.5, 0.9] {
            for standardize in [true, false] {
                let cfg = FitConfig::new(tau).standardize(standardize);
                let fit = fit_conquer(&d, &cfg, None).unwrap();
                assert!(fit.converged);
                let g = smoothed_gradient(&d, fit.beta.view(), tau, cfg.kernel, fit.h_used).unwrap();
                assert!(norm2(g.as_slice().unwrap()) <= cfg.tol);
                assert_abs_diff_eq!(norm2(g.as_slice().unwrap()), fit.grad_norm, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn fit_from_explicit_init_matches_warm_start() {
        let (d, _) = random_data(200, 3, 13);
        let cfg = FitConfig::new(0.3).tol(1e-9);
        let a = fit_conquer(&d, &cfg, None).unwrap();
        let b = fit_conquer(&d, &cfg, Some(array![5.0, -5.0, 5.0].view())).unwrap();
        for j in 0..3 {
            assert_abs_diff_eq!(a.beta[j], b.beta[j], epsilon = 1e-7);
        }
        assert!(a.warm_start_iterations.is_some() && b.warm_start_iterations.is_none());
    }

    #[test]
    fn iteration_cap_is_reported_not_raised() {
        let (d, _) = random_data(200, 3, 14);
        let fit = fit_conquer(&d, &FitConfig::new(0.5).tol(1e-14).max_iter(3), None).unwrap();
        assert!(!fit.converged);
        assert!(fit.iterations <= 4);
    }

    #[test]
    fn horowitz_pointwise() {
        assert_eq!(horowitz_check_loss(0.3, 1.0, 0.0), 0.0);
        assert_abs_diff_eq!(horowitz_check_loss(0.5, 1e-6, 1.0), 0.5, epsilon = 1e-6);
        assert_abs_diff_eq!(horowitz_check_loss(0.5, 1e-6, -1.0), 0.5, epsilon = 1e-6);
    }

    #[test]
    fn horowitz_gradient_finite_differences() {
        let (d, _) = random_data(30, 3, 15);
        let beta = array![0.7, 0.4, -0.6];
        let f = |b: &Array1<f64>| horowitz_loss(&d, b.view(), 0.7, 0.5).unwrap();
        let fd = finite_diff_gradient(f, beta.view(), 1e-6).unwrap();
        let g = horowitz_gradient(&d, beta.view(), 0.7, 0.5).unwrap();
        for j in 0..3 {
            assert!((fd[j] - g[j]).abs() <= 1e-5 * g[j].abs().max(1e-2));
        }
    }

    #[test]
    fn horowitz_fit_is_stationary_and_seeded() {
        let (d, beta) = random_data(400, 3, 16);
        let cfg = FitConfig::new(0.5);
        let a = fit_horowitz(&d, &cfg, 1).unwrap();
        let b = fit_horowitz(&d, &cfg, 1).unwrap();
        assert_eq!(a.beta, b.beta);
        assert!(a.nonconvex && a.converged);
        let g = horowitz_gradient(&d, a.beta.view(), 0.5, a.h_used).unwrap();
        assert!(norm2(g.as_slice().unwrap()) <= cfg.tol);
        for j in 0..3 {
            assert!((a.beta[j] - beta[j]).abs() < 0.3);
        }
        assert!(fit_horowitz(&d, &cfg.clone().kernel(KernelKind::Uniform), 1).is_err());
    }

    #[test]
    fn bandwidth_parsing() {
        assert_eq!("auto".parse::<Bandwidth>().unwrap(), Bandwidth::Auto);
        assert_eq!("0.25".parse::<Bandwidth>().unwrap(), Bandwidth::Fixed(0.25));
        assert!("-1".parse::<Bandwidth>().is_err());
        assert!("wide".parse::<Bandwidth>().is_err());
        let cfg: FitConfig = serde_json::from_str(
            r#"{"tau":0.5,"kernel":"uniform","bandwidth":"auto","tol":1e-4,"max_iter":10,"standardize":true}"#,
        )
        .unwrap();
        assert_eq!(cfg.bandwidth, Bandwidth::Auto);
        let cfg: FitConfig = serde_json::from_str(
            r#"{"tau":0.5,"kernel":"uniform","bandwidth":0.3,"tol":1e-4,"max_iter":10,"standardize":true}"#,
        )
        .unwrap();
        assert_eq!(cfg.bandwidth, Bandwidth::Fixed(0.3));
    }
}
