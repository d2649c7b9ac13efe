//! Multiplier bootstrap and confidence intervals.
//!
//! Each bootstrap replicate reweights the smoothed loss by `w_i = 1 + e_i`
//! with Rademacher `e_i` and re-solves from the full-sample estimate. The
//! weights for replicate `b` come from a ChaCha20 stream selected by `b`
//! under the master seed, and draws are assembled in replicate order, so the
//! result does not depend on scheduling or thread count.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{check_bandwidth, check_tau, ConquerError, Result};
use crate::kernels::KernelKind;
use crate::linalg;
use crate::model::{check_beta, Dataset};
use crate::par::{dot, sum_rows};
use crate::solver::{symmetric_from_upper, FitConfig, FitResult, Prepared, SmoothedObjective};
use crate::stats::{norm_ppf, sample_sd};

/// Bootstrap-based interval methods need at least this many usable draws.
pub const MIN_USABLE_DRAWS: usize = 20;
/// Largest tolerated share of failed replicates.
pub const MAX_FAILED_FRACTION: f64 = 0.05;
/// Condition number above which the plug-in Hessian counts as singular.
pub const MAX_HESSIAN_CONDITION: f64 = 1e12;

/// Distribution of the bootstrap multipliers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightScheme {
    /// `1 + e_i`, `e_i` Rademacher, so weights are 0 or 2.
    #[default]
    Rademacher,
    /// Every weight 1; each replicate reproduces the full-sample fit.
    Unit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapOptions {
    pub reps: usize,
    pub seed: u64,
    /// Worker threads; `None` uses the ambient rayon pool.
    pub threads: Option<usize>,
    pub weights: WeightScheme,
}

impl BootstrapOptions {
    pub fn new(reps: usize, seed: u64) -> Self {
        Self {
            reps,
            seed,
            threads: None,
            weights: WeightScheme::Rademacher,
        }
    }
}

/// Bootstrap coefficient draws on the original scale, one row per usable
/// replicate, in replicate order.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    pub draws: Array2<f64>,
    pub base: FitResult,
    pub reps: usize,
    pub seed: u64,
    pub failed: usize,
    pub names: Vec<String>,
}

impl BootstrapResult {
    /// Wraps externally produced draws around a point estimate.
    pub fn from_draws(draws: Array2<f64>, base: FitResult, names: Vec<String>) -> Self {
        let reps = draws.nrows();
        Self {
            draws,
            base,
            reps,
            seed: 0,
            failed: 0,
            names,
        }
    }

    pub fn usable(&self) -> usize {
        self.draws.nrows()
    }

    /// More than 5% of replicates failed.
    pub fn unreliable(&self) -> bool {
        self.failed as f64 > MAX_FAILED_FRACTION * self.reps as f64
    }

    fn require_draws(&self) -> Result<()> {
        if self.usable() < MIN_USABLE_DRAWS {
            return Err(ConquerError::UnreliableInference {
                usable: self.usable(),
                required: MIN_USABLE_DRAWS,
            });
        }
        Ok(())
    }
}

/// Multiplier weights of replicate `b`.
pub fn replicate_weights(seed: u64, b: usize, n: usize, scheme: WeightScheme) -> Vec<f64> {
    match scheme {
        WeightScheme::Unit => vec![1.0; n],
        WeightScheme::Rademacher => {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let mut out = Vec::with_capacity(n);
            while out.len() < n {
                let bits = rng.next_u64();
                for k in 0..64.min(n - out.len()) {
                    out.push(if bits >> k & 1 == 1 { 2.0 } else { 0.0 });
                }
            }
            out
        }
    }
}

/// Multiplier bootstrap with Rademacher weights and default options.
pub fn bootstrap_fit(data: &Dataset, cfg: &FitConfig, reps: usize, seed: u64) -> Result<BootstrapResult> {
    bootstrap_fit_with(data, cfg, &BootstrapOptions::new(reps, seed))
}

pub fn bootstrap_fit_with(data: &Dataset, cfg: &FitConfig, opts: &BootstrapOptions) -> Result<BootstrapResult> {
    if opts.reps < 2 {
        return Err(ConquerError::Domain(format!(
            "bootstrap needs at least 2 replicates, got {}",
            opts.reps
        )));
    }
    let prep = Prepared::new(data, cfg)?;
    let run = || -> Result<(FitResult, Vec<Option<Array1<f64>>>)> {
        let base = prep.minimize(None, None)?;
        let fits = (0..opts.reps)
            .into_par_iter()
            .map(|b| {
                let w = replicate_weights(opts.seed, b, data.n(), opts.weights);
                match prep.minimize(Some(&w), Some(base.beta.view())) {
                    Ok(fit) if fit.converged => Some(fit.beta),
                    _ => None,
                }
            })
            .collect();
        Ok((base, fits))
    };
    let (base, fits) = match opts.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build()
            .map_err(|e| ConquerError::Config(format!("thread pool: {e}")))?
            .install(run)?,
        None => run()?,
    };
    let usable: Vec<Array1<f64>> = fits.into_iter().flatten().collect();
    let failed = opts.reps - usable.len();
    let p = data.p();
    let mut draws = Array2::zeros((usable.len(), p));
    for (mut row, b) in draws.rows_mut().into_iter().zip(&usable) {
        row.assign(b);
    }
    Ok(BootstrapResult {
        draws,
        base,
        reps: opts.reps,
        seed: opts.seed,
        failed,
        names: data.names().to_vec(),
    })
}

// ---------------------------------------------------------------------------
// Confidence intervals

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CiMethod {
    /// Bootstrap percentile.
    Percentile,
    /// Bootstrap pivotal (percentiles reflected about the estimate).
    Pivotal,
    /// Estimate ± critical value × bootstrap standard deviation.
    BootstrapNormal,
    /// Estimate ± critical value × plug-in sandwich standard error.
    Normal,
}

impl CiMethod {
    pub fn name(self) -> &'static str {
        match self {
            CiMethod::Percentile => "percentile",
            CiMethod::Pivotal => "pivotal",
            CiMethod::BootstrapNormal => "bootstrap-normal",
            CiMethod::Normal => "normal",
        }
    }
}

impl fmt::Display for CiMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CiMethod {
    type Err = ConquerError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per" | "percentile" | "mb-per" => Ok(CiMethod::Percentile),
            "piv" | "pivotal" | "mb-piv" => Ok(CiMethod::Pivotal),
            "norm" | "bootstrap-normal" | "mb-norm" => Ok(CiMethod::BootstrapNormal),
            "normal" | "sandwich" => Ok(CiMethod::Normal),
            other => Err(ConquerError::Config(format!("unknown interval method {other:?}"))),
        }
    }
}

/// Coordinatewise intervals at level `1 - α`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceIntervals {
    pub method: CiMethod,
    pub level: f64,
    pub estimate: Array1<f64>,
    pub lower: Array1<f64>,
    pub upper: Array1<f64>,
    pub names: Vec<String>,
}

impl ConfidenceIntervals {
    pub fn widths(&self) -> Array1<f64> {
        &self.upper - &self.lower
    }

    pub fn covers(&self, j: usize, value: f64) -> bool {
        self.lower[j] <= value && value <= self.upper[j]
    }
}

#[derive(Serialize)]
struct CoordRecord<'a> {
    index: usize,
    name: &'a str,
    estimate: f64,
    lower: f64,
    upper: f64,
}

#[derive(Serialize)]
struct CiRecord<'a> {
    method: &'static str,
    level: f64,
    coords: Vec<CoordRecord<'a>>,
}

impl Serialize for ConfidenceIntervals {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        CiRecord {
            method: self.method.name(),
            level: self.level,
            coords: (0..self.estimate.len())
                .map(|j| CoordRecord {
                    index: j,
                    name: self.names.get(j).map_or("", String::as_str),
                    estimate: self.estimate[j],
                    lower: self.lower[j],
                    upper: self.upper[j],
                })
                .collect(),
        }
        .serialize(s)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(ConquerError::Domain(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// `c(q)`: the `⌈qB⌉`-th order statistic of sorted draws, i.e. the smallest
/// `t` whose empirical distribution function reaches `q`.
pub fn empirical_quantile(sorted: &[f64], q: f64) -> f64 {
    let b = sorted.len();
    // guard against q·B landing a hair above an integer
    let k = ((q * b as f64) - 1e-9).ceil().clamp(1.0, b as f64) as usize;
    sorted[k - 1]
}

fn sorted_column(draws: ArrayView2<f64>, j: usize) -> Vec<f64> {
    let mut col = draws.column(j).to_vec();
    col.sort_by(f64::total_cmp);
    col
}

fn names_or_default(names: &[String], p: usize) -> Vec<String> {
    if names.len() == p {
        names.to_vec()
    } else {
        (0..p).map(|j| format!("b{j}")).collect()
    }
}

fn check_draws(draws: ArrayView2<f64>, estimate: ArrayView1<f64>) -> Result<()> {
    if draws.nrows() == 0 {
        return Err(ConquerError::UnreliableInference { usable: 0, required: 1 });
    }
    if draws.ncols() != estimate.len() {
        return Err(ConquerError::DimensionMismatch {
            what: "draw columns vs estimate length",
            expected: estimate.len(),
            got: draws.ncols(),
        });
    }
    Ok(())
}

/// Percentile interval `[c(α/2), c(1 - α/2)]` from raw draws.
pub fn percentile_from_draws(
    draws: ArrayView2<f64>,
    estimate: ArrayView1<f64>,
    alpha: f64,
    names: &[String],
) -> Result<ConfidenceIntervals> {
    check_alpha(alpha)?;
    check_draws(draws, estimate)?;
    let p = estimate.len();
    let mut lower = Array1::zeros(p);
    let mut upper = Array1::zeros(p);
    for j in 0..p {
        let col = sorted_column(draws, j);
        lower[j] = empirical_quantile(&col, alpha / 2.0);
        upper[j] = empirical_quantile(&col, 1.0 - alpha / 2.0);
    }
    Ok(ConfidenceIntervals {
        method: CiMethod::Percentile,
        level: 1.0 - alpha,
        estimate: estimate.to_owned(),
        lower,
        upper,
        names: names_or_default(names, p),
    })
}

/// Pivotal interval `[2β̂ - c(1 - α/2), 2β̂ - c(α/2)]` from raw draws.
pub fn pivotal_from_draws(
    draws: ArrayView2<f64>,
    estimate: ArrayView1<f64>,
    alpha: f64,
    names: &[String],
) -> Result<ConfidenceIntervals> {
    let per = percentile_from_draws(draws, estimate, alpha, names)?;
    let lower = 2.0 * &per.estimate - &per.upper;
    let upper = 2.0 * &per.estimate - &per.lower;
    Ok(ConfidenceIntervals {
        method: CiMethod::Pivotal,
        lower,
        upper,
        ..per
    })
}

/// `β̂_j ± Φ^{-1}(1 - α/2)·sd_j` with `sd_j` the standard deviation of the
/// draws (`n - 1` denominator).
pub fn bootstrap_normal_from_draws(
    draws: ArrayView2<f64>,
    estimate: ArrayView1<f64>,
    alpha: f64,
    names: &[String],
) -> Result<ConfidenceIntervals> {
    check_alpha(alpha)?;
    check_draws(draws, estimate)?;
    let z = norm_ppf(1.0 - alpha / 2.0);
    let sd: Array1<f64> = draws
        .axis_iter(Axis(1))
        .map(|c| sample_sd(&c.to_vec()))
        .collect();
    let p = estimate.len();
    Ok(ConfidenceIntervals {
        method: CiMethod::BootstrapNormal,
        level: 1.0 - alpha,
        estimate: estimate.to_owned(),
        lower: &estimate - &(z * &sd),
        upper: &estimate + &(z * &sd),
        names: names_or_default(names, p),
    })
}

pub fn percentile_ci(res: &BootstrapResult, alpha: f64) -> Result<ConfidenceIntervals> {
    res.require_draws()?;
    percentile_from_draws(res.draws.view(), res.base.beta.view(), alpha, &res.names)
}

pub fn pivotal_ci(res: &BootstrapResult, alpha: f64) -> Result<ConfidenceIntervals> {
    res.require_draws()?;
    pivotal_from_draws(res.draws.view(), res.base.beta.view(), alpha, &res.names)
}

pub fn mb_norm_ci(res: &BootstrapResult, alpha: f64) -> Result<ConfidenceIntervals> {
    res.require_draws()?;
    bootstrap_normal_from_draws(res.draws.view(), res.base.beta.view(), alpha, &res.names)
}

// ---------------------------------------------------------------------------
// Plug-in sandwich

/// Normalization of the score-variance estimate `V̂`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceScaling {
    /// `V̂ = (1/n) Σ {K̄(-ε̂_i/h) - τ}² x_i x_iᵀ`, consistent for `τ(1-τ)Σ`.
    #[default]
    Standard,
    /// The same sum divided by `n·h`, kept for comparison only.
    PerBandwidth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sandwich {
    /// `n^{-1} D̂⁻¹ V̂ D̂⁻¹`.
    pub covariance: Array2<f64>,
    pub std_errors: Array1<f64>,
    pub hessian: Array2<f64>,
    pub score_variance: Array2<f64>,
}

/// Plug-in covariance `n^{-1} D̂⁻¹ V̂ D̂⁻¹` of the estimator at `beta`.
pub fn sandwich_covariance(
    data: &Dataset,
    beta: ArrayView1<f64>,
    tau: f64,
    kernel: KernelKind,
    h: f64,
) -> Result<Sandwich> {
    sandwich_covariance_with(data, beta, tau, kernel, h, VarianceScaling::Standard)
}

pub fn sandwich_covariance_with(
    data: &Dataset,
    beta: ArrayView1<f64>,
    tau: f64,
    kernel: KernelKind,
    h: f64,
    scaling: VarianceScaling,
) -> Result<Sandwich> {
    check_tau(tau)?;
    check_bandwidth(h)?;
    check_beta(data, beta.len())?;
    let b = beta.to_vec();
    let obj = SmoothedObjective {
        data,
        tau,
        kernel,
        h,
        weights: None,
    };
    let hessian = obj.hessian(&b);
    let condition = linalg::sym_condition(&hessian);
    if !(condition <= MAX_HESSIAN_CONDITION) {
        return Err(ConquerError::SingularHessian { condition });
    }

    let (n, p) = (data.n(), data.p());
    let x = data.x_slice();
    let y = data.y_slice();
    let flat = sum_rows(n, p * p, |rows, acc| {
        for i in rows {
            let xi = &x[i * p..(i + 1) * p];
            let r = y[i] - dot(xi, &b);
            let s = kernel.cdf(-r / h) - tau;
            let s2 = s * s;
            for a in 0..p {
                for c in a..p {
                    acc[a * p + c] += s2 * xi[a] * xi[c];
                }
            }
        }
    });
    let denom = match scaling {
        VarianceScaling::Standard => n as f64,
        VarianceScaling::PerBandwidth => n as f64 * h,
    };
    let score_variance = symmetric_from_upper(flat, p, 1.0 / denom);

    let chol = linalg::cholesky(&hessian).ok_or(ConquerError::SingularHessian { condition })?;
    let d_inv = chol.inverse();
    let v = linalg::to_na(&score_variance);
    let cov = &d_inv * v * &d_inv / n as f64;
    let mut covariance = linalg::from_na(&cov);
    // symmetrize away rounding
    for a in 0..p {
        for c in a + 1..p {
            let m = 0.5 * (covariance[[a, c]] + covariance[[c, a]]);
            covariance[[a, c]] = m;
            covariance[[c, a]] = m;
        }
    }
    let std_errors = covariance.diag().mapv(|v| v.max(0.0).sqrt());
    Ok(Sandwich {
        covariance,
        std_errors,
        hessian,
        score_variance,
    })
}

/// `β̂_j ± Φ^{-1}(1 - α/2)·SE_j` with sandwich standard errors. `α = 1`
/// gives zero-width intervals.
pub fn normal_ci(
    data: &Dataset,
    beta: ArrayView1<f64>,
    tau: f64,
    kernel: KernelKind,
    h: f64,
    alpha: f64,
) -> Result<ConfidenceIntervals> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(ConquerError::Domain(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    let sw = sandwich_covariance(data, beta, tau, kernel, h)?;
    let z = if alpha == 1.0 { 0.0 } else { norm_ppf(1.0 - alpha / 2.0) };
    Ok(ConfidenceIntervals {
        method: CiMethod::Normal,
        level: 1.0 - alpha,
        estimate: beta.to_owned(),
        lower: &beta - &(z * &sw.std_errors),
        upper: &beta + &(z * &sw.std_errors),
        names: data.names().to_vec(),
    })
}
