//! One-step refinement with a higher-order Gaussian kernel.
//!
//! Starting from a conquer pilot `β̄` (second-order kernel, bandwidth `h`),
//! one Newton correction is taken on the loss smoothed by the order-`ν`
//! kernel `G` at bandwidth `b`:
//!
//! ```text
//! H = (1/(n b)) Σ G(r̄_i / b) x_i x_iᵀ
//! g = (1/n) Σ {Ḡ(r̄_i / b) + τ - 1} x_i
//! H (β̂ - β̄) = g
//! ```
//!
//! `G` is signed, so `H` need not be positive definite; the solve escalates
//! from a Cholesky factorization through jittered factorizations to
//! conjugate gradients and fails if none meets the residual bound.

use std::fmt;

use ndarray::{Array1, Array2, ArrayView1};
use serde::Serialize;

use crate::error::{check_bandwidth, check_tau, ConquerError, Result};
use crate::kernels::HigherOrderKernel;
use crate::linalg;
use crate::model::{check_beta, Dataset};
use crate::par::{axpy, dot, norm2, sum_rows};
use crate::solver::{fit_conquer, symmetric_from_upper, Bandwidth, FitConfig, FitResult};

/// Jitter multipliers of `tr(H)/p`, tried in order.
pub const JITTER_LEVELS: [f64; 3] = [1e-10, 1e-8, 1e-6];
/// Relative residual bound `‖H d - g‖ ≤ RESIDUAL_TOL·(1 + ‖g‖)`.
pub const RESIDUAL_TOL: f64 = 1e-8;
const REFINE_STEPS: usize = 50;

/// `((p + ln n)/n)^{2/(2ν+1)}`: exponent 2/9 for `ν = 4`, 2/13 for `ν = 6`.
pub fn refinement_bandwidth(n: usize, p: usize, order: u32) -> Result<f64> {
    if p == 0 || n <= p {
        return Err(ConquerError::Domain(format!(
            "refinement bandwidth needs n > p >= 1 (n = {n}, p = {p})"
        )));
    }
    HigherOrderKernel::of_order(order)?;
    let n_f = n as f64;
    Ok(((p as f64 + n_f.ln()) / n_f).powf(2.0 / (2.0 * order as f64 + 1.0)))
}

/// `((p + ln n)/n)^{2/9}`, the order-4 default.
pub fn default_refinement_bandwidth(n: usize, p: usize) -> Result<f64> {
    refinement_bandwidth(n, p, 4)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OneStepConfig {
    /// Pilot fit: τ, second-order kernel, bandwidth `h` and solver controls.
    pub pilot: FitConfig,
    /// Kernel order `ν`, 4 or 6.
    pub order: u32,
    /// Refinement bandwidth `b`; `Auto` uses [`refinement_bandwidth`].
    pub refinement: Bandwidth,
}

impl OneStepConfig {
    pub fn new(tau: f64) -> Self {
        Self {
            pilot: FitConfig::new(tau),
            order: 4,
            refinement: Bandwidth::Auto,
        }
    }

    pub fn order(mut self, order: u32) -> Self {
        self.order = order;
        self
    }

    pub fn refinement_bandwidth(mut self, b: f64) -> Self {
        self.refinement = Bandwidth::Fixed(b);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.pilot.validate()?;
        if self.order != 4 && self.order != 6 {
            return Err(ConquerError::Domain(format!(
                "one-step kernel order must be 4 or 6, got {}",
                self.order
            )));
        }
        if let Bandwidth::Fixed(b) = self.refinement {
            check_bandwidth(b)?;
        }
        Ok(())
    }

    fn resolve_b(&self, n: usize, p: usize) -> Result<f64> {
        match self.refinement {
            Bandwidth::Auto => refinement_bandwidth(n, p, self.order),
            Bandwidth::Fixed(b) => Ok(b),
        }
    }
}

/// How the Newton system was solved.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SolvePath {
    Cholesky,
    Jittered { lambda: f64 },
    ConjugateGradient { iterations: usize },
}

impl fmt::Display for SolvePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SolvePath::Cholesky => f.write_str("cholesky"),
            SolvePath::Jittered { lambda } => write!(f, "jittered cholesky (lambda = {lambda:e})"),
            SolvePath::ConjugateGradient { iterations } => {
                write!(f, "conjugate gradient ({iterations} iterations)")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OneStepResult {
    #[serde(serialize_with = "crate::serde_arr::serialize")]
    pub beta: Array1<f64>,
    pub pilot: FitResult,
    pub order: u32,
    pub b_used: f64,
    pub solve: SolvePath,
    /// `‖H d - g‖₂` of the accepted step.
    pub residual_norm: f64,
    /// `‖g‖₂` at the pilot.
    pub score_norm: f64,
}

/// Newton system `(H, g)` of the order-`2r` smoothed loss at `beta`.
pub struct NewtonSystem {
    pub hessian: Array2<f64>,
    pub score: Array1<f64>,
}

/// Assembles `H` and `g` at `beta`. `g` is the negative gradient.
pub fn newton_system(
    data: &Dataset,
    beta: ArrayView1<f64>,
    tau: f64,
    kernel: HigherOrderKernel,
    b: f64,
) -> Result<NewtonSystem> {
    check_tau(tau)?;
    check_bandwidth(b)?;
    check_beta(data, beta.len())?;
    let (n, p) = (data.n(), data.p());
    let x = data.x_slice();
    let y = data.y_slice();
    let beta = beta.to_vec();
    // first p slots: score, remaining p·p: Hessian upper triangle
    let flat = sum_rows(n, p + p * p, |rows, acc| {
        let (g, h) = acc.split_at_mut(p);
        for i in rows {
            let xi = &x[i * p..(i + 1) * p];
            let u = (y[i] - dot(xi, &beta)) / b;
            axpy(kernel.cdf(u) + tau - 1.0, xi, g);
            let k = kernel.density(u);
            if k == 0.0 {
                continue;
            }
            for a in 0..p {
                let ka = k * xi[a];
                for c in a..p {
                    h[a * p + c] += ka * xi[c];
                }
            }
        }
    });
    let inv_n = 1.0 / n as f64;
    let score = Array1::from_iter(flat[..p].iter().map(|v| v * inv_n));
    let hessian = symmetric_from_upper(flat[p..].to_vec(), p, inv_n / b);
    Ok(NewtonSystem { hessian, score })
}

fn residual(h: &Array2<f64>, d: &[f64], g: &[f64]) -> Vec<f64> {
    let hd = linalg::matvec(h, d);
    g.iter().zip(&hd).map(|(gi, hi)| gi - hi).collect()
}

fn conjugate_gradient(h: &Array2<f64>, g: &[f64], tol: f64) -> Option<(Vec<f64>, usize)> {
    let p = g.len();
    let mut x = vec![0.0; p];
    let mut r = g.to_vec();
    let mut dir = r.clone();
    let mut rr = dot(&r, &r);
    for it in 0..10 * p.max(1) {
        if rr.sqrt() <= tol {
            return Some((x, it));
        }
        let hd = linalg::matvec(h, &dir);
        let curv = dot(&dir, &hd);
        if !(curv > 0.0) {
            return None;
        }
        let alpha = rr / curv;
        axpy(alpha, &dir, &mut x);
        axpy(-alpha, &hd, &mut r);
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        for (dj, rj) in dir.iter_mut().zip(&r) {
            *dj = rj + beta * *dj;
        }
        rr = rr_new;
    }
    (rr.sqrt() <= tol).then_some((x, 10 * p.max(1)))
}

/// Solves `H d = g`, returning the step, the path taken and `‖H d - g‖`.
pub fn solve_newton(h: &Array2<f64>, g: &[f64]) -> Result<(Vec<f64>, SolvePath, f64)> {
    let p = g.len();
    let tol = RESIDUAL_TOL * (1.0 + norm2(g));
    let accept = |d: Vec<f64>| {
        let r = norm2(&residual(h, &d, g));
        (r <= tol && d.iter().all(|v| v.is_finite())).then_some((d, r))
    };

    if let Some(chol) = linalg::cholesky(h) {
        let d = linalg::to_array1(&chol.solve(&linalg::vec_to_na(g))).to_vec();
        if let Some((d, r)) = accept(d) {
            return Ok((d, SolvePath::Cholesky, r));
        }
    }

    let scale = (0..p).map(|j| h[[j, j]]).sum::<f64>().abs() / p as f64;
    for level in JITTER_LEVELS {
        let lambda = level * scale.max(f64::MIN_POSITIVE);
        let mut shifted = h.clone();
        for j in 0..p {
            shifted[[j, j]] += lambda;
        }
        let Some(chol) = linalg::cholesky(&shifted) else {
            continue;
        };
        // iterative refinement against the unshifted system
        let mut d = vec![0.0; p];
        for _ in 0..REFINE_STEPS {
            let r = residual(h, &d, g);
            if norm2(&r) <= tol {
                break;
            }
            let corr = chol.solve(&linalg::vec_to_na(&r));
            for (dj, cj) in d.iter_mut().zip(corr.iter()) {
                *dj += cj;
            }
        }
        if let Some((d, r)) = accept(d) {
            return Ok((d, SolvePath::Jittered { lambda }, r));
        }
    }

    if let Some((d, iterations)) = conjugate_gradient(h, g, tol) {
        if let Some((d, r)) = accept(d) {
            return Ok((d, SolvePath::ConjugateGradient { iterations }, r));
        }
    }
    Err(ConquerError::NonPositiveDefiniteHessian)
}

/// One Newton step from `pilot` on the order-`2r` smoothed loss.
pub fn refine(
    data: &Dataset,
    pilot: ArrayView1<f64>,
    tau: f64,
    kernel: HigherOrderKernel,
    b: f64,
) -> Result<(Array1<f64>, SolvePath, f64, f64)> {
    let sys = newton_system(data, pilot, tau, kernel, b)?;
    let g = sys.score.to_vec();
    let (d, path, res) = solve_newton(&sys.hessian, &g)?;
    let beta = &pilot + &Array1::from(d);
    Ok((beta, path, res, norm2(&g)))
}

/// Pilot conquer fit followed by one higher-order-kernel Newton step.
pub fn one_step_fit(data: &Dataset, cfg: &OneStepConfig) -> Result<OneStepResult> {
    cfg.validate()?;
    let b = cfg.resolve_b(data.n(), data.p())?;
    let pilot = fit_conquer(data, &cfg.pilot, None)?;
    if !pilot.converged {
        return Err(ConquerError::Domain(format!(
            "pilot fit did not converge within {} iterations (gradient norm {:e})",
            cfg.pilot.max_iter, pilot.grad_norm
        )));
    }
    let kernel = HigherOrderKernel::of_order(cfg.order)?;
    let (beta, solve, residual_norm, score_norm) = refine(data, pilot.beta.view(), cfg.pilot.tau, kernel, b)?;
    Ok(OneStepResult {
        beta,
        pilot,
        order: cfg.order,
        b_used: b,
        solve,
        residual_norm,
        score_norm,
    })
}
