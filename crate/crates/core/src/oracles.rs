//! Brute-force references for testing: exact small-instance quantile
//! regression, numerical convolution of the check loss, and central finite
//! differences.
//!
//! Nothing here calls into the closed-form smoothed losses or the solver; the
//! kernel densities are restated locally so the quadrature route stays
//! independent of the code it checks.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{check_bandwidth, check_tau, ConquerError, Result};
use crate::kernels::KernelKind;
use crate::model::Dataset;

/// Work limits for the oracles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleBudget {
    pub max_subsets: u64,
    pub quadrature_tol: f64,
}

impl Default for OracleBudget {
    fn default() -> Self {
        Self {
            max_subsets: 2_000_000,
            quadrature_tol: 1e-9,
        }
    }
}

// ---------------------------------------------------------------------------
// Exact quantile regression by basis enumeration

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting; `None`
/// when a pivot is negligible relative to the matrix scale.
fn solve_dense(mut a: Vec<f64>, mut b: Vec<f64>, p: usize) -> Option<Vec<f64>> {
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return None;
    }
    for col in 0..p {
        let piv = (col..p)
            .max_by(|&i, &j| a[i * p + col].abs().total_cmp(&a[j * p + col].abs()))
            .unwrap();
        if a[piv * p + col].abs() <= 1e-12 * scale {
            return None;
        }
        if piv != col {
            for k in 0..p {
                a.swap(col * p + k, piv * p + k);
            }
            b.swap(col, piv);
        }
        for row in col + 1..p {
            let f = a[row * p + col] / a[col * p + col];
            if f != 0.0 {
                for k in col..p {
                    a[row * p + k] -= f * a[col * p + k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; p];
    for row in (0..p).rev() {
        let mut s = b[row];
        for k in row + 1..p {
            s -= a[row * p + k] * x[k];
        }
        x[row] = s / a[row * p + row];
    }
    Some(x)
}

/// Sum of check losses `Σ ρ_τ(y_i - <x_i, β>)`, computed directly.
pub fn exact_check_loss(data: &Dataset, beta: ArrayView1<f64>, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let r = crate::model::residuals(data, beta)?;
    Ok(r.iter()
        .map(|&u| if u < 0.0 { u * (tau - 1.0) } else { u * tau })
        .sum())
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Exact quantile regression for tiny problems: some minimizer interpolates
/// `p` observations, so every `p`-subset is solved and the best basis kept.
/// Singular subsets are skipped. Ties in loss go to the lexicographically
/// smallest coefficient vector.
pub fn exact_qr_small(data: &Dataset, tau: f64, budget: &OracleBudget) -> Result<Array1<f64>> {
    check_tau(tau)?;
    let (n, p) = (data.n(), data.p());
    let needed = binomial(n, p);
    if needed > budget.max_subsets as u128 {
        return Err(ConquerError::BudgetExceeded {
            needed,
            budget: budget.max_subsets,
        });
    }
    let x = data.x();
    let y = data.y();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut idx: Vec<usize> = (0..p).collect();
    loop {
        let a: Vec<f64> = idx.iter().flat_map(|&i| x.row(i).to_vec()).collect();
        let b: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
        if let Some(beta) = solve_dense(a, b, p) {
            let loss = exact_check_loss(data, ArrayView1::from(&beta), tau)?;
            let better = match &best {
                None => true,
                Some((bl, bb)) => {
                    let tie = 1e-12 * (1.0 + bl.abs());
                    loss < bl - tie || ((loss - bl).abs() <= tie && lex_cmp(&beta, bb).is_lt())
                }
            };
            if better {
                best = Some((loss, beta));
            }
        }
        // next combination in lexicographic order
        let mut k = p;
        loop {
            if k == 0 {
                return best
                    .map(|(_, b)| Array1::from(b))
                    .ok_or(ConquerError::AllSubsetsSingular);
            }
            k -= 1;
            if idx[k] < n - p + k {
                idx[k] += 1;
                for m in k + 1..p {
                    idx[m] = idx[m - 1] + 1;
                }
                break;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Adaptive Gauss-Kronrod quadrature

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

const MAX_SEGMENTS: usize = 4000;

fn kronrod15(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let hw = 0.5 * (b - a);
    let fc = f(c);
    let mut k = WGK[7] * fc;
    let mut g = WG[3] * fc;
    for j in 0..7 {
        let dx = hw * XGK[j];
        let s = f(c - dx) + f(c + dx);
        k += WGK[j] * s;
        if j % 2 == 1 {
            g += WG[j / 2] * s;
        }
    }
    (k * hw, ((k - g) * hw).abs())
}

struct Segment {
    a: f64,
    b: f64,
    value: f64,
    err: f64,
}

impl PartialEq for Segment {
    fn eq(&self, o: &Self) -> bool {
        self.err == o.err
    }
}
impl Eq for Segment {}
impl PartialOrd for Segment {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Segment {
    fn cmp(&self, o: &Self) -> Ordering {
        self.err.total_cmp(&o.err)
    }
}

/// Adaptive 7/15-point Gauss-Kronrod integration of `f` over `[a, b]`,
/// bisecting the worst segment until the summed error estimate is below `tol`.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> Result<f64> {
    integrate_with_breaks(f, &[a, b], tol)
}

/// Like [`integrate`], over consecutive pieces between sorted `points`.
/// Put kinks of the integrand at piece boundaries.
pub fn integrate_with_breaks(f: impl Fn(f64) -> f64, points: &[f64], tol: f64) -> Result<f64> {
    let mut heap = BinaryHeap::new();
    let mut err = 0.0;
    for w in points.windows(2) {
        if w[1] <= w[0] {
            continue;
        }
        let (v, e) = kronrod15(&f, w[0], w[1]);
        err += e;
        heap.push(Segment { a: w[0], b: w[1], value: v, err: e });
    }
    while err > tol {
        if heap.len() >= MAX_SEGMENTS {
            return Err(ConquerError::Quadrature { tol, estimate: err });
        }
        let s = heap.pop().unwrap();
        let m = 0.5 * (s.a + s.b);
        let (v1, e1) = kronrod15(&f, s.a, m);
        let (v2, e2) = kronrod15(&f, m, s.b);
        err += e1 + e2 - s.err;
        heap.push(Segment { a: s.a, b: m, value: v1, err: e1 });
        heap.push(Segment { a: m, b: s.b, value: v2, err: e2 });
    }
    // re-add in a fixed order to shed accumulated update rounding
    let mut segs = heap.into_vec();
    segs.sort_by(|x, y| x.a.total_cmp(&y.a));
    Ok(segs.iter().map(|s| s.value).sum())
}

fn reference_density(kind: KernelKind, t: f64) -> f64 {
    let inside = t.abs() <= 1.0;
    match kind {
        KernelKind::Uniform => if inside { 0.5 } else { 0.0 },
        KernelKind::Gaussian => (-t * t / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt(),
        KernelKind::Logistic => {
            let e = (-t.abs()).exp();
            e / (1.0 + e).powi(2)
        }
        KernelKind::Epanechnikov => if inside { 0.75 * (1.0 - t * t) } else { 0.0 },
        KernelKind::Triangular => if inside { 1.0 - t.abs() } else { 0.0 },
    }
}

/// `∫ ρ_τ(v) K_h(v - u) dv` by quadrature, substituting `v = u + h t` and
/// integrating `t` over the kernel support (`[-40, 40]` for the Gaussian
/// and logistic kernels) with breaks at every kink.
pub fn convolution_loss_quadrature(
    kind: KernelKind,
    tau: f64,
    h: f64,
    u: f64,
    budget: &OracleBudget,
) -> Result<f64> {
    check_tau(tau)?;
    check_bandwidth(h)?;
    let radius = kind.support_radius().unwrap_or(40.0);
    let mut pts = vec![-radius, radius, -u / h];
    if kind.support_radius().is_some() {
        pts.extend([-1.0, 0.0, 1.0]);
    }
    pts.retain(|t| t.abs() <= radius);
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    let rho = |v: f64| if v < 0.0 { v * (tau - 1.0) } else { v * tau };
    integrate_with_breaks(
        |t| rho(u + h * t) * reference_density(kind, t),
        &pts,
        budget.quadrature_tol,
    )
}

// ---------------------------------------------------------------------------
// Finite differences

/// Central differences `(f(β + εe_j) - f(β - εe_j)) / (2ε)`.
pub fn finite_diff_gradient(
    f: impl Fn(&Array1<f64>) -> f64,
    beta: ArrayView1<f64>,
    eps: f64,
) -> Result<Array1<f64>> {
    if !(eps > 0.0) {
        return Err(ConquerError::Domain(format!("step must be positive, got {eps}")));
    }
    let mut b = beta.to_owned();
    let mut out = Array1::zeros(beta.len());
    for j in 0..beta.len() {
        let orig = b[j];
        b[j] = orig + eps;
        let up = f(&b);
        b[j] = orig - eps;
        let down = f(&b);
        b[j] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(ConquerError::Domain(format!(
                "non-finite function value in coordinate {j}"
            )));
        }
        out[j] = (up - down) / (2.0 * eps);
    }
    Ok(out)
}

/// Central-difference Jacobian of a vector field; row `i` holds the
/// derivatives of output `i`.
pub fn finite_diff_jacobian(
    f: impl Fn(&Array1<f64>) -> Array1<f64>,
    beta: ArrayView1<f64>,
    eps: f64,
) -> Result<Array2<f64>> {
    if !(eps > 0.0) {
        return Err(ConquerError::Domain(format!("step must be positive, got {eps}")));
    }
    let mut b = beta.to_owned();
    let m = f(&b).len();
    let mut out = Array2::zeros((m, beta.len()));
    for j in 0..beta.len() {
        let orig = b[j];
        b[j] = orig + eps;
        let up = f(&b);
        b[j] = orig - eps;
        let down = f(&b);
        b[j] = orig;
        for i in 0..m {
            let d = (up[i] - down[i]) / (2.0 * eps);
            if !d.is_finite() {
                return Err(ConquerError::Domain(format!(
                    "non-finite function value in coordinate {j}"
                )));
            }
            out[[i, j]] = d;
        }
    }
    Ok(out)
}
