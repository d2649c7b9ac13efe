//! Scalar distribution helpers and robust summaries.

use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use statrs::function::erf::erfc;

use crate::error::{ConquerError, Result};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal density.
#[inline]
pub fn norm_pdf(u: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * u * u).exp()
}

/// Standard normal distribution function, through `erfc` so both tails
/// keep full relative precision.
#[inline]
pub fn norm_cdf(u: f64) -> f64 {
    0.5 * erfc(-u / std::f64::consts::SQRT_2)
}

/// Standard normal quantile function.
pub fn norm_ppf(q: f64) -> f64 {
    // Normal::new(0, 1) cannot fail.
    Normal::new(0.0, 1.0).unwrap().inverse_cdf(q)
}

/// Quantile of Student's t with `df` degrees of freedom (any real `df > 0`).
pub fn student_t_ppf(df: f64, q: f64) -> Result<f64> {
    let dist = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| ConquerError::Domain(format!("t distribution with df={df}: {e}")))?;
    Ok(dist.inverse_cdf(q))
}

/// Median; even lengths average the two central order statistics.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(ConquerError::Domain("median of an empty vector".into()));
    }
    let mut buf = values.to_vec();
    Ok(median_in_place(&mut buf))
}

pub(crate) fn median_in_place(buf: &mut [f64]) -> f64 {
    let n = buf.len();
    let mid = n / 2;
    let (_, upper, _) = buf.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower = buf[..mid]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// Median absolute deviation from the median (unscaled).
pub fn mad(values: &[f64]) -> Result<f64> {
    let mut buf = values.to_vec();
    mad_in_place(&mut buf)
}

pub(crate) fn mad_in_place(buf: &mut [f64]) -> Result<f64> {
    if buf.is_empty() {
        return Err(ConquerError::Domain("MAD of an empty vector".into()));
    }
    let m = median_in_place(buf);
    for v in buf.iter_mut() {
        *v = (*v - m).abs();
    }
    Ok(median_in_place(buf))
}

/// Pairwise summation; error grows like `log n` rather than `n`.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 64;
    if values.len() <= BLOCK {
        values.iter().sum()
    } else {
        let (a, b) = values.split_at(values.len() / 2);
        pairwise_sum(a) + pairwise_sum(b)
    }
}

/// Sample standard deviation with the `n - 1` denominator.
pub fn sample_sd(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (ss / (n - 1) as f64).sqrt()
}
