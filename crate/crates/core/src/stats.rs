//! Small statistics helpers for Monte Carlo summaries and distributional
//! comparisons.

use crate::error::{QcdError, Result};

/// Sample mean and standard error of the mean.
pub fn mean_stderr(xs: &[f64]) -> Option<(f64, f64)> {
    let n = xs.len();
    if n == 0 {
        return None;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Some((mean, f64::NAN));
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Some((mean, (var / n as f64).sqrt()))
}

fn sorted(xs: &[f64]) -> Result<Vec<f64>> {
    if xs.is_empty() {
        return Err(QcdError::Estimation("empty sample".into()));
    }
    if xs.iter().any(|x| x.is_nan()) {
        return Err(QcdError::Estimation("sample contains NaN".into()));
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    Ok(v)
}

fn ecdf(sorted: &[f64], x: f64) -> f64 {
    sorted.partition_point(|v| *v <= x) as f64 / sorted.len() as f64
}

/// Outcome of an empirical stochastic-order check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DominanceCheck {
    pub dominated: bool,
    /// Largest `F_b(x) - F_a(x)` over the evaluation points (zero if none
    /// is positive).
    pub max_violation: f64,
    pub slack: f64,
}

/// One-sided two-sample KS critical value at level `alpha`.
pub fn ks_one_sided_slack(n: usize, m: usize, alpha: f64) -> f64 {
    let c = (-(alpha.ln()) / 2.0).sqrt();
    c * ((n + m) as f64 / (n as f64 * m as f64)).sqrt()
}

/// Whether `a ≤_st b`, i.e. `F_a ≥ F_b` everywhere, up to the one-sided KS
/// slack at level `alpha`. `levels` are the evaluation points; `None` uses
/// every pooled sample value.
pub fn is_stochastically_dominated(
    samples_a: &[f64],
    samples_b: &[f64],
    levels: Option<&[f64]>,
    alpha: f64,
) -> Result<DominanceCheck> {
    let a = sorted(samples_a)?;
    let b = sorted(samples_b)?;
    let mut worst = 0.0f64;
    let mut check = |x: f64| worst = worst.max(ecdf(&b, x) - ecdf(&a, x));
    match levels {
        Some(grid) => grid.iter().for_each(|&x| check(x)),
        None => a.iter().chain(&b).for_each(|&x| check(x)),
    }
    let slack = ks_one_sided_slack(a.len(), b.len(), alpha);
    Ok(DominanceCheck { dominated: worst <= slack, max_violation: worst, slack })
}

/// Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(samples_a: &[f64], samples_b: &[f64]) -> Result<(f64, f64)> {
    let a = sorted(samples_a)?;
    let b = sorted(samples_b)?;
    let d = a
        .iter()
        .chain(&b)
        .map(|&x| (ecdf(&a, x) - ecdf(&b, x)).abs())
        .fold(0.0, f64::max);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let ne = (n * m / (n + m)).sqrt();
    let lambda = (ne + 0.12 + 0.11 / ne) * d;
    Ok((d, kolmogorov_q(lambda)))
}

/// Survival function of the Kolmogorov distribution.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..=200 {
        let term = 2.0 * if j % 2 == 1 { 1.0 } else { -1.0 } * (-2.0 * (j * j) as f64 * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

/// Ordinary least-squares fit `y = a + b x`; returns `(a, b, r²)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<(f64, f64, f64)> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    let b = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some((my - b * mx, b, r2))
}
