//! Differentiable soft top-k selection and its hard counterpart.
//!
//! The soft operator thresholds the scores through the standard Laplace CDF
//!
//! ```text
//! p_i = F((z_i - tau) / alpha),  F(t) = e^t / 2 (t < 0),  1 - e^-t / 2 (t >= 0)
//! ```
//!
//! where the threshold `tau` is the unique root of `sum_i p_i = k_hat`. The
//! budget `k_hat` may be any real number in `(0, d)`.
//!
//! Between two consecutive order statistics the sum constraint is a quadratic
//! in `u = e^{tau/alpha}`. The solver locates the right interval by binary
//! search over the sorted scores, then evaluates the positive root in log
//! space so that tiny temperatures (`alpha = 1e-6`) neither overflow nor
//! collapse to `ln 0`.
//!
//! Gradients follow from implicit differentiation of the constraint:
//! `dp_i/dz_j = delta_ij d_i - d_i d_j / sum(d)` and `dp_i/dk_hat = d_i / sum(d)`
//! with `d_i = F'((z_i - tau)/alpha) / alpha`.

use std::cmp::Ordering;

use crate::error::{Result, SaeError};

const BISECTION_MAX_ITERS: usize = 200;
const NEWTON_POLISH_ITERS: usize = 3;

/// Output of [`soft_topk_forward`], including what the backward pass needs.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTopKOutput {
    /// Selection weights `p`, summing to `k_hat`.
    pub weights: Vec<f64>,
    /// Threshold `tau`.
    pub threshold: f64,
    pub alpha: f64,
    /// `F'((z_i - tau)/alpha) / alpha`. Underflows to zero for scores more
    /// than ~700 temperatures away from the threshold.
    pub densities: Vec<f64>,
    pub density_sum: f64,
    /// Densities divided by their maximum; never all zero.
    pub relative_densities: Vec<f64>,
    pub relative_density_sum: f64,
}

/// Result of a hard top-k selection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardSelection {
    /// Selected positions, ascending.
    pub indices: Vec<usize>,
    pub mask: Vec<bool>,
}

impl HardSelection {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Standard Laplace CDF.
#[inline]
pub fn laplace_cdf(t: f64) -> f64 {
    if t < 0.0 {
        0.5 * t.exp()
    } else {
        1.0 - 0.5 * (-t).exp()
    }
}

/// Standard Laplace density.
#[inline]
pub fn laplace_pdf(t: f64) -> f64 {
    0.5 * (-t.abs()).exp()
}

fn validate(z: &[f64], k_hat: f64, alpha: f64) -> Result<()> {
    if z.is_empty() {
        return Err(SaeError::InvalidInput("soft top-k needs at least one score".into()));
    }
    if let Some(i) = z.iter().position(|v| !v.is_finite()) {
        return Err(SaeError::InvalidInput(format!("score {i} is not finite ({})", z[i])));
    }
    let d = z.len() as f64;
    if !(k_hat > 0.0 && k_hat < d) {
        return Err(SaeError::InvalidInput(format!(
            "k_hat must lie in (0, {d}), got {k_hat}"
        )));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(SaeError::InvalidInput(format!("alpha must be positive, got {alpha}")));
    }
    Ok(())
}

/// `sum_i F((z_i - tau)/alpha) - k_hat`, strictly decreasing in `tau`.
pub fn constraint_residual(z: &[f64], tau: f64, k_hat: f64, alpha: f64) -> f64 {
    z.iter().map(|&zi| laplace_cdf((zi - tau) / alpha)).sum::<f64>() - k_hat
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    hi + (lo - hi).exp().ln_1p()
}

fn sum_tolerance(d: usize) -> f64 {
    1e-9 * d as f64
}

/// Solve `sum_i F((z_i - tau)/alpha) = k_hat` for the threshold `tau`.
///
/// Closed-form solve on the bracketing order-statistic interval, polished by
/// at most a few guarded Newton steps. Falls back to bisection if the
/// closed form misses the tolerance, which does not happen for finite input.
pub fn solve_threshold(z: &[f64], k_hat: f64, alpha: f64) -> Result<f64> {
    let (anchor, offset) = solve_scaled(z, k_hat, alpha)?;
    Ok(anchor + alpha * offset)
}

/// Sum of weights for `tau = anchor + alpha * offset`, evaluated without
/// forming `tau`.
fn scaled_residual(z: &[f64], anchor: f64, offset: f64, k_hat: f64, alpha: f64) -> f64 {
    z.iter().map(|&zi| laplace_cdf((zi - anchor) / alpha - offset)).sum::<f64>() - k_hat
}

/// Threshold as `anchor + alpha * offset`. Keeping the offset separate
/// preserves precision when `alpha` is far below the spacing of doubles
/// near `tau`.
fn solve_scaled(z: &[f64], k_hat: f64, alpha: f64) -> Result<(f64, f64)> {
    validate(z, k_hat, alpha)?;
    let d = z.len();
    let tol = sum_tolerance(d);

    let mut sorted = z.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));

    // Largest m with residual(sorted[m-1]) <= 0: the top m scores sit at or
    // above the threshold. m = 0 means tau exceeds every score.
    let (mut lo, mut hi) = (0usize, d);
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        if constraint_residual(&sorted, sorted[mid - 1], k_hat, alpha) <= 0.0 {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    let m = lo;

    let anchor = if m >= 1 { sorted[m - 1] } else { sorted[0] };
    // With u = exp((tau - anchor)/alpha):  B u^2 - 2 (m - k_hat) u - A = 0.
    let ln_a = log_sum_exp(sorted[m..].iter().map(|&s| (s - anchor) / alpha));
    let ln_b = log_sum_exp(sorted[..m].iter().map(|&s| -(s - anchor) / alpha));
    let delta = m as f64 - k_hat;
    let ln_abs_delta = delta.abs().ln();
    let root_term = log_add_exp(ln_abs_delta, 0.5 * log_add_exp(2.0 * ln_abs_delta, ln_a + ln_b));
    let mut offset = if delta >= 0.0 {
        root_term - ln_b
    } else {
        ln_a - root_term
    };
    // Keep the threshold inside the bracketing interval [sorted[m], sorted[m-1]].
    if m >= 1 {
        offset = offset.min(0.0);
    }
    if m < d {
        offset = offset.max((sorted[m] - anchor) / alpha);
    }

    let mut residual = scaled_residual(z, anchor, offset, k_hat, alpha);
    for _ in 0..NEWTON_POLISH_ITERS {
        if residual.abs() <= f64::EPSILON * d as f64 {
            break;
        }
        let slope: f64 = z.iter().map(|&zi| laplace_pdf((zi - anchor) / alpha - offset)).sum();
        if !(slope > 0.0) {
            break;
        }
        let candidate = offset + residual / slope;
        let candidate_residual = scaled_residual(z, anchor, candidate, k_hat, alpha);
        if candidate.is_finite() && candidate_residual.abs() < residual.abs() {
            offset = candidate;
            residual = candidate_residual;
        } else {
            break;
        }
    }

    if offset.is_finite() && residual.abs() <= tol {
        Ok((anchor, offset))
    } else {
        Ok((solve_threshold_bisection(z, k_hat, alpha)?, 0.0))
    }
}

/// Guarded bisection on the monotone residual. Used as the fallback solver.
pub fn solve_threshold_bisection(z: &[f64], k_hat: f64, alpha: f64) -> Result<f64> {
    validate(z, k_hat, alpha)?;
    let min = z.iter().copied().fold(f64::INFINITY, f64::min);
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut lo = min - 40.0 * alpha;
    let mut hi = max + 40.0 * alpha;
    let mut widen = 40.0 * alpha;
    for _ in 0..64 {
        if constraint_residual(z, lo, k_hat, alpha) >= 0.0 {
            break;
        }
        widen *= 2.0;
        lo = min - widen;
    }
    widen = 40.0 * alpha;
    for _ in 0..64 {
        if constraint_residual(z, hi, k_hat, alpha) <= 0.0 {
            break;
        }
        widen *= 2.0;
        hi = max + widen;
    }
    if constraint_residual(z, lo, k_hat, alpha) < 0.0 || constraint_residual(z, hi, k_hat, alpha) > 0.0
    {
        return Err(SaeError::Internal(format!(
            "failed to bracket soft top-k threshold (k_hat={k_hat}, alpha={alpha})"
        )));
    }
    for _ in 0..BISECTION_MAX_ITERS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if constraint_residual(z, mid, k_hat, alpha) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Soft top-k weights for one score vector.
pub fn soft_topk_forward(z: &[f64], k_hat: f64, alpha: f64) -> Result<SoftTopKOutput> {
    let (anchor, offset) = solve_scaled(z, k_hat, alpha)?;
    let threshold = anchor + alpha * offset;
    let scaled: Vec<f64> = z.iter().map(|&zi| (zi - anchor) / alpha - offset).collect();
    let weights = scaled.iter().map(|&t| laplace_cdf(t)).collect();
    let densities: Vec<f64> = scaled.iter().map(|&t| laplace_pdf(t) / alpha).collect();
    let density_sum = densities.iter().sum();
    let nearest = scaled.iter().fold(f64::INFINITY, |acc, t| acc.min(t.abs()));
    let relative_densities: Vec<f64> = scaled.iter().map(|t| (nearest - t.abs()).exp()).collect();
    let relative_density_sum = relative_densities.iter().sum();
    Ok(SoftTopKOutput {
        weights,
        threshold,
        alpha,
        densities,
        density_sum,
        relative_densities,
        relative_density_sum,
    })
}

/// Vector-Jacobian product of [`soft_topk_forward`].
///
/// Returns `(grad_z, grad_k_hat)` for an upstream gradient on the weights.
pub fn soft_topk_backward(out: &SoftTopKOutput, grad_p: &[f64]) -> Result<(Vec<f64>, f64)> {
    if grad_p.len() != out.weights.len() {
        return Err(SaeError::DimensionMismatch {
            context: "soft_topk_backward grad_p",
            expected: out.weights.len(),
            actual: grad_p.len(),
        });
    }
    if !(out.relative_density_sum > 0.0) {
        return Err(SaeError::Internal(format!(
            "soft top-k density sum is not positive ({})",
            out.relative_density_sum
        )));
    }
    let weighted_mean = out
        .relative_densities
        .iter()
        .zip(grad_p)
        .map(|(r, g)| r * g)
        .sum::<f64>()
        / out.relative_density_sum;
    let grad_z = out
        .densities
        .iter()
        .zip(grad_p)
        .map(|(dens, g)| dens * (g - weighted_mean))
        .collect();
    Ok((grad_z, weighted_mean))
}

fn score_order(z: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b))
}

/// Exact top-k: the `k` largest scores, ties resolved toward the lower index.
pub fn hard_topk(z: &[f64], k: usize) -> Result<HardSelection> {
    let d = z.len();
    if k == 0 || k > d {
        return Err(SaeError::InvalidInput(format!("k must lie in [1, {d}], got {k}")));
    }
    let mut order: Vec<usize> = (0..d).collect();
    if k < d {
        order.select_nth_unstable_by(k - 1, score_order(z));
    }
    let mut indices = order[..k].to_vec();
    indices.sort_unstable();
    let mut mask = vec![false; d];
    for &i in &indices {
        mask[i] = true;
    }
    Ok(HardSelection { indices, mask })
}
