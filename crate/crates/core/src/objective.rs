//! Training objective: reconstruction, sparsity budget, auxiliary dead-latent loss.
//!
//! All terms are batch means. The total is
//! `recon + lambda * S(k_hat) + gamma * aux`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Result};
use crate::exec;
use crate::model::{ForwardTrace, Selection};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub sparsity_penalty: f64,
    pub aux: f64,
    pub total: f64,
    pub mean_khat: f64,
}

/// Mean squared reconstruction error per row and its gradient w.r.t. `x_hat`.
pub fn recon_loss(x: ArrayView2<'_, f64>, x_hat: ArrayView2<'_, f64>) -> Result<(f64, Array2<f64>)> {
    ensure_dim("recon rows", x.nrows(), x_hat.nrows())?;
    ensure_dim("recon cols", x.ncols(), x_hat.ncols())?;
    let batch = x.nrows().max(1) as f64;
    let diff = &x_hat - &x;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / batch;
    Ok((loss, diff * (2.0 / batch)))
}

fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Softplus budget `S = ln(1 + exp((mean(k_hat) - k) beta)) / beta` and `dS/dk_hat_b`.
pub fn sparsity_penalty(k_hat: &[f64], k_target: f64, beta: f64) -> (f64, Vec<f64>) {
    let batch = k_hat.len().max(1) as f64;
    let excess = k_hat.iter().sum::<f64>() / batch - k_target;
    let value = softplus(excess * beta) / beta;
    let slope = sigmoid(excess * beta) / batch;
    (value, vec![slope; k_hat.len()])
}

/// Hinge budget `max(mean(k_hat) - k, 0)`.
pub fn sparsity_penalty_relu(k_hat: &[f64], k_target: f64) -> f64 {
    let batch = k_hat.len().max(1) as f64;
    (k_hat.iter().sum::<f64>() / batch - k_target).max(0.0)
}

/// Hinge budget gradient (zero at and below the budget).
pub fn sparsity_penalty_relu_grad(k_hat: &[f64], k_target: f64) -> Vec<f64> {
    let batch = k_hat.len().max(1) as f64;
    let active = k_hat.iter().sum::<f64>() / batch > k_target;
    vec![if active { 1.0 / batch } else { 0.0 }; k_hat.len()]
}

/// Per-latent count of tokens since the latent last fired.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeadFeatureTracker {
    pub tokens_since_fire: Vec<u64>,
    pub dead_threshold: u64,
}

impl DeadFeatureTracker {
    pub fn new(d: usize, dead_threshold: u64) -> Self {
        DeadFeatureTracker {
            tokens_since_fire: vec![0; d],
            dead_threshold,
        }
    }

    pub fn is_dead(&self, i: usize) -> bool {
        self.tokens_since_fire[i] >= self.dead_threshold
    }

    pub fn dead_mask(&self) -> Vec<bool> {
        (0..self.tokens_since_fire.len()).map(|i| self.is_dead(i)).collect()
    }

    pub fn dead_count(&self) -> usize {
        (0..self.tokens_since_fire.len()).filter(|&i| self.is_dead(i)).count()
    }

    /// Reset active latents, age the rest by `tokens_in_batch`.
    pub fn update(&mut self, active: &[bool], tokens_in_batch: u64) {
        debug_assert_eq!(active.len(), self.tokens_since_fire.len());
        for (count, &on) in self.tokens_since_fire.iter_mut().zip(active) {
            if on {
                *count = 0;
            } else {
                *count = count.saturating_add(tokens_in_batch);
            }
        }
    }
}

/// Latents that fired anywhere in the batch: selected with a positive value
/// under hard gating, or soft weight above one half with a positive value.
pub fn active_features(trace: &ForwardTrace) -> Vec<bool> {
    let d = trace.z.ncols();
    let mut active = vec![false; d];
    match &trace.selection {
        Selection::Hard { selections, .. } => {
            for (b, sel) in selections.iter().enumerate() {
                for &i in &sel.indices {
                    if trace.z[[b, i]] > 0.0 {
                        active[i] = true;
                    }
                }
            }
        }
        Selection::Soft(_) => {
            for (g_row, z_row) in trace.gates.rows().into_iter().zip(trace.z.rows()) {
                for i in 0..d {
                    if g_row[i] > 0.5 && z_row[i] > 0.0 {
                        active[i] = true;
                    }
                }
            }
        }
    }
    active
}

#[derive(Debug, Clone)]
pub struct AuxOutput {
    pub loss: f64,
    /// Gradient on the post-ReLU latents, `B x d`.
    pub grad_z: Array2<f64>,
    /// Gradient on the decoder, `d x n` (nonzero only on selected dead rows).
    pub grad_w_dec: Array2<f64>,
    /// Selected dead latents per row.
    pub selected: Vec<Vec<usize>>,
}

/// Auxiliary loss: per row, the `k_aux` largest positive latents among dead
/// features reconstruct the detached residual `x - x_hat` through their
/// decoder atoms; the loss is the batch mean of `||r - e_hat||^2`.
pub fn aux_loss(
    x: ArrayView2<'_, f64>,
    x_hat: ArrayView2<'_, f64>,
    z: ArrayView2<'_, f64>,
    tracker: &DeadFeatureTracker,
    k_aux: usize,
    w_dec: ArrayView2<'_, f64>,
) -> Result<AuxOutput> {
    let (batch, n) = x.dim();
    let d = w_dec.nrows();
    ensure_dim("aux x_hat rows", batch, x_hat.nrows())?;
    ensure_dim("aux x_hat cols", n, x_hat.ncols())?;
    ensure_dim("aux z rows", batch, z.nrows())?;
    ensure_dim("aux z cols", d, z.ncols())?;
    ensure_dim("aux w_dec cols", n, w_dec.ncols())?;
    ensure_dim("aux tracker", d, tracker.tokens_since_fire.len())?;

    let mut out = AuxOutput {
        loss: 0.0,
        grad_z: Array2::zeros((batch, d)),
        grad_w_dec: Array2::zeros((d, n)),
        selected: vec![Vec::new(); batch],
    };
    let dead = tracker.dead_mask();
    if k_aux == 0 || !dead.iter().any(|&v| v) {
        return Ok(out);
    }

    let scale = 1.0 / batch.max(1) as f64;
    let rows = exec::map_indices(batch, |b| {
        let z_row = z.row(b);
        let mut candidates: Vec<usize> = (0..d).filter(|&i| dead[i] && z_row[i] > 0.0).collect();
        if candidates.len() > k_aux {
            candidates.select_nth_unstable_by(k_aux - 1, |&a, &c| z_row[c].total_cmp(&z_row[a]).then(a.cmp(&c)));
            candidates.truncate(k_aux);
        }
        candidates.sort_unstable();
        let mut err: Array1<f64> = &x.row(b) - &x_hat.row(b);
        for &i in &candidates {
            err.scaled_add(-z_row[i], &w_dec.row(i));
        }
        let loss = err.dot(&err) * scale;
        (candidates, err, loss)
    });

    for (b, (selected, err, loss)) in rows.into_iter().enumerate() {
        out.loss += loss;
        // d loss / d e_hat = -2 (r - e_hat) / B
        let grad_e = err * (-2.0 * scale);
        for &i in &selected {
            out.grad_z[[b, i]] = grad_e.dot(&w_dec.row(i));
            out.grad_w_dec.row_mut(i).scaled_add(z[[b, i]], &grad_e);
        }
        out.selected[b] = selected;
    }
    Ok(out)
}

/// Mean of `k_hat` over the batch.
pub fn mean_khat(trace: &ForwardTrace) -> f64 {
    trace.k_hat.mean_axis(Axis(0)).map(|m| m.into_scalar()).unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn recon_cases() {
        let x = array![[1.0, 0.0]];
        let (l, g) = recon_loss(x.view(), x.view()).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
        let (l, g) = recon_loss(x.view(), array![[0.0, 0.0]].view()).unwrap();
        assert_eq!(l, 1.0);
        assert_eq!(g, array![[-2.0, 0.0]]);
        assert!(recon_loss(x.view(), array![[0.0]].view()).is_err());
    }

    #[test]
    fn recon_matches_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
        let xh = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
        let (l, g) = recon_loss(x.view(), xh.view()).unwrap();
        let mut expected = 0.0;
        for b in 0..3 {
            for j in 0..4 {
                expected += (x[[b, j]] - xh[[b, j]]).powi(2);
                assert!((g[[b, j]] - 2.0 * (xh[[b, j]] - x[[b, j]]) / 3.0).abs() < 1e-15);
            }
        }
        assert!((l - expected / 3.0).abs() < 1e-9);
    }

    #[test]
    fn softplus_penalty_values() {
        let (s, g) = sparsity_penalty(&[3.0, 5.0], 4.0, 5.0);
        assert!((s - std::f64::consts::LN_2 / 5.0).abs() < 1e-15);
        assert!((s - 0.138_629_436_111_989_06).abs() < 1e-15);
        assert!(g.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let (s, _) = sparsity_penalty(&[14.0], 4.0, 5.0);
        assert!((s - 10.0).abs() < 1e-9);
        let (s, _) = sparsity_penalty(&[-6.0], 4.0, 5.0);
        let expected = (-50.0f64).exp().ln_1p() / 5.0;
        assert!((s - expected).abs() < 1e-30);
        assert!((s - 3.857_499e-23).abs() < 1e-27);
    }

    #[test]
    fn relu_penalty_values() {
        assert_eq!(sparsity_penalty_relu(&[1.0, 2.0], 3.0), 0.0);
        assert_eq!(sparsity_penalty_relu(&[6.0, 7.0], 3.0), 3.5);
        assert_eq!(sparsity_penalty_relu_grad(&[6.0, 7.0], 3.0), vec![0.5, 0.5]);
    }

    #[test]
    fn tracker_accumulates_and_resets() {
        let mut t = DeadFeatureTracker::new(3, 10);
        t.update(&[true, false, false], 4);
        t.update(&[false, false, true], 4);
        assert_eq!(t.tokens_since_fire, vec![4, 8, 0]);
        assert_eq!(t.dead_count(), 0);
        t.update(&[false, false, false], 4);
        assert_eq!(t.dead_mask(), vec![false, true, false]);
        t.update(&[true, true, true], 4);
        assert_eq!(t.tokens_since_fire, vec![0, 0, 0]);
    }

    #[test]
    fn aux_without_dead_features_is_zero() {
        let x = array![[1.0, 2.0]];
        let z = array![[1.0, 0.5, 0.0]];
        let w = Array2::ones((3, 2));
        let tracker = DeadFeatureTracker::new(3, 100);
        let out = aux_loss(x.view(), array![[0.0, 0.0]].view(), z.view(), &tracker, 2, w.view()).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad_z.iter().all(|&v| v == 0.0));
        assert!(out.grad_w_dec.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn aux_zero_residual_and_zero_latents() {
        let x = array![[1.0, 2.0]];
        let z = array![[0.0, 0.0, 0.0]];
        let w = Array2::ones((3, 2));
        let mut tracker = DeadFeatureTracker::new(3, 1);
        tracker.update(&[false; 3], 5);
        let out = aux_loss(x.view(), x.view(), z.view(), &tracker, 2, w.view()).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn aux_exact_fit_is_a_minimum() {
        let x = array![[1.0, 2.0, -1.0]];
        let x_hat = array![[0.5, 1.0, 0.0]];
        let residual = &x - &x_hat;
        let mut w = Array2::<f64>::zeros((2, 3));
        w.row_mut(1).assign(&residual.row(0));
        w.row_mut(0).assign(&array![0.3, 0.3, 0.3]);
        let z = array![[0.7, 1.0]];
        let mut tracker = DeadFeatureTracker::new(2, 1);
        tracker.update(&[true, false], 1);
        let out = aux_loss(x.view(), x_hat.view(), z.view(), &tracker, 4, w.view()).unwrap();
        assert_eq!(out.selected[0], vec![1]);
        assert!(out.loss.abs() < 1e-30);
        for (dz, dj) in [(0.01, 0), (-0.01, 0), (0.0, 1)] {
            let mut z2 = z.clone();
            z2[[0, 1]] += dz;
            let mut w2 = w.clone();
            if dz == 0.0 {
                w2[[1, dj]] += 0.01;
            }
            let perturbed = aux_loss(x.view(), x_hat.view(), z2.view(), &tracker, 4, w2.view()).unwrap();
            assert!(perturbed.loss > out.loss);
        }
    }

    #[test]
    fn aux_gradient_reaches_dead_rows() {
        let x = array![[1.0, -0.5]];
        let z = array![[0.8, 0.4, 0.9]];
        let w = array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]];
        let mut tracker = DeadFeatureTracker::new(3, 2);
        tracker.update(&[true, false, false], 3);
        let out = aux_loss(x.view(), array![[0.0, 0.0]].view(), z.view(), &tracker, 1, w.view()).unwrap();
        assert_eq!(out.selected[0], vec![2]);
        assert!(out.grad_w_dec.row(2).iter().any(|&v| v != 0.0));
        assert!(out.grad_w_dec.row(0).iter().all(|&v| v == 0.0));
        assert!(out.grad_w_dec.row(1).iter().all(|&v| v == 0.0));
        assert!(out.grad_z[[0, 2]] != 0.0);
    }
}
