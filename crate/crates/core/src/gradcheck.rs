//! Central finite-difference checks of the hand-written gradients.
//!
//! Two families of instances:
//! - soft top-k alone: random scores, budget and upstream weights, checking
//!   the gradient with respect to the scores and to `k_hat`
//! - the full model under soft gating: random parameters (predictor output
//!   layer included), a random linear functional of `x_hat`, `k_hat` and the
//!   latents, checking every parameter group
//!
//! Errors are normwise per group: `||analytic - numeric|| / max(||analytic||,
//! ||numeric||, floor)`. Instances with a ReLU input within `1e-4` of zero are
//! redrawn, since central differences straddling the kink are not meaningful.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Result, SaeError};
use crate::model::{self, Gating, SaeParams, Upstream, GROUP_NAMES};
use crate::soft_topk::{soft_topk_backward, soft_topk_forward};

pub const SOFT_TOPK_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Temperatures below this are outside the differentiable regime.
pub const MIN_CHECKED_ALPHA: f64 = 1e-5;
const KINK_MARGIN: f64 = 1e-4;
/// Base central-difference step (scaled by `max(1, |x|)`).
const FD_STEP: f64 = 1e-6;
/// How far above the ideal central-difference roundoff the error floor sits.
/// Pure roundoff then scores about 1e-6, two decades under the tightest
/// tolerance.
const ROUNDOFF_MARGIN: f64 = 1e6;
const MAX_REDRAWS: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    /// Model input width.
    pub n: usize,
    /// Model latent count.
    pub d: usize,
    pub batch: usize,
    pub alphas: Vec<f64>,
    pub seed: u64,
    pub trials: usize,
    /// Latent counts for the standalone soft top-k instances.
    pub soft_topk_dims: Vec<usize>,
    /// Flip the sign of one analytic gradient (mutation sanity check).
    pub inject_sign_flip: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            n: 8,
            d: 32,
            batch: 2,
            alphas: vec![0.1, 1.0],
            seed: 0,
            trials: 100,
            soft_topk_dims: vec![4, 64],
            inject_sign_flip: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupResult {
    pub group: String,
    pub tolerance: f64,
    pub worst_rel_err: f64,
    /// Instance seed and temperature of the worst case, for replay.
    pub worst_seed: u64,
    pub worst_alpha: f64,
    pub checked: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub groups: Vec<GroupResult>,
    pub skipped_alphas: Vec<f64>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.worst_rel_err < g.tolerance)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GroupResult> {
        self.groups.iter().filter(|g| !(g.worst_rel_err < g.tolerance))
    }

    fn record(&mut self, group: &str, tolerance: f64, err: f64, seed: u64, alpha: f64) {
        let entry = match self.groups.iter_mut().position(|g| g.group == group) {
            Some(i) => &mut self.groups[i],
            None => {
                self.groups.push(GroupResult {
                    group: group.to_string(),
                    tolerance,
                    worst_rel_err: 0.0,
                    worst_seed: seed,
                    worst_alpha: alpha,
                    checked: 0,
                });
                self.groups.last_mut().expect("just pushed")
            }
        };
        entry.checked += 1;
        // NaN compares false, so it is recorded through the negated test.
        if !(err <= entry.worst_rel_err) {
            entry.worst_rel_err = err;
            entry.worst_seed = seed;
            entry.worst_alpha = alpha;
        }
    }
}

/// Error floor for a gradient of `len` entries taken by central differences
/// of a function whose value has magnitude `value`. Each difference carries
/// roundoff of about `eps * |value| / h`, so gradients much smaller than that
/// are compared in absolute terms.
pub fn fd_floor(value: f64, len: usize) -> f64 {
    let roundoff = f64::EPSILON * value.abs().max(1.0) / FD_STEP * (len as f64).sqrt();
    ROUNDOFF_MARGIN * roundoff
}

/// Normwise relative error, with the denominator floored at `floor`.
pub fn rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    diff / norm(analytic).max(norm(numeric)).max(floor)
}

fn central_difference(mut f: impl FnMut(f64) -> Result<f64>, x: f64) -> Result<f64> {
    let h = FD_STEP * x.abs().max(1.0);
    Ok((f(x + h)? - f(x - h)?) / (2.0 * h))
}

fn instance_seed(base: u64, family: u64, trial: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(family);
    rng.set_word_pos(2 * trial as u128);
    rng.random()
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// One soft top-k instance: returns `(err_z, err_khat)`.
pub fn check_soft_topk_instance(d: usize, alpha: f64, seed: u64, sign_flip: bool) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z: Vec<f64> = (0..d).map(|_| gaussian(&mut rng)).collect();
    let g: Vec<f64> = (0..d).map(|_| gaussian(&mut rng)).collect();
    let k_hat = rng.random_range(0.5..(d as f64 - 0.5));
    let loss = |z: &[f64], k: f64| -> Result<f64> {
        let out = soft_topk_forward(z, k, alpha)?;
        Ok(out.weights.iter().zip(&g).map(|(p, g)| p * g).sum())
    };
    let out = soft_topk_forward(&z, k_hat, alpha)?;
    let (mut grad_z, mut grad_k) = soft_topk_backward(&out, &g)?;
    if sign_flip {
        grad_z.iter_mut().for_each(|v| *v = -*v);
        grad_k = -grad_k;
    }
    let mut num_z = vec![0.0; d];
    for i in 0..d {
        let mut zz = z.clone();
        num_z[i] = central_difference(
            |v| {
                zz[i] = v;
                loss(&zz, k_hat)
            },
            z[i],
        )?;
    }
    let num_k = central_difference(|k| loss(&z, k), k_hat)?;
    let value = loss(&z, k_hat)?;
    Ok((
        rel_error(&grad_z, &num_z, fd_floor(value, d)),
        rel_error(&[grad_k], &[num_k], fd_floor(value, 1)),
    ))
}

/// Random model parameters with every group populated.
fn random_params(n: usize, d: usize, k_max: usize, rng: &mut ChaCha8Rng) -> SaeParams {
    let mut p = SaeParams::zeros(n, d, k_max);
    let scale = 1.0 / (n as f64).sqrt();
    for (name, group) in GROUP_NAMES.iter().zip(p.groups_mut()) {
        let s = match *name {
            "w_enc" | "w_dec" | "mlp_w1" => scale,
            "mlp_w2" => 1.0 / (d as f64).sqrt(),
            _ => 0.3,
        };
        for v in group.iter_mut() {
            *v = s * gaussian(rng);
        }
    }
    p
}

struct ModelInstance {
    params: SaeParams,
    x: Array2<f64>,
    g_xhat: Array2<f64>,
    g_khat: Array1<f64>,
    g_latents: Array2<f64>,
}

fn model_instance(opts: &GradcheckOptions, alpha: f64, seed: u64) -> Result<ModelInstance> {
    let (n, d, b) = (opts.n, opts.d, opts.batch);
    let k_max = (d / 2).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_REDRAWS {
        let params = random_params(n, d, k_max, &mut rng);
        let x = Array2::from_shape_fn((b, n), |_| gaussian(&mut rng));
        let trace = model::forward(&params, x.view(), Gating::Soft { alpha })?;
        let near_kink = trace
            .z_pre
            .iter()
            .chain(trace.mlp_hidden_pre.iter())
            .any(|v| v.abs() < KINK_MARGIN);
        if near_kink {
            continue;
        }
        return Ok(ModelInstance {
            params,
            x,
            g_xhat: Array2::from_shape_fn((b, n), |_| gaussian(&mut rng)),
            g_khat: Array1::from_shape_fn(b, |_| gaussian(&mut rng)),
            g_latents: Array2::from_shape_fn((b, d), |_| gaussian(&mut rng)),
        });
    }
    Err(SaeError::Internal(format!("could not draw a kink-free instance from seed {seed}")))
}

fn model_objective(inst: &ModelInstance, params: &SaeParams, alpha: f64) -> Result<f64> {
    let trace = model::forward(params, inst.x.view(), Gating::Soft { alpha })?;
    Ok((&trace.x_hat * &inst.g_xhat).sum() + trace.k_hat.dot(&inst.g_khat) + (&trace.z * &inst.g_latents).sum())
}

/// One full-model instance: normwise error per parameter group.
pub fn check_model_instance(opts: &GradcheckOptions, alpha: f64, seed: u64) -> Result<[f64; 8]> {
    let inst = model_instance(opts, alpha, seed)?;
    let trace = model::forward(&inst.params, inst.x.view(), Gating::Soft { alpha })?;
    let mut analytic = model::backward_full(
        &inst.params,
        &trace,
        Upstream {
            x_hat: inst.g_xhat.view(),
            k_hat: inst.g_khat.view(),
            latents: Some(inst.g_latents.view()),
        },
        false,
    )?;
    if opts.inject_sign_flip {
        analytic.mlp_w2.mapv_inplace(|v| -v);
    }
    let value = model_objective(&inst, &inst.params, alpha)?;
    let mut errors = [0.0; 8];
    let mut probe = inst.params.clone();
    for (gi, err) in errors.iter_mut().enumerate() {
        let len = inst.params.groups()[gi].len();
        let mut numeric = vec![0.0; len];
        for (j, num) in numeric.iter_mut().enumerate() {
            let original = inst.params.groups()[gi][j];
            *num = central_difference(
                |v| {
                    probe.groups_mut()[gi][j] = v;
                    model_objective(&inst, &probe, alpha)
                },
                original,
            )?;
            probe.groups_mut()[gi][j] = original;
        }
        *err = rel_error(analytic.groups()[gi], &numeric, fd_floor(value, len));
    }
    Ok(errors)
}

/// Run the whole suite. Temperatures below [`MIN_CHECKED_ALPHA`] are skipped
/// and listed in the report.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if opts.n == 0 || opts.d < 2 || opts.batch == 0 {
        return Err(SaeError::InvalidInput(format!(
            "gradcheck needs n >= 1, d >= 2, batch >= 1 (got n={}, d={}, batch={})",
            opts.n, opts.d, opts.batch
        )));
    }
    if let Some(&d) = opts.soft_topk_dims.iter().find(|&&d| d < 2) {
        return Err(SaeError::InvalidInput(format!("soft top-k check needs d >= 2, got {d}")));
    }
    let mut report = GradcheckReport {
        groups: Vec::new(),
        skipped_alphas: Vec::new(),
    };
    for &alpha in &opts.alphas {
        if !(alpha >= MIN_CHECKED_ALPHA) || !alpha.is_finite() {
            report.skipped_alphas.push(alpha);
            continue;
        }
        for &d in &opts.soft_topk_dims {
            for trial in 0..opts.trials {
                let seed = instance_seed(opts.seed, d as u64, trial);
                let (ez, ek) = check_soft_topk_instance(d, alpha, seed, opts.inject_sign_flip)?;
                report.record("soft_topk.z", SOFT_TOPK_TOLERANCE, ez, seed, alpha);
                report.record("soft_topk.k_hat", SOFT_TOPK_TOLERANCE, ek, seed, alpha);
            }
        }
        for trial in 0..opts.trials {
            let seed = instance_seed(opts.seed, u64::MAX, trial);
            let errors = check_model_instance(opts, alpha, seed)?;
            for (name, err) in GROUP_NAMES.iter().zip(errors) {
                report.record(&format!("model.{name}"), MODEL_TOLERANCE, err, seed, alpha);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_error_basics() {
        assert_eq!(rel_error(&[1.0, 2.0], &[1.0, 2.0], 1e-8), 0.0);
        assert!((rel_error(&[1.0], &[-1.0], 1e-8) - 2.0).abs() < 1e-15);
        assert_eq!(rel_error(&[0.0], &[0.0], 1e-8), 0.0);
        assert!((rel_error(&[1e-9], &[2e-9], 1e-6) - 1e-3).abs() < 1e-12);
        assert!(fd_floor(2.0, 4) > fd_floor(1.0, 4));
        assert_eq!(fd_floor(0.0, 1), fd_floor(1.0, 1));
    }

    #[test]
    fn small_suite_passes_and_fault_is_caught() {
        let opts = GradcheckOptions {
            n: 5,
            d: 10,
            trials: 3,
            ..Default::default()
        };
        let report = run_gradcheck(&opts).unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.groups.len(), 2 + 8);
        let faulty = run_gradcheck(&GradcheckOptions {
            inject_sign_flip: true,
            ..opts
        })
        .unwrap();
        assert!(!faulty.passed());
        assert!(faulty.failures().any(|g| g.group == "model.mlp_w2"));
    }

    #[test]
    fn tiny_alpha_is_skipped() {
        let opts = GradcheckOptions {
            alphas: vec![1e-6],
            trials: 1,
            ..Default::default()
        };
        let report = run_gradcheck(&opts).unwrap();
        assert_eq!(report.skipped_alphas, vec![1e-6]);
        assert!(report.groups.is_empty());
    }
}
