//! Training loop.
//!
//! A run has two phases. Before `total_steps - hard_topk_steps` the model
//! trains through the soft top-k at the annealed temperature. Afterwards the
//! sparsity predictor is frozen and latents are gated by an exact top-k on the
//! rounded `k_hat`, with gradients flowing only through selected entries.
//!
//! Batches are drawn with replacement from a ChaCha stream keyed by
//! `(seed, step)`, so a resumed run sees exactly the batches an uninterrupted
//! run would.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{PenaltyKind, ScheduleKind, TrainConfig, TrainMode};
use crate::error::{ensure_dim, Result, SaeError};
use crate::model::{self, Gating, SaeParams, Upstream, MLP_GROUPS};
use crate::objective::{self, DeadFeatureTracker, LossBreakdown};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Linear warmup to `lr`, constant until `decay_start`, linear decay to zero.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    let step = step.min(cfg.total_steps);
    if step < cfg.warmup_steps {
        cfg.lr * step as f64 / cfg.warmup_steps as f64
    } else if step < cfg.decay_start {
        cfg.lr
    } else {
        let span = (cfg.total_steps - cfg.decay_start).max(1) as f64;
        cfg.lr * (cfg.total_steps - step) as f64 / span
    }
}

fn anneal_fraction(step: u64, steps: u64) -> f64 {
    if steps == 0 {
        1.0
    } else {
        (step as f64 / steps as f64).min(1.0)
    }
}

fn interpolate(kind: ScheduleKind, start: f64, end: f64, frac: f64) -> f64 {
    match kind {
        ScheduleKind::None => end,
        ScheduleKind::Linear => start + (end - start) * frac,
        ScheduleKind::Geometric => start * (end / start).powf(frac),
    }
}

/// Soft top-k temperature at `step` (geometric from `alpha_init` to `alpha_final` by default).
pub fn alpha_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    let frac = anneal_fraction(step, cfg.alpha_anneal_steps);
    interpolate(cfg.alpha_schedule, cfg.alpha_init, cfg.alpha_final, frac)
}

/// Sparsity budget at `step` (linear from `k_max` down to `k_target` by default).
pub fn k_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    let frac = anneal_fraction(step, cfg.k_anneal_steps);
    interpolate(cfg.k_schedule, cfg.k_max as f64, cfg.k_target as f64, frac)
}

/// One bias-corrected Adam step on every group whose `update_mask` entry is set.
/// `step` is the 1-based update count.
pub fn adam_update(
    params: &mut SaeParams,
    grads: &SaeParams,
    m: &mut SaeParams,
    v: &mut SaeParams,
    step: u64,
    lr: f64,
    update_mask: [bool; 8],
) {
    let t = step.max(1) as i32;
    let bias1 = 1.0 - ADAM_BETA1.powi(t);
    let bias2 = 1.0 - ADAM_BETA2.powi(t);
    let groups = params
        .groups_mut()
        .into_iter()
        .zip(grads.groups())
        .zip(m.groups_mut())
        .zip(v.groups_mut());
    for (idx, (((p, g), m), v)) in groups.enumerate() {
        if !update_mask[idx] {
            continue;
        }
        for i in 0..p.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: SaeParams,
    pub adam_m: SaeParams,
    pub adam_v: SaeParams,
    /// Number of completed steps.
    pub step: u64,
    pub tracker: DeadFeatureTracker,
    /// Auxiliary randomness (decoder atom re-draws).
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(params: SaeParams, cfg: &TrainConfig) -> Self {
        let adam_m = params.zeros_like();
        let adam_v = params.zeros_like();
        let tracker = DeadFeatureTracker::new(params.d(), cfg.dead_threshold);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(u64::MAX);
        TrainState {
            params,
            adam_m,
            adam_v,
            step: 0,
            tracker,
            rng,
        }
    }

    /// Fresh state: parameters initialized from `cfg.seed` and the data mean.
    pub fn init(cfg: &TrainConfig, data_mean: ndarray::ArrayView1<'_, f64>) -> Result<Self> {
        cfg.validate()?;
        let params = model::init_params(cfg.n, cfg.d, cfg.k_max, data_mean, cfg.seed)?;
        Ok(Self::new(params, cfg))
    }

    /// Bytes of the predictor parameters, for freeze checks.
    pub fn mlp_fingerprint(&self) -> Vec<u64> {
        self.params.groups()[MLP_GROUPS]
            .iter()
            .flat_map(|g| g.iter().map(|v| v.to_bits()))
            .collect()
    }
}

/// Whether `step` trains with hard gating.
pub fn is_hard_step(step: u64, cfg: &TrainConfig) -> bool {
    cfg.mode == TrainMode::Topk || step >= cfg.hard_phase_start()
}

/// One optimization step on `batch` (`B x n`).
pub fn train_step(state: &mut TrainState, batch: ArrayView2<'_, f64>, cfg: &TrainConfig) -> Result<LossBreakdown> {
    ensure_dim("batch width", cfg.n, batch.ncols())?;
    if batch.nrows() == 0 {
        return Err(SaeError::InvalidInput("empty batch".into()));
    }
    let step = state.step;
    let lr = lr_schedule(step, cfg);
    let budget = k_schedule(step, cfg);
    let hard = is_hard_step(step, cfg);
    let gating = match (cfg.mode, hard) {
        (TrainMode::Topk, _) => Gating::Fixed { k: cfg.k_target },
        (TrainMode::Softsae, true) => Gating::Adaptive,
        (TrainMode::Softsae, false) => Gating::Soft {
            alpha: alpha_schedule(step, cfg),
        },
    };
    let freeze_mlp = hard;

    let trace = model::forward(&state.params, batch, gating)?;
    let (recon, grad_xhat) = objective::recon_loss(batch, trace.x_hat.view())?;
    let k_hat = trace.k_hat.as_slice().expect("standard layout");
    let (sparsity_penalty, penalty_grad) = match cfg.mode {
        TrainMode::Topk => (0.0, vec![0.0; k_hat.len()]),
        TrainMode::Softsae => match cfg.penalty_kind {
            PenaltyKind::Softplus => objective::sparsity_penalty(k_hat, budget, cfg.beta),
            PenaltyKind::Relu => (
                objective::sparsity_penalty_relu(k_hat, budget),
                objective::sparsity_penalty_relu_grad(k_hat, budget),
            ),
        },
    };
    let aux = if cfg.gamma > 0.0 && state.tracker.dead_count() > 0 {
        Some(objective::aux_loss(
            batch,
            trace.x_hat.view(),
            trace.z.view(),
            &state.tracker,
            cfg.k_aux,
            state.params.w_dec.view(),
        )?)
    } else {
        None
    };
    let aux_value = aux.as_ref().map_or(0.0, |a| a.loss);
    let breakdown = LossBreakdown {
        recon,
        sparsity_penalty,
        aux: aux_value,
        total: recon + cfg.lambda * sparsity_penalty + cfg.gamma * aux_value,
        mean_khat: objective::mean_khat(&trace),
    };
    if !breakdown.total.is_finite() {
        return Err(SaeError::NonFinite {
            step,
            detail: format!("{breakdown:?}"),
        });
    }

    let grad_khat: Array1<f64> = penalty_grad.iter().map(|g| cfg.lambda * g).collect();
    let grad_latents = aux.as_ref().map(|a| &a.grad_z * cfg.gamma);
    let mut grads = model::backward_full(
        &state.params,
        &trace,
        Upstream {
            x_hat: grad_xhat.view(),
            k_hat: grad_khat.view(),
            latents: grad_latents.as_ref().map(|g| g.view()),
        },
        freeze_mlp,
    )?;
    if let Some(aux) = &aux {
        grads.w_dec.scaled_add(cfg.gamma, &aux.grad_w_dec);
    }

    let mut mask = [true; 8];
    if freeze_mlp {
        for idx in MLP_GROUPS {
            mask[idx] = false;
        }
    }
    adam_update(
        &mut state.params,
        &grads,
        &mut state.adam_m,
        &mut state.adam_v,
        step + 1,
        lr,
        mask,
    );
    if cfg.decoder_renorm {
        model::renormalize_decoder(&mut state.params, &mut state.rng);
    }
    state.params.round_to_f32();
    state.adam_m.round_to_f32();
    state.adam_v.round_to_f32();
    if !state.params.all_finite() {
        return Err(SaeError::NonFinite {
            step,
            detail: "parameters became non-finite after the update".into(),
        });
    }

    let active = objective::active_features(&trace);
    state.tracker.update(&active, batch.nrows() as u64);
    state.step += 1;
    Ok(breakdown)
}

/// Row indices of the batch used at `step`.
pub fn batch_indices(seed: u64, step: u64, batch_size: usize, num_rows: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    (0..batch_size).map(|_| rng.random_range(0..num_rows)).collect()
}

pub fn gather_rows(data: ArrayView2<'_, f32>, indices: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((indices.len(), data.ncols()));
    for (mut row, &i) in out.rows_mut().into_iter().zip(indices) {
        row.zip_mut_with(&data.row(i), |o, &v| *o = v as f64);
    }
    out
}

pub fn to_f64(data: ArrayView2<'_, f32>) -> Array2<f64> {
    data.mapv(|v| v as f64)
}

/// Column means of an f32 activation matrix, accumulated in f64.
pub fn column_mean(data: ArrayView2<'_, f32>) -> Array1<f64> {
    let mut sum = Array1::<f64>::zeros(data.ncols());
    for row in data.rows() {
        sum.zip_mut_with(&row, |s, &v| *s += v as f64);
    }
    sum / data.nrows().max(1) as f64
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub lr: f64,
    pub alpha: f64,
    pub k_budget: f64,
    pub phase: String,
    pub recon: f64,
    pub sparsity_penalty: f64,
    pub aux: f64,
    pub total: f64,
    pub mean_khat: f64,
    pub dead_count: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub inference_l0: Option<f64>,
}

/// Mean number of selected latents on `probe` under inference gating.
pub fn probe_l0(params: &SaeParams, probe: ArrayView2<'_, f64>, cfg: &TrainConfig) -> Result<f64> {
    if probe.nrows() == 0 {
        return Ok(0.0);
    }
    let counts = match cfg.mode {
        TrainMode::Topk => return Ok(cfg.k_target as f64),
        TrainMode::Softsae => model::forward_inference(params, probe)?.2,
    };
    Ok(counts.iter().sum::<usize>() as f64 / counts.len() as f64)
}

/// Train from `state.step` up to (excluding) `until`, drawing batches from
/// `data` and reporting one [`MetricsRecord`] per step to `on_step`.
pub fn train_until(
    state: &mut TrainState,
    data: ArrayView2<'_, f32>,
    probe: Option<ArrayView2<'_, f64>>,
    cfg: &TrainConfig,
    until: u64,
    mut on_step: impl FnMut(&TrainState, &MetricsRecord) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    ensure_dim("training data width", cfg.n, data.ncols())?;
    if data.nrows() == 0 {
        return Err(SaeError::InvalidInput("training data is empty".into()));
    }
    let until = until.min(cfg.total_steps);
    while state.step < until {
        let step = state.step;
        let indices = batch_indices(cfg.seed, step, cfg.batch_size, data.nrows());
        let batch = gather_rows(data, &indices);
        let loss = train_step(state, batch.view(), cfg)?;
        let inference_l0 = match probe {
            Some(p) if step.is_multiple_of(cfg.probe_every) || step + 1 == cfg.total_steps => {
                Some(probe_l0(&state.params, p, cfg)?)
            }
            _ => None,
        };
        let record = MetricsRecord {
            step,
            lr: lr_schedule(step, cfg),
            alpha: alpha_schedule(step, cfg),
            k_budget: k_schedule(step, cfg),
            phase: if is_hard_step(step, cfg) { "hard" } else { "soft" }.to_string(),
            recon: loss.recon,
            sparsity_penalty: loss.sparsity_penalty,
            aux: loss.aux,
            total: loss.total,
            mean_khat: loss.mean_khat,
            dead_count: state.tracker.dead_count(),
            inference_l0,
        };
        on_step(state, &record)?;
    }
    Ok(())
}

/// Inference gating over a whole matrix in chunks: reconstructions, selected
/// counts and `k_hat` per row.
pub fn batched_inference(params: &SaeParams, data: ArrayView2<'_, f32>, cfg: &TrainConfig, chunk: usize) -> Result<(Array2<f64>, Vec<usize>, Vec<f64>)> {
    let mut x_hat = Array2::zeros((data.nrows(), data.ncols()));
    let mut counts = Vec::with_capacity(data.nrows());
    let mut k_hat = Vec::with_capacity(data.nrows());
    for (start, rows) in data.axis_chunks_iter(Axis(0), chunk.max(1)).enumerate().map(|(i, r)| (i * chunk.max(1), r)) {
        let x = to_f64(rows);
        let gating = match cfg.mode {
            TrainMode::Topk => Gating::Fixed { k: cfg.k_target },
            TrainMode::Softsae => Gating::Adaptive,
        };
        let trace = model::forward(params, x.view(), gating)?;
        x_hat
            .slice_mut(ndarray::s![start..start + rows.nrows(), ..])
            .assign(&trace.x_hat);
        counts.extend_from_slice(trace.selected_counts().expect("hard gating"));
        k_hat.extend(trace.k_hat.iter().copied());
    }
    Ok((x_hat, counts, k_hat))
}
