//! Autoencoder parameters, forward pass and hand-derived backward pass.
//!
//! Layout: every weight matrix is `d x n` (latent-by-input), so row `i` of
//! `w_enc` is the encoder direction of latent `i` and row `i` of `w_dec` is
//! its dictionary atom. Batches are row-major `B x n`.
//!
//! ```text
//! xc    = x - b_pre
//! z     = relu(xc . w_enc^T + b_enc)
//! k_hat = sigmoid(mlp_w2 . relu(xc . mlp_w1^T + mlp_b1) + mlp_b2) * k_max
//! f     = gate(z, k_hat) (.) z
//! x_hat = f . w_dec + b_pre
//! ```

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rand::SeedableRng;

use crate::error::{ensure_dim, Result, SaeError};
use crate::exec;
use crate::soft_topk::{hard_topk, soft_topk_backward, soft_topk_forward, HardSelection, SoftTopKOutput};

/// Sigmoid outputs are kept this far from 0 and 1 so that `k_hat` stays
/// strictly inside `(0, k_max)`.
const SIGMOID_MARGIN: f64 = 1e-15;

/// All learnable tensors. Also used as the gradient record and for the
/// optimizer moments, which share the shape.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams {
    pub w_enc: Array2<f64>,
    pub b_enc: Array1<f64>,
    pub b_pre: Array1<f64>,
    pub w_dec: Array2<f64>,
    pub mlp_w1: Array2<f64>,
    pub mlp_b1: Array1<f64>,
    pub mlp_w2: Array1<f64>,
    pub mlp_b2: f64,
    pub k_max: usize,
}

/// Parameter group names in checkpoint / iteration order.
pub const GROUP_NAMES: [&str; 8] = [
    "w_enc", "b_enc", "b_pre", "w_dec", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2",
];

/// Indices of the sparsity-predictor groups within [`GROUP_NAMES`].
pub const MLP_GROUPS: std::ops::Range<usize> = 4..8;

impl SaeParams {
    pub fn zeros(n: usize, d: usize, k_max: usize) -> Self {
        SaeParams {
            w_enc: Array2::zeros((d, n)),
            b_enc: Array1::zeros(d),
            b_pre: Array1::zeros(n),
            w_dec: Array2::zeros((d, n)),
            mlp_w1: Array2::zeros((d, n)),
            mlp_b1: Array1::zeros(d),
            mlp_w2: Array1::zeros(d),
            mlp_b2: 0.0,
            k_max,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.n(), self.d(), self.k_max)
    }

    pub fn n(&self) -> usize {
        self.w_enc.ncols()
    }

    pub fn d(&self) -> usize {
        self.w_enc.nrows()
    }

    /// Flat views of every group in [`GROUP_NAMES`] order.
    pub fn groups(&self) -> [&[f64]; 8] {
        [
            self.w_enc.as_slice().expect("standard layout"),
            self.b_enc.as_slice().expect("standard layout"),
            self.b_pre.as_slice().expect("standard layout"),
            self.w_dec.as_slice().expect("standard layout"),
            self.mlp_w1.as_slice().expect("standard layout"),
            self.mlp_b1.as_slice().expect("standard layout"),
            self.mlp_w2.as_slice().expect("standard layout"),
            std::slice::from_ref(&self.mlp_b2),
        ]
    }

    pub fn groups_mut(&mut self) -> [&mut [f64]; 8] {
        [
            self.w_enc.as_slice_mut().expect("standard layout"),
            self.b_enc.as_slice_mut().expect("standard layout"),
            self.b_pre.as_slice_mut().expect("standard layout"),
            self.w_dec.as_slice_mut().expect("standard layout"),
            self.mlp_w1.as_slice_mut().expect("standard layout"),
            self.mlp_b1.as_slice_mut().expect("standard layout"),
            self.mlp_w2.as_slice_mut().expect("standard layout"),
            std::slice::from_mut(&mut self.mlp_b2),
        ]
    }

    pub fn num_values(&self) -> usize {
        self.groups().iter().map(|g| g.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.groups().iter().all(|g| g.iter().all(|v| v.is_finite()))
    }

    /// Round every value to the nearest 32-bit float. Persistent training
    /// state is kept f32-representable so checkpoints are lossless.
    pub fn round_to_f32(&mut self) {
        for group in self.groups_mut() {
            for v in group.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    fn check_input(&self, x: &ArrayView2<'_, f64>) -> Result<()> {
        ensure_dim("input columns", self.n(), x.ncols())
    }
}

fn unit_normal_vector(n: usize, rng: &mut impl Rng) -> Array1<f64> {
    loop {
        let v: Array1<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.dot(&v).sqrt();
        if norm > 1e-6 {
            return v / norm;
        }
    }
}

/// Initialize parameters.
///
/// Decoder atoms are Gaussian directions normalized to unit length; the
/// encoder starts as the decoder's transpose (identical rows in this layout);
/// the predictor's first layer copies the encoder and its output layer is
/// zero, so every input starts at `k_hat = k_max / 2`.
pub fn init_params(n: usize, d: usize, k_max: usize, data_mean: ArrayView1<'_, f64>, seed: u64) -> Result<SaeParams> {
    if n == 0 || d == 0 {
        return Err(SaeError::InvalidInput("n and d must be positive".into()));
    }
    if k_max == 0 || k_max > d {
        return Err(SaeError::InvalidInput(format!("k_max must lie in [1, {d}], got {k_max}")));
    }
    ensure_dim("data_mean", n, data_mean.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = SaeParams::zeros(n, d, k_max);
    for mut row in params.w_dec.rows_mut() {
        row.assign(&unit_normal_vector(n, &mut rng));
    }
    params.w_enc.assign(&params.w_dec);
    params.mlp_w1.assign(&params.w_enc);
    params.b_pre.assign(&data_mean);
    params.round_to_f32();
    Ok(params)
}

/// Rescale every decoder atom to unit norm; atoms with norm below `1e-12`
/// are replaced by a fresh random unit vector.
pub fn renormalize_decoder(params: &mut SaeParams, rng: &mut impl Rng) {
    let n = params.n();
    for mut row in params.w_dec.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm < 1e-12 {
            row.assign(&unit_normal_vector(n, rng));
        } else {
            row /= norm;
        }
    }
}

#[inline]
fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

fn centered(params: &SaeParams, x: &ArrayView2<'_, f64>) -> Array2<f64> {
    x - &params.b_pre
}

/// Stage 1: `z_pre = (x - b_pre) w_enc^T + b_enc`, `z = relu(z_pre)`.
pub fn encode(params: &SaeParams, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    params.check_input(&x)?;
    let xc = centered(params, &x);
    Ok(encode_centered(params, &xc))
}

fn encode_centered(params: &SaeParams, xc: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let z_pre = xc.dot(&params.w_enc.t()) + &params.b_enc;
    let z = z_pre.mapv(|v| v.max(0.0));
    (z_pre, z)
}

struct MlpForward {
    hidden_pre: Array2<f64>,
    hidden: Array2<f64>,
    sigmoid: Array1<f64>,
    k_hat: Array1<f64>,
}

fn mlp_forward(params: &SaeParams, xc: &Array2<f64>) -> MlpForward {
    let hidden_pre = xc.dot(&params.mlp_w1.t()) + &params.mlp_b1;
    let hidden = hidden_pre.mapv(|v| v.max(0.0));
    let logits = hidden.dot(&params.mlp_w2) + params.mlp_b2;
    let sigmoid = logits.mapv(sigmoid);
    let k_max = params.k_max as f64;
    let k_hat = sigmoid.mapv(|s| s.clamp(SIGMOID_MARGIN, 1.0 - SIGMOID_MARGIN) * k_max);
    MlpForward {
        hidden_pre,
        hidden,
        sigmoid,
        k_hat,
    }
}

/// Per-row sparsity level `k_hat = sigmoid(MLP(x)) * k_max`, strictly inside `(0, k_max)`.
pub fn predict_khat(params: &SaeParams, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    params.check_input(&x)?;
    let xc = centered(params, &x);
    Ok(mlp_forward(params, &xc).k_hat)
}

/// Inference-time rounding: round half up, then clamp to `[1, k_max]`.
pub fn round_khat(k_hat: f64, k_max: usize) -> usize {
    let rounded = (k_hat + 0.5).floor();
    (rounded.max(1.0) as usize).min(k_max)
}

/// How latents are gated between encoder and decoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gating {
    /// Soft top-k with the predicted `k_hat` at temperature `alpha` (training).
    Soft { alpha: f64 },
    /// Hard top-k with the rounded predicted `k_hat` (inference and the final training phase).
    Adaptive,
    /// Hard top-k with a constant `k` and no predictor (TopK baseline).
    Fixed { k: usize },
}

#[derive(Debug, Clone)]
pub enum Selection {
    Soft(Vec<SoftTopKOutput>),
    Hard {
        selections: Vec<HardSelection>,
        k_rounded: Vec<usize>,
    },
}

/// Every intermediate of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub gating: Gating,
    pub x: Array2<f64>,
    pub x_centered: Array2<f64>,
    pub z_pre: Array2<f64>,
    pub z: Array2<f64>,
    /// Predicted budget per row; for [`Gating::Fixed`] this is the constant `k`.
    pub k_hat: Array1<f64>,
    pub mlp_hidden_pre: Array2<f64>,
    pub mlp_hidden: Array2<f64>,
    pub mlp_sigmoid: Array1<f64>,
    /// Soft weights or 0/1 masks, `B x d`.
    pub gates: Array2<f64>,
    pub selection: Selection,
    /// `gates (.) z`.
    pub f: Array2<f64>,
    pub x_hat: Array2<f64>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.x.nrows()
    }

    /// Number of selected latents per row (hard gating only).
    pub fn selected_counts(&self) -> Option<&[usize]> {
        match &self.selection {
            Selection::Hard { k_rounded, .. } => Some(k_rounded),
            Selection::Soft(_) => None,
        }
    }
}

/// Run the full forward pass under the given gating.
pub fn forward(params: &SaeParams, x: ArrayView2<'_, f64>, gating: Gating) -> Result<ForwardTrace> {
    params.check_input(&x)?;
    let d = params.d();
    let batch = x.nrows();
    let xc = centered(params, &x);
    let (z_pre, z) = encode_centered(params, &xc);

    let mlp = match gating {
        Gating::Fixed { k } => {
            if k == 0 || k > d {
                return Err(SaeError::InvalidInput(format!("k must lie in [1, {d}], got {k}")));
            }
            MlpForward {
                hidden_pre: Array2::zeros((batch, 0)),
                hidden: Array2::zeros((batch, 0)),
                sigmoid: Array1::zeros(batch),
                k_hat: Array1::from_elem(batch, k as f64),
            }
        }
        _ => mlp_forward(params, &xc),
    };

    let mut gates = Array2::<f64>::zeros((batch, d));
    let selection = match gating {
        Gating::Soft { alpha } => {
            let outs = exec::map_indices(batch, |b| {
                soft_topk_forward(z.row(b).as_slice().expect("standard layout"), mlp.k_hat[b], alpha)
            });
            let outs = outs.into_iter().collect::<Result<Vec<_>>>()?;
            for (mut row, out) in gates.rows_mut().into_iter().zip(&outs) {
                row.assign(&ArrayView1::from(&out.weights));
            }
            Selection::Soft(outs)
        }
        Gating::Adaptive | Gating::Fixed { .. } => {
            let k_rounded: Vec<usize> = match gating {
                Gating::Fixed { k } => vec![k; batch],
                _ => mlp.k_hat.iter().map(|&k| round_khat(k, params.k_max)).collect(),
            };
            let selections = exec::map_indices(batch, |b| {
                hard_topk(z.row(b).as_slice().expect("standard layout"), k_rounded[b])
            });
            let selections = selections.into_iter().collect::<Result<Vec<_>>>()?;
            for (mut row, sel) in gates.rows_mut().into_iter().zip(&selections) {
                for &i in &sel.indices {
                    row[i] = 1.0;
                }
            }
            Selection::Hard {
                selections,
                k_rounded,
            }
        }
    };

    let f = &gates * &z;
    let x_hat = f.dot(&params.w_dec) + &params.b_pre;
    Ok(ForwardTrace {
        gating,
        x: x.to_owned(),
        x_centered: xc,
        z_pre,
        z,
        k_hat: mlp.k_hat,
        mlp_hidden_pre: mlp.hidden_pre,
        mlp_hidden: mlp.hidden,
        mlp_sigmoid: mlp.sigmoid,
        gates,
        selection,
        f,
        x_hat,
    })
}

/// Training forward pass with soft top-k at temperature `alpha`.
pub fn forward_train(params: &SaeParams, x: ArrayView2<'_, f64>, alpha: f64) -> Result<ForwardTrace> {
    forward(params, x, Gating::Soft { alpha })
}

/// Inference: hard top-k with `k_hat` rounded half up and clamped to `[1, k_max]`.
pub fn forward_inference(
    params: &SaeParams,
    x: ArrayView2<'_, f64>,
) -> Result<(Array2<f64>, Vec<HardSelection>, Vec<usize>)> {
    into_hard_outputs(forward(params, x, Gating::Adaptive)?)
}

/// TopK baseline: constant `k` for every row; the predictor is ignored.
pub fn forward_topk_baseline(
    params: &SaeParams,
    x: ArrayView2<'_, f64>,
    k: usize,
) -> Result<(Array2<f64>, Vec<HardSelection>)> {
    let (x_hat, selections, _) = into_hard_outputs(forward(params, x, Gating::Fixed { k })?)?;
    Ok((x_hat, selections))
}

fn into_hard_outputs(trace: ForwardTrace) -> Result<(Array2<f64>, Vec<HardSelection>, Vec<usize>)> {
    match trace.selection {
        Selection::Hard {
            selections,
            k_rounded,
        } => Ok((trace.x_hat, selections, k_rounded)),
        Selection::Soft(_) => Err(SaeError::Internal("expected a hard selection".into())),
    }
}

/// Upstream gradients entering [`backward_full`].
pub struct Upstream<'a> {
    pub x_hat: ArrayView2<'a, f64>,
    pub k_hat: ArrayView1<'a, f64>,
    /// Extra gradient on the post-ReLU latents `z` (auxiliary loss).
    pub latents: Option<ArrayView2<'a, f64>>,
}

/// Gradients of `<grad_x_hat, x_hat> + <grad_khat_extra, k_hat>` with respect
/// to every parameter. With `freeze_mlp` the predictor groups receive exactly
/// zero gradient and `k_hat` is treated as a constant.
pub fn backward(
    params: &SaeParams,
    trace: &ForwardTrace,
    grad_x_hat: ArrayView2<'_, f64>,
    grad_khat_extra: ArrayView1<'_, f64>,
    freeze_mlp: bool,
) -> Result<SaeParams> {
    backward_full(
        params,
        trace,
        Upstream {
            x_hat: grad_x_hat,
            k_hat: grad_khat_extra,
            latents: None,
        },
        freeze_mlp,
    )
}

pub fn backward_full(params: &SaeParams, trace: &ForwardTrace, upstream: Upstream<'_>, freeze_mlp: bool) -> Result<SaeParams> {
    let batch = trace.batch_size();
    let (n, d) = (params.n(), params.d());
    ensure_dim("trace input width", n, trace.x.ncols())?;
    ensure_dim("trace latent width", d, trace.z.ncols())?;
    ensure_dim("trace batch", batch, trace.x_hat.nrows())?;
    ensure_dim("grad_x_hat rows", batch, upstream.x_hat.nrows())?;
    ensure_dim("grad_x_hat cols", n, upstream.x_hat.ncols())?;
    ensure_dim("grad_khat rows", batch, upstream.k_hat.len())?;
    if let Some(extra) = &upstream.latents {
        ensure_dim("grad_z rows", batch, extra.nrows())?;
        ensure_dim("grad_z cols", d, extra.ncols())?;
    }
    let uses_mlp = !matches!(trace.gating, Gating::Fixed { .. });
    if uses_mlp && trace.mlp_hidden.ncols() != d {
        return Err(SaeError::InvalidInput("trace is missing predictor activations".into()));
    }

    let mut grads = params.zeros_like();
    let g_xhat = upstream.x_hat;

    // x_hat = f . w_dec + b_pre
    grads.b_pre = g_xhat.sum_axis(Axis(0));
    grads.w_dec = trace.f.t().dot(&g_xhat);
    let grad_f = g_xhat.dot(&params.w_dec.t());

    // f = gates (.) z, through the gate into z and k_hat
    let mut grad_z = &grad_f * &trace.gates;
    let mut grad_khat = upstream.k_hat.to_owned();
    if let Selection::Soft(outs) = &trace.selection {
        let results = exec::map_indices(batch, |b| {
            let grad_p: Vec<f64> = grad_f
                .row(b)
                .iter()
                .zip(trace.z.row(b))
                .map(|(g, z)| g * z)
                .collect();
            soft_topk_backward(&outs[b], &grad_p)
        });
        for (b, result) in results.into_iter().enumerate() {
            let (gz, gk) = result?;
            grad_z.row_mut(b).zip_mut_with(&ArrayView1::from(&gz), |acc, v| *acc += v);
            grad_khat[b] += gk;
        }
    }
    if let Some(extra) = &upstream.latents {
        grad_z += extra;
    }

    // z = relu(z_pre)
    let grad_zpre = {
        let mut g = grad_z;
        Zip::from(&mut g).and(&trace.z_pre).for_each(|g, &zp| {
            if zp <= 0.0 {
                *g = 0.0;
            }
        });
        g
    };
    grads.b_enc = grad_zpre.sum_axis(Axis(0));
    grads.w_enc = grad_zpre.t().dot(&trace.x_centered);
    let mut grad_xc = grad_zpre.dot(&params.w_enc);

    if uses_mlp && !freeze_mlp {
        let k_max = params.k_max as f64;
        let grad_logit: Array1<f64> = Zip::from(&grad_khat)
            .and(&trace.mlp_sigmoid)
            .map_collect(|&g, &s| g * k_max * s * (1.0 - s));
        grads.mlp_b2 = grad_logit.sum();
        grads.mlp_w2 = trace.mlp_hidden.t().dot(&grad_logit);
        let mut grad_hidden_pre = grad_logit
            .view()
            .insert_axis(Axis(1))
            .dot(&params.mlp_w2.view().insert_axis(Axis(0)));
        Zip::from(&mut grad_hidden_pre)
            .and(&trace.mlp_hidden_pre)
            .for_each(|g, &h| {
                if h <= 0.0 {
                    *g = 0.0;
                }
            });
        grads.mlp_b1 = grad_hidden_pre.sum_axis(Axis(0));
        grads.mlp_w1 = grad_hidden_pre.t().dot(&trace.x_centered);
        grad_xc += &grad_hidden_pre.dot(&params.mlp_w1);
    }

    // xc = x - b_pre
    grads.b_pre -= &grad_xc.sum_axis(Axis(0));
    Ok(grads)
}
