//! Evaluation metrics: fraction of variance explained, L0, the distribution of
//! predicted budgets and their rank correlation with ground-truth factor counts.

use std::path::Path;

use ndarray::{Array1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::config::{TrainConfig, TrainMode};
use crate::dataio::ActivationFile;
use crate::datagen;
use crate::error::{ensure_dim, Result, SaeError};
use crate::model::{self, Gating, SaeParams};

pub const HISTOGRAM_BINS: usize = 32;

/// Published reference numbers, kept for side-by-side reporting only.
pub mod reference {
    /// SoftSAE on CLIP embeddings at target k = 60.
    pub const SOFTSAE_CLIP_K60_L0: f64 = 62.562;
    pub const SOFTSAE_CLIP_K60_FVE: f64 = 0.865;
    /// SoftSAE on Gemma-2-2B activations at target k = 20.
    pub const SOFTSAE_GEMMA_K20_L0: f64 = 17.977;
    /// TopK baseline on Gemma-2-2B activations at k = 20.
    pub const TOPK_GEMMA_K20_L0: f64 = 20.000;
}

/// `1 - sum ||x - x_hat||^2 / sum ||x - mean(x)||^2`.
pub fn fve(x: ArrayView2<'_, f64>, x_hat: ArrayView2<'_, f64>) -> Result<f64> {
    if x.dim() != x_hat.dim() {
        return Err(SaeError::DimensionMismatch {
            context: "fve operands",
            expected: x.len(),
            actual: x_hat.len(),
        });
    }
    if x.nrows() < 2 {
        return Err(SaeError::InvalidInput("fve needs at least two rows".into()));
    }
    let mut acc = FveAccumulator::new(x.ncols());
    acc.push(x, x_hat);
    acc.finish()
}

/// Streaming FVE: squared error plus per-dimension Welford variance.
#[derive(Debug, Clone)]
pub struct FveAccumulator {
    sq_err: f64,
    mean: Array1<f64>,
    m2: Array1<f64>,
    count: usize,
}

impl FveAccumulator {
    pub fn new(n: usize) -> Self {
        FveAccumulator {
            sq_err: 0.0,
            mean: Array1::zeros(n),
            m2: Array1::zeros(n),
            count: 0,
        }
    }

    pub fn push(&mut self, x: ArrayView2<'_, f64>, x_hat: ArrayView2<'_, f64>) {
        for (row, row_hat) in x.rows().into_iter().zip(x_hat.rows()) {
            self.count += 1;
            let inv = 1.0 / self.count as f64;
            for j in 0..row.len() {
                let v = row[j];
                let e = v - row_hat[j];
                self.sq_err += e * e;
                let delta = v - self.mean[j];
                self.mean[j] += delta * inv;
                self.m2[j] += delta * (v - self.mean[j]);
            }
        }
    }

    pub fn finish(&self) -> Result<f64> {
        let total = self.m2.sum();
        if !(total > 0.0) {
            return Err(SaeError::InvalidInput("fve undefined: data has zero total variance".into()));
        }
        Ok(1.0 - self.sq_err / total)
    }
}

/// Average number of active latents per row.
pub fn mean_l0(counts: &[usize]) -> Result<f64> {
    if counts.is_empty() {
        return Err(SaeError::InvalidInput("mean_l0 needs at least one sample".into()));
    }
    Ok(counts.iter().sum::<usize>() as f64 / counts.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` uniform edges over `[0, k_max]`.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KhatStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub histogram: Histogram,
}

/// Streaming mean, population std and a 32-bin histogram over `[0, k_max]`.
/// Values at or above `k_max` land in the last bin.
#[derive(Debug, Clone)]
pub struct KhatAccumulator {
    k_max: f64,
    count: u64,
    mean: f64,
    m2: f64,
    counts: Vec<u64>,
}

impl KhatAccumulator {
    pub fn new(k_max: f64) -> Self {
        KhatAccumulator {
            k_max,
            count: 0,
            mean: 0.0,
            m2: 0.0,
            counts: vec![0; HISTOGRAM_BINS],
        }
    }

    pub fn push(&mut self, v: f64) {
        self.count += 1;
        let delta = v - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (v - self.mean);
        let bin = ((v / self.k_max) * HISTOGRAM_BINS as f64).floor();
        let bin = if bin.is_nan() { 0 } else { bin.clamp(0.0, (HISTOGRAM_BINS - 1) as f64) as usize };
        self.counts[bin] += 1;
    }

    pub fn finish(&self) -> Result<KhatStats> {
        if self.count == 0 {
            return Err(SaeError::InvalidInput("k_hat statistics need at least one value".into()));
        }
        let edges = (0..=HISTOGRAM_BINS)
            .map(|i| self.k_max * i as f64 / HISTOGRAM_BINS as f64)
            .collect();
        Ok(KhatStats {
            mean: self.mean,
            std: (self.m2 / self.count as f64).max(0.0).sqrt(),
            histogram: Histogram {
                edges,
                counts: self.counts.clone(),
            },
        })
    }
}

pub fn khat_statistics(k_hat: &[f64], k_max: usize) -> Result<KhatStats> {
    if k_max == 0 {
        return Err(SaeError::InvalidInput("k_max must be positive".into()));
    }
    let mut acc = KhatAccumulator::new(k_max as f64);
    for &v in k_hat {
        acc.push(v);
    }
    acc.finish()
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation; `Ok(None)` when either input is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    ensure_dim("spearman operands", a.len(), b.len())?;
    if a.len() < 10 {
        return Err(SaeError::InvalidInput(format!("spearman needs at least 10 samples, got {}", a.len())));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(SaeError::InvalidInput("spearman input contains NaN".into()));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(None);
    }
    Ok(Some((cov / (va * vb).sqrt()).clamp(-1.0, 1.0)))
}

/// Rank correlation between predicted budgets and factor counts.
pub fn complexity_correlation(k_hat: &[f64], factor_counts: &[usize]) -> Result<Option<f64>> {
    let counts: Vec<f64> = factor_counts.iter().map(|&c| c as f64).collect();
    spearman(k_hat, &counts)
}

/// Which hard gating to evaluate with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "k")]
pub enum EvalGating {
    /// Rounded predicted budget per row.
    Adaptive,
    /// Constant `k` (TopK baseline).
    Fixed(usize),
}

impl EvalGating {
    pub fn for_config(cfg: &TrainConfig) -> Self {
        match cfg.mode {
            TrainMode::Softsae => EvalGating::Adaptive,
            TrainMode::Topk => EvalGating::Fixed(cfg.k_target),
        }
    }

    fn gating(self) -> Gating {
        match self {
            EvalGating::Adaptive => Gating::Adaptive,
            EvalGating::Fixed(k) => Gating::Fixed { k },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub dataset_id: String,
    pub gating: EvalGating,
    pub num_samples: usize,
    pub n: usize,
    pub d: usize,
    pub k_max: usize,
    pub fve: f64,
    pub mean_l0: f64,
    pub khat_mean: f64,
    pub khat_std: f64,
    pub khat_histogram: Histogram,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub spearman_khat_complexity: Option<f64>,
    /// Why the correlation is missing when ground truth was supplied.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub spearman_note: Option<String>,
    /// Fraction of latents never active on this dataset.
    pub dead_fraction: f64,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "model_id,dataset_id,num_samples,fve,mean_l0,khat_mean,khat_std,spearman_khat_complexity,dead_fraction";

    pub fn csv_row(&self) -> String {
        let rho = self.spearman_khat_complexity.map(|r| r.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            csv_field(&self.model_id),
            csv_field(&self.dataset_id),
            self.num_samples,
            self.fve,
            self.mean_l0,
            self.khat_mean,
            self.khat_std,
            rho,
            self.dead_fraction
        )
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Where to find ground-truth factor counts.
#[derive(Debug, Clone, Copy)]
pub enum TruthSource<'a> {
    /// `<data>.truth.json` if it exists; absent otherwise.
    Sidecar,
    /// This file must exist.
    Explicit(&'a Path),
    None,
}

/// Rows per inference chunk.
const EVAL_CHUNK: usize = 1024;

/// Evaluate `params` on an activation file in one streaming pass.
pub fn run_eval(
    params: &SaeParams,
    gating: EvalGating,
    data_path: &Path,
    truth: TruthSource<'_>,
    model_id: &str,
) -> Result<EvalReport> {
    let file = ActivationFile::open(data_path)?;
    ensure_dim("dataset width vs model n", params.n(), file.n())?;
    if file.count() < 2 {
        return Err(SaeError::InvalidInput("evaluation needs at least two samples".into()));
    }
    let factor_counts = match truth {
        TruthSource::Sidecar => {
            let tp = datagen::truth_path(data_path);
            if tp.exists() {
                Some(datagen::read_truth(&tp)?.factor_counts)
            } else {
                None
            }
        }
        TruthSource::Explicit(p) => Some(datagen::read_truth(p)?.factor_counts),
        TruthSource::None => None,
    };
    if let Some(fc) = &factor_counts {
        ensure_dim("factor_counts length", file.count(), fc.len())?;
    }

    let mut fve_acc = FveAccumulator::new(params.n());
    let mut khat_acc = KhatAccumulator::new(params.k_max as f64);
    let mut k_hat_all = Vec::with_capacity(file.count());
    let mut l0_sum = 0usize;
    let mut ever_active = vec![false; params.d()];
    for batch in file.batches(EVAL_CHUNK, None)? {
        let x = batch?.mapv(|v| v as f64);
        let trace = model::forward(params, x.view(), gating.gating())?;
        fve_acc.push(x.view(), trace.x_hat.view());
        l0_sum += trace.selected_counts().expect("hard gating").iter().sum::<usize>();
        for &k in trace.k_hat.iter() {
            khat_acc.push(k);
            k_hat_all.push(k);
        }
        for (active, column) in ever_active.iter_mut().zip(trace.f.axis_iter(Axis(1))) {
            if !*active && column.iter().any(|&v| v > 0.0) {
                *active = true;
            }
        }
    }
    let khat = khat_acc.finish()?;
    let (spearman_khat_complexity, spearman_note) = match &factor_counts {
        Some(fc) if fc.len() < 10 => (None, Some("fewer than 10 samples".to_string())),
        Some(fc) => match complexity_correlation(&k_hat_all, fc)? {
            Some(r) => (Some(r), None),
            None => (None, Some("undefined: constant k_hat or constant factor counts".to_string())),
        },
        None => (None, None),
    };
    let dead = ever_active.iter().filter(|a| !**a).count();
    Ok(EvalReport {
        model_id: model_id.to_string(),
        dataset_id: data_path.display().to_string(),
        gating,
        num_samples: file.count(),
        n: params.n(),
        d: params.d(),
        k_max: params.k_max,
        fve: fve_acc.finish()?,
        mean_l0: l0_sum as f64 / file.count() as f64,
        khat_mean: khat.mean,
        khat_std: khat.std,
        khat_histogram: khat.histogram,
        spearman_khat_complexity,
        spearman_note,
        dead_fraction: dead as f64 / params.d() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn fve_edge_cases() {
        let x = array![[1.0, 2.0], [3.0, -1.0], [0.0, 0.5]];
        assert_eq!(fve(x.view(), x.view()).unwrap(), 1.0);
        let mean = x.mean_axis(Axis(0)).unwrap();
        let mean_pred = ndarray::Array2::from_shape_fn(x.dim(), |(_, j)| mean[j]);
        assert!(fve(x.view(), mean_pred.view()).unwrap().abs() < 1e-15);
        let flat = array![[1.0, 1.0], [1.0, 1.0]];
        assert!(fve(flat.view(), flat.view()).is_err());
        assert!(fve(x.slice(ndarray::s![..1, ..]), x.slice(ndarray::s![..1, ..])).is_err());
    }

    #[test]
    fn l0_and_khat_small_cases() {
        assert_eq!(mean_l0(&[3]).unwrap(), 3.0);
        assert!(mean_l0(&[]).is_err());
        let s = khat_statistics(&[1.0, 3.0], 32).unwrap();
        assert_eq!((s.mean, s.std), (2.0, 1.0));
        let s = khat_statistics(&[5.5; 7], 32).unwrap();
        assert_eq!(s.std, 0.0);
        assert_eq!(s.histogram.counts.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(s.histogram.counts[5], 7);
        assert_eq!(s.histogram.edges.len(), 33);
        let s = khat_statistics(&[32.0], 32).unwrap();
        assert_eq!(s.histogram.counts[31], 1);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
    }

    #[test]
    fn spearman_perfect_and_constant() {
        let a: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert_eq!(spearman(&a, &a).unwrap(), Some(1.0));
        assert_eq!(spearman(&a, &neg).unwrap(), Some(-1.0));
        assert_eq!(spearman(&a, &[2.0; 12]).unwrap(), None);
        assert!(spearman(&a[..5], &a[..5]).is_err());
    }

    #[test]
    fn csv_row_matches_header_arity() {
        let r = EvalReport {
            model_id: "m,1".into(),
            dataset_id: "d".into(),
            gating: EvalGating::Adaptive,
            num_samples: 2,
            n: 1,
            d: 1,
            k_max: 1,
            fve: 0.5,
            mean_l0: 1.0,
            khat_mean: 0.5,
            khat_std: 0.0,
            khat_histogram: Histogram {
                edges: vec![],
                counts: vec![],
            },
            spearman_khat_complexity: None,
            spearman_note: None,
            dead_fraction: 0.0,
        };
        assert!(r.csv_row().starts_with("\"m,1\",d,2,"));
        assert_eq!(EvalReport::CSV_HEADER.split(',').count(), 9);
    }
}
