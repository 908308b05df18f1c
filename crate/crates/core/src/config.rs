//! Training configuration and the shipped profiles.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SaeError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyKind {
    Softplus,
    Relu,
}

/// Shape of an annealing schedule. `None` pins the value at its final level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Geometric,
    None,
}

/// `Softsae` trains the adaptive model; `Topk` trains the fixed-k baseline
/// with `k_target` active latents per row and no sparsity predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Softsae,
    Topk,
}

fn default_alpha_schedule() -> ScheduleKind {
    ScheduleKind::Geometric
}
fn default_k_schedule() -> ScheduleKind {
    ScheduleKind::Linear
}
fn default_mode() -> TrainMode {
    TrainMode::Softsae
}
fn default_probe_every() -> u64 {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub n: usize,
    pub d: usize,
    pub k_target: usize,
    pub k_max: usize,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub decay_start: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub alpha_init: f64,
    pub alpha_final: f64,
    pub alpha_anneal_steps: u64,
    pub k_anneal_steps: u64,
    pub hard_topk_steps: u64,
    pub lambda: f64,
    pub beta: f64,
    pub gamma: f64,
    pub k_aux: usize,
    /// Tokens without firing after which a latent counts as dead.
    pub dead_threshold: u64,
    pub seed: u64,
    pub decoder_renorm: bool,
    pub penalty_kind: PenaltyKind,
    #[serde(default = "default_alpha_schedule")]
    pub alpha_schedule: ScheduleKind,
    #[serde(default = "default_k_schedule")]
    pub k_schedule: ScheduleKind,
    #[serde(default = "default_mode")]
    pub mode: TrainMode,
    /// Probe-batch inference L0 is reported every this many steps.
    #[serde(default = "default_probe_every")]
    pub probe_every: u64,
}

impl TrainConfig {
    /// Small profile that trains on one desktop core in minutes.
    ///
    /// Alpha stops at 1e-2. At this scale, lower final temperatures give
    /// held-out FVE that swings by several points between seeds.
    pub fn desk() -> Self {
        TrainConfig {
            n: 64,
            d: 1024,
            k_target: 16,
            k_max: 32,
            total_steps: 5000,
            warmup_steps: 100,
            decay_start: 4000,
            lr: 3e-3,
            batch_size: 64,
            alpha_init: 1.0,
            alpha_final: 1e-2,
            alpha_anneal_steps: 125,
            k_anneal_steps: 200,
            hard_topk_steps: 750,
            lambda: 1.0,
            beta: 5.0,
            gamma: 0.1,
            k_aux: 128,
            dead_threshold: 64 * 500,
            seed: 0,
            decoder_renorm: true,
            penalty_kind: PenaltyKind::Softplus,
            alpha_schedule: ScheduleKind::Geometric,
            k_schedule: ScheduleKind::Linear,
            mode: TrainMode::Softsae,
            probe_every: 100,
        }
    }

    /// Vision-embedding settings (512-dim activations, 4096 latents, k = 60).
    pub fn clip_like() -> Self {
        TrainConfig {
            n: 512,
            d: 4096,
            k_target: 60,
            k_max: 120,
            total_steps: 40_000,
            warmup_steps: 1_900,
            decay_start: 6_500,
            lr: 6e-4,
            batch_size: 4096,
            alpha_init: 1.0,
            alpha_final: 1e-4,
            alpha_anneal_steps: 1_000,
            k_anneal_steps: 1_600,
            hard_topk_steps: 6_000,
            lambda: 1.0,
            beta: 5.0,
            gamma: 0.1,
            k_aux: 256,
            dead_threshold: 400_000,
            seed: 0,
            decoder_renorm: true,
            penalty_kind: PenaltyKind::Softplus,
            alpha_schedule: ScheduleKind::Geometric,
            k_schedule: ScheduleKind::Linear,
            mode: TrainMode::Softsae,
            probe_every: 100,
        }
    }

    /// Language-model residual-stream settings (2304-dim, 16384 latents, k = 20).
    pub fn gemma_like() -> Self {
        TrainConfig {
            n: 2304,
            d: 16_384,
            k_target: 20,
            k_max: 40,
            total_steps: 146_484,
            warmup_steps: 1_000,
            decay_start: 117_187,
            lr: 3e-4,
            batch_size: 4096,
            alpha_init: 1.0,
            alpha_final: 1e-4,
            alpha_anneal_steps: 2_500,
            k_anneal_steps: 1_464,
            hard_topk_steps: 10_000,
            lambda: 1.0,
            beta: 5.0,
            gamma: 0.031_25,
            k_aux: 1_152,
            dead_threshold: 10_000_000,
            seed: 0,
            decoder_renorm: true,
            penalty_kind: PenaltyKind::Softplus,
            alpha_schedule: ScheduleKind::Geometric,
            k_schedule: ScheduleKind::Linear,
            mode: TrainMode::Softsae,
            probe_every: 100,
        }
    }

    pub fn profile(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "clip-like" => Some(Self::clip_like()),
            "gemma-like" => Some(Self::gemma_like()),
            _ => None,
        }
    }

    pub const PROFILE_NAMES: [&'static str; 3] = ["desk", "clip-like", "gemma-like"];

    /// Change `total_steps`, rescaling every step-denominated schedule
    /// boundary by the same factor so the schedule keeps its shape.
    pub fn with_total_steps(mut self, total: u64) -> Self {
        let old = self.total_steps.max(1) as f64;
        let scale = |v: u64| ((v as f64) * total as f64 / old).round() as u64;
        self.warmup_steps = scale(self.warmup_steps);
        self.decay_start = scale(self.decay_start).max(self.warmup_steps).min(total);
        self.alpha_anneal_steps = scale(self.alpha_anneal_steps);
        self.k_anneal_steps = scale(self.k_anneal_steps);
        self.hard_topk_steps = scale(self.hard_topk_steps).min(total.saturating_sub(1));
        self.total_steps = total;
        self
    }

    /// Disable both annealing schedules (alpha and k start at their final values).
    pub fn without_annealing(mut self) -> Self {
        self.alpha_schedule = ScheduleKind::None;
        self.k_schedule = ScheduleKind::None;
        self
    }

    /// First step of the hard top-k phase.
    pub fn hard_phase_start(&self) -> u64 {
        self.total_steps - self.hard_topk_steps
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(SaeError::InvalidInput(msg));
        if self.n == 0 || self.d == 0 {
            return fail("n and d must be positive".into());
        }
        if self.k_target == 0 || self.k_target > self.k_max || self.k_max > self.d {
            return fail(format!(
                "need 1 <= k_target <= k_max <= d (got k_target={}, k_max={}, d={})",
                self.k_target, self.k_max, self.d
            ));
        }
        if self.mode == TrainMode::Softsae && self.k_max >= self.d {
            return fail(format!(
                "soft top-k needs k_max < d (got k_max={}, d={})",
                self.k_max, self.d
            ));
        }
        if self.total_steps == 0 {
            return fail("total_steps must be positive".into());
        }
        if !(self.warmup_steps <= self.decay_start && self.decay_start <= self.total_steps) {
            return fail(format!(
                "need warmup_steps <= decay_start <= total_steps (got {}, {}, {})",
                self.warmup_steps, self.decay_start, self.total_steps
            ));
        }
        if self.hard_topk_steps >= self.total_steps {
            return fail(format!(
                "hard_topk_steps ({}) must be below total_steps ({})",
                self.hard_topk_steps, self.total_steps
            ));
        }
        if !(self.alpha_final > 0.0 && self.alpha_final <= self.alpha_init && self.alpha_init.is_finite()) {
            return fail(format!(
                "need 0 < alpha_final <= alpha_init (got {}, {})",
                self.alpha_final, self.alpha_init
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be a finite nonnegative number, got {}", self.lr));
        }
        if !(self.beta > 0.0) || self.lambda < 0.0 || self.gamma < 0.0 {
            return fail("beta must be positive; lambda and gamma nonnegative".into());
        }
        if self.batch_size == 0 || self.k_aux == 0 || self.dead_threshold == 0 {
            return fail("batch_size, k_aux and dead_threshold must be positive".into());
        }
        if self.probe_every == 0 {
            return fail("probe_every must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        for name in TrainConfig::PROFILE_NAMES {
            TrainConfig::profile(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn hyperparameter_tables() {
        let clip = TrainConfig::clip_like();
        assert_eq!((clip.lr, clip.total_steps, clip.warmup_steps, clip.decay_start), (6e-4, 40_000, 1_900, 6_500));
        assert_eq!((clip.k_aux, clip.hard_topk_steps, clip.dead_threshold), (256, 6_000, 400_000));
        assert_eq!((clip.k_anneal_steps, clip.alpha_anneal_steps), (1_600, 1_000));
        assert_eq!(clip.gamma, 0.1);
        let gemma = TrainConfig::gemma_like();
        assert_eq!((gemma.lr, gemma.total_steps, gemma.warmup_steps, gemma.decay_start), (3e-4, 146_484, 1_000, 117_187));
        assert_eq!((gemma.k_aux, gemma.hard_topk_steps, gemma.dead_threshold), (1_152, 10_000, 10_000_000));
        assert_eq!((gemma.k_anneal_steps, gemma.alpha_anneal_steps), (1_464, 2_500));
        assert_eq!(gemma.gamma, 0.031_25);
        for cfg in [clip, gemma] {
            assert_eq!(cfg.k_max, 2 * cfg.k_target);
            assert_eq!((cfg.lambda, cfg.beta, cfg.alpha_final), (1.0, 5.0, 1e-4));
        }
    }

    #[test]
    fn rescaled_profile_stays_valid() {
        let cfg = TrainConfig::desk().with_total_steps(200);
        cfg.validate().unwrap();
        assert_eq!(cfg.total_steps, 200);
        assert_eq!(cfg.hard_topk_steps, 30);
    }

    #[test]
    fn json_rejects_unknown_fields() {
        let mut value = serde_json::to_value(TrainConfig::desk()).unwrap();
        value["bogus"] = serde_json::json!(1);
        assert!(serde_json::from_value::<TrainConfig>(value).is_err());
    }

    #[test]
    fn invalid_orderings_rejected() {
        let mut cfg = TrainConfig::desk();
        cfg.warmup_steps = cfg.decay_start + 1;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::desk();
        cfg.k_max = cfg.k_target - 1;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::desk();
        cfg.alpha_final = 2.0;
        assert!(cfg.validate().is_err());
    }
}
