//! Training loops: synchronous advantage actor-critic for navigation and a
//! deterministic off-policy actor-critic for the arm, both with the GACE
//! auxiliary update.

mod a2c;
mod offpolicy;

pub use a2c::{a2c_loss, argmax_index, collect_rollout, A2cLoss, EpisodeTrace, NavTrainer, Rollout, StepVars, UpdateStats};
pub use offpolicy::{ArmTrainer, IterationStats, ReplayBuffer, Transition};

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::EnvError;
use crate::gace::GaceError;
use crate::goal_storage::StoreError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("env {index}: {source}")]
    Env { index: usize, source: EnvError },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Gace(#[from] GaceError),
    #[error("non-finite loss at update {update}: {detail}")]
    NonFinite { update: u64, detail: String },
    #[error("replay holds {have} transitions, batch needs {need}")]
    ReplayUnderflow { have: usize, need: usize },
    #[error("invalid training config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error(transparent)]
    Eval(#[from] crate::evalkit::EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<EnvError> for TrainError {
    fn from(source: EnvError) -> Self {
        TrainError::Env { index: 0, source }
    }
}

/// How GACE gradients meet the RL gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerMode {
    /// One backward of `L_RL + η·L_GACE` and one Adam over all parameters.
    Shared,
    /// Separate Adam instance for the GACE step on σ and d.
    Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lr: f64,
    pub amsgrad: bool,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub clip_norm: f64,
    pub n_envs: usize,
    pub total_updates: u64,
    /// Curve rows are written every this many updates.
    pub log_interval: u64,
    /// Checkpoint cadence for the command-line trainer; 0 disables.
    pub checkpoint_interval: u64,
    /// Training episodes averaged into the curve's success ratio.
    pub success_window: usize,
    pub seed: u64,
    pub optimizer: OptimizerMode,
    pub store_capacity: usize,
    pub eps_negative: f64,
    pub warmup: u64,
    pub warmup_budget: usize,
    /// Every `holdout_every`-th training episode goes to the held-out store.
    pub holdout_every: u64,
    // off-policy
    pub replay_capacity: usize,
    pub batch: usize,
    pub tau: f64,
    pub target_interval: u64,
    pub noise: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lr: 7e-5,
            amsgrad: true,
            entropy_coef: 0.01,
            value_coef: 0.5,
            clip_norm: 10.0,
            n_envs: 20,
            total_updates: 100_000,
            log_interval: 10,
            checkpoint_interval: 0,
            success_window: 200,
            seed: 0,
            optimizer: OptimizerMode::Shared,
            store_capacity: 500_000,
            eps_negative: 0.0,
            warmup: 2_000,
            warmup_budget: 1_000_000,
            holdout_every: 10,
            replay_capacity: 1_000_000,
            batch: 128,
            tau: 0.005,
            target_interval: 1,
            noise: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut e = Vec::new();
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            e.push(format!("gamma {} must lie in (0, 1]", self.gamma));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            e.push(format!("lr {} must be positive", self.lr));
        }
        for (name, v) in [
            ("entropy_coef", self.entropy_coef),
            ("value_coef", self.value_coef),
            ("noise", self.noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                e.push(format!("{name} {v} must be non-negative"));
            }
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            e.push(format!("clip_norm {} must be positive", self.clip_norm));
        }
        if self.n_envs == 0 {
            e.push("n_envs must be at least 1".into());
        }
        if self.log_interval == 0 {
            e.push("log_interval must be at least 1".into());
        }
        if self.success_window == 0 {
            e.push("success_window must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.eps_negative) {
            e.push(format!("eps_negative {} must lie in [0, 1]", self.eps_negative));
        }
        if self.warmup > self.store_capacity as u64 {
            e.push(format!("warmup {} exceeds store capacity {}", self.warmup, self.store_capacity));
        }
        if self.holdout_every < 2 {
            e.push("holdout_every must be at least 2".into());
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            e.push(format!("tau {} must lie in (0, 1]", self.tau));
        }
        if self.batch == 0 || self.replay_capacity < self.batch {
            e.push("replay capacity must hold at least one batch".into());
        }
        if self.target_interval == 0 {
            e.push("target_interval must be at least 1".into());
        }
        e
    }
}

/// `R_t = Σ_k γ^k r_{t+k} + γ^{T−t} · bootstrap`.
pub fn discounted_return(rewards: &[f64], gamma: f64, bootstrap: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = bootstrap;
    for (o, &r) in out.iter_mut().zip(rewards).rev() {
        acc = r + gamma * acc;
        *o = acc;
    }
    out
}

/// One learning-curve sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub update: u64,
    pub env_steps: u64,
    pub episodes: u64,
    pub success_ratio: f64,
    pub loss_total: f64,
    pub loss_policy: f64,
    pub loss_value: f64,
    pub entropy: f64,
    pub loss_gace: Option<f64>,
    pub disc_accuracy: Option<f64>,
    pub store_size: usize,
}

pub const CURVE_SCHEMA_VERSION: u32 = 1;

/// Rolling success ratio over the last `cap` episodes.
#[derive(Debug, Clone)]
pub struct SuccessWindow {
    cap: usize,
    hits: VecDeque<bool>,
}

impl SuccessWindow {
    pub fn new(cap: usize) -> Self {
        Self {
            cap,
            hits: VecDeque::with_capacity(cap),
        }
    }

    pub fn push(&mut self, success: bool) {
        if self.hits.len() == self.cap {
            self.hits.pop_front();
        }
        self.hits.push_back(success);
    }

    pub fn ratio(&self) -> f64 {
        if self.hits.is_empty() {
            0.0
        } else {
            self.hits.iter().filter(|&&h| h).count() as f64 / self.hits.len() as f64
        }
    }
}

/// Hooks called by the training loops.
pub trait Observer {
    fn on_row(&mut self, _row: &CurveRow) -> std::io::Result<()> {
        Ok(())
    }
}

impl Observer for () {}

impl Observer for Vec<CurveRow> {
    fn on_row(&mut self, row: &CurveRow) -> std::io::Result<()> {
        self.push(row.clone());
        Ok(())
    }
}
