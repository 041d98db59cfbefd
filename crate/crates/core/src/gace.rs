//! Goal-aware cross-entropy and its update rule.
//!
//! `L = −Σᵢ one_hot(zᵢ) · log(max(gᵢ, ε_clip))`, summed over the batch by
//! default. GACE gradients reach only the encoder σ and the discriminator d.

use serde::{Deserialize, Serialize};

use crate::goal_storage::{GoalRecord, GoalStore, StoreError};
use crate::nets::GoalModel;
use crate::tensor::{Adam, Graph, Result as TResult, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaceConfig {
    pub eta: f64,
    pub batch: usize,
    pub eps_clip: f64,
    /// GACE updates stop after this many.
    pub freeze_after: Option<u64>,
    pub reduction: Reduction,
}

impl Default for GaceConfig {
    fn default() -> Self {
        Self {
            eta: 0.5,
            batch: 50,
            eps_clip: 1e-8,
            freeze_after: None,
            reduction: Reduction::Sum,
        }
    }
}

impl GaceConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            errs.push(format!("gace eta {} must be finite and non-negative", self.eta));
        }
        if self.batch == 0 {
            errs.push("gace batch must be at least 1".into());
        }
        if !(self.eps_clip > 0.0 && self.eps_clip < 1.0) {
            errs.push(format!("eps_clip {} must lie in (0, 1)", self.eps_clip));
        }
        errs
    }

    pub fn is_frozen(&self, updates_done: u64) -> bool {
        self.freeze_after.is_some_and(|n| updates_done >= n)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GaceError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite GACE gradients")]
    NonFinite,
}

/// Cross-entropy of probability rows `probs` `[M, K]` against label indices.
pub fn gace_loss(g: &mut Graph, probs: Var, labels: &[usize], eps_clip: f64, reduction: Reduction) -> TResult<Var> {
    let shape = g.shape(probs).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(TensorError::ShapeMismatch {
            op: "gace_loss",
            lhs: shape,
            rhs: vec![labels.len()],
        });
    }
    if cfg!(debug_assertions) {
        let k = shape[1];
        for (i, row) in g.value(probs).data().chunks(k).enumerate() {
            let s: f64 = row.iter().sum();
            // clamping can lift the sum by at most K·ε_clip
            if (s - 1.0).abs() > 1e-6 + k as f64 * eps_clip {
                return Err(TensorError::InvalidShape {
                    op: "gace_loss",
                    shape: vec![i],
                    reason: format!("probability row sums to {s}"),
                });
            }
        }
    }
    let p = g.clamp_min(probs, eps_clip)?;
    let lp = g.log(p)?;
    let picked = g.pick(lp, labels)?;
    let s = g.sum(picked)?;
    let scale = match reduction {
        Reduction::Sum => -1.0,
        Reduction::Mean => -1.0 / labels.len() as f64,
    };
    g.scale(s, scale)
}

/// Plain-value version of [`gace_loss`].
pub fn gace_loss_value(probs: &Tensor, labels: &[usize], eps_clip: f64, reduction: Reduction) -> f64 {
    let k = probs.cols();
    let s: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &z)| -probs.data()[i * k + z].max(eps_clip).ln())
        .sum();
    match reduction {
        Reduction::Sum => s,
        Reduction::Mean => s / labels.len() as f64,
    }
}

/// `L_RL + η·L_GACE`.
pub fn total_loss(g: &mut Graph, l_rl: Var, l_gace: Var, eta: f64) -> TResult<Var> {
    for v in [l_rl, l_gace] {
        if !g.value(v).is_finite() {
            return Err(TensorError::NonFinite { op: "total_loss" });
        }
    }
    if !eta.is_finite() {
        return Err(TensorError::NonFinite { op: "total_loss" });
    }
    let w = g.scale(l_gace, eta)?;
    g.add(l_rl, w)
}

/// Forward of a goal-record batch through σ and d. Returns the loss and the
/// probability rows.
pub fn batch_loss(g: &mut Graph, model: &GoalModel, records: &[GoalRecord], cfg: &GaceConfig) -> TResult<(Var, Var)> {
    let states: Vec<&Tensor> = records.iter().map(|r| r.state.as_ref()).collect();
    let labels: Vec<usize> = records.iter().map(|r| r.label).collect();
    let obs = model.obs_input(g, &states, false)?;
    let e = model.encode(g, obs)?;
    let (probs, _) = model.discriminate(g, e, cfg.eps_clip)?;
    let loss = gace_loss(g, probs, &labels, cfg.eps_clip, cfg.reduction)?;
    Ok((loss, probs))
}

/// One GACE-only update of σ and d. Returns `None` once frozen.
pub fn gace_update_step(
    store: &mut GoalStore,
    model: &mut GoalModel,
    optimizer: &mut Adam,
    cfg: &GaceConfig,
    updates_done: u64,
    clip_norm: f64,
) -> Result<Option<f64>, GaceError> {
    if cfg.is_frozen(updates_done) {
        return Ok(None);
    }
    let batch = store.sample_batch(cfg.batch)?;
    let (loss, grads) = {
        let mut g = Graph::new(&model.params);
        let (l, _) = batch_loss(&mut g, model, &batch, cfg)?;
        (g.value(l).item(), g.backward(l)?)
    };
    let mut grads = grads;
    grads.retain_params(&model.params, |grp| grp.is_goal_path());
    if !grads.is_finite() {
        return Err(GaceError::NonFinite);
    }
    grads.clip_global_norm(clip_norm);
    optimizer.step_filtered(&mut model.params, &grads, |grp| grp.is_goal_path())?;
    Ok(Some(loss))
}
