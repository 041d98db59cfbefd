//! Success ratio, SRR/SEI, discriminator accuracy and saliency maps.

use std::fmt::Write as _;

use rand::Rng as _;
use thiserror::Error;

use crate::agents::CurveRow;
use crate::envs::{Action, EnvConfig, EnvError, MultiTargetEnv, Outcome};
use crate::goal_storage::GoalRecord;
use crate::nets::{ActionSpace, GoalModel, QueryGrad, RecurrentState};
use crate::rng::{derive_seed, Rng};
use crate::tensor::{Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("sample counts must be positive, got n_A={0} n_B={1}")]
    BadCounts(f64, f64),
    #[error("n_episodes must be at least 1")]
    NoEpisodes,
    #[error("held-out store is empty")]
    EmptyStore,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Maps observations to actions over one episode at a time.
pub trait Policy {
    fn begin(&mut self, goal: usize);
    fn act(&mut self, obs: &Tensor, goal: usize) -> Result<Action, EvalError>;
}

/// Greedy policy of a trained model: argmax for discrete actions, the
/// noise-free mean for continuous ones.
pub struct GreedyPolicy<'m> {
    model: &'m GoalModel,
    state: RecurrentState,
}

impl<'m> GreedyPolicy<'m> {
    pub fn new(model: &'m GoalModel) -> Self {
        Self {
            state: model.zero_state(1),
            model,
        }
    }
}

impl Policy for GreedyPolicy<'_> {
    fn begin(&mut self, _goal: usize) {
        self.state = self.model.zero_state(1);
    }

    fn act(&mut self, obs: &Tensor, goal: usize) -> Result<Action, EvalError> {
        greedy_step(self.model, obs, goal, &mut self.state)
    }
}

/// One greedy action, advancing `state`.
pub fn greedy_step(m: &GoalModel, obs: &Tensor, goal: usize, state: &mut RecurrentState) -> Result<Action, EvalError> {
    let mut g = Graph::inference(&m.params);
    let x = m.obs_input(&mut g, &[obs], false)?;
    let st = m.state_vars(&mut g, state);
    let f = m.features(&mut g, x, &[goal], st)?;
    let out = m.policy(&mut g, &f)?;
    *state = RecurrentState {
        h: g.value(f.state.h).clone(),
        c: g.value(f.state.c).clone(),
    };
    let v = g.value(out).data();
    Ok(match m.config.action {
        ActionSpace::Discrete(_) => Action::Discrete(crate::agents::argmax_index(v)),
        ActionSpace::Continuous(_) => Action::Continuous(v.to_vec()),
    })
}

/// Runs `n_episodes` episodes with seeds `derive_seed(base_seed, "eval", i)`
/// and returns the fraction that end in success.
pub fn success_ratio(policy: &mut dyn Policy, env: &mut dyn MultiTargetEnv, n_episodes: usize, base_seed: u64) -> Result<f64, EvalError> {
    let outcomes = episode_outcomes(policy, env, n_episodes, base_seed)?;
    Ok(outcomes.iter().filter(|&&o| o == Outcome::Success).count() as f64 / n_episodes as f64)
}

pub fn episode_outcomes(
    policy: &mut dyn Policy,
    env: &mut dyn MultiTargetEnv,
    n_episodes: usize,
    base_seed: u64,
) -> Result<Vec<Outcome>, EvalError> {
    if n_episodes == 0 {
        return Err(EvalError::NoEpisodes);
    }
    let mut out = Vec::with_capacity(n_episodes);
    for i in 0..n_episodes {
        let (mut obs, goal) = env.reset(derive_seed(base_seed, "eval", i as u64))?;
        policy.begin(goal);
        loop {
            let a = policy.act(&obs, goal)?;
            let r = env.step(&a)?;
            obs = r.observation;
            if r.done {
                out.push(r.outcome);
                break;
            }
        }
    }
    Ok(out)
}

/// Greedy success ratio of `model` on a fresh env built from `env_cfg`.
pub fn model_success_ratio(model: &GoalModel, env_cfg: &EnvConfig, n_episodes: usize, base_seed: u64) -> Result<f64, EvalError> {
    let mut env = env_cfg.build()?;
    success_ratio(&mut GreedyPolicy::new(model), env.as_mut(), n_episodes, base_seed)
}

/// Random-policy success ratio.
pub fn random_success_ratio(env_cfg: &EnvConfig, n_episodes: usize, base_seed: u64, rng: &mut Rng) -> Result<f64, EvalError> {
    struct R<'a>(&'a mut Rng, ActionSpace);
    impl Policy for R<'_> {
        fn begin(&mut self, _goal: usize) {}
        fn act(&mut self, _obs: &Tensor, _goal: usize) -> Result<Action, EvalError> {
            Ok(match self.1 {
                ActionSpace::Discrete(n) => Action::Discrete(self.0.gen_range(0..n)),
                ActionSpace::Continuous(d) => Action::Continuous((0..d).map(|_| self.0.gen_range(-1.0..1.0)).collect()),
            })
        }
    }
    let mut env = env_cfg.build()?;
    let space = env.action_space();
    success_ratio(&mut R(rng, space), env.as_mut(), n_episodes, base_seed)
}

/// `SRR = 100·n_B/n_A`, `SEI = 100·(n_A − n_B)/n_B`.
pub fn srr_sei(n_a: f64, n_b: f64) -> Result<(f64, f64), EvalError> {
    if !(n_a > 0.0 && n_b > 0.0 && n_a.is_finite() && n_b.is_finite()) {
        return Err(EvalError::BadCounts(n_a, n_b));
    }
    Ok((100.0 * n_b / n_a, 100.0 * (n_a - n_b) / n_b))
}

/// First curve update whose success ratio reaches `level`.
pub fn updates_to_reach(curve: &[CurveRow], level: f64) -> Option<u64> {
    curve.iter().find(|r| r.success_ratio >= level).map(|r| r.update)
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
    (m, v.sqrt())
}

/// One row of an SRR/SEI table; `n_b = None` when the reference ratio was
/// never reached.
#[derive(Debug, Clone, PartialEq)]
pub struct SrrRow {
    pub method: String,
    pub n_b: Option<u64>,
}

/// Plain-text table with columns method, updates, SRR and SEI.
pub fn render_srr_table(reference: &str, n_a: u64, rows: &[SrrRow]) -> String {
    let width = rows.iter().map(|r| r.method.len()).chain([reference.len(), 6]).max().unwrap_or(6);
    let mut s = String::new();
    let _ = writeln!(s, "{:<width$}  {:>12}  {:>9}  {:>9}", "method", "updates", "SRR (%)", "SEI (%)");
    let _ = writeln!(s, "{:<width$}  {:>12}  {:>9}  {:>9}", reference, n_a, "100.00", "0.00");
    for r in rows {
        match r.n_b.and_then(|b| srr_sei(n_a as f64, b as f64).ok().map(|x| (b, x))) {
            Some((b, (srr, sei))) => {
                let _ = writeln!(s, "{:<width$}  {:>12}  {:>9.2}  {:>9.2}", r.method, b, srr, sei);
            }
            None => {
                let _ = writeln!(s, "{:<width$}  {:>12}  {:>9}  {:>9}", r.method, "—", "—", "—");
            }
        }
    }
    s
}

/// Fraction of records whose argmax class equals the label (ties to the
/// lowest index).
pub fn discriminator_accuracy<'a>(
    model: &GoalModel,
    records: impl IntoIterator<Item = &'a GoalRecord>,
    eps_clip: f64,
) -> Result<f64, EvalError> {
    let records: Vec<&GoalRecord> = records.into_iter().collect();
    if records.is_empty() {
        return Err(EvalError::EmptyStore);
    }
    let mut hits = 0usize;
    for chunk in records.chunks(64) {
        let mut g = Graph::inference(&model.params);
        let states: Vec<&Tensor> = chunk.iter().map(|r| r.state.as_ref()).collect();
        let x = model.obs_input(&mut g, &states, false)?;
        let e = model.encode(&mut g, x)?;
        let (p, _) = model.discriminate(&mut g, e, eps_clip)?;
        let k = g.shape(p)[1];
        for (i, r) in chunk.iter().enumerate() {
            let row = &g.value(p).data()[i * k..(i + 1) * k];
            if crate::agents::argmax_index(row) == r.label {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / records.len() as f64)
}

/// Fraction of cross-goal pairs with `V(s_goal^z, I^z) > V(s_goal^j, I^z)`,
/// each state evaluated from a zero recurrent state.
pub fn value_discrimination(model: &GoalModel, records: &[&GoalRecord], n_pairs: usize, rng: &mut Rng) -> Result<f64, EvalError> {
    let n_goals = model.config.n_goals;
    let by_class: Vec<Vec<&GoalRecord>> = (0..n_goals)
        .map(|k| records.iter().copied().filter(|r| r.label == k).collect())
        .collect();
    let populated: Vec<usize> = (0..n_goals).filter(|&k| !by_class[k].is_empty()).collect();
    if populated.len() < 2 || n_pairs == 0 {
        return Err(EvalError::EmptyStore);
    }
    let mut wins = 0usize;
    for _ in 0..n_pairs {
        let z = populated[rng.gen_range(0..populated.len())];
        let j = loop {
            let j = populated[rng.gen_range(0..populated.len())];
            if j != z {
                break j;
            }
        };
        let a = by_class[z][rng.gen_range(0..by_class[z].len())];
        let b = by_class[j][rng.gen_range(0..by_class[j].len())];
        let mut g = Graph::inference(&model.params);
        let x = model.obs_input(&mut g, &[a.state.as_ref(), b.state.as_ref()], false)?;
        let st = model.state_vars(&mut g, &model.zero_state(2));
        let f = model.features(&mut g, x, &[z, z], st)?;
        let v = model.value(&mut g, &f, None)?;
        let v = g.value(v).data();
        if v[0] > v[1] {
            wins += 1;
        }
    }
    Ok(wins as f64 / n_pairs as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Policy,
    Value,
}

impl Head {
    pub fn as_str(self) -> &'static str {
        match self {
            Head::Policy => "policy",
            Head::Value => "value",
        }
    }
}

/// Saliency over the observation grid, `values[r * width + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl SaliencyMap {
    fn from_input_grad(grad: &Tensor, c: usize, h: usize, w: usize) -> Self {
        let mut values = vec![0.0; h * w];
        for ch in 0..c {
            for (i, v) in values.iter_mut().enumerate() {
                *v += grad.data()[ch * h * w + i].abs();
            }
        }
        let mut m = SaliencyMap { height: h, width: w, values };
        m.normalize();
        m
    }

    fn normalize(&mut self) {
        let max = self.values.iter().cloned().fold(0.0, f64::max);
        if max > 0.0 {
            for v in &mut self.values {
                *v /= max;
            }
        }
    }

    /// Cells sorted by decreasing saliency, ties by index.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.values.len()).collect();
        idx.sort_by(|&a, &b| self.values[b].total_cmp(&self.values[a]).then(a.cmp(&b)));
        idx
    }

    /// Summed saliency over the given `(row, col)` cells.
    pub fn mass(&self, cells: &[(usize, usize)]) -> f64 {
        cells.iter().map(|&(r, c)| self.values[r * self.width + c]).sum()
    }
}

/// The scalar that saliency differentiates: log-probability of the greedy
/// action (discrete) or the sum of action outputs (continuous) for the
/// policy head; `V` or `Q(s, π(s))` for the value head.
fn head_scalar(g: &mut Graph, model: &GoalModel, obs: crate::tensor::Var, goal: usize, state: &RecurrentState, head: Head) -> Result<crate::tensor::Var, EvalError> {
    let st = model.state_vars(g, state);
    let f = model.features(g, obs, &[goal], st)?;
    let out = match (head, model.config.action) {
        (Head::Policy, ActionSpace::Discrete(_)) => {
            let logits = model.policy(g, &f)?;
            let lp = g.log_softmax(logits)?;
            let a = crate::agents::argmax_index(g.value(logits).data());
            g.pick(lp, &[a])?
        }
        (Head::Policy, ActionSpace::Continuous(_)) => {
            let a = model.policy(g, &f)?;
            g.sum(a)?
        }
        (Head::Value, ActionSpace::Discrete(_)) => model.value(g, &f, None)?,
        (Head::Value, ActionSpace::Continuous(_)) => {
            let a = model.policy(g, &f)?;
            model.value(g, &f, Some(a))?
        }
    };
    Ok(g.sum(out)?)
}

/// Gradient saliency: `|∂ head / ∂ input|` summed over channels, scaled to
/// a maximum of 1. The query path is always differentiated, whatever the
/// model's training-time stop-gradient setting.
pub fn saliency_map(model: &GoalModel, obs: &Tensor, goal: usize, state: &RecurrentState, head: Head) -> Result<SaliencyMap, EvalError> {
    let flowing;
    let model = if model.config.query_grad == QueryGrad::Flow {
        model
    } else {
        let mut m = model.clone();
        m.config.query_grad = QueryGrad::Flow;
        flowing = m;
        &flowing
    };
    let [c, h, w] = model.config.obs_shape;
    let mut g = Graph::new(&model.params);
    let x = model.obs_input(&mut g, &[obs], true)?;
    let s = head_scalar(&mut g, model, x, goal, state, head)?;
    let grads = g.backward(s)?;
    Ok(SaliencyMap::from_input_grad(&grads.wrt(x), c, h, w))
}

/// Slow oracle: central differences per input element in place of the
/// analytic gradient.
pub fn perturbation_saliency(
    model: &GoalModel,
    obs: &Tensor,
    goal: usize,
    state: &RecurrentState,
    head: Head,
    step: f64,
) -> Result<SaliencyMap, EvalError> {
    let [c, h, w] = model.config.obs_shape;
    let eval = |o: &Tensor| -> Result<f64, EvalError> {
        let mut g = Graph::inference(&model.params);
        let x = model.obs_input(&mut g, &[o], false)?;
        let s = head_scalar(&mut g, model, x, goal, state, head)?;
        Ok(g.value(s).item())
    };
    let mut grad = Tensor::zeros(vec![c, h, w]);
    let mut probe = obs.clone();
    for i in 0..obs.len() {
        let x0 = probe.data()[i];
        probe.data_mut()[i] = x0 + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = x0 - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = x0;
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    Ok(SaliencyMap::from_input_grad(&grad, c, h, w))
}
