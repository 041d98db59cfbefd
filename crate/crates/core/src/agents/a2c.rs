use rand::Rng as _;

use super::{CurveRow, Observer, OptimizerMode, SuccessWindow, TrainConfig, TrainError};
use crate::envs::{Action, EnvConfig, MultiTargetEnv, Outcome};
use crate::evalkit::discriminator_accuracy;
use crate::gace::{batch_loss, gace_update_step, total_loss, GaceConfig};
use crate::goal_storage::{GoalStore, StoreConfig};
use crate::nets::{GoalModel, ModelConfig};
use crate::rng::{derive_seed, substream, Rng};
use crate::tensor::{Adam, AdamConfig, Graph, Tensor, Var};

/// Index drawn from a probability row.
pub(crate) fn sample_categorical(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Lowest index of the largest entry.
pub fn argmax_index(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// One lockstep episode per env.
#[derive(Debug, Clone, Default)]
pub struct EpisodeTrace {
    pub seed: u64,
    pub goal: usize,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub outcome: Option<Outcome>,
    pub final_obs: Option<Tensor>,
}

impl EpisodeTrace {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Rollout {
    pub episodes: Vec<EpisodeTrace>,
}

impl Rollout {
    pub fn env_steps(&self) -> usize {
        self.episodes.iter().map(EpisodeTrace::len).sum()
    }
}

/// Graph handles for one lockstep step across all envs. `mask[i]` is 1 while
/// env `i` was still running at this step.
#[derive(Debug, Clone)]
pub struct StepVars {
    pub log_probs: Var,
    pub value: Var,
    pub actions: Vec<usize>,
    pub mask: Vec<f64>,
}

/// Plays one episode per env to termination, recording every step on `g`.
/// The recurrent state starts at zero for every env.
pub fn collect_rollout(
    g: &mut Graph,
    model: &GoalModel,
    envs: &mut [Box<dyn MultiTargetEnv>],
    seeds: &[u64],
    rng: &mut Rng,
) -> Result<(Rollout, Vec<StepVars>), TrainError> {
    let n = envs.len();
    let mut rollout = Rollout::default();
    let mut obs = Vec::with_capacity(n);
    for (i, env) in envs.iter_mut().enumerate() {
        let (o, goal) = env.reset(seeds[i]).map_err(|source| TrainError::Env { index: i, source })?;
        obs.push(o);
        rollout.episodes.push(EpisodeTrace {
            seed: seeds[i],
            goal,
            ..Default::default()
        });
    }
    let goals: Vec<usize> = rollout.episodes.iter().map(|e| e.goal).collect();
    let zero = model.zero_state(n);
    debug_assert!(zero.h.data().iter().all(|&x| x == 0.0));
    let mut state = model.state_vars(g, &zero);
    let mut active = vec![true; n];
    let mut steps = Vec::new();
    while active.iter().any(|&a| a) {
        let refs: Vec<&Tensor> = obs.iter().collect();
        let x = model.obs_input(g, &refs, false)?;
        let f = model.features(g, x, &goals, state)?;
        let logits = model.policy(g, &f)?;
        let value = model.value(g, &f, None)?;
        let log_probs = g.log_softmax(logits)?;
        let k = g.shape(log_probs)[1];
        let mut actions = vec![0; n];
        let mut mask = vec![0.0; n];
        for i in 0..n {
            if !active[i] {
                continue;
            }
            let lp = &g.value(log_probs).data()[i * k..(i + 1) * k];
            let probs: Vec<f64> = lp.iter().map(|x| x.exp()).collect();
            let a = sample_categorical(&probs, rng);
            actions[i] = a;
            mask[i] = 1.0;
            let res = envs[i]
                .step(&Action::Discrete(a))
                .map_err(|source| TrainError::Env { index: i, source })?;
            let ep = &mut rollout.episodes[i];
            ep.actions.push(a);
            ep.rewards.push(res.reward);
            ep.values.push(g.value(value).data()[i]);
            ep.log_probs.push(lp[a]);
            if res.done {
                active[i] = false;
                ep.outcome = Some(res.outcome);
                ep.final_obs = Some(res.observation.clone());
            }
            obs[i] = res.observation;
        }
        steps.push(StepVars {
            log_probs,
            value,
            actions,
            mask,
        });
        state = f.state;
    }
    Ok((rollout, steps))
}

#[derive(Debug, Clone, Copy)]
pub struct A2cLoss {
    pub total: Var,
    pub policy: f64,
    pub value: f64,
    /// Mean policy entropy per recorded step.
    pub entropy: f64,
}

/// `L_p = −Σ log π(a|s,I)·(R−V) − β·Σ H(π)`, `L_v = Σ (R−V)²`,
/// `L_RL = L_p + c_v·L_v`, with Monte-Carlo returns and the advantage held
/// constant.
pub fn a2c_loss(g: &mut Graph, steps: &[StepVars], rollout: &Rollout, cfg: &TrainConfig) -> Result<A2cLoss, TrainError> {
    let returns: Vec<Vec<f64>> = rollout
        .episodes
        .iter()
        .map(|e| super::discounted_return(&e.rewards, cfg.gamma, 0.0))
        .collect();
    let n = rollout.episodes.len();
    let mut pol_terms = Vec::new();
    let mut val_terms = Vec::new();
    let mut ent_terms = Vec::new();
    let mut active_steps = 0usize;
    for (t, st) in steps.iter().enumerate() {
        let k = g.shape(st.log_probs)[1];
        let mut adv = vec![0.0; n];
        let mut ret = vec![0.0; n];
        let mut mask_rows = vec![0.0; n * k];
        for i in 0..n {
            if st.mask[i] == 0.0 {
                continue;
            }
            active_steps += 1;
            ret[i] = returns[i][t];
            adv[i] = ret[i] - g.value(st.value).data()[i];
            mask_rows[i * k..(i + 1) * k].fill(1.0);
        }
        let adv = g.constant(Tensor::new(vec![n, 1], adv)?);
        let ret = g.constant(Tensor::new(vec![n, 1], ret)?);
        let mask_col = g.constant(Tensor::new(vec![n, 1], st.mask.clone())?);
        let mask_rows = g.constant(Tensor::new(vec![n, k], mask_rows)?);

        let picked = g.pick(st.log_probs, &st.actions)?;
        let pg = g.mul(picked, adv)?;
        pol_terms.push(g.sum(pg)?);

        let p = g.exp(st.log_probs)?;
        let plp = g.mul(p, st.log_probs)?;
        let plp = g.mul(plp, mask_rows)?;
        ent_terms.push(g.sum(plp)?);

        let d = g.sub(ret, st.value)?;
        let d2 = g.square(d)?;
        let d2 = g.mul(d2, mask_col)?;
        val_terms.push(g.sum(d2)?);
    }
    let sum_all = |g: &mut Graph, xs: &[Var]| -> Result<Var, TrainError> {
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = g.add(acc, x)?;
        }
        Ok(acc)
    };
    if steps.is_empty() {
        return Err(TrainError::InvalidConfig(vec!["empty rollout".into()]));
    }
    let pg = sum_all(g, &pol_terms)?;
    // Σ p·log p = −H
    let neg_h = sum_all(g, &ent_terms)?;
    let lv = sum_all(g, &val_terms)?;
    let a = g.scale(pg, -1.0)?;
    let b = g.scale(neg_h, cfg.entropy_coef)?;
    let lp = g.add(a, b)?;
    let cv = g.scale(lv, cfg.value_coef)?;
    let total = g.add(lp, cv)?;
    Ok(A2cLoss {
        total,
        policy: g.value(lp).item(),
        value: g.value(lv).item(),
        entropy: -g.value(neg_h).item() / active_steps.max(1) as f64,
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct UpdateStats {
    pub loss_total: f64,
    pub loss_policy: f64,
    pub loss_value: f64,
    pub entropy: f64,
    pub loss_gace: Option<f64>,
}

/// Navigation trainer: warmup, then synchronous A2C with GACE.
pub struct NavTrainer {
    pub model: GoalModel,
    pub optimizer: Adam,
    pub gace_optimizer: Option<Adam>,
    pub store: GoalStore,
    pub heldout: GoalStore,
    pub train: TrainConfig,
    pub gace: GaceConfig,
    pub updates: u64,
    pub episodes: u64,
    pub env_steps: u64,
    pub warmup_episodes: usize,
    pub gace_updates: u64,
    pub window: SuccessWindow,
    envs: Vec<Box<dyn MultiTargetEnv>>,
    action_rng: Rng,
    warmup_rng: Rng,
}

impl NavTrainer {
    pub fn new(model_cfg: ModelConfig, train: TrainConfig, gace: GaceConfig, env: &EnvConfig) -> Result<Self, TrainError> {
        let mut errs = train.validate();
        errs.extend(gace.validate());
        if !errs.is_empty() {
            return Err(TrainError::InvalidConfig(errs));
        }
        let envs = (0..train.n_envs).map(|_| env.build()).collect::<Result<Vec<_>, _>>()?;
        let model = GoalModel::new(model_cfg, &mut substream(train.seed, "init"))?;
        let adam = AdamConfig {
            lr: train.lr,
            amsgrad: train.amsgrad,
            ..AdamConfig::default()
        };
        let optimizer = Adam::new(&model.params, adam);
        let gace_optimizer = (train.optimizer == OptimizerMode::Split).then(|| Adam::new(&model.params, adam));
        let store_cfg = StoreConfig {
            capacity: train.store_capacity,
            n_goals: model.config.n_goals,
            eps_negative: train.eps_negative,
        };
        Ok(Self {
            store: GoalStore::new(store_cfg.clone(), substream(train.seed, "storage")),
            heldout: GoalStore::new(store_cfg, substream(train.seed, "heldout")),
            model,
            optimizer,
            gace_optimizer,
            updates: 0,
            episodes: 0,
            env_steps: 0,
            warmup_episodes: 0,
            gace_updates: 0,
            window: SuccessWindow::new(train.success_window),
            envs,
            action_rng: substream(train.seed, "exploration"),
            warmup_rng: substream(train.seed, "warmup"),
            train,
            gace,
        })
    }

    fn gace_enabled(&self) -> bool {
        self.model.config.variant.uses_gace() && self.gace.eta > 0.0
    }

    /// Fills the goal store with random-policy episodes. A no-op for the
    /// base variant.
    pub fn warmup(&mut self) -> Result<usize, TrainError> {
        if !self.gace_enabled() || self.train.warmup == 0 {
            return Ok(0);
        }
        let n = self.store.warmup_fill(
            self.envs[0].as_mut(),
            &mut self.warmup_rng,
            self.train.warmup,
            derive_seed(self.train.seed, "warmup", 0),
            self.train.warmup_budget,
        )?;
        self.warmup_episodes = n;
        Ok(n)
    }

    fn gace_active(&self) -> bool {
        self.gace_enabled() && !self.gace.is_frozen(self.updates) && self.store.len() >= self.gace.batch
    }

    pub fn update(&mut self) -> Result<UpdateStats, TrainError> {
        let n = self.envs.len();
        let seeds: Vec<u64> = (0..n as u64)
            .map(|i| derive_seed(self.train.seed, "env", self.episodes + i))
            .collect();
        let gace_active = self.gace_active();
        let shared_gace = gace_active && self.train.optimizer == OptimizerMode::Shared;
        let batch = if shared_gace {
            Some(self.store.sample_batch(self.gace.batch)?)
        } else {
            None
        };
        let (rollout, loss, l_gace, mut grads, total_value) = {
            let mut g = Graph::new(&self.model.params);
            let (rollout, steps) = collect_rollout(&mut g, &self.model, &mut self.envs, &seeds, &mut self.action_rng)?;
            let loss = a2c_loss(&mut g, &steps, &rollout, &self.train)?;
            let (total, l_gace) = match &batch {
                Some(b) => {
                    let (lg, _) = batch_loss(&mut g, &self.model, b, &self.gace)?;
                    let lg_val = g.value(lg).item();
                    let t = total_loss(&mut g, loss.total, lg, self.gace.eta).map_err(|_| TrainError::NonFinite {
                        update: self.updates,
                        detail: format!("L_RL={} L_GACE={}", g.value(loss.total).item(), lg_val),
                    })?;
                    (t, Some(lg_val))
                }
                None => (loss.total, None),
            };
            let tv = g.value(total).item();
            let grads = g.backward(total)?;
            (rollout, loss, l_gace, grads, tv)
        };
        if !total_value.is_finite() || !grads.is_finite() {
            return Err(TrainError::NonFinite {
                update: self.updates,
                detail: format!(
                    "loss={total_value} policy={} value={} grad_norm={}",
                    loss.policy,
                    loss.value,
                    grads.global_norm()
                ),
            });
        }
        grads.clip_global_norm(self.train.clip_norm);
        self.optimizer.step(&mut self.model.params, &grads)?;
        let mut stats = UpdateStats {
            loss_total: total_value,
            loss_policy: loss.policy,
            loss_value: loss.value,
            entropy: loss.entropy,
            loss_gace: l_gace,
        };
        if gace_active {
            if let Some(opt) = self.gace_optimizer.as_mut() {
                stats.loss_gace = gace_update_step(
                    &mut self.store,
                    &mut self.model,
                    opt,
                    &self.gace,
                    self.updates,
                    self.train.clip_norm,
                )?;
            }
            self.gace_updates += 1;
        }
        for (i, ep) in rollout.episodes.iter().enumerate() {
            let id = self.episodes + i as u64;
            let outcome = ep.outcome.expect("finished episode");
            let last = ep.final_obs.as_ref().expect("finished episode");
            if id.is_multiple_of(self.train.holdout_every) {
                self.heldout.record_outcome(last, ep.goal, outcome, id)?;
            } else {
                self.store.record_outcome(last, ep.goal, outcome, id)?;
            }
            self.window.push(outcome == Outcome::Success);
        }
        self.episodes += n as u64;
        self.env_steps += rollout.env_steps() as u64;
        self.updates += 1;
        Ok(stats)
    }

    pub fn curve_row(&self, stats: &UpdateStats) -> Result<CurveRow, TrainError> {
        let disc_accuracy = if self.model.config.variant.uses_gace() && !self.heldout.is_empty() {
            Some(discriminator_accuracy(&self.model, self.heldout.records(), self.gace.eps_clip)?)
        } else {
            None
        };
        Ok(CurveRow {
            update: self.updates,
            env_steps: self.env_steps,
            episodes: self.episodes,
            success_ratio: self.window.ratio(),
            loss_total: stats.loss_total,
            loss_policy: stats.loss_policy,
            loss_value: stats.loss_value,
            entropy: stats.entropy,
            loss_gace: stats.loss_gace,
            disc_accuracy,
            store_size: self.store.len(),
        })
    }

    /// Runs updates until `total_updates`, reporting rows to `observer`.
    pub fn run(&mut self, observer: &mut dyn Observer) -> Result<(), TrainError> {
        while self.updates < self.train.total_updates {
            let stats = self.update()?;
            if self.updates.is_multiple_of(self.train.log_interval) || self.updates == self.train.total_updates {
                let row = self.curve_row(&stats)?;
                observer.on_row(&row)?;
            }
        }
        Ok(())
    }
}
