use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::{CurveRow, Observer, OptimizerMode, SuccessWindow, TrainConfig, TrainError};
use crate::envs::{Action, EnvConfig, MultiTargetEnv, Outcome};
use crate::evalkit::discriminator_accuracy;
use crate::gace::{batch_loss, gace_update_step, total_loss, GaceConfig};
use crate::goal_storage::{GoalStore, StoreConfig};
use crate::nets::{ActionSpace, GoalModel, ModelConfig};
use crate::rng::{derive_seed, substream, Rng};
use crate::tensor::{Adam, AdamConfig, Graph, ParamGroup, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Arc<Tensor>,
    pub goal: usize,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Arc<Tensor>,
    pub done: bool,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.capacity == 0 {
            return;
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Uniform draw with replacement.
    pub fn sample(&self, m: usize, rng: &mut Rng) -> Result<Vec<&Transition>, TrainError> {
        if self.items.len() < m.max(1) {
            return Err(TrainError::ReplayUnderflow {
                have: self.items.len(),
                need: m,
            });
        }
        Ok((0..m).map(|_| &self.items[rng.gen_range(0..self.items.len())]).collect())
    }
}

struct Current {
    obs: Arc<Tensor>,
    goal: usize,
    id: u64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IterationStats {
    pub loss_critic: f64,
    pub loss_actor: f64,
    pub loss_gace: Option<f64>,
    pub trained: bool,
}

/// Arm trainer: deterministic actor, one critic with a soft-updated target
/// copy, Gaussian exploration, and the GACE step after each gradient step.
pub struct ArmTrainer {
    pub model: GoalModel,
    pub target: GoalModel,
    pub optimizer: Adam,
    pub gace_optimizer: Option<Adam>,
    pub store: GoalStore,
    pub heldout: GoalStore,
    pub replay: ReplayBuffer,
    pub train: TrainConfig,
    pub gace: GaceConfig,
    /// Iterations run; one env step each.
    pub updates: u64,
    pub gradient_steps: u64,
    pub episodes: u64,
    pub env_steps: u64,
    pub warmup_episodes: usize,
    pub window: SuccessWindow,
    env: Box<dyn MultiTargetEnv>,
    current: Option<Current>,
    noise_rng: Rng,
    replay_rng: Rng,
    warmup_rng: Rng,
}

impl ArmTrainer {
    pub fn new(model_cfg: ModelConfig, train: TrainConfig, gace: GaceConfig, env: &EnvConfig) -> Result<Self, TrainError> {
        let mut errs = train.validate();
        errs.extend(gace.validate());
        if !matches!(model_cfg.action, ActionSpace::Continuous(_)) {
            errs.push("off-policy trainer needs a continuous action space".into());
        }
        if !errs.is_empty() {
            return Err(TrainError::InvalidConfig(errs));
        }
        let env = env.build()?;
        let model = GoalModel::new(model_cfg, &mut substream(train.seed, "init"))?;
        let target = model.clone();
        let adam = AdamConfig {
            lr: train.lr,
            amsgrad: train.amsgrad,
            ..AdamConfig::default()
        };
        let store_cfg = StoreConfig {
            capacity: train.store_capacity,
            n_goals: model.config.n_goals,
            eps_negative: train.eps_negative,
        };
        Ok(Self {
            optimizer: Adam::new(&model.params, adam),
            gace_optimizer: (train.optimizer == OptimizerMode::Split).then(|| Adam::new(&model.params, adam)),
            store: GoalStore::new(store_cfg.clone(), substream(train.seed, "storage")),
            heldout: GoalStore::new(store_cfg, substream(train.seed, "heldout")),
            replay: ReplayBuffer::new(train.replay_capacity),
            model,
            target,
            updates: 0,
            gradient_steps: 0,
            episodes: 0,
            env_steps: 0,
            warmup_episodes: 0,
            window: SuccessWindow::new(train.success_window),
            env,
            current: None,
            noise_rng: substream(train.seed, "exploration"),
            replay_rng: substream(train.seed, "replay"),
            warmup_rng: substream(train.seed, "warmup"),
            train,
            gace,
        })
    }

    fn gace_enabled(&self) -> bool {
        self.model.config.variant.uses_gace() && self.gace.eta > 0.0
    }

    pub fn warmup(&mut self) -> Result<usize, TrainError> {
        if !self.gace_enabled() || self.train.warmup == 0 {
            return Ok(0);
        }
        let n = self.store.warmup_fill(
            self.env.as_mut(),
            &mut self.warmup_rng,
            self.train.warmup,
            derive_seed(self.train.seed, "warmup", 0),
            self.train.warmup_budget,
        )?;
        self.warmup_episodes = n;
        Ok(n)
    }

    /// Deterministic action `π(s, z)` for a batch.
    pub fn act(model: &GoalModel, obs: &[&Tensor], goals: &[usize]) -> Result<Tensor, TrainError> {
        let mut g = Graph::inference(&model.params);
        let x = model.obs_input(&mut g, obs, false)?;
        let st = model.state_vars(&mut g, &model.zero_state(obs.len()));
        let f = model.features(&mut g, x, goals, st)?;
        let a = model.policy(&mut g, &f)?;
        Ok(g.value(a).clone())
    }

    /// θ' ← (1−τ)θ' + τθ.
    pub fn soft_update(&mut self) {
        self.target.params.soft_update_from(&self.model.params, self.train.tau);
    }

    fn env_step(&mut self) -> Result<(), TrainError> {
        if self.current.is_none() {
            let id = self.episodes;
            let (obs, goal) = self.env.reset(derive_seed(self.train.seed, "env", id))?;
            self.current = Some(Current {
                obs: Arc::new(obs),
                goal,
                id,
            });
        }
        let cur = self.current.as_ref().expect("episode running");
        let mean = Self::act(&self.model, &[cur.obs.as_ref()], &[cur.goal])?;
        let noise = Normal::new(0.0, self.train.noise.max(1e-12)).expect("finite noise");
        let action: Vec<f64> = mean
            .data()
            .iter()
            .map(|&m| {
                let n = if self.train.noise > 0.0 { noise.sample(&mut self.noise_rng) } else { 0.0 };
                (m + n).clamp(-1.0, 1.0)
            })
            .collect();
        let res = self.env.step(&Action::Continuous(action.clone()))?;
        self.env_steps += 1;
        let next = Arc::new(res.observation);
        let cur = self.current.take().expect("episode running");
        self.replay.push(Transition {
            obs: cur.obs,
            goal: cur.goal,
            action,
            reward: res.reward,
            next_obs: next.clone(),
            done: res.done,
        });
        if res.done {
            if cur.id.is_multiple_of(self.train.holdout_every) {
                self.heldout.record_outcome(&next, cur.goal, res.outcome, cur.id)?;
            } else {
                self.store.record_outcome(&next, cur.goal, res.outcome, cur.id)?;
            }
            self.window.push(res.outcome == Outcome::Success);
            self.episodes += 1;
        } else {
            self.current = Some(Current {
                obs: next,
                goal: cur.goal,
                id: cur.id,
            });
        }
        Ok(())
    }

    /// Critic regression, actor ascent, target update and GACE.
    pub fn gradient_step(&mut self) -> Result<IterationStats, TrainError> {
        let bsz = self.train.batch;
        let batch: Vec<Transition> = self.replay.sample(bsz, &mut self.replay_rng)?.into_iter().cloned().collect();
        let obs: Vec<&Tensor> = batch.iter().map(|t| t.obs.as_ref()).collect();
        let next: Vec<&Tensor> = batch.iter().map(|t| t.next_obs.as_ref()).collect();
        let goals: Vec<usize> = batch.iter().map(|t| t.goal).collect();
        let adim = batch[0].action.len();

        // y = r + γ(1−d)·Q'(s', π(s'))
        let next_actions = Self::act(&self.model, &next, &goals)?;
        let q_next = {
            let m = &self.target;
            let mut g = Graph::inference(&m.params);
            let x = m.obs_input(&mut g, &next, false)?;
            let st = m.state_vars(&mut g, &m.zero_state(bsz));
            let f = m.features(&mut g, x, &goals, st)?;
            let a = g.constant(next_actions);
            let q = m.value(&mut g, &f, Some(a))?;
            g.value(q).clone()
        };
        let y: Vec<f64> = batch
            .iter()
            .zip(q_next.data())
            .map(|(t, &q)| t.reward + if t.done { 0.0 } else { self.train.gamma * q })
            .collect();

        let gace_active = self.gace_enabled() && !self.gace.is_frozen(self.updates) && self.store.len() >= self.gace.batch;
        let shared_gace = gace_active && self.train.optimizer == OptimizerMode::Shared;
        let records = if shared_gace {
            Some(self.store.sample_batch(self.gace.batch)?)
        } else {
            None
        };
        let (lc, lg, mut grads) = {
            let m = &self.model;
            let mut g = Graph::new(&m.params);
            let x = m.obs_input(&mut g, &obs, false)?;
            let st = m.state_vars(&mut g, &m.zero_state(bsz));
            let f = m.features(&mut g, x, &goals, st)?;
            let acts: Vec<f64> = batch.iter().flat_map(|t| t.action.iter().copied()).collect();
            let a = g.constant(Tensor::new(vec![bsz, adim], acts)?);
            let q = m.value(&mut g, &f, Some(a))?;
            let yv = g.constant(Tensor::new(vec![bsz, 1], y)?);
            let d = g.sub(q, yv)?;
            let d2 = g.square(d)?;
            let lc = g.mean(d2)?;
            let lc_val = g.value(lc).item();
            let (loss, lg) = match &records {
                Some(r) => {
                    let (lg, _) = batch_loss(&mut g, m, r, &self.gace)?;
                    let v = g.value(lg).item();
                    (total_loss(&mut g, lc, lg, self.gace.eta)?, Some(v))
                }
                None => (lc, None),
            };
            (lc_val, lg, g.backward(loss)?)
        };
        grads.retain_params(&self.model.params, |grp| grp != ParamGroup::PolicyHead);
        if !grads.is_finite() || !lc.is_finite() {
            return Err(TrainError::NonFinite {
                update: self.updates,
                detail: format!("critic loss {lc}"),
            });
        }
        grads.clip_global_norm(self.train.clip_norm);
        self.optimizer.step(&mut self.model.params, &grads)?;

        let (la, mut agrads) = {
            let m = &self.model;
            let mut g = Graph::new(&m.params);
            let x = m.obs_input(&mut g, &obs, false)?;
            let st = m.state_vars(&mut g, &m.zero_state(bsz));
            let f = m.features(&mut g, x, &goals, st)?;
            let h = g.detach(f.heads_in);
            let a = m.policy_from(&mut g, h)?;
            let q = m.value_from(&mut g, h, Some(a))?;
            let mq = g.mean(q)?;
            let la = g.scale(mq, -1.0)?;
            (g.value(la).item(), g.backward(la)?)
        };
        agrads.retain_params(&self.model.params, |grp| grp == ParamGroup::PolicyHead);
        if !agrads.is_finite() {
            return Err(TrainError::NonFinite {
                update: self.updates,
                detail: format!("actor loss {la}"),
            });
        }
        agrads.clip_global_norm(self.train.clip_norm);
        self.optimizer
            .step_filtered(&mut self.model.params, &agrads, |grp| grp == ParamGroup::PolicyHead)?;

        self.gradient_steps += 1;
        if self.gradient_steps.is_multiple_of(self.train.target_interval) {
            self.soft_update();
        }
        let mut loss_gace = lg;
        if gace_active {
            if let Some(opt) = self.gace_optimizer.as_mut() {
                loss_gace = gace_update_step(
                    &mut self.store,
                    &mut self.model,
                    opt,
                    &self.gace,
                    self.updates,
                    self.train.clip_norm,
                )?;
            }
        }
        Ok(IterationStats {
            loss_critic: lc,
            loss_actor: la,
            loss_gace,
            trained: true,
        })
    }

    /// One env step, then one gradient step once the replay holds a batch.
    pub fn iteration(&mut self) -> Result<IterationStats, TrainError> {
        self.env_step()?;
        let stats = if self.replay.len() >= self.train.batch {
            self.gradient_step()?
        } else {
            IterationStats::default()
        };
        self.updates += 1;
        Ok(stats)
    }

    pub fn curve_row(&self, stats: &IterationStats) -> Result<CurveRow, TrainError> {
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
            loss_total: stats.loss_critic + stats.loss_actor,
            loss_policy: stats.loss_actor,
            loss_value: stats.loss_critic,
            entropy: 0.0,
            loss_gace: stats.loss_gace,
            disc_accuracy,
            store_size: self.store.len(),
        })
    }

    pub fn run(&mut self, observer: &mut dyn Observer) -> Result<(), TrainError> {
        while self.updates < self.train.total_updates {
            let stats = self.iteration()?;
            if self.updates.is_multiple_of(self.train.log_interval) || self.updates == self.train.total_updates {
                observer.on_row(&self.curve_row(&stats)?)?;
            }
        }
        Ok(())
    }
}
