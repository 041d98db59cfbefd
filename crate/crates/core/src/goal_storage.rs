//! Auto-labeled goal states for the discriminator.
//!
//! A successful episode stores its terminal observation under the instructed
//! goal. A failed one (non-goal or timeout) is stored with probability `ε_N`
//! under the extra negative class, index `n_goals`.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{EnvError, MultiTargetEnv, Outcome};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("goal store holds {have} records, batch needs {need}")]
    Insufficient { have: usize, need: usize },
    #[error("warmup stopped after {episodes} episodes with {count} of {target} records")]
    WarmupBudget { episodes: usize, count: u64, target: u64 },
    #[error("warmup target {0} exceeds store capacity {1}")]
    WarmupTooLarge(u64, usize),
    #[error("goal index {goal} out of range for {n_goals} goals")]
    BadGoal { goal: usize, n_goals: usize },
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreConfig {
    pub capacity: usize,
    pub n_goals: usize,
    /// Probability of keeping a failed episode as a negative case.
    pub eps_negative: f64,
}

impl StoreConfig {
    /// Label width: one extra column for the negative class when it is used.
    pub fn n_classes(&self) -> usize {
        if self.eps_negative > 0.0 {
            self.n_goals + 1
        } else {
            self.n_goals
        }
    }
}

/// Snapshot plus label. The state is shared and never mutated.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalRecord {
    pub state: Arc<Tensor>,
    pub label: usize,
    pub episode: u64,
}

impl GoalRecord {
    pub fn one_hot(&self, n_classes: usize) -> Vec<f64> {
        let mut v = vec![0.0; n_classes];
        v[self.label] = 1.0;
        v
    }
}

#[derive(Debug, Clone)]
pub struct GoalStore {
    config: StoreConfig,
    records: VecDeque<GoalRecord>,
    inserted: u64,
    rng: Rng,
}

impl GoalStore {
    pub fn new(config: StoreConfig, rng: Rng) -> Self {
        Self {
            config,
            records: VecDeque::new(),
            inserted: 0,
            rng,
        }
    }

    pub fn from_parts(config: StoreConfig, records: Vec<GoalRecord>, inserted: u64, rng: Rng) -> Self {
        Self {
            config,
            records: records.into(),
            inserted,
            rng,
        }
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Total insertions, including evicted ones.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn records(&self) -> impl ExactSizeIterator<Item = &GoalRecord> {
        self.records.iter()
    }

    pub fn rng(&self) -> &Rng {
        &self.rng
    }

    pub fn n_classes(&self) -> usize {
        self.config.n_classes()
    }

    /// Appends unconditionally, evicting the oldest record when full.
    pub fn push(&mut self, record: GoalRecord) {
        if self.config.capacity == 0 {
            return;
        }
        if self.records.len() == self.config.capacity {
            self.records.pop_front();
        }
        self.records.push_back(record);
        self.inserted += 1;
    }

    /// Applies the storage rule to an episode's final state. Returns whether
    /// a record was inserted.
    pub fn record_outcome(&mut self, state: &Tensor, goal: usize, outcome: Outcome, episode: u64) -> Result<bool, StoreError> {
        if goal >= self.config.n_goals {
            return Err(StoreError::BadGoal {
                goal,
                n_goals: self.config.n_goals,
            });
        }
        let label = match outcome {
            Outcome::Success => goal,
            Outcome::Ongoing => return Ok(false),
            Outcome::NonGoal | Outcome::Timeout => {
                if self.config.eps_negative <= 0.0 || !self.rng.gen_bool(self.config.eps_negative.min(1.0)) {
                    return Ok(false);
                }
                self.config.n_goals
            }
        };
        self.push(GoalRecord {
            state: Arc::new(state.clone()),
            label,
            episode,
        });
        Ok(true)
    }

    /// `m` records drawn uniformly with replacement.
    pub fn sample_batch(&mut self, m: usize) -> Result<Vec<GoalRecord>, StoreError> {
        if self.records.len() < m.max(1) {
            return Err(StoreError::Insufficient {
                have: self.records.len(),
                need: m.max(1),
            });
        }
        let n = self.records.len();
        Ok((0..m).map(|_| self.records[self.rng.gen_range(0..n)].clone()).collect())
    }

    /// Runs uniform-random episodes until at least `min_count` records have
    /// been inserted. Episode `i` is reset with `derive_seed(seed, "warmup", i)`.
    /// Returns the number of episodes run.
    pub fn warmup_fill(
        &mut self,
        env: &mut dyn MultiTargetEnv,
        policy_rng: &mut Rng,
        min_count: u64,
        seed: u64,
        max_episodes: usize,
    ) -> Result<usize, StoreError> {
        if min_count > self.config.capacity as u64 {
            return Err(StoreError::WarmupTooLarge(min_count, self.config.capacity));
        }
        let start = self.inserted;
        let mut episodes = 0;
        while self.inserted - start < min_count {
            if episodes >= max_episodes {
                return Err(StoreError::WarmupBudget {
                    episodes,
                    count: self.inserted - start,
                    target: min_count,
                });
            }
            let (_, goal) = env.reset(derive_seed(seed, "warmup", episodes as u64))?;
            loop {
                let a = env.random_action(policy_rng);
                let r = env.step(&a)?;
                if r.done {
                    self.record_outcome(&r.observation, goal, r.outcome, episodes as u64)?;
                    break;
                }
            }
            episodes += 1;
        }
        Ok(episodes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::from_seed;

    fn store(cap: usize, eps: f64) -> GoalStore {
        GoalStore::new(
            StoreConfig {
                capacity: cap,
                n_goals: 4,
                eps_negative: eps,
            },
            from_seed(9),
        )
    }

    fn t(x: f64) -> Tensor {
        Tensor::row(vec![x, -x])
    }

    #[test]
    fn success_stores_goal_label() {
        let mut s = store(10, 0.0);
        assert!(s.record_outcome(&t(1.0), 2, Outcome::Success, 0).unwrap());
        let r = s.sample_batch(1).unwrap();
        assert_eq!(r[0].one_hot(4), vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(*r[0].state, t(1.0));
    }

    #[test]
    fn failures_never_stored_without_negatives() {
        let mut s = store(10, 0.0);
        for i in 0..100 {
            assert!(!s.record_outcome(&t(0.0), 1, Outcome::Timeout, i).unwrap());
            assert!(!s.record_outcome(&t(0.0), 1, Outcome::NonGoal, i).unwrap());
        }
        assert!(s.is_empty());
        assert_eq!(s.n_classes(), 4);
    }

    #[test]
    fn negative_rate_is_binomial() {
        let mut s = store(100_000, 0.05);
        let n = 10_000;
        for i in 0..n {
            s.record_outcome(&t(0.0), 0, Outcome::Timeout, i).unwrap();
        }
        let mean = n as f64 * 0.05;
        let sd = (n as f64 * 0.05 * 0.95).sqrt();
        assert!((s.len() as f64 - mean).abs() < 3.0 * sd, "{}", s.len());
        assert!(s.records().all(|r| r.label == 4));
    }

    #[test]
    fn fifo_eviction() {
        let mut s = store(5, 0.0);
        for i in 0..8 {
            s.record_outcome(&t(i as f64), 0, Outcome::Success, i).unwrap();
        }
        let eps: Vec<u64> = s.records().map(|r| r.episode).collect();
        assert_eq!(eps, vec![3, 4, 5, 6, 7]);
        assert_eq!(s.inserted(), 8);
    }

    #[test]
    fn sampling_is_uniform_and_checks_size() {
        let mut s = store(5, 0.0);
        assert!(matches!(s.sample_batch(1), Err(StoreError::Insufficient { .. })));
        s.record_outcome(&t(0.0), 0, Outcome::Success, 0).unwrap();
        s.record_outcome(&t(1.0), 1, Outcome::Success, 1).unwrap();
        assert!(s.sample_batch(3).is_err());
        let zeros = (0..10_000).filter(|_| s.sample_batch(1).unwrap()[0].label == 0).count() as f64;
        assert!((zeros - 5000.0).abs() < 3.0 * 50.0);
    }
}
