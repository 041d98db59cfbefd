//! Multi-target environments.
//!
//! * [`NavEnv`]: egocentric grid navigation with four object classes
//!   (tasks G1–G4).
//! * [`ArmEnv`]: planar two-link arm reaching for colored targets rendered
//!   to a small RGB raster (tasks A1–A3).
//!
//! Rewards stack: the step penalty accrues on every step including the
//! terminal one, and the terminal reward is added to it. A move onto the goal
//! in navigation therefore pays `10 + (−0.01) = 9.99`.
//!
//! Goal indices are zero-based in code (`0..N`); the negative class used by
//! the goal storage is index `N`.

mod arm;
mod nav;
mod task;

pub use arm::{ArmConfig, ArmEnv, ArmLayout, CLASS_COLORS};
pub use nav::{NavConfig, NavEnv, NavLayout, NAV_ACTIONS};
pub use task::{EnvConfig, Pool, TaskFamily, TaskId};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nets::ActionSpace;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("invalid environment config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("episode already finished; call reset")]
    EpisodeDone,
    #[error("environment has not been reset")]
    NotReset,
    #[error("invalid action: {0}")]
    InvalidAction(String),
    #[error("unknown task id {0:?}")]
    UnknownTask(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Ongoing,
    Success,
    NonGoal,
    Timeout,
}

impl Outcome {
    pub fn is_terminal(self) -> bool {
        self != Outcome::Ongoing
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Ongoing => "ongoing",
            Outcome::Success => "success",
            Outcome::NonGoal => "nongoal",
            Outcome::Timeout => "timeout",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rewards {
    pub success: f64,
    pub nongoal: f64,
    pub timeout: f64,
    pub step: f64,
}

impl Rewards {
    pub fn navigation() -> Self {
        Self {
            success: 10.0,
            nongoal: -1.0,
            timeout: -0.1,
            step: -0.01,
        }
    }

    pub fn arm() -> Self {
        Self {
            success: 1.0,
            nongoal: -0.3,
            timeout: -0.1,
            step: -0.01,
        }
    }

    /// Total reward for a step ending with `outcome`.
    pub fn for_outcome(&self, outcome: Outcome) -> f64 {
        self.step
            + match outcome {
                Outcome::Ongoing => 0.0,
                Outcome::Success => self.success,
                Outcome::NonGoal => self.nongoal,
                Outcome::Timeout => self.timeout,
            }
    }

    /// Every reward value a step can emit.
    pub fn reward_set(&self) -> [f64; 4] {
        [
            self.for_outcome(Outcome::Ongoing),
            self.for_outcome(Outcome::Success),
            self.for_outcome(Outcome::NonGoal),
            self.for_outcome(Outcome::Timeout),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Tensor,
    pub reward: f64,
    pub done: bool,
    pub outcome: Outcome,
}

/// Serializable description of an episode's initial layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layout {
    Nav(NavLayout),
    Arm(ArmLayout),
}

/// Observation-grid cells covered by the goal and by the non-goal objects.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObjectCells {
    pub goal: Vec<(usize, usize)>,
    pub nongoal: Vec<(usize, usize)>,
}

pub trait MultiTargetEnv: Send {
    /// Starts an episode whose layout, goal and textures are a pure function
    /// of `seed`. Returns the first observation and the goal index.
    fn reset(&mut self, seed: u64) -> Result<(Tensor, usize), EnvError>;
    fn step(&mut self, action: &Action) -> Result<StepResult, EnvError>;
    /// Current observation; rendering has no side effects.
    fn render(&self) -> Tensor;
    fn obs_shape(&self) -> [usize; 3];
    /// Number of instructable target classes.
    fn n_goals(&self) -> usize;
    fn action_space(&self) -> ActionSpace;
    fn max_steps(&self) -> usize;
    fn goal(&self) -> usize;
    fn steps_taken(&self) -> usize;
    fn rewards(&self) -> Rewards;
    fn layout(&self) -> Option<Layout>;
    /// Goal and non-goal object cells in the most recent frame of the
    /// observation grid.
    fn object_cells(&self) -> ObjectCells;
    /// Uniform-random action drawn from `rng`.
    fn random_action(&self, rng: &mut crate::rng::Rng) -> Action;
}
