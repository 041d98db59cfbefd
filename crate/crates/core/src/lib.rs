//! Goal-aware multi-target reinforcement learning.
//!
//! Goal-aware cross-entropy (GACE) trains the feature extractor and a
//! goal-discriminator on auto-labeled goal states next to the RL loss;
//! goal-discriminative attention (GDAN) feeds the discriminator's query into
//! the actor-critic.

pub mod agents;
pub mod checkpoint;
pub mod cli;
pub mod envs;
pub mod evalkit;
pub mod gace;
pub mod goal_storage;
pub mod nets;
pub mod pixmap;
pub mod rng;
pub mod tensor;
