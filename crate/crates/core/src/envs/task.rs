use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{ArmConfig, ArmEnv, EnvError, MultiTargetEnv, NavConfig, NavEnv};

pub const SEEN_TEXTURES: std::ops::Range<u32> = 0..40;
pub const UNSEEN_TEXTURES: std::ops::Range<u32> = 40..50;
pub const SEEN_PATTERNS: std::ops::Range<u32> = 0..5;
pub const UNSEEN_PATTERNS: std::ops::Range<u32> = 5..10;

/// Seed of the fixed maze used by G3 and G4.
pub const MAZE_SEED: u64 = 7;
pub const MAZE_DENSITY: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskFamily {
    G1,
    G2,
    G3,
    G4,
    A1,
    A2,
    A3,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 7] = [Self::G1, Self::G2, Self::G3, Self::G4, Self::A1, Self::A2, Self::A3];

    pub fn is_navigation(self) -> bool {
        matches!(self, Self::G1 | Self::G2 | Self::G3 | Self::G4)
    }

    /// Families with a seen/unseen split.
    pub fn has_pools(self) -> bool {
        matches!(self, Self::G2 | Self::G4 | Self::A2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    Seen,
    Unseen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TaskId {
    pub family: TaskFamily,
    pub pool: Pool,
}

impl TaskId {
    pub fn seen(family: TaskFamily) -> Self {
        Self { family, pool: Pool::Seen }
    }

    pub fn with_pool(self, pool: Pool) -> Self {
        Self { pool, ..self }
    }

    pub fn env_config(self) -> EnvConfig {
        let seen = self.pool == Pool::Seen;
        let (textures, held_out) = if seen {
            (SEEN_TEXTURES, UNSEEN_TEXTURES)
        } else {
            (UNSEEN_TEXTURES, SEEN_TEXTURES)
        };
        let (patterns, held_out_patterns) = if seen {
            (SEEN_PATTERNS, UNSEEN_PATTERNS)
        } else {
            (UNSEEN_PATTERNS, SEEN_PATTERNS)
        };
        match self.family {
            TaskFamily::G1 | TaskFamily::G2 => {
                let mut c = NavConfig::open_room(7, 25);
                if self.family == TaskFamily::G2 {
                    c.textures = Some(textures.collect());
                    c.held_out_textures = held_out.collect();
                }
                EnvConfig::Nav(c)
            }
            TaskFamily::G3 | TaskFamily::G4 => {
                let mut c = NavConfig::maze(10, 50, MAZE_DENSITY, MAZE_SEED);
                if self.family == TaskFamily::G4 {
                    c.textures = Some(textures.collect());
                    c.held_out_textures = held_out.collect();
                }
                EnvConfig::Nav(c)
            }
            TaskFamily::A1 | TaskFamily::A2 | TaskFamily::A3 => {
                let mut c = ArmConfig::three_targets();
                if self.family == TaskFamily::A2 {
                    c.patterns = Some(patterns.collect());
                    c.held_out_patterns = held_out_patterns.collect();
                }
                if self.family == TaskFamily::A3 {
                    c.n_classes = 5;
                }
                EnvConfig::Arm(c)
            }
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.family)?;
        if self.pool == Pool::Unseen {
            write!(f, "-unseen")?;
        }
        Ok(())
    }
}

impl FromStr for TaskId {
    type Err = EnvError;

    /// Accepts `G2`, `g2-seen`, `G2-unseen` and so on.
    fn from_str(s: &str) -> Result<Self, EnvError> {
        let lower = s.trim().to_ascii_lowercase();
        let (fam, pool) = match lower.split_once('-') {
            Some((f, "seen")) => (f.to_string(), Pool::Seen),
            Some((f, "unseen")) => (f.to_string(), Pool::Unseen),
            Some(_) => return Err(EnvError::UnknownTask(s.into())),
            None => (lower.clone(), Pool::Seen),
        };
        let family = TaskFamily::ALL
            .into_iter()
            .find(|f| format!("{f:?}").eq_ignore_ascii_case(&fam))
            .ok_or_else(|| EnvError::UnknownTask(s.into()))?;
        if pool == Pool::Unseen && !family.has_pools() {
            return Err(EnvError::UnknownTask(format!("{s} (no unseen pool for this family)")));
        }
        Ok(Self { family, pool })
    }
}

impl Serialize for TaskId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TaskId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvConfig {
    Nav(NavConfig),
    Arm(ArmConfig),
}

impl EnvConfig {
    pub fn build(&self) -> Result<Box<dyn MultiTargetEnv>, EnvError> {
        Ok(match self {
            EnvConfig::Nav(c) => Box::new(NavEnv::new(c.clone())?),
            EnvConfig::Arm(c) => Box::new(ArmEnv::new(c.clone())?),
        })
    }
}
