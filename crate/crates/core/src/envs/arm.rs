use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Action, EnvError, Layout, MultiTargetEnv, ObjectCells, Outcome, Rewards, StepResult};
use crate::nets::ActionSpace;
use crate::rng::{derive_seed, from_seed, Rng};
use crate::tensor::Tensor;

/// Target colors by class.
pub const CLASS_COLORS: [[f64; 3]; 8] = [
    [1.0, 0.1, 0.1],
    [0.1, 1.0, 0.1],
    [0.15, 0.3, 1.0],
    [1.0, 0.9, 0.1],
    [1.0, 0.2, 1.0],
    [0.1, 1.0, 1.0],
    [1.0, 0.55, 0.0],
    [0.6, 0.3, 1.0],
];

const ARM_COLOR: [f64; 3] = [0.85, 0.85, 0.85];
const PLAIN_BACKGROUND: [f64; 3] = [0.1, 0.1, 0.1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmConfig {
    pub links: [f64; 2],
    /// Symmetric joint limit in radians.
    pub joint_limit: f64,
    /// Joint rotation per step for a unit velocity command.
    pub velocity_scale: f64,
    /// Number of instructable classes.
    pub n_classes: usize,
    /// Targets present per episode; `n_classes` when every class is shown.
    pub n_present: usize,
    pub slots: Vec<(f64, f64)>,
    pub success_radius: f64,
    pub max_steps: usize,
    pub rewards: Rewards,
    pub raster: usize,
    /// Checker background pool; `None` draws a plain background.
    pub patterns: Option<Vec<u32>>,
    pub held_out_patterns: Vec<u32>,
    /// Target disc radius in world units.
    pub target_radius: f64,
}

impl ArmConfig {
    pub fn three_targets() -> Self {
        let r = 0.6;
        let slots = [30.0f64, 90.0, 150.0]
            .iter()
            .map(|d| {
                let a = d.to_radians();
                (r * a.cos(), r * a.sin())
            })
            .collect();
        Self {
            links: [0.5, 0.4],
            joint_limit: std::f64::consts::PI,
            velocity_scale: 0.3,
            n_classes: 3,
            n_present: 3,
            slots,
            success_radius: 0.16,
            max_steps: 50,
            rewards: Rewards::arm(),
            raster: 32,
            patterns: None,
            held_out_patterns: Vec::new(),
            target_radius: 0.1,
        }
    }

    /// World half-extent shown by the raster.
    pub fn extent(&self) -> f64 {
        self.links[0] + self.links[1] + 0.1
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let mut errs = Vec::new();
        let reach = self.links[0] + self.links[1];
        let inner = (self.links[0] - self.links[1]).abs();
        if self.links.iter().any(|&l| l <= 0.0) {
            errs.push("link lengths must be positive".into());
        }
        if self.n_present == 0 || self.n_present > self.n_classes {
            errs.push(format!("{} present targets out of {} classes", self.n_present, self.n_classes));
        }
        if self.n_classes > CLASS_COLORS.len() {
            errs.push(format!("at most {} classes have colors", CLASS_COLORS.len()));
        }
        if self.slots.len() < self.n_present {
            errs.push(format!("{} slots for {} targets", self.slots.len(), self.n_present));
        }
        for (i, &(x, y)) in self.slots.iter().enumerate() {
            let d = x.hypot(y);
            if d > reach || d < inner {
                errs.push(format!("slot {i} at distance {d:.3} is unreachable"));
            }
            for &(x2, y2) in &self.slots[..i] {
                if (x - x2).hypot(y - y2) <= 2.0 * self.success_radius {
                    errs.push(format!("slot {i} overlaps another slot"));
                }
            }
        }
        if self.success_radius <= 0.0 || self.max_steps == 0 || self.raster < 4 {
            errs.push("radius, max_steps and raster must be positive".into());
        }
        if let Some(pool) = &self.patterns {
            if pool.is_empty() {
                errs.push("empty background pool".into());
            }
            if pool.iter().any(|p| self.held_out_patterns.contains(p)) {
                errs.push("seen and unseen background pools overlap".into());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(EnvError::InvalidConfig(errs))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmLayout {
    pub seed: u64,
    pub goal: usize,
    pub joints: [f64; 2],
    /// `(x, y, class)` per present target.
    pub targets: Vec<(f64, f64, usize)>,
    pub pattern: Option<u32>,
}

#[derive(Debug, Clone)]
struct Episode {
    layout: ArmLayout,
    joints: [f64; 2],
    t: usize,
    done: bool,
}

pub struct ArmEnv {
    config: ArmConfig,
    episode: Option<Episode>,
}

/// Two colors for a checker background pattern id.
pub fn pattern_colors(pattern: u32) -> ([f64; 3], [f64; 3]) {
    let h = derive_seed(pattern as u64, "pattern", 0);
    let ch = |shift: u32| 0.15 + 0.35 * (((h >> shift) & 0xff) as f64 / 255.0);
    ([ch(0), ch(8), ch(16)], [ch(24), ch(32), ch(40)])
}

impl ArmEnv {
    pub fn new(config: ArmConfig) -> Result<Self, EnvError> {
        config.validate()?;
        Ok(Self { config, episode: None })
    }

    pub fn config(&self) -> &ArmConfig {
        &self.config
    }

    pub fn joints(&self) -> Option<[f64; 2]> {
        self.episode.as_ref().map(|e| e.joints)
    }

    /// Elbow and end-effector positions.
    pub fn forward_kinematics(&self, joints: [f64; 2]) -> ((f64, f64), (f64, f64)) {
        let [l1, l2] = self.config.links;
        let elbow = (l1 * joints[0].cos(), l1 * joints[0].sin());
        let a = joints[0] + joints[1];
        (elbow, (elbow.0 + l2 * a.cos(), elbow.1 + l2 * a.sin()))
    }

    fn layout_for_seed(&self, seed: u64) -> ArmLayout {
        let cfg = &self.config;
        let mut rng: Rng = from_seed(seed);
        let mut slots = cfg.slots.clone();
        slots.shuffle(&mut rng);
        let mut classes: Vec<usize> = (0..cfg.n_classes).collect();
        classes.shuffle(&mut rng);
        classes.truncate(cfg.n_present);
        let targets: Vec<_> = classes.iter().zip(&slots).map(|(&k, &(x, y))| (x, y, k)).collect();
        let goal = targets[rng.gen_range(0..targets.len())].2;
        // start pointing into the lower half plane, away from the slots
        let joints = [
            rng.gen_range(-2.4..-0.74),
            rng.gen_range(-0.5..0.5),
        ];
        let pattern = cfg.patterns.as_ref().map(|p| *p.choose(&mut rng).expect("non-empty pool"));
        ArmLayout {
            seed,
            goal,
            joints,
            targets,
            pattern,
        }
    }

    fn to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        let n = self.config.raster as f64;
        let ext = self.config.extent();
        ((x + ext) / (2.0 * ext) * n, (ext - y) / (2.0 * ext) * n)
    }

    /// Pixel `(row, col)` under the world point.
    pub fn pixel_of(&self, x: f64, y: f64) -> (usize, usize) {
        let (px, py) = self.to_pixel(x, y);
        let n = self.config.raster;
        ((py.floor() as usize).min(n - 1), (px.floor() as usize).min(n - 1))
    }

    fn target_pixels(&self, x: f64, y: f64) -> Vec<(usize, usize)> {
        let n = self.config.raster;
        let (cx, cy) = self.to_pixel(x, y);
        let rpx = self.config.target_radius / (2.0 * self.config.extent()) * n as f64;
        let mut v = Vec::new();
        for r in 0..n {
            for c in 0..n {
                let (px, py) = (c as f64 + 0.5, r as f64 + 0.5);
                if (px - cx).hypot(py - cy) <= rpx {
                    v.push((r, c));
                }
            }
        }
        // a disc smaller than a pixel still covers its center pixel
        let center = self.pixel_of(x, y);
        if !v.contains(&center) {
            v.push(center);
        }
        v
    }

    fn raster(&self, ep: &Episode) -> Tensor {
        let n = self.config.raster;
        let plane = n * n;
        let mut img = vec![0.0; 3 * plane];
        let put = |img: &mut Vec<f64>, r: usize, c: usize, col: [f64; 3]| {
            for ch in 0..3 {
                img[ch * plane + r * n + c] = col[ch];
            }
        };
        for r in 0..n {
            for c in 0..n {
                let col = match ep.layout.pattern {
                    Some(p) => {
                        let (a, b) = pattern_colors(p);
                        if (r / 4 + c / 4) % 2 == 0 {
                            a
                        } else {
                            b
                        }
                    }
                    None => PLAIN_BACKGROUND,
                };
                put(&mut img, r, c, col);
            }
        }
        let (elbow, ee) = self.forward_kinematics(ep.joints);
        for (a, b) in [((0.0, 0.0), elbow), (elbow, ee)] {
            let steps = 4 * n;
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                let (r, c) = self.pixel_of(a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
                put(&mut img, r, c, ARM_COLOR);
            }
        }
        for &(x, y, k) in &ep.layout.targets {
            for (r, c) in self.target_pixels(x, y) {
                put(&mut img, r, c, CLASS_COLORS[k]);
            }
        }
        Tensor::new(vec![3, n, n], img).expect("raster shape")
    }

    fn outcome(&self, ep: &Episode) -> Outcome {
        let (_, (x, y)) = self.forward_kinematics(ep.joints);
        let eps = self.config.success_radius;
        let mut hit_other = false;
        for &(tx, ty, k) in &ep.layout.targets {
            if (x - tx).hypot(y - ty) <= eps {
                if k == ep.layout.goal {
                    return Outcome::Success;
                }
                hit_other = true;
            }
        }
        if hit_other {
            Outcome::NonGoal
        } else if ep.t >= self.config.max_steps {
            Outcome::Timeout
        } else {
            Outcome::Ongoing
        }
    }
}

impl MultiTargetEnv for ArmEnv {
    fn reset(&mut self, seed: u64) -> Result<(Tensor, usize), EnvError> {
        let layout = self.layout_for_seed(seed);
        let goal = layout.goal;
        let ep = Episode {
            joints: layout.joints,
            layout,
            t: 0,
            done: false,
        };
        let obs = self.raster(&ep);
        self.episode = Some(ep);
        Ok((obs, goal))
    }

    fn step(&mut self, action: &Action) -> Result<StepResult, EnvError> {
        let a = match action {
            Action::Continuous(a) if a.len() == 2 && a.iter().all(|x| x.is_finite()) => [a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)],
            other => return Err(EnvError::InvalidAction(format!("{other:?}"))),
        };
        let mut ep = self.episode.take().ok_or(EnvError::NotReset)?;
        if ep.done {
            self.episode = Some(ep);
            return Err(EnvError::EpisodeDone);
        }
        let lim = self.config.joint_limit;
        for (q, v) in ep.joints.iter_mut().zip(a.iter()) {
            *q = (*q + self.config.velocity_scale * v).clamp(-lim, lim);
        }
        ep.t += 1;
        let outcome = self.outcome(&ep);
        ep.done = outcome.is_terminal();
        let observation = self.raster(&ep);
        self.episode = Some(ep);
        Ok(StepResult {
            observation,
            reward: self.config.rewards.for_outcome(outcome),
            done: outcome.is_terminal(),
            outcome,
        })
    }

    fn render(&self) -> Tensor {
        match &self.episode {
            Some(ep) => self.raster(ep),
            None => Tensor::zeros(vec![3, self.config.raster, self.config.raster]),
        }
    }

    fn obs_shape(&self) -> [usize; 3] {
        [3, self.config.raster, self.config.raster]
    }

    fn n_goals(&self) -> usize {
        self.config.n_classes
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Continuous(2)
    }

    fn max_steps(&self) -> usize {
        self.config.max_steps
    }

    fn goal(&self) -> usize {
        self.episode.as_ref().map_or(0, |e| e.layout.goal)
    }

    fn steps_taken(&self) -> usize {
        self.episode.as_ref().map_or(0, |e| e.t)
    }

    fn rewards(&self) -> Rewards {
        self.config.rewards
    }

    fn layout(&self) -> Option<Layout> {
        self.episode.as_ref().map(|e| Layout::Arm(e.layout.clone()))
    }

    fn object_cells(&self) -> ObjectCells {
        let mut cells = ObjectCells::default();
        let Some(ep) = &self.episode else { return cells };
        for &(x, y, k) in &ep.layout.targets {
            let px = self.target_pixels(x, y);
            if k == ep.layout.goal {
                cells.goal.extend(px);
            } else {
                cells.nongoal.extend(px);
            }
        }
        cells
    }

    fn random_action(&self, rng: &mut Rng) -> Action {
        Action::Continuous(vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_centroid_has_class_color() {
        let mut cfg = ArmConfig::three_targets();
        cfg.patterns = Some(vec![0, 1, 2, 3, 4]);
        let mut env = ArmEnv::new(cfg).unwrap();
        for seed in 0..20 {
            let (obs, _) = env.reset(seed).unwrap();
            let Some(Layout::Arm(l)) = env.layout() else { unreachable!() };
            let n = env.config().raster;
            for &(x, y, k) in &l.targets {
                let (r, c) = env.pixel_of(x, y);
                for (ch, &want) in CLASS_COLORS[k].iter().enumerate() {
                    assert_eq!(obs.data()[ch * n * n + r * n + c], want);
                }
            }
        }
    }

    #[test]
    fn kinematics_of_straight_arm() {
        let env = ArmEnv::new(ArmConfig::three_targets()).unwrap();
        let (elbow, ee) = env.forward_kinematics([0.0, 0.0]);
        assert!((elbow.0 - 0.5).abs() < 1e-12 && elbow.1.abs() < 1e-12);
        assert!((ee.0 - 0.9).abs() < 1e-12);
    }

    #[test]
    fn joints_stay_within_limits() {
        let mut cfg = ArmConfig::three_targets();
        cfg.slots = vec![(0.0, -0.2), (0.2, -0.25), (-0.2, -0.25)];
        cfg.max_steps = 200;
        cfg.success_radius = 0.01;
        let mut env = ArmEnv::new(cfg).unwrap();
        env.reset(0).unwrap();
        for _ in 0..100 {
            let r = env.step(&Action::Continuous(vec![1.0, -1.0])).unwrap();
            let j = env.joints().unwrap();
            assert!(j[0] <= std::f64::consts::PI && j[1] >= -std::f64::consts::PI);
            if r.done {
                break;
            }
        }
    }

    #[test]
    fn rejects_bad_action_and_bad_slots() {
        let mut env = ArmEnv::new(ArmConfig::three_targets()).unwrap();
        assert!(matches!(env.step(&Action::Continuous(vec![0.0, 0.0])), Err(EnvError::NotReset)));
        env.reset(0).unwrap();
        assert!(env.step(&Action::Discrete(0)).is_err());
        let mut cfg = ArmConfig::three_targets();
        cfg.slots[1] = (2.0, 0.0);
        assert!(ArmEnv::new(cfg).is_err());
    }
}
