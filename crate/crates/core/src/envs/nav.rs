use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Action, EnvError, Layout, MultiTargetEnv, ObjectCells, Outcome, Rewards, StepResult};
use crate::nets::ActionSpace;
use crate::rng::{derive_seed, from_seed, Rng};
use crate::tensor::Tensor;

/// Forward, turn left, turn right.
pub const NAV_ACTIONS: usize = 3;

const DIRS: [(isize, isize); 4] = [(-1, 0), (0, 1), (1, 0), (0, -1)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavConfig {
    /// Interior side length; the boundary outside it is wall.
    pub size: usize,
    pub n_classes: usize,
    pub variants_per_class: usize,
    pub max_steps: usize,
    pub frame_stack: usize,
    /// The egocentric window is `2·view_radius + 1` cells square.
    pub view_radius: usize,
    pub rewards: Rewards,
    /// Interior wall cells; empty for an open room.
    pub walls: Vec<(usize, usize)>,
    /// When set, objects take a random permutation of these positions;
    /// otherwise they are placed uniformly on free cells.
    pub preset_positions: Option<Vec<(usize, usize)>>,
    /// Texture pool for the per-episode noise channel; `None` disables it.
    pub textures: Option<Vec<u32>>,
    /// Textures that must never appear in `textures` (the other pool).
    pub held_out_textures: Vec<u32>,
    pub texture_strength: f64,
}

impl NavConfig {
    pub fn open_room(size: usize, max_steps: usize) -> Self {
        Self {
            size,
            n_classes: 4,
            variants_per_class: 2,
            max_steps,
            frame_stack: 4,
            view_radius: 3,
            rewards: Rewards::navigation(),
            walls: Vec::new(),
            preset_positions: None,
            textures: None,
            held_out_textures: Vec::new(),
            texture_strength: 1.0,
        }
    }

    /// A `size × size` maze from a seeded generator: interior wall cells at
    /// the given density, rejected until every free cell is reachable.
    pub fn maze(size: usize, max_steps: usize, density: f64, maze_seed: u64) -> Self {
        let mut cfg = Self::open_room(size, max_steps);
        let lo = 1.min(size - 1);
        let hi = size.saturating_sub(2);
        let presets = vec![(lo, lo), (lo, hi), (hi, lo), (hi, hi)];
        let center = (size / 2, size / 2);
        let mut rng = from_seed(maze_seed);
        for _ in 0..1000 {
            let mut walls = Vec::new();
            for r in 0..size {
                for c in 0..size {
                    let cell = (r, c);
                    if presets.contains(&cell) || cell == center {
                        continue;
                    }
                    if rng.gen_bool(density) {
                        walls.push(cell);
                    }
                }
            }
            cfg.walls = walls;
            if cfg.all_free_connected() {
                break;
            }
        }
        cfg.preset_positions = Some(presets);
        cfg
    }

    pub fn start(&self) -> (usize, usize) {
        (self.size / 2, self.size / 2)
    }

    pub fn channels(&self) -> usize {
        // wall, one per class, depth proxy, texture noise
        self.n_classes + 3
    }

    pub fn window(&self) -> usize {
        2 * self.view_radius + 1
    }

    fn is_wall(&self, r: usize, c: usize) -> bool {
        self.walls.contains(&(r, c))
    }

    fn free_cells(&self) -> Vec<(usize, usize)> {
        let mut v = Vec::new();
        for r in 0..self.size {
            for c in 0..self.size {
                if !self.is_wall(r, c) {
                    v.push((r, c));
                }
            }
        }
        v
    }

    fn reachable_from(&self, start: (usize, usize)) -> Vec<Vec<bool>> {
        let mut seen = vec![vec![false; self.size]; self.size];
        let mut q = VecDeque::from([start]);
        seen[start.0][start.1] = true;
        while let Some((r, c)) = q.pop_front() {
            for (dr, dc) in DIRS {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr >= self.size as isize || nc >= self.size as isize {
                    continue;
                }
                let (nr, nc) = (nr as usize, nc as usize);
                if !seen[nr][nc] && !self.is_wall(nr, nc) {
                    seen[nr][nc] = true;
                    q.push_back((nr, nc));
                }
            }
        }
        seen
    }

    fn all_free_connected(&self) -> bool {
        let seen = self.reachable_from(self.start());
        self.free_cells().iter().all(|&(r, c)| seen[r][c])
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let mut errs = Vec::new();
        if self.size < 3 {
            errs.push(format!("grid size {} must be at least 3", self.size));
        }
        if self.n_classes == 0 || self.variants_per_class == 0 {
            errs.push("need at least one class and one variant".into());
        }
        if self.max_steps == 0 {
            errs.push("max_steps must be positive".into());
        }
        if self.frame_stack == 0 {
            errs.push("frame_stack must be positive".into());
        }
        let start = self.start();
        if self.is_wall(start.0, start.1) {
            errs.push("start cell is a wall".into());
        }
        if self.walls.iter().any(|&(r, c)| r >= self.size || c >= self.size) {
            errs.push("wall outside the grid".into());
        }
        match &self.preset_positions {
            Some(p) => {
                let mut sorted = p.clone();
                sorted.sort_unstable();
                sorted.dedup();
                if sorted.len() != p.len() {
                    errs.push("overlapping preset positions".into());
                }
                if p.len() < self.n_classes {
                    errs.push(format!("{} preset positions for {} classes", p.len(), self.n_classes));
                }
                if p.iter().any(|&(r, c)| r >= self.size || c >= self.size || self.is_wall(r, c)) {
                    errs.push("preset position on a wall or outside the grid".into());
                }
                if p.contains(&start) {
                    errs.push("preset position at the start cell".into());
                }
            }
            None => {
                if self.free_cells().len() < self.n_classes + 1 {
                    errs.push("not enough free cells for objects".into());
                }
            }
        }
        if errs.is_empty() && !self.all_free_connected() {
            errs.push("maze is not connected".into());
        }
        if let Some(pool) = &self.textures {
            if pool.is_empty() {
                errs.push("empty texture pool".into());
            }
            if pool.iter().any(|t| self.held_out_textures.contains(t)) {
                errs.push("seen and unseen texture pools overlap".into());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(EnvError::InvalidConfig(errs))
        }
    }
}

/// Initial state of a navigation episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavLayout {
    pub seed: u64,
    pub goal: usize,
    pub start: (usize, usize),
    pub heading: usize,
    /// `(row, col, class, variant)` per object.
    pub objects: Vec<(usize, usize, usize, usize)>,
    /// Floor and wall texture ids.
    pub textures: Option<(u32, u32)>,
    pub walls: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
struct Episode {
    layout: NavLayout,
    pos: (usize, usize),
    heading: usize,
    t: usize,
    done: bool,
    frames: VecDeque<Vec<f64>>,
}

pub struct NavEnv {
    config: NavConfig,
    episode: Option<Episode>,
}

fn texture_noise(tex: u32, r: isize, c: isize) -> f64 {
    let h = derive_seed(tex as u64, "texture", ((r + 64) as u64) << 16 | (c + 64) as u64);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

impl NavEnv {
    pub fn new(config: NavConfig) -> Result<Self, EnvError> {
        config.validate()?;
        Ok(Self { config, episode: None })
    }

    pub fn config(&self) -> &NavConfig {
        &self.config
    }

    pub fn position(&self) -> Option<((usize, usize), usize)> {
        self.episode.as_ref().map(|e| (e.pos, e.heading))
    }

    fn layout_for_seed(&self, seed: u64) -> NavLayout {
        let cfg = &self.config;
        let mut rng: Rng = from_seed(seed);
        let start = cfg.start();
        let heading = rng.gen_range(0..4);
        let positions: Vec<(usize, usize)> = match &cfg.preset_positions {
            Some(p) => {
                let mut p = p.clone();
                p.shuffle(&mut rng);
                p
            }
            None => {
                let mut free: Vec<_> = cfg.free_cells().into_iter().filter(|&c| c != start).collect();
                free.shuffle(&mut rng);
                free
            }
        };
        let objects = (0..cfg.n_classes)
            .map(|k| {
                let (r, c) = positions[k];
                (r, c, k, rng.gen_range(0..cfg.variants_per_class))
            })
            .collect();
        let goal = rng.gen_range(0..cfg.n_classes);
        let textures = cfg.textures.as_ref().map(|pool| {
            (
                *pool.choose(&mut rng).expect("non-empty pool"),
                *pool.choose(&mut rng).expect("non-empty pool"),
            )
        });
        NavLayout {
            seed,
            goal,
            start,
            heading,
            objects,
            textures,
            walls: cfg.walls.clone(),
        }
    }

    fn object_at(layout: &NavLayout, r: usize, c: usize) -> Option<(usize, usize)> {
        layout
            .objects
            .iter()
            .find(|o| o.0 == r && o.1 == c)
            .map(|o| (o.2, o.3))
    }

    /// World cell seen at egocentric window cell `(i, j)`.
    fn world_cell(&self, pos: (usize, usize), heading: usize, i: usize, j: usize) -> (isize, isize) {
        let r = self.config.view_radius as isize;
        let fwd = r - i as isize;
        let side = j as isize - r;
        let (fr, fc) = DIRS[heading];
        let (rr, rc) = DIRS[(heading + 1) % 4];
        (
            pos.0 as isize + fwd * fr + side * rr,
            pos.1 as isize + fwd * fc + side * rc,
        )
    }

    /// Single egocentric frame, channel-major `[C, W, W]`.
    fn frame(&self, ep: &Episode) -> Vec<f64> {
        let cfg = &self.config;
        let w = cfg.window();
        let nc = cfg.channels();
        let plane = w * w;
        let mut out = vec![0.0; nc * plane];
        let max_d = (cfg.view_radius as f64) * std::f64::consts::SQRT_2 + 1.0;
        for i in 0..w {
            for j in 0..w {
                let (r, c) = self.world_cell(ep.pos, ep.heading, i, j);
                let idx = i * w + j;
                let inside = r >= 0 && c >= 0 && (r as usize) < cfg.size && (c as usize) < cfg.size;
                let wall = !inside || cfg.is_wall(r as usize, c as usize);
                let mut occupied = wall;
                if wall {
                    out[idx] = 1.0;
                } else if let Some((k, var)) = Self::object_at(&ep.layout, r as usize, c as usize) {
                    out[(1 + k) * plane + idx] = if var == 0 { 1.0 } else { 0.6 };
                    occupied = true;
                }
                if occupied {
                    let dr = i as f64 - cfg.view_radius as f64;
                    let dc = j as f64 - cfg.view_radius as f64;
                    out[(nc - 2) * plane + idx] = 1.0 - (dr * dr + dc * dc).sqrt() / max_d;
                }
                if let Some((floor, wall_tex)) = ep.layout.textures {
                    let tex = if wall { wall_tex } else { floor };
                    out[(nc - 1) * plane + idx] = cfg.texture_strength * texture_noise(tex, r, c);
                }
            }
        }
        out
    }

    fn stacked(&self, ep: &Episode) -> Tensor {
        let w = self.config.window();
        let data: Vec<f64> = ep.frames.iter().flatten().copied().collect();
        Tensor::new(vec![self.config.frame_stack * self.config.channels(), w, w], data).expect("frame stack shape")
    }
}

impl MultiTargetEnv for NavEnv {
    fn reset(&mut self, seed: u64) -> Result<(Tensor, usize), EnvError> {
        let layout = self.layout_for_seed(seed);
        let goal = layout.goal;
        let mut ep = Episode {
            pos: layout.start,
            heading: layout.heading,
            layout,
            t: 0,
            done: false,
            frames: VecDeque::new(),
        };
        let f = self.frame(&ep);
        for _ in 0..self.config.frame_stack {
            ep.frames.push_back(f.clone());
        }
        let obs = self.stacked(&ep);
        self.episode = Some(ep);
        Ok((obs, goal))
    }

    fn step(&mut self, action: &Action) -> Result<StepResult, EnvError> {
        let a = match action {
            Action::Discrete(a) if *a < NAV_ACTIONS => *a,
            other => return Err(EnvError::InvalidAction(format!("{other:?}"))),
        };
        let mut ep = self.episode.take().ok_or(EnvError::NotReset)?;
        if ep.done {
            self.episode = Some(ep);
            return Err(EnvError::EpisodeDone);
        }
        let mut touched = None;
        match a {
            0 => {
                let (dr, dc) = DIRS[ep.heading];
                let (nr, nc) = (ep.pos.0 as isize + dr, ep.pos.1 as isize + dc);
                let size = self.config.size as isize;
                if nr >= 0 && nc >= 0 && nr < size && nc < size && !self.config.is_wall(nr as usize, nc as usize) {
                    let cell = (nr as usize, nc as usize);
                    // objects are reached by walking into them; the agent
                    // stays put, so the terminal frame shows the object ahead
                    touched = Self::object_at(&ep.layout, cell.0, cell.1);
                    if touched.is_none() {
                        ep.pos = cell;
                    }
                }
            }
            1 => ep.heading = (ep.heading + 3) % 4,
            _ => ep.heading = (ep.heading + 1) % 4,
        }
        ep.t += 1;
        let outcome = match touched {
            Some((k, _)) if k == ep.layout.goal => Outcome::Success,
            Some(_) => Outcome::NonGoal,
            None if ep.t >= self.config.max_steps => Outcome::Timeout,
            None => Outcome::Ongoing,
        };
        ep.done = outcome.is_terminal();
        let f = self.frame(&ep);
        ep.frames.pop_front();
        ep.frames.push_back(f);
        let observation = self.stacked(&ep);
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
            Some(ep) => self.stacked(ep),
            None => {
                let w = self.config.window();
                Tensor::zeros(vec![self.config.frame_stack * self.config.channels(), w, w])
            }
        }
    }

    fn obs_shape(&self) -> [usize; 3] {
        let w = self.config.window();
        [self.config.frame_stack * self.config.channels(), w, w]
    }

    fn n_goals(&self) -> usize {
        self.config.n_classes
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(NAV_ACTIONS)
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
        self.episode.as_ref().map(|e| Layout::Nav(e.layout.clone()))
    }

    fn object_cells(&self) -> ObjectCells {
        let mut cells = ObjectCells::default();
        let Some(ep) = &self.episode else { return cells };
        let w = self.config.window();
        for i in 0..w {
            for j in 0..w {
                let (r, c) = self.world_cell(ep.pos, ep.heading, i, j);
                if r < 0 || c < 0 {
                    continue;
                }
                if let Some((k, _)) = Self::object_at(&ep.layout, r as usize, c as usize) {
                    if k == ep.layout.goal {
                        cells.goal.push((i, j));
                    } else {
                        cells.nongoal.push((i, j));
                    }
                }
            }
        }
        cells
    }

    fn random_action(&self, rng: &mut Rng) -> Action {
        Action::Discrete(rng.gen_range(0..NAV_ACTIONS))
    }
}
