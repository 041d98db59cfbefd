//! Run orchestration behind the `gace` binary.
//!
//! Configuration is a flat TOML table. Values are resolved in this order,
//! later entries winning: preset, config file, `--set key=value` overrides,
//! dedicated flags such as `--seed`.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{ArmTrainer, CurveRow, NavTrainer, OptimizerMode, TrainConfig, TrainError, CURVE_SCHEMA_VERSION};
use crate::checkpoint::{self, CheckpointError, CheckpointMeta};
use crate::envs::{Action, EnvConfig, MultiTargetEnv, Outcome, TaskId};
use crate::evalkit::{self, EvalError, GreedyPolicy, Head, Policy, SrrRow};
use crate::gace::{GaceConfig, Reduction};
use crate::nets::{ActionSpace, CoreKind, EncoderKind, GdanConcat, GoalModel, ModelConfig, QueryGrad, Variant};
use crate::pixmap;
use crate::rng::derive_seed;

pub const CODE_HASH: &str = env!("GACE_CODE_HASH");
pub const OUTPUT_ROOT_VAR: &str = "GACE_OUTPUT_ROOT";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("malformed curve {path}: {reason}")]
    Csv { path: String, reason: String },
    #[error("{0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub task: String,
    pub variant: Variant,
    pub seeds: Vec<u64>,
    /// Relative paths resolve against `GACE_OUTPUT_ROOT` when it is set.
    pub output: String,
    pub eval_episodes: usize,
    /// Goal records written into every checkpoint.
    pub checkpoint_store: bool,

    pub gamma: f64,
    pub lr: f64,
    pub amsgrad: bool,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub clip_norm: f64,
    pub n_envs: usize,
    pub total_updates: u64,
    pub log_interval: u64,
    pub checkpoint_interval: u64,
    pub success_window: usize,
    pub optimizer: OptimizerMode,
    pub store_capacity: usize,
    pub eps_negative: f64,
    pub warmup: u64,
    pub warmup_budget: usize,
    pub holdout_every: u64,
    pub replay_capacity: usize,
    pub batch: usize,
    pub tau: f64,
    pub target_interval: u64,
    pub noise: f64,

    pub eta: f64,
    pub gace_batch: usize,
    pub eps_clip: f64,
    /// Fraction of `total_updates` after which GACE stops; 0 never freezes.
    pub freeze_fraction: f64,
    pub reduction: Reduction,

    pub encoder: EncoderKind,
    pub encoder_hidden: Vec<usize>,
    pub conv_channels: Vec<usize>,
    pub d_e: usize,
    pub embed_dim: usize,
    pub d_q: usize,
    pub hidden: usize,
    pub policy_hidden: Vec<usize>,
    pub value_hidden: Vec<usize>,
    pub query_grad: QueryGrad,
    pub gdan_concat: GdanConcat,
}

pub const PRESETS: [&str; 4] = ["full", "full-arm", "desk", "desk-arm"];

/// Named configuration presets. `full` carries the full-size navigation
/// hyperparameters, `desk` is sized to train on one core in about a minute.
pub fn preset(name: &str) -> Option<RunConfig> {
    let t = TrainConfig::default();
    let gc = GaceConfig::default();
    let full = RunConfig {
        preset: name.into(),
        task: "G1".into(),
        variant: Variant::Gace,
        seeds: vec![0],
        output: "runs".into(),
        eval_episodes: 500,
        checkpoint_store: false,
        gamma: t.gamma,
        lr: t.lr,
        amsgrad: t.amsgrad,
        entropy_coef: t.entropy_coef,
        value_coef: t.value_coef,
        clip_norm: t.clip_norm,
        n_envs: t.n_envs,
        total_updates: t.total_updates,
        log_interval: t.log_interval,
        checkpoint_interval: 10_000,
        success_window: t.success_window,
        optimizer: t.optimizer,
        store_capacity: t.store_capacity,
        eps_negative: t.eps_negative,
        warmup: t.warmup,
        warmup_budget: t.warmup_budget,
        holdout_every: t.holdout_every,
        replay_capacity: t.replay_capacity,
        batch: t.batch,
        tau: t.tau,
        target_interval: t.target_interval,
        noise: t.noise,
        eta: gc.eta,
        gace_batch: gc.batch,
        eps_clip: gc.eps_clip,
        freeze_fraction: 0.0,
        reduction: gc.reduction,
        encoder: EncoderKind::Conv,
        encoder_hidden: vec![],
        conv_channels: vec![32, 32, 64, 64],
        d_e: 256,
        embed_dim: 25,
        d_q: 256,
        hidden: 256,
        policy_hidden: vec![128, 64],
        value_hidden: vec![64, 32],
        query_grad: QueryGrad::Stop,
        gdan_concat: GdanConcat::Recurrent,
    };
    Some(match name {
        "full" => full,
        "full-arm" => RunConfig {
            task: "A1".into(),
            eval_episodes: 100,
            amsgrad: false,
            warmup: 10_000,
            eps_negative: 0.05,
            gace_batch: 128,
            ..full
        },
        "desk" => RunConfig {
            lr: 2e-3,
            n_envs: 16,
            total_updates: 1_500,
            log_interval: 25,
            checkpoint_interval: 0,
            success_window: 400,
            warmup: 100,
            store_capacity: 50_000,
            gace_batch: 32,
            eval_episodes: 300,
            encoder: EncoderKind::Mlp,
            conv_channels: vec![],
            d_e: 64,
            d_q: 64,
            hidden: 64,
            policy_hidden: vec![32],
            value_hidden: vec![32],
            ..full
        },
        "desk-arm" => RunConfig {
            task: "A1".into(),
            lr: 1e-3,
            amsgrad: false,
            total_updates: 5_000,
            log_interval: 50,
            checkpoint_interval: 0,
            success_window: 100,
            warmup: 200,
            eps_negative: 0.05,
            store_capacity: 50_000,
            replay_capacity: 100_000,
            batch: 64,
            gace_batch: 64,
            eval_episodes: 100,
            encoder: EncoderKind::Mlp,
            conv_channels: vec![],
            d_e: 64,
            d_q: 64,
            hidden: 64,
            policy_hidden: vec![32],
            value_hidden: vec![32],
            ..full
        },
        _ => return None,
    })
}

fn parse_override(s: &str) -> std::result::Result<(String, toml::Value), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("override {s:?} is not key=value"))?;
    let k = k.trim().to_string();
    let v = v.trim();
    let value = toml::from_str::<toml::Table>(&format!("x = {v}"))
        .ok()
        .and_then(|mut t| t.remove("x"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()));
    Ok((k, value))
}

/// Resolves preset, config text and overrides into a validated config.
/// Every problem found is reported, not just the first.
pub fn resolve(preset_name: Option<&str>, file_text: Option<&str>, overrides: &[String]) -> Result<RunConfig> {
    let mut errs = Vec::new();
    let mut layers = Vec::new();
    if let Some(text) = file_text {
        match toml::from_str::<toml::Table>(text) {
            Ok(mut t) => {
                t.remove("manifest");
                layers.push(t);
            }
            Err(e) => errs.push(format!("config file: {e}")),
        }
    }
    let mut over = toml::Table::new();
    for s in overrides {
        match parse_override(s) {
            Ok((k, v)) => {
                over.insert(k, v);
            }
            Err(e) => errs.push(e),
        }
    }
    layers.push(over);

    let name = preset_name
        .map(str::to_string)
        .or_else(|| layers.iter().rev().find_map(|t| t.get("preset").and_then(|v| v.as_str()).map(str::to_string)))
        .unwrap_or_else(|| "desk".into());
    let Some(base) = preset(&name) else {
        errs.push(format!("unknown preset {name:?} (known: {})", PRESETS.join(", ")));
        return Err(CliError::Config(errs));
    };
    let base_table = toml::Table::try_from(&base).expect("preset serializes");
    let known: BTreeSet<&String> = base_table.keys().collect();
    let mut merged = base_table.clone();
    for layer in &layers {
        for (k, v) in layer {
            if !known.contains(k) {
                errs.push(format!("unknown key {k:?}"));
                continue;
            }
            // type-check each key on its own so all bad values are listed
            let mut probe = base_table.clone();
            probe.insert(k.clone(), v.clone());
            if let Err(e) = probe.try_into::<RunConfig>() {
                errs.push(format!("{k}: {}", e.message().trim()));
                continue;
            }
            merged.insert(k.clone(), v.clone());
        }
    }
    merged.insert("preset".into(), toml::Value::String(name));
    // keys that passed the type check are still validated for meaning
    match merged.try_into::<RunConfig>() {
        Ok(cfg) => {
            errs.extend(cfg.validate());
            if errs.is_empty() {
                return Ok(cfg);
            }
        }
        Err(e) => errs.push(e.to_string()),
    }
    Err(CliError::Config(errs))
}

impl RunConfig {
    pub fn task_id(&self) -> std::result::Result<TaskId, String> {
        self.task.parse::<TaskId>().map_err(|e| e.to_string())
    }

    pub fn validate(&self) -> Vec<String> {
        let mut e = Vec::new();
        match self.task_id() {
            Ok(t) if t.pool == crate::envs::Pool::Unseen => {
                e.push(format!("task {t} uses the unseen pool, which is evaluation-only"))
            }
            Ok(_) => {}
            Err(m) => e.push(m),
        }
        if self.seeds.is_empty() {
            e.push("seeds must list at least one seed".into());
        }
        if self.eval_episodes == 0 {
            e.push("eval_episodes must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.freeze_fraction) {
            e.push(format!("freeze_fraction {} must lie in [0, 1)", self.freeze_fraction));
        }
        for (name, v) in [("d_e", self.d_e), ("embed_dim", self.embed_dim), ("d_q", self.d_q)] {
            if v == 0 {
                e.push(format!("{name} must be positive"));
            }
        }
        if self.hidden < 2 {
            e.push("hidden must be at least 2 so it can split into key and value".into());
        }
        if self.encoder == EncoderKind::Conv && self.conv_channels.is_empty() {
            e.push("conv encoder needs conv_channels".into());
        }
        if self.encoder_hidden.iter().chain(&self.policy_hidden).chain(&self.value_hidden).any(|&w| w == 0) {
            e.push("layer widths must be positive".into());
        }
        e.extend(self.train_config(0).validate());
        e.extend(self.gace_config().validate());
        if let Ok(t) = self.task_id() {
            if let Err(err) = t.env_config().build() {
                e.push(err.to_string());
            }
        }
        e
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            gamma: self.gamma,
            lr: self.lr,
            amsgrad: self.amsgrad,
            entropy_coef: self.entropy_coef,
            value_coef: self.value_coef,
            clip_norm: self.clip_norm,
            n_envs: self.n_envs,
            total_updates: self.total_updates,
            log_interval: self.log_interval,
            checkpoint_interval: self.checkpoint_interval,
            success_window: self.success_window,
            seed,
            optimizer: self.optimizer,
            store_capacity: self.store_capacity,
            eps_negative: self.eps_negative,
            warmup: self.warmup,
            warmup_budget: self.warmup_budget,
            holdout_every: self.holdout_every,
            replay_capacity: self.replay_capacity,
            batch: self.batch,
            tau: self.tau,
            target_interval: self.target_interval,
            noise: self.noise,
        }
    }

    pub fn gace_config(&self) -> GaceConfig {
        let freeze_after = (self.freeze_fraction > 0.0).then(|| (self.freeze_fraction * self.total_updates as f64).round() as u64);
        GaceConfig {
            eta: self.eta,
            batch: self.gace_batch,
            eps_clip: self.eps_clip,
            freeze_after,
            reduction: self.reduction,
        }
    }

    pub fn model_config(&self, env: &EnvConfig) -> Result<ModelConfig> {
        let e = env.build().map_err(|e| CliError::Config(vec![e.to_string()]))?;
        let n_goals = e.n_goals();
        let core = match e.action_space() {
            ActionSpace::Discrete(_) => CoreKind::Lstm,
            ActionSpace::Continuous(_) => CoreKind::Linear,
        };
        Ok(ModelConfig {
            obs_shape: e.obs_shape(),
            encoder: self.encoder,
            encoder_hidden: self.encoder_hidden.clone(),
            conv_channels: self.conv_channels.clone(),
            d_e: self.d_e,
            n_goals,
            disc_classes: n_goals + usize::from(self.eps_negative > 0.0),
            embed_dim: self.embed_dim,
            d_q: self.d_q,
            core,
            hidden: self.hidden,
            policy_hidden: self.policy_hidden.clone(),
            value_hidden: self.value_hidden.clone(),
            action: e.action_space(),
            variant: self.variant,
            query_grad: self.query_grad,
            gdan_concat: self.gdan_concat,
        })
    }

    /// Same config narrowed to one seed, as written into a run manifest.
    pub fn for_seed(&self, seed: u64) -> RunConfig {
        RunConfig {
            seeds: vec![seed],
            ..self.clone()
        }
    }
}

pub fn output_root(configured: &str) -> PathBuf {
    let p = PathBuf::from(configured);
    match std::env::var_os(OUTPUT_ROOT_VAR) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p,
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    #[serde(flatten)]
    config: &'a RunConfig,
    manifest: ManifestInfo,
}

#[derive(Serialize)]
struct ManifestInfo {
    seed: u64,
    code_hash: &'static str,
    version: &'static str,
    curve_schema: u32,
}

/// Manifest text: the resolved single-seed config, loadable with
/// `--config`, plus a `[manifest]` table that loading ignores.
pub fn manifest_text(cfg: &RunConfig, seed: u64) -> String {
    let m = Manifest {
        config: &cfg.for_seed(seed),
        manifest: ManifestInfo {
            seed,
            code_hash: CODE_HASH,
            version: env!("CARGO_PKG_VERSION"),
            curve_schema: CURVE_SCHEMA_VERSION,
        },
    };
    toml::to_string(&m).expect("manifest serializes")
}

enum Trainer {
    Nav(Box<NavTrainer>),
    Arm(Box<ArmTrainer>),
}

impl Trainer {
    fn new(mc: ModelConfig, tc: TrainConfig, gc: GaceConfig, env: &EnvConfig) -> std::result::Result<Self, TrainError> {
        Ok(match env {
            EnvConfig::Nav(_) => Trainer::Nav(Box::new(NavTrainer::new(mc, tc, gc, env)?)),
            EnvConfig::Arm(_) => Trainer::Arm(Box::new(ArmTrainer::new(mc, tc, gc, env)?)),
        })
    }

    fn warmup(&mut self) -> std::result::Result<usize, TrainError> {
        match self {
            Trainer::Nav(t) => t.warmup(),
            Trainer::Arm(t) => t.warmup(),
        }
    }

    fn updates(&self) -> u64 {
        match self {
            Trainer::Nav(t) => t.updates,
            Trainer::Arm(t) => t.updates,
        }
    }

    fn step(&mut self, log: bool) -> std::result::Result<Option<CurveRow>, TrainError> {
        match self {
            Trainer::Nav(t) => {
                let s = t.update()?;
                log.then(|| t.curve_row(&s)).transpose()
            }
            Trainer::Arm(t) => {
                let s = t.iteration()?;
                log.then(|| t.curve_row(&s)).transpose()
            }
        }
    }

    fn model(&self) -> &GoalModel {
        match self {
            Trainer::Nav(t) => &t.model,
            Trainer::Arm(t) => &t.model,
        }
    }

    fn checkpoint(&self, task: &TaskId, seed: u64, with_store: bool, path: &Path) -> std::result::Result<(), CheckpointError> {
        let (model, adam, store, env_steps, episodes) = match self {
            Trainer::Nav(t) => (&t.model, &t.optimizer, &t.store, t.env_steps, t.episodes),
            Trainer::Arm(t) => (&t.model, &t.optimizer, &t.store, t.env_steps, t.episodes),
        };
        let meta = CheckpointMeta {
            task: task.to_string(),
            seed,
            updates: self.updates(),
            env_steps,
            episodes,
            adam_lr: adam.config.lr,
            adam_amsgrad: adam.config.amsgrad,
            model: model.config.clone(),
        };
        let records: Vec<_> = if with_store { store.records().collect() } else { Vec::new() };
        checkpoint::save(path, &meta, &model.params, Some(adam), &records)
    }
}

pub fn curve_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::Writer::from_writer(fs::File::create(path)?))
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    CliError::Csv {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

pub fn read_curve(path: &Path) -> Result<Vec<CurveRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<CurveRow>, _>>()
        .map_err(|e| csv_err(path, e))?;
    if rows.is_empty() {
        return Err(CliError::Csv {
            path: path.display().to_string(),
            reason: "no rows".into(),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub seed: u64,
    pub curve: Vec<CurveRow>,
    pub eval_success: f64,
}

/// Trains one seed into `run_dir`: manifest, curve CSV, checkpoints, and a
/// greedy evaluation on the training pool.
pub fn train_seed(cfg: &RunConfig, seed: u64, run_dir: &Path) -> Result<RunSummary> {
    let task = cfg.task_id().map_err(|e| CliError::Config(vec![e]))?;
    let env = task.env_config();
    let mc = cfg.model_config(&env)?;
    fs::create_dir_all(run_dir)?;
    fs::write(run_dir.join("manifest.toml"), manifest_text(cfg, seed))?;
    let tc = cfg.train_config(seed);
    let mut trainer = Trainer::new(mc, tc.clone(), cfg.gace_config(), &env)?;
    trainer.warmup()?;
    let curve_path = run_dir.join("curve.csv");
    let mut w = curve_writer(&curve_path)?;
    let mut curve = Vec::new();
    let ckpt_dir = run_dir.join("checkpoints");
    while trainer.updates() < tc.total_updates {
        let next = trainer.updates() + 1;
        let log = next % tc.log_interval == 0 || next == tc.total_updates;
        if let Some(row) = trainer.step(log)? {
            w.serialize(&row).map_err(|e| csv_err(&curve_path, e))?;
            curve.push(row);
        }
        if tc.checkpoint_interval > 0 && next % tc.checkpoint_interval == 0 {
            fs::create_dir_all(&ckpt_dir)?;
            trainer.checkpoint(&task, seed, cfg.checkpoint_store, &ckpt_dir.join(format!("update-{next:08}.ckpt")))?;
        }
    }
    w.flush()?;
    trainer.checkpoint(&task, seed, cfg.checkpoint_store, &run_dir.join("final.ckpt"))?;
    let eval_success = evalkit::model_success_ratio(trainer.model(), &env, cfg.eval_episodes, derive_seed(seed, "eval", 0))?;
    let mut f = fs::File::create(run_dir.join("eval.csv"))?;
    writeln!(f, "task,episodes,success_ratio\n{task},{},{eval_success}", cfg.eval_episodes)?;
    Ok(RunSummary {
        dir: run_dir.to_path_buf(),
        seed,
        curve,
        eval_success,
    })
}

pub fn run_dir(cfg: &RunConfig, seed: u64) -> PathBuf {
    output_root(&cfg.output)
        .join(format!("{}-{}", cfg.task, cfg.variant.as_str()))
        .join(format!("seed-{seed}"))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<RunSummary>> {
    cfg.seeds.iter().map(|&s| train_seed(cfg, s, &run_dir(cfg, s))).collect()
}

fn check_compatible(model: &GoalModel, env: &dyn MultiTargetEnv) -> Result<()> {
    let mc = &model.config;
    let mut errs = Vec::new();
    if mc.obs_shape != env.obs_shape() {
        errs.push(format!("model expects observations {:?}, task emits {:?}", mc.obs_shape, env.obs_shape()));
    }
    if mc.n_goals != env.n_goals() {
        errs.push(format!("model knows {} goals, task has {}", mc.n_goals, env.n_goals()));
    }
    if mc.action != env.action_space() {
        errs.push(format!("model acts in {:?}, task needs {:?}", mc.action, env.action_space()));
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(CliError::Config(errs))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub task: TaskId,
    pub episodes: usize,
    pub base_seed: u64,
    pub success_ratio: f64,
}

/// Greedy evaluation of a checkpoint. Appends a row to `report` when given.
pub fn cmd_eval(ckpt: &Path, task: &TaskId, n_episodes: usize, base_seed: u64, report: Option<&Path>) -> Result<EvalReport> {
    if n_episodes == 0 {
        return Err(CliError::Usage("episodes must be at least 1".into()));
    }
    let model = checkpoint::load(ckpt)?.model()?;
    let env_cfg = task.env_config();
    let mut env = env_cfg.build().map_err(EvalError::from)?;
    check_compatible(&model, env.as_ref())?;
    let mut policy = GreedyPolicy::new(&model);
    let success_ratio = evalkit::success_ratio(&mut policy, env.as_mut(), n_episodes, base_seed)?;
    if let Some(path) = report {
        let fresh = !path.exists();
        let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(f, "checkpoint,task,episodes,base_seed,success_ratio")?;
        }
        writeln!(f, "{},{task},{n_episodes},{base_seed},{success_ratio}", ckpt.display())?;
    }
    Ok(EvalReport {
        task: *task,
        episodes: n_episodes,
        base_seed,
        success_ratio,
    })
}

/// An input to the metrics table: a learning curve or a raw update count.
#[derive(Debug, Clone, PartialEq)]
pub enum MetricSource {
    Curve(Vec<CurveRow>),
    Count(u64),
}

/// Per source: name and `(SRR, SEI)`, or `None` when it never reached the ratio.
pub type MetricRows = Vec<(String, Option<(f64, f64)>)>;

/// SRR/SEI table against `reference`. The reference ratio defaults to the
/// reference curve's final success ratio.
pub fn cmd_metrics(sources: &[(String, MetricSource)], reference: &str, ratio: Option<f64>) -> Result<(String, MetricRows)> {
    let (_, ref_src) = sources
        .iter()
        .find(|(n, _)| n == reference)
        .ok_or_else(|| CliError::Usage(format!("reference {reference:?} is not among the inputs")))?;
    let level = match (ratio, ref_src) {
        (Some(r), _) => Some(r),
        (None, MetricSource::Curve(c)) => Some(c.last().expect("non-empty curve").success_ratio),
        (None, MetricSource::Count(_)) => None,
    };
    let reach = |src: &MetricSource| -> Option<u64> {
        match src {
            MetricSource::Count(n) => Some(*n),
            MetricSource::Curve(c) => evalkit::updates_to_reach(c, level.expect("level set for curves")),
        }
    };
    if level.is_none() && sources.iter().any(|(_, s)| matches!(s, MetricSource::Curve(_))) {
        return Err(CliError::Usage("a reference ratio is needed when the reference is a bare count".into()));
    }
    let n_a = reach(ref_src).ok_or_else(|| CliError::Usage(format!("reference {reference:?} never reaches its ratio")))?;
    let mut rows = Vec::new();
    let mut out = Vec::new();
    for (name, src) in sources {
        let n_b = reach(src);
        out.push((name.clone(), n_b.map(|n| evalkit::srr_sei(n_a as f64, n as f64)).transpose()?));
        rows.push(SrrRow { method: name.clone(), n_b });
    }
    Ok((evalkit::render_srr_table(reference, n_a, &rows), out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyExport {
    pub files: Vec<PathBuf>,
    /// Per frame: summed policy saliency on goal cells and on non-goal cells.
    pub masses: Vec<(f64, f64)>,
}

/// Rolls one greedy episode and writes a policy and a value map per frame.
pub fn cmd_saliency(ckpt: &Path, task: &TaskId, seed: u64, n_frames: usize, out: &Path) -> Result<SaliencyExport> {
    let model = checkpoint::load(ckpt)?.model()?;
    let mut env = task.env_config().build().map_err(EvalError::from)?;
    check_compatible(&model, env.as_ref())?;
    fs::create_dir_all(out)?;
    let (mut obs, goal) = env.reset(seed).map_err(EvalError::from)?;
    let mut state = model.zero_state(1);
    let mut export = SaliencyExport {
        files: Vec::new(),
        masses: Vec::new(),
    };
    for frame in 0..n_frames {
        let cells = env.object_cells();
        let mut policy_map = None;
        for head in [Head::Policy, Head::Value] {
            let map = evalkit::saliency_map(&model, &obs, goal, &state, head)?;
            let path = out.join(format!("frame{frame:03}-{}.pgm", head.as_str()));
            fs::write(&path, pixmap::saliency_pgm(&map))?;
            export.files.push(path);
            if head == Head::Policy {
                policy_map = Some(map);
            }
        }
        let m = policy_map.expect("policy map");
        export.masses.push((m.mass(&cells.goal), m.mass(&cells.nongoal)));
        let action = evalkit::greedy_step(&model, &obs, goal, &mut state)?;
        let r = env.step(&action).map_err(EvalError::from)?;
        if r.done && frame + 1 < n_frames {
            break;
        }
        obs = r.observation;
    }
    Ok(export)
}

/// Writes every frame of one episode as PPM plus a per-step CSV. Uses the
/// checkpoint's greedy policy when given, uniform-random actions otherwise.
pub fn cmd_replay_dump(ckpt: Option<&Path>, task: &TaskId, seed: u64, out: &Path) -> Result<Vec<Outcome>> {
    let model = ckpt.map(|p| checkpoint::load(p).and_then(|c| c.model())).transpose()?;
    let mut env = task.env_config().build().map_err(EvalError::from)?;
    if let Some(m) = &model {
        check_compatible(m, env.as_ref())?;
    }
    fs::create_dir_all(out)?;
    let (mut obs, goal) = env.reset(seed).map_err(EvalError::from)?;
    let mut policy = model.as_ref().map(GreedyPolicy::new);
    if let Some(p) = policy.as_mut() {
        p.begin(goal);
    }
    let mut rng = crate::rng::substream(seed, "exploration");
    let n_classes = env.n_goals();
    let frame = |obs: &crate::tensor::Tensor| -> Result<Vec<u8>> {
        let rgb = if obs.shape()[0] == 3 {
            obs.clone()
        } else {
            pixmap::nav_frame_rgb(obs, n_classes)
        };
        Ok(pixmap::ppm_bytes(&rgb)?)
    };
    let mut log = String::from("step,action,reward,outcome\n");
    let mut outcomes = Vec::new();
    for t in 0.. {
        pixmap::write_file(&out.join(format!("frame{t:03}.ppm")), &frame(&obs)?)?;
        let action = match policy.as_mut() {
            Some(p) => p.act(&obs, goal)?,
            None => env.random_action(&mut rng),
        };
        let r = env.step(&action).map_err(EvalError::from)?;
        let a = match &action {
            Action::Discrete(i) => i.to_string(),
            Action::Continuous(v) => v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(" "),
        };
        log.push_str(&format!("{t},{a},{},{}\n", r.reward, r.outcome.as_str()));
        outcomes.push(r.outcome);
        obs = r.observation;
        if r.done {
            pixmap::write_file(&out.join(format!("frame{:03}.ppm", t + 1)), &frame(&obs)?)?;
            break;
        }
    }
    fs::write(out.join("steps.csv"), format!("# goal {goal}\n{log}"))?;
    Ok(outcomes)
}
