//! C ABI over `gace-core`.
//!
//! Every function returns a [`GaceStatus`]. On failure a description is
//! kept per thread and can be copied out with [`gace_last_error`]. Handles
//! are opaque pointers created by `*_create`/`*_load` and released by the
//! matching `*_free`; passing a freed handle is undefined behavior.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use gace_core::envs::{Action, MultiTargetEnv, Outcome, TaskId};
use gace_core::evalkit::greedy_step;
use gace_core::gace::{gace_loss_value, Reduction};
use gace_core::nets::{ActionSpace, GoalModel, RecurrentState};
use gace_core::tensor::Tensor;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GaceStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Env = 3,
    Io = 4,
    Checkpoint = 5,
    ShapeMismatch = 6,
    Panic = 7,
}

/// Outcome codes written by [`gace_env_step`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GaceOutcome {
    Ongoing = 0,
    Success = 1,
    NonGoal = 2,
    Timeout = 3,
}

impl From<Outcome> for GaceOutcome {
    fn from(o: Outcome) -> Self {
        match o {
            Outcome::Ongoing => GaceOutcome::Ongoing,
            Outcome::Success => GaceOutcome::Success,
            Outcome::NonGoal => GaceOutcome::NonGoal,
            Outcome::Timeout => GaceOutcome::Timeout,
        }
    }
}

/// Environment handle.
pub struct GaceEnv {
    inner: Box<dyn MultiTargetEnv>,
    obs: Option<Tensor>,
}

/// Trained model handle with its greedy policy state.
pub struct GaceModel {
    model: GoalModel,
    state: RecurrentState,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: GaceStatus, msg: impl Into<String>) -> GaceStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
    status
}

fn guard(f: impl FnOnce() -> GaceStatus) -> GaceStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            fail(GaceStatus::Panic, msg)
        }
    }
}

unsafe fn c_str<'a>(p: *const c_char) -> Result<&'a str, GaceStatus> {
    if p.is_null() {
        return Err(fail(GaceStatus::NullPointer, "null string"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(GaceStatus::InvalidArgument, "string is not UTF-8"))
}

macro_rules! non_null {
    ($($p:expr),+) => {
        $(if $p.is_null() {
            return fail(GaceStatus::NullPointer, concat!(stringify!($p), " is null"));
        })+
    };
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length.
///
/// # Safety
/// `buf` must be valid for `len` bytes or null.
#[no_mangle]
pub unsafe extern "C" fn gace_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = e.len().min(len - 1);
            std::ptr::copy_nonoverlapping(e.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        e.len()
    })
}

/// Creates an environment for a task id such as `"G1"` or `"G2-unseen"`.
///
/// # Safety
/// `task` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gace_env_create(task: *const c_char, out: *mut *mut GaceEnv) -> GaceStatus {
    guard(|| {
        non_null!(out);
        let task = match c_str(task) {
            Ok(s) => s,
            Err(s) => return s,
        };
        let id: TaskId = match task.parse() {
            Ok(t) => t,
            Err(e) => return fail(GaceStatus::InvalidArgument, e.to_string()),
        };
        match id.env_config().build() {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(GaceEnv { inner, obs: None }));
                GaceStatus::Ok
            }
            Err(e) => fail(GaceStatus::Env, e.to_string()),
        }
    })
}

/// # Safety
/// `env` must come from [`gace_env_create`] or be null.
#[no_mangle]
pub unsafe extern "C" fn gace_env_free(env: *mut GaceEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// Observation shape `[C, H, W]`, number of goals, and action dimension.
/// `discrete` is set to 1 for a discrete action space.
///
/// # Safety
/// Pointers must be valid; `shape` must hold 3 elements.
#[no_mangle]
pub unsafe extern "C" fn gace_env_spec(
    env: *const GaceEnv,
    shape: *mut usize,
    n_goals: *mut usize,
    action_dim: *mut usize,
    discrete: *mut u8,
) -> GaceStatus {
    guard(|| {
        non_null!(env, shape, n_goals, action_dim, discrete);
        let e = &(*env).inner;
        for (i, d) in e.obs_shape().iter().enumerate() {
            *shape.add(i) = *d;
        }
        *n_goals = e.n_goals();
        let (dim, disc) = match e.action_space() {
            ActionSpace::Discrete(n) => (n, 1),
            ActionSpace::Continuous(n) => (n, 0),
        };
        *action_dim = dim;
        *discrete = disc;
        GaceStatus::Ok
    })
}

/// Starts an episode; writes the goal index.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn gace_env_reset(env: *mut GaceEnv, seed: u64, goal: *mut usize) -> GaceStatus {
    guard(|| {
        non_null!(env, goal);
        let e = &mut *env;
        match e.inner.reset(seed) {
            Ok((obs, z)) => {
                e.obs = Some(obs);
                *goal = z;
                GaceStatus::Ok
            }
            Err(err) => fail(GaceStatus::Env, err.to_string()),
        }
    })
}

/// Copies the current observation (row-major `[C, H, W]`) into `buf`.
///
/// # Safety
/// `buf` must be valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn gace_env_observation(env: *const GaceEnv, buf: *mut f64, len: usize) -> GaceStatus {
    guard(|| {
        non_null!(env, buf);
        let Some(obs) = &(*env).obs else {
            return fail(GaceStatus::Env, "environment has not been reset");
        };
        if obs.len() != len {
            return fail(GaceStatus::ShapeMismatch, format!("observation has {} values, buffer {len}", obs.len()));
        }
        std::ptr::copy_nonoverlapping(obs.data().as_ptr(), buf, len);
        GaceStatus::Ok
    })
}

/// Advances one step. Discrete environments read `action[0]` as the action
/// index; continuous ones read `n` components.
///
/// # Safety
/// `action` must be valid for `n` doubles; output pointers writable.
#[no_mangle]
pub unsafe extern "C" fn gace_env_step(
    env: *mut GaceEnv,
    action: *const f64,
    n: usize,
    reward: *mut f64,
    done: *mut u8,
    outcome: *mut GaceOutcome,
) -> GaceStatus {
    guard(|| {
        non_null!(env, action, reward, done, outcome);
        let e = &mut *env;
        let xs = std::slice::from_raw_parts(action, n);
        let a = match e.inner.action_space() {
            ActionSpace::Discrete(k) => {
                if n != 1 || !(xs[0] >= 0.0 && xs[0] < k as f64 && xs[0].fract() == 0.0) {
                    return fail(GaceStatus::InvalidArgument, format!("discrete action must be one index in 0..{k}"));
                }
                Action::Discrete(xs[0] as usize)
            }
            ActionSpace::Continuous(d) => {
                if n != d {
                    return fail(GaceStatus::ShapeMismatch, format!("action has {n} components, env needs {d}"));
                }
                Action::Continuous(xs.to_vec())
            }
        };
        match e.inner.step(&a) {
            Ok(r) => {
                *reward = r.reward;
                *done = u8::from(r.done);
                *outcome = r.outcome.into();
                e.obs = Some(r.observation);
                GaceStatus::Ok
            }
            Err(err) => fail(GaceStatus::Env, err.to_string()),
        }
    })
}

/// Loads a checkpoint written by the `gace` trainer.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gace_model_load(path: *const c_char, out: *mut *mut GaceModel) -> GaceStatus {
    guard(|| {
        non_null!(out);
        let path = match c_str(path) {
            Ok(s) => s,
            Err(s) => return s,
        };
        let ckpt = match gace_core::checkpoint::load(Path::new(path)) {
            Ok(c) => c,
            Err(gace_core::checkpoint::CheckpointError::Io(e)) => return fail(GaceStatus::Io, e.to_string()),
            Err(e) => return fail(GaceStatus::Checkpoint, e.to_string()),
        };
        let model = match ckpt.model() {
            Ok(m) => m,
            Err(e) => return fail(GaceStatus::Checkpoint, e.to_string()),
        };
        let state = model.zero_state(1);
        *out = Box::into_raw(Box::new(GaceModel { model, state }));
        GaceStatus::Ok
    })
}

/// # Safety
/// `model` must come from [`gace_model_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn gace_model_free(model: *mut GaceModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Clears the recurrent state before a new episode.
///
/// # Safety
/// `model` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gace_model_begin(model: *mut GaceModel, goal: usize) -> GaceStatus {
    guard(|| {
        non_null!(model);
        let m = &mut *model;
        if goal >= m.model.config.n_goals {
            return fail(GaceStatus::InvalidArgument, format!("goal {goal} out of range"));
        }
        m.state = m.model.zero_state(1);
        GaceStatus::Ok
    })
}

/// Greedy action for one observation. Discrete models write the action
/// index to `action[0]`; continuous ones write `action_len` components.
///
/// # Safety
/// `obs` valid for `obs_len` doubles, `action` for `action_len`.
#[no_mangle]
pub unsafe extern "C" fn gace_model_act(
    model: *mut GaceModel,
    obs: *const f64,
    obs_len: usize,
    goal: usize,
    action: *mut f64,
    action_len: usize,
) -> GaceStatus {
    guard(|| {
        non_null!(model, obs, action);
        let m = &mut *model;
        let cfg = &m.model.config;
        if obs_len != cfg.obs_len() {
            return fail(GaceStatus::ShapeMismatch, format!("model expects {} observation values, got {obs_len}", cfg.obs_len()));
        }
        if goal >= cfg.n_goals {
            return fail(GaceStatus::InvalidArgument, format!("goal {goal} out of range"));
        }
        let want = match cfg.action {
            ActionSpace::Discrete(_) => 1,
            ActionSpace::Continuous(d) => d,
        };
        if action_len != want {
            return fail(GaceStatus::ShapeMismatch, format!("action buffer needs {want} slots, got {action_len}"));
        }
        let t = Tensor::new(cfg.obs_shape.to_vec(), std::slice::from_raw_parts(obs, obs_len).to_vec()).expect("checked length");
        match greedy_step(&m.model, &t, goal, &mut m.state) {
            Ok(Action::Discrete(i)) => *action = i as f64,
            Ok(Action::Continuous(v)) => std::ptr::copy_nonoverlapping(v.as_ptr(), action, v.len()),
            Err(e) => return fail(GaceStatus::ShapeMismatch, e.to_string()),
        }
        GaceStatus::Ok
    })
}

/// Sample requirement ratio and sample efficiency improvement, in percent.
///
/// # Safety
/// Output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn gace_srr_sei(n_a: f64, n_b: f64, srr: *mut f64, sei: *mut f64) -> GaceStatus {
    guard(|| {
        non_null!(srr, sei);
        match gace_core::evalkit::srr_sei(n_a, n_b) {
            Ok((a, b)) => {
                *srr = a;
                *sei = b;
                GaceStatus::Ok
            }
            Err(e) => fail(GaceStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Summed goal-aware cross-entropy of `rows × cols` probabilities against
/// `rows` labels.
///
/// # Safety
/// `probs` valid for `rows * cols` doubles, `labels` for `rows` entries.
#[no_mangle]
pub unsafe extern "C" fn gace_loss(
    probs: *const f64,
    rows: usize,
    cols: usize,
    labels: *const usize,
    eps_clip: f64,
    out: *mut f64,
) -> GaceStatus {
    guard(|| {
        non_null!(probs, labels, out);
        if rows == 0 || cols == 0 || !(eps_clip > 0.0 && eps_clip < 1.0) {
            return fail(GaceStatus::InvalidArgument, "need rows, cols > 0 and eps_clip in (0, 1)");
        }
        let labels = std::slice::from_raw_parts(labels, rows);
        if let Some(&z) = labels.iter().find(|&&z| z >= cols) {
            return fail(GaceStatus::InvalidArgument, format!("label {z} out of range for {cols} classes"));
        }
        let p = Tensor::new(vec![rows, cols], std::slice::from_raw_parts(probs, rows * cols).to_vec()).expect("positive extents");
        *out = gace_loss_value(&p, labels, eps_clip, Reduction::Sum);
        GaceStatus::Ok
    })
}
