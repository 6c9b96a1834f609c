//! C ABI over the simulator and the trainer.
//!
//! Objects are opaque handles created by `*_new` / `*_load` and released by
//! the matching `*_free`. Every fallible call returns a [`JrStatus`]; on
//! failure the message is available from [`jr_last_error`] on the same
//! thread until the next failing call. Panics never cross the boundary and
//! are reported as [`JrStatus::Internal`].
//!
//! Handles are not thread-safe. Use one handle from one thread at a time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use jepa_rl::cartpole::{self, Action, CartPoleEnv, CartState};
use jepa_rl::config::ExperimentConfig;
use jepa_rl::harness::Trainer;
use jepa_rl::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Checkpoint = 5,
    NonFinite = 6,
    Telemetry = 7,
    Internal = 8,
}

/// Cart-pole state: position, velocity, pole angle, angular velocity.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct JrCartState {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct JrStepResult {
    pub state: JrCartState,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
}

/// Statistics of one rollout and its update phase. Loss terms the
/// configuration leaves out are NaN, as is `running_avg` before the first
/// finished episode.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct JrIterationStats {
    pub env_steps: u64,
    pub rollouts: u64,
    pub episodes: u64,
    pub running_avg: f64,
    pub mean_var: f64,
    pub min_mean_var: f64,
    pub l_jepa: f64,
    pub l_actor: f64,
    pub l_critic: f64,
    pub l_reg: f64,
    pub entropy: f64,
}

/// Opaque simulator handle.
pub struct JrEnv {
    env: CartPoleEnv,
}

/// Opaque trainer handle.
pub struct JrTrainer {
    trainer: Trainer,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> JrStatus {
    match e {
        Error::Config(_) | Error::ConfigParse { .. } => JrStatus::Config,
        Error::Usage(_) => JrStatus::InvalidArgument,
        Error::NonFinite { .. } | Error::NonFiniteOutput(_) => JrStatus::NonFinite,
        Error::Checkpoint(_) => JrStatus::Checkpoint,
        Error::Telemetry(_) => JrStatus::Telemetry,
        Error::Io { .. } => JrStatus::Io,
    }
}

struct Fail(JrStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(JrStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> JrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => JrStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal error: {msg}"));
            JrStatus::Internal
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref()
        .ok_or_else(|| Fail(JrStatus::NullPointer, format!("{what} is null")))
}

unsafe fn deref_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut()
        .ok_or_else(|| Fail(JrStatus::NullPointer, format!("{what} is null")))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(JrStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not UTF-8")))
}

fn to_c(s: &CartState) -> JrCartState {
    JrCartState {
        x: s.x,
        x_dot: s.x_dot,
        theta: s.theta,
        theta_dot: s.theta_dot,
    }
}

/// Message of the last failed call on this thread; empty if none. The
/// pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn jr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn jr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// New episode from a seeded reset.
///
/// # Safety
/// `out` must be valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn jr_env_new(seed: u64, out: *mut *mut JrEnv) -> JrStatus {
    guard(|| {
        let out = deref_mut(out, "out")?;
        *out = Box::into_raw(Box::new(JrEnv {
            env: CartPoleEnv::new(cartpole::reset(seed)),
        }));
        Ok(())
    })
}

/// # Safety
/// `env` must come from [`jr_env_new`] and not be used afterwards. Null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn jr_env_free(env: *mut JrEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// Starts a new episode from a seeded reset.
///
/// # Safety
/// `env` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn jr_env_reset(env: *mut JrEnv, seed: u64) -> JrStatus {
    guard(|| {
        deref_mut(env, "env")?.env = CartPoleEnv::new(cartpole::reset(seed));
        Ok(())
    })
}

/// Starts a new episode from an explicit state.
///
/// # Safety
/// `env` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn jr_env_set_state(env: *mut JrEnv, state: JrCartState) -> JrStatus {
    guard(|| {
        let s = CartState::from_array([state.x, state.x_dot, state.theta, state.theta_dot]);
        if !s.is_finite() {
            return Err(invalid("state must be finite"));
        }
        deref_mut(env, "env")?.env = CartPoleEnv::new(s);
        Ok(())
    })
}

/// # Safety
/// `env` must be a live handle and `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn jr_env_state(env: *const JrEnv, out: *mut JrCartState) -> JrStatus {
    guard(|| {
        let s = to_c(&deref(env, "env")?.env.state);
        *deref_mut(out, "out")? = s;
        Ok(())
    })
}

/// Applies action 0 (push left) or 1 (push right).
///
/// # Safety
/// `env` must be a live handle and `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn jr_env_step(env: *mut JrEnv, action: u32, out: *mut JrStepResult) -> JrStatus {
    guard(|| {
        let env = deref_mut(env, "env")?;
        let out = deref_mut(out, "out")?;
        let action =
            Action::from_index(action as usize).ok_or_else(|| invalid(format!("action {action} is not 0 or 1")))?;
        let r = env.env.step(action);
        *out = JrStepResult {
            state: to_c(&r.next_state),
            reward: r.reward,
            terminated: r.terminated,
            truncated: r.truncated,
        };
        Ok(())
    })
}

/// Renders the current state as a `size` x `size` grayscale frame, row
/// major, into `pixels` (`len` must equal `size * size`). `size` must
/// divide 84.
///
/// # Safety
/// `env` must be a live handle and `pixels` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn jr_env_render(env: *const JrEnv, size: usize, pixels: *mut f32, len: usize) -> JrStatus {
    guard(|| {
        let env = deref(env, "env")?;
        if pixels.is_null() {
            return Err(Fail(JrStatus::NullPointer, "pixels is null".into()));
        }
        if len != size * size {
            return Err(invalid(format!("buffer holds {len} values, frame has {}", size * size)));
        }
        let frame = cartpole::render_sized(&env.env.state, size)?;
        std::slice::from_raw_parts_mut(pixels, len).copy_from_slice(&frame.pixels);
        Ok(())
    })
}

/// Trainer from configuration text in the `key = value` format. Keys not
/// given keep their defaults.
///
/// # Safety
/// `config` must be a NUL-terminated string and `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn jr_trainer_new(config: *const c_char, seed: u64, out: *mut *mut JrTrainer) -> JrStatus {
    guard(|| {
        let text = c_str(config, "config")?;
        let out = deref_mut(out, "out")?;
        let cfg = ExperimentConfig::parse(text, "config")?;
        *out = Box::into_raw(Box::new(JrTrainer {
            trainer: Trainer::new(cfg, seed)?,
        }));
        Ok(())
    })
}

/// Trainer restored from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn jr_trainer_load(path: *const c_char, out: *mut *mut JrTrainer) -> JrStatus {
    guard(|| {
        let path = PathBuf::from(c_str(path, "path")?);
        let out = deref_mut(out, "out")?;
        *out = Box::into_raw(Box::new(JrTrainer {
            trainer: Trainer::load(&path)?,
        }));
        Ok(())
    })
}

/// # Safety
/// `trainer` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn jr_trainer_save(trainer: *const JrTrainer, path: *const c_char) -> JrStatus {
    guard(|| {
        let t = deref(trainer, "trainer")?;
        t.trainer.save(&PathBuf::from(c_str(path, "path")?))?;
        Ok(())
    })
}

/// # Safety
/// `trainer` must come from [`jr_trainer_new`] or [`jr_trainer_load`] and
/// not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn jr_trainer_free(trainer: *mut JrTrainer) {
    if !trainer.is_null() {
        drop(Box::from_raw(trainer));
    }
}

/// Collects one rollout and runs its update phase.
///
/// # Safety
/// `trainer` must be a live handle; `out` may be null.
#[no_mangle]
pub unsafe extern "C" fn jr_trainer_iterate(trainer: *mut JrTrainer, out: *mut JrIterationStats) -> JrStatus {
    guard(|| {
        let t = &mut deref_mut(trainer, "trainer")?.trainer;
        let (_, s) = t.iterate()?;
        let state = t.state();
        let returns = &state.episode_returns;
        let stats = JrIterationStats {
            env_steps: state.env_steps,
            rollouts: state.rollouts,
            episodes: returns.len() as u64,
            running_avg: if returns.is_empty() {
                f64::NAN
            } else {
                jepa_rl::telemetry::trailing_mean(returns, t.config().running_avg_window)
            },
            mean_var: s.mean_var,
            min_mean_var: s.min_mean_var,
            l_jepa: s.l_jepa.unwrap_or(f64::NAN),
            l_actor: s.l_actor,
            l_critic: s.l_critic,
            l_reg: s.l_reg.unwrap_or(f64::NAN),
            entropy: s.entropy,
        };
        if let Some(out) = out.as_mut() {
            *out = stats;
        }
        Ok(())
    })
}

/// Environment steps taken so far.
///
/// # Safety
/// `trainer` must be a live handle and `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn jr_trainer_env_steps(trainer: *const JrTrainer, out: *mut u64) -> JrStatus {
    guard(|| {
        let steps = deref(trainer, "trainer")?.trainer.state().env_steps;
        *deref_mut(out, "out")? = steps;
        Ok(())
    })
}

/// Embedding width of the trainer's encoder.
///
/// # Safety
/// `trainer` must be a live handle and `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn jr_trainer_embedding_dim(trainer: *const JrTrainer, out: *mut usize) -> JrStatus {
    guard(|| {
        let d = deref(trainer, "trainer")?.trainer.model().d_emb();
        *deref_mut(out, "out")? = d;
        Ok(())
    })
}

/// Greedy-policy returns of `episodes` fresh episodes into `returns`
/// (`len` must be at least `episodes`).
///
/// # Safety
/// `trainer` must be a live handle and `returns` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn jr_trainer_evaluate(
    trainer: *const JrTrainer,
    episodes: usize,
    seed: u64,
    returns: *mut f64,
    len: usize,
) -> JrStatus {
    guard(|| {
        let t = deref(trainer, "trainer")?;
        if returns.is_null() {
            return Err(Fail(JrStatus::NullPointer, "returns is null".into()));
        }
        if len < episodes {
            return Err(invalid(format!("buffer holds {len} values, need {episodes}")));
        }
        let r = t.trainer.evaluate(episodes, seed, None)?;
        std::slice::from_raw_parts_mut(returns, episodes).copy_from_slice(&r);
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn last_error() -> String {
        unsafe { CStr::from_ptr(jr_last_error()) }
            .to_string_lossy()
            .into_owned()
    }

    #[test]
    fn null_handles_are_reported() {
        let mut s = JrCartState::default();
        assert_eq!(unsafe { jr_env_state(std::ptr::null(), &mut s) }, JrStatus::NullPointer);
        assert!(last_error().contains("env is null"));
    }

    #[test]
    fn bad_action_is_invalid_argument() {
        let mut env = std::ptr::null_mut();
        unsafe {
            assert_eq!(jr_env_new(0, &mut env), JrStatus::Ok);
            let mut r = JrStepResult::default();
            assert_eq!(jr_env_step(env, 2, &mut r), JrStatus::InvalidArgument);
            jr_env_free(env);
        }
    }

    #[test]
    fn config_errors_map_to_config_status() {
        let mut t = std::ptr::null_mut();
        let text = CString::new("learning_rat = 1").unwrap();
        assert_eq!(unsafe { jr_trainer_new(text.as_ptr(), 0, &mut t) }, JrStatus::Config);
        assert!(t.is_null());
        assert!(last_error().contains("learning_rat"));
    }

    #[test]
    fn version_is_the_crate_version() {
        let v = unsafe { CStr::from_ptr(jr_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }
}
