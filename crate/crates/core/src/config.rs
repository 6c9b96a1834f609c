//! Experiment configuration and its flat `key = value` file format.
//!
//! One key per line, `#` starts a comment, blank lines are ignored. Every
//! field of [`ExperimentConfig`] is addressable and unknown keys are errors.
//! Keys that are absent keep their defaults.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ppo::{PpoHyper, POLICY_HIDDEN};
use crate::predictor::DEFAULT_HIDDEN;
use crate::vit::EncoderConfig;

/// Reference scale; runs below it are labeled as scaled in summaries.
pub const REFERENCE_ENV_STEPS: u64 = 100_000;
pub const REFERENCE_SEEDS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub label: String,
    pub use_jepa: bool,
    pub propagate_rl_grads: bool,
    pub use_reg: bool,
    pub total_env_steps: u64,
    pub seeds: usize,
    /// First seed; a multi-seed run uses `seed, seed + 1, ...`.
    pub seed: u64,
    pub ppo: PpoHyper,
    pub encoder: EncoderConfig,
    pub predictor_hidden: usize,
    pub policy_hidden: usize,
    pub ema_tau: f64,
    pub coef_jepa: f64,
    pub coef_actor: f64,
    pub coef_critic: f64,
    pub coef_reg: f64,
    /// Episodes in the trailing running-average window.
    pub running_avg_window: usize,
    pub num_envs: usize,
    /// Step simulators on worker threads. Flagged in run metadata.
    pub parallel_rollout: bool,
    /// Rollouts between `latest.ckpt` refreshes; 0 disables them.
    pub checkpoint_every: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            label: "run".into(),
            use_jepa: true,
            propagate_rl_grads: true,
            use_reg: false,
            total_env_steps: REFERENCE_ENV_STEPS,
            seeds: REFERENCE_SEEDS,
            seed: 0,
            ppo: PpoHyper::default(),
            encoder: EncoderConfig::default(),
            predictor_hidden: DEFAULT_HIDDEN,
            policy_hidden: POLICY_HIDDEN,
            ema_tau: crate::objective::EMA_TAU,
            coef_jepa: 1.0,
            coef_actor: 1.0,
            coef_critic: 1.0,
            coef_reg: 1.0,
            running_avg_window: 20,
            num_envs: 1,
            parallel_rollout: false,
            checkpoint_every: 10,
            output_dir: PathBuf::from("runs"),
        }
    }
}

/// The four switch settings compared in the study, with their labels.
pub const STUDY_CONFIGS: [(&str, bool, bool, bool); 4] = [
    ("jhat-grad-rhat", false, true, false),
    ("j-grad-rhat", true, true, false),
    ("j-gradhat-rhat", true, false, false),
    ("j-gradhat-r", true, false, true),
];

/// Keys left out of the fingerprint: they name or place a run without
/// changing what it computes.
const NON_SEMANTIC_KEYS: [&str; 5] = ["label", "seeds", "seed", "output_dir", "checkpoint_every"];

fn parse_value<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse::<T>().map_err(|_| format!("invalid value {v:?} for {key}"))
}

fn parse_bool(key: &str, v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("invalid value {v:?} for {key}, expected true or false")),
    }
}

impl ExperimentConfig {
    /// Copy of `self` with the study's switches for one of [`STUDY_CONFIGS`].
    pub fn with_switches(&self, label: &str, use_jepa: bool, propagate_rl_grads: bool, use_reg: bool) -> Self {
        ExperimentConfig {
            label: label.into(),
            use_jepa,
            propagate_rl_grads,
            use_reg,
            ..self.clone()
        }
    }

    /// 28x28 frames, a one-block encoder with 16-wide embeddings and short
    /// rollouts. Runs in seconds; used for smoke runs and tests.
    pub fn miniature() -> Self {
        let mut cfg = ExperimentConfig {
            label: "mini".into(),
            total_env_steps: 2048,
            seeds: 2,
            encoder: EncoderConfig {
                d_emb: 16,
                ..EncoderConfig::tiny()
            },
            predictor_hidden: 32,
            policy_hidden: 32,
            output_dir: PathBuf::from("runs/mini"),
            ..Default::default()
        };
        cfg.ppo.rollout_length = 256;
        cfg.ppo.minibatch = 64;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if !self.use_jepa && !self.propagate_rl_grads {
            return fail(
                "use_jepa = false with propagate_rl_grads = false leaves the encoder without any training signal",
            );
        }
        self.ppo.validate()?;
        self.encoder.validate()?;
        if self.encoder.frames_per_window != crate::observation::WINDOW_LEN {
            return fail("frames_per_window must be 3");
        }
        let native = crate::cartpole::FRAME_SIZE;
        if self.encoder.image_size == 0 || !native.is_multiple_of(self.encoder.image_size) {
            return Err(Error::Config(format!(
                "image_size must divide the native frame size {native}"
            )));
        }
        if self.label.is_empty() || self.label.contains(['/', '\\']) || self.label.chars().any(char::is_whitespace) {
            return fail("label must be a non-empty name without slashes or whitespace");
        }
        if self.total_env_steps < self.ppo.rollout_length as u64 {
            return fail("total_env_steps must cover at least one rollout");
        }
        if self.seeds == 0 || self.num_envs == 0 || self.running_avg_window == 0 {
            return fail("seeds, num_envs and running_avg_window must be positive");
        }
        if self.predictor_hidden == 0 || self.policy_hidden == 0 {
            return fail("hidden widths must be positive");
        }
        if !self.ppo.rollout_length.is_multiple_of(self.num_envs) {
            return fail("rollout_length must be a multiple of num_envs");
        }
        if !self.ppo.rollout_length.is_multiple_of(self.ppo.minibatch) {
            return fail("rollout_length must be a multiple of minibatch");
        }
        if self.ppo.minibatch < 2 {
            return fail("minibatch must hold at least 2 samples for the batch variance");
        }
        if !(self.ema_tau > 0.0 && self.ema_tau < 1.0) {
            return fail("ema_tau must lie in (0, 1)");
        }
        for (k, v) in [
            ("coef_jepa", self.coef_jepa),
            ("coef_actor", self.coef_actor),
            ("coef_critic", self.coef_critic),
            ("coef_reg", self.coef_reg),
        ] {
            if !v.is_finite() {
                return Err(Error::Config(format!("{k} must be finite")));
            }
        }
        Ok(())
    }

    /// Whether this run is smaller than the reference study.
    pub fn is_scaled(&self) -> bool {
        self.total_env_steps < REFERENCE_ENV_STEPS || self.seeds < REFERENCE_SEEDS
    }

    /// Optimizer steps taken on each rollout.
    pub fn updates_per_rollout(&self) -> u64 {
        (self.ppo.epochs * (self.ppo.rollout_length / self.ppo.minibatch)) as u64
    }

    pub fn num_rollouts(&self) -> u64 {
        self.total_env_steps / self.ppo.rollout_length as u64
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|k| self.seed + k).collect()
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let p = &mut self.ppo;
        let e = &mut self.encoder;
        match key {
            "label" => self.label = v.to_string(),
            "use_jepa" => self.use_jepa = parse_bool(key, v)?,
            "propagate_rl_grads" => self.propagate_rl_grads = parse_bool(key, v)?,
            "use_reg" => self.use_reg = parse_bool(key, v)?,
            "total_env_steps" => self.total_env_steps = parse_value(key, v)?,
            "seeds" => self.seeds = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "gamma" => p.gamma = parse_value(key, v)?,
            "gae_lambda" => p.gae_lambda = parse_value(key, v)?,
            "clip_eps" => p.clip_eps = parse_value(key, v)?,
            "epochs" => p.epochs = parse_value(key, v)?,
            "minibatch" => p.minibatch = parse_value(key, v)?,
            "value_coef" => p.value_coef = parse_value(key, v)?,
            "entropy_coef" => p.entropy_coef = parse_value(key, v)?,
            "rollout_length" => p.rollout_length = parse_value(key, v)?,
            "learning_rate" => p.learning_rate = parse_value(key, v)?,
            "adam_beta1" => p.adam_beta1 = parse_value(key, v)?,
            "adam_beta2" => p.adam_beta2 = parse_value(key, v)?,
            "adam_eps" => p.adam_eps = parse_value(key, v)?,
            "image_size" => e.image_size = parse_value(key, v)?,
            "patch_size" => e.patch_size = parse_value(key, v)?,
            "frames_per_window" => e.frames_per_window = parse_value(key, v)?,
            "d_emb" => e.d_emb = parse_value(key, v)?,
            "depth" => e.depth = parse_value(key, v)?,
            "heads" => e.heads = parse_value(key, v)?,
            "mlp_ratio" => e.mlp_ratio = parse_value(key, v)?,
            "predictor_hidden" => self.predictor_hidden = parse_value(key, v)?,
            "policy_hidden" => self.policy_hidden = parse_value(key, v)?,
            "ema_tau" => self.ema_tau = parse_value(key, v)?,
            "coef_jepa" => self.coef_jepa = parse_value(key, v)?,
            "coef_actor" => self.coef_actor = parse_value(key, v)?,
            "coef_critic" => self.coef_critic = parse_value(key, v)?,
            "coef_reg" => self.coef_reg = parse_value(key, v)?,
            "running_avg_window" => self.running_avg_window = parse_value(key, v)?,
            "num_envs" => self.num_envs = parse_value(key, v)?,
            "parallel_rollout" => self.parallel_rollout = parse_bool(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the current values. `origin`
    /// names the source in error messages.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::ConfigParse {
                path: origin.to_string(),
                line: n + 1,
                message,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            if v.is_empty() {
                return Err(err(format!("missing value for {k}")));
            }
            self.set(k, v).map_err(err)?;
        }
        Ok(())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(text, origin)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// All fields in file syntax, one per line, in a fixed order.
    pub fn to_conf_string(&self) -> String {
        let p = &self.ppo;
        let e = &self.encoder;
        let pairs: Vec<(&str, String)> = vec![
            ("label", self.label.clone()),
            ("use_jepa", self.use_jepa.to_string()),
            ("propagate_rl_grads", self.propagate_rl_grads.to_string()),
            ("use_reg", self.use_reg.to_string()),
            ("total_env_steps", self.total_env_steps.to_string()),
            ("seeds", self.seeds.to_string()),
            ("seed", self.seed.to_string()),
            ("gamma", p.gamma.to_string()),
            ("gae_lambda", p.gae_lambda.to_string()),
            ("clip_eps", p.clip_eps.to_string()),
            ("epochs", p.epochs.to_string()),
            ("minibatch", p.minibatch.to_string()),
            ("value_coef", p.value_coef.to_string()),
            ("entropy_coef", p.entropy_coef.to_string()),
            ("rollout_length", p.rollout_length.to_string()),
            ("learning_rate", p.learning_rate.to_string()),
            ("adam_beta1", p.adam_beta1.to_string()),
            ("adam_beta2", p.adam_beta2.to_string()),
            ("adam_eps", p.adam_eps.to_string()),
            ("image_size", e.image_size.to_string()),
            ("patch_size", e.patch_size.to_string()),
            ("frames_per_window", e.frames_per_window.to_string()),
            ("d_emb", e.d_emb.to_string()),
            ("depth", e.depth.to_string()),
            ("heads", e.heads.to_string()),
            ("mlp_ratio", e.mlp_ratio.to_string()),
            ("predictor_hidden", self.predictor_hidden.to_string()),
            ("policy_hidden", self.policy_hidden.to_string()),
            ("ema_tau", self.ema_tau.to_string()),
            ("coef_jepa", self.coef_jepa.to_string()),
            ("coef_actor", self.coef_actor.to_string()),
            ("coef_critic", self.coef_critic.to_string()),
            ("coef_reg", self.coef_reg.to_string()),
            ("running_avg_window", self.running_avg_window.to_string()),
            ("num_envs", self.num_envs.to_string()),
            ("parallel_rollout", self.parallel_rollout.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
        ];
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Settings that determine a run's numbers, in file syntax. Two runs of
    /// the same seed with equal fingerprints compute the same thing.
    pub fn fingerprint(&self) -> String {
        self.to_conf_string()
            .lines()
            .filter(|l| {
                let key = l.split('=').next().unwrap_or("").trim();
                !NON_SEMANTIC_KEYS.contains(&key)
            })
            .map(|l| format!("{l}\n"))
            .collect()
    }

    /// Directory holding one seed's artifacts.
    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.output_dir.join(&self.label).join(format!("seed_{seed}"))
    }
}
