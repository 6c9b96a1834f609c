//! Training loop: rollout collection, the summed loss under the experiment
//! switches, optimizer and target-encoder updates, checkpoints and run
//! orchestration.
//!
//! All parameters live in one flat `f32` vector laid out as encoder,
//! predictor, then actor-critic. A single Adam instance updates all of it.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cartpole::{render_sized, reset_with, Action, CartPoleEnv, CartState, Frame};
use crate::checkpoint::Archive;
use crate::config::{ExperimentConfig, STUDY_CONFIGS};
use crate::error::{Error, Result};
use crate::nn::real::all_finite;
use crate::nn::{Layout, Slot};
use crate::objective::{collapse_metric, jepa_loss, variance_reg_loss, EmaState};
use crate::observation::{FrameHistory, ObservationWindow};
use crate::optim::Adam;
use crate::ppo::{
    gae, log_softmax2, normalize_advantages, ppo_losses, route_gradients, ActorCritic, PpoSample, N_ACTIONS,
};
use crate::predictor::Predictor;
use crate::telemetry::{self, TelemetryRecord};
use crate::vit::VitEncoder;

/// Encoder, predictor and actor-critic over one flat parameter vector.
#[derive(Clone, Debug)]
pub struct Model {
    pub encoder: VitEncoder,
    pub predictor: Predictor,
    pub policy: ActorCritic,
    layout: Layout,
    enc: Slot,
    pred: Slot,
    pol: Slot,
}

impl Model {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let encoder = VitEncoder::new(cfg.encoder)?;
        let d = cfg.encoder.d_emb;
        let predictor = Predictor::new(d, cfg.predictor_hidden, N_ACTIONS);
        let policy = ActorCritic::new(d, cfg.policy_hidden);
        let mut layout = Layout::new();
        let enc = layout.append("encoder.", encoder.layout());
        let pred = layout.append("predictor.", predictor.layout());
        let pol = layout.append("policy.", policy.layout());
        Ok(Model {
            encoder,
            predictor,
            policy,
            layout,
            enc,
            pred,
            pol,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn encoder_slot(&self) -> Slot {
        self.enc
    }

    pub fn predictor_slot(&self) -> Slot {
        self.pred
    }

    pub fn policy_slot(&self) -> Slot {
        self.pol
    }

    pub fn d_emb(&self) -> usize {
        self.encoder.config().d_emb
    }
}

/// One simulator with its frame history and the running episode return.
#[derive(Clone, Debug)]
pub struct EnvSlot {
    pub env: CartPoleEnv,
    pub history: FrameHistory,
    pub episode_return: f64,
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: Vec<f32>,
    pub ema: EmaState<f32>,
    pub adam: Adam<f32>,
    /// Action sampling and episode resets.
    pub rollout_rng: ChaCha8Rng,
    /// Minibatch shuffling.
    pub shuffle_rng: ChaCha8Rng,
    pub envs: Vec<EnvSlot>,
    pub env_steps: u64,
    pub rollouts: u64,
    pub episode_returns: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Transition {
    pub x: ObservationWindow,
    /// `None` when the episode terminated at this step.
    pub y: Option<ObservationWindow>,
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    pub done: bool,
}

/// A completed episode: global env step at its end, return, running average.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeEnd {
    pub step: u64,
    pub episodic_return: f64,
    pub running_avg: f64,
}

#[derive(Clone, Debug)]
pub struct Rollout {
    /// Time-major: transition of env `e` at step `t` is at `t * num_envs + e`.
    pub transitions: Vec<Transition>,
    pub num_envs: usize,
    /// Value of each env's state after the last step.
    pub bootstrap: Vec<f64>,
    pub episodes: Vec<EpisodeEnd>,
    /// Filled by [`Trainer::prepare`].
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

/// Indices into a rollout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Minibatch(pub Vec<usize>);

/// Which loss terms send gradients. Disabled terms are still evaluated
/// when the configuration includes them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossTerms {
    pub jepa: bool,
    pub actor: bool,
    pub critic: bool,
    pub reg: bool,
}

impl LossTerms {
    pub fn enabled(cfg: &ExperimentConfig) -> Self {
        LossTerms {
            jepa: cfg.use_jepa,
            actor: true,
            critic: true,
            reg: cfg.use_reg,
        }
    }

    pub fn rl_only() -> Self {
        LossTerms {
            jepa: false,
            actor: true,
            critic: true,
            reg: false,
        }
    }
}

/// Loss values of one minibatch. `l_jepa` and `l_reg` are `None` when the
/// configuration leaves them out (or no sample had a target).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_jepa: Option<f64>,
    pub l_actor: f64,
    pub l_critic: f64,
    pub l_reg: Option<f64>,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub mean_var: f64,
}

impl LossBreakdown {
    pub fn total(&self, cfg: &ExperimentConfig) -> f64 {
        total_loss(
            cfg,
            self.l_jepa.unwrap_or(0.0),
            self.l_actor,
            self.l_critic,
            self.l_reg.unwrap_or(0.0),
        )
    }
}

/// `L = L_jepa + L_actor + L_critic + L_reg` with the configuration's
/// switches and per-term coefficients.
pub fn total_loss(cfg: &ExperimentConfig, l_jepa: f64, l_actor: f64, l_critic: f64, l_reg: f64) -> f64 {
    let mut total = cfg.coef_actor * l_actor + cfg.coef_critic * l_critic;
    if cfg.use_jepa {
        total += cfg.coef_jepa * l_jepa;
    }
    if cfg.use_reg {
        total += cfg.coef_reg * l_reg;
    }
    total
}

/// Means over the minibatches of one update phase.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateSummary {
    pub updates: usize,
    pub l_jepa: Option<f64>,
    pub l_actor: f64,
    pub l_critic: f64,
    pub l_reg: Option<f64>,
    pub entropy: f64,
    pub mean_var: f64,
    pub min_mean_var: f64,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn new_env_slot(rng: &mut ChaCha8Rng, size: usize) -> Result<EnvSlot> {
    let env = CartPoleEnv::new(reset_with(rng));
    let mut history = FrameHistory::new(size, size);
    history.push_frame(render_sized(&env.state, size)?)?;
    Ok(EnvSlot {
        env,
        history,
        episode_return: 0.0,
    })
}

struct Advance {
    reward: f64,
    done: bool,
    y: Option<ObservationWindow>,
}

/// Steps one env and records the successor frame unless it terminated.
fn advance(slot: &mut EnvSlot, action: usize, size: usize) -> Result<Advance> {
    let t = slot
        .history
        .newest_index()
        .ok_or_else(|| Error::Usage("stepping an env with empty history".into()))?;
    let action = Action::from_index(action).ok_or_else(|| Error::Usage(format!("invalid action {action}")))?;
    let r = slot.env.step(action);
    if !r.next_state.is_finite() {
        return Err(Error::Config(format!(
            "simulator produced a non-finite state {:?}",
            r.next_state
        )));
    }
    slot.episode_return += r.reward;
    let y = if r.terminated {
        None
    } else {
        slot.history.push_frame(render_sized(&slot.env.state, size)?)?;
        slot.history.y_window(t)?
    };
    Ok(Advance {
        reward: r.reward,
        done: r.terminated || r.truncated,
        y,
    })
}

fn to_f64(xs: &[f32]) -> Vec<f64> {
    xs.iter().map(|&v| v as f64).collect()
}

pub struct Trainer {
    cfg: ExperimentConfig,
    seed: u64,
    model: Model,
    state: TrainState,
}

impl Trainer {
    pub fn new(cfg: ExperimentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(&cfg)?;
        let params: Vec<f32> = model.layout.init(&mut rng_for(seed, 0));
        let ema = EmaState::new(model.enc.of(&params), cfg.ema_tau);
        let p = &cfg.ppo;
        let adam = Adam::new(params.len(), p.learning_rate, p.adam_beta1, p.adam_beta2, p.adam_eps);
        let mut rollout_rng = rng_for(seed, 1);
        let envs = (0..cfg.num_envs)
            .map(|_| new_env_slot(&mut rollout_rng, cfg.encoder.image_size))
            .collect::<Result<Vec<_>>>()?;
        Ok(Trainer {
            seed,
            model,
            state: TrainState {
                params,
                ema,
                adam,
                rollout_rng,
                shuffle_rng: rng_for(seed, 2),
                envs,
                env_steps: 0,
                rollouts: 0,
                episode_returns: Vec::new(),
            },
            cfg,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    /// Direct access for probes and tests. Editing the encoder weights does
    /// not touch the target copy.
    pub fn state_mut(&mut self) -> &mut TrainState {
        &mut self.state
    }

    pub fn encoder_params(&self) -> &[f32] {
        self.model.enc.of(&self.state.params)
    }

    /// Context embeddings of `windows` under the current encoder.
    pub fn embed(&self, windows: &[&ObservationWindow]) -> Result<Vec<f32>> {
        self.model.encoder.encode(self.encoder_params(), windows)
    }

    /// Log-probabilities and values of the current policy.
    pub fn policy_eval(&self, windows: &[&ObservationWindow]) -> Result<(Vec<[f64; 2]>, Vec<f64>)> {
        let s = self.embed(windows)?;
        let (logits, values, _) = self.model.policy.forward(self.model.pol.of(&self.state.params), &s);
        let lp = logits
            .chunks_exact(N_ACTIONS)
            .map(|l| log_softmax2(l[0] as f64, l[1] as f64))
            .collect();
        Ok((lp, to_f64(&values)))
    }

    /// Runs the current policy for `rollout_length` transitions.
    pub fn collect_rollout(&mut self) -> Result<Rollout> {
        let n_env = self.cfg.num_envs;
        let steps = self.cfg.ppo.rollout_length / n_env;
        let size = self.cfg.encoder.image_size;
        let mut transitions = Vec::with_capacity(steps * n_env);
        let mut episodes = Vec::new();
        for _ in 0..steps {
            let xs = self
                .state
                .envs
                .iter()
                .map(|e| e.history.x_window())
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&ObservationWindow> = xs.iter().collect();
            let (log_probs, values) = self.policy_eval(&refs)?;
            let actions: Vec<usize> = log_probs
                .iter()
                .map(|lp| {
                    let u: f64 = self.state.rollout_rng.random();
                    if u < lp[0].exp() {
                        0
                    } else {
                        1
                    }
                })
                .collect();
            let outcomes: Vec<Result<Advance>> = if self.cfg.parallel_rollout && n_env > 1 {
                std::thread::scope(|s| {
                    let handles: Vec<_> = self
                        .state
                        .envs
                        .iter_mut()
                        .zip(&actions)
                        .map(|(slot, &a)| s.spawn(move || advance(slot, a, size)))
                        .collect();
                    handles
                        .into_iter()
                        .map(|h| h.join().expect("rollout worker panicked"))
                        .collect()
                })
            } else {
                self.state
                    .envs
                    .iter_mut()
                    .zip(&actions)
                    .map(|(slot, &a)| advance(slot, a, size))
                    .collect()
            };
            for (e, (out, x)) in outcomes.into_iter().zip(xs).enumerate() {
                let out = out?;
                self.state.env_steps += 1;
                if out.done {
                    let slot = &mut self.state.envs[e];
                    self.state.episode_returns.push(slot.episode_return);
                    episodes.push(EpisodeEnd {
                        step: self.state.env_steps,
                        episodic_return: slot.episode_return,
                        running_avg: telemetry::trailing_mean(&self.state.episode_returns, self.cfg.running_avg_window),
                    });
                    *slot = new_env_slot(&mut self.state.rollout_rng, size)?;
                }
                let a = actions[e];
                transitions.push(Transition {
                    x,
                    y: out.y,
                    action: a,
                    log_prob: log_probs[e][a],
                    value: values[e],
                    reward: out.reward,
                    done: out.done,
                });
            }
        }
        let xs = self
            .state
            .envs
            .iter()
            .map(|e| e.history.x_window())
            .collect::<Result<Vec<_>>>()?;
        let (_, bootstrap) = self.policy_eval(&xs.iter().collect::<Vec<_>>())?;
        let n = transitions.len();
        Ok(Rollout {
            transitions,
            num_envs: n_env,
            bootstrap,
            episodes,
            advantages: vec![0.0; n],
            returns: vec![0.0; n],
        })
    }

    /// Computes advantages and returns, then draws the minibatch order for
    /// every epoch.
    pub fn prepare(&mut self, rollout: &mut Rollout) -> Result<Vec<Minibatch>> {
        let n_env = rollout.num_envs;
        let steps = rollout.len() / n_env;
        let p = &self.cfg.ppo;
        for e in 0..n_env {
            let col = |f: &dyn Fn(&Transition) -> f64| -> Vec<f64> {
                (0..steps).map(|t| f(&rollout.transitions[t * n_env + e])).collect()
            };
            let rewards = col(&|tr| tr.reward);
            let values = col(&|tr| tr.value);
            let dones: Vec<bool> = (0..steps).map(|t| rollout.transitions[t * n_env + e].done).collect();
            let (adv, ret) = gae(&rewards, &values, &dones, rollout.bootstrap[e], p.gamma, p.gae_lambda)?;
            for t in 0..steps {
                rollout.advantages[t * n_env + e] = adv[t];
                rollout.returns[t * n_env + e] = ret[t];
            }
        }
        normalize_advantages(&mut rollout.advantages);
        let mut batches = Vec::new();
        for _ in 0..p.epochs {
            let mut perm: Vec<usize> = (0..rollout.len()).collect();
            perm.shuffle(&mut self.state.shuffle_rng);
            batches.extend(perm.chunks_exact(p.minibatch).map(|c| Minibatch(c.to_vec())));
        }
        Ok(batches)
    }

    /// Loss values and the gradient of the selected terms w.r.t. all
    /// parameters, for one minibatch of a prepared rollout.
    pub fn loss_and_grad(
        &self,
        rollout: &Rollout,
        mb: &Minibatch,
        terms: LossTerms,
    ) -> Result<(LossBreakdown, Vec<f32>)> {
        let cfg = &self.cfg;
        let m = &self.model;
        let d = m.d_emb();
        let params = &self.state.params;
        let (pe, pp, pc) = (m.enc.of(params), m.pred.of(params), m.pol.of(params));
        let mut grads = vec![0.0f32; params.len()];
        let batch = mb.0.len();
        let trs: Vec<&Transition> = mb.0.iter().map(|&i| &rollout.transitions[i]).collect();
        let xs: Vec<&ObservationWindow> = trs.iter().map(|t| &t.x).collect();

        let (s_x, enc_cache) = m.encoder.forward(pe, &xs)?;
        if !all_finite(&s_x) {
            return Err(self.non_finite("context embedding"));
        }
        let routed = route_gradients(cfg.propagate_rl_grads, &s_x);
        let (logits, values, pcache) = m.policy.forward(pc, routed.values());
        let samples: Vec<PpoSample> =
            mb.0.iter()
                .zip(&trs)
                .map(|(&i, t)| PpoSample {
                    action: t.action,
                    old_log_prob: t.log_prob,
                    advantage: rollout.advantages[i],
                    ret: rollout.returns[i],
                })
                .collect();
        let mut ppo = ppo_losses(&logits, &values, &samples, &cfg.ppo);
        let (ca, cc) = (
            if terms.actor { cfg.coef_actor as f32 } else { 0.0 },
            if terms.critic { cfg.coef_critic as f32 } else { 0.0 },
        );
        ppo.d_logits.iter_mut().for_each(|g| *g *= ca);
        ppo.d_values.iter_mut().for_each(|g| *g *= cc);
        let ds_rl = m
            .policy
            .backward(pc, &pcache, &ppo.d_logits, &ppo.d_values, m.pol.of_mut(&mut grads));
        let rl_reaches_encoder = routed.propagates() && (terms.actor || terms.critic);
        let mut ds = routed.pull_back(ds_rl).unwrap_or_else(|| vec![0.0; batch * d]);
        let mut touched = rl_reaches_encoder;

        let mut l_jepa = None;
        if cfg.use_jepa {
            let with_target: Vec<usize> = (0..batch).filter(|&k| trs[k].y.is_some()).collect();
            if !with_target.is_empty() {
                let ys: Vec<&ObservationWindow> = with_target.iter().map(|&k| trs[k].y.as_ref().unwrap()).collect();
                let s_y = m.encoder.encode(&self.state.ema.theta_bar, &ys)?;
                let mut sx_sub = Vec::with_capacity(with_target.len() * d);
                for &k in &with_target {
                    sx_sub.extend_from_slice(&s_x[k * d..(k + 1) * d]);
                }
                let actions: Vec<usize> = with_target.iter().map(|&k| trs[k].action).collect();
                let (pred, pred_cache) = m.predictor.forward(pp, &sx_sub, &actions);
                let (loss, mut d_pred) = jepa_loss(&pred, &s_y, d);
                l_jepa = Some(loss as f64);
                if terms.jepa {
                    let c = cfg.coef_jepa as f32;
                    d_pred.iter_mut().for_each(|g| *g *= c);
                    let ds_sub = m
                        .predictor
                        .backward(pp, &pred_cache, &d_pred, m.pred.of_mut(&mut grads));
                    for (r, &k) in with_target.iter().enumerate() {
                        for j in 0..d {
                            ds[k * d + j] += ds_sub[r * d + j];
                        }
                    }
                    touched = true;
                }
            }
        }

        let mut l_reg = None;
        if cfg.use_reg {
            let (loss, g) = variance_reg_loss(&s_x, d)?;
            l_reg = Some(loss as f64);
            if terms.reg {
                let c = cfg.coef_reg as f32;
                for (a, b) in ds.iter_mut().zip(&g) {
                    *a += c * *b;
                }
                touched = true;
            }
        }
        let report = collapse_metric(&s_x, d)?;
        if touched {
            m.encoder.backward(pe, &enc_cache, &ds, m.enc.of_mut(&mut grads));
        }
        Ok((
            LossBreakdown {
                l_jepa,
                l_actor: ppo.l_actor,
                l_critic: ppo.l_critic,
                l_reg,
                entropy: ppo.entropy,
                clip_fraction: ppo.clip_fraction,
                mean_var: report.mean_variance,
            },
            grads,
        ))
    }

    fn non_finite(&self, what: &str) -> Error {
        Error::NonFinite {
            what: what.to_string(),
            update: self.state.adam.step,
            env_step: self.state.env_steps,
        }
    }

    /// One Adam step on all parameters, then the target-encoder average.
    pub fn apply_gradients(&mut self, grads: &[f32]) -> Result<()> {
        self.state.adam.update(&mut self.state.params, grads);
        self.state.ema.update(self.model.enc.of(&self.state.params))
    }

    /// Differentiates the configured total loss on one minibatch and
    /// applies the update.
    pub fn update(&mut self, rollout: &Rollout, mb: &Minibatch) -> Result<LossBreakdown> {
        let (losses, grads) = self.loss_and_grad(rollout, mb, LossTerms::enabled(&self.cfg))?;
        let values = [
            losses.l_jepa.unwrap_or(0.0),
            losses.l_actor,
            losses.l_critic,
            losses.l_reg.unwrap_or(0.0),
        ];
        if values.iter().any(|v| !v.is_finite()) {
            return Err(self.non_finite("loss"));
        }
        if !all_finite(&grads) {
            return Err(self.non_finite("gradient"));
        }
        self.apply_gradients(&grads)?;
        Ok(losses)
    }

    /// PPO epochs over a collected rollout.
    pub fn train_step(&mut self, rollout: &mut Rollout) -> Result<UpdateSummary> {
        if rollout.is_empty() {
            return Err(Error::Usage("train_step on an empty rollout".into()));
        }
        let batches = self.prepare(rollout)?;
        let mut all = Vec::with_capacity(batches.len());
        for mb in &batches {
            all.push(self.update(rollout, mb)?);
        }
        self.state.rollouts += 1;
        let n = all.len() as f64;
        let mean_opt = |f: &dyn Fn(&LossBreakdown) -> Option<f64>| {
            let v: Vec<f64> = all.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Ok(UpdateSummary {
            updates: all.len(),
            l_jepa: mean_opt(&|l| l.l_jepa),
            l_actor: all.iter().map(|l| l.l_actor).sum::<f64>() / n,
            l_critic: all.iter().map(|l| l.l_critic).sum::<f64>() / n,
            l_reg: mean_opt(&|l| l.l_reg),
            entropy: all.iter().map(|l| l.entropy).sum::<f64>() / n,
            mean_var: all.iter().map(|l| l.mean_var).sum::<f64>() / n,
            min_mean_var: all.iter().map(|l| l.mean_var).fold(f64::INFINITY, f64::min),
        })
    }

    /// Greedy-policy episodes from fresh resets. Frames are written as
    /// `ep{k}_{t}.pgm` when `dump_dir` is given.
    pub fn evaluate(&self, episodes: usize, seed: u64, dump_dir: Option<&Path>) -> Result<Vec<f64>> {
        if let Some(dir) = dump_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let size = self.cfg.encoder.image_size;
        let mut rng = rng_for(seed, 3);
        let mut returns = Vec::with_capacity(episodes);
        for ep in 0..episodes {
            let mut slot = new_env_slot(&mut rng, size)?;
            let mut t = 0usize;
            loop {
                if let Some(dir) = dump_dir {
                    let native = crate::cartpole::render(&slot.env.state);
                    native.write_pgm(&dir.join(format!("ep{ep}_{t:04}.pgm")))?;
                }
                let x = slot.history.x_window()?;
                let (lp, _) = self.policy_eval(&[&x])?;
                let action = if lp[0][0] >= lp[0][1] { 0 } else { 1 };
                let out = advance(&mut slot, action, size)?;
                t += 1;
                if out.done {
                    break;
                }
            }
            returns.push(slot.episode_return);
        }
        Ok(returns)
    }

    /// Serializes the full training state. Only valid between rollouts.
    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        for line in self.cfg.to_conf_string().lines() {
            if let Some((k, v)) = line.split_once('=') {
                a.put_meta(&format!("config.{}", k.trim()), v.trim())?;
            }
        }
        let s = &self.state;
        a.put_meta("seed", self.seed)?;
        a.put_meta("env_steps", s.env_steps)?;
        a.put_meta("rollouts", s.rollouts)?;
        a.put_meta("adam.step", s.adam.step)?;
        for e in self.model.layout.entries() {
            let slot = e.slot();
            a.put_tensor(&format!("params.{}", e.name), &e.shape, slot.of(&s.params).to_vec())?;
            a.put_tensor(&format!("adam.m.{}", e.name), &e.shape, slot.of(&s.adam.m).to_vec())?;
            a.put_tensor(&format!("adam.v.{}", e.name), &e.shape, slot.of(&s.adam.v).to_vec())?;
        }
        for e in self.model.encoder.layout().entries() {
            a.put_tensor(
                &format!("ema.{}", e.name),
                &e.shape,
                e.slot().of(&s.ema.theta_bar).to_vec(),
            )?;
        }
        for (name, rng) in [("rollout", &s.rollout_rng), ("shuffle", &s.shuffle_rng)] {
            let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
            a.put_meta(&format!("rng.{name}.seed"), seed)?;
            a.put_meta(&format!("rng.{name}.stream"), rng.get_stream())?;
            a.put_meta(&format!("rng.{name}.word_pos"), rng.get_word_pos())?;
        }
        a.put_meta("envs", s.envs.len())?;
        for (k, slot) in s.envs.iter().enumerate() {
            let st = slot.env.state.to_array();
            for (field, v) in ["x", "x_dot", "theta", "theta_dot"].iter().zip(st) {
                a.put_f64(&format!("env.{k}.{field}"), v)?;
            }
            a.put_meta(&format!("env.{k}.steps"), slot.env.steps)?;
            a.put_meta(&format!("env.{k}.terminated"), slot.env.terminated)?;
            a.put_f64(&format!("env.{k}.episode_return"), slot.episode_return)?;
            a.put_meta(&format!("env.{k}.pushed"), slot.history.pushed())?;
            a.put_meta(&format!("env.{k}.frames"), slot.history.len())?;
            for (i, f) in slot.history.frames().enumerate() {
                a.put_tensor(&format!("env.{k}.frame.{i}"), &[f.height, f.width], f.pixels.clone())?;
            }
        }
        let returns: Vec<String> = s
            .episode_returns
            .iter()
            .map(|v| format!("{:016x}", v.to_bits()))
            .collect();
        a.put_meta("episode_returns", returns.join(","))?;
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let mut conf = String::new();
        for (k, v) in a.meta_entries() {
            if let Some(key) = k.strip_prefix("config.") {
                conf.push_str(&format!("{key} = {v}\n"));
            }
        }
        let cfg = ExperimentConfig::parse(&conf, "checkpoint")?;
        cfg.validate()?;
        let seed: u64 = a.meta_parse("seed")?;
        let model = Model::new(&cfg)?;
        let n = model.layout.len();
        let mut params = vec![0.0f32; n];
        let p = &cfg.ppo;
        let mut adam = Adam::new(n, p.learning_rate, p.adam_beta1, p.adam_beta2, p.adam_eps);
        adam.step = a.meta_parse("adam.step")?;
        for e in model.layout.entries() {
            let slot = e.slot();
            slot.of_mut(&mut params)
                .copy_from_slice(a.tensor_data(&format!("params.{}", e.name), slot.len)?);
            slot.of_mut(&mut adam.m)
                .copy_from_slice(a.tensor_data(&format!("adam.m.{}", e.name), slot.len)?);
            slot.of_mut(&mut adam.v)
                .copy_from_slice(a.tensor_data(&format!("adam.v.{}", e.name), slot.len)?);
        }
        let mut theta_bar = vec![0.0f32; model.enc.len];
        for e in model.encoder.layout().entries() {
            let slot = e.slot();
            slot.of_mut(&mut theta_bar)
                .copy_from_slice(a.tensor_data(&format!("ema.{}", e.name), slot.len)?);
        }
        let load_rng = |name: &str| -> Result<ChaCha8Rng> {
            let hex = a.meta(&format!("rng.{name}.seed"))?;
            let mut seed = [0u8; 32];
            if hex.len() != 64 {
                return Err(Error::Checkpoint(format!("rng.{name}.seed has wrong length")));
            }
            for (i, b) in seed.iter_mut().enumerate() {
                *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16)
                    .map_err(|_| Error::Checkpoint(format!("rng.{name}.seed is not hex")))?;
            }
            let mut rng = ChaCha8Rng::from_seed(seed);
            rng.set_stream(a.meta_parse(&format!("rng.{name}.stream"))?);
            rng.set_word_pos(a.meta_parse(&format!("rng.{name}.word_pos"))?);
            Ok(rng)
        };
        let size = cfg.encoder.image_size;
        let n_env: usize = a.meta_parse("envs")?;
        if n_env != cfg.num_envs {
            return Err(Error::Checkpoint(format!(
                "{n_env} envs stored, config says {}",
                cfg.num_envs
            )));
        }
        let mut envs = Vec::with_capacity(n_env);
        for k in 0..n_env {
            let mut st = [0.0; 4];
            for (v, field) in st.iter_mut().zip(["x", "x_dot", "theta", "theta_dot"]) {
                *v = a.get_f64(&format!("env.{k}.{field}"))?;
            }
            let env = CartPoleEnv {
                state: CartState::from_array(st),
                steps: a.meta_parse(&format!("env.{k}.steps"))?,
                terminated: a.meta_parse(&format!("env.{k}.terminated"))?,
            };
            let count: usize = a.meta_parse(&format!("env.{k}.frames"))?;
            let frames = (0..count)
                .map(|i| {
                    let pix = a.tensor_data(&format!("env.{k}.frame.{i}"), size * size)?;
                    Ok(Arc::new(Frame::from_pixels(size, size, pix.to_vec())?))
                })
                .collect::<Result<Vec<_>>>()?;
            let history = FrameHistory::restore(size, size, frames, a.meta_parse(&format!("env.{k}.pushed"))?)?;
            envs.push(EnvSlot {
                env,
                history,
                episode_return: a.get_f64(&format!("env.{k}.episode_return"))?,
            });
        }
        let returns_meta = a.meta("episode_returns")?;
        let episode_returns = if returns_meta.is_empty() {
            Vec::new()
        } else {
            returns_meta
                .split(',')
                .map(|h| {
                    u64::from_str_radix(h, 16)
                        .map(f64::from_bits)
                        .map_err(|_| Error::Checkpoint("bad episode_returns entry".into()))
                })
                .collect::<Result<Vec<_>>>()?
        };
        Ok(Trainer {
            seed,
            state: TrainState {
                params,
                ema: EmaState {
                    theta_bar,
                    tau: cfg.ema_tau,
                },
                adam,
                rollout_rng: load_rng("rollout")?,
                shuffle_rng: load_rng("shuffle")?,
                envs,
                env_steps: a.meta_parse("env_steps")?,
                rollouts: a.meta_parse("rollouts")?,
                episode_returns,
            },
            model,
            cfg,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }

    /// One rollout plus its update phase, as telemetry rows.
    pub fn iterate(&mut self) -> Result<(Vec<TelemetryRecord>, UpdateSummary)> {
        let mut rollout = self.collect_rollout()?;
        let summary = self.train_step(&mut rollout)?;
        let mut rows: Vec<TelemetryRecord> = rollout
            .episodes
            .iter()
            .map(|e| TelemetryRecord {
                step: e.step,
                episodic_return: Some(e.episodic_return),
                running_avg: Some(e.running_avg),
                ..Default::default()
            })
            .collect();
        let update = TelemetryRecord {
            step: self.state.env_steps,
            mean_var: Some(summary.mean_var),
            l_jepa: summary.l_jepa,
            l_actor: Some(summary.l_actor),
            l_critic: Some(summary.l_critic),
            l_reg: summary.l_reg,
            ..Default::default()
        };
        match rows.last_mut() {
            Some(last) if last.step == update.step => last.merge(&update),
            _ => rows.push(update),
        }
        Ok((rows, summary))
    }
}

/// Per-seed result, stored as `run.json` next to the telemetry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub env_steps: u64,
    pub episodes: usize,
    pub final_running_avg: Option<f64>,
    /// Smallest minibatch mean embedding variance seen during training.
    pub min_mean_var: f64,
    pub collapsed: bool,
    pub first_collapse_step: Option<u64>,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub use_jepa: bool,
    pub propagate_rl_grads: bool,
    pub use_reg: bool,
    pub total_env_steps: u64,
    pub scaled: bool,
    pub reference_env_steps: u64,
    pub reference_seeds: usize,
    pub parallel_rollout: bool,
    pub running_avg_window: usize,
    pub grid_step: u64,
    pub seeds: Vec<SeedOutcome>,
    pub mean_final_running_avg: Option<f64>,
    pub collapsed_seeds: usize,
}

const RUN_FILE: &str = "run.json";
const CONFIG_FILE: &str = "config.conf";
const TELEMETRY_FILE: &str = "telemetry.csv";
const LATEST_CKPT: &str = "latest.ckpt";
const FINAL_CKPT: &str = "final.ckpt";
const FAULT_CKPT: &str = "fault.ckpt";

fn same_run(dir: &Path, cfg: &ExperimentConfig) -> bool {
    std::fs::read_to_string(dir.join(CONFIG_FILE))
        .ok()
        .and_then(|t| ExperimentConfig::parse(&t, "stored").ok())
        .is_some_and(|stored| stored.fingerprint() == cfg.fingerprint())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Trains one seed to `total_env_steps`, writing telemetry, checkpoints and
/// `run.json` under [`ExperimentConfig::seed_dir`]. A finished run with the
/// same fingerprint is reused; an unfinished one resumes from its latest
/// checkpoint.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutcome> {
    cfg.validate()?;
    let dir = cfg.seed_dir(seed);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let matches = same_run(&dir, cfg);
    if matches {
        if let Ok(text) = std::fs::read_to_string(dir.join(RUN_FILE)) {
            if let Ok(done) = serde_json::from_str::<SeedOutcome>(&text) {
                if done.seed == seed {
                    log::info!("{}: seed {seed} already complete, reusing", cfg.label);
                    return Ok(done);
                }
            }
        }
    }
    let seed_cfg = ExperimentConfig {
        seed,
        seeds: 1,
        ..cfg.clone()
    };
    let latest = dir.join(LATEST_CKPT);
    let telemetry_path = dir.join(TELEMETRY_FILE);
    let (mut trainer, mut records, mut min_var) =
        match (matches && latest.exists()).then(|| Trainer::load(&latest)).transpose() {
            Ok(Some(t)) if t.seed() == seed && t.config().fingerprint() == cfg.fingerprint() => {
                let steps = t.state().env_steps;
                let records: Vec<TelemetryRecord> = telemetry::read_csv(&telemetry_path)?
                    .into_iter()
                    .filter(|r| r.step <= steps)
                    .collect();
                let min_var = records.iter().filter_map(|r| r.mean_var).fold(f64::INFINITY, f64::min);
                log::info!("{}: seed {seed} resuming at env step {steps}", cfg.label);
                (t, records, min_var)
            }
            Ok(_) | Err(_) => (Trainer::new(seed_cfg.clone(), seed)?, Vec::new(), f64::INFINITY),
        };
    std::fs::write(dir.join(CONFIG_FILE), seed_cfg.to_conf_string()).map_err(|e| Error::io(&dir, e))?;
    let _ = std::fs::remove_file(dir.join(RUN_FILE));
    let started = Instant::now();
    let target = cfg.num_rollouts();
    while trainer.state().rollouts < target {
        let (rows, summary) = match trainer.iterate() {
            Ok(v) => v,
            Err(e @ Error::NonFinite { .. }) => {
                let fault = dir.join(FAULT_CKPT);
                trainer.save(&fault)?;
                telemetry::write_csv(&telemetry_path, &records)?;
                log::error!("{}: seed {seed}: {e}; state dumped to {}", cfg.label, fault.display());
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        min_var = min_var.min(summary.min_mean_var);
        records.extend(rows);
        let r = trainer.state().rollouts;
        if cfg.checkpoint_every > 0 && r % cfg.checkpoint_every == 0 && r < target {
            telemetry::write_csv(&telemetry_path, &records)?;
            trainer.save(&latest)?;
        }
        log::info!(
            "{} seed {seed}: rollout {r}/{target} step {} avg_return {:.1} mean_var {:.3e} l_jepa {} l_actor {:.4} l_critic {:.4}",
            cfg.label,
            trainer.state().env_steps,
            telemetry::final_running_average(&records).unwrap_or(f64::NAN),
            summary.mean_var,
            summary.l_jepa.map_or("-".to_string(), |v| format!("{v:.3e}")),
            summary.l_actor,
            summary.l_critic
        );
    }
    telemetry::write_csv(&telemetry_path, &records)?;
    trainer.save(&dir.join(FINAL_CKPT))?;
    let _ = std::fs::remove_file(&latest);
    let first_collapse_step = telemetry::detect_collapse(&records);
    let outcome = SeedOutcome {
        seed,
        env_steps: trainer.state().env_steps,
        episodes: trainer.state().episode_returns.len(),
        final_running_avg: telemetry::final_running_average(&records),
        min_mean_var: min_var,
        collapsed: first_collapse_step.is_some(),
        first_collapse_step,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    write_json(&dir.join(RUN_FILE), &outcome)?;
    Ok(outcome)
}

/// Runs every seed of `cfg` and writes `<output_dir>/<label>/summary.json`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let outcomes = cfg
        .seed_list()
        .into_iter()
        .map(|s| run_seed(cfg, s))
        .collect::<Result<Vec<_>>>()?;
    let finals: Vec<f64> = outcomes.iter().filter_map(|o| o.final_running_avg).collect();
    let summary = RunSummary {
        label: cfg.label.clone(),
        use_jepa: cfg.use_jepa,
        propagate_rl_grads: cfg.propagate_rl_grads,
        use_reg: cfg.use_reg,
        total_env_steps: cfg.total_env_steps,
        scaled: cfg.is_scaled(),
        reference_env_steps: crate::config::REFERENCE_ENV_STEPS,
        reference_seeds: crate::config::REFERENCE_SEEDS,
        parallel_rollout: cfg.parallel_rollout,
        running_avg_window: cfg.running_avg_window,
        grid_step: telemetry::GRID_STEP,
        mean_final_running_avg: (finals.len() == outcomes.len() && !finals.is_empty())
            .then(|| finals.iter().sum::<f64>() / finals.len() as f64),
        collapsed_seeds: outcomes.iter().filter(|o| o.collapsed).count(),
        seeds: outcomes,
    };
    write_json(&cfg.output_dir.join(&cfg.label).join("summary.json"), &summary)?;
    Ok(summary)
}

/// All four study configurations over `base`, followed by the comparison
/// plot `<output_dir>/returns.svg`.
pub fn sweep(base: &ExperimentConfig) -> Result<Vec<RunSummary>> {
    let mut out = Vec::new();
    for (label, j, g, r) in STUDY_CONFIGS {
        out.push(run_experiment(&base.with_switches(label, j, g, r))?);
    }
    telemetry::plot_runs(&base.output_dir, &base.output_dir.join("returns.svg"))?;
    Ok(out)
}

/// Path of a finished run's final checkpoint.
pub fn final_checkpoint(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.seed_dir(seed).join(FINAL_CKPT)
}
