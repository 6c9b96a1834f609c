//! Actor-critic heads over the context embedding and the clipped PPO
//! objective.

use crate::error::{Error, Result};
use crate::nn::{Layout, Linear, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PpoHyper {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub rollout_length: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for PpoHyper {
    fn default() -> Self {
        PpoHyper {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            epochs: 4,
            minibatch: 64,
            value_coef: 0.5,
            entropy_coef: 0.01,
            rollout_length: 512,
            learning_rate: 3e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl PpoHyper {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("gamma", self.gamma),
            ("gae_lambda", self.gae_lambda),
            ("clip_eps", self.clip_eps),
            ("value_coef", self.value_coef),
            ("learning_rate", self.learning_rate),
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if v.is_nan() || v <= 0.0 {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.entropy_coef < 0.0 {
            return Err(Error::Config("entropy_coef must be non-negative".into()));
        }
        if self.clip_eps >= 1.0 {
            return Err(Error::Config(format!("clip_eps must be < 1, got {}", self.clip_eps)));
        }
        if self.gamma > 1.0 || self.gae_lambda > 1.0 {
            return Err(Error::Config("gamma and gae_lambda must be <= 1".into()));
        }
        if self.epochs == 0 || self.minibatch == 0 || self.rollout_length == 0 {
            return Err(Error::Config(
                "epochs, minibatch and rollout_length must be positive".into(),
            ));
        }
        if self.minibatch > self.rollout_length {
            return Err(Error::Config("minibatch larger than rollout_length".into()));
        }
        Ok(())
    }
}

pub const POLICY_HIDDEN: usize = 64;
pub const N_ACTIONS: usize = 2;

/// Two tanh MLPs: `d_emb -> hidden -> 2` logits and `d_emb -> hidden -> 1`.
#[derive(Clone, Debug)]
pub struct ActorCritic {
    layout: Layout,
    actor1: Linear,
    actor2: Linear,
    critic1: Linear,
    critic2: Linear,
    d_emb: usize,
}

pub struct PolicyCache<R> {
    input: Vec<R>,
    actor_h: Vec<R>,
    critic_h: Vec<R>,
}

impl ActorCritic {
    pub fn new(d_emb: usize, hidden: usize) -> Self {
        let mut l = Layout::new();
        let s_in = (1.0 / d_emb as f64).sqrt();
        let s_h = (1.0 / hidden as f64).sqrt();
        let actor1 = Linear::new(&mut l, "actor.fc1", d_emb, hidden, true, s_in);
        let actor2 = Linear::new(&mut l, "actor.fc2", hidden, N_ACTIONS, true, 0.01);
        let critic1 = Linear::new(&mut l, "critic.fc1", d_emb, hidden, true, s_in);
        let critic2 = Linear::new(&mut l, "critic.fc2", hidden, 1, true, s_h);
        ActorCritic {
            layout: l,
            actor1,
            actor2,
            critic1,
            critic2,
            d_emb,
        }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn actor_output(&self) -> &Linear {
        &self.actor2
    }

    /// Zeroes every actor weight and bias.
    pub fn zero_actor<R: Real>(&self, p: &mut [R]) {
        for lin in [&self.actor1, &self.actor2] {
            lin.w.of_mut(p).fill(R::zero());
            if let Some(b) = lin.b {
                b.of_mut(p).fill(R::zero());
            }
        }
    }

    /// Returns `([batch, 2] logits, [batch] values)`.
    pub fn forward<R: Real>(&self, p: &[R], s: &[R]) -> (Vec<R>, Vec<R>, PolicyCache<R>) {
        let batch = s.len() / self.d_emb;
        let mut actor_h = self.actor1.forward(p, s, batch);
        actor_h.iter_mut().for_each(|v| *v = v.tanh());
        let logits = self.actor2.forward(p, &actor_h, batch);
        let mut critic_h = self.critic1.forward(p, s, batch);
        critic_h.iter_mut().for_each(|v| *v = v.tanh());
        let values = self.critic2.forward(p, &critic_h, batch);
        (
            logits,
            values,
            PolicyCache {
                input: s.to_vec(),
                actor_h,
                critic_h,
            },
        )
    }

    /// Action probabilities and value for a single embedding.
    pub fn policy_forward<R: Real>(&self, p: &[R], s: &[R]) -> ([R; N_ACTIONS], R) {
        let (logits, values, _) = self.forward(p, s);
        let lp = log_softmax2(logits[0], logits[1]);
        ([lp[0].exp(), lp[1].exp()], values[0])
    }

    /// Accumulates parameter gradients; returns `d s`.
    pub fn backward<R: Real>(
        &self,
        p: &[R],
        c: &PolicyCache<R>,
        d_logits: &[R],
        d_values: &[R],
        grads: &mut [R],
    ) -> Vec<R> {
        let batch = c.input.len() / self.d_emb;
        let mut da = self
            .actor2
            .backward(p, &c.actor_h, batch, d_logits, grads, true)
            .unwrap();
        for (g, h) in da.iter_mut().zip(&c.actor_h) {
            *g *= R::one() - *h * *h;
        }
        let mut ds = self.actor1.backward(p, &c.input, batch, &da, grads, true).unwrap();
        let mut dc = self
            .critic2
            .backward(p, &c.critic_h, batch, d_values, grads, true)
            .unwrap();
        for (g, h) in dc.iter_mut().zip(&c.critic_h) {
            *g *= R::one() - *h * *h;
        }
        let ds_c = self.critic1.backward(p, &c.input, batch, &dc, grads, true).unwrap();
        for (a, b) in ds.iter_mut().zip(&ds_c) {
            *a += *b;
        }
        ds
    }
}

pub fn log_softmax2<R: Real>(a: R, b: R) -> [R; 2] {
    let m = a.max(b);
    let lse = m + ((a - m).exp() + (b - m).exp()).ln();
    [a - lse, b - lse]
}

/// Generalized advantage estimation. `values[t]` is the estimate at step
/// `t`; `bootstrap_value` stands in for the value after the last step.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap_value: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if n == 0 {
        return Err(Error::Usage("gae on empty rollout".into()));
    }
    if values.len() != n || dones.len() != n {
        return Err(Error::Usage(format!(
            "gae length mismatch: rewards {n}, values {}, dones {}",
            values.len(),
            dones.len()
        )));
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { bootstrap_value };
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Shifts to zero mean and scales to unit (population) standard deviation.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt() + 1e-8;
    for a in adv.iter_mut() {
        *a = (*a - mean) / std;
    }
}

/// Per-sample PPO inputs that were fixed at collection time.
#[derive(Clone, Copy, Debug)]
pub struct PpoSample {
    pub action: usize,
    pub old_log_prob: f64,
    pub advantage: f64,
    pub ret: f64,
}

#[derive(Clone, Debug)]
pub struct PpoLosses<R> {
    /// Clipped surrogate minus the entropy bonus.
    pub l_actor: f64,
    pub l_critic: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub d_logits: Vec<R>,
    pub d_values: Vec<R>,
}

pub fn ppo_losses<R: Real>(logits: &[R], values: &[R], samples: &[PpoSample], hyper: &PpoHyper) -> PpoLosses<R> {
    let n = samples.len();
    assert!(n > 0, "ppo_losses on empty batch");
    assert_eq!(logits.len(), n * N_ACTIONS);
    assert_eq!(values.len(), n);
    let inv_n = 1.0 / n as f64;
    let eps = hyper.clip_eps;
    let (mut surrogate, mut l_critic, mut entropy, mut clipped) = (0.0, 0.0, 0.0, 0usize);
    let mut d_logits = Vec::with_capacity(n * N_ACTIONS);
    let mut d_values = Vec::with_capacity(n);
    for (b, s) in samples.iter().enumerate() {
        let lp = log_softmax2(logits[2 * b].to_f64().unwrap(), logits[2 * b + 1].to_f64().unwrap());
        let probs = [lp[0].exp(), lp[1].exp()];
        let ratio = (lp[s.action] - s.old_log_prob).exp();
        let unclipped = ratio * s.advantage;
        let clipped_term = ratio.clamp(1.0 - eps, 1.0 + eps) * s.advantage;
        surrogate += unclipped.min(clipped_term);
        // Gradient flows through the unclipped branch when it is the
        // minimum; the clipped branch is flat outside the clip range.
        let d_logp = if unclipped <= clipped_term {
            -ratio * s.advantage * inv_n
        } else {
            clipped += 1;
            0.0
        };
        let h = -(probs[0] * lp[0] + probs[1] * lp[1]);
        entropy += h;
        for j in 0..N_ACTIONS {
            let onehot = if j == s.action { 1.0 } else { 0.0 };
            let mut g = d_logp * (onehot - probs[j]);
            // d(-c * H)/d logit_j = c * p_j * (log p_j + H)
            g += hyper.entropy_coef * inv_n * probs[j] * (lp[j] + h);
            d_logits.push(R::cst(g));
        }
        let v = values[b].to_f64().unwrap();
        l_critic += (v - s.ret).powi(2);
        d_values.push(R::cst(hyper.value_coef * 2.0 * (v - s.ret) * inv_n));
    }
    let entropy = entropy * inv_n;
    PpoLosses {
        l_actor: -surrogate * inv_n - hyper.entropy_coef * entropy,
        l_critic: hyper.value_coef * l_critic * inv_n,
        entropy,
        clip_fraction: clipped as f64 * inv_n,
        d_logits,
        d_values,
    }
}

/// The context embedding as seen by the actor and critic. Values are never
/// altered; a detached embedding drops any gradient sent back through it.
#[derive(Clone, Copy, Debug)]
pub struct RoutedEmbedding<'a, R> {
    values: &'a [R],
    propagate: bool,
}

impl<'a, R: Real> RoutedEmbedding<'a, R> {
    pub fn values(&self) -> &'a [R] {
        self.values
    }

    pub fn propagates(&self) -> bool {
        self.propagate
    }

    /// Gradient that reaches the encoder, or `None` when detached.
    pub fn pull_back(&self, grad: Vec<R>) -> Option<Vec<R>> {
        self.propagate.then_some(grad)
    }
}

pub fn route_gradients<R: Real>(propagate: bool, s_x: &[R]) -> RoutedEmbedding<'_, R> {
    RoutedEmbedding { values: s_x, propagate }
}
