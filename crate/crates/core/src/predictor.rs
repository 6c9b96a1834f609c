//! Action-conditioned latent predictor.
//!
//! `pred = layer2(GELU(layer1(s_x) + action_proj(onehot(a))))`
//!
//! The action enters after the first layer as a learned per-action offset.

use crate::nn::{gelu_backward, gelu_forward, Layout, Linear, Real};

pub const DEFAULT_HIDDEN: usize = 128;

#[derive(Clone, Debug)]
pub struct Predictor {
    layout: Layout,
    pub layer1: Linear,
    pub action_proj: Linear,
    pub layer2: Linear,
    d_emb: usize,
    hidden: usize,
    n_actions: usize,
}

pub struct PredictorCache<R> {
    input: Vec<R>,
    onehot: Vec<R>,
    pre: Vec<R>,
    act: Vec<R>,
    tanh: Vec<R>,
}

impl<R: Real> PredictorCache<R> {
    /// GELU output feeding layer 2, `[batch, hidden]`.
    pub fn hidden_activation(&self) -> &[R] {
        &self.act
    }

    /// Input to the GELU, `[batch, hidden]`.
    pub fn hidden_pre_activation(&self) -> &[R] {
        &self.pre
    }
}

impl Predictor {
    pub fn new(d_emb: usize, hidden: usize, n_actions: usize) -> Self {
        let mut l = Layout::new();
        let std1 = (1.0 / d_emb as f64).sqrt();
        let std2 = (1.0 / hidden as f64).sqrt();
        let layer1 = Linear::new(&mut l, "layer1", d_emb, hidden, true, std1);
        let action_proj = Linear::new(&mut l, "action_proj", n_actions, hidden, false, std1);
        let layer2 = Linear::new(&mut l, "layer2", hidden, d_emb, true, std2);
        Predictor {
            layout: l,
            layer1,
            action_proj,
            layer2,
            d_emb,
            hidden,
            n_actions,
        }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn d_emb(&self) -> usize {
        self.d_emb
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    fn onehot<R: Real>(&self, actions: &[usize]) -> Vec<R> {
        let mut m = vec![R::zero(); actions.len() * self.n_actions];
        for (b, &a) in actions.iter().enumerate() {
            assert!(a < self.n_actions, "action index {a} out of range");
            m[b * self.n_actions + a] = R::one();
        }
        m
    }

    /// `s_x` is `[batch, d_emb]`; returns `[batch, d_emb]` predictions.
    pub fn forward<R: Real>(&self, p: &[R], s_x: &[R], actions: &[usize]) -> (Vec<R>, PredictorCache<R>) {
        let batch = actions.len();
        assert_eq!(s_x.len(), batch * self.d_emb);
        let onehot = self.onehot(actions);
        let mut pre = self.layer1.forward(p, s_x, batch);
        let injected = self.action_proj.forward(p, &onehot, batch);
        for (a, b) in pre.iter_mut().zip(&injected) {
            *a += *b;
        }
        let (act, tanh) = gelu_forward(&pre);
        let out = self.layer2.forward(p, &act, batch);
        (
            out,
            PredictorCache {
                input: s_x.to_vec(),
                onehot,
                pre,
                act,
                tanh,
            },
        )
    }

    pub fn predict<R: Real>(&self, p: &[R], s_x: &[R], actions: &[usize]) -> Vec<R> {
        self.forward(p, s_x, actions).0
    }

    /// Accumulates parameter gradients and returns `d s_x`.
    pub fn backward<R: Real>(&self, p: &[R], cache: &PredictorCache<R>, d_out: &[R], grads: &mut [R]) -> Vec<R> {
        let batch = cache.onehot.len() / self.n_actions;
        let d_act = self.layer2.backward(p, &cache.act, batch, d_out, grads, true).unwrap();
        let d_pre = gelu_backward(&cache.pre, &cache.tanh, &d_act);
        self.action_proj.backward(p, &cache.onehot, batch, &d_pre, grads, false);
        self.layer1
            .backward(p, &cache.input, batch, &d_pre, grads, true)
            .unwrap()
    }
}
