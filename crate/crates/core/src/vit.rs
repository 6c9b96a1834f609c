//! Spatio-temporal vision transformer.
//!
//! A three-frame window is cut into `patch_size` squares, each patch is
//! linearly projected to `d_emb`, a learned `(row, col, time)` position code
//! is added, and a learnable classification token is prepended. After a
//! stack of pre-norm transformer blocks and a final layer norm, only the
//! classification-token vector is returned.
//!
//! The last block computes attention queries and the MLP for the
//! classification row alone, since no patch output is ever read.
//!
//! Patch tokens are ordered `(t, i, j)` lexicographically: frame, patch
//! row, patch column.

use crate::error::{Error, Result};
use crate::nn::{
    gelu_backward, gelu_forward, gemm, softmax_in_place, Init, LayerNorm, Layout, Linear, LnCache, Real, Slot, View,
};
use crate::observation::ObservationWindow;

/// Init std for projections, tables and the classification token.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub frames_per_window: usize,
    pub d_emb: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 84,
            patch_size: 14,
            frames_per_window: 3,
            d_emb: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 2,
        }
    }
}

impl EncoderConfig {
    /// Small configuration used for gradient verification.
    pub fn tiny() -> Self {
        EncoderConfig {
            image_size: 28,
            patch_size: 14,
            frames_per_window: 3,
            d_emb: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || !self.d_emb.is_multiple_of(self.heads) {
            return fail(format!("d_emb {} not divisible by heads {}", self.d_emb, self.heads));
        }
        if self.frames_per_window == 0 || self.mlp_ratio == 0 || self.d_emb == 0 {
            return fail("frames_per_window, mlp_ratio and d_emb must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.frames_per_window * self.grid() * self.grid()
    }

    /// Patches plus the classification token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.d_emb / self.heads
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

struct BlockCache<R> {
    tokens_in: usize,
    queries: usize,
    ln1: LnCache<R>,
    normed1: Vec<R>,
    qkv: Vec<R>,
    probs: Vec<R>,
    heads_out: Vec<R>,
    ln2: LnCache<R>,
    normed2: Vec<R>,
    fc1_pre: Vec<R>,
    fc1_act: Vec<R>,
    fc1_tanh: Vec<R>,
}

/// Activations retained by [`VitEncoder::forward`] for the backward pass.
pub struct EncoderCache<R> {
    batch: usize,
    patches: Vec<R>,
    blocks: Vec<BlockCache<R>>,
    norm: LnCache<R>,
}

#[derive(Clone, Debug)]
pub struct VitEncoder {
    cfg: EncoderConfig,
    layout: Layout,
    patch: Linear,
    cls: Slot,
    pos_row: Slot,
    pos_col: Slot,
    pos_time: Slot,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

impl VitEncoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_emb;
        let g = cfg.grid();
        let mut l = Layout::new();
        let patch = Linear::new(&mut l, "patch_embed", cfg.patch_dim(), d, true, INIT_STD);
        let cls = l.push("cls_token", &[d], Init::TruncNormal(INIT_STD));
        let pos_row = l.push("pos.row", &[g, d], Init::TruncNormal(INIT_STD));
        let pos_col = l.push("pos.col", &[g, d], Init::TruncNormal(INIT_STD));
        let pos_time = l.push("pos.time", &[cfg.frames_per_window, d], Init::TruncNormal(INIT_STD));
        let hidden = cfg.mlp_ratio * d;
        let blocks = (0..cfg.depth)
            .map(|k| {
                let p = format!("blocks.{k}");
                Block {
                    ln1: LayerNorm::new(&mut l, &format!("{p}.norm1"), d),
                    qkv: Linear::new(&mut l, &format!("{p}.attn.qkv"), d, 3 * d, true, INIT_STD),
                    proj: Linear::new(&mut l, &format!("{p}.attn.proj"), d, d, true, INIT_STD),
                    ln2: LayerNorm::new(&mut l, &format!("{p}.norm2"), d),
                    fc1: Linear::new(&mut l, &format!("{p}.mlp.fc1"), d, hidden, true, INIT_STD),
                    fc2: Linear::new(&mut l, &format!("{p}.mlp.fc2"), hidden, d, true, INIT_STD),
                }
            })
            .collect();
        let norm = LayerNorm::new(&mut l, "norm", d);
        Ok(VitEncoder {
            cfg,
            layout: l,
            patch,
            cls,
            pos_row,
            pos_col,
            pos_time,
            blocks,
            norm,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.len()
    }

    /// Raw pixel patches, `[batch * num_patches, patch_dim]`.
    pub fn patch_pixels<R: Real>(&self, windows: &[&ObservationWindow]) -> Result<Vec<R>> {
        let c = &self.cfg;
        let (g, ps, n) = (c.grid(), c.patch_size, c.image_size);
        let mut out = Vec::with_capacity(windows.len() * c.num_patches() * c.patch_dim());
        for w in windows {
            if w.frames.len() != c.frames_per_window || w.height() != n || w.width() != n {
                return Err(Error::Config(format!(
                    "window is {}x{}x{}, encoder expects {}x{n}x{n}",
                    w.frames.len(),
                    w.height(),
                    w.width(),
                    c.frames_per_window
                )));
            }
            for f in w.frames.iter() {
                for i in 0..g {
                    for j in 0..g {
                        for r in 0..ps {
                            let start = (i * ps + r) * n + j * ps;
                            out.extend(f.pixels[start..start + ps].iter().map(|&v| R::cst(v as f64)));
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Projected patch tokens of one window, `[num_patches, d_emb]`, without
    /// position codes.
    pub fn patchify<R: Real>(&self, p: &[R], window: &ObservationWindow) -> Result<Vec<R>> {
        let px = self.patch_pixels::<R>(&[window])?;
        Ok(self.patch.forward(p, &px, self.cfg.num_patches()))
    }

    /// `row[i] + col[j] + time[t]`.
    pub fn positional_encoding<R: Real>(&self, p: &[R], i: usize, j: usize, t: usize) -> Result<Vec<R>> {
        let g = self.cfg.grid();
        if i >= g || j >= g || t >= self.cfg.frames_per_window {
            return Err(Error::Usage(format!(
                "position ({i}, {j}, {t}) outside {g}x{g}x{}",
                self.cfg.frames_per_window
            )));
        }
        let mut v = vec![R::zero(); self.cfg.d_emb];
        self.add_position(p, i, j, t, &mut v);
        Ok(v)
    }

    fn add_position<R: Real>(&self, p: &[R], i: usize, j: usize, t: usize, dst: &mut [R]) {
        let d = self.cfg.d_emb;
        let row = &self.pos_row.of(p)[i * d..(i + 1) * d];
        let col = &self.pos_col.of(p)[j * d..(j + 1) * d];
        let time = &self.pos_time.of(p)[t * d..(t + 1) * d];
        for c in 0..d {
            dst[c] += row[c] + col[c] + time[c];
        }
    }

    /// Input token sequence `[batch * num_tokens, d_emb]`: classification
    /// token first, then patch tokens with position codes added.
    pub fn embed<R: Real>(&self, p: &[R], patches: &[R], batch: usize) -> Vec<R> {
        let c = &self.cfg;
        let (d, np, nt, g) = (c.d_emb, c.num_patches(), c.num_tokens(), c.grid());
        let tokens = self.patch.forward(p, patches, batch * np);
        let mut x = vec![R::zero(); batch * nt * d];
        for b in 0..batch {
            let base = b * nt * d;
            x[base..base + d].copy_from_slice(self.cls.of(p));
            for k in 0..np {
                let (t, i, j) = (k / (g * g), (k / g) % g, k % g);
                let dst = &mut x[base + (k + 1) * d..base + (k + 2) * d];
                dst.copy_from_slice(&tokens[(b * np + k) * d..(b * np + k + 1) * d]);
                self.add_position(p, i, j, t, dst);
            }
        }
        x
    }

    /// Full forward pass; returns `[batch, d_emb]` embeddings and the cache.
    pub fn forward<R: Real>(&self, p: &[R], windows: &[&ObservationWindow]) -> Result<(Vec<R>, EncoderCache<R>)> {
        let patches = self.patch_pixels(windows)?;
        let batch = windows.len();
        let x = self.embed(p, &patches, batch);
        let (out, blocks, norm) = self.trunk(p, x, batch, true);
        Ok((
            out,
            EncoderCache {
                batch,
                patches,
                blocks,
                norm,
            },
        ))
    }

    /// Embeddings only. Fails if any output is non-finite.
    pub fn encode<R: Real>(&self, p: &[R], windows: &[&ObservationWindow]) -> Result<Vec<R>> {
        let (out, _) = self.forward(p, windows)?;
        if !crate::nn::real::all_finite(&out) {
            return Err(Error::NonFiniteOutput("encoder embedding"));
        }
        Ok(out)
    }

    /// Runs the transformer over an already embedded token sequence.
    pub fn forward_embedded<R: Real>(&self, p: &[R], tokens: Vec<R>, batch: usize) -> Vec<R> {
        self.trunk(p, tokens, batch, true).0
    }

    /// Reference path that computes every token in the last block, then
    /// zeroes all patch outputs before the readout.
    pub fn forward_full_ablated<R: Real>(&self, p: &[R], windows: &[&ObservationWindow]) -> Result<Vec<R>> {
        let patches = self.patch_pixels(windows)?;
        let batch = windows.len();
        let x = self.embed(p, &patches, batch);
        Ok(self.trunk(p, x, batch, false).0)
    }

    fn trunk<R: Real>(
        &self,
        p: &[R],
        mut x: Vec<R>,
        batch: usize,
        cls_only_last: bool,
    ) -> (Vec<R>, Vec<BlockCache<R>>, LnCache<R>) {
        let d = self.cfg.d_emb;
        let mut tokens = self.cfg.num_tokens();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (k, blk) in self.blocks.iter().enumerate() {
            let queries = if cls_only_last && k + 1 == self.blocks.len() {
                1
            } else {
                tokens
            };
            let (y, cache) = self.block_forward(blk, p, &x, batch, tokens, queries);
            x = y;
            tokens = queries;
            caches.push(cache);
        }
        // Classification row of every sample; the rest is discarded.
        let mut cls = Vec::with_capacity(batch * d);
        for b in 0..batch {
            cls.extend_from_slice(&x[b * tokens * d..b * tokens * d + d]);
        }
        let (out, norm) = self.norm.forward(p, &cls);
        (out, caches, norm)
    }

    fn block_forward<R: Real>(
        &self,
        blk: &Block,
        p: &[R],
        x: &[R],
        batch: usize,
        tokens: usize,
        queries: usize,
    ) -> (Vec<R>, BlockCache<R>) {
        let d = self.cfg.d_emb;
        let (heads, dh) = (self.cfg.heads, self.cfg.head_dim());
        let scale = R::one() / R::cst(dh as f64).sqrt();
        let (normed1, ln1) = blk.ln1.forward(p, x);
        let qkv = blk.qkv.forward(p, &normed1, batch * tokens);
        let mut probs = vec![R::zero(); batch * heads * queries * tokens];
        let mut heads_out = vec![R::zero(); batch * queries * d];
        for b in 0..batch {
            let base = b * tokens * 3 * d;
            for h in 0..heads {
                let q = View::strided(&qkv[base + h * dh..], queries, dh, 3 * d);
                let k = View::strided(&qkv[base + d + h * dh..], tokens, dh, 3 * d);
                let v = View::strided(&qkv[base + 2 * d + h * dh..], tokens, dh, 3 * d);
                let pb = (b * heads + h) * queries * tokens;
                let scores = &mut probs[pb..pb + queries * tokens];
                gemm(scale, q, k.t(), R::zero(), scores, tokens);
                for row in scores.chunks_exact_mut(tokens) {
                    softmax_in_place(row);
                }
                let scores = View::dense(&probs[pb..pb + queries * tokens], queries, tokens);
                gemm(
                    R::one(),
                    scores,
                    v,
                    R::zero(),
                    &mut heads_out[b * queries * d + h * dh..],
                    d,
                );
            }
        }
        let attn = blk.proj.forward(p, &heads_out, batch * queries);
        let mut resid = attn;
        for b in 0..batch {
            for r in 0..queries {
                let src = &x[(b * tokens + r) * d..(b * tokens + r + 1) * d];
                let dst = &mut resid[(b * queries + r) * d..(b * queries + r + 1) * d];
                for c in 0..d {
                    dst[c] += src[c];
                }
            }
        }
        let (normed2, ln2) = blk.ln2.forward(p, &resid);
        let fc1_pre = blk.fc1.forward(p, &normed2, batch * queries);
        let (fc1_act, fc1_tanh) = gelu_forward(&fc1_pre);
        let mlp = blk.fc2.forward(p, &fc1_act, batch * queries);
        for (o, m) in resid.iter_mut().zip(&mlp) {
            *o += *m;
        }
        (
            resid,
            BlockCache {
                tokens_in: tokens,
                queries,
                ln1,
                normed1,
                qkv,
                probs,
                heads_out,
                ln2,
                normed2,
                fc1_pre,
                fc1_act,
                fc1_tanh,
            },
        )
    }

    fn block_backward<R: Real>(
        &self,
        blk: &Block,
        p: &[R],
        c: &BlockCache<R>,
        batch: usize,
        dy: &[R],
        grads: &mut [R],
    ) -> Vec<R> {
        let d = self.cfg.d_emb;
        let (heads, dh) = (self.cfg.heads, self.cfg.head_dim());
        let (tokens, queries) = (c.tokens_in, c.queries);
        let scale = R::one() / R::cst(dh as f64).sqrt();
        let rows_q = batch * queries;

        // MLP branch.
        let d_act = blk.fc2.backward(p, &c.fc1_act, rows_q, dy, grads, true).unwrap();
        let d_pre = gelu_backward(&c.fc1_pre, &c.fc1_tanh, &d_act);
        let d_normed2 = blk.fc1.backward(p, &c.normed2, rows_q, &d_pre, grads, true).unwrap();
        let mut d_resid = blk.ln2.backward(p, &c.ln2, &d_normed2, grads);
        for (a, b) in d_resid.iter_mut().zip(dy) {
            *a += *b;
        }

        // Attention branch.
        let d_heads = blk
            .proj
            .backward(p, &c.heads_out, rows_q, &d_resid, grads, true)
            .unwrap();
        let mut d_qkv = vec![R::zero(); batch * tokens * 3 * d];
        let mut d_scores = vec![R::zero(); queries * tokens];
        for b in 0..batch {
            let base = b * tokens * 3 * d;
            for h in 0..heads {
                let pb = (b * heads + h) * queries * tokens;
                let probs = &c.probs[pb..pb + queries * tokens];
                let d_out = View::strided(&d_heads[b * queries * d + h * dh..], queries, dh, d);
                let q = View::strided(&c.qkv[base + h * dh..], queries, dh, 3 * d);
                let k = View::strided(&c.qkv[base + d + h * dh..], tokens, dh, 3 * d);
                let v = View::strided(&c.qkv[base + 2 * d + h * dh..], tokens, dh, 3 * d);
                // dV = P^T dO
                gemm(
                    R::one(),
                    View::dense(probs, queries, tokens).t(),
                    d_out,
                    R::zero(),
                    &mut d_qkv[base + 2 * d + h * dh..],
                    3 * d,
                );
                // dP = dO V^T, then softmax backward.
                gemm(R::one(), d_out, v.t(), R::zero(), &mut d_scores, tokens);
                for r in 0..queries {
                    let pr = &probs[r * tokens..(r + 1) * tokens];
                    let dr = &mut d_scores[r * tokens..(r + 1) * tokens];
                    let dot: R = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for (g, &pv) in dr.iter_mut().zip(pr) {
                        *g = pv * (*g - dot) * scale;
                    }
                }
                let ds = View::dense(&d_scores, queries, tokens);
                // dQ = dS K, dK = dS^T Q
                gemm(R::one(), ds, k, R::zero(), &mut d_qkv[base + h * dh..], 3 * d);
                gemm(R::one(), ds.t(), q, R::zero(), &mut d_qkv[base + d + h * dh..], 3 * d);
            }
        }
        let d_normed1 = blk
            .qkv
            .backward(p, &c.normed1, batch * tokens, &d_qkv, grads, true)
            .unwrap();
        let mut dx = blk.ln1.backward(p, &c.ln1, &d_normed1, grads);
        for b in 0..batch {
            for r in 0..queries {
                let src = &d_resid[(b * queries + r) * d..(b * queries + r + 1) * d];
                let dst = &mut dx[(b * tokens + r) * d..(b * tokens + r + 1) * d];
                for k in 0..d {
                    dst[k] += src[k];
                }
            }
        }
        dx
    }

    /// Accumulates parameter gradients for upstream gradient `d_out`
    /// (`[batch, d_emb]`) into `grads`.
    pub fn backward<R: Real>(&self, p: &[R], cache: &EncoderCache<R>, d_out: &[R], grads: &mut [R]) {
        let c = &self.cfg;
        let (d, np, nt, g) = (c.d_emb, c.num_patches(), c.num_tokens(), c.grid());
        let batch = cache.batch;
        let d_cls = self.norm.backward(p, &cache.norm, d_out, grads);
        let tokens_out = cache.blocks.last().map_or(nt, |b| b.queries);
        let mut dx = vec![R::zero(); batch * tokens_out * d];
        for b in 0..batch {
            dx[b * tokens_out * d..b * tokens_out * d + d].copy_from_slice(&d_cls[b * d..(b + 1) * d]);
        }
        for (blk, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            dx = self.block_backward(blk, p, bc, batch, &dx, grads);
        }
        let mut d_tokens = vec![R::zero(); batch * np * d];
        for b in 0..batch {
            let base = b * nt * d;
            let dcls = self.cls.of_mut(grads);
            for k in 0..d {
                dcls[k] += dx[base + k];
            }
            for k in 0..np {
                let (t, i, j) = (k / (g * g), (k / g) % g, k % g);
                let src = &dx[base + (k + 1) * d..base + (k + 2) * d];
                d_tokens[(b * np + k) * d..(b * np + k + 1) * d].copy_from_slice(src);
                for (slot, idx) in [(self.pos_row, i), (self.pos_col, j), (self.pos_time, t)] {
                    let dst = &mut slot.of_mut(grads)[idx * d..(idx + 1) * d];
                    for c in 0..d {
                        dst[c] += src[c];
                    }
                }
            }
        }
        self.patch
            .backward(p, &cache.patches, batch * np, &d_tokens, grads, false);
    }
}
