//! Transition embeddings, cross-modal fusion and the pooled dynamics code.

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::config::{AttentionDirection, ModelConfig, PoolKind};
use crate::nn::{init_normal, LayerNorm, Linear};

/// Pre-norm multi-head cross-attention with a residual on the query
/// stream, followed by a pre-norm feed-forward sublayer.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln_ff: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub heads: usize,
    pub width: usize,
}

impl AttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert_eq!(width % heads, 0, "width {width} not divisible by {heads} heads");
        Self {
            ln_q: LayerNorm::new(store, &format!("{name}.ln_q"), width),
            ln_kv: LayerNorm::new(store, &format!("{name}.ln_kv"), width),
            wq: Linear::new(store, &format!("{name}.wq"), width, width, rng),
            wk: Linear::new(store, &format!("{name}.wk"), width, width, rng),
            wv: Linear::new(store, &format!("{name}.wv"), width, width, rng),
            wo: Linear::new(store, &format!("{name}.wo"), width, width, rng),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), width),
            ff1: Linear::new(store, &format!("{name}.ff1"), width, 2 * width, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), 2 * width, width, rng),
            heads,
            width,
        }
    }

    /// Returns the block output and the attention node (for inspection).
    pub fn forward_with_attention(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: Var,
        kv: Var,
        groups: usize,
    ) -> (Var, Var) {
        debug_assert_eq!(g.shape(query).1, self.width);
        debug_assert_eq!(g.shape(kv).1, self.width);
        let qn = self.ln_q.forward(g, store, query);
        let kvn = self.ln_kv.forward(g, store, kv);
        let q = self.wq.forward(g, store, qn);
        let k = self.wk.forward(g, store, kvn);
        let v = self.wv.forward(g, store, kvn);
        let attn = g.attention(q, k, v, groups, self.heads);
        let o = self.wo.forward(g, store, attn);
        let x = g.add(query, o);
        let xn = self.ln_ff.forward(g, store, x);
        let h = self.ff1.forward(g, store, xn);
        let h = g.gelu(h);
        let h = self.ff2.forward(g, store, h);
        let out = g.add(x, h);
        debug_assert_eq!(g.shape(out), g.shape(query));
        (out, attn)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, query: Var, kv: Var, groups: usize) -> Var {
        self.forward_with_attention(g, store, query, kv, groups).0
    }
}

/// Per-token action-mask draws for one forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskDraws {
    pub proprio: Vec<bool>,
    pub semantic: Vec<bool>,
}

/// Independent Bernoulli(`ratio`) draws. The endpoints consume no
/// randomness.
pub fn draw_mask(rng: &mut impl Rng, n: usize, ratio: f64) -> Vec<bool> {
    if ratio <= 0.0 {
        vec![false; n]
    } else if ratio >= 1.0 {
        vec![true; n]
    } else {
        (0..n).map(|_| rng.random::<f64>() < ratio).collect()
    }
}

/// Token handles consumed by [`DynamicsCore::forward`]. All token tensors
/// use the sample-major layout.
#[derive(Clone, Copy, Debug)]
pub struct TransitionInputs {
    pub p_past: Var,
    pub p_curr: Var,
    pub s_past: Var,
    pub s_curr: Var,
    pub actions: Var,
    pub batch: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct DynamicsVars {
    pub z_p: Var,
    pub z_s: Var,
    pub fused: Var,
    pub z_dyn: Var,
}

#[derive(Clone, Debug)]
pub struct DynamicsCore {
    pub proprio_block: AttentionBlock,
    pub semantic_block: AttentionBlock,
    pub fuse_block: AttentionBlock,
    pub pool_block: AttentionBlock,
    pub query_out: ParamId,
    pub mask_token: ParamId,
    pub direction: AttentionDirection,
    pub pool: PoolKind,
    pub hidden: usize,
    pub n_p: usize,
    pub n_s: usize,
    pub tau: usize,
}

impl DynamicsCore {
    pub fn new(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        direction: AttentionDirection,
        pool: PoolKind,
        rng: &mut impl Rng,
    ) -> Self {
        let h = cfg.hidden;
        Self {
            proprio_block: AttentionBlock::new(store, "dyn.proprio", h, cfg.heads, rng),
            semantic_block: AttentionBlock::new(store, "dyn.semantic", h, cfg.heads, rng),
            fuse_block: AttentionBlock::new(store, "dyn.fuse", h, cfg.heads, rng),
            pool_block: AttentionBlock::new(store, "dyn.pool", h, cfg.heads, rng),
            query_out: store.add("dyn.query_out", init_normal(rng, 1, h)),
            mask_token: store.add("dyn.mask_token", init_normal(rng, 1, h)),
            direction,
            pool,
            hidden: h,
            n_p: cfg.n_proprio_tokens,
            n_s: cfg.n_semantic_tokens,
            tau: cfg.tau,
        }
    }

    /// `CrossAttn(curr, [past; masked(actions)])`, per sample.
    #[allow(clippy::too_many_arguments)]
    pub fn transition_embed(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        block: &AttentionBlock,
        curr: Var,
        past: Var,
        actions: Var,
        mask: &[bool],
        batch: usize,
    ) -> Var {
        let n = g.shape(curr).0 / batch;
        debug_assert_eq!(g.shape(past), (batch * n, self.hidden));
        debug_assert_eq!(g.shape(actions), (batch * self.tau, self.hidden));
        let token = g.param(store, self.mask_token);
        let masked = g.mask_rows(actions, token, mask);
        let kv = g.group_concat(&[(past, n), (masked, self.tau)], batch);
        let z = block.forward(g, store, curr, kv, batch);
        debug_assert_eq!(g.shape(z), (batch * n, self.hidden));
        z
    }

    /// Fuses the two transition embeddings along the configured direction.
    /// Returns the fused tokens and their count per sample.
    pub fn cross_modal_fuse(&self, g: &mut Graph, store: &ParamStore, z_p: Var, z_s: Var, batch: usize) -> (Var, usize) {
        match self.direction {
            AttentionDirection::PQueriesS => (self.fuse_block.forward(g, store, z_p, z_s, batch), self.n_p),
            AttentionDirection::SQueriesP => (self.fuse_block.forward(g, store, z_s, z_p, batch), self.n_s),
            AttentionDirection::SymmetricSelf => {
                let both = g.group_concat(&[(z_p, self.n_p), (z_s, self.n_s)], batch);
                (self.fuse_block.forward(g, store, both, both, batch), self.n_p + self.n_s)
            }
        }
    }

    /// Reduces `(batch * n) x H` fused tokens to a `batch x H` code.
    pub fn pool_readout(&self, g: &mut Graph, store: &ParamStore, fused: Var, n: usize, batch: usize) -> Var {
        let z = match self.pool {
            PoolKind::LearnedQuery => {
                let q = g.param(store, self.query_out);
                let q = g.tile(q, batch);
                self.pool_block.forward(g, store, q, fused, batch)
            }
            PoolKind::Mean => g.group_mean(fused, n),
            PoolKind::Max => g.group_max(fused, n),
        };
        debug_assert_eq!(g.shape(z), (batch, self.hidden));
        z
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: &TransitionInputs,
        masks: &MaskDraws,
    ) -> DynamicsVars {
        let b = x.batch;
        let z_p = self.transition_embed(g, store, &self.proprio_block, x.p_curr, x.p_past, x.actions, &masks.proprio, b);
        let z_s = self.transition_embed(g, store, &self.semantic_block, x.s_curr, x.s_past, x.actions, &masks.semantic, b);
        let (fused, n) = self.cross_modal_fuse(g, store, z_p, z_s, b);
        let z_dyn = self.pool_readout(g, store, fused, n, b);
        DynamicsVars { z_p, z_s, fused, z_dyn }
    }

    /// Fresh, independent mask draws for both modalities.
    pub fn draw_masks(&self, rng: &mut impl Rng, batch: usize, ratio: f64) -> MaskDraws {
        let n = batch * self.tau;
        let proprio = draw_mask(rng, n, ratio);
        let semantic = draw_mask(rng, n, ratio);
        MaskDraws { proprio, semantic }
    }
}

/// Applies the readout block to a single repeated token, the closed form
/// the learned-query pool collapses to when every input token is equal.
pub fn readout_of_constant(core: &DynamicsCore, store: &ParamStore, u: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let q = g.param(store, core.query_out);
    let kv = g.constant(u.clone());
    let out = core.pool_block.forward(&mut g, store, q, kv, 1);
    g.value(out).clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tokens(rng: &mut ChaCha8Rng, rows: usize, h: usize) -> Tensor {
        Tensor::from_shape_fn((rows, h), |_| rng.random_range(-1.0..1.0))
    }

    fn core_with(direction: AttentionDirection, pool: PoolKind) -> (DynamicsCore, ParamStore) {
        let cfg = RunConfig::desk();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let core = DynamicsCore::new(&mut store, &cfg.model, direction, pool, &mut rng);
        (core, store)
    }

    #[test]
    fn transition_shape_and_full_mask_invariance() {
        let (core, store) = core_with(AttentionDirection::PQueriesS, PoolKind::LearnedQuery);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let curr = rand_tokens(&mut rng, 4, 64);
        let past = rand_tokens(&mut rng, 4, 64);
        let a1 = rand_tokens(&mut rng, 6, 64);
        let a2 = rand_tokens(&mut rng, 6, 64);
        let run = |a: &Tensor, mask: &[bool]| {
            let mut g = Graph::new();
            let c = g.constant(curr.clone());
            let p = g.constant(past.clone());
            let av = g.constant(a.clone());
            let z = core.transition_embed(&mut g, &store, &core.proprio_block, c, p, av, mask, 1);
            g.value(z).clone()
        };
        let all = [true; 6];
        let none = [false; 6];
        assert_eq!(run(&a1, &all).dim(), (4, 64));
        assert_eq!(run(&a1, &all), run(&a2, &all));
        assert_ne!(run(&a1, &none), run(&a2, &none));
    }

    #[test]
    fn fusion_is_invariant_to_semantic_token_order() {
        let (core, store) = core_with(AttentionDirection::PQueriesS, PoolKind::LearnedQuery);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let zp = rand_tokens(&mut rng, 4, 64);
        let zs = rand_tokens(&mut rng, 4, 64);
        let mut perm = zs.clone();
        for (i, j) in [(0, 3), (1, 2), (2, 0), (3, 1)] {
            perm.row_mut(i).assign(&zs.row(j));
        }
        let run = |s: &Tensor| {
            let mut g = Graph::new();
            let p = g.constant(zp.clone());
            let s = g.constant(s.clone());
            let (f, n) = core.cross_modal_fuse(&mut g, &store, p, s, 1);
            assert_eq!(n, 4);
            g.value(f).clone()
        };
        let a = run(&zs);
        let b = run(&perm);
        assert_eq!(a.dim(), (4, 64));
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn alternate_directions_change_the_output_shape() {
        let cfg = {
            let mut c = RunConfig::desk();
            c.model.n_semantic_tokens = 3;
            c
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (dir, rows) in [
            (AttentionDirection::PQueriesS, 4),
            (AttentionDirection::SQueriesP, 3),
            (AttentionDirection::SymmetricSelf, 7),
        ] {
            let mut store = ParamStore::new();
            let core = DynamicsCore::new(&mut store, &cfg.model, dir, PoolKind::LearnedQuery, &mut rng);
            let mut g = Graph::new();
            let p = g.constant(rand_tokens(&mut rng, 4, 64));
            let s = g.constant(rand_tokens(&mut rng, 3, 64));
            let (f, n) = core.cross_modal_fuse(&mut g, &store, p, s, 1);
            assert_eq!((g.shape(f).0, n), (rows, rows));
        }
    }

    #[test]
    fn pooling_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = rand_tokens(&mut rng, 1, 64);
        let repeated = ndarray::concatenate(ndarray::Axis(0), &[u.view(); 4]).unwrap();
        for pool in [PoolKind::LearnedQuery, PoolKind::Mean, PoolKind::Max] {
            let (core, store) = core_with(AttentionDirection::PQueriesS, pool);
            let mut g = Graph::new();
            let f = g.constant(repeated.clone());
            let z = core.pool_readout(&mut g, &store, f, 4, 1);
            assert_eq!(g.shape(z), (1, 64));
            let expected = match pool {
                PoolKind::LearnedQuery => readout_of_constant(&core, &store, &u),
                _ => u.clone(),
            };
            for (a, b) in g.value(z).iter().zip(expected.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mask_draw_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(draw_mask(&mut rng, 50, 0.0).iter().all(|m| !m));
        assert!(draw_mask(&mut rng, 50, 1.0).iter().all(|&m| m));
        let frac = draw_mask(&mut rng, 20_000, 0.3).iter().filter(|&&m| m).count() as f64 / 20_000.0;
        assert!((frac - 0.3).abs() < 0.02);
    }
}
