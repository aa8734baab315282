//! State encoders for both modalities.
//!
//! The visual backbone is a small random convolutional network frozen at a
//! fixed seed; it stands in for a pretrained vision-language model and never
//! receives gradient updates. Everything else here is trainable and lives
//! in a [`ParamStore`]. The EMA target copies evaluate the same code paths
//! against a frozen clone of the store.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{film, init_normal, Linear, Mlp};
use crate::sim::{IMAGE_SIDE, PROPRIO_DIM, TASK_COUNT, ACTION_DIM};

#[derive(Clone, Debug)]
struct ConvLayer {
    in_ch: usize,
    out_ch: usize,
    /// `[out][in][ky][kx]`, 3x3 kernels.
    weights: Vec<f64>,
}

/// Frozen convolutional image encoder: three stride-2 3x3 convolutions
/// with tanh, then a fixed linear projection.
#[derive(Clone, Debug)]
pub struct Backbone {
    convs: Vec<ConvLayer>,
    projection: Array2<f64>,
    out_dim: usize,
}

impl Backbone {
    pub fn new(seed: u64, out_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let channels = [1, 8, 16, 16];
        let convs = channels
            .windows(2)
            .map(|c| {
                let fan_in = (c[0] * 9) as f64;
                let weights = (0..c[1] * c[0] * 9)
                    .map(|_| rng.sample::<f64, _>(StandardNormal) * 1.5 / fan_in.sqrt())
                    .collect();
                ConvLayer {
                    in_ch: c[0],
                    out_ch: c[1],
                    weights,
                }
            })
            .collect();
        let side = IMAGE_SIDE >> 3;
        let flat = side * side * channels[3];
        let projection = init_normal(&mut rng, flat, out_dim) * 2.0;
        Self {
            convs,
            projection,
            out_dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Embeds one `IMAGE_SIDE x IMAGE_SIDE` image with values in `[0, 1]`.
    pub fn embed(&self, image: &[f32]) -> Result<Vec<f64>> {
        if image.len() != IMAGE_SIDE * IMAGE_SIDE {
            return Err(Error::Shape(format!(
                "image has {} pixels, expected {}",
                image.len(),
                IMAGE_SIDE * IMAGE_SIDE
            )));
        }
        if image.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::NonFinite("image values must lie in [0, 1]".into()));
        }
        let mut side = IMAGE_SIDE;
        let mut act: Vec<f64> = image.iter().map(|&p| f64::from(p)).collect();
        for conv in &self.convs {
            let out_side = side / 2;
            let mut out = vec![0.0; conv.out_ch * out_side * out_side];
            for o in 0..conv.out_ch {
                for y in 0..out_side {
                    for x in 0..out_side {
                        let mut acc = 0.0;
                        for i in 0..conv.in_ch {
                            let w = &conv.weights[(o * conv.in_ch + i) * 9..][..9];
                            let plane = &act[i * side * side..][..side * side];
                            for ky in 0..3 {
                                let sy = (2 * y + ky) as isize - 1;
                                if sy < 0 || sy >= side as isize {
                                    continue;
                                }
                                for kx in 0..3 {
                                    let sx = (2 * x + kx) as isize - 1;
                                    if sx < 0 || sx >= side as isize {
                                        continue;
                                    }
                                    acc += w[ky * 3 + kx] * plane[sy as usize * side + sx as usize];
                                }
                            }
                        }
                        out[(o * out_side + y) * out_side + x] = acc.tanh();
                    }
                }
            }
            act = out;
            side = out_side;
        }
        let flat = ndarray::ArrayView1::from(&act);
        Ok(flat.dot(&self.projection).to_vec())
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.convs {
            for w in &c.weights {
                h.update(w.to_le_bytes());
            }
        }
        for w in self.projection.iter() {
            h.update(w.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Values of the fused semantic state for a batch (rows are samples).
#[derive(Clone, Debug)]
pub struct SemanticState {
    pub v: Tensor,
    pub l: Tensor,
    pub s: Tensor,
}

/// Graph handles for one semantic encoding.
#[derive(Clone, Copy, Debug)]
pub struct SemanticVars {
    pub l: Var,
    pub s: Var,
    pub tokens: Var,
}

/// Online encoders: `f_p`, `f_s`, the FiLM fusion of visual and task
/// embeddings, and the per-action encoder `f_a`.
#[derive(Clone, Debug)]
pub struct EncoderSet {
    pub task_table: ParamId,
    pub visual_proj: ParamId,
    pub film_gamma: Linear,
    pub film_beta: Linear,
    pub f_p: Mlp,
    pub f_s: Mlp,
    pub f_a: Mlp,
    pub hidden: usize,
    pub n_p: usize,
    pub n_s: usize,
    pub tau: usize,
    pub visual_dim: usize,
}

impl EncoderSet {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let h = cfg.hidden;
        let ds = cfg.visual_dim;
        let task_table = store.add("enc.task_table", init_normal(rng, 1, TASK_COUNT * cfg.task_dim)
            .into_shape_with_order((TASK_COUNT, cfg.task_dim))
            .expect("task table shape"));
        let visual_proj = store.add("enc.film.visual_proj", init_normal(rng, cfg.visual_dim, ds));
        Self {
            task_table,
            visual_proj,
            film_gamma: Linear::zeros(store, "enc.film.gamma", cfg.task_dim, ds),
            film_beta: Linear::zeros(store, "enc.film.beta", cfg.task_dim, ds),
            f_p: Mlp::new(store, "enc.f_p", &[PROPRIO_DIM, h, h, cfg.n_proprio_tokens * h], rng),
            f_s: Mlp::new(store, "enc.f_s", &[ds, h, h, cfg.n_semantic_tokens * h], rng),
            f_a: Mlp::new(store, "enc.f_a", &[ACTION_DIM, h, h], rng),
            hidden: h,
            n_p: cfg.n_proprio_tokens,
            n_s: cfg.n_semantic_tokens,
            tau: cfg.tau,
            visual_dim: cfg.visual_dim,
        }
    }

    /// Parameters that have EMA target copies.
    pub fn ema_params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.task_table, self.visual_proj];
        ids.extend(self.film_gamma.params());
        ids.extend(self.film_beta.params());
        ids.extend(self.f_p.params());
        ids.extend(self.f_s.params());
        ids
    }

    /// `B x 6` proprio rows to `(B * N_p) x H` tokens.
    pub fn encode_proprio(&self, g: &mut Graph, store: &ParamStore, p: &Tensor) -> Result<Var> {
        if p.ncols() != PROPRIO_DIM {
            return Err(Error::Shape(format!("proprio width {} != {PROPRIO_DIM}", p.ncols())));
        }
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("proprioceptive state".into()));
        }
        let x = g.constant(p.clone());
        let flat = self.f_p.forward(g, store, x);
        Ok(g.reshape(flat, p.nrows() * self.n_p, self.hidden))
    }

    /// FiLM fusion `s = (1 + gamma(l)) * (W_v v) + beta(l)` followed by `f_s`.
    pub fn encode_semantic(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        v: &Tensor,
        tasks: &[usize],
    ) -> Result<SemanticVars> {
        if v.ncols() != self.visual_dim || v.nrows() != tasks.len() {
            return Err(Error::Shape(format!(
                "visual batch {:?} for {} tasks",
                v.dim(),
                tasks.len()
            )));
        }
        if let Some(&t) = tasks.iter().find(|&&t| t >= store.get(self.task_table).nrows()) {
            return Err(Error::UnknownTask(t));
        }
        let table = g.param(store, self.task_table);
        let l = g.gather_rows(table, tasks);
        let vv = g.constant(v.clone());
        let wv = g.param(store, self.visual_proj);
        let projected = g.matmul(vv, wv);
        let gamma = self.film_gamma.forward(g, store, l);
        let beta = self.film_beta.forward(g, store, l);
        let s = film(g, projected, gamma, beta);
        let flat = self.f_s.forward(g, store, s);
        let tokens = g.reshape(flat, tasks.len() * self.n_s, self.hidden);
        Ok(SemanticVars { l, s, tokens })
    }

    /// `(B * tau) x 2` actions to `(B * tau) x H` tokens with one shared MLP.
    pub fn encode_actions(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        actions: &Tensor,
        batch: usize,
    ) -> Result<Var> {
        if actions.dim() != (batch * self.tau, ACTION_DIM) {
            return Err(Error::Shape(format!(
                "action sequence {:?}, expected ({}, {ACTION_DIM})",
                actions.dim(),
                batch * self.tau
            )));
        }
        let a = g.constant(actions.clone());
        Ok(self.f_a.forward(g, store, a))
    }

    /// Target-encoder tokens for future states. Run with the frozen target
    /// store; the result is plain values.
    pub fn encode_target(
        &self,
        target: &ParamStore,
        p_future: &Tensor,
        v_future: &Tensor,
        tasks: &[usize],
    ) -> Result<(Tensor, Tensor)> {
        debug_assert!(target.is_frozen(), "targets must come from a frozen store");
        let mut g = Graph::new();
        let p = self.encode_proprio(&mut g, target, p_future)?;
        let s = self.encode_semantic(&mut g, target, v_future, tasks)?;
        Ok((g.value(p).clone(), g.value(s.tokens).clone()))
    }
}

/// `target <- m * target + (1 - m) * online` for every listed parameter.
pub fn ema_update(online: &ParamStore, target: &mut ParamStore, ids: &[ParamId], momentum: f64) -> Result<()> {
    for &id in ids {
        let src = online.get(id);
        let dst = target.get_mut(id);
        if src.dim() != dst.dim() {
            return Err(Error::Config(format!(
                "EMA shape mismatch for {}: {:?} vs {:?}",
                online.name(id),
                src.dim(),
                dst.dim()
            )));
        }
        ndarray::Zip::from(dst)
            .and(src)
            .for_each(|t, &o| *t = momentum * *t + (1.0 - momentum) * o);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::sim::{render, Task};
    use ndarray::array;

    fn setup() -> (EncoderSet, ParamStore) {
        let cfg = RunConfig::desk();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = EncoderSet::new(&mut store, &cfg.model, &mut rng);
        (enc, store)
    }

    #[test]
    fn proprio_tokens_shape_and_zero_init() {
        let (enc, mut store) = setup();
        let mut g = Graph::new();
        let p = Tensor::zeros((1, 6));
        let t = enc.encode_proprio(&mut g, &store, &p).unwrap();
        assert_eq!(g.shape(t), (4, 64));
        enc.f_p.last().zero_out(&mut store);
        let mut g = Graph::new();
        let t = enc.encode_proprio(&mut g, &store, &p).unwrap();
        assert!(g.value(t).iter().all(|&x| x == 0.0));
        let bad = array![[0.0, f64::NAN, 0.0, 0.0, 0.0, 0.0]];
        assert!(matches!(
            enc.encode_proprio(&mut g, &store, &bad),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn proprio_encoding_is_pure() {
        let (enc, store) = setup();
        let p = array![[0.1, -0.2, 0.3, 0.0, 0.5, 0.4]];
        let mut g = Graph::new();
        let a = enc.encode_proprio(&mut g, &store, &p).unwrap();
        let b = enc.encode_proprio(&mut g, &store, &p).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn film_identity_at_init() {
        let (enc, store) = setup();
        let backbone = Backbone::new(1234, 32);
        let v = backbone.embed(&render(&Task::Push.initial_world(0))).unwrap();
        let v = Tensor::from_shape_vec((1, 32), v).unwrap();
        let mut g = Graph::new();
        let s = enc.encode_semantic(&mut g, &store, &v, &[1]).unwrap();
        let projected = v.dot(store.get(enc.visual_proj));
        assert_eq!(g.value(s.s), &projected);
        assert_eq!(g.shape(s.tokens), (4, 64));
        assert!(matches!(
            enc.encode_semantic(&mut g, &store, &v, &[7]),
            Err(Error::UnknownTask(7))
        ));
    }

    #[test]
    fn backbone_sees_single_pixel_changes() {
        let backbone = Backbone::new(1234, 32);
        for seed in 0..4 {
            let img = render(&Task::SequentialPush.initial_world(seed));
            for idx in [0usize, 33 * 64 + 17, 4095] {
                let mut other = img.clone();
                other[idx] = if other[idx] > 0.5 { 0.0 } else { 1.0 };
                assert_ne!(backbone.embed(&img).unwrap(), backbone.embed(&other).unwrap());
            }
        }
        assert!(backbone.embed(&[0.0; 10]).is_err());
    }

    #[test]
    fn action_tokens_are_per_action() {
        let (enc, store) = setup();
        let a = array![[0.1, 0.2], [0.3, -0.4], [0.0, 1.0], [1.0, 1.0], [-1.0, 0.5], [0.2, 0.2]];
        let mut swapped = a.clone();
        swapped.row_mut(0).assign(&a.row(1));
        swapped.row_mut(1).assign(&a.row(0));
        let mut g = Graph::new();
        let ta = enc.encode_actions(&mut g, &store, &a, 1).unwrap();
        let tb = enc.encode_actions(&mut g, &store, &swapped, 1).unwrap();
        assert_eq!(g.shape(ta), (6, 64));
        assert_eq!(g.value(ta).row(0), g.value(tb).row(1));
        assert_eq!(g.value(ta).row(1), g.value(tb).row(0));
        assert_eq!(g.value(ta).row(2), g.value(tb).row(2));
        assert!(enc.encode_actions(&mut g, &store, &a.slice(ndarray::s![..5, ..]).to_owned(), 1).is_err());
    }

    #[test]
    fn zero_actions_with_zero_final_layer() {
        let (enc, mut store) = setup();
        enc.f_a.last().zero_out(&mut store);
        let mut g = Graph::new();
        let t = enc.encode_actions(&mut g, &store, &Tensor::zeros((6, 2)), 1).unwrap();
        assert!(g.value(t).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn ema_limits_and_arithmetic() {
        let mut online = ParamStore::new();
        let id = online.add("w", array![[1.0, 2.0]]);
        let mut target = online.clone();
        target.get_mut(id).fill(0.0);
        ema_update(&online, &mut target, &[id], 1.0).unwrap();
        assert_eq!(target.get(id), &array![[0.0, 0.0]]);
        ema_update(&online, &mut target, &[id], 0.995).unwrap();
        assert!((target.get(id)[[0, 0]] - 0.005).abs() < 1e-15);
        ema_update(&online, &mut target, &[id], 0.0).unwrap();
        assert_eq!(target.get(id), online.get(id));
        assert_eq!(online.get(id), &array![[1.0, 2.0]]);

        let mut wrong = ParamStore::new();
        wrong.add("w", array![[1.0]]);
        assert!(matches!(
            ema_update(&online, &mut wrong, &[id], 0.5),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn target_equals_online_right_after_copy() {
        let (enc, mut store) = setup();
        let mut target = store.clone();
        target.set_frozen(true);
        let p = array![[0.1, -0.2, 0.3, 0.0, 0.5, 0.4]];
        let v = Tensor::from_elem((1, 32), 0.3);
        let (tp, ts) = enc.encode_target(&target, &p, &v, &[2]).unwrap();
        let mut g = Graph::new();
        let op = enc.encode_proprio(&mut g, &store, &p).unwrap();
        let os = enc.encode_semantic(&mut g, &store, &v, &[2]).unwrap();
        assert_eq!(&tp, g.value(op));
        assert_eq!(&ts, g.value(os.tokens));

        // Move the online weights, then blend: the target now differs.
        for id in enc.ema_params() {
            store.get_mut(id).mapv_inplace(|x| x + 0.1);
        }
        ema_update(&store, &mut target, &enc.ema_params(), 0.9).unwrap();
        let (tp2, _) = enc.encode_target(&target, &p, &v, &[2]).unwrap();
        assert_ne!(tp, tp2);
        assert_eq!(tp2.dim(), (4, 64));
    }
}
