//! Foresight-conditioned DDPM policy over action chunks.
//!
//! Chunks are `tau x 2` actions flattened to `tau * 2` columns and
//! normalized per dimension to `[-1, 1]`. The denoiser is a residual MLP
//! with a sinusoidal step embedding and FiLM conditioning at every block.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::config::{DdpmConfig, ForesightSlots, ModelConfig, PolicyConfig};
use crate::error::{Error, Result};
use crate::nn::{film, init_normal, LayerNorm, Linear, Mlp};
use crate::sim::{ACTION_DIM, A_MAX, PROPRIO_DIM, TASK_COUNT};

/// Noise tables indexed by step `k` in `1..=K` (stored at `k - 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    /// Ancestral sampling noise, `sigma_k^2 = beta_k (1 - abar_{k-1}) / (1 - abar_k)`.
    pub sigma: Vec<f64>,
}

impl Schedule {
    /// Linear betas from `beta_start` to `beta_end` over `k` steps.
    pub fn linear(k: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if k == 0 || !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "invalid schedule K={k}, beta in [{beta_start}, {beta_end}]"
            )));
        }
        let beta = (0..k)
            .map(|i| {
                if k == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (k - 1) as f64
                }
            })
            .collect();
        Self::from_betas(beta)
    }

    pub fn from_config(cfg: &DdpmConfig) -> Result<Self> {
        Self::linear(cfg.k, cfg.beta_start, cfg.beta_end)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config("betas must lie in (0, 1)".into()));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let sigma = (0..beta.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                (beta[i] * (1.0 - prev) / (1.0 - alpha_bar[i])).sqrt()
            })
            .collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// `abar_k` with the `abar_0 = 1` convention.
    pub fn abar(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.alpha_bar[k - 1]
        }
    }
}

/// `a_k = sqrt(abar_k) a_0 + sqrt(1 - abar_k) eps`.
pub fn forward_noise(schedule: &Schedule, a0: &Tensor, k: usize, eps: &Tensor) -> Result<Tensor> {
    if k > schedule.steps() {
        return Err(Error::Config(format!("step {k} outside 0..={}", schedule.steps())));
    }
    if a0.dim() != eps.dim() {
        return Err(Error::Shape(format!("noise {:?} for chunk {:?}", eps.dim(), a0.dim())));
    }
    let ab = schedule.abar(k);
    Ok(a0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
}

/// Sinusoidal embedding of integer steps, `[sin(k f_i) ; cos(k f_i)]`.
pub fn timestep_embedding(ks: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    Tensor::from_shape_fn((ks.len(), dim), |(r, c)| {
        let i = c % half;
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let x = ks[r] as f64 * freq;
        if c < half {
            x.sin()
        } else {
            x.cos()
        }
    })
}

/// Per-dimension min-max normalization of actions to `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionNorm {
    pub lo: [f64; ACTION_DIM],
    pub hi: [f64; ACTION_DIM],
}

impl ActionNorm {
    pub fn fit<'a>(actions: impl IntoIterator<Item = &'a [f64; ACTION_DIM]>) -> Self {
        let mut lo = [f64::INFINITY; ACTION_DIM];
        let mut hi = [f64::NEG_INFINITY; ACTION_DIM];
        for a in actions {
            for d in 0..ACTION_DIM {
                lo[d] = lo[d].min(a[d]);
                hi[d] = hi[d].max(a[d]);
            }
        }
        for d in 0..ACTION_DIM {
            if !lo[d].is_finite() || hi[d] - lo[d] < 1e-9 {
                let c = if lo[d].is_finite() { lo[d] } else { 0.0 };
                lo[d] = c - 1.0;
                hi[d] = c + 1.0;
            }
        }
        Self { lo, hi }
    }

    pub fn normalize(&self, a: f64, d: usize) -> f64 {
        2.0 * (a - self.lo[d]) / (self.hi[d] - self.lo[d]) - 1.0
    }

    pub fn denormalize(&self, x: f64, d: usize) -> f64 {
        self.lo[d] + (x + 1.0) * 0.5 * (self.hi[d] - self.lo[d])
    }

    /// Normalizes a chunk whose columns interleave action dimensions.
    pub fn normalize_chunks(&self, chunks: &Tensor) -> Tensor {
        Tensor::from_shape_fn(chunks.dim(), |(r, c)| self.normalize(chunks[[r, c]], c % ACTION_DIM))
    }

    /// Maps sampled chunks back to action units and clips to the bounds.
    pub fn denormalize_chunks(&self, chunks: &Tensor) -> Tensor {
        Tensor::from_shape_fn(chunks.dim(), |(r, c)| {
            self.denormalize(chunks[[r, c]], c % ACTION_DIM).clamp(-A_MAX, A_MAX)
        })
    }
}

#[derive(Clone, Debug)]
pub struct DenoiseBlock {
    pub ln: LayerNorm,
    pub lin1: Linear,
    pub gamma: Linear,
    pub beta: Linear,
    pub lin2: Linear,
}

/// `eps_hat(a_k, k, c)`.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub lin_in: Linear,
    pub time: Linear,
    pub blocks: Vec<DenoiseBlock>,
    pub ln_out: LayerNorm,
    pub lin_out: Linear,
    pub chunk_dim: usize,
    pub time_dim: usize,
}

impl Denoiser {
    pub fn new(store: &mut ParamStore, cfg: &PolicyConfig, chunk_dim: usize, cond_dim: usize, rng: &mut impl Rng) -> Self {
        let w = cfg.hidden_width;
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let n = format!("policy.denoise.block{i}");
                DenoiseBlock {
                    ln: LayerNorm::new(store, &format!("{n}.ln"), w),
                    lin1: Linear::new(store, &format!("{n}.lin1"), w, w, rng),
                    gamma: Linear::new(store, &format!("{n}.film_gamma"), cond_dim, w, rng),
                    beta: Linear::new(store, &format!("{n}.film_beta"), cond_dim, w, rng),
                    lin2: Linear::new(store, &format!("{n}.lin2"), w, w, rng),
                }
            })
            .collect();
        Self {
            lin_in: Linear::new(store, "policy.denoise.lin_in", chunk_dim, w, rng),
            time: Linear::new(store, "policy.denoise.time", cfg.time_embed_dim, w, rng),
            blocks,
            ln_out: LayerNorm::new(store, "policy.denoise.ln_out", w),
            lin_out: Linear::new(store, "policy.denoise.lin_out", w, chunk_dim, rng),
            chunk_dim,
            time_dim: cfg.time_embed_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, ks: &[usize], cond: Var) -> Var {
        let temb = g.constant(timestep_embedding(ks, self.time_dim));
        let t = self.time.forward(g, store, temb);
        let t = g.gelu(t);
        let h = self.lin_in.forward(g, store, x);
        let mut h = g.add(h, t);
        for b in &self.blocks {
            let u = b.ln.forward(g, store, h);
            let u = b.lin1.forward(g, store, u);
            let gamma = b.gamma.forward(g, store, cond);
            let beta = b.beta.forward(g, store, cond);
            let u = film(g, u, gamma, beta);
            let u = g.gelu(u);
            let u = b.lin2.forward(g, store, u);
            h = g.add(h, u);
        }
        let h = self.ln_out.forward(g, store, h);
        self.lin_out.forward(g, store, h)
    }
}

/// Observation encoders, foresight conditioning and the denoiser.
#[derive(Clone, Debug)]
pub struct PolicyNet {
    pub task_table: ParamId,
    pub e_p: Mlp,
    pub e_s: Mlp,
    pub gamma_p: Linear,
    pub beta_p: Linear,
    pub gamma_s: Linear,
    pub beta_s: Linear,
    pub denoiser: Denoiser,
}

/// Stage-2 policy with its own parameter store.
#[derive(Clone, Debug)]
pub struct PolicyModel {
    pub cfg: PolicyConfig,
    pub params: ParamStore,
    pub net: PolicyNet,
    /// Foresight width `2H`.
    pub foresight_dim: usize,
    pub tau: usize,
    pub visual_dim: usize,
}

/// Graph handles for one conditioning pass.
#[derive(Clone, Copy, Debug)]
pub struct ConditionVars {
    pub o_p: Var,
    pub o_s: Var,
    pub g_p: Option<Var>,
    pub g_s: Option<Var>,
    /// Vector handed to the denoiser.
    pub cond: Var,
}

impl PolicyModel {
    pub fn new(policy: &PolicyConfig, model: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0002);
        let mut store = ParamStore::new();
        let ho = policy.obs_width;
        let fd = 2 * model.hidden;
        let chunk_dim = model.tau * ACTION_DIM;
        let task_table = store.add(
            "policy.task_table",
            init_normal(&mut rng, 1, TASK_COUNT * model.task_dim)
                .into_shape_with_order((TASK_COUNT, model.task_dim))
                .expect("task table shape"),
        );
        let e_p = Mlp::new(&mut store, "policy.e_p", &[PROPRIO_DIM, ho, ho], &mut rng);
        let e_s = Mlp::new(&mut store, "policy.e_s", &[model.visual_dim + model.task_dim, ho, ho], &mut rng);
        let gamma_p = Linear::zeros(&mut store, "policy.film_p.gamma", ho, fd);
        let beta_p = Linear::zeros(&mut store, "policy.film_p.beta", ho, fd);
        let gamma_s = Linear::zeros(&mut store, "policy.film_s.gamma", ho, fd);
        let beta_s = Linear::zeros(&mut store, "policy.film_s.beta", ho, fd);
        let cond_dim = if policy.no_foresight { 2 * ho } else { 2 * fd };
        let denoiser = Denoiser::new(&mut store, policy, chunk_dim, cond_dim, &mut rng);
        Self {
            cfg: policy.clone(),
            params: store,
            net: PolicyNet {
                task_table,
                e_p,
                e_s,
                gamma_p,
                beta_p,
                gamma_s,
                beta_s,
                denoiser,
            },
            foresight_dim: fd,
            tau: model.tau,
            visual_dim: model.visual_dim,
        }
    }

    pub fn chunk_dim(&self) -> usize {
        self.tau * ACTION_DIM
    }

    /// `(o_p, o_s)` from proprio rows, visual embeddings and task ids.
    pub fn encode_observation(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        p: &Tensor,
        v: &Tensor,
        tasks: &[usize],
    ) -> Result<(Var, Var)> {
        if p.ncols() != PROPRIO_DIM || v.ncols() != self.visual_dim || p.nrows() != tasks.len() || v.nrows() != tasks.len() {
            return Err(Error::Shape(format!(
                "observation batch p {:?}, v {:?}, {} tasks",
                p.dim(),
                v.dim(),
                tasks.len()
            )));
        }
        if let Some(&t) = tasks.iter().find(|&&t| t >= TASK_COUNT) {
            return Err(Error::UnknownTask(t));
        }
        let pv = g.constant(p.clone());
        let o_p = self.net.e_p.forward(g, store, pv);
        let table = g.param(store, self.net.task_table);
        let l = g.gather_rows(table, tasks);
        let vv = g.constant(v.clone());
        let sv = g.concat_cols(&[vv, l]);
        let o_s = self.net.e_s.forward(g, store, sv);
        Ok((o_p, o_s))
    }

    /// Zeroes the foresight slot a single-modality variant ignores.
    pub fn mask_foresight(&self, g: &mut Graph, z_hat: Var) -> Var {
        let h = self.foresight_dim / 2;
        let (rows, _) = g.shape(z_hat);
        let keep: fn(usize, usize) -> bool = match self.cfg.foresight_slots {
            ForesightSlots::Both => return z_hat,
            ForesightSlots::ProprioOnly => |c: usize, h: usize| c < h,
            ForesightSlots::SemanticOnly => |c: usize, h: usize| c >= h,
        };
        let mask = g.constant(Tensor::from_shape_fn((rows, 2 * h), |(_, c)| f64::from(u8::from(keep(c, h)))));
        g.mul(z_hat, mask)
    }

    /// `g_m = (1 + gamma_m(o_m)) * z_hat + beta_m(o_m)` per modality and the
    /// concatenated condition `[g_p ; g_s]`. Without foresight the
    /// condition is `[o_p ; o_s]`.
    pub fn condition(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        p: &Tensor,
        v: &Tensor,
        tasks: &[usize],
        z_hat: Var,
    ) -> Result<ConditionVars> {
        let (o_p, o_s) = self.encode_observation(g, store, p, v, tasks)?;
        if self.cfg.no_foresight {
            let cond = g.concat_cols(&[o_p, o_s]);
            return Ok(ConditionVars {
                o_p,
                o_s,
                g_p: None,
                g_s: None,
                cond,
            });
        }
        if g.shape(z_hat) != (tasks.len(), self.foresight_dim) {
            return Err(Error::Shape(format!(
                "foresight {:?}, expected ({}, {})",
                g.shape(z_hat),
                tasks.len(),
                self.foresight_dim
            )));
        }
        let z = self.mask_foresight(g, z_hat);
        let modulate = |g: &mut Graph, o: Var, gamma: &Linear, beta: &Linear| {
            let gm = gamma.forward(g, store, o);
            let bt = beta.forward(g, store, o);
            film(g, z, gm, bt)
        };
        let g_p = modulate(g, o_p, &self.net.gamma_p, &self.net.beta_p);
        let g_s = modulate(g, o_s, &self.net.gamma_s, &self.net.beta_s);
        let cond = g.concat_cols(&[g_p, g_s]);
        Ok(ConditionVars {
            o_p,
            o_s,
            g_p: Some(g_p),
            g_s: Some(g_s),
            cond,
        })
    }

    /// Condition values for inference.
    pub fn condition_values(&self, p: &Tensor, v: &Tensor, tasks: &[usize], z_hat: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let z = g.constant(z_hat.clone());
        let c = self.condition(&mut g, &self.params, p, v, tasks, z)?;
        Ok(g.value(c.cond).clone())
    }

    /// Batch mean of `||eps - eps_hat(a_k, k, c)||^2`, with `k` and `eps`
    /// supplied by the caller.
    pub fn denoise_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        schedule: &Schedule,
        a0: &Tensor,
        ks: &[usize],
        eps: &Tensor,
        cond: Var,
    ) -> Result<Var> {
        let b = a0.nrows();
        if ks.len() != b || a0.ncols() != self.chunk_dim() {
            return Err(Error::Shape(format!(
                "chunks {:?} with {} steps, expected width {}",
                a0.dim(),
                ks.len(),
                self.chunk_dim()
            )));
        }
        let mut xk = Tensor::zeros(a0.dim());
        for r in 0..b {
            let row = forward_noise(
                schedule,
                &a0.row(r).insert_axis(ndarray::Axis(0)).to_owned(),
                ks[r],
                &eps.row(r).insert_axis(ndarray::Axis(0)).to_owned(),
            )?;
            xk.row_mut(r).assign(&row.row(0));
        }
        let x = g.constant(xk);
        let eps_hat = self.net.denoiser.forward(g, store, x, ks, cond);
        let e = g.constant(eps.clone());
        let d = g.sub(e, eps_hat);
        let sq = g.square(d);
        let s = g.sum_all(sq);
        Ok(g.scale(s, 1.0 / b as f64))
    }

    /// Draws `k ~ U{1..K}` and `eps ~ N(0, I)` per row.
    pub fn draw_noise(&self, rng: &mut impl Rng, schedule: &Schedule, batch: usize) -> (Vec<usize>, Tensor) {
        let ks: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=schedule.steps())).collect();
        let eps = Tensor::from_shape_simple_fn((batch, self.chunk_dim()), || rng.sample(StandardNormal));
        (ks, eps)
    }
}

/// Anything that predicts the noise in `x` at step `k`.
pub trait NoisePredictor {
    fn predict(&self, x: &Tensor, k: usize, cond: &Tensor) -> Tensor;
}

impl NoisePredictor for PolicyModel {
    fn predict(&self, x: &Tensor, k: usize, cond: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let c = g.constant(cond.clone());
        let ks = vec![k; x.nrows()];
        let out = self.net.denoiser.forward(&mut g, &self.params, xv, &ks, c);
        g.value(out).clone()
    }
}

/// Exact noise predictor for data distributed as `N(mu, s^2)` per
/// coordinate.
#[derive(Clone, Copy, Debug)]
pub struct GaussianOracle<'a> {
    pub schedule: &'a Schedule,
    pub mean: f64,
    pub std: f64,
}

impl NoisePredictor for GaussianOracle<'_> {
    fn predict(&self, x: &Tensor, k: usize, _cond: &Tensor) -> Tensor {
        let ab = self.schedule.abar(k);
        let s2 = self.std * self.std;
        let scale = (1.0 - ab).sqrt() / (s2 * ab + 1.0 - ab);
        x.mapv(|v| (v - ab.sqrt() * self.mean) * scale)
    }
}

/// Ancestral sampling in normalized units. Row `i` uses `rngs[i]` only.
pub fn sample_chunks<P: NoisePredictor + ?Sized, R: Rng>(
    predictor: &P,
    schedule: &Schedule,
    cond: &Tensor,
    dim: usize,
    rngs: &mut [R],
) -> Tensor {
    let b = rngs.len();
    let mut x = Tensor::zeros((b, dim));
    for (mut row, rng) in x.outer_iter_mut().zip(rngs.iter_mut()) {
        row.mapv_inplace(|_| rng.sample(StandardNormal));
    }
    for k in (1..=schedule.steps()).rev() {
        let eps = predictor.predict(&x, k, cond);
        let a = schedule.alpha[k - 1];
        let coef = (1.0 - a) / (1.0 - schedule.abar(k)).sqrt();
        x = (&x - &(eps * coef)) / a.sqrt();
        if k > 1 {
            let sigma = schedule.sigma[k - 1];
            for (mut row, rng) in x.outer_iter_mut().zip(rngs.iter_mut()) {
                row.mapv_inplace(|v| v + sigma * rng.sample::<f64, _>(StandardNormal));
            }
        }
    }
    x
}

/// Samples chunks and maps them to clipped action units.
pub fn sample_actions<P: NoisePredictor + ?Sized, R: Rng>(
    predictor: &P,
    schedule: &Schedule,
    norm: &ActionNorm,
    cond: &Tensor,
    dim: usize,
    rngs: &mut [R],
) -> Tensor {
    norm.denormalize_chunks(&sample_chunks(predictor, schedule, cond, dim, rngs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use ndarray::array;

    #[test]
    fn schedule_identities() {
        let s = Schedule::from_betas(vec![0.1, 0.2]).unwrap();
        assert!((s.alpha_bar[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar[1] - 0.72).abs() < 1e-15);
        assert_eq!(s.sigma[0], 0.0);
        let expect = (0.2_f64 * (1.0 - 0.9) / (1.0 - 0.72)).sqrt();
        assert!((s.sigma[1] - expect).abs() < 1e-15);

        let standard = Schedule::linear(100, 1e-4, 0.02).unwrap();
        assert!((standard.abar(100) - 0.364).abs() < 2e-3);
        let desk = Schedule::from_config(&RunConfig::desk().ddpm).unwrap();
        assert!(desk.abar(desk.steps()) < 0.02);
        assert!(desk.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(Schedule::linear(10, 0.2, 0.1).is_err());
        assert!(Schedule::linear(10, 0.0, 0.1).is_err());
        assert!(Schedule::linear(0, 0.1, 0.1).is_err());
    }

    #[test]
    fn forward_noise_examples() {
        let s = Schedule::linear(10, 1e-3, 0.2).unwrap();
        let a0 = array![[0.5, -1.0, 0.25]];
        let eps = array![[0.3, 0.1, -2.0]];
        assert_eq!(forward_noise(&s, &a0, 0, &eps).unwrap(), a0);
        let zero = Tensor::zeros((1, 3));
        let out = forward_noise(&s, &a0, 4, &zero).unwrap();
        assert_eq!(out, &a0 * s.abar(4).sqrt());
        assert!(forward_noise(&s, &a0, 11, &eps).is_err());
    }

    #[test]
    fn single_step_sampler_collapses() {
        struct Zero;
        impl NoisePredictor for Zero {
            fn predict(&self, x: &Tensor, _k: usize, _c: &Tensor) -> Tensor {
                Tensor::zeros(x.dim())
            }
        }
        let s = Schedule::from_betas(vec![0.3]).unwrap();
        let mut rngs = vec![ChaCha8Rng::seed_from_u64(1)];
        let mut probe = rngs.clone();
        let out = sample_chunks(&Zero, &s, &Tensor::zeros((1, 1)), 4, &mut rngs);
        let a1: Vec<f64> = (0..4).map(|_| probe[0].sample::<f64, _>(StandardNormal)).collect();
        for (o, a) in out.iter().zip(a1) {
            assert!((o - a / 0.7_f64.sqrt()).abs() < 1e-15);
        }
    }

    fn small_policy(no_foresight: bool) -> (RunConfig, PolicyModel) {
        let mut cfg = RunConfig::desk();
        cfg.model.hidden = 8;
        cfg.model.tau = 2;
        cfg.model.visual_dim = 4;
        cfg.model.task_dim = 3;
        cfg.policy.hidden_width = 16;
        cfg.policy.obs_width = 8;
        cfg.policy.chunk_execute = 2;
        cfg.policy.no_foresight = no_foresight;
        let p = PolicyModel::new(&cfg.policy, &cfg.model, 3);
        (cfg, p)
    }

    fn obs(rng: &mut ChaCha8Rng, b: usize) -> (Tensor, Tensor, Vec<usize>, Tensor) {
        let mut t = |r, c| Tensor::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0));
        (t(b, 6), t(b, 4), (0..b).map(|i| i % 3).collect(), t(b, 16))
    }

    #[test]
    fn film_identity_and_widths() {
        let (_, p) = small_policy(false);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (pp, v, tasks, z) = obs(&mut rng, 3);
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let c = p.condition(&mut g, &p.params, &pp, &v, &tasks, zv).unwrap();
        assert_eq!(g.shape(c.o_p), (3, 8));
        assert_eq!(g.shape(c.o_s), (3, 8));
        assert_eq!(g.value(c.g_p.unwrap()), &z);
        assert_eq!(g.value(c.g_s.unwrap()), &z);
        assert_eq!(g.shape(c.cond), (3, 32));
        assert!(p.params.iter().all(|(n, _)| n.starts_with("policy.")));

        let (_, np) = small_policy(true);
        let mut g = Graph::new();
        let zv = g.constant(z);
        let c = np.condition(&mut g, &np.params, &pp, &v, &tasks, zv).unwrap();
        assert_eq!(g.shape(c.cond), (3, 16));
        assert!(c.g_p.is_none());
    }

    #[test]
    fn zeroed_observation_encoders() {
        let (_, mut p) = small_policy(false);
        p.net.e_p.last().zero_out(&mut p.params);
        p.net.e_s.last().zero_out(&mut p.params);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (pp, v, tasks, _) = obs(&mut rng, 2);
        let mut g = Graph::new();
        let (op, os) = p.encode_observation(&mut g, &p.params, &pp, &v, &tasks).unwrap();
        assert!(g.value(op).iter().chain(g.value(os).iter()).all(|&x| x == 0.0));
        assert!(matches!(
            p.encode_observation(&mut g, &p.params, &pp, &v, &[0, 7]),
            Err(Error::UnknownTask(7))
        ));
    }

    #[test]
    fn foresight_slot_masking() {
        let (mut cfg, _) = small_policy(false);
        let z = Tensor::ones((1, 16));
        cfg.policy.foresight_slots = ForesightSlots::ProprioOnly;
        let p = PolicyModel::new(&cfg.policy, &cfg.model, 3);
        let mut g = Graph::new();
        let zv = g.constant(z);
        let m = p.mask_foresight(&mut g, zv);
        assert_eq!(g.value(m).sum(), 8.0);
        assert_eq!(g.value(m)[[0, 0]], 1.0);
        cfg.policy.foresight_slots = ForesightSlots::SemanticOnly;
        let p = PolicyModel::new(&cfg.policy, &cfg.model, 3);
        let m = p.mask_foresight(&mut g, zv);
        assert_eq!(g.value(m)[[0, 0]], 0.0);
        assert_eq!(g.value(m)[[0, 15]], 1.0);
    }

    #[test]
    fn zero_predictor_loss_is_dimension_count() {
        let (cfg, mut p) = small_policy(true);
        p.net.denoiser.lin_out.zero_out(&mut p.params);
        let s = Schedule::from_config(&cfg.ddpm).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let b = 4000;
        let (pp, v, tasks, z) = obs(&mut rng, b);
        let a0 = Tensor::from_shape_fn((b, 4), |_| rng.random_range(-1.0..1.0));
        let (ks, eps) = p.draw_noise(&mut rng, &s, b);
        let mut g = Graph::new();
        let zv = g.constant(z);
        let c = p.condition(&mut g, &p.params, &pp, &v, &tasks, zv).unwrap();
        let l = p.denoise_loss(&mut g, &p.params, &s, &a0, &ks, &eps, c.cond).unwrap();
        let exact = eps.mapv(|e| e * e).sum() / b as f64;
        assert!((g.scalar(l) - exact).abs() < 1e-12);
        assert!((g.scalar(l) - 4.0).abs() < 0.2);
    }

    #[test]
    fn action_norm_round_trip() {
        let acts = [[-2.0, 0.5], [1.0, 1.5], [0.0, 1.0]];
        let n = ActionNorm::fit(acts.iter());
        assert_eq!(n.normalize(-2.0, 0), -1.0);
        assert_eq!(n.normalize(1.0, 0), 1.0);
        assert!((n.denormalize(n.normalize(0.7, 1), 1) - 0.7).abs() < 1e-12);
        let flat = ActionNorm::fit([[0.3, 0.3]].iter());
        assert!(flat.normalize(0.3, 0).abs() < 1e-12);
        let big = array![[10.0, -10.0]];
        assert_eq!(n.denormalize_chunks(&big), array![[A_MAX, -A_MAX]]);
    }

    #[test]
    fn sampler_is_deterministic() {
        let (cfg, p) = small_policy(true);
        let mut s_cfg = cfg.ddpm.clone();
        s_cfg.k = 10;
        let s = Schedule::from_config(&s_cfg).unwrap();
        let cond = Tensor::ones((2, 16));
        let mk = || vec![ChaCha8Rng::seed_from_u64(4), ChaCha8Rng::seed_from_u64(5)];
        let a = sample_chunks(&p, &s, &cond, 4, &mut mk());
        let b = sample_chunks(&p, &s, &cond, 4, &mut mk());
        assert_eq!(a, b);
        // A row depends only on its own generator.
        let solo = sample_chunks(&p, &s, &cond.slice(ndarray::s![1..2, ..]).to_owned(), 4, &mut [ChaCha8Rng::seed_from_u64(5)]);
        assert_eq!(solo.row(0), a.row(1));
    }

    #[test]
    fn timestep_embedding_shape() {
        let e = timestep_embedding(&[0, 5], 8);
        assert_eq!(e.dim(), (2, 8));
        assert_eq!(e[[0, 0]], 0.0);
        assert_eq!(e[[0, 4]], 1.0);
        assert_ne!(e.row(0), e.row(1));
    }
}
