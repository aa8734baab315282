//! Latent foresight heads and the dynamics-stage objective.
//!
//! `g_p`/`g_s` predict the next-chunk latent of each modality from the
//! dynamics code alone. Targets come from the EMA encoders, are mean-pooled
//! over tokens, and are L2-normalized inside the loss. Reconstruction
//! decoders `h_p`/`h_s` tie the predictions back to the raw future proprio
//! vector and the frozen visual embedding.

use rand::Rng;

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::sim::PROPRIO_DIM;

/// Norms below this are treated as collapsed targets.
pub const DEGENERATE_NORM: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct ForesightHeads {
    pub g_p: Mlp,
    pub g_s: Mlp,
    pub h_p: Mlp,
    pub h_s: Mlp,
}

impl ForesightHeads {
    pub fn new(store: &mut ParamStore, hidden: usize, visual_dim: usize, rng: &mut impl Rng) -> Self {
        let h = hidden;
        Self {
            g_p: Mlp::new(store, "foresight.g_p", &[h, h, h], rng),
            g_s: Mlp::new(store, "foresight.g_s", &[h, h, h], rng),
            h_p: Mlp::new(store, "foresight.h_p", &[h, h, PROPRIO_DIM], rng),
            h_s: Mlp::new(store, "foresight.h_s", &[h, h, visual_dim], rng),
        }
    }
}

/// Graph handles for one foresight prediction.
#[derive(Clone, Copy, Debug)]
pub struct ForesightOutput {
    pub z_hat_p: Var,
    pub z_hat_s: Var,
    /// `[z_hat_p ; z_hat_s]`.
    pub z_hat: Var,
    pub z_dyn: Var,
}

pub fn predict_foresight(g: &mut Graph, store: &ParamStore, heads: &ForesightHeads, z_dyn: Var) -> ForesightOutput {
    let z_hat_p = heads.g_p.forward(g, store, z_dyn);
    let z_hat_s = heads.g_s.forward(g, store, z_dyn);
    let z_hat = g.concat_cols(&[z_hat_p, z_hat_s]);
    ForesightOutput {
        z_hat_p,
        z_hat_s,
        z_hat,
        z_dyn,
    }
}

/// Mean-pools `(batch * n) x H` target tokens to `batch x H`.
pub fn pool_tokens(tokens: &Tensor, n: usize) -> Tensor {
    let (rows, h) = tokens.dim();
    tokens
        .to_shape((rows / n, n, h))
        .expect("token rows divisible by n")
        .mean_axis(ndarray::Axis(1))
        .expect("non-empty token groups")
}

pub fn make_targets(tokens_p: &Tensor, n_p: usize, tokens_s: &Tensor, n_s: usize) -> (Tensor, Tensor) {
    (pool_tokens(tokens_p, n_p), pool_tokens(tokens_s, n_s))
}

/// Row-wise unit normalization; fails on a collapsed row.
pub fn normalize_targets(z: &Tensor) -> Result<Tensor> {
    let mut out = z.clone();
    for mut row in out.outer_iter_mut() {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm >= DEGENERATE_NORM) {
            return Err(Error::DegenerateTarget {
                norm,
                threshold: DEGENERATE_NORM,
            });
        }
        row.mapv_inplace(|x| x / norm);
    }
    Ok(out)
}

/// Batch mean of `||z_hat_p - t_p||^2 + ||z_hat_s - t_s||^2` with unit-norm
/// targets. Predictions are used as-is unless `normalize_predictions`.
pub fn latent_loss(
    g: &mut Graph,
    fo: &ForesightOutput,
    target_p_unit: &Tensor,
    target_s_unit: &Tensor,
    normalize_predictions: bool,
) -> Var {
    let batch = target_p_unit.nrows() as f64;
    let term = |g: &mut Graph, pred: Var, target: &Tensor| {
        let pred = if normalize_predictions {
            g.row_l2_normalize(pred)
        } else {
            pred
        };
        let t = g.constant(target.clone());
        let d = g.sub(pred, t);
        let sq = g.square(d);
        g.sum_all(sq)
    };
    let lp = term(g, fo.z_hat_p, target_p_unit);
    let ls = term(g, fo.z_hat_s, target_s_unit);
    let sum = g.add(lp, ls);
    g.scale(sum, 1.0 / batch)
}

/// Batch mean of `|h_p(z_hat_p) - p_future|_1 + |h_s(z_hat_s) - v_future|_1`.
pub fn recon_loss(
    g: &mut Graph,
    store: &ParamStore,
    heads: &ForesightHeads,
    fo: &ForesightOutput,
    p_future: &Tensor,
    v_future: &Tensor,
) -> Var {
    let batch = p_future.nrows() as f64;
    let rp = heads.h_p.forward(g, store, fo.z_hat_p);
    let rs = heads.h_s.forward(g, store, fo.z_hat_s);
    let l1 = |g: &mut Graph, pred: Var, target: &Tensor| {
        let t = g.constant(target.clone());
        let d = g.sub(pred, t);
        let a = g.abs(d);
        g.sum_all(a)
    };
    let lp = l1(g, rp, p_future);
    let ls = l1(g, rs, v_future);
    let sum = g.add(lp, ls);
    g.scale(sum, 1.0 / batch)
}

/// Scalar components of the dynamics-stage objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage1Loss {
    pub latent: f64,
    pub recon: f64,
    pub total: f64,
    pub lambda_recon: f64,
}
