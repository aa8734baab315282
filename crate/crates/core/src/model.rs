//! The dynamics-stage model: encoders, dynamics core, foresight heads and
//! the EMA target copy, with the combined objective.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::config::{LossConfig, ModelConfig, RunConfig};
use crate::dynamics::{DynamicsCore, DynamicsVars, MaskDraws, TransitionInputs};
use crate::encoders::{ema_update, EncoderSet};
use crate::error::{Error, Result};
use crate::foresight::{
    latent_loss, make_targets, normalize_targets, predict_foresight, recon_loss, ForesightHeads, ForesightOutput,
    Stage1Loss,
};

/// Observation window for one batch of transitions. Proprio rows are
/// `B x 6`, visual rows `B x D_v`, actions `(B * tau) x 2` sample-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionBatch {
    pub p_past: Tensor,
    pub v_past: Tensor,
    pub p_curr: Tensor,
    pub v_curr: Tensor,
    pub actions: Tensor,
    pub tasks: Vec<usize>,
}

impl TransitionBatch {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Batch {
    pub x: TransitionBatch,
    pub p_future: Tensor,
    pub v_future: Tensor,
}

/// Graph handles for one evaluation of the objective.
#[derive(Clone, Copy, Debug)]
pub struct Stage1Graph {
    pub dynamics: DynamicsVars,
    pub foresight: ForesightOutput,
    pub latent: Var,
    pub recon: Var,
    pub total: Var,
}

/// Extra values produced alongside the objective.
#[derive(Clone, Debug)]
pub struct Stage1Aux {
    pub loss: Stage1Loss,
    pub target_p: Tensor,
    pub target_s: Tensor,
}

#[derive(Clone, Debug)]
pub struct Stage1Model {
    pub model: ModelConfig,
    pub loss_cfg: LossConfig,
    pub params: ParamStore,
    pub target: ParamStore,
    pub encoders: EncoderSet,
    pub dynamics: DynamicsCore,
    pub heads: ForesightHeads,
}

impl Stage1Model {
    /// Builds fresh parameters from `cfg.seed`; the target store starts as
    /// an exact frozen copy.
    pub fn new(cfg: &RunConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamStore::new();
        let encoders = EncoderSet::new(&mut params, &cfg.model, &mut rng);
        let dynamics = DynamicsCore::new(&mut params, &cfg.model, cfg.attention.direction, cfg.pool, &mut rng);
        let heads = ForesightHeads::new(&mut params, cfg.model.hidden, cfg.model.visual_dim, &mut rng);
        let mut target = params.clone();
        target.set_frozen(true);
        Self {
            model: cfg.model.clone(),
            loss_cfg: cfg.loss.clone(),
            params,
            target,
            encoders,
            dynamics,
            heads,
        }
    }

    /// Parameter ids with EMA copies.
    pub fn ema_ids(&self) -> Vec<ParamId> {
        self.encoders.ema_params()
    }

    /// Parameters the optimizer updates.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.params
            .ids()
            .filter(|&id| self.model.task_table_trainable || id != self.encoders.task_table)
            .collect()
    }

    pub fn ema_step(&mut self, momentum: f64) -> Result<()> {
        let ids = self.ema_ids();
        ema_update(&self.params, &mut self.target, &ids, momentum)
    }

    /// Encodes a transition window and runs the dynamics core and the
    /// foresight heads against `store`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: &TransitionBatch,
        masks: &MaskDraws,
    ) -> Result<(DynamicsVars, ForesightOutput)> {
        let b = x.len();
        let enc = &self.encoders;
        let inputs = TransitionInputs {
            p_past: enc.encode_proprio(g, store, &x.p_past)?,
            p_curr: enc.encode_proprio(g, store, &x.p_curr)?,
            s_past: enc.encode_semantic(g, store, &x.v_past, &x.tasks)?.tokens,
            s_curr: enc.encode_semantic(g, store, &x.v_curr, &x.tasks)?.tokens,
            actions: enc.encode_actions(g, store, &x.actions, b)?,
            batch: b,
        };
        let dv = self.dynamics.forward(g, store, &inputs, masks);
        let fo = predict_foresight(g, store, &self.heads, dv.z_dyn);
        Ok((dv, fo))
    }

    /// Pooled, unit-normalized EMA targets for the future states.
    pub fn targets(&self, batch: &Stage1Batch) -> Result<(Tensor, Tensor)> {
        let (tp, ts) = self
            .encoders
            .encode_target(&self.target, &batch.p_future, &batch.v_future, &batch.x.tasks)?;
        let (zp, zs) = make_targets(&tp, self.model.n_proprio_tokens, &ts, self.model.n_semantic_tokens);
        Ok((normalize_targets(&zp)?, normalize_targets(&zs)?))
    }

    /// Builds the full objective in `g` with the online parameters.
    pub fn objective(&self, g: &mut Graph, batch: &Stage1Batch, masks: &MaskDraws) -> Result<(Stage1Graph, Stage1Aux)> {
        let (target_p, target_s) = self.targets(batch)?;
        let (dynamics, foresight) = self.forward(g, &self.params, &batch.x, masks)?;
        let latent = latent_loss(g, &foresight, &target_p, &target_s, self.loss_cfg.normalize_predictions);
        let recon = recon_loss(g, &self.params, &self.heads, &foresight, &batch.p_future, &batch.v_future);
        let lambda = self.loss_cfg.lambda_recon;
        let weighted = g.scale(recon, lambda);
        let total = g.add(latent, weighted);
        let loss = Stage1Loss {
            latent: g.scalar(latent),
            recon: g.scalar(recon),
            total: g.scalar(total),
            lambda_recon: lambda,
        };
        if !loss.total.is_finite() {
            return Err(Error::NonFinite(format!("stage-1 loss {loss:?}")));
        }
        Ok((
            Stage1Graph {
                dynamics,
                foresight,
                latent,
                recon,
                total,
            },
            Stage1Aux {
                loss,
                target_p,
                target_s,
            },
        ))
    }

    /// Eval-mode foresight (no action masking) as plain values:
    /// `(z_hat = [z_hat_p ; z_hat_s], z_dyn)`.
    pub fn foresight(&self, x: &TransitionBatch) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let masks = MaskDraws {
            proprio: vec![false; x.len() * self.model.tau],
            semantic: vec![false; x.len() * self.model.tau],
        };
        let (_, fo) = self.forward(&mut g, &self.params, x, &masks)?;
        Ok((g.value(fo.z_hat).clone(), g.value(fo.z_dyn).clone()))
    }

    pub fn hidden(&self) -> usize {
        self.model.hidden
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use rand::Rng;

    pub(crate) fn tiny_config() -> RunConfig {
        RunConfig::smoke()
    }

    fn random_batch(rng: &mut ChaCha8Rng, b: usize, cfg: &RunConfig) -> Stage1Batch {
        let mut t = |r: usize, c: usize| Tensor::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0));
        let dv = cfg.model.visual_dim;
        let x = TransitionBatch {
            p_past: t(b, 6),
            v_past: t(b, dv),
            p_curr: t(b, 6),
            v_curr: t(b, dv),
            actions: t(b * cfg.model.tau, 2),
            tasks: (0..b).map(|i| i % 3).collect(),
        };
        Stage1Batch {
            x,
            p_future: t(b, 6),
            v_future: t(b, dv),
        }
    }

    #[test]
    fn decomposition_and_unit_targets() {
        let cfg = tiny_config();
        let model = Stage1Model::new(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = random_batch(&mut rng, 5, &cfg);
        let masks = model.dynamics.draw_masks(&mut rng, 5, 0.3);
        let mut g = Graph::new();
        let (_, aux) = model.objective(&mut g, &batch, &masks).unwrap();
        let l = aux.loss;
        assert_eq!(l.lambda_recon, 0.1);
        assert!((l.total - (l.latent + 0.1 * l.recon)).abs() < 1e-12);
        for row in aux.target_p.outer_iter().chain(aux.target_s.outer_iter()) {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
        }

        let mut zero = tiny_config();
        zero.loss.lambda_recon = 0.0;
        let model = Stage1Model::new(&zero);
        let mut g = Graph::new();
        let (_, aux) = model.objective(&mut g, &batch, &masks).unwrap();
        assert_eq!(aux.loss.total, aux.loss.latent);
    }

    #[test]
    fn target_matches_online_at_init() {
        let cfg = tiny_config();
        let model = Stage1Model::new(&cfg);
        assert_eq!(model.params.hash(), model.target.hash());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = random_batch(&mut rng, 3, &cfg);
        let mut frozen_online = model.params.clone();
        frozen_online.set_frozen(true);
        let online = model.encoders.encode_target(&frozen_online, &batch.p_future, &batch.v_future, &batch.x.tasks);
        let target = model.encoders.encode_target(&model.target, &batch.p_future, &batch.v_future, &batch.x.tasks);
        assert_eq!(online.unwrap(), target.unwrap());
    }

    #[test]
    fn gradients_skip_target_and_frozen_table() {
        let mut cfg = tiny_config();
        cfg.model.task_table_trainable = false;
        let model = Stage1Model::new(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = random_batch(&mut rng, 3, &cfg);
        let masks = model.dynamics.draw_masks(&mut rng, 3, 0.3);
        let mut g = Graph::new();
        let (sg, _) = model.objective(&mut g, &batch, &masks).unwrap();
        let grads = g.backward(sg.total);
        assert_eq!(grads.store_uid(), Some(model.params.uid()));
        assert!(!model.trainable_ids().contains(&model.encoders.task_table));
    }
}
