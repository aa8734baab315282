//! Two-stage training: the dynamics model first, then the policy on top of
//! the frozen dynamics model.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, ParamId, ParamStore, Tensor, Var};
use crate::checkpoint::{Checkpoint, RngState};
use crate::config::{OptimConfig, RunConfig};
use crate::data::{EmbeddedDataset, Stage};
use crate::diffusion::{ActionNorm, PolicyModel, Schedule};
use crate::dynamics::MaskDraws;
use crate::encoders::Backbone;
use crate::error::{Error, Result};
use crate::foresight::Stage1Loss;
use crate::model::{Stage1Batch, Stage1Model, TransitionBatch};

const BATCH_STREAM: u64 = 0xba7c;
const EVAL_STREAM: u64 = 0xe7a1;
const EVAL_BATCH: usize = 256;

/// Adaptive-moment optimizer without weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: OptimConfig,
    m: BTreeMap<ParamId, Tensor>,
    v: BTreeMap<ParamId, Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: &OptimConfig) -> Self {
        Self {
            cfg: cfg.clone(),
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    /// Clips `grads` to the configured global norm and updates `ids`.
    /// Returns the pre-clip norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut Gradients, ids: &[ParamId]) -> f64 {
        let norm = grads.clip_global_norm(self.cfg.grad_clip);
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for &id in ids {
            let Some(g) = grads.get(id) else { continue };
            let m = self.m.entry(id).or_insert_with(|| Tensor::zeros(g.dim()));
            let v = self.v.entry(id).or_insert_with(|| Tensor::zeros(g.dim()));
            let p = store.get_mut(id);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= self.cfg.lr * (*m / c1) / ((*v / c2).sqrt() + self.cfg.eps);
            });
        }
        norm
    }
}

/// Line-delimited metrics plus a separate wall-clock log, so the metrics
/// file is byte-reproducible.
pub struct MetricsSink {
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
    start: Instant,
}

impl MetricsSink {
    pub fn create(dir: &Path, stem: &str) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            metrics: BufWriter::new(File::create(dir.join(format!("{stem}_metrics.jsonl")))?),
            timing: BufWriter::new(File::create(dir.join(format!("{stem}_timing.jsonl")))?),
            start: Instant::now(),
        })
    }

    pub fn record(&mut self, step: usize, row: &impl Serialize) -> Result<()> {
        serde_json::to_writer(&mut self.metrics, row)?;
        self.metrics.write_all(b"\n")?;
        let wall = self.start.elapsed().as_secs_f64();
        writeln!(self.timing, "{{\"step\":{step},\"wall_time_s\":{wall:.3}}}")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.metrics.flush()?;
        self.timing.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Record {
    pub step: usize,
    pub mask_ratio: f64,
    pub latent: f64,
    pub recon: f64,
    pub total: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Record {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Run output directory handle.
#[derive(Clone, Debug)]
pub struct RunDir(pub PathBuf);

impl RunDir {
    fn write_failure(&self, stage: &str, step: usize, detail: &str) {
        let dump = serde_json::json!({ "stage": stage, "step": step, "detail": detail });
        let _ = fs::write(self.0.join(format!("{stage}_failure.json")), dump.to_string());
    }
}

fn batch_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn no_masks(batch: usize, tau: usize) -> MaskDraws {
    MaskDraws {
        proprio: vec![false; batch * tau],
        semantic: vec![false; batch * tau],
    }
}

pub fn stage1_checkpoint(model: &Stage1Model, cfg: &RunConfig, step: usize, rng: Option<&ChaCha8Rng>) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new("stage1", step, cfg);
    ck.put_store("online/", &model.params);
    ck.put_store("target/", &model.target);
    ck.rng = rng.map(RngState::capture);
    ck.set_extra("param_hash", model.params.hash())?;
    ck.set_extra("backbone_hash", Backbone::new(cfg.model.backbone_seed, cfg.model.visual_dim).hash())?;
    Ok(ck)
}

pub fn stage1_from_checkpoint(ck: &Checkpoint) -> Result<Stage1Model> {
    if ck.kind != "stage1" && ck.kind != "stage2" {
        return Err(Error::Checkpoint(format!("expected a stage-1 checkpoint, found {}", ck.kind)));
    }
    let mut model = Stage1Model::new(&ck.config);
    ck.load_into("online/", &mut model.params, true)?;
    ck.load_into("target/", &mut model.target, true)?;
    Ok(model)
}

/// Result of a dynamics-stage run.
#[derive(Clone, Debug)]
pub struct Stage1Run {
    pub model: Stage1Model,
    pub records: Vec<Stage1Record>,
    /// Objective on a fixed held-in batch before and after training.
    pub initial_eval: Stage1Loss,
    pub final_eval: Stage1Loss,
}

/// A fixed evaluation batch for before/after comparisons.
pub fn stage1_eval_batch(cfg: &RunConfig, data: &EmbeddedDataset) -> Result<Stage1Batch> {
    let mut rng = batch_rng(cfg.seed, EVAL_STREAM);
    let idx = data.sample_indices(Stage::Dynamics, cfg.model.tau, EVAL_BATCH, &mut rng)?;
    Ok(data.stage1_batch(&idx, cfg.model.tau))
}

pub fn stage1_eval(model: &Stage1Model, batch: &Stage1Batch) -> Result<Stage1Loss> {
    let mut g = Graph::new();
    let masks = no_masks(batch.x.len(), model.model.tau);
    Ok(model.objective(&mut g, batch, &masks)?.1.loss)
}

pub fn train_stage1(cfg: &RunConfig, data: &EmbeddedDataset, out: Option<&RunDir>) -> Result<Stage1Run> {
    cfg.validate()?;
    let tau = cfg.model.tau;
    let mut model = Stage1Model::new(cfg);
    let mut rng = batch_rng(cfg.seed, BATCH_STREAM);
    let mut adam = Adam::new(&cfg.optim);
    let trainable = model.trainable_ids();
    let eval_batch = stage1_eval_batch(cfg, data)?;
    let initial_eval = stage1_eval(&model, &eval_batch)?;
    let mut sink = out.map(|d| MetricsSink::create(&d.0, "stage1")).transpose()?;
    let mut records = Vec::with_capacity(cfg.stage1.steps);
    for step in 0..cfg.stage1.steps {
        let ratio = cfg.mask.ratio_at(step);
        let idx = data.sample_indices(Stage::Dynamics, tau, cfg.stage1.batch_size, &mut rng)?;
        let batch = data.stage1_batch(&idx, tau);
        let masks = model.dynamics.draw_masks(&mut rng, batch.x.len(), ratio);
        let mut g = Graph::new();
        let fail = |detail: String| {
            if let Some(d) = out {
                d.write_failure("stage1", step, &detail);
            }
            Error::Numeric { step, detail }
        };
        let (sg, aux) = model.objective(&mut g, &batch, &masks).map_err(|e| match e {
            Error::NonFinite(d) => fail(d),
            e => e,
        })?;
        let mut grads = g.backward(sg.total);
        let grad_norm = adam.step(&mut model.params, &mut grads, &trainable);
        if !grad_norm.is_finite() {
            return Err(fail(format!("gradient norm {grad_norm}")));
        }
        model.ema_step(cfg.ema.momentum)?;
        let rec = Stage1Record {
            step,
            mask_ratio: ratio,
            latent: aux.loss.latent,
            recon: aux.loss.recon,
            total: aux.loss.total,
            grad_norm,
        };
        if let Some(s) = sink.as_mut() {
            s.record(step, &rec)?;
        }
        records.push(rec);
        if let Some(d) = out {
            let every = cfg.stage1.checkpoint_every;
            if every > 0 && (step + 1) % every == 0 && step + 1 < cfg.stage1.steps {
                stage1_checkpoint(&model, cfg, step + 1, Some(&rng))?.save(&d.0.join(format!("stage1_step{}.ckpt", step + 1)))?;
            }
        }
    }
    let final_eval = stage1_eval(&model, &eval_batch)?;
    if let Some(d) = out {
        sink.as_mut().map(MetricsSink::flush).transpose()?;
        stage1_checkpoint(&model, cfg, cfg.stage1.steps, Some(&rng))?.save(&d.0.join("stage1.ckpt"))?;
    }
    Ok(Stage1Run {
        model,
        records,
        initial_eval,
        final_eval,
    })
}

/// Everything needed to act: frozen dynamics model, policy, action
/// statistics and the noise schedule.
#[derive(Clone, Debug)]
pub struct PolicyBundle {
    pub config: RunConfig,
    pub stage1: Stage1Model,
    pub policy: PolicyModel,
    pub norm: ActionNorm,
    pub schedule: Schedule,
}

impl PolicyBundle {
    pub fn to_checkpoint(&self, step: usize, rng: Option<&ChaCha8Rng>) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new("stage2", step, &self.config);
        ck.put_store("online/", &self.stage1.params);
        ck.put_store("target/", &self.stage1.target);
        ck.put_store("policy/", &self.policy.params);
        ck.rng = rng.map(RngState::capture);
        ck.set_extra("action_norm", self.norm)?;
        ck.set_extra("stage1_hash", self.stage1.params.hash())?;
        ck.set_extra("policy_hash", self.policy.params.hash())?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "stage2" {
            return Err(Error::Checkpoint(format!("expected a stage-2 checkpoint, found {}", ck.kind)));
        }
        let mut stage1 = stage1_from_checkpoint(ck)?;
        stage1.params.set_frozen(true);
        let mut policy = PolicyModel::new(&ck.config.policy, &ck.config.model, ck.config.seed);
        ck.load_into("policy/", &mut policy.params, true)?;
        Ok(Self {
            config: ck.config.clone(),
            stage1,
            policy,
            norm: ck.extra("action_norm")?,
            schedule: Schedule::from_config(&ck.config.ddpm)?,
        })
    }
}

/// Foresight `z_hat` for every policy window, computed once with the
/// frozen dynamics model.
#[derive(Clone, Debug)]
pub struct ForesightCache {
    offsets: Vec<usize>,
    starts: Vec<usize>,
    pub values: Tensor,
}

impl ForesightCache {
    pub fn build(stage1: &Stage1Model, data: &EmbeddedDataset, stage: Stage, tau: usize) -> Result<Self> {
        let windows = data.windows(stage, tau);
        let mut offsets = Vec::with_capacity(data.episodes.len());
        let mut starts = Vec::with_capacity(data.episodes.len());
        let mut acc = 0;
        for ep in &data.episodes {
            let range = crate::data::valid_range(stage, ep.len(), tau);
            offsets.push(acc);
            starts.push(*range.start());
            acc += range.count();
        }
        let mut values = Tensor::zeros((windows.len(), 2 * stage1.hidden()));
        for (c, chunk) in windows.chunks(EVAL_BATCH).enumerate() {
            let (z, _) = stage1.foresight(&data.transitions(chunk, tau))?;
            values
                .slice_mut(ndarray::s![c * EVAL_BATCH..c * EVAL_BATCH + chunk.len(), ..])
                .assign(&z);
        }
        Ok(Self { offsets, starts, values })
    }

    pub fn rows(&self, idx: &[(usize, usize)]) -> Tensor {
        let mut out = Tensor::zeros((idx.len(), self.values.ncols()));
        for (r, &(e, t)) in idx.iter().enumerate() {
            out.row_mut(r).assign(&self.values.row(self.offsets[e] + t - self.starts[e]));
        }
        out
    }
}

/// One policy minibatch with its noise draws.
#[derive(Clone, Debug)]
pub struct Stage2Batch {
    pub p: Tensor,
    pub v: Tensor,
    pub tasks: Vec<usize>,
    pub z_hat: Tensor,
    pub a0: Tensor,
    pub ks: Vec<usize>,
    pub eps: Tensor,
}

fn stage2_batch(
    data: &EmbeddedDataset,
    cache: &ForesightCache,
    policy: &PolicyModel,
    schedule: &Schedule,
    norm: &ActionNorm,
    idx: &[(usize, usize)],
    rng: &mut ChaCha8Rng,
) -> Stage2Batch {
    let tau = policy.tau;
    let x: TransitionBatch = data.transitions(idx, tau);
    let (ks, eps) = policy.draw_noise(rng, schedule, idx.len());
    Stage2Batch {
        p: x.p_curr,
        v: x.v_curr,
        tasks: x.tasks,
        z_hat: cache.rows(idx),
        a0: data.action_chunks(idx, tau, norm),
        ks,
        eps,
    }
}

/// Builds the noise-prediction loss for a batch in `g`.
pub fn stage2_objective(g: &mut Graph, policy: &PolicyModel, schedule: &Schedule, b: &Stage2Batch) -> Result<Var> {
    let z = g.constant(b.z_hat.clone());
    let c = policy.condition(g, &policy.params, &b.p, &b.v, &b.tasks, z)?;
    policy.denoise_loss(g, &policy.params, schedule, &b.a0, &b.ks, &b.eps, c.cond)
}

/// The same objective with foresight computed inside the graph from the
/// (frozen) dynamics model, for checking that no gradient reaches it.
pub fn stage2_objective_end_to_end(
    g: &mut Graph,
    bundle: &PolicyBundle,
    data: &EmbeddedDataset,
    idx: &[(usize, usize)],
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let tau = bundle.policy.tau;
    let x = data.transitions(idx, tau);
    let (_, fo) = bundle.stage1.forward(g, &bundle.stage1.params, &x, &no_masks(idx.len(), tau))?;
    let c = bundle.policy.condition(g, &bundle.policy.params, &x.p_curr, &x.v_curr, &x.tasks, fo.z_hat)?;
    let a0 = data.action_chunks(idx, tau, &bundle.norm);
    let (ks, eps) = bundle.policy.draw_noise(rng, &bundle.schedule, idx.len());
    bundle
        .policy
        .denoise_loss(g, &bundle.policy.params, &bundle.schedule, &a0, &ks, &eps, c.cond)
}

#[derive(Clone, Debug)]
pub struct Stage2Run {
    pub bundle: PolicyBundle,
    pub records: Vec<Stage2Record>,
    pub initial_eval: f64,
    pub final_eval: f64,
    pub stage1_hash_before: String,
    pub stage1_hash_after: String,
}

pub fn train_stage2(cfg: &RunConfig, stage1: &Stage1Model, data: &EmbeddedDataset, out: Option<&RunDir>) -> Result<Stage2Run> {
    cfg.validate()?;
    let tau = cfg.model.tau;
    if stage1.model != cfg.model {
        return Err(Error::Precondition("stage-1 model shape differs from the run config".into()));
    }
    let mut frozen = stage1.clone();
    frozen.params.set_frozen(true);
    let stage1_hash_before = frozen.params.hash();
    let schedule = Schedule::from_config(&cfg.ddpm)?;
    let norm = data.action_norm();
    let trimmed;
    let data = if cfg.policy.trim_idle_tail {
        trimmed = data.trim_idle_tails(tau);
        &trimmed
    } else {
        data
    };
    let stage = if cfg.policy.pad_early_windows { Stage::PolicyPadded } else { Stage::Policy };
    let cache = ForesightCache::build(&frozen, data, stage, tau)?;
    let mut policy = PolicyModel::new(&cfg.policy, &cfg.model, cfg.seed);
    let ids: Vec<ParamId> = policy.params.ids().collect();
    let mut adam = Adam::new(&cfg.optim);
    let mut rng = batch_rng(cfg.seed, BATCH_STREAM + 1);

    let mut eval_rng = batch_rng(cfg.seed, EVAL_STREAM + 1);
    let eval_idx = data.sample_indices(stage, tau, EVAL_BATCH, &mut eval_rng)?;
    let eval_batch = stage2_batch(data, &cache, &policy, &schedule, &norm, &eval_idx, &mut eval_rng);
    let eval = |policy: &PolicyModel| -> Result<f64> {
        let mut g = Graph::new();
        let l = stage2_objective(&mut g, policy, &schedule, &eval_batch)?;
        Ok(g.scalar(l))
    };
    let initial_eval = eval(&policy)?;

    let mut sink = out.map(|d| MetricsSink::create(&d.0, "stage2")).transpose()?;
    let mut records = Vec::with_capacity(cfg.stage2.steps);
    for step in 0..cfg.stage2.steps {
        let idx = data.sample_indices(stage, tau, cfg.stage2.batch_size, &mut rng)?;
        let batch = stage2_batch(data, &cache, &policy, &schedule, &norm, &idx, &mut rng);
        let mut g = Graph::new();
        let loss = stage2_objective(&mut g, &policy, &schedule, &batch)?;
        let value = g.scalar(loss);
        let mut grads = g.backward(loss);
        let grad_norm = adam.step(&mut policy.params, &mut grads, &ids);
        if !value.is_finite() || !grad_norm.is_finite() {
            let detail = format!("loss {value}, gradient norm {grad_norm}");
            if let Some(d) = out {
                d.write_failure("stage2", step, &detail);
            }
            return Err(Error::Numeric { step, detail });
        }
        let rec = Stage2Record {
            step,
            loss: value,
            grad_norm,
        };
        if let Some(s) = sink.as_mut() {
            s.record(step, &rec)?;
        }
        records.push(rec);
        if let Some(d) = out {
            let every = cfg.stage2.checkpoint_every;
            if every > 0 && (step + 1) % every == 0 && step + 1 < cfg.stage2.steps {
                let b = PolicyBundle {
                    config: cfg.clone(),
                    stage1: frozen.clone(),
                    policy: policy.clone(),
                    norm,
                    schedule: schedule.clone(),
                };
                b.to_checkpoint(step + 1, Some(&rng))?.save(&d.0.join(format!("stage2_step{}.ckpt", step + 1)))?;
            }
        }
    }
    let final_eval = eval(&policy)?;
    let stage1_hash_after = frozen.params.hash();
    let bundle = PolicyBundle {
        config: cfg.clone(),
        stage1: frozen,
        policy,
        norm,
        schedule,
    };
    if let Some(d) = out {
        sink.as_mut().map(MetricsSink::flush).transpose()?;
        bundle.to_checkpoint(cfg.stage2.steps, Some(&rng))?.save(&d.0.join("stage2.ckpt"))?;
    }
    Ok(Stage2Run {
        bundle,
        records,
        initial_eval,
        final_eval,
        stage1_hash_before,
        stage1_hash_after,
    })
}
