//! Run configuration.
//!
//! A [`RunConfig`] plus the dataset bytes fully determine a run. The
//! canonical text form is TOML; unknown keys are rejected everywhere.
//! Overrides use dotted keys (`ddpm.K=50`) and can only replace keys that
//! already exist.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Desk,
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionDirection {
    /// Proprioceptive transitions query semantic ones.
    #[default]
    PQueriesS,
    SQueriesP,
    /// Self-attention over the concatenated token set.
    SymmetricSelf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    #[default]
    LearnedQuery,
    Mean,
    Max,
}

/// Which foresight slots reach the policy. Disabled slots are zeroed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ForesightSlots {
    #[default]
    Both,
    ProprioOnly,
    SemanticOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub path: PathBuf,
    pub tasks: Vec<usize>,
    pub episodes_per_task: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Token width `H`.
    pub hidden: usize,
    pub n_proprio_tokens: usize,
    pub n_semantic_tokens: usize,
    /// Action horizon `tau`: chunk length and foresight offset.
    pub tau: usize,
    /// Width of the frozen visual embedding; the fused semantic width
    /// equals it.
    pub visual_dim: usize,
    pub task_dim: usize,
    pub heads: usize,
    pub task_table_trainable: bool,
    pub backbone_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub direction: AttentionDirection,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumStage {
    /// First optimizer step (inclusive) at which `ratio` applies.
    pub from_step: usize,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    pub ratio: f64,
    /// Step-indexed schedule; when non-empty it overrides `ratio`.
    pub curriculum: Vec<CurriculumStage>,
}

impl MaskConfig {
    pub fn ratio_at(&self, step: usize) -> f64 {
        self.curriculum
            .iter()
            .filter(|c| c.from_step <= step)
            .max_by_key(|c| c.from_step)
            .map_or(self.ratio, |c| c.ratio)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_recon: f64,
    pub normalize_predictions: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmaConfig {
    pub momentum: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DdpmConfig {
    #[serde(rename = "K")]
    pub k: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    /// Denoiser block width.
    pub hidden_width: usize,
    /// Width of the observation encodings `o_p`, `o_s`.
    pub obs_width: usize,
    pub blocks: usize,
    pub time_embed_dim: usize,
    /// Actions executed from each sampled chunk before replanning.
    pub chunk_execute: usize,
    /// Condition on observations only (`[o_p; o_s]`), without foresight.
    pub no_foresight: bool,
    pub foresight_slots: ForesightSlots,
    /// Also train on anchors before `tau`, padded like the start of a rollout.
    #[serde(default)]
    pub pad_early_windows: bool,
    /// Drop each episode's idle tail, keeping `tau` steps past the last
    /// non-zero action.
    #[serde(default)]
    pub trim_idle_tail: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub rollouts: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub preset: Preset,
    pub seed: u64,
    pub pool: PoolKind,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub attention: AttentionConfig,
    pub mask: MaskConfig,
    pub loss: LossConfig,
    pub ema: EmaConfig,
    pub ddpm: DdpmConfig,
    pub policy: PolicyConfig,
    pub optim: OptimConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Laptop-scale configuration; the one the test-suite exercises.
    pub fn desk() -> Self {
        let hidden = 64;
        Self {
            version: CONFIG_VERSION,
            preset: Preset::Desk,
            seed: 0,
            pool: PoolKind::LearnedQuery,
            data: DataConfig {
                path: PathBuf::from("data"),
                tasks: vec![0, 1, 2],
                episodes_per_task: 20,
            },
            model: ModelConfig {
                hidden,
                n_proprio_tokens: 4,
                n_semantic_tokens: 4,
                tau: 6,
                visual_dim: 32,
                task_dim: 16,
                heads: 4,
                task_table_trainable: true,
                backbone_seed: 1234,
            },
            attention: AttentionConfig {
                direction: AttentionDirection::PQueriesS,
            },
            mask: MaskConfig {
                ratio: 0.3,
                curriculum: Vec::new(),
            },
            loss: LossConfig {
                lambda_recon: 0.1,
                normalize_predictions: false,
            },
            ema: EmaConfig { momentum: 0.995 },
            ddpm: DdpmConfig {
                k: 100,
                beta_start: 1e-4,
                beta_end: 0.1,
            },
            policy: PolicyConfig {
                hidden_width: 4 * hidden,
                obs_width: hidden,
                blocks: 3,
                time_embed_dim: 32,
                chunk_execute: 6,
                no_foresight: false,
                foresight_slots: ForesightSlots::Both,
                pad_early_windows: true,
                trim_idle_tail: true,
            },
            optim: OptimConfig {
                lr: 3e-4,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                grad_clip: 1.0,
            },
            stage1: StageConfig {
                steps: 2_000,
                batch_size: 64,
                checkpoint_every: 0,
            },
            stage2: StageConfig {
                steps: 10_000,
                batch_size: 64,
                checkpoint_every: 0,
            },
            eval: EvalConfig {
                rollouts: 50,
                seed: 10_000,
            },
        }
    }

    /// Full-size hyperparameters. Shipped for reference, too slow for CI.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        let hidden = 1024;
        c.preset = Preset::Paper;
        c.model.hidden = hidden;
        c.model.heads = 8;
        c.policy.hidden_width = 4 * hidden;
        c.policy.obs_width = hidden;
        c.stage1.steps = 25_000;
        c.stage1.batch_size = 128;
        c.stage2.steps = 200_000;
        c.stage2.batch_size = 128;
        c
    }

    /// Tiny dimensions and step counts for quick checks and examples.
    pub fn smoke() -> Self {
        let mut c = Self::desk();
        c.model.hidden = 8;
        c.model.n_proprio_tokens = 2;
        c.model.n_semantic_tokens = 2;
        c.model.tau = 2;
        c.model.visual_dim = 4;
        c.model.task_dim = 3;
        c.model.heads = 2;
        c.policy.hidden_width = 16;
        c.policy.obs_width = 8;
        c.policy.time_embed_dim = 8;
        c.policy.chunk_execute = 2;
        c.ddpm.k = 10;
        c.ddpm.beta_end = 0.3;
        c.stage1.steps = 5;
        c.stage1.batch_size = 8;
        c.stage2.steps = 5;
        c.stage2.batch_size = 8;
        c.eval.rollouts = 2;
        c.data.episodes_per_task = 1;
        c
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    /// Applies one `dotted.key=value` override. The value is parsed as a
    /// TOML literal, falling back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        let mut root = toml::Value::try_from(&*self).expect("config is always serializable");
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_table_mut()
                .and_then(|t| t.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        *slot = value;
        let updated: Self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("`{key}`: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("unsupported config version {}", self.version));
        }
        let m = &self.model;
        if m.hidden == 0 || m.heads == 0 || m.hidden % m.heads != 0 {
            return bad(format!("hidden {} not divisible by heads {}", m.hidden, m.heads));
        }
        if m.tau == 0 || m.n_proprio_tokens == 0 || m.n_semantic_tokens == 0 {
            return bad("token counts and tau must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.mask.ratio)
            || self.mask.curriculum.iter().any(|c| !(0.0..=1.0).contains(&c.ratio))
        {
            return bad("mask ratios must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.ema.momentum) {
            return bad(format!("ema.momentum {} outside [0, 1]", self.ema.momentum));
        }
        let d = &self.ddpm;
        if d.k == 0 || !(0.0 < d.beta_start && d.beta_start <= d.beta_end && d.beta_end < 1.0) {
            return bad(format!(
                "ddpm needs K >= 1 and 0 < beta_start <= beta_end < 1, got K={} [{}, {}]",
                d.k, d.beta_start, d.beta_end
            ));
        }
        if !(1..=m.tau).contains(&self.policy.chunk_execute) {
            return bad(format!(
                "policy.chunk_execute {} outside [1, {}]",
                self.policy.chunk_execute, m.tau
            ));
        }
        if self.stage1.batch_size == 0 || self.stage2.batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.data.tasks.iter().any(|&t| t >= crate::sim::TASK_COUNT) {
            return bad(format!("data.tasks {:?} has an unknown task", self.data.tasks));
        }
        Ok(())
    }
}
