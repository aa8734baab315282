//! Expert datasets on disk, the embedded in-memory view, and batching.
//!
//! Layout: `manifest.json` plus one `episode_NNNNN.bin` per episode. Each
//! episode file holds `EPISODE_STEPS` records of little-endian `f32`
//! values (`proprio[6]`, `image[64*64]`, `action[2]`) followed by one
//! success byte.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::diffusion::ActionNorm;
use crate::encoders::Backbone;
use crate::error::{Error, Result};
use crate::model::{Stage1Batch, TransitionBatch};
use crate::sim::{
    record_expert_episode, EpisodeRecord, StepRecord, Task, ACTION_DIM, EPISODE_STEPS, IMAGE_PIXELS, IMAGE_SIDE,
    PROPRIO_DIM,
};

pub const DATASET_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
const STEP_FLOATS: usize = PROPRIO_DIM + IMAGE_PIXELS + ACTION_DIM;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeEntry {
    pub file: String,
    pub task_id: usize,
    pub seed: u64,
    pub success: bool,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub tasks: Vec<usize>,
    pub episodes_per_task: usize,
    pub episode_steps: usize,
    pub image_side: usize,
    pub proprio_dim: usize,
    pub action_dim: usize,
    pub episodes: Vec<EpisodeEntry>,
}

pub fn encode_episode(ep: &EpisodeRecord) -> Vec<u8> {
    let mut out = Vec::with_capacity(ep.steps.len() * STEP_FLOATS * 4 + 1);
    for s in &ep.steps {
        for x in s.proprio.iter().chain(&s.image).chain(&s.action) {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out.push(u8::from(ep.success));
    out
}

pub fn decode_episode(bytes: &[u8], task_id: usize, seed: u64) -> Result<EpisodeRecord> {
    if bytes.len() != EPISODE_STEPS * STEP_FLOATS * 4 + 1 {
        return Err(Error::Dataset(format!("episode has {} bytes", bytes.len())));
    }
    let floats: Vec<f32> = bytes[..bytes.len() - 1]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let steps = floats
        .chunks_exact(STEP_FLOATS)
        .map(|c| StepRecord {
            proprio: c[..PROPRIO_DIM].try_into().expect("proprio width"),
            image: c[PROPRIO_DIM..PROPRIO_DIM + IMAGE_PIXELS].to_vec(),
            action: c[PROPRIO_DIM + IMAGE_PIXELS..].try_into().expect("action width"),
        })
        .collect();
    let success = match bytes[bytes.len() - 1] {
        0 => false,
        1 => true,
        b => return Err(Error::Dataset(format!("bad success flag {b}"))),
    };
    Ok(EpisodeRecord {
        task_id,
        seed,
        steps,
        success,
    })
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Records `episodes_per_task` expert episodes per task. Episode `i` in
/// generation order uses seed `seed + i`. Refuses a non-empty target
/// directory unless `force`.
pub fn generate(out: &Path, tasks: &[usize], episodes_per_task: usize, seed: u64, force: bool) -> Result<Manifest> {
    if tasks.is_empty() || episodes_per_task == 0 {
        return Err(Error::Precondition("need at least one task and one episode".into()));
    }
    let tasks_parsed = tasks.iter().map(|&t| Task::from_id(t)).collect::<Result<Vec<_>>>()?;
    if out.exists() && fs::read_dir(out)?.next().is_some() && !force {
        return Err(Error::Precondition(format!(
            "{} is not empty; pass force to overwrite",
            out.display()
        )));
    }
    fs::create_dir_all(out)?;
    let mut episodes = Vec::with_capacity(tasks.len() * episodes_per_task);
    for (ti, task) in tasks_parsed.iter().enumerate() {
        for i in 0..episodes_per_task {
            let index = ti * episodes_per_task + i;
            let ep_seed = seed + index as u64;
            let ep = record_expert_episode(*task, ep_seed)?;
            let bytes = encode_episode(&ep);
            let file = format!("episode_{index:05}.bin");
            fs::write(out.join(&file), &bytes)?;
            episodes.push(EpisodeEntry {
                file,
                task_id: task.id(),
                seed: ep_seed,
                success: ep.success,
                sha256: sha256_hex(&bytes),
            });
        }
    }
    let manifest = Manifest {
        version: DATASET_VERSION,
        seed,
        tasks: tasks.to_vec(),
        episodes_per_task,
        episode_steps: EPISODE_STEPS,
        image_side: IMAGE_SIDE,
        proprio_dim: PROPRIO_DIM,
        action_dim: ACTION_DIM,
        episodes,
    };
    let mut w = BufWriter::new(fs::File::create(out.join(MANIFEST))?);
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::Precondition(format!("no dataset manifest at {}", path.display())));
    }
    let m: Manifest = serde_json::from_slice(&fs::read(&path)?)?;
    if m.version != DATASET_VERSION
        || m.episode_steps != EPISODE_STEPS
        || m.image_side != IMAGE_SIDE
        || m.proprio_dim != PROPRIO_DIM
        || m.action_dim != ACTION_DIM
    {
        return Err(Error::Dataset(format!("incompatible manifest in {}", dir.display())));
    }
    Ok(m)
}

/// Reads and checksum-verifies every episode, handing each to `visit`.
pub fn for_each_episode(dir: &Path, mut visit: impl FnMut(&EpisodeEntry, EpisodeRecord) -> Result<()>) -> Result<Manifest> {
    let m = read_manifest(dir)?;
    for e in &m.episodes {
        let bytes = fs::read(dir.join(&e.file))?;
        let digest = sha256_hex(&bytes);
        if digest != e.sha256 {
            return Err(Error::Dataset(format!("checksum mismatch for {}", e.file)));
        }
        visit(e, decode_episode(&bytes, e.task_id, e.seed)?)?;
    }
    Ok(m)
}

/// One episode with images replaced by frozen backbone embeddings.
#[derive(Clone, Debug)]
pub struct EmbeddedEpisode {
    pub task_id: usize,
    pub seed: u64,
    pub success: bool,
    /// `T x 6`.
    pub proprio: Tensor,
    /// `T x D_v`.
    pub visual: Tensor,
    /// `T x 2`.
    pub actions: Tensor,
}

impl EmbeddedEpisode {
    pub fn from_record(ep: &EpisodeRecord, backbone: &Backbone) -> Result<Self> {
        let t = ep.steps.len();
        let mut visual = Array2::zeros((t, backbone.out_dim()));
        for (i, s) in ep.steps.iter().enumerate() {
            let v = backbone.embed(&s.image)?;
            visual.row_mut(i).assign(&ndarray::ArrayView1::from(&v));
        }
        Ok(Self {
            task_id: ep.task_id,
            seed: ep.seed,
            success: ep.success,
            proprio: Array2::from_shape_fn((t, PROPRIO_DIM), |(i, d)| f64::from(ep.steps[i].proprio[d])),
            visual,
            actions: Array2::from_shape_fn((t, ACTION_DIM), |(i, d)| f64::from(ep.steps[i].action[d])),
        })
    }

    pub fn len(&self) -> usize {
        self.proprio.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Steps up to and including the last non-zero action.
    pub fn active_len(&self) -> usize {
        self.actions
            .outer_iter()
            .rposition(|a| a.iter().any(|&x| x != 0.0))
            .map_or(0, |i| i + 1)
    }

    /// Drops the idle tail, keeping `keep` steps past the last non-zero action.
    pub fn trim_idle_tail(&self, keep: usize) -> Self {
        let end = (self.active_len() + keep).min(self.len());
        let s = ndarray::s![..end, ..];
        Self {
            proprio: self.proprio.slice(s).to_owned(),
            visual: self.visual.slice(s).to_owned(),
            actions: self.actions.slice(s).to_owned(),
            ..self.clone()
        }
    }
}

/// Which window constraint a sample must satisfy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Needs `t - tau`, `t` and the future state `t + tau`.
    Dynamics,
    /// Needs `t - tau`, `t` and the actions `t .. t + tau`.
    Policy,
    /// Like `Policy`, but anchors before `tau` are allowed. Their past is
    /// padded the way a fresh rollout pads it: the first state repeats and
    /// missing actions are zero.
    PolicyPadded,
}

/// Valid anchor steps `t` within an episode of length `len`.
pub fn valid_range(stage: Stage, len: usize, tau: usize) -> std::ops::RangeInclusive<usize> {
    let (first, last) = match stage {
        Stage::Dynamics => (tau, len.checked_sub(tau + 1)),
        Stage::Policy => (tau, len.checked_sub(tau)),
        Stage::PolicyPadded => (0, len.checked_sub(tau)),
    };
    match last {
        Some(last) if last >= first => first..=last,
        #[allow(clippy::reversed_empty_ranges)]
        _ => 1..=0,
    }
}

#[derive(Clone, Debug)]
pub struct EmbeddedDataset {
    pub path: PathBuf,
    pub manifest: Manifest,
    pub episodes: Vec<EmbeddedEpisode>,
    pub backbone_hash: String,
}

impl EmbeddedDataset {
    pub fn load(dir: &Path, backbone: &Backbone) -> Result<Self> {
        let mut episodes = Vec::new();
        let manifest = for_each_episode(dir, |_, ep| {
            episodes.push(EmbeddedEpisode::from_record(&ep, backbone)?);
            Ok(())
        })?;
        Ok(Self {
            path: dir.to_path_buf(),
            manifest,
            episodes,
            backbone_hash: backbone.hash(),
        })
    }

    /// Restricts to the listed tasks, keeping episode order.
    pub fn filter_tasks(&self, tasks: &[usize]) -> Self {
        let mut out = self.clone();
        out.episodes.retain(|e| tasks.contains(&e.task_id));
        out
    }

    /// Applies `EmbeddedEpisode::trim_idle_tail` to every episode.
    pub fn trim_idle_tails(&self, keep: usize) -> Self {
        Self {
            episodes: self.episodes.iter().map(|e| e.trim_idle_tail(keep)).collect(),
            ..self.clone()
        }
    }

    /// Keeps at most `n` episodes per task.
    pub fn limit_per_task(&self, n: usize) -> Self {
        let mut out = self.clone();
        let mut seen = std::collections::BTreeMap::<usize, usize>::new();
        out.episodes.retain(|e| {
            let c = seen.entry(e.task_id).or_default();
            *c += 1;
            *c <= n
        });
        out
    }

    pub fn action_norm(&self) -> ActionNorm {
        let acts: Vec<[f64; ACTION_DIM]> = self
            .episodes
            .iter()
            .flat_map(|e| e.actions.outer_iter().map(|r| [r[0], r[1]]).collect::<Vec<_>>())
            .collect();
        ActionNorm::fit(acts.iter())
    }

    /// Every valid `(episode, t)` pair in order.
    pub fn windows(&self, stage: Stage, tau: usize) -> Vec<(usize, usize)> {
        self.episodes
            .iter()
            .enumerate()
            .flat_map(|(e, ep)| valid_range(stage, ep.len(), tau).map(move |t| (e, t)))
            .collect()
    }

    /// Uniform draws over valid `(episode, t)` pairs.
    pub fn sample_indices(&self, stage: Stage, tau: usize, batch: usize, rng: &mut impl Rng) -> Result<Vec<(usize, usize)>> {
        if batch == 0 {
            return Err(Error::Precondition("batch size must be at least 1".into()));
        }
        let ranges: Vec<_> = self.episodes.iter().map(|e| valid_range(stage, e.len(), tau)).collect();
        let counts: Vec<usize> = ranges.iter().map(|r| r.clone().count()).collect();
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(Error::Dataset("no valid sample windows".into()));
        }
        Ok((0..batch)
            .map(|_| {
                let mut j = rng.random_range(0..total);
                let mut e = 0;
                while j >= counts[e] {
                    j -= counts[e];
                    e += 1;
                }
                (e, ranges[e].start() + j)
            })
            .collect())
    }

    /// Past/current inputs for the listed anchors. Anchors before `tau` get
    /// the rollout padding of `Stage::PolicyPadded`.
    pub fn transitions(&self, idx: &[(usize, usize)], tau: usize) -> TransitionBatch {
        let b = idx.len();
        let dv = self.episodes[0].visual.ncols();
        let mut x = TransitionBatch {
            p_past: Tensor::zeros((b, PROPRIO_DIM)),
            v_past: Tensor::zeros((b, dv)),
            p_curr: Tensor::zeros((b, PROPRIO_DIM)),
            v_curr: Tensor::zeros((b, dv)),
            actions: Tensor::zeros((b * tau, ACTION_DIM)),
            tasks: Vec::with_capacity(b),
        };
        for (r, &(e, t)) in idx.iter().enumerate() {
            let ep = &self.episodes[e];
            let past = t.saturating_sub(tau);
            x.p_past.row_mut(r).assign(&ep.proprio.row(past));
            x.v_past.row_mut(r).assign(&ep.visual.row(past));
            x.p_curr.row_mut(r).assign(&ep.proprio.row(t));
            x.v_curr.row_mut(r).assign(&ep.visual.row(t));
            for j in 0..tau {
                if let Some(k) = (t + j).checked_sub(tau) {
                    x.actions.row_mut(r * tau + j).assign(&ep.actions.row(k));
                }
            }
            x.tasks.push(ep.task_id);
        }
        x
    }

    pub fn stage1_batch(&self, idx: &[(usize, usize)], tau: usize) -> Stage1Batch {
        let x = self.transitions(idx, tau);
        let dv = x.v_curr.ncols();
        let mut p_future = Tensor::zeros((idx.len(), PROPRIO_DIM));
        let mut v_future = Tensor::zeros((idx.len(), dv));
        for (r, &(e, t)) in idx.iter().enumerate() {
            p_future.row_mut(r).assign(&self.episodes[e].proprio.row(t + tau));
            v_future.row_mut(r).assign(&self.episodes[e].visual.row(t + tau));
        }
        Stage1Batch { x, p_future, v_future }
    }

    /// Normalized action chunks `a^{t : t + tau}` flattened to `tau * 2`.
    pub fn action_chunks(&self, idx: &[(usize, usize)], tau: usize, norm: &ActionNorm) -> Tensor {
        Tensor::from_shape_fn((idx.len(), tau * ACTION_DIM), |(r, c)| {
            let (e, t) = idx[r];
            let d = c % ACTION_DIM;
            norm.normalize(self.episodes[e].actions[[t + c / ACTION_DIM, d]], d)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn window_counts() {
        assert_eq!(valid_range(Stage::Policy, 120, 6).count(), 109);
        assert_eq!(valid_range(Stage::Dynamics, 120, 6).count(), 108);
        assert_eq!(*valid_range(Stage::Dynamics, 120, 6).end(), 113);
        assert_eq!(valid_range(Stage::Dynamics, 12, 6).count(), 0);
        assert_eq!(valid_range(Stage::Policy, 12, 6).count(), 1);
        assert_eq!(valid_range(Stage::PolicyPadded, 120, 6), 0..=114);
        assert_eq!(valid_range(Stage::PolicyPadded, 5, 6).count(), 0);
    }

    #[test]
    fn episode_codec_round_trip() {
        let ep = record_expert_episode(Task::Reach, 3).unwrap();
        let bytes = encode_episode(&ep);
        assert_eq!(decode_episode(&bytes, 0, 3).unwrap(), ep);
        assert!(decode_episode(&bytes[1..], 0, 3).is_err());
    }

    #[test]
    fn generation_is_reproducible_and_guarded() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = generate(a.path(), &[0, 2], 2, 40, false).unwrap();
        let mb = generate(b.path(), &[0, 2], 2, 40, false).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(ma.episodes.iter().map(|e| e.seed).collect::<Vec<_>>(), vec![40, 41, 42, 43]);
        for e in &ma.episodes {
            assert_eq!(fs::read(a.path().join(&e.file)).unwrap(), fs::read(b.path().join(&e.file)).unwrap());
        }
        assert_eq!(fs::read(a.path().join(MANIFEST)).unwrap(), fs::read(b.path().join(MANIFEST)).unwrap());
        assert!(matches!(generate(a.path(), &[0], 1, 0, false), Err(Error::Precondition(_))));
        assert!(generate(a.path(), &[5], 1, 0, true).is_err());

        // Corruption is caught.
        let f = a.path().join(&ma.episodes[1].file);
        let mut bytes = fs::read(&f).unwrap();
        bytes[10] ^= 1;
        fs::write(&f, bytes).unwrap();
        assert!(matches!(for_each_episode(a.path(), |_, _| Ok(())), Err(Error::Dataset(_))));
        assert!(matches!(read_manifest(Path::new("/nonexistent/clad")), Err(Error::Precondition(_))));
    }

    fn tiny_dataset() -> EmbeddedDataset {
        let backbone = Backbone::new(1, 4);
        let dir = tempfile::tempdir().unwrap();
        generate(dir.path(), &[0, 1], 2, 7, false).unwrap();
        EmbeddedDataset::load(dir.path(), &backbone).unwrap()
    }

    #[test]
    fn batches_follow_episodes() {
        let ds = tiny_dataset();
        let tau = 6;
        let idx = [(1, 6), (3, 113)];
        let b = ds.stage1_batch(&idx, tau);
        assert_eq!(b.x.p_past.row(0), ds.episodes[1].proprio.row(0));
        assert_eq!(b.x.p_curr.row(1), ds.episodes[3].proprio.row(113));
        assert_eq!(b.p_future.row(1), ds.episodes[3].proprio.row(119));
        assert_eq!(b.x.actions.row(tau + 5), ds.episodes[3].actions.row(112));
        assert_eq!(b.x.tasks, vec![0, 1]);
        let norm = ds.action_norm();
        let chunks = ds.action_chunks(&[(0, 114)], tau, &norm);
        assert_eq!(chunks.ncols(), 12);
        assert!((norm.denormalize(chunks[[0, 11]], 1) - ds.episodes[0].actions[[119, 1]]).abs() < 1e-12);
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            ds.sample_indices(Stage::Policy, tau, 16, &mut r1).unwrap(),
            ds.sample_indices(Stage::Policy, tau, 16, &mut r2).unwrap()
        );
        assert!(ds.sample_indices(Stage::Policy, 61, 4, &mut r1).is_err());
        assert!(ds.sample_indices(Stage::Policy, tau, 0, &mut r1).is_err());

        // Early anchors repeat the first state and zero the missing actions.
        let x = ds.transitions(&[(2, 2)], tau);
        assert_eq!(x.p_past.row(0), ds.episodes[2].proprio.row(0));
        assert_eq!(x.v_past.row(0), ds.episodes[2].visual.row(0));
        for j in 0..4 {
            assert!(x.actions.row(j).iter().all(|&a| a == 0.0));
        }
        assert_eq!(x.actions.row(4), ds.episodes[2].actions.row(0));
        assert_eq!(x.actions.row(5), ds.episodes[2].actions.row(1));

        let trimmed = ds.trim_idle_tails(tau);
        for (a, b) in ds.episodes.iter().zip(&trimmed.episodes) {
            let active = a.active_len();
            assert_eq!(b.len(), (active + tau).min(a.len()));
            assert_eq!(b.active_len(), active);
            assert!(a.actions.slice(ndarray::s![active.., ..]).iter().all(|&x| x == 0.0));
            assert_eq!(b.proprio, a.proprio.slice(ndarray::s![..b.len(), ..]));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn sampled_windows_are_valid(seed in any::<u64>(), tau in 1usize..12) {
            let lens = [120usize, 120, 120];
            let ds = EmbeddedDataset {
                path: PathBuf::new(),
                manifest: Manifest {
                    version: 1, seed: 0, tasks: vec![0], episodes_per_task: 3, episode_steps: 120,
                    image_side: IMAGE_SIDE, proprio_dim: 6, action_dim: 2, episodes: vec![],
                },
                episodes: lens.iter().map(|&t| EmbeddedEpisode {
                    task_id: 0, seed: 0, success: true,
                    proprio: Tensor::zeros((t, 6)), visual: Tensor::zeros((t, 4)), actions: Tensor::zeros((t, 2)),
                }).collect(),
                backbone_hash: String::new(),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for stage in [Stage::Dynamics, Stage::Policy, Stage::PolicyPadded] {
                let idx = ds.sample_indices(stage, tau, 10_000, &mut rng).unwrap();
                for &(e, t) in &idx {
                    prop_assert!(e < 3);
                    match stage {
                        Stage::Dynamics => prop_assert!(t >= tau && t + tau < 120),
                        Stage::Policy => prop_assert!(t >= tau && t + tau <= 120),
                        Stage::PolicyPadded => prop_assert!(t + tau <= 120),
                    }
                }
                if stage == Stage::PolicyPadded {
                    prop_assert!(idx.iter().any(|&(_, t)| t < tau));
                }
            }
        }
    }
}
