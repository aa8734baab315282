//! Closed-loop evaluation, the ablation grid and representation
//! diagnostics.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::config::{AttentionDirection, CurriculumStage, ForesightSlots, RunConfig};
use crate::data::{EmbeddedDataset, Stage};
use crate::diffusion::sample_actions;
use crate::encoders::Backbone;
use crate::error::{Error, Result};
use crate::foresight::make_targets;
use crate::model::{Stage1Model, TransitionBatch};
use crate::sim::{render, scripted_expert, Task, WorldState, ACTION_DIM, DT, EPISODE_STEPS, PROPRIO_DIM};
use crate::training::{train_stage1, train_stage2, PolicyBundle, RunDir};

const ROLLOUT_STREAM: u64 = 0x0011_0a7;

/// Batched closed-loop controller. `act` receives every world and the
/// indices still running, and returns one action per listed index.
pub trait Controller {
    fn reset(&mut self, worlds: &[WorldState], seeds: &[u64]) -> Result<()>;
    fn act(&mut self, worlds: &[WorldState], active: &[usize]) -> Result<Vec<[f64; 2]>>;
}

/// The scripted expert behind the controller interface.
#[derive(Clone, Copy, Debug, Default)]
pub struct ExpertController;

impl Controller for ExpertController {
    fn reset(&mut self, _worlds: &[WorldState], _seeds: &[u64]) -> Result<()> {
        Ok(())
    }

    fn act(&mut self, worlds: &[WorldState], active: &[usize]) -> Result<Vec<[f64; 2]>> {
        active.iter().map(|&i| scripted_expert(&worlds[i])).collect()
    }
}

#[derive(Clone, Debug)]
struct RolloutMemory {
    rng: ChaCha8Rng,
    proprio: Vec<[f64; PROPRIO_DIM]>,
    visual: Vec<Vec<f64>>,
    actions: Vec<[f64; ACTION_DIM]>,
    queue: VecDeque<[f64; ACTION_DIM]>,
}

/// Receding-horizon policy execution: sample a chunk, run the first
/// `chunk_execute` actions, then replan. Before `tau` steps of history
/// exist, the past state is the initial state and missing past actions
/// are zero.
pub struct PolicyController<'a> {
    pub bundle: &'a PolicyBundle,
    pub backbone: Backbone,
    memory: Vec<RolloutMemory>,
}

impl<'a> PolicyController<'a> {
    pub fn new(bundle: &'a PolicyBundle) -> Self {
        let m = &bundle.config.model;
        Self {
            bundle,
            backbone: Backbone::new(m.backbone_seed, m.visual_dim),
            memory: Vec::new(),
        }
    }

    fn plan(&mut self, worlds: &[WorldState], rows: &[usize]) -> Result<()> {
        let tau = self.bundle.policy.tau;
        let dv = self.backbone.out_dim();
        let b = rows.len();
        let mut x = TransitionBatch {
            p_past: Tensor::zeros((b, PROPRIO_DIM)),
            v_past: Tensor::zeros((b, dv)),
            p_curr: Tensor::zeros((b, PROPRIO_DIM)),
            v_curr: Tensor::zeros((b, dv)),
            actions: Tensor::zeros((b * tau, ACTION_DIM)),
            tasks: Vec::with_capacity(b),
        };
        for (r, &i) in rows.iter().enumerate() {
            let mem = &self.memory[i];
            let t = mem.proprio.len() - 1;
            let past = t.saturating_sub(tau);
            let row = |v: &[f64]| ndarray::ArrayView1::from(v).to_owned();
            x.p_past.row_mut(r).assign(&row(&mem.proprio[past]));
            x.v_past.row_mut(r).assign(&row(&mem.visual[past]));
            x.p_curr.row_mut(r).assign(&row(&mem.proprio[t]));
            x.v_curr.row_mut(r).assign(&row(&mem.visual[t]));
            for k in 0..tau {
                if let Some(j) = (t + k).checked_sub(tau) {
                    x.actions.row_mut(r * tau + k).assign(&row(&mem.actions[j]));
                }
            }
            x.tasks.push(worlds[i].task.id());
        }
        let policy = &self.bundle.policy;
        let z_hat = if policy.cfg.no_foresight {
            Tensor::zeros((b, policy.foresight_dim))
        } else {
            self.bundle.stage1.foresight(&x)?.0
        };
        let cond = policy.condition_values(&x.p_curr, &x.v_curr, &x.tasks, &z_hat)?;
        let mut rngs: Vec<ChaCha8Rng> = rows.iter().map(|&i| self.memory[i].rng.clone()).collect();
        let chunks = sample_actions(policy, &self.bundle.schedule, &self.bundle.norm, &cond, policy.chunk_dim(), &mut rngs);
        let execute = self.bundle.config.policy.chunk_execute;
        for ((r, &i), rng) in rows.iter().enumerate().zip(rngs) {
            let mem = &mut self.memory[i];
            mem.rng = rng;
            for k in 0..execute {
                mem.queue.push_back([chunks[[r, 2 * k]], chunks[[r, 2 * k + 1]]]);
            }
        }
        Ok(())
    }
}

impl Controller for PolicyController<'_> {
    fn reset(&mut self, worlds: &[WorldState], seeds: &[u64]) -> Result<()> {
        self.memory = seeds
            .iter()
            .take(worlds.len())
            .map(|&s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                rng.set_stream(ROLLOUT_STREAM);
                RolloutMemory {
                    rng,
                    proprio: Vec::new(),
                    visual: Vec::new(),
                    actions: Vec::new(),
                    queue: VecDeque::new(),
                }
            })
            .collect();
        Ok(())
    }

    fn act(&mut self, worlds: &[WorldState], active: &[usize]) -> Result<Vec<[f64; 2]>> {
        for &i in active {
            // Observations go through the same f32 rounding as recorded data.
            let p = worlds[i].arm.proprio().map(|x| f64::from(x as f32));
            let v = self.backbone.embed(&render(&worlds[i]))?;
            let mem = &mut self.memory[i];
            mem.proprio.push(p);
            mem.visual.push(v);
        }
        let need: Vec<usize> = active.iter().copied().filter(|&i| self.memory[i].queue.is_empty()).collect();
        if !need.is_empty() {
            self.plan(worlds, &need)?;
        }
        Ok(active
            .iter()
            .map(|&i| {
                let mem = &mut self.memory[i];
                let a = mem.queue.pop_front().expect("planned chunk");
                let a = a.map(|x| f64::from(x as f32));
                mem.actions.push(a);
                a
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub index: usize,
    pub seed: u64,
    pub success: bool,
    /// Environment steps until the success predicate first held.
    pub steps: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutReport {
    pub task_id: usize,
    pub n_rollouts: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_steps_to_success: Option<f64>,
    pub seed: u64,
    pub records: Vec<RolloutRecord>,
}

impl RolloutReport {
    pub fn from_records(task_id: usize, seed: u64, records: Vec<RolloutRecord>) -> Self {
        let n = records.len();
        let steps: Vec<usize> = records.iter().filter_map(|r| r.steps).collect();
        Self {
            task_id,
            n_rollouts: n,
            successes: steps.len(),
            success_rate: steps.len() as f64 / n.max(1) as f64,
            mean_steps_to_success: (!steps.is_empty()).then(|| steps.iter().sum::<usize>() as f64 / steps.len() as f64),
            seed,
            records,
        }
    }

    /// Writes one JSON line per rollout.
    pub fn write_records(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Runs `n` episodes with seeds `seed + i` in lockstep.
pub fn evaluate(controller: &mut dyn Controller, task: Task, n: usize, seed: u64) -> Result<RolloutReport> {
    let seeds: Vec<u64> = (0..n as u64).map(|i| seed + i).collect();
    let mut worlds: Vec<WorldState> = seeds.iter().map(|&s| task.initial_world(s)).collect();
    let mut steps: Vec<Option<usize>> = worlds.iter().map(|w| w.is_success().then_some(0)).collect();
    controller.reset(&worlds, &seeds)?;
    for t in 0..EPISODE_STEPS {
        let active: Vec<usize> = (0..n).filter(|&i| steps[i].is_none()).collect();
        if active.is_empty() {
            break;
        }
        let actions = controller.act(&worlds, &active)?;
        for (&i, a) in active.iter().zip(actions) {
            worlds[i] = worlds[i].step(a, DT);
            if worlds[i].is_success() {
                steps[i] = Some(t + 1);
            }
        }
    }
    let records = seeds
        .iter()
        .zip(steps)
        .enumerate()
        .map(|(index, (&seed, steps))| RolloutRecord {
            index,
            seed,
            success: steps.is_some(),
            steps,
        })
        .collect();
    Ok(RolloutReport::from_records(task.id(), seed, records))
}

/// Named configuration delta.
#[derive(Clone, Copy)]
pub struct Variant {
    pub name: &'static str,
    pub delta: &'static str,
    pub apply: fn(&mut RunConfig),
}

pub const VARIANTS: [Variant; 11] = [
    Variant { name: "full", delta: "none", apply: |_| {} },
    Variant { name: "policy_only", delta: "policy.no_foresight=true", apply: |c| c.policy.no_foresight = true },
    Variant {
        name: "proprio_foresight_only",
        delta: "policy.foresight_slots=proprio_only",
        apply: |c| c.policy.foresight_slots = ForesightSlots::ProprioOnly,
    },
    Variant {
        name: "semantic_foresight_only",
        delta: "policy.foresight_slots=semantic_only",
        apply: |c| c.policy.foresight_slots = ForesightSlots::SemanticOnly,
    },
    Variant { name: "no_recon", delta: "loss.lambda_recon=0", apply: |c| c.loss.lambda_recon = 0.0 },
    Variant {
        name: "s_queries_p",
        delta: "attention.direction=s_queries_p",
        apply: |c| c.attention.direction = AttentionDirection::SQueriesP,
    },
    Variant {
        name: "symmetric_self",
        delta: "attention.direction=symmetric_self",
        apply: |c| c.attention.direction = AttentionDirection::SymmetricSelf,
    },
    Variant { name: "mask_0.3", delta: "mask.ratio=0.3", apply: |c| c.mask.ratio = 0.3 },
    Variant { name: "mask_0.9", delta: "mask.ratio=0.9", apply: |c| c.mask.ratio = 0.9 },
    Variant { name: "action_free", delta: "mask.ratio=1", apply: |c| c.mask.ratio = 1.0 },
    Variant {
        name: "curriculum",
        delta: "mask.curriculum=[r=1 then r=0.3 from half]",
        apply: |c| {
            c.mask.ratio = 1.0;
            c.mask.curriculum = vec![CurriculumStage {
                from_step: c.stage1.steps / 2,
                ratio: 0.3,
            }];
        },
    },
];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub delta: String,
    pub parameters: usize,
    pub reports: Vec<RolloutReport>,
    pub error: Option<String>,
}

impl AblationRow {
    pub fn mean_success(&self) -> Option<f64> {
        (!self.reports.is_empty())
            .then(|| self.reports.iter().map(|r| r.success_rate).sum::<f64>() / self.reports.len() as f64)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationGrid {
    pub rows: Vec<AblationRow>,
}

impl AblationGrid {
    pub fn render_table(&self) -> String {
        let mut tasks: Vec<usize> = self.rows.iter().flat_map(|r| r.reports.iter().map(|x| x.task_id)).collect();
        tasks.sort_unstable();
        tasks.dedup();
        let mut s = String::from("| variant | delta | params |");
        for t in &tasks {
            let _ = write!(s, " T{t} SR |");
        }
        s.push_str(" mean SR |\n|---|---|---|");
        for _ in &tasks {
            s.push_str("---|");
        }
        s.push_str("---|\n");
        for r in &self.rows {
            let _ = write!(s, "| {} | {} | {} |", r.name, r.delta, r.parameters);
            for t in &tasks {
                match r.reports.iter().find(|x| x.task_id == *t) {
                    Some(x) => {
                        let _ = write!(s, " {:.1} |", 100.0 * x.success_rate);
                    }
                    None => s.push_str(" - |"),
                }
            }
            match (&r.error, r.mean_success()) {
                (Some(e), _) => {
                    let _ = writeln!(s, " failed: {e} |");
                }
                (None, Some(m)) => {
                    let _ = writeln!(s, " {:.1} |", 100.0 * m);
                }
                (None, None) => s.push_str(" - |\n"),
            }
        }
        s
    }
}

/// Key of everything the dynamics stage depends on, to share its training
/// between variants that only change the policy.
fn stage1_key(c: &RunConfig) -> String {
    serde_json::json!([c.seed, c.pool, c.model, c.attention, c.mask, c.loss, c.ema, c.optim, c.stage1]).to_string()
}

/// Trains and evaluates every variant on `tasks`. Variant failures are
/// recorded and the grid continues.
pub fn run_ablations(
    base: &RunConfig,
    data: &EmbeddedDataset,
    tasks: &[usize],
    variants: &[Variant],
    out: Option<&Path>,
) -> Result<AblationGrid> {
    let mut stage1_cache: BTreeMap<String, Stage1Model> = BTreeMap::new();
    let mut rows = Vec::new();
    for v in variants {
        let mut cfg = base.clone();
        (v.apply)(&mut cfg);
        let dir = out.map(|o| RunDir(o.join(v.name)));
        let result = (|| -> Result<(usize, Vec<RolloutReport>)> {
            cfg.validate()?;
            let key = stage1_key(&cfg);
            if !stage1_cache.contains_key(&key) {
                let s1 = train_stage1(&cfg, data, dir.as_ref())?;
                stage1_cache.insert(key.clone(), s1.model);
            }
            let s1 = &stage1_cache[&key];
            let s2 = train_stage2(&cfg, s1, data, dir.as_ref())?;
            let params = s2.bundle.policy.params.num_scalars() + s1.params.num_scalars();
            let mut reports = Vec::new();
            for &t in tasks {
                let mut ctl = PolicyController::new(&s2.bundle);
                let r = evaluate(&mut ctl, Task::from_id(t)?, cfg.eval.rollouts, cfg.eval.seed)?;
                if let Some(d) = &dir {
                    r.write_records(&d.0.join(format!("rollouts_task{t}.jsonl")))?;
                }
                reports.push(r);
            }
            Ok((params, reports))
        })();
        rows.push(match result {
            Ok((parameters, reports)) => AblationRow {
                name: v.name.into(),
                delta: v.delta.into(),
                parameters,
                reports,
                error: None,
            },
            Err(e) => AblationRow {
                name: v.name.into(),
                delta: v.delta.into(),
                parameters: 0,
                reports: Vec::new(),
                error: Some(e.to_string()),
            },
        });
    }
    Ok(AblationGrid { rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaPoint {
    pub x: f64,
    pub y: f64,
    pub task: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub samples_per_task: usize,
    pub std_target_p: Vec<f64>,
    pub std_target_s: Vec<f64>,
    pub min_std_target_p: f64,
    pub min_std_target_s: f64,
    /// Over distinct pairs of semantic foresight vectors.
    pub mean_pairwise_cos_zhat_s: f64,
    pub intra_task_cos: f64,
    pub inter_task_cos: f64,
    /// `None` when the embeddings are degenerate.
    pub silhouette: Option<f64>,
    pub collapse_alarm: bool,
    pub pca: Vec<PcaPoint>,
}

pub const COLLAPSE_STD: f64 = 1e-3;
pub const COLLAPSE_COS: f64 = 0.99;

fn cosine(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    let d = a.dot(&b);
    let n = (a.dot(&a) * b.dot(&b)).sqrt();
    if n > 0.0 {
        d / n
    } else {
        1.0
    }
}

pub fn column_std(x: &Tensor) -> Vec<f64> {
    x.std_axis(ndarray::Axis(0), 0.0).to_vec()
}

/// Mean cosine over pairs `i < j`, split by label agreement when labels
/// are given: returns `(all, same, different)`.
pub fn pairwise_cosines(x: &Tensor, labels: &[usize]) -> (f64, f64, f64) {
    let n = x.nrows();
    let (mut all, mut same, mut diff) = ((0.0, 0usize), (0.0, 0usize), (0.0, 0usize));
    for i in 0..n {
        for j in i + 1..n {
            let c = cosine(x.row(i), x.row(j));
            all.0 += c;
            all.1 += 1;
            let bucket = if labels[i] == labels[j] { &mut same } else { &mut diff };
            bucket.0 += c;
            bucket.1 += 1;
        }
    }
    let mean = |(s, n): (f64, usize)| if n > 0 { s / n as f64 } else { f64::NAN };
    (mean(all), mean(same), mean(diff))
}

/// Euclidean silhouette score; `None` if there are fewer than two labels
/// or every point coincides.
pub fn silhouette(x: &Tensor, labels: &[usize]) -> Option<f64> {
    let n = x.nrows();
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 || n < 2 {
        return None;
    }
    let mut dist = Tensor::zeros((n, n));
    let mut max = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            let d = (&x.row(i) - &x.row(j)).mapv(|v| v * v).sum().sqrt();
            dist[[i, j]] = d;
            dist[[j, i]] = d;
            max = max.max(d);
        }
    }
    if max < 1e-12 {
        return None;
    }
    let mut total = 0.0;
    for i in 0..n {
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for j in 0..n {
            if j != i {
                let e = sums.entry(labels[j]).or_default();
                e.0 += dist[[i, j]];
                e.1 += 1;
            }
        }
        let own = sums.get(&labels[i]).copied().unwrap_or((0.0, 0));
        if own.1 == 0 {
            continue;
        }
        let a = own.0 / own.1 as f64;
        let b = sums
            .iter()
            .filter(|(&l, _)| l != labels[i])
            .map(|(_, &(s, c))| s / c as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        total += if m > 0.0 { (b - a) / m } else { 0.0 };
    }
    Some(total / n as f64)
}

/// Projection onto the top two principal axes (power iteration with
/// deflation, deterministic start).
pub fn pca_2d(x: &Tensor) -> Tensor {
    let mean = x.mean_axis(ndarray::Axis(0)).expect("non-empty");
    let c = x - &mean;
    let cov = c.t().dot(&c) / x.nrows().max(1) as f64;
    let d = cov.nrows();
    let mut axes: Vec<ndarray::Array1<f64>> = Vec::new();
    let mut m = cov;
    for k in 0..2 {
        let mut v = ndarray::Array1::from_shape_fn(d, |i| 1.0 + (i + k) as f64 * 0.01);
        for _ in 0..500 {
            let w = m.dot(&v);
            let n = w.dot(&w).sqrt();
            if n < 1e-300 {
                break;
            }
            v = w / n;
        }
        let n = v.dot(&v).sqrt();
        if n > 0.0 {
            v /= n;
        }
        let lambda = v.dot(&m.dot(&v));
        let outer = v.view().insert_axis(ndarray::Axis(1)).dot(&v.view().insert_axis(ndarray::Axis(0)));
        m = m - outer * lambda;
        axes.push(v);
    }
    Tensor::from_shape_fn((x.nrows(), 2), |(r, k)| c.row(r).dot(&axes[k]))
}

/// Representation health of a dynamics model on dataset windows.
pub fn diagnose(model: &Stage1Model, data: &EmbeddedDataset, samples_per_task: usize, seed: u64) -> Result<DiagnosticReport> {
    let tau = model.model.tau;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tasks: Vec<usize> = data.episodes.iter().map(|e| e.task_id).collect();
    tasks.sort_unstable();
    tasks.dedup();
    let mut idx = Vec::new();
    for &t in &tasks {
        let sub = data.filter_tasks(&[t]);
        let picks = sub.sample_indices(Stage::Dynamics, tau, samples_per_task, &mut rng)?;
        // Map back to episode positions in the full dataset.
        let positions: Vec<usize> = data
            .episodes
            .iter()
            .enumerate()
            .filter(|(_, e)| e.task_id == t)
            .map(|(i, _)| i)
            .collect();
        idx.extend(picks.into_iter().map(|(e, s)| (positions[e], s)));
    }
    let labels: Vec<usize> = idx.iter().map(|&(e, _)| data.episodes[e].task_id).collect();
    let h = model.hidden();
    let n = idx.len();
    let mut z_dyn = Tensor::zeros((n, h));
    let mut zhat_s = Tensor::zeros((n, h));
    let mut tgt_p = Tensor::zeros((n, h));
    let mut tgt_s = Tensor::zeros((n, h));
    for (c, chunk) in idx.chunks(256).enumerate() {
        let rows = ndarray::s![c * 256..c * 256 + chunk.len(), ..];
        let batch = data.stage1_batch(chunk, tau);
        let (zh, zd) = model.foresight(&batch.x)?;
        z_dyn.slice_mut(rows).assign(&zd);
        zhat_s.slice_mut(rows).assign(&zh.slice(ndarray::s![.., h..]));
        let (tp, ts) = model
            .encoders
            .encode_target(&model.target, &batch.p_future, &batch.v_future, &batch.x.tasks)?;
        let (zp, zs) = make_targets(&tp, model.model.n_proprio_tokens, &ts, model.model.n_semantic_tokens);
        tgt_p.slice_mut(rows).assign(&zp);
        tgt_s.slice_mut(rows).assign(&zs);
    }
    let std_p = column_std(&tgt_p);
    let std_s = column_std(&tgt_s);
    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let (cos_s, _, _) = pairwise_cosines(&zhat_s, &labels);
    let (_, intra, inter) = pairwise_cosines(&z_dyn, &labels);
    let sil = silhouette(&z_dyn, &labels);
    let proj = pca_2d(&z_dyn);
    let collapse_alarm = sil.is_none() || min(&std_s) <= COLLAPSE_STD || min(&std_p) <= COLLAPSE_STD || cos_s >= COLLAPSE_COS;
    Ok(DiagnosticReport {
        samples_per_task,
        min_std_target_p: min(&std_p),
        min_std_target_s: min(&std_s),
        std_target_p: std_p,
        std_target_s: std_s,
        mean_pairwise_cos_zhat_s: cos_s,
        intra_task_cos: intra,
        inter_task_cos: inter,
        silhouette: sil,
        collapse_alarm,
        pca: proj
            .outer_iter()
            .zip(&labels)
            .map(|(r, &task)| PcaPoint { x: r[0], y: r[1], task })
            .collect(),
    })
}

/// Scatter plot of the PCA projection, one colour per task.
pub fn pca_svg(points: &[PcaPoint]) -> String {
    const SIZE: f64 = 480.0;
    const PAD: f64 = 24.0;
    const COLOURS: [&str; 3] = ["#1b9e77", "#d95f02", "#7570b3"];
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.y);
        y1 = y1.max(p.y);
    }
    let sx = if x1 > x0 { (SIZE - 2.0 * PAD) / (x1 - x0) } else { 0.0 };
    let sy = if y1 > y0 { (SIZE - 2.0 * PAD) / (y1 - y0) } else { 0.0 };
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for p in points {
        let cx = PAD + (p.x - x0) * sx;
        let cy = SIZE - PAD - (p.y - y0) * sy;
        let _ = writeln!(
            s,
            "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"2.5\" fill=\"{}\" fill-opacity=\"0.7\"/>",
            COLOURS[p.task % COLOURS.len()]
        );
    }
    for (t, c) in COLOURS.iter().enumerate() {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"16\" font-family=\"sans-serif\" font-size=\"12\" fill=\"{c}\">T{t}</text>",
            PAD + 40.0 * t as f64
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Convenience for checking a precondition on rollout counts.
pub fn require_rollouts(n: usize) -> Result<usize> {
    if n == 0 {
        return Err(Error::Precondition("need at least one rollout".into()));
    }
    Ok(n)
}
