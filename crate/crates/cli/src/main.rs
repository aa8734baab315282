use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clad::checkpoint::Checkpoint;
use clad::config::{Preset, RunConfig};
use clad::data::{generate, EmbeddedDataset, MANIFEST};
use clad::encoders::Backbone;
use clad::eval::{diagnose, evaluate, pca_svg, require_rollouts, run_ablations, PolicyController, Variant, VARIANTS};
use clad::sim::Task;
use clad::training::{stage1_from_checkpoint, train_stage1, train_stage2, PolicyBundle, RunDir};
use clad::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

const EXIT_USAGE: u8 = 2;
const EXIT_PRECONDITION: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "clad", version, about = "Latent dynamics and diffusion policy pipeline on a planar arm")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args, Debug)]
struct Global {
    /// Base configuration file (TOML). Defaults to the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dotted-key override such as `ddpm.K=50`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory for this run. Defaults to `<root>/<verb>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, env = "CLAD_OUTPUT_ROOT", default_value = "runs")]
    output_root: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

#[derive(Subcommand, Debug)]
enum Verb {
    /// Record scripted-expert episodes.
    GenData {
        /// Dataset directory; defaults to `data.path`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Replace an existing dataset.
        #[arg(long)]
        force: bool,
    },
    /// Train the latent dynamics model.
    TrainStage1 {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the policy on a frozen dynamics model.
    TrainStage2 {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Stage-1 checkpoint.
        #[arg(long)]
        stage1: PathBuf,
    },
    /// Closed-loop rollouts of a trained policy, or of the scripted expert.
    Eval {
        /// Stage-2 checkpoint; omit together with `--expert`.
        #[arg(long, required_unless_present = "expert")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        expert: bool,
        /// Task ids; defaults to `data.tasks`.
        #[arg(long, value_delimiter = ',')]
        tasks: Vec<usize>,
        #[arg(long, default_value_t = 50)]
        rollouts: usize,
        /// First rollout seed; defaults to `eval.seed`.
        #[arg(long)]
        rollout_seed: Option<u64>,
    },
    /// Train and evaluate the ablation grid.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "2")]
        tasks: Vec<usize>,
        /// Variant names; defaults to all.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Representation statistics of a dynamics checkpoint.
    Diagnose {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Stage-1 or stage-2 checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 256)]
        samples_per_task: usize,
    },
}

impl Verb {
    fn name(&self) -> &'static str {
        match self {
            Verb::GenData { .. } => "gen-data",
            Verb::TrainStage1 { .. } => "train-stage1",
            Verb::TrainStage2 { .. } => "train-stage2",
            Verb::Eval { .. } => "eval",
            Verb::Ablate { .. } => "ablate",
            Verb::Diagnose { .. } => "diagnose",
        }
    }
}

/// Error with an exit category and, for runtime failures, the checkpoint
/// that survives the failed run.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::UnknownTask(_) => EXIT_USAGE,
            Error::Precondition(_) | Error::Checkpoint(_) | Error::Dataset(_) => EXIT_PRECONDITION,
            _ => EXIT_RUNTIME,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn resolve_config(g: &Global) -> CliResult<RunConfig> {
    let mut cfg = match (&g.config, g.preset) {
        (Some(path), _) => {
            if !path.exists() {
                return Err(Failure::usage(format!("config file {} does not exist", path.display())));
            }
            let mut c = RunConfig::load(path)?;
            if let Some(p) = g.preset {
                c.preset = preset(p);
            }
            c
        }
        (None, p) => RunConfig::preset(p.map_or(Preset::Desk, preset)),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    for kv in &g.set {
        cfg.apply_override(kv)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn preset(p: PresetArg) -> Preset {
    match p {
        PresetArg::Desk => Preset::Desk,
        PresetArg::Paper => Preset::Paper,
    }
}

fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(Error::from)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Run directory with the resolved config and a manifest of inputs.
struct Run {
    dir: PathBuf,
    inputs: Vec<(String, PathBuf, String)>,
}

impl Run {
    fn create(dir: PathBuf, cfg: &RunConfig) -> CliResult<Self> {
        fs::create_dir_all(&dir).map_err(Error::from)?;
        cfg.save(&dir.join("config.toml"))?;
        Ok(Self { dir, inputs: Vec::new() })
    }

    fn input(&mut self, role: &str, path: &Path) -> CliResult<()> {
        let hash = sha256_file(path)?;
        self.inputs.push((role.into(), path.to_path_buf(), hash));
        Ok(())
    }

    fn finish(&self, verb: &str, argv: &[String]) -> CliResult<()> {
        let mut outputs = Vec::new();
        let mut names: Vec<_> = fs::read_dir(&self.dir)
            .map_err(Error::from)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != "run_manifest.json"))
            .collect();
        names.sort();
        for p in names {
            let name = p.file_name().expect("file").to_string_lossy().into_owned();
            if name.ends_with("_timing.jsonl") {
                continue;
            }
            outputs.push(serde_json::json!({ "file": name, "sha256": sha256_file(&p)? }));
        }
        let inputs: Vec<_> = self
            .inputs
            .iter()
            .map(|(role, path, hash)| serde_json::json!({ "role": role, "path": path, "sha256": hash }))
            .collect();
        let replay = format!("clad --config {} {}", self.dir.join("config.toml").display(), replay_args(verb, argv));
        let manifest = serde_json::json!({
            "verb": verb,
            "version": env!("CARGO_PKG_VERSION"),
            "argv": argv,
            "config_sha256": sha256_file(&self.dir.join("config.toml"))?,
            "inputs": inputs,
            "outputs": outputs,
            "replay": replay,
        });
        let text = serde_json::to_string_pretty(&manifest).map_err(Error::from)?;
        fs::write(self.dir.join("run_manifest.json"), text).map_err(Error::from)?;
        Ok(())
    }
}

/// Verb arguments with the config-shaping flags stripped, since the
/// saved config already contains their effect.
fn replay_args(verb: &str, argv: &[String]) -> String {
    let mut out = Vec::new();
    let mut skip = false;
    let mut seen_verb = false;
    for a in argv.iter().skip(1) {
        if skip {
            skip = false;
            continue;
        }
        let flag = a.split('=').next().unwrap_or(a);
        if matches!(flag, "--config" | "--preset" | "--seed" | "--set") {
            skip = !a.contains('=');
            continue;
        }
        if a == verb {
            seen_verb = true;
        }
        out.push(a.clone());
    }
    if !seen_verb {
        out.insert(0, verb.to_string());
    }
    out.join(" ")
}

fn data_dir(arg: &Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    arg.clone().unwrap_or_else(|| cfg.data.path.clone())
}

fn load_data(arg: &Option<PathBuf>, cfg: &mut RunConfig) -> CliResult<EmbeddedDataset> {
    let dir = data_dir(arg, cfg);
    if !dir.is_dir() {
        return Err(Failure::usage(format!(
            "dataset path {} does not exist; pass --data or run gen-data first",
            dir.display()
        )));
    }
    cfg.data.path = dir.clone();
    let backbone = Backbone::new(cfg.model.backbone_seed, cfg.model.visual_dim);
    let data = EmbeddedDataset::load(&dir, &backbone)?
        .filter_tasks(&cfg.data.tasks)
        .limit_per_task(cfg.data.episodes_per_task);
    if data.episodes.is_empty() {
        return Err(Error::Precondition(format!("no episodes for tasks {:?} in {}", cfg.data.tasks, dir.display())).into());
    }
    Ok(data)
}

fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    let mut ck: Vec<_> = fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .filter_map(|p| Some((fs::metadata(&p).ok()?.modified().ok()?, p)))
        .collect();
    ck.sort();
    ck.pop().map(|(_, p)| p)
}

fn with_stage<T>(stage: &str, dir: &Path, r: clad::Result<T>) -> CliResult<T> {
    r.map_err(|e| {
        let mut f = Failure::from(e);
        if f.code == EXIT_RUNTIME {
            let of_record = latest_checkpoint(dir).map_or("none".into(), |p| p.display().to_string());
            f.message = format!("{stage} failed: {}; checkpoint of record: {of_record}", f.message);
        }
        f
    })
}

fn tasks_of(ids: &[usize]) -> CliResult<Vec<Task>> {
    ids.iter().map(|&t| Task::from_id(t).map_err(Failure::from)).collect()
}

fn run(cli: Cli, argv: &[String]) -> CliResult<()> {
    let mut cfg = resolve_config(&cli.global)?;
    let verb = cli.verb.name();
    let out = cli.global.out.clone().unwrap_or_else(|| cli.global.output_root.join(verb));
    match &cli.verb {
        Verb::GenData { data, force } => {
            let dir = data_dir(data, &cfg);
            let m = generate(&dir, &cfg.data.tasks, cfg.data.episodes_per_task, cfg.seed, *force)?;
            cfg.data.path = dir.clone();
            cfg.save(&dir.join("config.toml"))?;
            let ok = m.episodes.iter().filter(|e| e.success).count();
            println!("wrote {} episodes to {} ({ok} successful)", m.episodes.len(), dir.display());
        }
        Verb::TrainStage1 { data } => {
            let dataset = load_data(data, &mut cfg)?;
            let mut run = Run::create(out, &cfg)?;
            run.input("dataset_manifest", &data_dir(data, &cfg).join(MANIFEST))?;
            let dir = RunDir(run.dir.clone());
            let r = with_stage("train-stage1", &run.dir, train_stage1(&cfg, &dataset, Some(&dir)))?;
            println!(
                "stage 1: total {:.4} -> {:.4}, latent {:.4} -> {:.4}",
                r.initial_eval.total, r.final_eval.total, r.initial_eval.latent, r.final_eval.latent
            );
            run.finish(verb, argv)?;
            println!("checkpoint {}", run.dir.join("stage1.ckpt").display());
        }
        Verb::TrainStage2 { data, stage1 } => {
            let ck = Checkpoint::load(stage1)?;
            let model = stage1_from_checkpoint(&ck)?;
            if ck.config.model != cfg.model {
                return Err(Error::Precondition(format!(
                    "{} was trained with a different model section than the resolved config",
                    stage1.display()
                ))
                .into());
            }
            let dataset = load_data(data, &mut cfg)?;
            let mut run = Run::create(out, &cfg)?;
            run.input("dataset_manifest", &data_dir(data, &cfg).join(MANIFEST))?;
            run.input("stage1_checkpoint", stage1)?;
            let dir = RunDir(run.dir.clone());
            let r = with_stage("train-stage2", &run.dir, train_stage2(&cfg, &model, &dataset, Some(&dir)))?;
            println!("stage 2: denoising loss {:.4} -> {:.4}", r.initial_eval, r.final_eval);
            run.finish(verb, argv)?;
            println!("checkpoint {}", run.dir.join("stage2.ckpt").display());
        }
        Verb::Eval {
            checkpoint,
            expert,
            tasks,
            rollouts,
            rollout_seed,
        } => {
            let n = require_rollouts(*rollouts)?;
            let seed = rollout_seed.unwrap_or(cfg.eval.seed);
            let task_ids = if tasks.is_empty() { cfg.data.tasks.clone() } else { tasks.clone() };
            let bundle = match (checkpoint, expert) {
                (Some(p), false) => Some(PolicyBundle::from_checkpoint(&Checkpoint::load(p)?)?),
                (None, true) => None,
                _ => return Err(Failure::usage("pass exactly one of --checkpoint and --expert")),
            };
            let mut run = Run::create(out, bundle.as_ref().map_or(&cfg, |b| &b.config))?;
            if let Some(p) = checkpoint {
                run.input("stage2_checkpoint", p)?;
            }
            let mut reports = Vec::new();
            for task in tasks_of(&task_ids)? {
                let report = match &bundle {
                    Some(b) => evaluate(&mut PolicyController::new(b), task, n, seed),
                    None => evaluate(&mut clad::eval::ExpertController, task, n, seed),
                };
                let report = with_stage("eval", &run.dir, report)?;
                report.write_records(&run.dir.join(format!("rollouts_task{}.jsonl", task.id())))?;
                println!(
                    "task {} ({}): success {}/{} = {:.1}%",
                    task.id(),
                    task.name(),
                    report.successes,
                    report.n_rollouts,
                    100.0 * report.success_rate
                );
                reports.push(report);
            }
            let text = serde_json::to_string_pretty(&reports).map_err(Error::from)?;
            fs::write(run.dir.join("eval_report.json"), text).map_err(Error::from)?;
            run.finish(verb, argv)?;
        }
        Verb::Ablate { data, tasks, variants } => {
            let chosen: Vec<Variant> = if variants.is_empty() {
                VARIANTS.to_vec()
            } else {
                variants
                    .iter()
                    .map(|name| {
                        VARIANTS.iter().copied().find(|v| v.name == name).ok_or_else(|| {
                            let known: Vec<_> = VARIANTS.iter().map(|v| v.name).collect();
                            Failure::usage(format!("unknown variant `{name}`; known: {}", known.join(", ")))
                        })
                    })
                    .collect::<CliResult<_>>()?
            };
            tasks_of(tasks)?;
            let dataset = load_data(data, &mut cfg)?;
            let mut run = Run::create(out, &cfg)?;
            run.input("dataset_manifest", &data_dir(data, &cfg).join(MANIFEST))?;
            let grid = with_stage("ablate", &run.dir, run_ablations(&cfg, &dataset, tasks, &chosen, Some(&run.dir)))?;
            let table = grid.render_table();
            fs::write(run.dir.join("ablation_table.md"), &table).map_err(Error::from)?;
            let text = serde_json::to_string_pretty(&grid).map_err(Error::from)?;
            fs::write(run.dir.join("ablation_grid.json"), text).map_err(Error::from)?;
            run.finish(verb, argv)?;
            print!("{table}");
        }
        Verb::Diagnose {
            data,
            checkpoint,
            samples_per_task,
        } => {
            let ck = Checkpoint::load(checkpoint)?;
            let model = stage1_from_checkpoint(&ck)?;
            cfg.model = ck.config.model.clone();
            let dataset = load_data(data, &mut cfg)?;
            let mut run = Run::create(out, &cfg)?;
            run.input("dataset_manifest", &data_dir(data, &cfg).join(MANIFEST))?;
            run.input("checkpoint", checkpoint)?;
            let report = with_stage("diagnose", &run.dir, diagnose(&model, &dataset, *samples_per_task, cfg.seed))?;
            fs::write(run.dir.join("pca.svg"), pca_svg(&report.pca)).map_err(Error::from)?;
            let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
            fs::write(run.dir.join("diagnostics.json"), text).map_err(Error::from)?;
            run.finish(verb, argv)?;
            println!(
                "silhouette {}, mean cos(z_hat_s) {:.4}, min target std p {:.2e} s {:.2e}{}",
                report.silhouette.map_or("undefined".into(), |s| format!("{s:.4}")),
                report.mean_pairwise_cos_zhat_s,
                report.min_std_target_p,
                report.min_std_target_s,
                if report.collapse_alarm { ", COLLAPSE ALARM" } else { "" }
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let category = match f.code {
                EXIT_USAGE => "usage",
                EXIT_PRECONDITION => "precondition",
                _ => "runtime",
            };
            eprintln!("error ({category}): {}", f.message);
            if f.code == EXIT_USAGE {
                eprintln!("run `clad --help` for the command schema");
            }
            ExitCode::from(f.code)
        }
    }
}
