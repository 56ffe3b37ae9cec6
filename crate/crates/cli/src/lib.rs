//! Command-line front end: train, evaluate and replay.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use gaitforge::assistant::{Lesson, LessonRange};
use gaitforge::charmodel::{CharacterModel, BIPED9};
use gaitforge::config::{TrainConfig, BUILTIN_BIPED};
use gaitforge::curriculum::{self, CurriculumBackend, CurriculumTrace, PpoBackend};
use gaitforge::env::{Environment, LocomotionEnv};
use gaitforge::learner::{IterationStats, Trainer, STATS_HEADER};
use gaitforge::metrics::{self, Summary, Trajectory};
use gaitforge::policy::{self, PolicyParams};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_BUDGET: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

pub const THREADS_VAR: &str = "GAITFORGE_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] gaitforge::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use gaitforge::Error as E;
        match self {
            CliError::Usage(_) => EXIT_CONFIG,
            CliError::Core(e) => match e {
                E::Config { .. } | E::Validation(_) | E::Parse(_) | E::DimensionMismatch { .. } => EXIT_CONFIG,
                E::BudgetExceeded { .. } => EXIT_BUDGET,
                E::Numerical(_) | E::ReplayMismatch { .. } | E::DegenerateInput(_) => EXIT_NUMERICAL,
                _ => EXIT_OTHER,
            },
            CliError::Io { .. } => EXIT_OTHER,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io<T>(context: impl Into<String>, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|source| CliError::Io {
        context: context.into(),
        source,
    })
}

#[derive(Debug, Parser)]
#[command(name = "gaitforge", version, about = "Train and inspect locomotion policies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a policy under a curriculum.
    Train(TrainArgs),
    /// Run deterministic rollouts from a checkpoint and report gait metrics.
    Eval(EvalArgs),
    /// Re-simulate a logged trajectory and check it bit for bit.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurriculumKind {
    Learner,
    Env,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Named preset.
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    /// JSON configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Character file, overriding the configured one.
    #[arg(long)]
    pub character: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = CurriculumKind::Env)]
    pub curriculum: CurriculumKind,
    /// Weight of the mirror symmetry loss.
    #[arg(long)]
    pub sym_weight: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Rollout workers; GAITFORGE_THREADS takes precedence.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Cap on training iterations.
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long, default_value = "runs/latest")]
    pub out: PathBuf,
    /// Initial assistance `kp,kd`.
    #[arg(long, value_parser = parse_assist)]
    pub assist: Option<Lesson>,
    /// Checkpoint period, iterations.
    #[arg(long, default_value_t = 10)]
    pub checkpoint_every: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory written by `train`.
    pub run: PathBuf,
    /// Checkpoint to load instead of the run's final one.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub rollouts: usize,
    /// Constant assistance `kp,kd` during evaluation.
    #[arg(long, value_parser = parse_assist)]
    pub assist: Option<Lesson>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for the report and trajectories.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Run directory written by `train`.
    pub run: PathBuf,
    /// Trajectory to replay; defaults to the first one from `eval`.
    #[arg(long)]
    pub trajectory: Option<PathBuf>,
    /// Where to write the re-simulated trajectory.
    #[arg(long)]
    pub export: Option<PathBuf>,
}

pub fn parse_assist(s: &str) -> std::result::Result<Lesson, String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected kp,kd, got `{s}`"))?;
    let kp: f64 = a.trim().parse().map_err(|e| format!("kp: {e}"))?;
    let kd: f64 = b.trim().parse().map_err(|e| format!("kd: {e}"))?;
    Lesson::new(kp, kd).map_err(|e| e.to_string())
}

/// Self-description of a run directory, written before training starts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub character_source: String,
    pub character_sha256: String,
    pub seed: u64,
    pub curriculum: CurriculumKind,
    pub workers: usize,
    pub code_version: String,
    pub started_unix_s: u64,
    pub layout: Layout,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Layout {
    pub character: String,
    pub stats: String,
    pub trace: String,
    pub checkpoints: String,
    pub result: String,
}

impl Default for Layout {
    fn default() -> Self {
        Self {
            character: "character.model".into(),
            stats: "stats.csv".into(),
            trace: "trace.csv".into(),
            checkpoints: "checkpoints".into(),
            result: "result.json".into(),
        }
    }
}

impl RunManifest {
    pub fn load(run: &Path) -> Result<Self> {
        let path = run.join("manifest.json");
        let text = io(format!("reading {}", path.display()), fs::read_to_string(&path))?;
        serde_json::from_str(&text).map_err(|e| gaitforge::Error::Parse(format!("{}: {e}", path.display())).into())
    }

    pub fn character(&self, run: &Path) -> Result<CharacterModel> {
        Ok(CharacterModel::from_path(run.join(&self.layout.character))?)
    }
}

/// Final state of a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub status: String,
    pub iterations: usize,
    pub reference_return: Option<f64>,
    pub accepted_updates: usize,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn resolve_workers(flag: Option<usize>, default: usize) -> Result<usize> {
    let w = match std::env::var(THREADS_VAR) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| CliError::Usage(format!("{THREADS_VAR}: expected a positive integer, got `{v}`")))?,
        Err(_) => flag.unwrap_or(default),
    };
    if w == 0 {
        return Err(CliError::Usage("workers: must be at least 1".into()));
    }
    Ok(w)
}

pub fn build_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match (&args.preset, &args.config) {
        (Some(name), None) => TrainConfig::preset(name).ok_or_else(|| {
            let names: Vec<&str> = gaitforge::config::PRESETS.iter().map(|p| p.0).collect();
            CliError::Usage(format!("preset: unknown preset `{name}`; known: {}", names.join(", ")))
        })?,
        (None, Some(path)) => TrainConfig::from_path(path)?,
        (None, None) => TrainConfig::preset("biped-walk").expect("default preset exists"),
        (Some(_), Some(_)) => return Err(CliError::Usage("pass either --preset or --config".into())),
    };
    if let Some(c) = &args.character {
        cfg.character = Some(c.display().to_string());
    }
    if let Some(w) = args.sym_weight {
        cfg.learner.w_sym = w;
    }
    if let Some(m) = args.max_iters {
        cfg.curriculum.max_iterations = Some(m);
    }
    if let Some(x) = args.assist {
        cfg.curriculum.x0 = x;
    }
    cfg.learner.workers = resolve_workers(args.workers, cfg.learner.workers)?;
    cfg.validate()?;
    Ok(cfg)
}

fn character_text(cfg: &TrainConfig) -> Result<String> {
    match cfg.character.as_deref() {
        Some(BUILTIN_BIPED) => Ok(BIPED9.to_string()),
        Some(path) => io(format!("reading character {path}"), fs::read_to_string(path)),
        None => Err(gaitforge::Error::Config {
            field: "character".into(),
            message: "no bundled model for this preset; pass --character".into(),
        }
        .into()),
    }
}

fn make_envs(model: &Arc<CharacterModel>, cfg: &TrainConfig, n: usize) -> Result<Vec<LocomotionEnv>> {
    (0..n)
        .map(|_| Ok(LocomotionEnv::new(model.clone(), cfg.env_config(), cfg.reward.clone())?))
        .collect()
}

/// PPO backend that also writes the per-iteration artifacts.
struct RunBackend {
    inner: PpoBackend<LocomotionEnv>,
    stats: fs::File,
    checkpoints: PathBuf,
    every: usize,
}

impl RunBackend {
    fn checkpoint(&self, name: &str) -> Result<()> {
        Ok(self.inner.params.save(self.checkpoints.join(name))?)
    }
}

impl CurriculumBackend for RunBackend {
    fn train_iteration(&mut self, range: LessonRange) -> gaitforge::Result<(IterationStats, Vec<usize>)> {
        let (stats, lengths) = self.inner.train_iteration(range)?;
        writeln!(self.stats, "{}", stats.csv_row())?;
        self.stats.flush()?;
        info!(
            "iter {} return {:.3} len {:.1} L_sym {:.5} |x| {:.1} ({:.1}s)",
            stats.iteration, stats.avg_return, stats.avg_len, stats.sym_loss, stats.lesson_norm, stats.wall_time_s
        );
        if self.every > 0 && stats.iteration % self.every == 0 {
            self.inner.params.save(self.checkpoints.join(format!("iter_{:05}.bin", stats.iteration)))?;
            self.inner.params.save(self.checkpoints.join("latest.bin"))?;
        }
        Ok((stats, lengths))
    }

    fn eval_return(&mut self, lesson: Lesson, n: usize, seed: u64) -> gaitforge::Result<f64> {
        self.inner.eval_return(lesson, n, seed)
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<RunResult> {
    let cfg = build_config(args)?;
    let text = character_text(&cfg)?;
    let model = Arc::new(CharacterModel::from_json_str(&text)?);
    let out = &args.out;
    let layout = Layout::default();
    let ckpt_dir = out.join(&layout.checkpoints);
    io(format!("creating {}", ckpt_dir.display()), fs::create_dir_all(&ckpt_dir))?;
    io("writing character copy", fs::write(out.join(&layout.character), &text))?;

    let manifest = RunManifest {
        config: cfg.clone(),
        character_source: cfg.character.clone().unwrap_or_default(),
        character_sha256: sha256_hex(text.as_bytes()),
        seed: args.seed,
        curriculum: args.curriculum,
        workers: cfg.learner.workers,
        code_version: env!("CARGO_PKG_VERSION").into(),
        started_unix_s: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        layout: layout.clone(),
    };
    let manifest_json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    io("writing manifest", fs::write(out.join("manifest.json"), manifest_json))?;

    let envs = make_envs(&model, &cfg, cfg.learner.workers)?;
    let trainer = Trainer::new(
        cfg.learner.clone(),
        envs,
        model.mirror_obs.clone(),
        model.mirror_act.clone(),
        args.seed,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let params = PolicyParams::new(model.obs_dim(), model.action_dim(), &cfg.policy, &mut rng);
    let mut stats = io("creating stats file", fs::File::create(out.join(&layout.stats)))?;
    io("writing stats header", writeln!(stats, "{STATS_HEADER}"))?;
    let mut backend = RunBackend {
        inner: PpoBackend::new(trainer, params, cfg.curriculum.balance_steps()),
        stats,
        checkpoints: ckpt_dir,
        every: args.checkpoint_every,
    };

    info!("training {} with the {:?} curriculum into {}", model.name, args.curriculum, out.display());
    let outcome = match args.curriculum {
        CurriculumKind::Learner => curriculum::run_learner_centered(&mut backend, &cfg.curriculum),
        CurriculumKind::Env => curriculum::run_env_centered(&mut backend, &cfg.curriculum),
    };
    let (trace, status, err): (CurriculumTrace, &str, Option<gaitforge::Error>) = match outcome {
        Ok(t) => (t, "completed", None),
        Err(gaitforge::Error::BudgetExceeded { iterations, trace }) => (
            *trace,
            "budget_exceeded",
            Some(gaitforge::Error::BudgetExceeded {
                iterations,
                trace: Box::default(),
            }),
        ),
        Err(e) => {
            // Keep whatever the policy reached for inspection.
            let _ = backend.checkpoint("final.bin");
            return Err(e.into());
        }
    };
    trace.write_csv(out.join(&layout.trace))?;
    backend.checkpoint("final.bin")?;
    backend.checkpoint("latest.bin")?;
    let result = RunResult {
        status: status.into(),
        iterations: trace.entries.len(),
        reference_return: trace.reference_return,
        accepted_updates: trace.accepted().count(),
    };
    let result_json = serde_json::to_string_pretty(&result).expect("result serializes");
    io("writing result", fs::write(out.join(&layout.result), result_json))?;
    match err {
        Some(e) => Err(e.into()),
        None => Ok(result),
    }
}

/// Where a logged rollout started.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub seed: u64,
    pub assist: Lesson,
    pub checkpoint: String,
}

fn meta_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

fn load_checkpoint(run: &Path, manifest: &RunManifest, explicit: Option<&Path>) -> Result<(PathBuf, PolicyParams)> {
    let dir = run.join(&manifest.layout.checkpoints);
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => ["final.bin", "latest.bin"]
            .iter()
            .map(|n| dir.join(n))
            .find(|p| p.exists())
            .ok_or_else(|| CliError::Usage(format!("checkpoint: none found in {}", dir.display())))?,
    };
    let params = PolicyParams::load(&path)?;
    Ok((path, params))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<Summary> {
    if args.rollouts == 0 {
        return Err(CliError::Usage("rollouts: must be at least 1".into()));
    }
    let manifest = RunManifest::load(&args.run)?;
    let model = Arc::new(manifest.character(&args.run)?);
    let (ckpt, params) = load_checkpoint(&args.run, &manifest, args.checkpoint.as_deref())?;
    if params.obs_dim() != model.obs_dim() || params.act_dim() != model.action_dim() {
        return Err(gaitforge::Error::DimensionMismatch {
            expected: model.obs_dim(),
            got: params.obs_dim(),
        }
        .into());
    }
    let cfg = &manifest.config;
    let lesson = args.assist.unwrap_or(Lesson::NONE);
    let out = args.out.clone().unwrap_or_else(|| args.run.join("eval"));
    io(format!("creating {}", out.display()), fs::create_dir_all(&out))?;

    let mut env = LocomotionEnv::new(model.clone(), cfg.env_config(), cfg.reward.clone())?;
    env.set_lesson(LessonRange::constant(lesson));
    let mut all = Trajectory::for_model(&model);
    let mut trajs = Vec::new();
    let (mut total_return, mut total_len) = (0.0, 0.0);
    for i in 0..args.rollouts {
        let seed = args.seed.wrapping_add(i as u64);
        let mut obs = env.reset_with_seed(seed);
        let mut traj = Trajectory::for_model(&model);
        let mut ret = 0.0;
        loop {
            let act = policy::mean_action(&params, &obs)?;
            let r = env.step_action(&act)?;
            traj.record(&env, &act, &r.info)?;
            ret += r.reward;
            obs = r.observation;
            if r.done {
                break;
            }
        }
        info!("rollout {i}: return {ret:.3}, {} steps", traj.len());
        total_return += ret;
        total_len += traj.len() as f64;
        let name = format!("trajectory_{i:03}.csv");
        traj.export(out.join(&name))?;
        let meta = TrajectoryMeta {
            seed,
            assist: lesson,
            checkpoint: ckpt.display().to_string(),
        };
        let meta_json = serde_json::to_string_pretty(&meta).expect("meta serializes");
        io("writing trajectory metadata", fs::write(meta_path(&out.join(&name)), meta_json))?;
        // Concatenate with a time offset so the combined series stays monotone.
        let offset = all.steps.last().map_or(0.0, |s| s.t);
        for mut s in traj.steps.iter().cloned() {
            s.t += offset;
            all.push(s)?;
        }
        trajs.push(traj);
    }
    let n = args.rollouts as f64;
    let si = match metrics::symmetry_index(&all, &model) {
        Ok(v) => Some(v),
        Err(e) => {
            warn!("symmetry index undefined: {e}");
            None
        }
    };
    let longest = trajs.iter().max_by_key(|t| t.len()).expect("at least one rollout");
    let summary = Summary {
        rollouts: args.rollouts,
        avg_return: total_return / n,
        avg_len: total_len / n,
        symmetry_index: si,
        avg_actuation: metrics::avg_actuation(&all).ok(),
        gait_period_s: metrics::gait_period(longest, cfg.env_config().control_dt()),
        assist_kp: lesson.kp,
        assist_kd: lesson.kd,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    io("writing summary", fs::write(out.join("summary.json"), &json))?;
    println!("{json}");
    Ok(summary)
}

/// Re-simulates a logged trajectory; returns the number of steps checked.
pub fn cmd_replay(args: &ReplayArgs) -> Result<usize> {
    let manifest = RunManifest::load(&args.run)?;
    let model = Arc::new(manifest.character(&args.run)?);
    let csv = args
        .trajectory
        .clone()
        .unwrap_or_else(|| args.run.join("eval").join("trajectory_000.csv"));
    let logged = Trajectory::import(&csv)?;
    let meta_file = meta_path(&csv);
    let meta_text = io(format!("reading {}", meta_file.display()), fs::read_to_string(&meta_file))?;
    let meta: TrajectoryMeta =
        serde_json::from_str(&meta_text).map_err(|e| gaitforge::Error::Parse(format!("{}: {e}", meta_file.display())))?;
    if logged.dof != model.dof() || logged.act_dim != model.action_dim() {
        return Err(gaitforge::Error::DimensionMismatch {
            expected: model.dof(),
            got: logged.dof,
        }
        .into());
    }

    let cfg = &manifest.config;
    let mut env = LocomotionEnv::new(model.clone(), cfg.env_config(), cfg.reward.clone())?;
    env.set_lesson(LessonRange::constant(meta.assist));
    env.reset_with_seed(meta.seed);
    let mut replayed = Trajectory::for_model(&model);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    for (k, step) in logged.steps.iter().enumerate() {
        let r = env.step_action(&step.action)?;
        replayed.record(&env, &step.action, &r.info)?;
        let s = env.state();
        let mismatch = if bits(s.q.as_slice()) != bits(&step.q) {
            Some("joint positions differ")
        } else if bits(s.qd.as_slice()) != bits(&step.qd) {
            Some("joint velocities differ")
        } else if env.time().to_bits() != step.t.to_bits() {
            Some("time differs")
        } else {
            None
        };
        if let Some(m) = mismatch {
            return Err(gaitforge::Error::ReplayMismatch {
                step: k,
                message: m.into(),
            }
            .into());
        }
        if r.done && k + 1 != logged.len() {
            return Err(gaitforge::Error::ReplayMismatch {
                step: k,
                message: "rollout terminated before the log ended".into(),
            }
            .into());
        }
    }
    let export = args
        .export
        .clone()
        .unwrap_or_else(|| args.run.join("replay").join("trajectory.csv"));
    if let Some(dir) = export.parent() {
        io(format!("creating {}", dir.display()), fs::create_dir_all(dir))?;
    }
    replayed.export(&export)?;
    println!("replay matched {} steps", logged.len());
    Ok(logged.len())
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a).map(|r| info!("{} after {} iterations", r.status, r.iterations)),
        Command::Eval(a) => cmd_eval(a).map(|_| ()),
        Command::Replay(a) => cmd_replay(a).map(|_| ()),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
