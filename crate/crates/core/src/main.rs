//! Command-line entry point: instance generation, training, solving,
//! exact solving, benchmarking, and LP export.

use clap::{Args, Parser, Subcommand};
use jobshop::checkpoint::{Checkpoint, CHECKPOINT_FORMAT_VERSION};
use jobshop::env::write_schedule_csv;
use jobshop::eval::{
    bench, write_profile_csv, write_records_csv, write_summary_csv, BenchConfig, BenchInstance,
};
use jobshop::exact::{branch_and_bound, build_milp, export_lp, BnbOptions};
use jobshop::instances::{
    generate, parse_instance, write_instance, GeneratorSpec, ProcessingTimeDist,
};
use jobshop::ppo::{
    derive_seed, greedy_solve, train, DatasetEntry, EpisodeLog, EpsilonStep, KlDirection, PpoError,
    SnapshotReason, TrainConfig, TrainObserver, TrainState,
};
use serde::Deserialize;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

fn version_string() -> &'static str {
    Box::leak(
        format!(
            "{} (checkpoint format v{})",
            env!("CARGO_PKG_VERSION"),
            CHECKPOINT_FORMAT_VERSION
        )
        .into_boxed_str(),
    )
}

#[derive(Parser)]
#[command(name = "jobshop", about = "Job-shop scheduling toolkit", version = version_string())]
struct Cli {
    /// Key-value (TOML) config file; command-line flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for roll-out collection and benchmark pools
    /// (default: logical cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Generate random instances from a distribution class.
    Gen(GenArgs),
    /// Train the construction policy on a directory of instances.
    Train(TrainArgs),
    /// Solve one instance with a trained policy.
    Solve(SolveArgs),
    /// Solve one instance with the exact branch-and-bound.
    Exact(ExactArgs),
    /// Benchmark a trained policy against the exact solver.
    Bench(BenchArgs),
    /// Export one instance as a CPLEX-LP MILP file.
    Export(ExportArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    jobs: usize,
    #[arg(long)]
    machines: usize,
    /// gaussian:<mean>:<std_dev> or poisson:<lambda>.
    #[arg(long)]
    dist: String,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of .jssp instance files.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Resume from an existing checkpoint (its config applies, minus any
    /// flags given here).
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    rollouts: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    beta0: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    actor_lr: Option<f64>,
    #[arg(long)]
    critic_lr: Option<f64>,
    #[arg(long)]
    actor_steps: Option<usize>,
    #[arg(long)]
    critic_steps: Option<usize>,
    /// Comma-separated frac:eps pairs, e.g. 0.4:0.2,0.55:0.1,0.7:0.05.
    #[arg(long)]
    epsilon_schedule: Option<String>,
    /// old-new (default) or new-old.
    #[arg(long)]
    kl_direction: Option<String>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    hidden1: Option<usize>,
    #[arg(long)]
    hidden2: Option<usize>,
    /// Comma-separated FFN hidden widths, e.g. 1100,550,110.
    #[arg(long)]
    ffn: Option<String>,
    #[arg(long)]
    scale_mean: Option<f64>,
    #[arg(long, default_value_t = false)]
    quiet: bool,
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    instance: PathBuf,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct ExactArgs {
    #[arg(long)]
    instance: PathBuf,
    /// Wall-clock limit in seconds.
    #[arg(long)]
    time_limit: Option<f64>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Wall-clock limit per exact solve, in seconds.
    #[arg(long)]
    time_limit: Option<f64>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    instance: PathBuf,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

/// Optional keys of the shared config file; flags override any of them.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    episodes: Option<usize>,
    rollouts: Option<usize>,
    seed: Option<u64>,
    beta0: Option<f64>,
    delta: Option<f64>,
    actor_lr: Option<f64>,
    critic_lr: Option<f64>,
    actor_steps: Option<usize>,
    critic_steps: Option<usize>,
    epsilon_schedule: Option<Vec<(f64, f64)>>,
    kl_direction: Option<String>,
    checkpoint_every: Option<usize>,
    hidden1: Option<usize>,
    hidden2: Option<usize>,
    ffn: Option<Vec<usize>>,
    scale_mean: Option<f64>,
    time_limit: Option<f64>,
    workers: Option<usize>,
}

enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Numeric(_) => "numeric",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<PpoError> for CliError {
    fn from(err: PpoError) -> Self {
        match err {
            PpoError::NumericFailure { .. } => CliError::Numeric(err.to_string()),
            PpoError::InvalidConfig(_) => CliError::Config(err.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

fn data_err<E: std::fmt::Display>(err: E) -> CliError {
    CliError::Data(err.to_string())
}

fn config_err<E: std::fmt::Display>(err: E) -> CliError {
    CliError::Config(err.to_string())
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(err) => {
            // Machine-readable single-line error.
            eprintln!(
                "{}",
                serde_json::json!({
                    "error": { "code": err.code(), "kind": err.kind(), "message": err.message() }
                })
            );
            std::process::exit(err.code());
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file_config = load_file_config(cli.config.as_deref())?;
    if let Some(workers) = cli.workers.or(file_config.workers) {
        if workers == 0 {
            return Err(CliError::Config("workers must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(config_err)?;
    }
    match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Train(args) => cmd_train(args, &file_config),
        Command::Solve(args) => cmd_solve(args),
        Command::Exact(args) => cmd_exact(args, &file_config),
        Command::Bench(args) => cmd_bench(args, &file_config),
        Command::Export(args) => cmd_export(args),
    }
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    match path {
        None => Ok(FileConfig::default()),
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
        }
    }
}

fn parse_dist(text: &str) -> Result<ProcessingTimeDist, CliError> {
    let parts: Vec<&str> = text.split(':').collect();
    match parts.as_slice() {
        ["gaussian", mean, std_dev] => Ok(ProcessingTimeDist::Gaussian {
            mean: mean.parse().map_err(config_err)?,
            std_dev: std_dev.parse().map_err(config_err)?,
        }),
        ["poisson", lambda] => Ok(ProcessingTimeDist::Poisson {
            lambda: lambda.parse().map_err(config_err)?,
        }),
        _ => Err(CliError::Config(format!(
            "unrecognized distribution {text:?}; use gaussian:<mean>:<std> or poisson:<lambda>"
        ))),
    }
}

const STREAM_GEN: u64 = 0x6765_6e00;

fn cmd_gen(args: GenArgs) -> Result<(), CliError> {
    if args.count == 0 {
        return Err(CliError::Config("count must be >= 1".into()));
    }
    let distribution = parse_dist(&args.dist)?;
    let class_prefix = match distribution {
        ProcessingTimeDist::Gaussian { .. } => "g",
        ProcessingTimeDist::Poisson { .. } => "p",
    };
    let class = format!("{class_prefix}{}x{}", args.jobs, args.machines);
    fs::create_dir_all(&args.out).map_err(data_err)?;
    for index in 0..args.count {
        let spec = GeneratorSpec {
            num_jobs: args.jobs,
            num_machines: args.machines,
            distribution,
            seed: derive_seed(args.seed, index as u64, STREAM_GEN),
        };
        let instance = generate(&spec).map_err(config_err)?;
        let name = format!("{class}_{}_{index:04}.jssp", args.seed);
        let path = args.out.join(&name);
        fs::write(&path, write_instance(&instance)).map_err(data_err)?;
        println!("{name}");
    }
    println!("wrote {} instances to {}", args.count, args.out.display());
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Vec<DatasetEntry>, CliError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "jssp"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Data(format!(
            "no .jssp files in {}",
            dir.display()
        )));
    }
    paths
        .into_iter()
        .map(|path| {
            let text = fs::read_to_string(&path).map_err(data_err)?;
            let instance = parse_instance(&text)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            let id = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string());
            Ok(DatasetEntry { id, instance })
        })
        .collect()
}

fn parse_epsilon_schedule(text: &str) -> Result<Vec<EpsilonStep>, CliError> {
    text.split(',')
        .map(|pair| {
            let (frac, eps) = pair.split_once(':').ok_or_else(|| {
                CliError::Config(format!("bad epsilon schedule entry {pair:?}; use frac:eps"))
            })?;
            Ok(EpsilonStep {
                until_fraction: frac.trim().parse().map_err(config_err)?,
                epsilon: eps.trim().parse().map_err(config_err)?,
            })
        })
        .collect()
}

fn parse_kl_direction(text: &str) -> Result<KlDirection, CliError> {
    match text.replace('_', "-").as_str() {
        "old-new" => Ok(KlDirection::OldNew),
        "new-old" => Ok(KlDirection::NewOld),
        other => Err(CliError::Config(format!(
            "unrecognized kl direction {other:?}; use old-new or new-old"
        ))),
    }
}

fn parse_ffn(text: &str) -> Result<[usize; 3], CliError> {
    let widths: Vec<usize> = text
        .split(',')
        .map(|w| w.trim().parse().map_err(config_err))
        .collect::<Result<_, _>>()?;
    widths
        .try_into()
        .map_err(|_| CliError::Config("ffn needs exactly three widths".into()))
}

/// Streams the log to disk and writes periodic/diagnostic checkpoints.
struct CliObserver {
    log: BufWriter<File>,
    out_dir: PathBuf,
    train_config: TrainConfig,
    progress_every: usize,
    quiet: bool,
}

impl CliObserver {
    fn write_checkpoint(&self, state: &TrainState, name: &str) {
        let path = self.out_dir.join(name);
        let result = File::create(&path)
            .map_err(|e| e.to_string())
            .and_then(|f| {
                Checkpoint::from_state(state, &self.train_config)
                    .write(BufWriter::new(f))
                    .map_err(|e| e.to_string())
            });
        if let Err(e) = result {
            eprintln!("warning: could not write {}: {e}", path.display());
        }
    }
}

impl TrainObserver for CliObserver {
    fn on_episode(&mut self, log: &EpisodeLog) {
        let _ = jobshop::ppo::write_training_log_row(log, &mut self.log);
        if !self.quiet && (log.episode + 1).is_multiple_of(self.progress_every) {
            eprintln!(
                "episode {:>6}  instance {}  best_return {:>8}  critic_loss {:>12.3}  kl {:.5}  beta {:.3}  eps {:.2}",
                log.episode,
                log.instance_id,
                log.best_return,
                log.critic_loss,
                log.kl,
                log.beta,
                log.epsilon
            );
        }
    }

    fn on_snapshot(&mut self, state: &TrainState, reason: SnapshotReason) {
        let name = match reason {
            SnapshotReason::Periodic => "checkpoint.json",
            SnapshotReason::Diagnostic => "diagnostic_checkpoint.json",
        };
        self.write_checkpoint(state, name);
    }
}

fn cmd_train(args: TrainArgs, file: &FileConfig) -> Result<(), CliError> {
    let dataset = load_dataset(&args.data)?;
    fs::create_dir_all(&args.out).map_err(data_err)?;

    // Resolve the config: resume checkpoint < file config < flags.
    let resumed = match &args.resume {
        None => None,
        Some(path) => {
            let f = File::open(path)
                .map_err(|e| CliError::Data(format!("cannot open {}: {e}", path.display())))?;
            Some(Checkpoint::read(f).map_err(data_err)?)
        }
    };
    let mut train_config = resumed
        .as_ref()
        .map(|c| c.train.clone())
        .unwrap_or_default();
    let mut model_config = resumed.as_ref().map(|c| c.model).unwrap_or_default();

    macro_rules! merge {
        ($target:expr, $flag:expr, $file:expr) => {
            if let Some(v) = $flag.or($file) {
                $target = v;
            }
        };
    }
    merge!(train_config.episodes, args.episodes, file.episodes);
    merge!(
        train_config.rollouts_per_episode,
        args.rollouts,
        file.rollouts
    );
    merge!(train_config.seed, args.seed, file.seed);
    merge!(train_config.beta0, args.beta0, file.beta0);
    merge!(train_config.delta, args.delta, file.delta);
    merge!(train_config.actor_lr, args.actor_lr, file.actor_lr);
    merge!(train_config.critic_lr, args.critic_lr, file.critic_lr);
    merge!(train_config.actor_steps, args.actor_steps, file.actor_steps);
    merge!(
        train_config.critic_steps,
        args.critic_steps,
        file.critic_steps
    );
    merge!(model_config.hidden1, args.hidden1, file.hidden1);
    merge!(model_config.hidden2, args.hidden2, file.hidden2);
    merge!(
        model_config.time_scale_mean,
        args.scale_mean,
        file.scale_mean
    );
    if let Some(every) = args.checkpoint_every.or(file.checkpoint_every) {
        train_config.checkpoint_every = Some(every);
    }
    if let Some(text) = &args.epsilon_schedule {
        train_config.epsilon_schedule = parse_epsilon_schedule(text)?;
    } else if let Some(pairs) = &file.epsilon_schedule {
        train_config.epsilon_schedule = pairs
            .iter()
            .map(|&(until_fraction, epsilon)| EpsilonStep {
                until_fraction,
                epsilon,
            })
            .collect();
    }
    if let Some(text) = &args.kl_direction {
        train_config.kl_direction = parse_kl_direction(text)?;
    } else if let Some(text) = &file.kl_direction {
        train_config.kl_direction = parse_kl_direction(text)?;
    }
    if let Some(text) = &args.ffn {
        model_config.ffn_widths = parse_ffn(text)?;
    } else if let Some(widths) = &file.ffn {
        model_config.ffn_widths = widths
            .clone()
            .try_into()
            .map_err(|_| CliError::Config("ffn needs exactly three widths".into()))?;
    }

    let mut state = match &resumed {
        Some(checkpoint) => {
            if model_config != checkpoint.model {
                return Err(CliError::Config(
                    "model widths and feature scale are fixed by the checkpoint; \
                     drop the model flags when resuming"
                        .into(),
                ));
            }
            checkpoint.into_train_state().map_err(data_err)?
        }
        None => TrainState::fresh(model_config, &train_config)?,
    };
    if state.next_episode >= train_config.episodes {
        return Err(CliError::Config(format!(
            "checkpoint is already at episode {}; raise --episodes to continue",
            state.next_episode
        )));
    }

    // On resume the existing log is extended, keeping one continuous file.
    let log_path = args.out.join("log.csv");
    let append = args.resume.is_some() && log_path.exists();
    let mut log_file = if append {
        BufWriter::new(
            fs::OpenOptions::new()
                .append(true)
                .open(&log_path)
                .map_err(data_err)?,
        )
    } else {
        let mut f = BufWriter::new(File::create(&log_path).map_err(data_err)?);
        writeln!(f, "{}", jobshop::ppo::TRAINING_LOG_HEADER).map_err(data_err)?;
        f
    };
    log_file.flush().map_err(data_err)?;

    let mut observer = CliObserver {
        log: log_file,
        out_dir: args.out.clone(),
        train_config: train_config.clone(),
        progress_every: (train_config.episodes / 20).max(1),
        quiet: args.quiet,
    };
    let result = train(&mut state, &dataset, &train_config, &mut observer);
    observer.log.flush().map_err(data_err)?;
    result?;

    let checkpoint_path = args.out.join("checkpoint.json");
    let f = File::create(&checkpoint_path).map_err(data_err)?;
    Checkpoint::from_state(&state, &train_config)
        .write(BufWriter::new(f))
        .map_err(data_err)?;
    println!(
        "trained through episode {}; checkpoint {} log {}",
        state.next_episode,
        checkpoint_path.display(),
        log_path.display()
    );
    Ok(())
}

fn load_instance(path: &Path) -> Result<jobshop::instances::Instance, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    parse_instance(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_actor(path: &Path) -> Result<jobshop::models::ActorNet, CliError> {
    let f = File::open(path)
        .map_err(|e| CliError::Data(format!("cannot open {}: {e}", path.display())))?;
    let checkpoint = Checkpoint::read(f).map_err(data_err)?;
    checkpoint.build_actor().map_err(data_err)
}

fn cmd_solve(args: SolveArgs) -> Result<(), CliError> {
    let instance = load_instance(&args.instance)?;
    let actor = load_actor(&args.checkpoint)?;
    let (schedule, makespan) = greedy_solve(&instance, &actor)?;
    fs::create_dir_all(&args.out).map_err(data_err)?;
    let path = args.out.join("schedule.csv");
    let mut f = BufWriter::new(File::create(&path).map_err(data_err)?);
    write_schedule_csv(&schedule, &mut f).map_err(data_err)?;
    println!("makespan={makespan}");
    Ok(())
}

fn cmd_exact(args: ExactArgs, file: &FileConfig) -> Result<(), CliError> {
    let instance = load_instance(&args.instance)?;
    let time_limit = args.time_limit.or(file.time_limit);
    let result = branch_and_bound(
        &instance,
        BnbOptions {
            time_limit: time_limit.map(Duration::from_secs_f64),
            target: None,
        },
    );
    fs::create_dir_all(&args.out).map_err(data_err)?;
    let path = args.out.join("schedule.csv");
    let mut f = BufWriter::new(File::create(&path).map_err(data_err)?);
    write_schedule_csv(&result.schedule, &mut f).map_err(data_err)?;
    println!(
        "makespan={} optimal={} nodes={}",
        result.makespan, result.optimal, result.nodes
    );
    Ok(())
}

fn cmd_bench(args: BenchArgs, file: &FileConfig) -> Result<(), CliError> {
    let dataset = load_dataset(&args.data)?;
    let actor = load_actor(&args.checkpoint)?;
    let instances: Vec<BenchInstance> = dataset
        .into_iter()
        .map(|e| BenchInstance {
            id: e.id,
            instance: e.instance,
        })
        .collect();
    let mut config = BenchConfig::default();
    if let Some(secs) = args.time_limit.or(file.time_limit) {
        config.time_limit = Duration::from_secs_f64(secs);
    }
    let output = bench(&instances, &actor, config).map_err(|e| CliError::Data(e.to_string()))?;
    fs::create_dir_all(&args.out).map_err(data_err)?;

    fn write_file(
        dir: &Path,
        name: &str,
        f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
    ) -> std::io::Result<()> {
        let mut file = BufWriter::new(File::create(dir.join(name))?);
        f(&mut file)
    }
    write_file(&args.out, "records.csv", |f| {
        write_records_csv(&output.records, f)
    })
    .map_err(data_err)?;
    write_file(&args.out, "summary.csv", |f| {
        write_summary_csv(&output.summary, f)
    })
    .map_err(data_err)?;
    write_file(&args.out, "profile_time.csv", |f| {
        write_profile_csv(&output.time_profile, f)
    })
    .map_err(data_err)?;
    write_file(&args.out, "profile_objective.csv", |f| {
        write_profile_csv(&output.objective_profile, f)
    })
    .map_err(data_err)?;

    for row in &output.summary {
        println!(
            "class {} method {:<6} mean {:.1} std {:.1} max {:.0} min {:.0} avg_tau {:+.3} avg_rho {:+.3}",
            row.class, row.method, row.mean, row.std, row.max, row.min, row.avg_tau, row.avg_rho
        );
    }
    println!("wrote records/summary/profiles to {}", args.out.display());
    Ok(())
}

fn cmd_export(args: ExportArgs) -> Result<(), CliError> {
    let instance = load_instance(&args.instance)?;
    let model = build_milp(&instance);
    let text = export_lp(&model);
    fs::create_dir_all(&args.out).map_err(data_err)?;
    let stem = args
        .instance
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    let path = args.out.join(format!("{stem}.lp"));
    fs::write(&path, text).map_err(data_err)?;
    println!(
        "wrote {} ({} variables, {} constraints, big_m={})",
        path.display(),
        model.variables.len(),
        model.constraints.len(),
        model.big_m
    );
    Ok(())
}
