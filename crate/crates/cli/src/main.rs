use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use prssm::checkpoint::Checkpoint;
use prssm::data::{
    generate_linear_ssm, kalman_free_simulation_rmse, load_csv, load_csv_dir, write_csv, LinearSsmSpec, NormStats,
    Trajectory,
};
use prssm::eval::{evaluate_narx, evaluate_prssm, run_benchmark, BenchmarkConfig, Evaluation};
use prssm::narx::{fit_narx, NarxConfig};
use prssm::train::{fit, write_log_csv, TrainConfig};

#[derive(Parser)]
#[command(
    name = "prssm",
    version,
    about = "Train and evaluate probabilistic recurrent state-space models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelKind {
    Prssm,
    Narx,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and write `checkpoint.json` and `train_log.csv`.
    Train {
        #[command(flatten)]
        common: Common,
        /// CSV file or directory of CSV files, one per experiment.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "prssm")]
        model: ModelKind,
    },
    /// Score a checkpoint on held-out data and write `metrics.json` and `trace.csv`.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Leading steps excluded from the scores; defaults to the model's warm-start length.
        #[arg(long)]
        warmup: Option<usize>,
        /// Monte Carlo samples for PR-SSM predictions.
        #[arg(long, default_value_t = 100)]
        samples: usize,
    },
    /// Free-simulate a checkpoint and write `trace.csv`.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 100)]
        samples: usize,
    },
    /// Run every method on every configured dataset and seed.
    Benchmark {
        #[command(flatten)]
        common: Common,
        /// Directory of benchmark CSV files.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Parallel cells; defaults to the number of hardware threads.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Generate the synthetic linear system and its Kalman reference RMSE.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Steps given to the filter before open-loop prediction.
        #[arg(long, default_value_t = 16)]
        window: usize,
    },
}

/// Failures split by exit code.
enum Failure {
    /// Bad arguments, configuration or input files.
    Usage(String),
    /// Training or prediction failed.
    Runtime(String),
}

impl From<prssm::Error> for Failure {
    fn from(e: prssm::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CliResult<T> = Result<T, Failure>;

fn usage(e: impl ToString) -> Failure {
    Failure::Usage(e.to_string())
}

fn read_config<T: DeserializeOwned + Default>(path: &Option<PathBuf>) -> CliResult<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", p.display())))
        }
    }
}

fn load_data(path: &Path) -> CliResult<Vec<Trajectory>> {
    if !path.exists() {
        return Err(usage(format!("data path {} does not exist", path.display())));
    }
    let trajs = if path.is_dir() {
        load_csv_dir(path)
    } else {
        load_csv(path).map(|t| vec![t])
    };
    trajs.map_err(usage)
}

fn load_single(path: &Path) -> CliResult<Trajectory> {
    let mut trajs = load_data(path)?;
    if trajs.len() != 1 {
        return Err(usage(format!("{} must hold exactly one trajectory", path.display())));
    }
    Ok(trajs.remove(0))
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    if !path.exists() {
        return Err(usage(format!("checkpoint {} does not exist", path.display())));
    }
    Checkpoint::load(path).map_err(usage)
}

fn create_out(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn train(common: &Common, data: &Path, model: ModelKind) -> CliResult<()> {
    let trajs = load_data(data)?;
    let refs: Vec<&Trajectory> = trajs.iter().collect();
    let stats = NormStats::from_training(&refs)?;
    let norm: Vec<Trajectory> = trajs.iter().map(|t| stats.normalize(t)).collect::<prssm::Result<_>>()?;
    create_out(&common.out)?;
    let ckpt = match model {
        ModelKind::Prssm => {
            let mut cfg: TrainConfig = read_config(&common.config)?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            cfg.validate().map_err(usage)?;
            let result = fit(&norm, &cfg)?;
            write_log_csv(common.out.join("train_log.csv"), &result.log)?;
            Checkpoint::prssm(result.params, cfg, stats)
        }
        ModelKind::Narx => {
            let mut cfg: NarxConfig = read_config(&common.config)?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            cfg.validate().map_err(usage)?;
            if norm.len() != 1 {
                return Err(usage("the NARX baseline trains on a single trajectory"));
            }
            Checkpoint::narx(fit_narx(&norm[0], &cfg)?, stats)
        }
    };
    ckpt.save(common.out.join("checkpoint.json"))?;
    log::info!("wrote {}", common.out.join("checkpoint.json").display());
    Ok(())
}

fn warm_start(ckpt: &Checkpoint) -> usize {
    match ckpt {
        Checkpoint::Prssm { params, .. } => params.recognition.as_ref().map_or(0, |r| r.window),
        Checkpoint::Narx { model, .. } => model.config.history(),
    }
}

fn predict(
    ckpt: &Checkpoint,
    data: &Path,
    warmup: Option<usize>,
    samples: usize,
    seed: Option<u64>,
) -> CliResult<Evaluation> {
    let traj = load_single(data)?;
    if traj.input_dim() != ckpt.input_dim() || traj.output_dim() != ckpt.output_dim() {
        return Err(Failure::Runtime(format!(
            "checkpoint expects {} inputs and {} outputs, {} has {} and {}",
            ckpt.input_dim(),
            ckpt.output_dim(),
            data.display(),
            traj.input_dim(),
            traj.output_dim()
        )));
    }
    let test = ckpt.norm().normalize(&traj)?;
    let warmup = warmup.unwrap_or_else(|| warm_start(ckpt));
    let eval = match ckpt {
        Checkpoint::Prssm { params, seed: s, .. } => {
            evaluate_prssm(params, ckpt.norm(), &test, warmup, samples, seed.unwrap_or(*s))?
        }
        Checkpoint::Narx { model, .. } => evaluate_narx(model, ckpt.norm(), &test, warmup)?,
    };
    Ok(eval)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { common, data, model } => train(&common, &data, model),
        Command::Evaluate {
            common,
            checkpoint,
            data,
            warmup,
            samples,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let eval = predict(&ckpt, &data, warmup, samples, common.seed)?;
            create_out(&common.out)?;
            eval.trace.write_csv(common.out.join("trace.csv"))?;
            log::info!("rmse {:.6} nll {:.6}", eval.rmse, eval.nll);
            write_json(
                &common.out.join("metrics.json"),
                &serde_json::json!({
                    "rmse": eval.rmse,
                    "nll": eval.nll,
                    "rmse_denormalized": eval.rmse_denormalized,
                }),
            )
        }
        Command::Simulate {
            common,
            checkpoint,
            data,
            samples,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let eval = predict(&ckpt, &data, Some(0), samples, common.seed)?;
            create_out(&common.out)?;
            eval.trace.write_csv(common.out.join("trace.csv"))?;
            Ok(())
        }
        Command::Benchmark { common, data, jobs } => {
            let mut cfg: BenchmarkConfig = read_config(&common.config)?;
            if let Some(d) = data {
                cfg.data_dir = d;
            }
            if let Some(s) = common.seed {
                cfg.seeds = vec![s];
            }
            cfg.train.validate().map_err(usage)?;
            cfg.narx.validate().map_err(usage)?;
            let jobs = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let report = run_benchmark(&cfg, jobs)?;
            report.write(&common.out)?;
            if report.n_ok() == 0 && !report.rows.is_empty() {
                return Err(Failure::Runtime("every benchmark cell failed".into()));
            }
            Ok(())
        }
        Command::Synth { common, window } => {
            let spec: LinearSsmSpec = read_config(&common.config)?;
            spec.validate().map_err(usage)?;
            let (train, test) = generate_linear_ssm(&spec, common.seed.unwrap_or(0))?;
            let oracle = kalman_free_simulation_rmse(&spec, &test, window)?;
            create_out(&common.out)?;
            write_csv(common.out.join("train.csv"), &train)?;
            write_csv(common.out.join("test.csv"), &test)?;
            write_json(
                &common.out.join("oracle.json"),
                &serde_json::json!({ "kalman_rmse": oracle, "window": window }),
            )
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
