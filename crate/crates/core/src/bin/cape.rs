use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cape::embedding::PeMode;
use cape::harness::{
    self, ablate, dump_attention, eval, robustness_sweep, train, Checkpoint, ExperimentConfig, HarnessError,
};
use cape::scenegen::{generate_scene, save_scene};

/// Train, evaluate and probe camera-view position embedding detectors on
/// synthetic multi-camera scenes.
#[derive(Parser)]
#[command(name = "cape", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON). Missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the experiment seed (the first scene seed for `gen-data`).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write `checkpoint.json` and `train_log.jsonl`.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the held-out scenes; writes `eval_metrics.json`.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/checkpoint.json`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate every row of an ablation table.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = clap::value_parser!(u8).range(4..=7))]
        table: u8,
        /// Number of consecutive seeds starting at the experiment seed.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Evaluate under inference-time extrinsic noise.
    Robustness {
        #[command(flatten)]
        common: Common,
        /// Checkpoints to sweep. Without any, camera-view and global models
        /// are trained from the config first.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        /// Maximum rotation angles in degrees.
        #[arg(long, value_delimiter = ',', default_value = "0,2,4,8")]
        levels: Vec<f64>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
    /// Write attention maps of one scene as CSV files plus a manifest.
    DumpAttn {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/checkpoint.json`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Scene seed; defaults to the first held-out scene.
        #[arg(long)]
        scene: Option<u64>,
        /// Query ids; defaults to all.
        #[arg(long, value_delimiter = ',')]
        queries: Vec<usize>,
    },
    /// Write generated scenes as JSON plus binary feature sidecars.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10)]
        count: usize,
    },
}

/// Outcome of a command that ran to completion.
enum Status {
    Ok,
    Diverged,
}

fn load_config(common: &Common) -> harness::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn load_checkpoint(path: Option<&PathBuf>, out: &Path) -> harness::Result<Checkpoint> {
    let default = out.join("checkpoint.json");
    Checkpoint::load(path.unwrap_or(&default))
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("value serializes"));
}

fn run(command: Command) -> harness::Result<Status> {
    match command {
        Command::Train { common } => {
            let cfg = load_config(&common)?;
            let outcome = train(&cfg, Some(&common.out), true)?;
            eprintln!("wrote {}", common.out.join("checkpoint.json").display());
            if let Some(d) = outcome.diverged {
                eprintln!(
                    "diverged at step {}; diagnostics in {}",
                    d.step,
                    common.out.join("divergence.json").display()
                );
                return Ok(Status::Diverged);
            }
            Ok(Status::Ok)
        }
        Command::Eval { common, checkpoint } => {
            let ckpt = load_checkpoint(checkpoint.as_ref(), &common.out)?;
            let cfg = match &common.config {
                Some(_) => load_config(&common)?,
                None => ckpt.config.clone(),
            };
            let record = eval(&ckpt, &cfg, Some(&common.out))?;
            print_json(&record);
            Ok(Status::Ok)
        }
        Command::Ablate { common, table, seeds } => {
            let cfg = load_config(&common)?;
            let seeds: Vec<u64> = (0..seeds).map(|i| cfg.seed.wrapping_add(i)).collect();
            let result = ablate(&cfg, table, &seeds, Some(&common.out))?;
            print!("{}", result.render());
            Ok(if result.rows.iter().any(|r| r.diverged) {
                Status::Diverged
            } else {
                Status::Ok
            })
        }
        Command::Robustness {
            common,
            checkpoint,
            levels,
            trials,
        } => {
            let cfg = load_config(&common)?;
            let checkpoints = if checkpoint.is_empty() {
                let mut trained = Vec::new();
                for (label, mode) in [("camera", PeMode::Camera), ("global", PeMode::Global)] {
                    let mut c = cfg.clone();
                    c.model.pe_mode = mode;
                    let dir = common.out.join(label);
                    let outcome = train(&c, Some(&dir), false)?;
                    if outcome.diverged.is_some() {
                        eprintln!("{label} model diverged; sweeping its last finite state");
                    }
                    trained.push((label.to_string(), outcome.checkpoint));
                }
                trained
            } else {
                checkpoint
                    .iter()
                    .map(|p| Ok((p.display().to_string(), Checkpoint::load(p)?)))
                    .collect::<harness::Result<_>>()?
            };
            let report = robustness_sweep(&checkpoints, &levels, trials, cfg.seed, Some(&common.out))?;
            for c in &report.curves {
                let drops: Vec<String> = c
                    .levels
                    .iter()
                    .zip(&c.mean_drop)
                    .map(|(l, d)| format!("{l}°: {d:+.4}"))
                    .collect();
                println!("{}  clean mAP {:.4}  drop {}", c.label, c.clean_map, drops.join("  "));
            }
            Ok(Status::Ok)
        }
        Command::DumpAttn {
            common,
            checkpoint,
            scene,
            queries,
        } => {
            let ckpt = load_checkpoint(checkpoint.as_ref(), &common.out)?;
            let scene = scene.unwrap_or_else(|| ckpt.config.eval_seed(0));
            let queries = if queries.is_empty() {
                (0..ckpt.config.model.queries).collect()
            } else {
                queries
            };
            let dir = common.out.join("attention");
            let manifest = dump_attention(&ckpt, scene, &queries, &dir)?;
            println!("wrote {} maps to {}", manifest.maps.len(), dir.display());
            Ok(Status::Ok)
        }
        Command::GenData { common, count } => {
            let mut cfg = load_config(&common)?;
            if let Some(seed) = common.seed {
                cfg.data.seed = seed;
            }
            std::fs::create_dir_all(&common.out).map_err(|source| HarnessError::Io {
                path: common.out.display().to_string(),
                source,
            })?;
            for i in 0..count {
                let seed = cfg.data.seed.wrapping_add(i as u64);
                let sample = generate_scene(&cfg.data, seed)?;
                save_scene(&sample, &common.out.join(format!("scene_{seed:08}.json")))?;
            }
            println!("wrote {count} scenes to {}", common.out.display());
            Ok(Status::Ok)
        }
    }
}

/// Sizes the global worker pool from `CAPE_THREADS`.
fn init_threads() -> Result<(), String> {
    let Ok(value) = std::env::var("CAPE_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("CAPE_THREADS must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match run(cli.command) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Diverged) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
