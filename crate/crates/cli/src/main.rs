use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use localmim::bench::{run_bench, BenchSetup};
use localmim::mve::parse_counts;
use localmim::run::{self, RunDir};
use localmim::synth::Split;
use localmim::{Error, Result, RunConfig};

/// Masked local-field pretraining and segmentation finetuning on synthetic
/// PCB-CT scenes.
#[derive(Parser, Debug)]
#[command(name = "localmim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// Flat `key = value` config file; the toy preset when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (defaults to `runs/<command>`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace an existing output directory.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads; training itself is single-threaded.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Data directory written by `gen-data`; regenerated in memory otherwise.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the file and before the
    /// environment.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic train/val/test splits and their manifest.
    GenData,
    /// Teacher-guided masked reconstruction pretraining.
    Pretrain,
    /// Segmentation finetuning from a pretraining checkpoint or from scratch.
    Finetune {
        #[arg(long, conflicts_with = "scratch", required_unless_present = "scratch")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        scratch: bool,
    },
    /// Per-class IoU of a finetuned checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Export this many predicted and ground-truth label PNGs.
        #[arg(long, default_value_t = 0)]
        png: usize,
    },
    /// Global versus windowed decoder attention cost.
    Bench {
        /// Comma-separated grid sides.
        #[arg(long)]
        grids: Option<String>,
        /// Window plan such as `5x4+7x2+9x1`.
        #[arg(long)]
        plan: Option<String>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// One pretraining run per value of a config axis.
    Sweep {
        /// `mask_ratio`, `decoder_depth`, `window_plan`, `dataset_size` or any config key.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::toy(),
    };
    for kv in &common.sets {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config {
            field: kv.clone(),
            msg: "expected KEY=VALUE".into(),
        })?;
        cfg.set_value(k.trim(), v.trim())?;
    }
    cfg.apply_env(std::env::vars())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = common.threads {
        cfg.threads = threads;
    }
    cfg.validate()?;
    if cfg.threads > 1 {
        log::warn!(
            "threads = {}: optimizer steps still run on one thread",
            cfg.threads
        );
    }
    Ok(cfg)
}

fn out_dir(common: &Common, default: &str) -> PathBuf {
    common
        .out
        .clone()
        .unwrap_or_else(|| Path::new("runs").join(default))
}

fn execute(cli: Cli) -> Result<()> {
    let common = &cli.common;
    let cfg = load_config(common)?;
    let data = common.data.as_deref();
    match cli.command {
        Command::GenData => {
            let dir = RunDir::create(&out_dir(common, "data"), common.force)?;
            run::gen_data(&cfg, &dir.path)?;
            dir.write_config(&cfg)?;
            println!(
                "wrote {} samples to {}",
                cfg.n_train + cfg.n_val + cfg.n_test,
                dir.path.display()
            );
        }
        Command::Pretrain => {
            let dir = RunDir::create(&out_dir(common, "pretrain"), common.force)?;
            let summary = run::run_pretrain(&cfg, data, &dir)?;
            let first = summary.epoch_losses.first().copied().unwrap_or(f64::NAN);
            let last = summary.epoch_losses.last().copied().unwrap_or(f64::NAN);
            println!(
                "pretrained {} steps: epoch loss {first:.5} -> {last:.5}; run in {}",
                summary.steps,
                dir.path.display()
            );
        }
        Command::Finetune { checkpoint, .. } => {
            let dir = RunDir::create(&out_dir(common, "finetune"), common.force)?;
            let (_, report) = run::run_finetune(&cfg, checkpoint.as_deref(), data, &dir)?;
            println!(
                "test mIoU {:.4}; run in {}",
                report.mean,
                dir.path.display()
            );
        }
        Command::Eval {
            checkpoint,
            split,
            png,
        } => {
            let dir = RunDir::create(&out_dir(common, "eval"), common.force)?;
            let split = Split::parse(&split)?;
            let report = run::run_eval(&checkpoint, split, data, &dir, png)?;
            print!(
                "{}",
                std::fs::read_to_string(dir.file("eval.csv")).unwrap_or_default()
            );
            log::info!("pixel accuracy {:.4}", report.pixel_accuracy);
        }
        Command::Bench {
            grids,
            plan,
            trials,
        } => {
            let grids = match grids {
                Some(g) => g
                    .split(',')
                    .map(|s| s.trim().parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::Config {
                        field: "grids".into(),
                        msg: e.to_string(),
                    })?,
                None => cfg.bench_grids.clone(),
            };
            let setup = BenchSetup {
                stack: cfg.decoder(),
                window_plan: match plan {
                    Some(p) => parse_counts(&p)?,
                    None => cfg.bench_window_plan.clone(),
                },
                trials: trials.unwrap_or(cfg.bench_trials),
                warmup: 2,
                seed: cfg.seed,
            };
            let dir = RunDir::create(&out_dir(common, "bench"), common.force)?;
            dir.write_config(&cfg)?;
            let report = run_bench(&grids, &setup)?;
            let json = dir.file("bench.json");
            std::fs::write(&json, serde_json::to_vec_pretty(&report)?).map_err(|e| Error::Io {
                path: json.clone(),
                source: e,
            })?;
            let table = report.table();
            let txt = dir.file("bench.txt");
            std::fs::write(&txt, &table).map_err(|e| Error::Io {
                path: txt.clone(),
                source: e,
            })?;
            print!("{table}");
        }
        Command::Sweep { axis, values } => {
            let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
            let root = out_dir(common, "sweep");
            let dirs = run::run_sweep(&cfg, &axis, &values, data, &root, common.force)?;
            for d in dirs {
                println!("{}", d.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
