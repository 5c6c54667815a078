use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use clap::error::ErrorKind;

use streamfx::checkpoint::load_model;
use streamfx::config::{Stage, TrainConfig};
use streamfx::eval::{evaluate, psnr_by_effect, write_eval_csv, Generator};
use streamfx::flow::split_chunks;
use streamfx::model::DenoiserParams;
use streamfx::server::Server;
use streamfx::stream::{schedule_for_steps, throughput_bench, Condition, SessionConfig, StreamSession};
use streamfx::train::{eval_dataset, train_loop};
use streamfx::world::{dump_dataset, generate_dataset, generate_source, load_dataset, ClipDims};
use streamfx::{Error, Result};

// Large per-chunk buffers otherwise go through mmap/munmap until glibc's
// threshold adapts, which shows up as a slow drift in chunk latency.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Streaming video effect generator: data, training, distillation,
/// evaluation, benchmarking and serving.
#[derive(Parser)]
#[command(name = "streamfx", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Dump a toy-world dataset (triplet files plus index.csv).
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 64)]
        count: usize,
    },
    /// Train the bidirectional teacher from scratch.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
    },
    /// Causal adaptation with per-chunk noise levels, from a teacher checkpoint.
    DistillStage1 {
        #[command(flatten)]
        common: Common,
    },
    /// On-policy few-step distillation, from a stage-1 checkpoint.
    DistillStage2 {
        #[command(flatten)]
        common: Common,
    },
    /// Per-clip MSE/PSNR/SSIM over a dataset split, written as CSV.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Dataset dump directory; defaults to a generated held-out split.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Evaluate the copy-input baseline instead of a checkpoint.
        #[arg(long)]
        copy: bool,
        #[arg(long, default_value_t = 4)]
        steps: usize,
        #[arg(long)]
        cfg_scale: Option<f64>,
    },
    /// Per-chunk latency and throughput report.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated sampler step counts.
        #[arg(long, default_value = "4,50")]
        steps: String,
        #[arg(long, default_value_t = 5)]
        window: usize,
        #[arg(long, default_value_t = 50)]
        chunks: usize,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
    },
    /// Serve streaming sessions over length-prefixed JSON and WebSocket.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: String,
    },
}

fn train_config(common: &Common, stage: Stage) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::load(p, stage)?,
        None => TrainConfig::defaults(stage),
    };
    cfg.stage = stage;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("--{flag} is required")))
}

fn load_params(common: &Common) -> Result<DenoiserParams<f32>> {
    Ok(load_model(required(&common.checkpoint, "checkpoint")?)?.0)
}

fn train(common: &Common, stage: Stage) -> Result<()> {
    let cfg = train_config(common, stage)?;
    let init = match stage {
        Stage::Teacher => None,
        _ => Some(load_params(common)?),
    };
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
    let every = (cfg.steps / 20).max(1);
    let outcome = train_loop(&cfg, init, &out, |step, loss| {
        if step % every == 0 {
            eprintln!("{stage} step {step}: loss {loss:.6}");
        }
    })?;
    println!("{}", outcome.checkpoint.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, count } => {
            let cfg = train_config(&common, Stage::Teacher)?;
            let out = required(&common.out, "out")?;
            let ds = generate_dataset(cfg.seed, count, cfg.dims())?;
            println!("{}", dump_dataset(out, &ds)?.display());
        }
        Command::TrainTeacher { common } => train(&common, Stage::Teacher)?,
        Command::DistillStage1 { common } => train(&common, Stage::Stage1)?,
        Command::DistillStage2 { common } => train(&common, Stage::Stage2)?,
        Command::Eval { common, data, count, copy, steps, cfg_scale } => {
            let cfg = train_config(&common, Stage::Stage2)?;
            let ds = match &data {
                Some(d) => load_dataset(d)?,
                None => eval_dataset(&cfg, count)?,
            };
            let params;
            let gen = if copy {
                Generator::Copy
            } else {
                params = load_params(&common)?;
                let window = ds.first().map(|t| t.frames() / params.config.c_frames).unwrap_or(1).max(1);
                Generator::Causal {
                    params: &params,
                    schedule: schedule_for_steps(steps)?,
                    cfg_scale: cfg_scale.unwrap_or(cfg.cfg_scale),
                    window,
                    noise_seed: cfg.seed,
                }
            };
            let rows = evaluate(&gen, &ds)?;
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("eval.csv"));
            write_eval_csv(&out, &rows)?;
            for (e, p) in psnr_by_effect(&rows).iter().enumerate() {
                println!("effect {e}: psnr {p:.3} dB");
            }
        }
        Command::Bench { common, steps, window, chunks, warmup } => {
            let cfg = train_config(&common, Stage::Stage2)?;
            let params = Arc::new(match &common.checkpoint {
                Some(_) => load_params(&common)?,
                None => DenoiserParams::init(cfg.model.clone(), cfg.seed)?,
            });
            let c = &params.config;
            let dims = ClipDims { frames: c.c_frames * 8, height: c.height, width: c.width };
            let source = split_chunks(&generate_source(cfg.seed, dims)?, c.c_frames)?;
            let mut csv = String::from("config,steps,window,chunk_ms_mean,chunk_ms_p95,fps\n");
            let name = common.config.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "default".into());
            for s in steps.split(',') {
                let s: usize = s.trim().parse().map_err(|_| Error::Config(format!("bad step count {s:?}")))?;
                let scfg = SessionConfig { window, steps: s, cfg_scale: cfg.cfg_scale, noise_seed: cfg.seed };
                let factory = || StreamSession::open(Arc::clone(&params), scfg.clone(), Condition::default());
                let (summary, _) = throughput_bench(factory, &source, chunks, warmup)?;
                csv.push_str(&format!("{name},{s},{window},{:.4},{:.4},{:.4}\n", summary.mean_ms, summary.p95_ms, summary.fps));
            }
            match &common.out {
                Some(p) => std::fs::write(p, &csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Serve { common, addr } => {
            let params = Arc::new(load_params(&common)?);
            let server = Server::bind(addr.as_str(), params)?;
            eprintln!("listening on {}", server.local_addr()?);
            server.run()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
