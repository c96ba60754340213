use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use seascan::sim::Difficulty;

use seascan_cli::commands::{self, BenchKind, Source};
use seascan_cli::config::ExperimentConfig;
use seascan_cli::error::{CliError, CliResult};
use seascan_cli::train;

#[derive(Parser)]
#[command(name = "seascan", version, about = "Underwater image enhancement with a dual-domain selective-scan network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "easy")]
        difficulty: Difficulty,
        /// Overwrite an existing dataset.
        #[arg(long)]
        force: bool,
    },
    /// Train a model from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from the checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
        /// Stop (and checkpoint) once this many steps are done.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Enhance one image.
    Enhance {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
        /// Rescale images whose size differs from the model's.
        #[arg(long)]
        resize: bool,
    },
    /// Score a dataset with PSNR, SSIM and FSIM.
    Eval {
        /// Without a model the source images are scored as they are.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value = "degraded")]
        source: Source,
    },
    /// Time the selective scan over doubling sequence lengths.
    BenchScan {
        #[arg(long, value_delimiter = ',', default_value = "2048,4096,8192")]
        lens: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 8)]
        state: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, value_enum, default_value = "scan")]
        kind: BenchKind,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("HM_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("HM_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn run(cli: Cli) -> CliResult<()> {
    init_threads()?;
    match cli.command {
        Command::GenData {
            out,
            n,
            size,
            seed,
            difficulty,
            force,
        } => println!("{}", commands::gen_data(&out, n, size, seed, difficulty, force)?),
        Command::Train {
            config,
            resume,
            stop_after,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let summary = train::run(&cfg, &train::TrainOptions { resume, stop_after })?;
            match summary.best {
                Some((step, p, s)) => println!("best eval psnr {p:.4} dB ssim {s:.4} at step {step}"),
                None => println!("stopped after {} steps", summary.steps_done),
            }
        }
        Command::Enhance {
            model,
            input,
            output,
            resize,
        } => commands::enhance(&model, &input, &output, resize)?,
        Command::Eval {
            model,
            data,
            report,
            source,
        } => {
            let outcome = commands::eval(model.as_deref(), &data, &report, source)?;
            let a = &outcome.aggregate;
            println!(
                "mean over {} images: psnr {:.4} dB (std {:.4}) ssim {:.4} (std {:.4}) fsim {:.4} (std {:.4})",
                a.count, a.psnr_mean, a.psnr_std, a.ssim_mean, a.ssim_std, a.fsim_mean, a.fsim_std
            );
            if !outcome.failures.is_empty() {
                for f in &outcome.failures {
                    eprintln!("failed: {f}");
                }
                return Err(CliError::Data(format!("{} pairs could not be evaluated", outcome.failures.len())));
            }
        }
        Command::BenchScan {
            lens,
            dim,
            state,
            reps,
            kind,
            out,
        } => {
            let rows = commands::bench_scan(&lens, dim, state, reps, kind)?;
            commands::write_probe_csv(&rows, out.as_ref())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
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
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
