use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use ndssm_cli::{
    apply_overrides, bench_preset, cmd_bench, cmd_kernel, cmd_render, cmd_train, cmd_zeroshot, configure_threads,
    load_config, parse_resolutions, CliError, CliResult, Overrides,
};
use ndssm_core::model::Precision;

#[derive(Parser)]
#[command(
    name = "ndssm",
    version,
    about = "Multidimensional state-space kernels: kernels, training, zero-shot evaluation"
)]
struct Cli {
    /// Experiment config file, or `preset:cifar-like` / `preset:celeb-like`.
    #[arg(long, global = true, default_value = "preset:cifar-like")]
    config: String,
    /// Overrides train.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides train.precision (f32 or f64).
    #[arg(long, global = true)]
    precision: Option<Precision>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Assemble the configured kernel at the data and test resolutions.
    Kernel,
    /// Train a model, writing metrics, checkpoints and a summary.
    Train,
    /// Evaluate checkpoints at several resolutions without retraining.
    Zeroshot {
        /// Checkpoint file; repeat for several models.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        /// Comma-separated list such as `8,16,32` or `8x8,32x32`; defaults to the config's test resolutions.
        #[arg(long)]
        resolutions: Option<String>,
    },
    /// Profile one FFT convolution and report the time spent in each stage.
    Bench {
        /// `paper-fig9` ([64, 224, 224]) or `small`.
        #[arg(long, default_value = "paper-fig9")]
        preset: String,
        /// Input shape `[batch, L...]` overriding the preset, e.g. `16x128x128`.
        #[arg(long)]
        input: Option<String>,
        #[arg(long, default_value_t = 3)]
        repetitions: usize,
    },
    /// Render the configured synthetic dataset to containers and previews.
    RenderData,
}

fn parse_shape(text: &str) -> CliResult<Vec<usize>> {
    text.split('x').map(|v| v.trim().parse().map_err(|_| CliError::config(format!("invalid shape {text:?}")))).collect()
}

fn print_json<T: serde::Serialize>(value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::new(1, e.to_string()))?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = configure_threads()? {
        info!("using {n} worker threads");
    }
    let overrides = Overrides { seed: cli.seed, precision: cli.precision };
    match cli.command {
        Command::Bench { preset, input, repetitions } => {
            let (mut shape, mut kernel) = bench_preset(&preset)?;
            if let Some(text) = input {
                shape = parse_shape(&text)?;
                kernel = shape[1..].to_vec();
            }
            let report = cmd_bench(Some(&preset), &shape, &kernel, repetitions)?;
            std::fs::create_dir_all(&cli.out)?;
            let path = cli.out.join("bench.json");
            std::fs::write(&path, serde_json::to_string_pretty(&report).map_err(|e| CliError::new(1, e.to_string()))?)?;
            info!("{}", report.note);
            print_json(&report)
        }
        command => {
            let cfg = apply_overrides(load_config(&cli.config)?, &overrides)?;
            match command {
                Command::Kernel => print_json(&cmd_kernel(&cfg, &cli.out)?),
                Command::Train => print_json(&cmd_train(&cfg, &cli.out)?),
                Command::Zeroshot { checkpoints, resolutions } => {
                    let res = match resolutions {
                        Some(text) => parse_resolutions(&text)?,
                        None => cfg.eval_resolutions(),
                    };
                    print_json(&cmd_zeroshot(&cfg, &checkpoints, &res)?)
                }
                Command::RenderData => print_json(&cmd_render(&cfg, &cli.out)?),
                Command::Bench { .. } => unreachable!("handled above"),
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
