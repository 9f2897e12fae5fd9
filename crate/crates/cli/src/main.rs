use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use idm_cli::commands::{self, BenchArgs, Init, RoundtripArgs, TrainArgs};
use idm_cli::Result;
use idm_core::revgraph::Mode;
use idm_core::DType;

#[derive(Parser)]
#[command(name = "idm", version, about = "Invertible U-Net diffusion on 3-D volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Store,
    Invertible,
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchMode {
    Store,
    Invertible,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum DtypeArg {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Identity,
    Random,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Store => Mode::StoreAll,
            ModeArg::Invertible => Mode::InvertibleRecompute,
        }
    }
}

impl From<DtypeArg> for DType {
    fn from(d: DtypeArg) -> DType {
        match d {
            DtypeArg::F32 => DType::F32,
            DtypeArg::F64 => DType::F64,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic phantom volumes and a checksum manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 16)]
        edge: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model; logs one CSV row per step.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: PathBuf,
        /// Override a config value, e.g. `--set steps=100`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Draw volumes from a trained checkpoint.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check that the trunk and each block type invert exactly.
    Roundtrip {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, value_enum, default_value_t = DtypeArg::F64)]
        dtype: DtypeArg,
        #[arg(long, value_enum, default_value_t = InitArg::Random)]
        init: InitArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Measure peak activation memory and FLOPs per training step.
    BenchMem {
        #[arg(long, default_value_t = 16)]
        edge: usize,
        #[arg(long, default_value_t = 3)]
        levels: usize,
        #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
        blocks_list: Vec<usize>,
        #[arg(long, value_enum, default_value_t = BenchMode::Both)]
        mode: BenchMode,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = DtypeArg::F32)]
        dtype: DtypeArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// PSNR, SSIM and MAE between same-named volumes in two directories.
    Metrics {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    let out = &mut stdout;
    match cli.command {
        Command::GenData { out: dir, n, edge, seed } => {
            commands::gen_data(&dir, n, edge, seed, out)?;
        }
        Command::Train {
            config,
            mode,
            out: ckpt,
            log,
            overrides,
        } => {
            let args = TrainArgs {
                config,
                overrides,
                mode: mode.map(Mode::from),
                out: ckpt,
                log,
            };
            commands::train(&args, out)?;
        }
        Command::Sample { ckpt, n, seed, out: dir } => {
            commands::sample(&ckpt, n, seed, &dir, out)?;
        }
        Command::Roundtrip {
            config,
            trials,
            dtype,
            init,
            seed,
            overrides,
        } => {
            let args = RoundtripArgs {
                config,
                overrides,
                trials,
                dtype: dtype.into(),
                init: match init {
                    InitArg::Identity => Init::Identity,
                    InitArg::Random => Init::Random,
                },
                seed,
            };
            commands::roundtrip(&args, out)?;
        }
        Command::BenchMem {
            edge,
            levels,
            blocks_list,
            mode,
            batch,
            seed,
            dtype,
            out: csv,
        } => {
            let modes = match mode {
                BenchMode::Store => vec![Mode::StoreAll],
                BenchMode::Invertible => vec![Mode::InvertibleRecompute],
                BenchMode::Both => vec![Mode::StoreAll, Mode::InvertibleRecompute],
            };
            let args = BenchArgs {
                edge,
                levels,
                blocks: blocks_list,
                modes,
                batch,
                seed,
                dtype: dtype.into(),
                out: csv,
            };
            commands::bench_mem(&args, out)?;
        }
        Command::Metrics { a, b, out: csv } => {
            commands::metrics(&a, &b, &csv, out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
