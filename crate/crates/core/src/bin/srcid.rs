use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use srcid::cli::{self, ProblemConfig, RunRecord, OUTPUT_DIR_ENV};
use srcid::{Error, Result};

/// Source identification in advection-diffusion flows.
#[derive(Debug, Parser)]
#[command(name = "srcid", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML problem configuration; built-in desk problem when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config and the environment).
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Noise seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for assembly.
    #[arg(long)]
    threads: Option<usize>,
    /// Write every k-th shape iterate.
    #[arg(long)]
    snapshot_stride: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate measurements for the configured geometry.
    Generate(Common),
    /// Solve the relaxed problem and write the initial level set.
    Relax(Common),
    /// Run shape optimization from an initial level set.
    Shape {
        #[command(flatten)]
        common: Common,
        /// Initial level set; defaults to phi0.srcf in the output directory.
        #[arg(long)]
        initial: Option<PathBuf>,
    },
    /// Run the full pipeline.
    Run(Common),
    /// Compare a level set with the truth.
    Metrics { phi: PathBuf, truth: PathBuf },
    /// Print the built-in configuration as TOML.
    Config,
}

fn load(common: &Common) -> Result<(ProblemConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(path) => ProblemConfig::load(path)?,
        None => ProblemConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.data.noise.seed = seed;
    }
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    if let Some(k) = common.snapshot_stride {
        cfg.output.snapshot_stride = k;
    }
    if let Some(dir) = common
        .output
        .clone()
        .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
    {
        cfg.output.dir = dir;
    }
    cfg.validate()?;
    let out = cfg.output.dir.clone();
    Ok((cfg, out))
}

fn staged(common: &Common, run: impl FnOnce(&ProblemConfig, &Path) -> Result<RunRecord> + Send) -> Result<i32> {
    let (cfg, out) = load(common)?;
    let record = cli::with_threads(cfg.threads, || run(&cfg, &out))??;
    if let Some(f) = &record.failure {
        error!("{} stage failed: {}", f.stage, f.message);
    }
    println!("{}", out.join(cli::commands::RECORD_FILE).display());
    Ok(if record.succeeded() {
        cli::EXIT_OK
    } else {
        cli::EXIT_NOT_CONVERGED
    })
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Generate(common) => {
            let (cfg, out) = load(&common)?;
            let files = cli::with_threads(cfg.threads, || cli::cmd_generate(&cfg, &out))??;
            for p in [&files.truth, &files.reference, &files.measurements, &files.mask] {
                println!("{}", p.display());
            }
            Ok(cli::EXIT_OK)
        }
        Command::Relax(common) => staged(&common, cli::cmd_relax),
        Command::Shape { common, initial } => staged(&common, |cfg, out| cli::cmd_shape(cfg, out, initial.as_deref())),
        Command::Run(common) => staged(&common, cli::cmd_run),
        Command::Metrics { phi, truth } => {
            let report = cli::cmd_metrics(&phi, &truth)?;
            let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Format {
                path: "metrics".into(),
                reason: e.to_string(),
            })?;
            println!("{text}");
            Ok(cli::EXIT_OK)
        }
        Command::Config => {
            print!("{}", ProblemConfig::default().to_toml()?);
            Ok(cli::EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Cli::parse();
    let code = match dispatch(args.command) {
        Ok(code) => code,
        Err(e) => {
            error!("{e}");
            cli::exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}
