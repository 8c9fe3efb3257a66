use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kmds_core::experiment::{cmd_denoise, cmd_evaluate, cmd_simulate, load_denoise_config, ExperimentSpec};
use kmds_core::io::{to_json_pretty, write_text};
use kmds_core::metrics::{metrics_csv, EvalParams, Peak};
use kmds_core::oracle::{run_oracle_checks, OracleCaps};
use kmds_core::pipeline::DenoiseConfig;
use kmds_core::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

/// Kernel-space multidimensional sparse denoising for dynamic PET.
#[derive(Debug, Parser)]
#[command(name = "kmds", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML configuration (experiment file, or denoiser settings).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed, overriding the one in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Also write α, β, α̂ and the kernel for each denoised input.
    #[arg(long, global = true)]
    debug_dumps: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a phantom study: truth, noisy realizations, ROIs, manifest.
    Simulate,
    /// Denoise tensor files.
    Denoise {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Per-frame PSNR, SSIM, bias and NSD against the truth.
    Evaluate {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        rois: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = PeakArg::RefMax)]
        peak: PeakArg,
        #[arg(required = true)]
        outputs: Vec<PathBuf>,
    },
    /// Compare the fast tensor paths with dense reference implementations.
    OracleCheck {
        #[arg(long, default_value_t = 50)]
        instances: usize,
        /// Largest dims per mode, e.g. 4,4,3,3.
        #[arg(long, value_parser = parse_dims, default_value = "4,4,3,3")]
        max_dims: [usize; 4],
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PeakArg {
    RefMax,
    NormalizedMax,
}

enum Failure {
    Core(Error),
    Oracle(Vec<String>),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config(_) => EXIT_USAGE,
        Error::Divergence { .. } => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

fn experiment(global: &GlobalArgs) -> Result<ExperimentSpec, Error> {
    let mut spec = match &global.config {
        Some(p) => ExperimentSpec::load(p)?,
        None => ExperimentSpec::default(),
    };
    if let Some(s) = global.seed {
        spec.seed = s;
        spec.seeds = None;
    }
    spec.denoise.debug_dumps |= global.debug_dumps;
    Ok(spec)
}

fn denoise_config(global: &GlobalArgs) -> Result<DenoiseConfig, Error> {
    let mut cfg = match &global.config {
        Some(p) => load_denoise_config(p)?,
        None => DenoiseConfig::default(),
    };
    cfg.debug_dumps |= global.debug_dumps;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let g = &cli.global;
    match cli.command {
        Command::Simulate => {
            let spec = experiment(g)?;
            let m = cmd_simulate(&spec, &g.out)?;
            println!("{}", g.out.join(kmds_core::experiment::MANIFEST_FILE).display());
            log::info!("config hash {}", m.config_hash);
        }
        Command::Denoise { inputs } => {
            let cfg = denoise_config(g)?;
            for f in cmd_denoise(&inputs, &cfg, &g.out)? {
                println!("{}", f.x_hat.display());
            }
        }
        Command::Evaluate {
            truth,
            rois,
            peak,
            outputs,
        } => {
            let params = EvalParams {
                peak: match peak {
                    PeakArg::RefMax => Peak::RefMax,
                    PeakArg::NormalizedMax => Peak::NormalizedMax,
                },
                ..Default::default()
            };
            let csv = g.out.join("metrics.csv");
            let rows = cmd_evaluate(&truth, &outputs, rois.as_deref(), &params, Some(&csv))?;
            print!("{}", metrics_csv(&rows));
        }
        Command::OracleCheck { instances, max_dims } => {
            let caps = OracleCaps {
                max_dims,
                instances,
                seed: g.seed.unwrap_or(0),
            };
            let report = run_oracle_checks(&caps)?;
            write_text(&g.out.join("oracle_report.json"), &to_json_pretty(&report))?;
            print!("{}", report.to_text());
            if !report.passed() {
                return Err(Failure::Oracle(report.failed().into_iter().map(String::from).collect()));
            }
        }
    }
    Ok(())
}

fn parse_dims(s: &str) -> Result<[usize; 4], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{:?}: {}", p, e)))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|v: Vec<usize>| format!("expected 4 comma-separated sizes, got {}", v.len()))
}

fn configure_threads(n: usize) -> Result<(), String> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(e) = configure_threads(cli.global.threads) {
        eprintln!("error: cannot start thread pool: {}", e);
        return ExitCode::from(EXIT_USAGE);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => {
            eprintln!("error: {}", e);
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Oracle(names)) => {
            eprintln!("error: oracle mismatch in {}", names.join(", "));
            ExitCode::from(EXIT_NUMERICAL)
        }
    }
}
