use std::path::PathBuf;
use std::process::ExitCode;

use asyncflow_harness::commands::{self, DumpOptions, Inputs};
use asyncflow_harness::config::Config;
use asyncflow_harness::exit_code;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "asyncflow", version, about = "Train and evaluate asynchronous flow samplers")]
struct Cli {
    /// TOML configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root under which run directories are created.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct FieldArg {
    /// Learned field checkpoint (not used with an analytic field).
    #[arg(long)]
    field: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the learned velocity field to the target.
    PretrainField {
        /// Continue from a previous field checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the timestep predictor with GRPO.
    TrainTpm {
        #[command(flatten)]
        field: FieldArg,
        /// Continue from a previous predictor checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score sync sampling, or async sampling with a predictor.
    Evaluate {
        #[command(flatten)]
        field: FieldArg,
        #[arg(long)]
        tpm: Option<PathBuf>,
    },
    /// Evaluate a predictor across deviation scales.
    SweepGamma {
        #[command(flatten)]
        field: FieldArg,
        #[arg(long)]
        tpm: PathBuf,
        /// Predictor trained under the lifted bound, added as a comparator row.
        #[arg(long)]
        lifted_tpm: Option<PathBuf>,
    },
    /// Compare velocity scaling against async sampling at matched deviation.
    CompareAlternative {
        #[command(flatten)]
        field: FieldArg,
    },
    /// Record every step of one evaluation rollout.
    DumpTrajectory {
        #[command(flatten)]
        field: FieldArg,
        #[arg(long)]
        tpm: Option<PathBuf>,
        /// Rollout index within the evaluation batch.
        #[arg(long, default_value_t = 0)]
        index: u64,
        /// Class label; defaults to the index modulo the class count.
        #[arg(long)]
        class: Option<usize>,
        /// Sample ratios instead of taking the Beta mode.
        #[arg(long)]
        stochastic: bool,
    },
}

fn run(cli: Cli) -> asyncflow::Result<PathBuf> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = &cli.out;
    match cli.command {
        Command::PretrainField { resume } => commands::pretrain_field(&cfg, out, &Inputs { resume, ..Default::default() }),
        Command::TrainTpm { field, resume } => {
            commands::train_tpm(&cfg, out, &Inputs { field: field.field, resume, ..Default::default() })
        }
        Command::Evaluate { field, tpm } => {
            commands::evaluate(&cfg, out, &Inputs { field: field.field, tpm, ..Default::default() })
        }
        Command::SweepGamma { field, tpm, lifted_tpm } => commands::sweep_gamma(
            &cfg,
            out,
            &Inputs { field: field.field, tpm: Some(tpm), lifted_tpm, ..Default::default() },
        ),
        Command::CompareAlternative { field } => {
            commands::compare_alternative(&cfg, out, &Inputs { field: field.field, ..Default::default() })
        }
        Command::DumpTrajectory { field, tpm, index, class, stochastic } => commands::dump_trajectory(
            &cfg,
            out,
            &Inputs { field: field.field, tpm, ..Default::default() },
            DumpOptions { index, class, stochastic },
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
