use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use units::commands::{self, InferOptions, RunOptions};
use units::Result;

/// Unified multi-task time-series model: training, evaluation and inference.
#[derive(Parser, Debug)]
#[command(name = "units", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the config's `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    from_checkpoint: Option<PathBuf>,
}

impl RunArgs {
    fn options(&self) -> RunOptions {
        RunOptions {
            config: self.config.clone(),
            seed: self.seed,
            out: self.out.clone(),
            from_checkpoint: self.from_checkpoint.clone(),
        }
    }
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    from_checkpoint: PathBuf,
    /// CSV with a header row and one row per timestep.
    #[arg(long)]
    input: PathBuf,
    /// Token set to use; optional when the checkpoint has one source.
    #[arg(long)]
    source: Option<String>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Force per-sample normalization on or off.
    #[arg(long)]
    normalize: Option<bool>,
}

impl InferArgs {
    fn options(&self) -> InferOptions {
        InferOptions {
            checkpoint: self.from_checkpoint.clone(),
            input: self.input.clone(),
            source: self.source.clone(),
            out: self.out.clone(),
            normalize: self.normalize,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Unified masked-reconstruction pretraining over every manifest dataset.
    Pretrain(RunArgs),
    /// Supervised multi-task co-training (or single-task when configured).
    Train(RunArgs),
    /// Tune only task tokens of a pretrained checkpoint.
    PromptTune(RunArgs),
    /// Test-split metrics for every manifest task.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        anomaly_ratio: Option<f64>,
    },
    /// Direct multi-step forecast of `horizon_tokens · patch` steps.
    Forecast {
        #[command(flatten)]
        io: InferArgs,
        #[arg(long, default_value_t = 1)]
        horizon_tokens: usize,
    },
    /// Fill the timesteps marked 1 in a single-column mask CSV.
    Impute {
        #[command(flatten)]
        io: InferArgs,
        #[arg(long)]
        mask_csv: Option<PathBuf>,
    },
    /// Flag timesteps whose reconstruction error exceeds a threshold.
    Detect {
        #[command(flatten)]
        io: InferArgs,
        #[arg(long)]
        anomaly_ratio: Option<f64>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Cosine similarity between the prompt tokens of every source.
    AnalyzePrompts {
        #[arg(long)]
        from_checkpoint: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(a) => commands::cmd_pretrain(&a.options()).map(drop),
        Command::Train(a) => commands::cmd_train(&a.options()).map(drop),
        Command::PromptTune(a) => commands::cmd_prompt_tune(&a.options()).map(drop),
        Command::Eval { run, anomaly_ratio } => {
            for m in commands::cmd_eval(&run.options(), anomaly_ratio)? {
                println!("{},{},{}", m.dataset, m.name, m.value);
            }
            Ok(())
        }
        Command::Forecast { io, horizon_tokens } => commands::cmd_forecast(&io.options(), horizon_tokens).map(drop),
        Command::Impute { io, mask_csv } => commands::cmd_impute(&io.options(), mask_csv.as_deref()).map(drop),
        Command::Detect {
            io,
            anomaly_ratio,
            threshold,
        } => {
            let flags = commands::cmd_detect(&io.options(), anomaly_ratio, threshold)?;
            println!("{} of {} timesteps flagged", flags.iter().filter(|&&f| f).count(), flags.len());
            Ok(())
        }
        Command::AnalyzePrompts { from_checkpoint, out } => {
            let (names, sim) = commands::cmd_analyze_prompts(&from_checkpoint, &out)?;
            for (n, row) in names.iter().zip(sim) {
                let cells: Vec<String> = row.iter().map(|x| format!("{x:.4}")).collect();
                println!("{n}: {}", cells.join(" "));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("UNITS_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
