use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use heartbert_core::evaluation::ReportFormat;
use heartbert_core::training::FreezePolicy;

mod artifacts;
mod commands;
mod config;
mod error;

use commands::Ctx;
use config::PipelineConfig;
use error::CliError;

/// ECG-as-language pipeline: quantize, tokenize, pretrain, fine-tune, evaluate.
#[derive(Parser, Debug)]
#[command(name = "heartbert", version)]
struct Cli {
    /// Pipeline config (`section.key = value` lines); defaults apply without it.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set model.n_layers=2`. Repeatable.
    #[arg(short, long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Format {
    Table,
    Json,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Resample, normalize and window raw records into `windows.hbw`.
    Ingest,
    /// Fit the Lloyd-Max codebook on the ingested windows.
    TrainQuantizer,
    /// Quantize every window into a symbol string.
    PrepareCorpus,
    /// Learn BPE merges over the symbol corpus.
    TrainTokenizer,
    /// Masked-language-model pretraining of the encoder.
    Pretrain,
    /// Segment, encode, balance and split the downstream task data.
    PrepareTask,
    /// Train the hybrid classifier with a learning-rate sweep.
    Finetune,
    /// Score the fine-tuned model on the test split.
    Evaluate {
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Print trainable parameter counts without training.
    InspectParams {
        /// Only the pretraining total.
        #[arg(long, conflicts_with_all = ["freeze", "classes"])]
        pretrain: bool,
        /// all-frozen, last-N, half or all-unfrozen.
        #[arg(long)]
        freeze: Option<String>,
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Write synthetic annotated records (and sleep epochs for sleep tasks).
    Synth,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::TrainQuantizer => "train-quantizer",
            Command::PrepareCorpus => "prepare-corpus",
            Command::TrainTokenizer => "train-tokenizer",
            Command::Pretrain => "pretrain",
            Command::PrepareTask => "prepare-task",
            Command::Finetune => "finetune",
            Command::Evaluate { .. } => "evaluate",
            Command::InspectParams { .. } => "inspect-params",
            Command::Synth => "synth",
        }
    }
}

fn run(cli: Cli) -> Result<String, CliError> {
    let cfg = PipelineConfig::load(cli.config.as_deref(), &cli.set)?;
    let ctx = Ctx::new(cfg, cli.command.name());
    match cli.command {
        Command::Ingest => commands::ingest(ctx),
        Command::TrainQuantizer => commands::train_quantizer(ctx),
        Command::PrepareCorpus => commands::prepare_corpus(ctx),
        Command::TrainTokenizer => commands::train_tokenizer(ctx),
        Command::Pretrain => commands::pretrain_cmd(ctx),
        Command::PrepareTask => commands::prepare_task(ctx),
        Command::Finetune => commands::finetune_cmd(ctx),
        Command::Evaluate { format } => commands::evaluate_cmd(
            ctx,
            match format {
                Format::Table => ReportFormat::Table,
                Format::Json => ReportFormat::Json,
            },
        ),
        Command::InspectParams {
            pretrain,
            freeze,
            classes,
        } => {
            let freeze = freeze
                .map(|f| f.parse::<FreezePolicy>())
                .transpose()
                .map_err(|e| CliError::Config(config::ConfigError::Field {
                    key: "--freeze".into(),
                    msg: e.to_string(),
                }))?;
            commands::inspect_params(&ctx, pretrain, freeze, classes)
        }
        Command::Synth => commands::synth(ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
