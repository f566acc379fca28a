//! Thin command-line front end; all logic lives in the library.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use kidney_ct::cli::{self, ModelSelector};
use kidney_ct::config::RunConfig;
use kidney_ct::zoo::Variant;

#[derive(Parser)]
#[command(name = "kidney-ct", version, about = "CT kidney classification pipeline")]
struct Cli {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the config's output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    /// Override the backbone variant (full_pretrained | tiny_random).
    #[arg(long, global = true)]
    variant: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan the dataset, write scan_errors.txt and the split manifest.
    Prepare {
        /// Fail on any unreadable image instead of excluding it.
        #[arg(long)]
        strict: bool,
        /// Write N augmented training samples as PNG for inspection.
        #[arg(long, value_name = "N")]
        dump_augmented: Option<usize>,
        /// Directory for the augmented samples.
        #[arg(long, value_name = "DIR")]
        dump_dir: Option<PathBuf>,
    },
    /// Generate the synthetic 4-class colored-noise dataset.
    Fixture {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 10)]
        images_per_class: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Train one backbone family or the ensemble.
    Train {
        /// efficientnet_v2 | inception_v2 | mobilenet_v2 | vit_b16 | ensemble
        #[arg(long)]
        model: String,
    },
    /// Evaluate a trained model on the held-out split.
    Evaluate {
        #[arg(long)]
        model: String,
        /// Regenerate plots from report.json without a model.
        #[arg(long)]
        replot: bool,
    },
    /// Explain one image prediction with a local surrogate.
    Explain {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        model: String,
        /// Class index or name; defaults to the predicted class.
        #[arg(long)]
        class: Option<String>,
    },
    /// Collect per-model reports into comparison.csv.
    Report,
}

fn effective_config(args: &Cli) -> kidney_ct::Result<RunConfig> {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
        config.training.seed = seed;
        config.explain.seed = seed;
    }
    if let Some(dir) = &args.output_dir {
        config.output_dir = dir.clone();
    }
    if let Some(variant) = &args.variant {
        config.model.variant = variant.parse::<Variant>()?;
    }
    Ok(config)
}

fn run(args: Cli) -> kidney_ct::Result<()> {
    match &args.command {
        Command::Prepare {
            strict,
            dump_augmented,
            dump_dir,
        } => {
            let config = effective_config(&args)?;
            let dump = match (dump_augmented, dump_dir) {
                (Some(n), Some(dir)) => Some((*n, dir.clone())),
                (Some(n), None) => Some((*n, config.output_dir.join("augmented_preview"))),
                (None, _) => None,
            };
            cli::cmd_prepare(&config, *strict, dump)
        }
        Command::Fixture {
            out_dir,
            images_per_class,
            size,
        } => cli::cmd_fixture(out_dir, *images_per_class, *size, args.seed.unwrap_or(0)),
        Command::Train { model } => {
            let config = effective_config(&args)?;
            let selector: ModelSelector = model.parse()?;
            cli::cmd_train(&config, selector)
        }
        Command::Evaluate { model, replot } => {
            let config = effective_config(&args)?;
            let selector: ModelSelector = model.parse()?;
            cli::cmd_evaluate(&config, selector, *replot)
        }
        Command::Explain {
            image,
            model,
            class,
        } => {
            let config = effective_config(&args)?;
            let selector: ModelSelector = model.parse()?;
            cli::cmd_explain(&config, image, selector, class.as_deref())
        }
        Command::Report => {
            let config = effective_config(&args)?;
            cli::cmd_report(&config)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Cli::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
