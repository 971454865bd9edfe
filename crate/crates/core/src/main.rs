use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use commentclf::cli::{self, CliError, Profile, RunConfig};
use commentclf::corpus::Split;

#[derive(Parser)]
#[command(name = "commentclf", version, about = "Abusive-comment classification pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Override a config key, e.g. `--set head.folds=10`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, CliError> {
        RunConfig::load(&self.config, &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Clean the configured splits and write them under output_dir/prepared.
    Prepare(ConfigArgs),
    /// Train the configured model on prepared data.
    Train(ConfigArgs),
    /// Score a run directory on a prepared split and update the results grid.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Run directory written by `train`.
        #[arg(long)]
        artifact: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Label unlabeled texts, one per line (first tab-separated field).
    Predict {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        artifact: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Write a seeded synthetic corpus split into train/dev/test.
    Synthesize {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value = "tamil")]
        profile: Profile,
        /// Words per class pool.
        #[arg(long, default_value_t = 50)]
        vocab: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Prepare(args) => {
            let cfg = args.load()?;
            let s = cli::cmd_prepare(&cfg)?;
            print!("{}", s.distribution.render());
            println!("prepared {} split(s) in {}", s.splits.len(), s.dir.display());
        }
        Command::Train(args) => {
            let cfg = args.load()?;
            let s = cli::cmd_train(&cfg)?;
            println!(
                "{}: dev macro-F1 {:.4} weighted-F1 {:.4} ({})",
                s.manifest.run_id,
                s.manifest.dev_macro_f1,
                s.manifest.dev_weighted_f1,
                s.run_dir.display()
            );
        }
        Command::Evaluate {
            config,
            artifact,
            split,
        } => {
            let cfg = config.load()?;
            let s = cli::cmd_evaluate(&cfg, &artifact, split)?;
            println!(
                "{} {}: macro-F1 {:.4} weighted-F1 {:.4}",
                s.report.run_meta.model,
                split.as_str(),
                s.report.macro_f1,
                s.report.weighted_f1
            );
            print!("{}", s.grid.text);
        }
        Command::Predict {
            config,
            artifact,
            input,
            output,
        } => {
            let cfg = config.load()?;
            let n = cli::cmd_predict(&cfg, &artifact, &input, &output)?;
            println!("labeled {n} row(s) into {}", output.display());
        }
        Command::Synthesize {
            out,
            n,
            profile,
            vocab,
            seed,
        } => {
            cli::cmd_synthesize(&out, n, profile, vocab, seed)?;
            println!("wrote train/dev/test to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Cli::parse();
    match run(args.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code())
        }
    }
}
