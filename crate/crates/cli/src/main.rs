//! Command-line driver.
//!
//! Every stage subcommand takes `--config <file.toml>` and runs the stage
//! together with any upstream stage that has not completed yet under the
//! same config hash. Outputs land in `<output_dir>/epoch-NNN-<hash>/`.
//!
//! Metrics files (`iter1/metrics.txt`, `iter2/metrics.txt`,
//! `finetune/metrics.txt`) hold one record per optimizer step as
//! space-separated `key=value` pairs, appended as training runs:
//!
//! ```text
//! step=12 lr=7.5e-4 loss=812.3 loss_per_frame=4.21 masked=193 loss.2=... acc.2=... batch=11
//! ```
//!
//! Exit status: 0 on success, 1 for invalid input or configuration,
//! 2 when a stage fails at run time.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;
use pms_ssl::pipeline::{generate_toy_corpus, ExperimentConfig, Pipeline, ToyCorpusConfig};
use pms_ssl::Error;

#[derive(Debug, Parser)]
#[command(name = "pms-ssl", version, about = "Multi-scale masked-prediction speech pretraining")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct ConfigArg {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Normalised 39-dim MFCCs of the unlabeled split.
    Features(ConfigArg),
    /// k-means targets: MFCC clusters (iteration 1) or multi-resolution
    /// clusters of extracted layer features (iteration 2).
    Cluster {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
        iteration: u8,
    },
    /// Masked-prediction pretraining of one iteration.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
        iteration: u8,
    },
    /// Layer features of the iteration-1 model.
    Extract(ConfigArg),
    /// CTC fine-tuning of the iteration-2 model.
    Finetune(ConfigArg),
    /// Greedy and beam decoding of the evaluation split.
    Decode(ConfigArg),
    /// Word and character error rates of the decoded hypotheses.
    Eval(ConfigArg),
    /// Every stage, skipping those already completed.
    RunAll(ConfigArg),
    /// Writes the synthetic corpus used by the toy config.
    GenToyCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        unlabeled: usize,
        #[arg(long, default_value_t = 10)]
        labeled: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn open(arg: &ConfigArg) -> Result<Pipeline, Error> {
    // An unreadable config is bad input, not a stage failure.
    let cfg = ExperimentConfig::load(&arg.config).map_err(|e| match e {
        Error::Io { .. } => Error::config(e.to_string()),
        e => e,
    })?;
    Pipeline::open(cfg)
}

fn run(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Features(c) => {
            open(&c)?.compute_features()?;
        }
        Command::Cluster { cfg, iteration } => {
            let mut p = open(&cfg)?;
            if iteration == 1 {
                p.cluster_iteration1()?;
            } else {
                p.cluster_iteration2()?;
            }
        }
        Command::Pretrain { cfg, iteration } => {
            let mut p = open(&cfg)?;
            let ckpt = if iteration == 1 { p.run_iteration1()? } else { p.run_iteration2()? };
            println!("{}", ckpt.display());
        }
        Command::Extract(c) => println!("{}", open(&c)?.extract_layer_features()?.display()),
        Command::Finetune(c) => println!("{}", open(&c)?.run_finetune()?.display()),
        Command::Decode(c) => {
            let mut p = open(&c)?;
            for path in p.run_decode()?.values() {
                println!("{}", p.epoch_dir().join(path).display());
            }
        }
        Command::Eval(c) => {
            let r = open(&c)?.run_finetune_and_eval()?;
            println!("utterances={}", r.utterances);
            println!("greedy wer={} cer={}", r.greedy.word_counts, r.greedy.char_counts);
            println!("beam   wer={} cer={}", r.beam.word_counts, r.beam.char_counts);
        }
        Command::RunAll(c) => {
            let s = open(&c)?.run_all()?;
            println!("epoch_dir={}", s.epoch_dir.display());
            println!("greedy wer={} cer={}", s.report.greedy.word_counts, s.report.greedy.char_counts);
            println!("beam   wer={} cer={}", s.report.beam.word_counts, s.report.beam.char_counts);
        }
        Command::GenToyCorpus {
            out,
            unlabeled,
            labeled,
            seed,
        } => {
            let cfg = ToyCorpusConfig {
                unlabeled,
                labeled,
                seed,
                ..ToyCorpusConfig::default()
            };
            let c = generate_toy_corpus(&out, &cfg)?;
            println!("unlabeled={}", c.unlabeled.display());
            println!("labeled={}", c.labeled.display());
            println!("transcripts={}", c.transcripts.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
