//! Command-line surface: synthetic data generation, training, evaluation,
//! decoding and verification.
//!
//! Exit codes: 0 ok, 1 usage, 2 validation/config errors, 3 verification
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use treelink::corpus::{write_alias_table, write_corpus};
use treelink::decode::write_predictions;
use treelink::run::{self, load_run_config};
use treelink::synth::{generate_synthetic, SynthConfig};
use treelink::verify;

#[derive(Parser)]
#[command(name = "treelink", version, about = "Joint coreference and entity linking over spanning trees")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and alias table.
    Synth {
        /// Synthesis config (JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Output directory for corpus.jsonl and aliases.jsonl.
        #[arg(long)]
        out: PathBuf,
        /// Optional "N,M" split: writes train.jsonl (first N docs) and
        /// test.jsonl (next M docs) instead of corpus.jsonl.
        #[arg(long)]
        split: Option<String>,
    },
    /// Train a model per the run config; writes checkpoint and report.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a corpus and write the metric report.
    Evaluate {
        /// Run config (model type, pruning, dims, alias-table path).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a corpus into cluster/link predictions (JSONL).
    Decode {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the verification suites (oracle equivalence, gradient checks,
    /// loss properties, metric fixtures).
    Verify {
        /// Run a single suite: mtt, edmonds, scorer-gradients,
        /// loss-gradients, loss-properties or metrics.
        #[arg(long)]
        suite: Option<String>,
        #[arg(long, default_value_t = 20240)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap would exit with its own code; usage problems are 1 here
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Synth { config, seed, out, split } => {
            let text = std::fs::read_to_string(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            let cfg: SynthConfig = serde_json::from_str(&text).context("parsing synth config")?;
            let corpus = generate_synthetic(&cfg, seed)?;
            std::fs::create_dir_all(&out)?;
            write_alias_table(out.join("aliases.jsonl"), &corpus.alias_table)?;
            match split {
                None => {
                    write_corpus(out.join("corpus.jsonl"), &corpus.documents)?;
                    println!(
                        "wrote {} documents to {}",
                        corpus.documents.len(),
                        out.join("corpus.jsonl").display()
                    );
                }
                Some(split) => {
                    let (n, m): (usize, usize) = split
                        .split_once(',')
                        .and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)))
                        .context("--split expects N,M")?;
                    if n + m > corpus.documents.len() {
                        bail!(
                            "--split {n},{m} needs {} documents but the corpus has {}",
                            n + m,
                            corpus.documents.len()
                        );
                    }
                    write_corpus(out.join("train.jsonl"), &corpus.documents[..n])?;
                    write_corpus(out.join("test.jsonl"), &corpus.documents[n..n + m])?;
                    println!("wrote {n} train / {m} test documents to {}", out.display());
                }
            }
            Ok(0)
        }
        Command::Train { config } => {
            let config = load_run_config(&config)?;
            let (_, report) = run::train(&config)?;
            let last = report.epochs.last();
            println!(
                "trained {:?} for {} epochs; best epoch {}; final train loss {}",
                config.settings.model,
                report.epochs.len(),
                report.best_epoch,
                last.map_or(f64::NAN, |e| e.train_loss)
            );
            println!("checkpoint: {}", config.paths.checkpoint);
            println!("report: {}", config.paths.report);
            Ok(0)
        }
        Command::Evaluate { config, checkpoint, corpus, out } => {
            let config = load_run_config(&config)?;
            let report = run::evaluate(
                &config,
                checkpoint.to_str().context("checkpoint path")?,
                corpus.to_str().context("corpus path")?,
            )?;
            std::fs::write(&out, report.to_json_pretty())?;
            print!("{}", report.table());
            println!("report: {}", out.display());
            Ok(0)
        }
        Command::Decode { config, checkpoint, corpus, out } => {
            let config = load_run_config(&config)?;
            let preds = run::decode(
                &config,
                checkpoint.to_str().context("checkpoint path")?,
                corpus.to_str().context("corpus path")?,
            )?;
            write_predictions(&out, &preds)?;
            println!("wrote {} predictions to {}", preds.len(), out.display());
            Ok(0)
        }
        Command::Verify { suite, seed } => {
            let outcomes = match suite {
                Some(name) => match verify::run_suite(&name, seed) {
                    Some(outcome) => vec![outcome],
                    None => bail!(
                        "unknown suite `{name}`; expected one of mtt, edmonds, \
                         scorer-gradients, loss-gradients, loss-properties, metrics"
                    ),
                },
                None => verify::run_all(seed),
            };
            let mut failed = false;
            for outcome in &outcomes {
                if outcome.passed() {
                    let stats: Vec<String> = outcome
                        .stats
                        .iter()
                        .map(|(k, v)| format!("{k}={v:.3e}"))
                        .collect();
                    println!("{}: PASS ({})", outcome.name, stats.join(", "));
                } else {
                    failed = true;
                    println!("{}: FAIL", outcome.name);
                    for f in &outcome.failures {
                        println!("  {f}");
                    }
                }
            }
            Ok(if failed { 3 } else { 0 })
        }
    }
}
