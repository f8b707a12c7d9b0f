use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mdo_core::harness::{self, selftest, TrainConfig};
use mdo_core::mdo::Strategy;
use mdo_core::rewards::{coverage, score_tokens, summary_length};
use mdo_core::toyenv::{Document, Token, Vocabulary};

#[derive(Parser)]
#[command(
    name = "mdo",
    version,
    about = "Multi-dimensional reward PPO on a synthetic summarization task"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the reference policy and save it as reference.json.
    Pretrain(RunArgs),
    /// Train one strategy and write metrics.csv, checkpoint.json, config.json.
    Train(RunArgs),
    /// Train once per discount factor and write sweep.csv.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "0.5,0.7,0.9,0.99")]
        gammas: Vec<f64>,
    },
    /// Compare the final evaluations of several metrics files.
    Report {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Score a summary file against a document file (whitespace-separated token ids).
    Score {
        #[arg(long)]
        document: PathBuf,
        #[arg(long)]
        summary: PathBuf,
        #[arg(long, default_value_t = 64)]
        vocab_size: u32,
    },
    /// Run the built-in invariant checks.
    Selftest,
}

#[derive(Args)]
struct RunArgs {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. --set gamma=0.5. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, env = "MDO_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Load the frozen reference instead of pretraining it.
    #[arg(long)]
    reference: Option<PathBuf>,
}

impl RunArgs {
    /// Config file, then `--set`, then the dedicated flags.
    fn resolve(&self) -> Result<TrainConfig> {
        let base = match &self.config {
            Some(path) => TrainConfig::load(path)?,
            None => TrainConfig::default(),
        };
        let mut cfg = base.with_overrides(&self.overrides)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(strategy) = self.strategy {
            cfg.strategy = strategy;
        }
        if let Some(iterations) = self.iterations {
            cfg.iterations = iterations;
        }
        if let Some(gamma) = self.gamma {
            cfg.hyper.gamma = gamma;
        }
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = dir.clone();
        }
        if let Some(reference) = &self.reference {
            cfg.reference_checkpoint = Some(reference.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn read_tokens(path: &Path) -> Result<Vec<Token>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.split_whitespace()
        .map(|t| {
            t.parse::<Token>()
                .with_context(|| format!("{}: bad token {t:?}", path.display()))
        })
        .collect()
}

fn format_row(row: &harness::MetricsRow) -> String {
    format!(
        "iteration {}: coherence {:.4} consistency {:.4} fluency {:.4} relevance {:.4} | overall {:.4} min_dim {:.4} length {:.2} kl {:.4}",
        row.iteration,
        row.coherence,
        row.consistency,
        row.fluency,
        row.relevance,
        row.overall,
        row.min_dim,
        row.mean_length,
        row.mean_kl
    )
}

/// Runs one command, returning its stdout text and whether it succeeded.
fn run(cli: Cli) -> Result<(String, bool)> {
    let mut out = String::new();
    match cli.command {
        Command::Pretrain(args) => {
            let cfg = args.resolve()?;
            let (path, setup) = harness::run_pretrain(&cfg)?;
            if let Some(report) = &setup.pretrain {
                writeln!(
                    out,
                    "cross-entropy {:.4} -> {:.4} over {} epochs",
                    report.initial_loss,
                    report.final_loss(),
                    report.epoch_losses.len()
                )?;
            }
            writeln!(out, "wrote {}", path.display())?;
        }
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let outcome = harness::run_training(&cfg)?;
            writeln!(out, "{}", format_row(outcome.first()))?;
            writeln!(out, "{}", format_row(outcome.last()))?;
            writeln!(out, "wrote {}", cfg.output_dir.display())?;
        }
        Command::Sweep { run, gammas } => {
            let cfg = run.resolve()?;
            for row in harness::gamma_sweep(&cfg, &gammas)? {
                writeln!(
                    out,
                    "gamma {}: length {:.3} coherence {:.4} consistency {:.4} fluency {:.4} relevance {:.4}",
                    row.gamma, row.mean_length, row.coherence, row.consistency, row.fluency, row.relevance
                )?;
            }
            writeln!(out, "wrote {}", cfg.output_dir.join("sweep.csv").display())?;
        }
        Command::Report { files, csv } => {
            let rows = harness::report(&files)?;
            out.push_str(&harness::render_table(&rows));
            if let Some(path) = csv {
                std::fs::write(&path, harness::render_csv(&rows)?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Score {
            document,
            summary,
            vocab_size,
        } => {
            let vocab = Vocabulary::new(vocab_size)?;
            let doc = Document::from_tokens(&vocab, read_tokens(&document)?)?;
            let tokens = read_tokens(&summary)?;
            if let Some(t) = tokens.iter().find(|&&t| t >= vocab_size) {
                bail!("summary token {t} is outside the vocabulary");
            }
            let scores = score_tokens(&doc, &tokens);
            let json = serde_json::json!({
                "coherence": scores.coherence,
                "consistency": scores.consistency,
                "fluency": scores.fluency,
                "relevance": scores.relevance,
                "overall": scores.mean(),
                "coverage": coverage(&doc, mdo_core::toyenv::content(&tokens)),
                "length": summary_length(&tokens),
            });
            writeln!(out, "{}", serde_json::to_string_pretty(&json)?)?;
        }
        Command::Selftest => {
            let checks = selftest::run()?;
            for c in &checks {
                writeln!(
                    out,
                    "{} {}: {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                )?;
            }
            let passed = checks.iter().all(|c| c.passed);
            return Ok((out, passed));
        }
    }
    Ok((out, true))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok((text, passed)) => {
            // A closed pipe (e.g. `| head`) is not an error worth reporting.
            let _ = std::io::stdout().lock().write_all(text.as_bytes());
            if passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
