//! `fltlm`: data generation, training, evaluation and sweeps.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fltlm::datagen::DistractorStyle;
use fltlm::filter::Strategy;
use fltlm::trainer::{Margin, Regime};

use config::{RunConfig, ROOT_ENV};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] fltlm::Error),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failed(String),
}

#[derive(Parser)]
#[command(name = "fltlm", version, about = "Integrated context-filtering language model at desk scale")]
struct Cli {
    /// TOML file with [paths], [vocab], [model], [init], [data], [train] and
    /// [eval] sections. Flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root for relative paths.
    #[arg(long, env = ROOT_ENV, default_value = ".", global = true)]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and eval splits.
    GenData(GenArgs),
    /// Train one regime and write a checkpoint plus its step log.
    Train(TrainArgs),
    /// Evaluate checkpoints under the input conditions.
    Eval(EvalArgs),
    /// Train and evaluate one point per value of a sweep axis.
    Ablate(AblateArgs),
    /// Run the loss-identity and finite-difference suites.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    hops: Option<usize>,
    #[arg(long)]
    n_docs: Option<usize>,
    #[arg(long)]
    min_docs: Option<usize>,
    #[arg(long)]
    facts_per_doc: Option<usize>,
    #[arg(long)]
    distractors: Option<DistractorStyle>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    eval_size: Option<usize>,
}

#[derive(Args, Clone)]
struct RegimeArgs {
    #[arg(long, value_parser = parse::<Regime>)]
    regime: Option<Regime>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long, value_parser = parse::<Strategy>)]
    strategy: Option<Strategy>,
    #[arg(long)]
    filter_proportion: Option<f64>,
    /// `learnable` or `fixed:<value>`.
    #[arg(long, value_parser = parse::<Margin>)]
    margin: Option<Margin>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    mask_warmup: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    regime: RegimeArgs,
    /// Checkpoint name (defaults to the regime).
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint name under the checkpoint directory, or a path.
    #[arg(long = "checkpoint", required_unless_present = "two_stage")]
    checkpoints: Vec<String>,
    /// Filter-then-read pipeline as FILTER:READER checkpoint names.
    #[arg(long)]
    two_stage: Vec<String>,
    /// Comma-separated conditions, or `all`.
    #[arg(long, value_delimiter = ',')]
    conditions: Option<Vec<String>>,
    #[arg(long)]
    samples: Option<usize>,
    /// Also write recall@k for k = 1..n_docs.
    #[arg(long)]
    recall_curve: bool,
    /// Also write mean attention shares of positive and negative documents.
    #[arg(long)]
    attention_analysis: bool,
    /// Report file stem.
    #[arg(long, default_value = "eval")]
    report: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Lambda,
    Proportion,
    Margin,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    axis: Axis,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    #[command(flatten)]
    regime: RegimeArgs,
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse<T: std::str::FromStr<Err = String>>(s: &str) -> Result<T, String> {
    s.parse()
}

impl RegimeArgs {
    /// Folds the flags into `cfg`, rejecting flags the regime ignores.
    fn apply(&self, cfg: &mut RunConfig) -> Result<(), CliError> {
        let exp = &mut cfg.experiment;
        let t = &mut exp.train;
        if let Some(r) = self.regime {
            t.regime = r;
        }
        let regime = t.regime;
        let reject = |flag: &str, allowed: &str| {
            Err(CliError::Usage(format!("--{flag} has no effect with --regime {regime}; it applies to {allowed}")))
        };
        if self.mu.is_some() && regime != Regime::FilterPlusLm {
            return reject("mu", "filter-plus-lm");
        }
        if self.lambda.is_some() && !matches!(regime, Regime::Fltlm | Regime::FltlmNoSoftmask) {
            return reject("lambda", "fltlm and fltlm-no-softmask");
        }
        if self.mask_warmup.is_some() && regime != Regime::Fltlm {
            return reject("mask-warmup", "fltlm");
        }
        if (self.margin.is_some() || self.strategy.is_some()) && !regime.uses_filter() {
            return reject("margin/--strategy", "regimes with a filter");
        }
        if let Some(v) = self.lambda {
            t.lambda = v;
        }
        if let Some(v) = self.mu {
            t.mu = v;
        }
        if let Some(v) = self.strategy {
            t.strategy = v;
        }
        if let Some(v) = self.margin {
            t.margin = v;
        }
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.mask_warmup {
            t.mask_warmup = v;
        }
        if let Some(p) = self.filter_proportion {
            exp.filter_proportion = Some(p);
        }
        Ok(())
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?.rooted(&cli.out);
    match cli.command {
        Command::GenData(a) => {
            let d = &mut cfg.experiment.data;
            let set = |dst: &mut usize, v: Option<usize>| {
                if let Some(v) = v {
                    *dst = v;
                }
            };
            set(&mut d.hops, a.hops);
            set(&mut d.n_docs, a.n_docs);
            set(&mut d.min_docs, a.min_docs);
            set(&mut d.facts_per_doc, a.facts_per_doc);
            set(&mut d.train_size, a.train_size);
            set(&mut d.eval_size, a.eval_size);
            if let Some(s) = a.seed {
                d.seed = s;
            }
            if let Some(s) = a.distractors {
                d.distractors = s;
            }
            commands::gen_data(&cfg)
        }
        Command::Train(a) => {
            a.regime.apply(&mut cfg)?;
            let name = a.name.unwrap_or_else(|| cfg.experiment.train.regime.to_string());
            commands::train(&cfg, &name).map(|_| ())
        }
        Command::Eval(a) => {
            if let Some(c) = a.conditions {
                cfg.eval.conditions = c;
            }
            if let Some(n) = a.samples {
                cfg.eval.samples = n;
            }
            let opts = commands::EvalOutputs {
                recall_curve: a.recall_curve,
                attention: a.attention_analysis,
                report: a.report,
            };
            commands::eval(&cfg, &a.checkpoints, &a.two_stage, &opts)
        }
        Command::Ablate(a) => {
            a.regime.apply(&mut cfg)?;
            if let Some(n) = a.samples {
                cfg.eval.samples = n;
            }
            let axis = match a.axis {
                Axis::Lambda => commands::SweepAxis::Lambda,
                Axis::Proportion => commands::SweepAxis::Proportion,
                Axis::Margin => commands::SweepAxis::Margin,
            };
            commands::ablate(&cfg, axis, &a.values)
        }
        Command::GradCheck(a) => commands::grad_check(a.seed),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
