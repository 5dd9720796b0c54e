use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use qtgvqa::harness::{self, Profile, RunConfig};
use qtgvqa::metrics::percent;
use qtgvqa::Error;

#[derive(Parser)]
#[command(name = "qtgvqa", version, about = "Train and evaluate type-guided video QA models on synthetic clips")]
struct Cli {
    /// TOML file of config overrides
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = ProfileArg::Desk)]
    profile: ProfileArg,
    /// Overwrite a nonempty output directory
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset into --out
    GenData,
    /// Train one model
    Train {
        #[arg(long, value_name = "DIR")]
        dataset: Option<PathBuf>,
    },
    /// Score a checkpoint on one split
    Eval {
        #[arg(long, value_name = "DIR")]
        dataset: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// train, val or test
        #[arg(long)]
        split: Option<String>,
    },
    /// Train and score every arm of the toggle lattice
    Ablate {
        #[arg(long, value_name = "DIR")]
        dataset: Option<PathBuf>,
    },
    /// Train one model per question type and score each on all types
    Generalize {
        #[arg(long, value_name = "DIR")]
        dataset: Option<PathBuf>,
    },
}

fn resolve(cli: &Cli) -> qtgvqa::Result<(RunConfig, PathBuf)> {
    let profile = match cli.profile {
        ProfileArg::Desk => Profile::Desk,
        ProfileArg::Paper => Profile::Paper,
    };
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p, profile)?,
        None => RunConfig::for_profile(profile),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match &cli.command {
        Command::GenData => {}
        Command::Train { dataset } | Command::Ablate { dataset } | Command::Generalize { dataset } => {
            if dataset.is_some() {
                cfg.dataset.clone_from(dataset);
            }
        }
        Command::Eval {
            dataset,
            checkpoint,
            split,
        } => {
            if dataset.is_some() {
                cfg.dataset.clone_from(dataset);
            }
            if checkpoint.is_some() {
                cfg.checkpoint.clone_from(checkpoint);
            }
            if let Some(s) = split {
                cfg.eval_split.clone_from(s);
            }
        }
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = Some(o.clone());
    }
    cfg.validate()?;
    let out = cfg
        .out_dir
        .clone()
        .ok_or_else(|| Error::Config("no output directory; pass --out".into()))?;
    Ok((cfg, out))
}

fn run(cli: &Cli) -> qtgvqa::Result<()> {
    let (cfg, out) = resolve(cli)?;
    match cli.command {
        Command::GenData => {
            let m = harness::cmd_gendata(&cfg, &out, cli.force)?;
            for (q, name) in m.type_names.iter().enumerate() {
                println!(
                    "{name:<16} train {:>5}  val {:>5}  test {:>5}",
                    m.counts.train[q], m.counts.val[q], m.counts.test[q]
                );
            }
        }
        Command::Train { .. } => {
            let o = harness::cmd_train(&cfg, &out, cli.force)?;
            if let Some(last) = o.steps.last() {
                println!("{} steps, final batch loss {:.4}", o.steps.len(), last.loss.total);
            }
            for (q, w) in o.weights.iter().enumerate() {
                println!("type {q}: w {w:.4}");
            }
        }
        Command::Eval { .. } => {
            let r = harness::cmd_eval(&cfg, &out, cli.force)?;
            print!("{}", r.to_table());
        }
        Command::Ablate { .. } => {
            let r = harness::cmd_ablate(&cfg, &out, cli.force)?;
            print!("{}", r.to_table());
        }
        Command::Generalize { .. } => {
            let r = harness::cmd_generalize(&cfg, &out, cli.force)?;
            print!("{}", r.matrix.to_table()?);
            for (col, acc) in r.matrix.columns.iter().zip(&r.validation_accuracy) {
                println!("validation {}: {}", r.matrix.names[*col], percent(*acc));
            }
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
