use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use h3trans::config::RunConfig;
use h3trans::pipeline;
use h3trans::Error;

#[derive(Parser)]
#[command(
    name = "h3trans",
    version,
    about = "Multi-domain recommendation with hierarchical hypergraphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter and split raw interaction files, one file per domain.
    Prepare(Common),
    /// Generate a synthetic multi-domain dataset.
    Synth(Common),
    /// Train a model on a prepared dataset.
    Train(Common),
    /// Evaluate a checkpoint on the held-out interactions.
    Eval(Common),
    /// Train and evaluate each ablation variant over several seeds.
    Ablate(Common),
    /// List every configuration key.
    Keys,
}

#[derive(Args)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Random seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn config(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path).map_err(|e| match e.root() {
                Error::Config(_) => e,
                _ => Error::Config(e.to_string()),
            })?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&self.set)?;
        if let Some(seed) = self.seed {
            cfg.set("seed", &seed.to_string())?;
        }
        Ok(cfg)
    }
}

fn run(command: Command) -> Result<(), Error> {
    let (common, f): (Common, fn(&RunConfig, &Path) -> Result<String, Error>) = match command {
        Command::Keys => {
            for (key, help) in h3trans::config::KEYS {
                println!("{key:<20} {help}");
            }
            return Ok(());
        }
        Command::Prepare(c) => (c, |cfg, out| {
            let s = pipeline::cmd_prepare(cfg, out)?;
            Ok(format!(
                "prepared {} domains, {} users, {} items, {} train / {} test records",
                s.domains, s.users, s.items, s.train_records, s.test_records
            ))
        }),
        Command::Synth(c) => (c, |cfg, out| {
            let s = pipeline::cmd_synth(cfg, out)?;
            Ok(format!(
                "generated {} domains, {} users, {} items, {} train / {} test records",
                s.domains, s.users, s.items, s.train_records, s.test_records
            ))
        }),
        Command::Train(c) => (c, |cfg, out| {
            let s = pipeline::cmd_train(cfg, out)?;
            let loss = s
                .final_loss
                .map_or_else(|| "n/a".into(), |l| format!("{l:.6}"));
            Ok(format!(
                "trained {} steps, final loss {loss}, checkpoint {}",
                s.steps,
                s.checkpoint.display()
            ))
        }),
        Command::Eval(c) => (c, |cfg, out| Ok(pipeline::cmd_eval(cfg, out)?.to_tsv())),
        Command::Ablate(c) => (c, |cfg, out| Ok(pipeline::cmd_ablate(cfg, out)?.to_tsv())),
    };
    let cfg = common.config()?;
    let summary = f(&cfg, &common.out)?;
    print!("{summary}");
    if !summary.ends_with('\n') {
        println!();
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
