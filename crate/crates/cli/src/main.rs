//! `dsg`: command-line driver for corpus building, training, decoding and evaluation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dsg_core::adaptors::AdaptorChoice;
use dsg_core::metrics::report_table;
use dsg_core::pipeline::{self, RunConfig, System};
use dsg_core::Error;

#[derive(Parser)]
#[command(name = "dsg", version, about = "Distant-supervision data-to-text generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run config; defaults apply to anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Build the corpus splits and fit the tokenizer.
    Harvest(Common),
    /// Train the supportiveness estimator.
    TrainSe(Common),
    /// Train the generator.
    TrainGen {
        #[command(flatten)]
        common: Common,
        /// none, hard, soft or attention; defaults to the config's adaptor.
        #[arg(long)]
        adaptor: Option<String>,
    },
    /// Decode the test split.
    Decode {
        #[command(flatten)]
        common: Common,
        /// System name such as s2st, dsg or dsg-no-rbs; defaults to the
        /// config's adaptor with its decoding mode.
        #[arg(long)]
        system: Option<String>,
    },
    /// Score the configured systems, decoding any that have no output yet.
    Evaluate(Common),
    /// Retrain and score the sweep systems at each training size.
    Sweep(Common),
    /// Break down unsupported words in existing decode outputs.
    AuditOvergen(Common),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_) | Error::InvalidThreshold(_) | Error::Parse { .. } | Error::Json(_) => 2,
        Error::NonFiniteGradient(_) | Error::NonFiniteLoss { .. } | Error::DegenerateDistribution => 3,
        Error::MissingInput(_) | Error::MissingSeModel(_) | Error::EmptyCorpus => 4,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 4,
        _ => 1,
    }
}

fn load(c: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Harvest(c) => {
            let stats = pipeline::cmd_harvest(&load(&c)?, &c.out)?;
            println!(
                "train {} / dev {} / test {} records, {} relation types, train entity recall {:.4}",
                stats.train.records,
                stats.dev.records,
                stats.test.records,
                stats.relation_types,
                stats.train.mean_entity_recall
            );
        }
        Command::TrainSe(c) => {
            let (log, sep) = pipeline::cmd_train_se(&load(&c)?, &c.out)?;
            print_final_loss(&log);
            if let Some(s) = sep {
                println!("dev supportiveness: clean {:.4}, noise {:.4}", s.clean, s.noise);
            }
        }
        Command::TrainGen { common, adaptor } => {
            let cfg = load(&common)?;
            let adaptor = match adaptor {
                Some(a) => a.parse::<AdaptorChoice>()?,
                None => cfg.adaptor,
            };
            let (log, dev) = pipeline::cmd_train_gen(&cfg, &common.out, adaptor)?;
            print_final_loss(&log);
            println!("dev token nll {dev:.4}");
        }
        Command::Decode { common, system } => {
            let cfg = load(&common)?;
            let system = match system {
                Some(s) => s.parse::<System>()?,
                None => System::new(cfg.adaptor, cfg.decoding.rbs),
            };
            let out = pipeline::cmd_decode(&cfg, &common.out, system)?;
            println!("{system}: decoded {} records", out.len());
        }
        Command::Evaluate(c) => {
            let rows = pipeline::cmd_evaluate(&load(&c)?, &c.out)?;
            let table: Vec<_> = rows.into_iter().map(|r| (r.system.name(), r.report)).collect();
            print!("{}", report_table(&table));
        }
        Command::Sweep(c) => {
            let points = pipeline::cmd_sweep(&load(&c)?, &c.out)?;
            let table: Vec<_> = points
                .into_iter()
                .map(|p| (format!("{}@{}", p.system, p.train_size), p.report))
                .collect();
            print!("{}", report_table(&table));
        }
        Command::AuditOvergen(c) => {
            for a in pipeline::cmd_audit_overgen(&load(&c)?, &c.out)? {
                println!(
                    "{}: {} of {} tokens unsupported",
                    a.system, a.unsupported_tokens, a.total_tokens
                );
            }
            println!("details in {}", Path::new(&c.out).join("audit/overgen.txt").display());
        }
    }
    Ok(())
}

fn print_final_loss(log: &[dsg_core::nn::EpochLoss]) {
    if let Some(last) = log.last() {
        println!("epoch {} loss {:.6}", last.epoch, last.loss);
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
