use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use attmix::config::RunConfig;
use attmix::pipeline::{self, ExperimentReport};
use attmix::Error;

#[derive(Parser)]
#[command(name = "attmix", version, about = "Attention-guided weight mixup with bi-level search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Use this single seed instead of the configured seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    /// Finetune from the pretrained weights rather than the searched ones.
    #[arg(long)]
    reset_w: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the upstream network and write the pretrained checkpoint.
    Pretrain(Common),
    /// Search phase only.
    Search(Common),
    /// Finetune phase using coefficients from a previous `search` in the same --out.
    Finetune(Common),
    /// Search then finetune.
    Run(Common),
    /// Run the baseline named by run.method.
    Baseline(Common),
    /// Summarize run directories.
    Report {
        dirs: Vec<PathBuf>,
        /// Also write summary.csv into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.run.seeds = vec![s];
    }
    if common.reset_w {
        cfg.run.reset_w = true;
    }
    Ok(cfg)
}

fn print_report(r: &ExperimentReport) {
    for m in &r.metrics {
        println!("{} {} {}: {:.4} ± {:.4} over {} seeds", r.method, r.task, m.metric, m.mean, m.std, m.values.len());
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Pretrain(c) => {
            let path = pipeline::cmd_pretrain(&load(&c)?)?;
            println!("wrote {}", path.display());
        }
        Command::Search(c) => {
            pipeline::cmd_search(&load(&c)?, &c.out)?;
            println!("wrote search results to {}", c.out.display());
        }
        Command::Finetune(c) => print_report(&pipeline::cmd_finetune(&load(&c)?, &c.out)?),
        Command::Run(c) => print_report(&pipeline::cmd_run(&load(&c)?, &c.out)?),
        Command::Baseline(c) => print_report(&pipeline::cmd_baseline(&load(&c)?, &c.out)?),
        Command::Report { dirs, out } => {
            let summary = pipeline::cmd_report(&dirs)?;
            print!("{}", summary.table());
            if let Some(out) = out {
                std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
                let p = out.join("summary.csv");
                std::fs::write(&p, summary.csv()).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
