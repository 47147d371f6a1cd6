//! `statetame`: simulate markets, detect state arbitrage, price and hedge claims.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Outcome;
use crate::config::{Overrides, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "statetame", version, about = "Deflator-based valuation of contingent claims")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Run config, TOML or JSON.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    paths: Option<usize>,
    /// Worker threads; defaults to all cores. Results do not depend on it.
    #[arg(long, env = "STATETAME_THREADS")]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct WithClaim {
    #[command(flatten)]
    common: Common,
    /// Claim id; all claims of the matching style when omitted.
    #[arg(long)]
    claim: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate scenarios and write them with a summary.
    Simulate(Common),
    /// Test the state-arbitrage condition on every path and grid point.
    CheckArbitrage(Common),
    PriceEuropean(WithClaim),
    PriceAmerican(WithClaim),
    /// Price European claims and build their replicating portfolios.
    Hedge(WithClaim),
    /// Lattice value and exercise boundary for one-asset constant markets.
    Oracle(WithClaim),
}

const EXIT_FINDING: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<statetame::Error>() {
            return match e {
                statetame::Error::Validation(_) | statetame::Error::Io(_) => EXIT_USAGE,
                _ => EXIT_NUMERICAL,
            };
        }
    }
    EXIT_USAGE
}

fn prepare(common: &Common) -> anyhow::Result<RunConfig> {
    let overrides = Overrides {
        seed: common.seed,
        n_paths: common.paths,
        output_dir: common.out.clone(),
    };
    let cfg = config::load(&common.config, &overrides)?;
    println!("{}", serde_json::to_string_pretty(&cfg)?);
    commands::validate(&cfg)?;
    if let Some(t) = common.threads {
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global()?;
    }
    log::info!("using {} worker threads", rayon::current_num_threads());
    std::fs::create_dir_all(&cfg.output_dir)?;
    commands::write_json(&cfg.output_dir, "resolved_config.json", &cfg)?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<Outcome> {
    match cli.command {
        Command::Simulate(c) => commands::simulate(&prepare(&c)?),
        Command::CheckArbitrage(c) => commands::check_arbitrage(&prepare(&c)?),
        Command::PriceEuropean(c) => commands::price_european(&prepare(&c.common)?, c.claim.as_deref(), false),
        Command::Hedge(c) => commands::price_european(&prepare(&c.common)?, c.claim.as_deref(), true),
        Command::PriceAmerican(c) => commands::price_american(&prepare(&c.common)?, c.claim.as_deref()),
        Command::Oracle(c) => commands::oracle(&prepare(&c.common)?, c.claim.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Finding) => ExitCode::from(EXIT_FINDING),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
