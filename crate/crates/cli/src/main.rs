use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ebon_core::harness::bench::{entmax_bench, BenchConfig};
use ebon_core::harness::config::load_config;
use ebon_core::harness::selfcheck::selfcheck;
use ebon_core::harness::{self, run_dir_name, RunConfig, StrategySpec};
use ebon_core::sac::Learner;

#[derive(Parser)]
#[command(
    name = "ebon",
    version,
    about = "Entmax best-of-N exploration with a SAC learner"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; missing keys take their defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set sac.lr=3e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write metrics, resolved config and checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory; defaults to `runs/<strategy>_seed<seed>`.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Train every strategy against every seed.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated strategies (`random`, `hard`, `ent:<alpha>`,
        /// `arcsine[:<lo>:<hi>]`); defaults to the nine comparison conditions.
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<String>,
        /// Number of seeds, starting from the config seed.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, short, default_value = "runs/sweep")]
        out: PathBuf,
    },
    /// Greedy rollouts of a saved policy.
    Eval {
        /// Checkpoint written by `train`.
        checkpoint: PathBuf,
        /// Run config; defaults to the `config.toml` beside the checkpoint.
        #[arg(long, short)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
    },
    /// Accuracy and timing study of the entmax multiplier solvers.
    EntmaxBench {
        #[command(flatten)]
        config: ConfigArgs,
        /// Also write the report to this file.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Fast invariant checks; exits non-zero if any fails.
    Selfcheck,
}

fn parse_strategy(s: &str) -> Result<StrategySpec> {
    let parts: Vec<&str> = s.trim().split(':').collect();
    let num = |p: &str| {
        p.parse::<f64>()
            .with_context(|| format!("bad number {p:?} in strategy {s:?}"))
    };
    Ok(match parts.as_slice() {
        ["random"] => StrategySpec::Random,
        ["hard"] => StrategySpec::Hard,
        ["ent", a] => StrategySpec::Ent { alpha: num(a)? },
        ["arcsine"] => StrategySpec::EntArcsine { lo: -2.0, hi: 2.0 },
        ["arcsine", lo, hi] => StrategySpec::EntArcsine {
            lo: num(lo)?,
            hi: num(hi)?,
        },
        _ => bail!("unknown strategy {s:?}"),
    })
}

fn train(config: ConfigArgs, out: Option<PathBuf>) -> Result<ExitCode> {
    let cfg: RunConfig = load_config(config.config.as_deref(), &config.overrides)?;
    let out = out.unwrap_or_else(|| Path::new("runs").join(run_dir_name(&cfg.strategy, cfg.seed)));
    let start = Instant::now();
    let summary = harness::train(&cfg, Some(&out))?;
    let last = summary.rows.last();
    println!(
        "{} on {} seed {}: {} episodes in {:.1} s, last return {}, greedy return {}",
        cfg.strategy.label(),
        cfg.env.name(),
        cfg.seed,
        summary.rows.len(),
        start.elapsed().as_secs_f64(),
        last.map_or("-".into(), |r| format!("{:.2}", r.ret)),
        summary
            .final_greedy()
            .map_or("-".into(), |g| format!("{g:.2}")),
    );
    println!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn sweep(
    config: ConfigArgs,
    strategies: Vec<String>,
    seeds: u64,
    out: PathBuf,
) -> Result<ExitCode> {
    let base: RunConfig = load_config(config.config.as_deref(), &config.overrides)?;
    let strategies = if strategies.is_empty() {
        StrategySpec::nine_conditions()
    } else {
        strategies
            .iter()
            .map(|s| parse_strategy(s))
            .collect::<Result<_>>()?
    };
    if seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let seed_list: Vec<u64> = (base.seed..base.seed + seeds).collect();
    let start = Instant::now();
    let runs = harness::sweep(&base, &strategies, &seed_list, Some(&out))?;
    println!(
        "{} runs on {} in {:.1} s; IQM of final greedy return:",
        runs.len(),
        base.env.name(),
        start.elapsed().as_secs_f64()
    );
    for (s, v) in harness::summarize(&runs, &strategies) {
        println!("  {:<16} {v:.2}", s.label());
    }
    println!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn eval(
    checkpoint: PathBuf,
    config: Option<PathBuf>,
    overrides: Vec<String>,
    episodes: usize,
) -> Result<ExitCode> {
    let config = config.unwrap_or_else(|| checkpoint.with_file_name("config.toml"));
    let cfg: RunConfig = load_config(Some(&config), &overrides)?;
    let (learner, _, _) = Learner::load(&checkpoint, cfg.sac.clone())?;
    let ret = harness::greedy_return(&learner, cfg.env, cfg.seed, episodes)?;
    println!(
        "greedy return over {episodes} episodes on {}: {ret:.3}",
        cfg.env.name()
    );
    Ok(ExitCode::SUCCESS)
}

fn entmax_bench_cmd(config: ConfigArgs, out: Option<PathBuf>) -> Result<ExitCode> {
    let cfg: BenchConfig = load_config(config.config.as_deref(), &config.overrides)?;
    let start = Instant::now();
    let report = entmax_bench(&cfg)?;
    let text = report.render();
    print!("{text}");
    println!("elapsed {:.1} s", start.elapsed().as_secs_f64());
    if let Some(path) = out {
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn run_selfcheck() -> ExitCode {
    let results = selfcheck();
    for r in &results {
        let status = if r.passed { "ok  " } else { "FAIL" };
        println!("{status} {}  {}", r.name, r.detail);
    }
    if results.iter().all(|r| r.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn main() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::Train { config, out } => train(config, out),
        Command::Sweep {
            config,
            strategies,
            seeds,
            out,
        } => sweep(config, strategies, seeds, out),
        Command::Eval {
            checkpoint,
            config,
            overrides,
            episodes,
        } => eval(checkpoint, config, overrides, episodes),
        Command::EntmaxBench { config, out } => entmax_bench_cmd(config, out),
        Command::Selfcheck => Ok(run_selfcheck()),
    }
}
