use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use expresponse::allocator::{mjs_allocate, weighted_mjs_allocate_with, SelectionRule};
use expresponse::bandit::InitialEstimate;
use expresponse::error::{Error, Result};
use expresponse::estimator::RateGrid;
use expresponse::experiments::{
    run_exp1, run_exp2, run_grid, worker_pool, write_exp1, write_exp2, write_grid, Exp1Config, Exp2Config, GridRun,
    SyntheticSettings,
};
use expresponse::gridsim::{GridConfig, GridSetup, Strategy, LAST_WEEKS};
use expresponse::model::{expected_reduction, jump, reduction_probability, AgentProfile, Allocation};

#[derive(Parser)]
#[command(name = "expresponse", version, about = "Discount allocation and learning for demand response")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Allocate a discount budget greedily for known reduction rates.
    Allocate(AllocateArgs),
    /// Regret curves over batch sizes and agent counts.
    Exp1(Exp1Args),
    /// Closing-window reduction against the known-rate optimum over budgets and agent counts.
    Exp2(Exp2Args),
    /// Four-strategy comparison on the synthetic customer-group grid.
    Gridsim(GridArgs),
}

#[derive(Args)]
struct AllocateArgs {
    /// Comma-separated reduction rates.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required_unless_present = "config")]
    lambdas: Vec<f64>,
    /// JSON array of agents: `{"lambda", "weight", "peak_usage"}`.
    #[arg(long, conflicts_with = "lambdas")]
    config: Option<PathBuf>,
    #[arg(long)]
    budget: u32,
    /// Allocate weight-sized blocks and score usage-weighted reduction.
    #[arg(long)]
    weighted: bool,
    #[arg(long, value_enum, default_value_t = Selection::UsageWeighted)]
    selection: Selection,
}

#[derive(Clone, Copy, ValueEnum)]
enum Selection {
    UsageWeighted,
    RawJump,
}

impl From<Selection> for SelectionRule {
    fn from(s: Selection) -> Self {
        match s {
            Selection::UsageWeighted => SelectionRule::UsageWeighted,
            Selection::RawJump => SelectionRule::RawJump,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Init {
    Optimistic,
    Random,
}

#[derive(Args)]
struct SyntheticArgs {
    #[arg(long, default_value_t = 200_000)]
    horizon: u64,
    #[arg(long, default_value_t = 25)]
    seeds: u64,
    /// Master seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3.0)]
    lambda_max: f64,
    #[arg(long, default_value_t = 0.01)]
    grid_step: f64,
    /// Fixed rates for every seed instead of random draws from [0.05, 1].
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value_t = Init::Optimistic)]
    init: Init,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl SyntheticArgs {
    fn settings(&self) -> Result<SyntheticSettings> {
        Ok(SyntheticSettings {
            horizon: self.horizon,
            seeds: self.seeds,
            master_seed: self.seed,
            lambdas: self.lambdas.clone(),
            rate_grid: RateGrid::new(self.lambda_max, self.grid_step)?,
            initial: match self.init {
                Init::Optimistic => InitialEstimate::Optimistic,
                Init::Random => InitialEstimate::Random,
            },
            ..SyntheticSettings::default()
        })
    }
}

#[derive(Args)]
struct Exp1Args {
    #[arg(long, value_delimiter = ',', default_value = "5,10,50")]
    batch_size: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_value = "4,5,6")]
    agents: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    budget: u32,
    #[command(flatten)]
    common: SyntheticArgs,
}

#[derive(Args)]
struct Exp2Args {
    #[arg(long, value_delimiter = ',', default_value = "2,3,4,5,6,7,8")]
    budget: Vec<u32>,
    #[arg(long, value_delimiter = ',', default_value = "4,5,6")]
    agents: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    batch_size: u64,
    #[command(flatten)]
    common: SyntheticArgs,
}

#[derive(Args)]
struct GridArgs {
    /// Group config (JSON); the built-in four-group market when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 210)]
    weeks: u64,
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Tariff percent per discount unit.
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    budget: Option<u32>,
    /// Trials credited per group and window.
    #[arg(long)]
    batch_size: Option<u64>,
    #[arg(long)]
    lambda_max: Option<f64>,
    #[arg(long)]
    grid_step: Option<f64>,
    /// Strategies to run; all four by default.
    #[arg(long, value_delimiter = ',', value_enum)]
    strategy: Vec<StrategyArg>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    NoDiscount,
    Uniform,
    LearnerW,
    LearnerUw,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::NoDiscount => Strategy::NoDiscount,
            StrategyArg::Uniform => Strategy::Uniform,
            StrategyArg::LearnerW => Strategy::LearnerWeighted,
            StrategyArg::LearnerUw => Strategy::LearnerUnweighted,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentEntry {
    lambda: f64,
    #[serde(default = "one_u32")]
    weight: u32,
    #[serde(default = "one_f64")]
    peak_usage: f64,
}

fn one_u32() -> u32 {
    1
}

fn one_f64() -> f64 {
    1.0
}

fn load_agents(path: &std::path::Path) -> Result<Vec<AgentProfile>> {
    let text = std::fs::read_to_string(path)?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let entries: Vec<AgentEntry> =
        serde_path_to_error::deserialize(de).map_err(|e| Error::Schema(format!("{}: {}", e.path(), e.inner())))?;
    entries
        .into_iter()
        .enumerate()
        .map(|(i, e)| AgentProfile::new(i, e.lambda, e.weight, e.peak_usage))
        .collect()
}

fn fmt_value(v: f64) -> String {
    if v == 0.0 {
        "0.0".into()
    } else {
        format!("{v:.6}")
    }
}

fn allocate(args: &AllocateArgs) -> Result<()> {
    if args.budget == 0 {
        return Err(Error::Argument("budget must be positive".into()));
    }
    let profiles = match &args.config {
        Some(path) => load_agents(path)?,
        None => args
            .lambdas
            .iter()
            .enumerate()
            .map(|(i, &l)| AgentProfile::plain(i, l))
            .collect::<Result<_>>()?,
    };
    if profiles.is_empty() {
        return Err(Error::Argument("no agents given".into()));
    }
    let alloc: Allocation = if args.weighted {
        weighted_mjs_allocate_with(&profiles, args.budget, args.selection.into())?
    } else {
        let lambdas: Vec<f64> = profiles.iter().map(|p| p.lambda).collect();
        mjs_allocate(&lambdas, args.budget)?
    };
    let objective = expected_reduction(&profiles, &alloc, args.weighted)?;
    let units: Vec<String> = alloc.units.iter().map(u32::to_string).collect();
    println!("c = [{}], objective = {}", units.join(", "), fmt_value(objective));
    println!("agent  lambda      c  p(c)        next_jump");
    for (p, &c) in profiles.iter().zip(&alloc.units) {
        println!(
            "{:<5}  {:<10.6}  {:<2} {:<10.6}  {:.6}",
            p.id,
            p.lambda,
            c,
            reduction_probability(p.lambda, c)?,
            jump(p.lambda, c)?,
        );
    }
    Ok(())
}

fn exp1(args: &Exp1Args) -> Result<()> {
    let config = Exp1Config {
        batch_sizes: args.batch_size.clone(),
        agent_counts: args.agents.clone(),
        budget: args.budget,
        settings: args.common.settings()?,
    };
    let curves = run_exp1(&config, &worker_pool()?)?;
    let summary = write_exp1(&args.common.out, &config, &curves)?;
    println!("bs  n  tail/head regret");
    for c in &summary.cells {
        let ratio = c.tail_head_ratio.map_or("-".to_string(), |r| format!("{r:.4}"));
        println!("{:<3} {:<2} {}", c.batch_size, c.n_agents, ratio);
    }
    Ok(())
}

fn exp2(args: &Exp2Args) -> Result<()> {
    let config = Exp2Config {
        budgets: args.budget.clone(),
        agent_counts: args.agents.clone(),
        batch_size: args.batch_size,
        settings: args.common.settings()?,
    };
    let cells = run_exp2(&config, &worker_pool()?)?;
    write_exp2(&args.common.out, &config, &cells)?;
    println!("n  b  ratio");
    for c in &cells {
        println!("{:<2} {:<2} {:.4}", c.n_agents, c.budget, c.ratio);
    }
    Ok(())
}

fn gridsim(args: &GridArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => GridConfig::load(path)?,
        None => GridConfig::default(),
    };
    if let Some(v) = args.scale {
        config.scale = v;
    }
    if let Some(v) = args.budget {
        config.budget = v;
    }
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = args.lambda_max {
        config.rate_grid.lambda_max = v;
    }
    if let Some(v) = args.grid_step {
        config.rate_grid.step = v;
    }
    let strategies: Vec<Strategy> = if args.strategy.is_empty() {
        Strategy::ALL.to_vec()
    } else {
        args.strategy.iter().map(|&s| s.into()).collect()
    };
    let run = GridRun {
        setup: GridSetup::from_config(&config)?,
        strategies,
        weeks: args.weeks,
        seeds: args.seeds,
        master_seed: args.seed,
    };
    let output = run_grid(&run, &worker_pool()?)?;
    write_grid(&args.out, &run, &output)?;
    println!("strategy     peak1(all)  peak1(last {LAST_WEEKS}w)  penalty/day(last {LAST_WEEKS}w)");
    for s in &output.report.strategies {
        println!(
            "{:<12} {:<11.1} {:<16.1} {:.1}",
            s.strategy.label(),
            s.all_weeks.peak1,
            s.last_10_weeks.peak1,
            s.last_10_weeks.penalty
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Allocate(a) => allocate(a),
        Command::Exp1(a) => exp1(a),
        Command::Exp2(a) => exp2(a),
        Command::Gridsim(a) => gridsim(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Io(_) | Error::Csv(_) => ExitCode::FAILURE,
                _ => ExitCode::from(2),
            }
        }
    }
}
