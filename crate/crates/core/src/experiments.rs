//! Seeded Monte Carlo runners behind the CLI.
//!
//! Jobs are independent `(cell, seed)` pairs executed on a bounded rayon pool.
//! Results come back in job order and are reduced and written on the calling
//! thread, so output bytes do not depend on the number of workers.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandit::{run_bandit, BanditConfig, BernoulliEnv, Environment, InitialEstimate, SimRng};
use crate::error::{Error, Result};
use crate::estimator::RateGrid;
use crate::gridsim::{
    run_strategy, write_comparison_csv, write_window_csv, GridReport, GridSetup, SeedStats, Strategy,
};

pub const WORKERS_ENV: &str = "EXPRESPONSE_WORKERS";

/// Share of the horizon used for the opening and closing regret windows.
pub const WINDOW_FRACTION: f64 = 0.1;

const RUN_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// A thread pool sized by `EXPRESPONSE_WORKERS`, or by rayon's default when unset.
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Argument(format!("{WORKERS_ENV} must be a positive integer, got {v:?}")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Error::Setup(format!("worker pool: {e}")))
}

/// Rates for instance `index`. Instances with more agents extend those with fewer.
pub fn instance_lambdas(master_seed: u64, index: u64, n: usize, range: (f64, f64)) -> Result<Vec<f64>> {
    let mut rng = SimRng::seed_from_u64(master_seed);
    rng.set_stream(index);
    Ok(BernoulliEnv::random(n, range.0, range.1, &mut rng)?.true_lambdas())
}

/// Seed of the simulation noise for instance `index`.
pub fn run_seed(master_seed: u64, index: u64) -> u64 {
    let mut rng = SimRng::seed_from_u64(master_seed ^ RUN_SALT);
    rng.set_stream(index);
    rng.next_u64()
}

/// Settings shared by both synthetic experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSettings {
    pub horizon: u64,
    pub seeds: u64,
    pub master_seed: u64,
    /// Rates are drawn uniformly from this range unless `lambdas` is set.
    pub lambda_range: (f64, f64),
    /// Fixed rates used for every seed; the agent count must match.
    pub lambdas: Option<Vec<f64>>,
    pub rate_grid: RateGrid,
    pub initial: InitialEstimate,
}

impl Default for SyntheticSettings {
    fn default() -> Self {
        Self {
            horizon: 200_000,
            seeds: 25,
            master_seed: 0,
            lambda_range: (0.05, 1.0),
            lambdas: None,
            rate_grid: RateGrid::default(),
            initial: InitialEstimate::default(),
        }
    }
}

impl SyntheticSettings {
    fn validate(&self, agent_counts: &[usize]) -> Result<()> {
        if self.seeds == 0 {
            return Err(Error::Argument("need at least one seed".into()));
        }
        let (lo, hi) = self.lambda_range;
        if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
            return Err(Error::Argument(format!("invalid rate range [{lo}, {hi}]")));
        }
        if let Some(l) = &self.lambdas {
            if let Some(&n) = agent_counts.iter().find(|&&n| n != l.len()) {
                return Err(Error::Argument(format!("{} fixed rates given for a cell with {n} agents", l.len())));
            }
        }
        self.rate_grid.validate()
    }

    fn lambdas_for(&self, index: u64, n: usize) -> Result<Vec<f64>> {
        match &self.lambdas {
            Some(l) => Ok(l.clone()),
            None => instance_lambdas(self.master_seed, index, n, self.lambda_range),
        }
    }

    fn bandit_config(&self, n: usize, budget: u32, batch_size: u64, index: u64) -> BanditConfig {
        BanditConfig {
            rate_grid: self.rate_grid,
            initial: self.initial.clone(),
            ..BanditConfig::new(n, budget, batch_size, self.horizon, run_seed(self.master_seed, index))
        }
    }
}

fn nonempty<T>(what: &str, v: &[T]) -> Result<()> {
    if v.is_empty() {
        Err(Error::Argument(format!("no {what} given")))
    } else {
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Exp1: regret curves over batch sizes and agent counts

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exp1Config {
    pub batch_sizes: Vec<u64>,
    pub agent_counts: Vec<usize>,
    pub budget: u32,
    pub settings: SyntheticSettings,
}

impl Default for Exp1Config {
    fn default() -> Self {
        Self {
            batch_sizes: vec![5, 10, 50],
            agent_counts: vec![4, 5, 6],
            budget: 5,
            settings: SyntheticSettings::default(),
        }
    }
}

/// Seed-averaged regret curve of one `(batch size, agents)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RegretCurve {
    pub batch_size: u64,
    pub n_agents: usize,
    /// Round count at the end of each batch.
    pub t: Vec<u64>,
    pub regret_cum: Vec<f64>,
    /// Per-round regret of each batch.
    pub regret_round: Vec<f64>,
    pub head_regret: f64,
    pub tail_regret: f64,
}

impl RegretCurve {
    /// Closing over opening mean per-round regret; `None` when nothing was lost early.
    pub fn tail_head_ratio(&self) -> Option<f64> {
        (self.head_regret > 0.0).then(|| self.tail_regret / self.head_regret)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exp1CellSummary {
    pub batch_size: u64,
    pub n_agents: usize,
    pub final_regret_cum: f64,
    pub head_regret: f64,
    pub tail_regret: f64,
    pub tail_head_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exp1Summary {
    pub config: Exp1Config,
    pub window_fraction: f64,
    pub cells: Vec<Exp1CellSummary>,
}

pub fn run_exp1(config: &Exp1Config, pool: &rayon::ThreadPool) -> Result<Vec<RegretCurve>> {
    nonempty("batch sizes", &config.batch_sizes)?;
    nonempty("agent counts", &config.agent_counts)?;
    let s = &config.settings;
    s.validate(&config.agent_counts)?;
    let cells: Vec<(u64, usize)> = config
        .batch_sizes
        .iter()
        .flat_map(|&bs| config.agent_counts.iter().map(move |&n| (bs, n)))
        .collect();
    for &(bs, n) in &cells {
        s.bandit_config(n, config.budget, bs, 0).validate()?;
    }
    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| (0..s.seeds).map(move |k| (c, k))).collect();
    let traces = pool.install(|| {
        jobs.par_iter()
            .map(|&(c, k)| {
                let (bs, n) = cells[c];
                let mut env = BernoulliEnv::new(&s.lambdas_for(k, n)?)?;
                Ok(run_bandit(&s.bandit_config(n, config.budget, bs, k), &mut env)?.trace)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let seeds = s.seeds as usize;
    let k = s.seeds as f64;
    Ok(cells
        .iter()
        .zip(traces.chunks(seeds))
        .map(|(&(bs, n), runs)| {
            let batches = runs[0].per_round_achieved.len();
            let mut regret_cum = vec![0.0; batches];
            let mut regret_round = vec![0.0; batches];
            let (mut head, mut tail) = (0.0, 0.0);
            for trace in runs {
                for b in 0..batches {
                    regret_cum[b] += trace.cumulative_regret[b] / k;
                    regret_round[b] += trace.round_regret(b).max(0.0) / k;
                }
                let (h, t) = trace.head_tail_regret(WINDOW_FRACTION);
                head += h / k;
                tail += t / k;
            }
            RegretCurve {
                batch_size: bs,
                n_agents: n,
                t: (1..=batches as u64).map(|b| b * bs).collect(),
                regret_cum,
                regret_round,
                head_regret: head,
                tail_regret: tail,
            }
        })
        .collect())
}

pub fn exp1_csv_name(batch_size: u64, n_agents: usize) -> String {
    format!("exp1_bs{batch_size}_n{n_agents}.csv")
}

/// Writes one `t, regret_cum, regret_round` CSV per cell and `exp1_summary.json`.
pub fn write_exp1(out_dir: &Path, config: &Exp1Config, curves: &[RegretCurve]) -> Result<Exp1Summary> {
    fs::create_dir_all(out_dir)?;
    for c in curves {
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(
            out_dir.join(exp1_csv_name(c.batch_size, c.n_agents)),
        )?));
        w.write_record(["t", "regret_cum", "regret_round"])?;
        for b in 0..c.t.len() {
            w.write_record([
                c.t[b].to_string(),
                format!("{:.9}", c.regret_cum[b]),
                format!("{:.9}", c.regret_round[b]),
            ])?;
        }
        w.flush()?;
    }
    let summary = Exp1Summary {
        config: config.clone(),
        window_fraction: WINDOW_FRACTION,
        cells: curves
            .iter()
            .map(|c| Exp1CellSummary {
                batch_size: c.batch_size,
                n_agents: c.n_agents,
                final_regret_cum: c.regret_cum.last().copied().unwrap_or(0.0),
                head_regret: c.head_regret,
                tail_regret: c.tail_regret,
                tail_head_ratio: c.tail_head_ratio(),
            })
            .collect(),
    };
    write_json(&out_dir.join("exp1_summary.json"), &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// Exp2: achieved versus optimal reduction over budgets and agent counts

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exp2Config {
    pub budgets: Vec<u32>,
    pub agent_counts: Vec<usize>,
    pub batch_size: u64,
    pub settings: SyntheticSettings,
}

impl Default for Exp2Config {
    fn default() -> Self {
        Self {
            budgets: (2..=8).collect(),
            agent_counts: vec![4, 5, 6],
            batch_size: 50,
            settings: SyntheticSettings::default(),
        }
    }
}

/// Closing-window reduction of one `(agents, budget)` cell, averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exp2Cell {
    pub n_agents: usize,
    pub budget: u32,
    /// Mean per-round expected reduction over the closing window.
    pub achieved: f64,
    /// Mean per-round expected reduction under the true rates.
    pub optimal: f64,
    /// `achieved / optimal`.
    pub ratio: f64,
    /// Worst single-seed ratio.
    pub min_seed_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exp2Summary {
    pub config: Exp2Config,
    pub window_fraction: f64,
    pub cells: Vec<Exp2Cell>,
}

pub fn run_exp2(config: &Exp2Config, pool: &rayon::ThreadPool) -> Result<Vec<Exp2Cell>> {
    nonempty("budgets", &config.budgets)?;
    nonempty("agent counts", &config.agent_counts)?;
    let s = &config.settings;
    s.validate(&config.agent_counts)?;
    let cells: Vec<(usize, u32)> = config
        .agent_counts
        .iter()
        .flat_map(|&n| config.budgets.iter().map(move |&b| (n, b)))
        .collect();
    for &(n, b) in &cells {
        s.bandit_config(n, b, config.batch_size, 0).validate()?;
    }
    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| (0..s.seeds).map(move |k| (c, k))).collect();
    let finals = pool.install(|| {
        jobs.par_iter()
            .map(|&(c, k)| {
                let (n, b) = cells[c];
                let mut env = BernoulliEnv::new(&s.lambdas_for(k, n)?)?;
                let trace = run_bandit(&s.bandit_config(n, b, config.batch_size, k), &mut env)?.trace;
                let t = trace.horizon();
                let w = ((t as f64) * WINDOW_FRACTION).round().max(1.0) as u64;
                Ok((trace.mean_gap(t - w, t), trace.per_round_optimal))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let k = s.seeds as f64;
    Ok(cells
        .iter()
        .zip(finals.chunks(s.seeds as usize))
        .map(|(&(n, b), runs)| {
            let gap = runs.iter().map(|r| r.0).sum::<f64>() / k;
            let optimal = runs.iter().map(|r| r.1).sum::<f64>() / k;
            let achieved = optimal - gap;
            let min_seed_ratio = runs.iter().map(|&(g, o)| shortfall_ratio(g, o)).fold(f64::INFINITY, f64::min);
            Exp2Cell {
                n_agents: n,
                budget: b,
                achieved,
                optimal,
                ratio: shortfall_ratio(gap, optimal),
                min_seed_ratio,
            }
        })
        .collect())
}

// Computed from the shortfall so a run that always plays optimally scores
// exactly 1. An instance with nothing to gain counts as solved.
fn shortfall_ratio(gap: f64, optimal: f64) -> f64 {
    if optimal > 0.0 {
        1.0 - gap / optimal
    } else {
        1.0
    }
}

/// Writes `exp2_ratios.csv` and `exp2_summary.json`.
pub fn write_exp2(out_dir: &Path, config: &Exp2Config, cells: &[Exp2Cell]) -> Result<Exp2Summary> {
    fs::create_dir_all(out_dir)?;
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(out_dir.join("exp2_ratios.csv"))?));
    w.write_record(["n_agents", "budget", "achieved", "optimal", "ratio", "min_seed_ratio"])?;
    for c in cells {
        w.write_record([
            c.n_agents.to_string(),
            c.budget.to_string(),
            format!("{:.9}", c.achieved),
            format!("{:.9}", c.optimal),
            format!("{:.9}", c.ratio),
            format!("{:.9}", c.min_seed_ratio),
        ])?;
    }
    w.flush()?;
    let summary = Exp2Summary {
        config: config.clone(),
        window_fraction: WINDOW_FRACTION,
        cells: cells.to_vec(),
    };
    write_json(&out_dir.join("exp2_summary.json"), &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// Grid experiment

#[derive(Debug, Clone, PartialEq)]
pub struct GridRun {
    pub setup: GridSetup,
    pub strategies: Vec<Strategy>,
    pub weeks: u64,
    pub seeds: u64,
    pub master_seed: u64,
}

/// Report plus the window-level record of the first seed of each strategy.
pub struct GridOutput {
    pub report: GridReport,
    pub first_seed_runs: Vec<crate::gridsim::StrategyRun>,
}

pub fn run_grid(run: &GridRun, pool: &rayon::ThreadPool) -> Result<GridOutput> {
    nonempty("strategies", &run.strategies)?;
    if run.seeds == 0 || run.weeks == 0 {
        return Err(Error::Argument("weeks and seeds must be positive".into()));
    }
    let seeds: Vec<u64> = (0..run.seeds).map(|k| run_seed(run.master_seed, k)).collect();
    let jobs: Vec<(Strategy, usize)> = run
        .strategies
        .iter()
        .flat_map(|&st| (0..seeds.len()).map(move |k| (st, k)))
        .collect();
    let results = pool.install(|| {
        jobs.par_iter()
            .map(|&(st, k)| {
                let r = run_strategy(&run.setup, st, run.weeks, seeds[k])?;
                let stats = SeedStats::of(&r, &run.setup.penalty);
                Ok((stats, (k == 0).then_some(r)))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut first_seed_runs = Vec::new();
    let mut per_strategy = Vec::new();
    for (&st, chunk) in run.strategies.iter().zip(results.chunks(seeds.len())) {
        per_strategy.push((st, chunk.iter().map(|(s, _)| *s).collect()));
        first_seed_runs.extend(chunk.iter().filter_map(|(_, r)| r.clone()));
    }
    Ok(GridOutput {
        report: GridReport::from_seed_stats(&run.setup, run.weeks, &seeds, per_strategy),
        first_seed_runs,
    })
}

pub fn grid_csv_name(strategy: Strategy) -> String {
    format!("gridsim_{}.csv", strategy.label())
}

/// Writes the per-window CSV of each strategy's first seed, `gridsim_comparison.csv`
/// and `gridsim_summary.json`. Returns the paths written.
pub fn write_grid(out_dir: &Path, run: &GridRun, output: &GridOutput) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for r in &output.first_seed_runs {
        let path = out_dir.join(grid_csv_name(r.strategy));
        write_window_csv(BufWriter::new(File::create(&path)?), &run.setup, r)?;
        written.push(path);
    }
    let path = out_dir.join("gridsim_comparison.csv");
    write_comparison_csv(BufWriter::new(File::create(&path)?), &output.report)?;
    written.push(path);
    let path = out_dir.join("gridsim_summary.json");
    write_json(&path, &output.report)?;
    written.push(path);
    Ok(written)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(n: usize) -> rayon::ThreadPool {
        rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap()
    }

    fn small(seeds: u64, horizon: u64) -> SyntheticSettings {
        SyntheticSettings {
            horizon,
            seeds,
            ..SyntheticSettings::default()
        }
    }

    #[test]
    fn instances_nest_across_agent_counts() {
        let four = instance_lambdas(3, 7, 4, (0.05, 1.0)).unwrap();
        let six = instance_lambdas(3, 7, 6, (0.05, 1.0)).unwrap();
        assert_eq!(four[..], six[..4]);
        assert_ne!(four, instance_lambdas(3, 8, 4, (0.05, 1.0)).unwrap());
        assert!(six.iter().all(|l| (0.05..=1.0).contains(l)));
    }

    #[test]
    fn exp1_smoke_has_one_row_per_batch() {
        let config = Exp1Config {
            batch_sizes: vec![7],
            agent_counts: vec![3],
            budget: 4,
            settings: small(1, 100),
        };
        let curves = run_exp1(&config, &pool(1)).unwrap();
        assert_eq!(curves.len(), 1);
        assert_eq!(curves[0].t.len(), 14);
        assert_eq!(*curves[0].t.last().unwrap(), 98);
    }

    #[test]
    fn results_do_not_depend_on_worker_count() {
        let config = Exp1Config {
            batch_sizes: vec![5, 10],
            agent_counts: vec![3, 4],
            budget: 3,
            settings: small(4, 2_000),
        };
        assert_eq!(run_exp1(&config, &pool(1)).unwrap(), run_exp1(&config, &pool(3)).unwrap());
    }

    #[test]
    fn single_agent_ratio_is_exactly_one() {
        let config = Exp2Config {
            budgets: vec![1, 3, 6],
            agent_counts: vec![1],
            batch_size: 10,
            settings: small(3, 1_000),
        };
        for cell in run_exp2(&config, &pool(2)).unwrap() {
            assert_eq!(cell.ratio, 1.0);
            assert_eq!(cell.min_seed_ratio, 1.0);
        }
    }

    #[test]
    fn two_arms_settle_on_the_responsive_agent() {
        let config = Exp2Config {
            budgets: vec![1],
            agent_counts: vec![2],
            batch_size: 10,
            settings: SyntheticSettings {
                lambdas: Some(vec![1.0, 0.01]),
                ..small(5, 20_000)
            },
        };
        let cell = &run_exp2(&config, &pool(2)).unwrap()[0];
        assert!(cell.ratio > 0.999, "{cell:?}");
    }

    #[test]
    fn fixed_rates_must_match_agent_count() {
        let config = Exp2Config {
            agent_counts: vec![3],
            settings: SyntheticSettings {
                lambdas: Some(vec![0.5, 0.1]),
                ..small(1, 100)
            },
            ..Exp2Config::default()
        };
        assert!(matches!(run_exp2(&config, &pool(1)), Err(Error::Argument(_))));
    }
}
