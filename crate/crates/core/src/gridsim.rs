//! Synthetic customer-group grid.
//!
//! Each group follows a daily curve with two designated peak hours. A tariff
//! window holds one discount per group for a few days; on every day and peak
//! the group sheds a random fraction `clamp(p + noise, 0, 1)` of its baseline
//! usage, where `p` is the exponential response to the tariff discount. The
//! distribution company pays a capacity penalty for every kWh of total peak
//! demand above a threshold.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::allocator::{uniform_allocate, SelectionRule};
use crate::bandit::{BanditConfig, Learner, SimRng};
use crate::error::{Error, Result};
use crate::estimator::RateGrid;
use crate::model::{AgentProfile, Allocation, DiscountScale};

pub const HOURS_PER_DAY: usize = 24;
const DAYS_PER_WEEK: u64 = 7;

/// A customer group as simulated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub name: String,
    /// Fraction of tariff-market usage.
    pub usage_share: f64,
    /// Reduction rate per percent of tariff discount.
    pub true_lambda: f64,
    pub weight: u32,
    /// kWh per hour over one day.
    pub base_daily_curve: Vec<f64>,
    /// Hours scored as peak 1 and peak 2.
    pub peak_hours: [usize; 2],
}

impl GroupSpec {
    pub fn baseline_peak(&self, rank: usize) -> f64 {
        self.base_daily_curve[self.peak_hours[rank]]
    }
}

/// One group's usage at one peak over a window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakObservation {
    pub group: usize,
    /// 1 or 2.
    pub peak_rank: u8,
    pub baseline_usage: f64,
    pub observed_usage: f64,
    pub success_prob: f64,
}

impl PeakObservation {
    fn new(group: usize, peak_rank: u8, baseline_usage: f64, observed_usage: f64) -> Self {
        let success_prob = if baseline_usage > 0.0 {
            (1.0 - observed_usage / baseline_usage).clamp(0.0, 1.0)
        } else {
            0.0
        };
        Self {
            group,
            peak_rank,
            baseline_usage,
            observed_usage,
            success_prob,
        }
    }
}

/// Linear charge on peak demand above a threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacityPenalty {
    pub threshold_kwh: f64,
    /// Currency per kWh above the threshold.
    pub rate: f64,
}

impl CapacityPenalty {
    /// Charge for one day given the system demand at each peak hour.
    pub fn daily(&self, peak_totals: &[f64; 2]) -> f64 {
        peak_totals
            .iter()
            .map(|&d| self.rate * (d - self.threshold_kwh).max(0.0))
            .sum()
    }

    pub fn assess(&self, days: &[[f64; 2]]) -> f64 {
        days.iter().map(|d| self.daily(d)).sum()
    }
}

/// Everything one tariff window produced.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowOutcome {
    /// Per group, peak 1 then peak 2.
    pub observations: Vec<PeakObservation>,
    /// System demand at (peak 1, peak 2) for each day of the window.
    pub daily_peak_totals: Vec<[f64; 2]>,
}

impl WindowOutcome {
    /// `(p1 + p2) / 2` for each group.
    pub fn group_success(&self, n_groups: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_groups];
        for o in &self.observations {
            out[o.group] += 0.5 * o.success_prob;
        }
        out
    }
}

/// Simulates `window_days` days under fixed per-group discounts. `noise` is
/// the half-width of the uniform perturbation of each reduction fraction.
pub fn step_window(
    groups: &[GroupSpec],
    discounts: &Allocation,
    scale: DiscountScale,
    window_days: u32,
    noise: f64,
    rng: &mut SimRng,
) -> Result<WindowOutcome> {
    if discounts.len() != groups.len() {
        return Err(Error::Dimension {
            expected: groups.len(),
            actual: discounts.len(),
        });
    }
    if window_days == 0 {
        return Err(Error::Argument("window must span at least one day".into()));
    }
    let mut daily_peak_totals = vec![[0.0; 2]; window_days as usize];
    let mut observations = Vec::with_capacity(2 * groups.len());
    for (i, (g, &c)) in groups.iter().zip(&discounts.units).enumerate() {
        let p = -(-g.true_lambda * scale.apply(c)).exp_m1();
        let mut observed = [0.0; 2];
        for day in daily_peak_totals.iter_mut() {
            for rank in 0..2 {
                let eps = if noise > 0.0 { rng.random_range(-noise..=noise) } else { 0.0 };
                let shed = (p + eps).clamp(0.0, 1.0);
                let usage = g.baseline_peak(rank) * (1.0 - shed);
                observed[rank] += usage;
                day[rank] += usage;
            }
        }
        for (rank, &usage) in observed.iter().enumerate() {
            let baseline = g.baseline_peak(rank) * f64::from(window_days);
            observations.push(PeakObservation::new(i, rank as u8 + 1, baseline, usage));
        }
    }
    Ok(WindowOutcome {
        observations,
        daily_peak_totals,
    })
}

/// Which discount policy a grid run follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    NoDiscount,
    Uniform,
    LearnerWeighted,
    LearnerUnweighted,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::NoDiscount,
        Strategy::Uniform,
        Strategy::LearnerWeighted,
        Strategy::LearnerUnweighted,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Strategy::NoDiscount => "no-discount",
            Strategy::Uniform => "uniform",
            Strategy::LearnerWeighted => "learner-w",
            Strategy::LearnerUnweighted => "learner-uw",
        }
    }
}

/// Fully resolved grid experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSetup {
    pub groups: Vec<GroupSpec>,
    pub penalty: CapacityPenalty,
    pub noise: f64,
    pub window_days: u32,
    pub budget: u32,
    pub scale: DiscountScale,
    /// Trials credited to each group per window when updating the history.
    pub batch_size: u64,
    pub rate_grid: RateGrid,
    pub selection: SelectionRule,
}

impl GridSetup {
    pub fn from_config(config: &GridConfig) -> Result<Self> {
        config.validate()?;
        let groups: Vec<GroupSpec> = config
            .groups
            .iter()
            .map(|g| GroupSpec {
                name: g.name.clone(),
                usage_share: g.usage_share,
                true_lambda: g.true_lambda,
                weight: g.weight,
                base_daily_curve: g
                    .base_daily_curve
                    .clone()
                    .unwrap_or_else(|| config.curve.render(g.usage_share)),
                peak_hours: config.curve.peak_hours,
            })
            .collect();
        let no_discount_peak = (0..2)
            .map(|rank| groups.iter().map(|g| g.baseline_peak(rank)).sum::<f64>())
            .fold(0.0, f64::max);
        let penalty = CapacityPenalty {
            threshold_kwh: config
                .penalty
                .threshold_kwh
                .unwrap_or(config.penalty.threshold_fraction * no_discount_peak),
            rate: config.penalty.rate,
        };
        Ok(Self {
            groups,
            penalty,
            noise: config.noise,
            window_days: config.window_days,
            budget: config.budget,
            scale: DiscountScale::new(config.scale)?,
            batch_size: config.batch_size,
            rate_grid: config.rate_grid,
            selection: config.selection,
        })
    }

    /// Weights and mean peak usage; the rate field is the true rate per discount unit.
    pub fn profiles(&self) -> Vec<AgentProfile> {
        self.groups
            .iter()
            .enumerate()
            .map(|(i, g)| AgentProfile {
                id: i,
                lambda: g.true_lambda * self.scale.scalar(),
                weight: g.weight,
                peak_usage: 0.5 * (g.baseline_peak(0) + g.baseline_peak(1)),
            })
            .collect()
    }
}

/// One window of a grid run.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowRecord {
    pub week: u64,
    pub window: u64,
    pub start_day: u64,
    pub discounts: Allocation,
    pub outcome: WindowOutcome,
    pub penalty: f64,
}

#[derive(Debug, Clone)]
pub struct StrategyRun {
    pub strategy: Strategy,
    pub total_days: u64,
    pub windows: Vec<WindowRecord>,
}

/// Mean daily peak usage (kWh, all groups) and mean daily penalty.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PeakStats {
    pub peak1: f64,
    pub peak2: f64,
    pub penalty: f64,
    pub days: u64,
}

impl StrategyRun {
    /// Statistics over days `[from_day, total_days)`.
    pub fn stats_from(&self, from_day: u64, penalty: &CapacityPenalty) -> PeakStats {
        let mut s = PeakStats::default();
        let mut days = 0u64;
        for w in &self.windows {
            for (d, totals) in w.outcome.daily_peak_totals.iter().enumerate() {
                if w.start_day + d as u64 >= from_day {
                    s.peak1 += totals[0];
                    s.peak2 += totals[1];
                    s.penalty += penalty.daily(totals);
                    days += 1;
                }
            }
        }
        s.days = days;
        if days > 0 {
            let k = days as f64;
            s.peak1 /= k;
            s.peak2 /= k;
            s.penalty /= k;
        }
        s
    }

    pub fn stats_all(&self, penalty: &CapacityPenalty) -> PeakStats {
        self.stats_from(0, penalty)
    }

    /// Statistics over the final ten weeks, or the whole run if shorter.
    pub fn stats_last_weeks(&self, weeks: u64, penalty: &CapacityPenalty) -> PeakStats {
        self.stats_from(self.total_days.saturating_sub(weeks * DAYS_PER_WEEK), penalty)
    }
}

/// Runs one strategy for `weeks` weeks. The noise stream depends only on
/// `seed`, so strategies sharing a seed see the same random perturbations.
pub fn run_strategy(setup: &GridSetup, strategy: Strategy, weeks: u64, seed: u64) -> Result<StrategyRun> {
    if setup.groups.is_empty() {
        return Err(Error::Setup("no customer groups".into()));
    }
    let n = setup.groups.len();
    let total_days = weeks * DAYS_PER_WEEK;
    let n_windows = total_days.div_ceil(u64::from(setup.window_days));
    let mut rng = SimRng::seed_from_u64(seed);

    let mut learner = match strategy {
        Strategy::LearnerWeighted | Strategy::LearnerUnweighted => {
            let config = BanditConfig {
                budget: setup.budget,
                n_agents: n,
                batch_size: setup.batch_size,
                horizon: n_windows.max(1) * setup.batch_size,
                rate_grid: setup.rate_grid,
                rng_seed: seed,
                weighted: strategy == Strategy::LearnerWeighted,
                selection: setup.selection,
                initial: Default::default(),
                frozen: false,
            };
            let mut init_rng = SimRng::seed_from_u64(seed ^ 0x5eed_1ea2);
            Some(Learner::new(&config, &setup.profiles(), &mut init_rng)?)
        }
        _ => None,
    };

    let mut windows = Vec::with_capacity(n_windows as usize);
    for window in 0..n_windows {
        let start_day = window * u64::from(setup.window_days);
        let days = (total_days - start_day).min(u64::from(setup.window_days)) as u32;
        let discounts = match (strategy, &learner) {
            (Strategy::NoDiscount, _) => Allocation::zeros(n, setup.budget),
            (Strategy::Uniform, _) => uniform_allocate(n, setup.budget)?,
            (_, Some(l)) => l.propose()?,
            (_, None) => unreachable!("learner strategies always build a learner"),
        };
        let outcome = step_window(&setup.groups, &discounts, setup.scale, days, setup.noise, &mut rng)?;
        if let Some(l) = learner.as_mut() {
            let bs = setup.batch_size as f64;
            let successes: Vec<f64> = outcome.group_success(n).iter().map(|p| p * bs).collect();
            l.update(&discounts, setup.batch_size, &successes)?;
        }
        let penalty = setup.penalty.assess(&outcome.daily_peak_totals);
        windows.push(WindowRecord {
            week: start_day / DAYS_PER_WEEK,
            window,
            start_day,
            discounts,
            outcome,
            penalty,
        });
    }
    Ok(StrategyRun {
        strategy,
        total_days,
        windows,
    })
}

/// Averages for one strategy over all weeks and over the final ten.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: Strategy,
    pub all_weeks: PeakStats,
    pub last_10_weeks: PeakStats,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridReport {
    pub weeks: u64,
    pub seeds: Vec<u64>,
    pub threshold_kwh: f64,
    pub strategies: Vec<StrategySummary>,
}

impl GridReport {
    pub fn get(&self, strategy: Strategy) -> Option<&StrategySummary> {
        self.strategies.iter().find(|s| s.strategy == strategy)
    }

    /// Fractional peak-1 reduction of `strategy` against no discount over the last ten weeks.
    pub fn last_10_peak1_reduction(&self, strategy: Strategy) -> Option<f64> {
        let base = self.get(Strategy::NoDiscount)?.last_10_weeks.peak1;
        let s = self.get(strategy)?.last_10_weeks.peak1;
        Some(1.0 - s / base)
    }
}

pub const LAST_WEEKS: u64 = 10;

/// Runs `strategies` on every seed and averages the per-seed statistics.
/// `on_run` sees each finished run, e.g. to stream its windows to disk.
pub fn run_grid_experiment(
    setup: &GridSetup,
    strategies: &[Strategy],
    weeks: u64,
    seeds: &[u64],
    mut on_run: impl FnMut(u64, &StrategyRun) -> Result<()>,
) -> Result<GridReport> {
    let mut per_strategy = Vec::new();
    for &strategy in strategies {
        let mut stats = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let run = run_strategy(setup, strategy, weeks, seed)?;
            stats.push(SeedStats::of(&run, &setup.penalty));
            on_run(seed, &run)?;
        }
        per_strategy.push((strategy, stats));
    }
    Ok(GridReport::from_seed_stats(setup, weeks, seeds, per_strategy))
}

/// Whole-run and final-weeks statistics of one seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedStats {
    pub all_weeks: PeakStats,
    pub last_10_weeks: PeakStats,
}

impl SeedStats {
    pub fn of(run: &StrategyRun, penalty: &CapacityPenalty) -> Self {
        Self {
            all_weeks: run.stats_all(penalty),
            last_10_weeks: run.stats_last_weeks(LAST_WEEKS, penalty),
        }
    }
}

impl GridReport {
    /// Averages per-seed statistics in the order given.
    pub fn from_seed_stats(
        setup: &GridSetup,
        weeks: u64,
        seeds: &[u64],
        per_strategy: Vec<(Strategy, Vec<SeedStats>)>,
    ) -> Self {
        let strategies = per_strategy
            .into_iter()
            .map(|(strategy, stats)| {
                let k = stats.len().max(1) as f64;
                let (mut all, mut last) = (PeakStats::default(), PeakStats::default());
                for s in &stats {
                    accumulate(&mut all, &s.all_weeks);
                    accumulate(&mut last, &s.last_10_weeks);
                }
                StrategySummary {
                    strategy,
                    all_weeks: scaled(all, k),
                    last_10_weeks: scaled(last, k),
                }
            })
            .collect();
        Self {
            weeks,
            seeds: seeds.to_vec(),
            threshold_kwh: setup.penalty.threshold_kwh,
            strategies,
        }
    }
}

fn accumulate(acc: &mut PeakStats, s: &PeakStats) {
    acc.peak1 += s.peak1;
    acc.peak2 += s.peak2;
    acc.penalty += s.penalty;
    acc.days = s.days;
}

fn scaled(s: PeakStats, k: f64) -> PeakStats {
    PeakStats {
        peak1: s.peak1 / k,
        peak2: s.peak2 / k,
        penalty: s.penalty / k,
        days: s.days,
    }
}

/// Writes one row per strategy and period: `strategy, period, days, peak1,
/// peak2, daily_penalty, total_penalty, peak1_reduction`.
pub fn write_comparison_csv<W: Write>(out: W, report: &GridReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "strategy",
        "period",
        "days",
        "peak1",
        "peak2",
        "daily_penalty",
        "total_penalty",
        "peak1_reduction",
    ])?;
    let base = report.get(Strategy::NoDiscount);
    for s in &report.strategies {
        for (period, stats, base_stats) in [
            ("all", s.all_weeks, base.map(|b| b.all_weeks)),
            ("last10", s.last_10_weeks, base.map(|b| b.last_10_weeks)),
        ] {
            let reduction = base_stats.map_or(String::new(), |b| format!("{:.6}", 1.0 - stats.peak1 / b.peak1));
            w.write_record([
                s.strategy.label().to_string(),
                period.to_string(),
                stats.days.to_string(),
                format!("{:.6}", stats.peak1),
                format!("{:.6}", stats.peak2),
                format!("{:.6}", stats.penalty),
                format!("{:.6}", stats.penalty * stats.days as f64),
                reduction,
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Streams `week, window, group, peak_rank, baseline, observed, success_prob,
/// discount_units, penalty`, one row per group and peak per window.
pub fn write_window_csv<W: Write>(out: W, setup: &GridSetup, run: &StrategyRun) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "week",
        "window",
        "group",
        "peak_rank",
        "baseline",
        "observed",
        "success_prob",
        "discount_units",
        "penalty",
    ])?;
    for rec in &run.windows {
        for o in &rec.outcome.observations {
            w.write_record([
                rec.week.to_string(),
                rec.window.to_string(),
                setup.groups[o.group].name.clone(),
                o.peak_rank.to_string(),
                format!("{:.6}", o.baseline_usage),
                format!("{:.6}", o.observed_usage),
                format!("{:.9}", o.success_prob),
                rec.discounts.units[o.group].to_string(),
                format!("{:.6}", rec.penalty),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Config file

/// Top-level JSON config for a grid experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub groups: Vec<GroupConfig>,
    #[serde(default)]
    pub curve: CurveConfig,
    #[serde(default)]
    pub penalty: PenaltyConfig,
    #[serde(default = "defaults::noise")]
    pub noise: f64,
    #[serde(default = "defaults::window_days")]
    pub window_days: u32,
    #[serde(default = "defaults::budget")]
    pub budget: u32,
    /// Tariff percent per discount unit.
    #[serde(default = "defaults::scale")]
    pub scale: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: u64,
    #[serde(default = "defaults::rate_grid")]
    pub rate_grid: RateGrid,
    #[serde(default)]
    pub selection: SelectionRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupConfig {
    pub name: String,
    pub usage_share: f64,
    pub true_lambda: f64,
    #[serde(default = "defaults::weight")]
    pub weight: u32,
    /// Overrides the share of the market curve when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_daily_curve: Option<Vec<f64>>,
}

/// Market-wide daily curve: a flat base plus one Gaussian bump per peak hour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveConfig {
    pub base_kwh: f64,
    pub peak_hours: [usize; 2],
    /// Bump heights above the base at each peak hour.
    pub peak_kwh: [f64; 2],
    pub width_hours: f64,
}

impl Default for CurveConfig {
    fn default() -> Self {
        Self {
            base_kwh: 30_000.0,
            peak_hours: [7, 17],
            peak_kwh: [40_000.0, 39_700.0],
            width_hours: 1.5,
        }
    }
}

impl CurveConfig {
    /// The market curve scaled by `share`.
    pub fn render(&self, share: f64) -> Vec<f64> {
        (0..HOURS_PER_DAY)
            .map(|h| {
                let bumps: f64 = self
                    .peak_hours
                    .iter()
                    .zip(&self.peak_kwh)
                    .map(|(&center, &height)| {
                        let z = (h as f64 - center as f64) / self.width_hours;
                        height * (-0.5 * z * z).exp()
                    })
                    .sum();
                share * (self.base_kwh + bumps)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltyConfig {
    /// Threshold as a fraction of the larger no-discount peak total.
    #[serde(default = "defaults::threshold_fraction")]
    pub threshold_fraction: f64,
    /// Absolute threshold; overrides the fraction when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold_kwh: Option<f64>,
    #[serde(default = "defaults::penalty_rate")]
    pub rate: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            threshold_fraction: defaults::threshold_fraction(),
            threshold_kwh: None,
            rate: defaults::penalty_rate(),
        }
    }
}

mod defaults {
    use crate::estimator::RateGrid;

    pub fn noise() -> f64 {
        0.05
    }
    pub fn window_days() -> u32 {
        3
    }
    pub fn budget() -> u32 {
        8
    }
    /// 8 units x 1.875 % = a 15 % discount budget.
    pub fn scale() -> f64 {
        1.875
    }
    pub fn batch_size() -> u64 {
        1000
    }
    pub fn rate_grid() -> RateGrid {
        RateGrid {
            lambda_max: 1.0,
            step: 0.001,
        }
    }
    pub fn weight() -> u32 {
        1
    }
    pub fn threshold_fraction() -> f64 {
        0.95
    }
    pub fn penalty_rate() -> f64 {
        1.0
    }
}

impl Default for GridConfig {
    /// Four groups shaped after the households / small offices / mid-level
    /// offices / high-level offices split, with households the most responsive.
    fn default() -> Self {
        let group = |name: &str, usage_share, true_lambda, weight| GroupConfig {
            name: name.into(),
            usage_share,
            true_lambda,
            weight,
            base_daily_curve: None,
        };
        Self {
            groups: vec![
                group("G1", 0.50, 0.030, 4),
                group("G2", 0.25, 0.006, 2),
                group("G3", 0.11, 0.004, 1),
                group("G4", 0.11, 0.003, 1),
            ],
            curve: CurveConfig::default(),
            penalty: PenaltyConfig::default(),
            noise: defaults::noise(),
            window_days: defaults::window_days(),
            budget: defaults::budget(),
            scale: defaults::scale(),
            batch_size: defaults::batch_size(),
            rate_grid: defaults::rate_grid(),
            selection: SelectionRule::default(),
        }
    }
}

fn schema(key: impl Into<String>, msg: impl std::fmt::Display) -> Error {
    Error::Schema(format!("{}: {msg}", key.into()))
}

impl GridConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            schema(if path == "." { "config".to_string() } else { path }, e.into_inner())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(schema("groups", "at least one group is required"));
        }
        let mut share_sum = 0.0;
        for (i, g) in self.groups.iter().enumerate() {
            let key = |field: &str| format!("groups[{i}].{field}");
            if !(g.usage_share.is_finite() && g.usage_share >= 0.0) {
                return Err(schema(key("usage_share"), "must be a non-negative fraction"));
            }
            share_sum += g.usage_share;
            if !(g.true_lambda.is_finite() && g.true_lambda >= 0.0) {
                return Err(schema(key("true_lambda"), "must be non-negative"));
            }
            if g.weight < 1 {
                return Err(schema(key("weight"), "must be at least 1"));
            }
            if let Some(curve) = &g.base_daily_curve {
                if curve.len() != HOURS_PER_DAY {
                    return Err(schema(
                        key("base_daily_curve"),
                        format!("expected {HOURS_PER_DAY} hourly values, got {}", curve.len()),
                    ));
                }
                if curve.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return Err(schema(key("base_daily_curve"), "values must be non-negative"));
                }
            }
        }
        if share_sum > 1.0 + 1e-9 {
            return Err(schema("groups", format!("usage shares sum to {share_sum}, above 1")));
        }
        let [h1, h2] = self.curve.peak_hours;
        if h1 == h2 || h1 >= HOURS_PER_DAY || h2 >= HOURS_PER_DAY {
            return Err(schema("curve.peak_hours", "need two distinct hours in 0..24"));
        }
        if !(self.curve.width_hours > 0.0) {
            return Err(schema("curve.width_hours", "must be positive"));
        }
        if self.curve.base_kwh < 0.0 || self.curve.peak_kwh.iter().any(|&v| v < 0.0) {
            return Err(schema("curve", "usage levels must be non-negative"));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(schema("noise", "must lie in [0, 0.5]"));
        }
        if self.window_days == 0 {
            return Err(schema("window_days", "must be at least 1"));
        }
        if self.budget == 0 {
            return Err(schema("budget", "must be positive"));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(schema("scale", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(schema("batch_size", "must be positive"));
        }
        self.rate_grid.validate().map_err(|e| schema("rate_grid", e))?;
        if !(self.penalty.rate >= 0.0) {
            return Err(schema("penalty.rate", "must be non-negative"));
        }
        if !(self.penalty.threshold_fraction >= 0.0) {
            return Err(schema("penalty.threshold_fraction", "must be non-negative"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn quiet(config: GridConfig) -> GridSetup {
        GridSetup::from_config(&GridConfig { noise: 0.0, ..config }).unwrap()
    }

    fn single_group(true_lambda: f64) -> GridSetup {
        let mut config = GridConfig::default();
        config.groups = vec![GroupConfig {
            name: "solo".into(),
            usage_share: 1.0,
            true_lambda,
            weight: 1,
            base_daily_curve: None,
        }];
        config.scale = 1.0;
        quiet(config)
    }

    #[test]
    fn no_discount_without_noise_observes_baseline() {
        let setup = quiet(GridConfig::default());
        let mut rng = SimRng::seed_from_u64(0);
        let out = step_window(&setup.groups, &Allocation::zeros(4, 8), setup.scale, 3, 0.0, &mut rng).unwrap();
        for o in &out.observations {
            assert_eq!(o.observed_usage, o.baseline_usage);
            assert_eq!(o.success_prob, 0.0);
        }
    }

    #[test]
    fn noiseless_success_matches_response_curve() {
        let setup = single_group(0.5);
        let mut rng = SimRng::seed_from_u64(0);
        let alloc = Allocation::new(vec![2], 2).unwrap();
        let out = step_window(&setup.groups, &alloc, setup.scale, 3, 0.0, &mut rng).unwrap();
        for o in &out.observations {
            assert_abs_diff_eq!(o.success_prob, 0.632_120_558_828_557_7, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(out.group_success(1)[0], 0.632_120_558_828_557_7, epsilon = 1e-12);
    }

    #[test]
    fn saturating_discount_sheds_everything() {
        let setup = single_group(50.0);
        let mut rng = SimRng::seed_from_u64(0);
        let alloc = Allocation::new(vec![10], 10).unwrap();
        let out = step_window(&setup.groups, &alloc, setup.scale, 1, 0.0, &mut rng).unwrap();
        for o in &out.observations {
            assert!(o.observed_usage < 1e-12 * o.baseline_usage);
            assert_abs_diff_eq!(o.success_prob, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn usage_is_conserved_under_noise() {
        let setup = GridSetup::from_config(&GridConfig {
            noise: 0.3,
            ..GridConfig::default()
        })
        .unwrap();
        let mut rng = SimRng::seed_from_u64(9);
        for c in 0..=8u32 {
            let alloc = Allocation::new(vec![c, 8 - c, 0, 0], 8).unwrap();
            let out = step_window(&setup.groups, &alloc, setup.scale, 3, setup.noise, &mut rng).unwrap();
            for o in &out.observations {
                assert!(o.observed_usage >= 0.0 && o.observed_usage <= o.baseline_usage);
                assert!((0.0..=1.0).contains(&o.success_prob));
            }
        }
    }

    #[test]
    fn penalty_is_linear_above_threshold_and_monotone() {
        let p = CapacityPenalty {
            threshold_kwh: 100.0,
            rate: 2.0,
        };
        assert_eq!(p.daily(&[110.0, 90.0]), 20.0);
        assert_eq!(p.assess(&[[110.0, 105.0], [100.0, 100.0]]), 30.0);

        let setup = quiet(GridConfig::default());
        let mut last = f64::INFINITY;
        for c in 0..=8u32 {
            let mut rng = SimRng::seed_from_u64(0);
            let alloc = Allocation::new(vec![c, 0, 0, 0], 8).unwrap();
            let out = step_window(&setup.groups, &alloc, setup.scale, 3, 0.0, &mut rng).unwrap();
            let assessed = setup.penalty.assess(&out.daily_peak_totals);
            assert!(assessed <= last);
            last = assessed;
        }
    }

    #[test]
    fn default_threshold_is_95_percent_of_larger_peak() {
        let setup = quiet(GridConfig::default());
        let peak1: f64 = setup.groups.iter().map(|g| g.baseline_peak(0)).sum();
        let peak2: f64 = setup.groups.iter().map(|g| g.baseline_peak(1)).sum();
        assert!(peak1 > peak2);
        assert_abs_diff_eq!(setup.penalty.threshold_kwh, 0.95 * peak1, epsilon = 1e-9);
    }

    #[test]
    fn no_discount_penalty_matches_hand_computation() {
        // Flat curve with spikes at hours 7 and 17, one group, threshold 90, rate 3.
        let mut curve = vec![10.0; 24];
        curve[7] = 100.0;
        curve[17] = 95.0;
        let mut config = GridConfig::default();
        config.groups = vec![GroupConfig {
            name: "flat".into(),
            usage_share: 1.0,
            true_lambda: 0.1,
            weight: 1,
            base_daily_curve: Some(curve),
        }];
        config.penalty.threshold_kwh = Some(90.0);
        config.penalty.rate = 3.0;
        let setup = quiet(config);
        // Per day: 3 * (10 + 5) = 45; two weeks = 14 days.
        let run = run_strategy(&setup, Strategy::NoDiscount, 2, 1).unwrap();
        let total: f64 = run.windows.iter().map(|w| w.penalty).sum();
        assert_abs_diff_eq!(total, 45.0 * 14.0, epsilon = 1e-9);
        let s = run.stats_all(&setup.penalty);
        assert_eq!((s.peak1, s.peak2, s.penalty, s.days), (100.0, 95.0, 45.0, 14));
    }

    #[test]
    fn windows_cover_every_day_once() {
        let setup = quiet(GridConfig::default());
        let run = run_strategy(&setup, Strategy::Uniform, 1, 0).unwrap();
        let days: Vec<usize> = run.windows.iter().map(|w| w.outcome.daily_peak_totals.len()).collect();
        assert_eq!(days, vec![3, 3, 1]);
        assert!(run.windows.iter().all(|w| w.discounts.units == vec![2, 2, 2, 2]));
    }

    #[test]
    fn noiseless_learner_recovers_scaled_rates() {
        let mut config = GridConfig::default();
        config.scale = 1.0;
        config.noise = 0.0;
        config.groups[0].true_lambda = 0.12;
        config.groups[1].true_lambda = 0.3;
        config.groups[2].true_lambda = 0.05;
        config.groups[3].true_lambda = 0.2;
        config.rate_grid = RateGrid::new(1.0, 0.01).unwrap();
        let setup = GridSetup::from_config(&config).unwrap();
        let bandit = BanditConfig::new(4, setup.budget, setup.batch_size, setup.batch_size * 200, 0);
        let mut learner = Learner::new(&bandit, &setup.profiles(), &mut SimRng::seed_from_u64(0)).unwrap();
        let mut rng = SimRng::seed_from_u64(0);
        for _ in 0..200 {
            let alloc = learner.propose().unwrap();
            let out = step_window(&setup.groups, &alloc, setup.scale, 3, 0.0, &mut rng).unwrap();
            let s: Vec<f64> = out.group_success(4).iter().map(|p| p * setup.batch_size as f64).collect();
            learner.update(&alloc, setup.batch_size, &s).unwrap();
        }
        for (i, g) in setup.groups.iter().enumerate() {
            let offered = (1..=setup.budget).any(|c| learner.history().offered(i, c) > 0.0);
            if offered {
                assert!(
                    (learner.state().lambda_hat[i] - g.true_lambda).abs() <= 0.01 + 1e-12,
                    "group {i}: {} vs {}",
                    learner.state().lambda_hat[i],
                    g.true_lambda
                );
            }
        }
    }

    #[test]
    fn config_errors_name_the_key() {
        let err = GridConfig::from_json(r#"{"groups": [{"name": "a", "usage_share": "x", "true_lambda": 0.1}]}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("groups[0].usage_share"), "{err}");

        let err = GridConfig::from_json(r#"{"groups": [], "nosie": 0.1}"#).unwrap_err().to_string();
        assert!(err.contains("nosie"), "{err}");

        let err = GridConfig::from_json(
            r#"{"groups": [{"name": "a", "usage_share": 0.7, "true_lambda": 0.1},
                           {"name": "b", "usage_share": 0.6, "true_lambda": 0.1}]}"#,
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("groups") && err.contains("sum"), "{err}");

        let err = GridConfig::from_json(r#"{"groups": [{"name": "a", "usage_share": 0.5, "true_lambda": 0.1, "weight": 0}]}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("groups[0].weight"), "{err}");

        let err = GridConfig::from_json(
            r#"{"groups": [{"name": "a", "usage_share": 0.5, "true_lambda": 0.1}], "curve": {"base_kwh": 1, "peak_hours": [7, 7], "peak_kwh": [1, 1], "width_hours": 1}}"#,
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("curve.peak_hours"), "{err}");
    }

    #[test]
    fn default_config_round_trips_through_json() {
        let text = serde_json::to_string_pretty(&GridConfig::default()).unwrap();
        assert_eq!(GridConfig::from_json(&text).unwrap(), GridConfig::default());
    }
}
