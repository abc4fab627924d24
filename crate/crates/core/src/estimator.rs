//! Offer/success bookkeeping and rate estimation.
//!
//! Each agent's history is a row of `budget` cells, one per discount level
//! `1..=budget`. The estimator fits a reduction rate to the empirical success
//! ratios by scanning a fixed rate grid for the smallest squared error. The
//! optimistic rate is fitted to the ratios lifted by a UCB1 bonus
//! `sqrt(2 ln t / offered)`, with each level's squared error weighted by its
//! offer mass, and is never below the point estimate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{rp, Allocation};

/// Accumulated offer and success mass, `n_agents x budget`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "HistoryRecord", into = "HistoryRecord")]
pub struct History {
    n_agents: usize,
    budget: u32,
    offered: Vec<f64>,
    success: Vec<f64>,
    rounds_elapsed: u64,
}

/// On-disk shape of [`History`]: matrices flattened row-major, column `c - 1`
/// holding discount level `c`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HistoryRecord {
    n_agents: usize,
    budget: u32,
    offered: Vec<f64>,
    success: Vec<f64>,
    rounds_elapsed: u64,
}

impl TryFrom<HistoryRecord> for History {
    type Error = Error;

    fn try_from(r: HistoryRecord) -> Result<Self> {
        let cells = r.n_agents * r.budget as usize;
        for (key, m) in [("offered", &r.offered), ("success", &r.success)] {
            if m.len() != cells {
                return Err(Error::Schema(format!(
                    "{key}: expected {cells} entries for {} agents x {} levels, got {}",
                    r.n_agents,
                    r.budget,
                    m.len()
                )));
            }
        }
        for (idx, (&o, &s)) in r.offered.iter().zip(&r.success).enumerate() {
            if !(o.is_finite() && s.is_finite() && s >= 0.0 && s <= o) {
                return Err(Error::Schema(format!(
                    "success[{idx}]: need 0 <= success <= offered, got success={s}, offered={o}"
                )));
            }
        }
        Ok(Self {
            n_agents: r.n_agents,
            budget: r.budget,
            offered: r.offered,
            success: r.success,
            rounds_elapsed: r.rounds_elapsed,
        })
    }
}

impl From<History> for HistoryRecord {
    fn from(h: History) -> Self {
        Self {
            n_agents: h.n_agents,
            budget: h.budget,
            offered: h.offered,
            success: h.success,
            rounds_elapsed: h.rounds_elapsed,
        }
    }
}

impl History {
    pub fn new(n_agents: usize, budget: u32) -> Self {
        let cells = n_agents * budget as usize;
        Self {
            n_agents,
            budget,
            offered: vec![0.0; cells],
            success: vec![0.0; cells],
            rounds_elapsed: 0,
        }
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn budget(&self) -> u32 {
        self.budget
    }

    pub fn rounds_elapsed(&self) -> u64 {
        self.rounds_elapsed
    }

    fn cell(&self, agent: usize, c: u32) -> Option<usize> {
        (agent < self.n_agents && c >= 1 && c <= self.budget).then(|| agent * self.budget as usize + (c as usize - 1))
    }

    /// Offer mass at `(agent, c)`; zero outside the matrix.
    pub fn offered(&self, agent: usize, c: u32) -> f64 {
        self.cell(agent, c).map_or(0.0, |k| self.offered[k])
    }

    pub fn success(&self, agent: usize, c: u32) -> f64 {
        self.cell(agent, c).map_or(0.0, |k| self.success[k])
    }

    /// Adds one batch: every agent with a non-zero discount gets `batch_size`
    /// offer mass and its success mass at its discount level. The whole batch
    /// is validated before anything is written.
    pub fn record_batch(&mut self, alloc: &Allocation, batch_size: u64, successes: &[f64]) -> Result<()> {
        if batch_size == 0 {
            return Err(Error::Argument("batch size must be positive".into()));
        }
        if alloc.len() != self.n_agents {
            return Err(Error::Dimension {
                expected: self.n_agents,
                actual: alloc.len(),
            });
        }
        if successes.len() != self.n_agents {
            return Err(Error::Dimension {
                expected: self.n_agents,
                actual: successes.len(),
            });
        }
        let bs = batch_size as f64;
        for (i, (&c, &s)) in alloc.units.iter().zip(successes).enumerate() {
            if c > self.budget {
                return Err(Error::Index(format!(
                    "agent {i}: discount level {c} exceeds history width {}",
                    self.budget
                )));
            }
            if !(s.is_finite() && s >= 0.0 && s <= bs) {
                return Err(Error::Consistency(format!(
                    "agent {i}: success mass {s} outside [0, {batch_size}]"
                )));
            }
        }
        for (i, (&c, &s)) in alloc.units.iter().zip(successes).enumerate() {
            if let Some(k) = self.cell(i, c) {
                self.offered[k] += bs;
                self.success[k] += s;
            }
        }
        self.rounds_elapsed += batch_size;
        Ok(())
    }

    /// Success ratio at `(agent, c)`, or `None` when nothing was offered there.
    pub fn empirical_rate(&self, agent: usize, c: u32) -> Option<f64> {
        let k = self.cell(agent, c)?;
        let offered = self.offered[k];
        (offered > 0.0).then(|| self.success[k] / offered)
    }

    /// Empirical rate lifted by `sqrt(2 ln t / offered)` and capped at one.
    pub fn optimistic_rate(&self, agent: usize, c: u32) -> Option<f64> {
        let k = self.cell(agent, c)?;
        let p = self.empirical_rate(agent, c)?;
        Some(optimistic_target(p, self.offered[k], self.rounds_elapsed))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// UCB1 lift of an empirical probability. `ln t` is clamped to zero below two
/// rounds.
pub fn optimistic_target(p: f64, offered: f64, rounds_elapsed: u64) -> f64 {
    let log_t = if rounds_elapsed < 2 {
        0.0
    } else {
        (rounds_elapsed as f64).ln()
    };
    (p + (2.0 * log_t / offered).sqrt()).min(1.0)
}

/// Candidate rates `0, step, 2 step, ...` up to `lambda_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateGrid {
    pub lambda_max: f64,
    pub step: f64,
}

impl Default for RateGrid {
    fn default() -> Self {
        Self {
            lambda_max: 3.0,
            step: 0.01,
        }
    }
}

impl RateGrid {
    pub fn new(lambda_max: f64, step: f64) -> Result<Self> {
        let grid = Self { lambda_max, step };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step.is_finite() && self.step > 0.0) {
            return Err(Error::Argument(format!("grid step must be positive, got {}", self.step)));
        }
        if !(self.lambda_max.is_finite() && self.lambda_max >= self.step) {
            return Err(Error::Argument(format!(
                "lambda_max must be at least the grid step, got {}",
                self.lambda_max
            )));
        }
        Ok(())
    }

    /// Number of grid points, including zero.
    pub fn len(&self) -> usize {
        // Tolerate lambda_max / step landing a hair under an integer.
        (self.lambda_max / self.step + 1e-9).floor() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn value(&self, k: usize) -> f64 {
        k as f64 * self.step
    }
}

/// Current point and optimistic rate estimates per agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorState {
    pub lambda_hat: Vec<f64>,
    pub lambda_hat_plus: Vec<f64>,
}

impl EstimatorState {
    /// No data yet: zero point estimate, maximal optimism.
    pub fn uninformed(n_agents: usize, grid: &RateGrid) -> Self {
        Self {
            lambda_hat: vec![0.0; n_agents],
            lambda_hat_plus: vec![grid.lambda_max; n_agents],
        }
    }
}

struct Cell {
    col: usize,
    offered: f64,
    rate: f64,
    optimistic: f64,
}

/// Grid-scan least-squares fitter with the model curve tabulated once per
/// (grid, budget).
#[derive(Debug, Clone)]
pub struct LinearSearch {
    grid: RateGrid,
    budget: u32,
    // table[k * budget + (c - 1)] = 1 - exp(-grid(k) * c)
    table: Vec<f64>,
}

impl LinearSearch {
    pub fn new(grid: RateGrid, budget: u32) -> Result<Self> {
        grid.validate()?;
        let b = budget as usize;
        let mut table = Vec::with_capacity(grid.len() * b);
        for k in 0..grid.len() {
            let l = grid.value(k);
            table.extend((1..=budget).map(|c| rp(l, c)));
        }
        Ok(Self { grid, budget, table })
    }

    pub fn grid(&self) -> &RateGrid {
        &self.grid
    }

    pub fn fit(&self, history: &History) -> Result<EstimatorState> {
        if history.budget != self.budget {
            return Err(Error::Dimension {
                expected: self.budget as usize,
                actual: history.budget as usize,
            });
        }
        let mut state = EstimatorState::uninformed(history.n_agents, &self.grid);
        let mut cells: Vec<Cell> = Vec::with_capacity(self.budget as usize);
        for agent in 0..history.n_agents {
            cells.clear();
            for c in 1..=self.budget {
                if let Some(rate) = history.empirical_rate(agent, c) {
                    let offered = history.offered(agent, c);
                    cells.push(Cell {
                        col: c as usize - 1,
                        offered,
                        rate,
                        optimistic: optimistic_target(rate, offered, history.rounds_elapsed),
                    });
                }
            }
            if cells.is_empty() {
                continue;
            }
            let (hat, plus) = self.scan(&cells);
            state.lambda_hat[agent] = self.grid.value(hat);
            state.lambda_hat_plus[agent] = self.grid.value(plus.max(hat));
        }
        Ok(state)
    }

    // Both argmins in one pass; strict '<' keeps the smallest grid value on ties.
    // The point fit weighs every observed level equally. The optimistic fit
    // weighs levels by offer mass: a rarely offered level carries a large
    // bonus, and letting it drag the optimistic rate upward would shrink the
    // predicted jumps above the well-sampled levels, so the allocator would
    // never return to the level that needs more samples.
    fn scan(&self, cells: &[Cell]) -> (usize, usize) {
        let b = self.budget as usize;
        let (mut best_hat, mut best_plus) = ((0, f64::INFINITY), (0, f64::INFINITY));
        for (k, row) in self.table.chunks_exact(b).enumerate() {
            let (mut loss_hat, mut loss_plus) = (0.0, 0.0);
            for cell in cells {
                let model = row[cell.col];
                loss_hat += (cell.rate - model) * (cell.rate - model);
                loss_plus += cell.offered * (cell.optimistic - model) * (cell.optimistic - model);
            }
            if loss_hat < best_hat.1 {
                best_hat = (k, loss_hat);
            }
            if loss_plus < best_plus.1 {
                best_plus = (k, loss_plus);
            }
        }
        (best_hat.0, best_plus.0)
    }
}

/// One-shot fit; builds the model table on every call.
pub fn linear_search(history: &History, grid: &RateGrid, budget: u32) -> Result<EstimatorState> {
    LinearSearch::new(*grid, budget)?.fit(history)
}
