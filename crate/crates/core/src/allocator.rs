//! Budget allocation.
//!
//! [`mjs_allocate`] hands out the budget one unit at a time to the agent with
//! the largest next jump. Because every agent's jumps are non-increasing, the
//! `b` units land on the `b` largest jumps overall, which is the optimum of the
//! separable concave objective. [`brute_force_allocate`] exists to check that.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_rate, jump_unchecked, objective, rp, AgentProfile, Allocation};

/// Upper bound on the number of allocations the brute-force oracles will enumerate.
pub const ENUMERATION_LIMIT: u128 = 10_000_000;

/// Maximum-jump selection. Ties go to the lowest agent index.
pub fn mjs_allocate(lambdas: &[f64], budget: u32) -> Result<Allocation> {
    if lambdas.is_empty() {
        return Err(Error::Argument("at least one agent is required".into()));
    }
    if budget == 0 {
        return Err(Error::Argument("budget must be positive".into()));
    }
    for &l in lambdas {
        check_rate(l)?;
    }

    let mut units = vec![0u32; lambdas.len()];
    let mut next_jump: Vec<f64> = lambdas.iter().map(|&l| jump_unchecked(l, 0)).collect();
    for _ in 0..budget {
        let mut best = 0;
        for (d, &j) in next_jump.iter().enumerate().skip(1) {
            if j > next_jump[best] {
                best = d;
            }
        }
        units[best] += 1;
        next_jump[best] = jump_unchecked(lambdas[best], units[best]);
    }
    Ok(Allocation { units, budget })
}

/// How the weighted allocator ranks groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionRule {
    /// `peak_usage * jump`: favours groups that shed more energy.
    #[default]
    UsageWeighted,
    /// Plain jump, as in the unweighted allocator.
    RawJump,
}

/// Weighted maximum-jump selection with the default usage-weighted ranking.
pub fn weighted_mjs_allocate(profiles: &[AgentProfile], budget: u32) -> Result<Allocation> {
    weighted_mjs_allocate_with(profiles, budget, SelectionRule::UsageWeighted)
}

/// Repeatedly picks the best-ranked group whose weight still fits and grants
/// it `weight` units. Budget left over when no weight fits stays unspent.
pub fn weighted_mjs_allocate_with(profiles: &[AgentProfile], budget: u32, rule: SelectionRule) -> Result<Allocation> {
    if profiles.is_empty() {
        return Err(Error::Argument("at least one group is required".into()));
    }
    if budget == 0 {
        return Err(Error::Argument("budget must be positive".into()));
    }
    for p in profiles {
        p.validate()?;
    }

    let score = |p: &AgentProfile, c: u32| {
        let j = jump_unchecked(p.lambda, c);
        match rule {
            SelectionRule::UsageWeighted => p.peak_usage * j,
            SelectionRule::RawJump => j,
        }
    };

    let mut units = vec![0u32; profiles.len()];
    let mut remaining = budget;
    loop {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in profiles.iter().enumerate() {
            if p.weight > remaining {
                continue;
            }
            let s = score(p, units[i]);
            match best {
                Some((_, top)) if s <= top => {}
                _ => best = Some((i, s)),
            }
        }
        let Some((chosen, _)) = best else { break };
        units[chosen] += profiles[chosen].weight;
        remaining -= profiles[chosen].weight;
    }
    Ok(Allocation { units, budget })
}

/// Equal split; the remainder goes to the lowest indices.
pub fn uniform_allocate(n: usize, budget: u32) -> Result<Allocation> {
    if n == 0 {
        return Err(Error::Argument("at least one agent is required".into()));
    }
    let n32 = u32::try_from(n).map_err(|_| Error::Argument(format!("too many agents: {n}")))?;
    let (base, extra) = (budget / n32, budget % n32);
    let units = (0..n32).map(|i| base + u32::from(i < extra)).collect();
    Ok(Allocation { units, budget })
}

/// Number of allocations of at most `budget` units over `n` agents: C(b + n, n).
pub fn composition_count(n: usize, budget: u32) -> u128 {
    let b = u128::from(budget);
    let mut count: u128 = 1;
    for k in 1..=n as u128 {
        // C(b + k, k) = C(b + k - 1, k - 1) * (b + k) / k, exact at each step.
        count = match count.checked_mul(b + k) {
            Some(v) => v / k,
            None => return u128::MAX,
        };
    }
    count
}

/// Exhaustive search over every allocation with total at most `budget`.
/// Returns the first maximiser in lexicographic order.
pub fn brute_force_allocate(lambdas: &[f64], budget: u32) -> Result<Allocation> {
    if lambdas.is_empty() {
        return Err(Error::Argument("at least one agent is required".into()));
    }
    for &l in lambdas {
        check_rate(l)?;
    }
    let count = composition_count(lambdas.len(), budget);
    if count > ENUMERATION_LIMIT {
        return Err(Error::Capacity {
            count,
            limit: ENUMERATION_LIMIT,
        });
    }

    let mut current = vec![0u32; lambdas.len()];
    let mut best = current.clone();
    let mut best_value = objective(lambdas, &current);
    enumerate(&mut current, 0, budget, &mut |c| {
        let v = objective(lambdas, c);
        if v > best_value {
            best_value = v;
            best.copy_from_slice(c);
        }
    });
    Ok(Allocation { units: best, budget })
}

fn enumerate(current: &mut [u32], i: usize, remaining: u32, visit: &mut impl FnMut(&[u32])) {
    if i == current.len() {
        visit(current);
        return;
    }
    for c in 0..=remaining {
        current[i] = c;
        enumerate(current, i + 1, remaining - c, visit);
    }
    current[i] = 0;
}

/// Exhaustive search over allocations where group `i` receives a multiple of
/// its weight, maximising the usage-weighted objective.
pub fn brute_force_weighted_allocate(profiles: &[AgentProfile], budget: u32) -> Result<Allocation> {
    if profiles.is_empty() {
        return Err(Error::Argument("at least one group is required".into()));
    }
    for p in profiles {
        p.validate()?;
    }
    let count = profiles
        .iter()
        .map(|p| u128::from(budget / p.weight) + 1)
        .try_fold(1u128, |acc, k| acc.checked_mul(k))
        .unwrap_or(u128::MAX);
    if count > ENUMERATION_LIMIT {
        return Err(Error::Capacity {
            count,
            limit: ENUMERATION_LIMIT,
        });
    }

    let value = |units: &[u32]| -> f64 {
        profiles
            .iter()
            .zip(units)
            .map(|(p, &c)| p.peak_usage * rp(p.lambda, c))
            .sum()
    };
    let mut blocks = vec![0u32; profiles.len()];
    let mut units = vec![0u32; profiles.len()];
    let mut best = units.clone();
    let mut best_value = value(&units);
    loop {
        // Odometer over block counts, skipping infeasible totals.
        let mut i = 0;
        loop {
            if i == blocks.len() {
                return Ok(Allocation { units: best, budget });
            }
            blocks[i] += 1;
            if blocks[i] * profiles[i].weight <= budget {
                break;
            }
            blocks[i] = 0;
            i += 1;
        }
        for (u, (b, p)) in units.iter_mut().zip(blocks.iter().zip(profiles)) {
            *u = b * p.weight;
        }
        if units.iter().sum::<u32>() <= budget {
            let v = value(&units);
            if v > best_value {
                best_value = v;
                best.copy_from_slice(&units);
            }
        }
    }
}

/// Exact optimum of the usage-weighted objective over weight-multiple
/// allocations, by dynamic programming over (group, units used).
pub fn optimal_block_allocate(profiles: &[AgentProfile], budget: u32) -> Result<Allocation> {
    if profiles.is_empty() {
        return Err(Error::Argument("at least one group is required".into()));
    }
    for p in profiles {
        p.validate()?;
    }
    let b = budget as usize;
    let n = profiles.len();
    // value[i][r]: best objective using groups i.. with at most r units.
    let mut value = vec![vec![0.0f64; b + 1]; n + 1];
    let mut choice = vec![vec![0u32; b + 1]; n];
    for i in (0..n).rev() {
        let p = &profiles[i];
        for r in 0..=b {
            let mut best_v = f64::NEG_INFINITY;
            let mut best_c = 0;
            let mut c = 0u32;
            while c as usize <= r {
                let v = p.peak_usage * rp(p.lambda, c) + value[i + 1][r - c as usize];
                if v > best_v {
                    best_v = v;
                    best_c = c;
                }
                c += p.weight;
            }
            value[i][r] = best_v;
            choice[i][r] = best_c;
        }
    }
    let mut units = Vec::with_capacity(n);
    let mut r = b;
    for row in &choice {
        let c = row[r];
        units.push(c);
        r -= c as usize;
    }
    Ok(Allocation { units, budget })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::expected_reduction;
    use approx::assert_abs_diff_eq;

    #[test]
    fn single_agent_takes_everything() {
        assert_eq!(mjs_allocate(&[0.5], 2).unwrap().units, vec![2]);
    }

    #[test]
    fn two_agent_examples_match_enumeration() {
        assert_eq!(mjs_allocate(&[0.5, 0.1], 3).unwrap().units, vec![3, 0]);
        assert_eq!(mjs_allocate(&[0.5, 0.1], 5).unwrap().units, vec![4, 1]);
        assert_eq!(brute_force_allocate(&[0.5, 0.1], 5).unwrap().units, vec![4, 1]);
    }

    #[test]
    fn argument_errors() {
        assert!(matches!(mjs_allocate(&[], 3), Err(Error::Argument(_))));
        assert!(matches!(mjs_allocate(&[0.5], 0), Err(Error::Argument(_))));
        assert!(matches!(mjs_allocate(&[-0.5], 1), Err(Error::Domain(_))));
        assert!(matches!(weighted_mjs_allocate(&[], 3), Err(Error::Argument(_))));
        assert!(matches!(uniform_allocate(0, 3), Err(Error::Argument(_))));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        assert_eq!(mjs_allocate(&[0.3, 0.3, 0.3], 2).unwrap().units, vec![1, 1, 0]);
        assert_eq!(mjs_allocate(&[0.0, 0.0], 2).unwrap().units, vec![2, 0]);
        assert_eq!(mjs_allocate(&[0.0, 0.2, 0.0], 4).unwrap().units, vec![0, 4, 0]);
    }

    #[test]
    fn weighted_examples() {
        let heavy = vec![AgentProfile::new(0, 0.5, 4, 1.0).unwrap()];
        assert_eq!(weighted_mjs_allocate(&heavy, 3).unwrap().units, vec![0]);

        let equal: Vec<_> = [4, 2, 1, 1]
            .iter()
            .enumerate()
            .map(|(i, &w)| AgentProfile::new(i, 0.3, w, 10.0).unwrap())
            .collect();
        let first = weighted_mjs_allocate(&equal, 4).unwrap();
        assert_eq!(first.units, vec![4, 0, 0, 0]);
    }

    #[test]
    fn weighted_greedy_matches_exhaustive_search_on_four_groups() {
        let groups: Vec<_> = [(4, 50.0), (2, 25.0), (1, 12.0), (1, 12.0)]
            .iter()
            .enumerate()
            .map(|(i, &(w, u))| AgentProfile::new(i, 0.3, w, u).unwrap())
            .collect();
        let greedy = weighted_mjs_allocate(&groups, 15).unwrap();
        assert_eq!(greedy.units, vec![8, 4, 2, 1]);
        assert!(greedy.spent() <= 15);
        let brute = brute_force_weighted_allocate(&groups, 15).unwrap();
        let dp = optimal_block_allocate(&groups, 15).unwrap();
        let g = expected_reduction(&groups, &greedy, true).unwrap();
        // 40-digit enumeration: 71.458688756415389848...
        assert_abs_diff_eq!(g, 71.458_688_756_415_39, epsilon = 1e-9);
        assert_abs_diff_eq!(g, expected_reduction(&groups, &brute, true).unwrap(), epsilon = 1e-12);
        assert_abs_diff_eq!(g, expected_reduction(&groups, &dp, true).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn raw_jump_rule_ignores_usage() {
        let groups = vec![
            AgentProfile::new(0, 0.2, 1, 100.0).unwrap(),
            AgentProfile::new(1, 0.4, 1, 1.0).unwrap(),
        ];
        assert_eq!(
            weighted_mjs_allocate_with(&groups, 1, SelectionRule::RawJump).unwrap().units,
            vec![0, 1]
        );
        assert_eq!(
            weighted_mjs_allocate_with(&groups, 1, SelectionRule::UsageWeighted).unwrap().units,
            vec![1, 0]
        );
    }

    #[test]
    fn uniform_split() {
        assert_eq!(uniform_allocate(2, 4).unwrap().units, vec![2, 2]);
        assert_eq!(uniform_allocate(4, 6).unwrap().units, vec![2, 2, 1, 1]);
        assert_eq!(uniform_allocate(3, 0).unwrap().units, vec![0, 0, 0]);
    }

    #[test]
    fn brute_force_examples() {
        let a = brute_force_allocate(&[0.5, 0.1], 3).unwrap();
        assert_abs_diff_eq!(objective(&[0.5, 0.1], &a.units), 0.776_869_839_851_570_2, epsilon = 1e-12);

        let sym = brute_force_allocate(&[0.2, 0.2], 2).unwrap();
        assert_eq!(sym.units, vec![1, 1]);
        assert_abs_diff_eq!(objective(&[0.2, 0.2], &sym.units), 0.362_538_493_844_036_3, epsilon = 1e-12);

        let none = brute_force_allocate(&[0.4, 1.0], 0).unwrap();
        assert_eq!(none.units, vec![0, 0]);
    }

    #[test]
    fn brute_force_refuses_huge_instances() {
        assert_eq!(composition_count(2, 3), 10);
        assert_eq!(composition_count(4, 8), 495);
        assert!(matches!(
            brute_force_allocate(&[0.1; 20], 50),
            Err(Error::Capacity { .. })
        ));
    }

    #[test]
    fn budget_is_saturated_and_objective_grows_with_budget() {
        let lambdas = [0.05, 0.7, 1.3, 0.2];
        let mut last = 0.0;
        for b in 1..40 {
            let a = mjs_allocate(&lambdas, b).unwrap();
            assert_eq!(a.spent(), b);
            let v = objective(&lambdas, &a.units);
            assert!(v >= last);
            last = v;
        }
    }
}
