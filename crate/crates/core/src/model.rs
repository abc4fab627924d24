//! The exponential response model.
//!
//! An agent offered `c` discount units reduces its peak load with probability
//! `1 - exp(-lambda * c)`, where `lambda` is the agent's reduction rate. The
//! marginal gain of one extra unit (the "jump") shrinks geometrically in `c`,
//! which is what makes greedy allocation optimal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability that an agent with rate `lambda` reduces its load when offered
/// `c` discount units.
pub fn reduction_probability(lambda: f64, c: u32) -> Result<f64> {
    check_rate(lambda)?;
    Ok(rp(lambda, c))
}

/// Increase in reduction probability from granting unit `c + 1` on top of `c`.
pub fn jump(lambda: f64, c: u32) -> Result<f64> {
    check_rate(lambda)?;
    Ok(jump_unchecked(lambda, c))
}

/// Sum of reduction probabilities, or of usage-weighted probabilities when
/// `weighted` is set.
pub fn expected_reduction(profiles: &[AgentProfile], alloc: &Allocation, weighted: bool) -> Result<f64> {
    if profiles.len() != alloc.len() {
        return Err(Error::Dimension {
            expected: profiles.len(),
            actual: alloc.len(),
        });
    }
    Ok(profiles
        .iter()
        .zip(&alloc.units)
        .map(|(p, &c)| {
            let prob = rp(p.lambda, c);
            if weighted {
                p.peak_usage * prob
            } else {
                prob
            }
        })
        .sum())
}

/// Unweighted objective for a bare rate vector. Caller guarantees lengths match.
pub(crate) fn objective(lambdas: &[f64], units: &[u32]) -> f64 {
    lambdas.iter().zip(units).map(|(&l, &c)| rp(l, c)).sum()
}

pub(crate) fn check_rate(lambda: f64) -> Result<()> {
    if lambda.is_finite() && lambda >= 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("reduction rate must be finite and non-negative, got {lambda}")))
    }
}

#[inline]
pub(crate) fn rp(lambda: f64, c: u32) -> f64 {
    -(-lambda * f64::from(c)).exp_m1()
}

// exp(-lambda c) * (1 - exp(-lambda)): the shared second factor keeps
// successive jumps ordered in floating point as well.
#[inline]
pub(crate) fn jump_unchecked(lambda: f64, c: u32) -> f64 {
    (-lambda * f64::from(c)).exp() * -(-lambda).exp_m1()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub id: usize,
    pub lambda: f64,
    /// Discount multiplier; 1 for plain agents.
    pub weight: u32,
    /// Energy per peak slot, kWh.
    pub peak_usage: f64,
}

impl AgentProfile {
    pub fn new(id: usize, lambda: f64, weight: u32, peak_usage: f64) -> Result<Self> {
        let profile = Self {
            id,
            lambda,
            weight,
            peak_usage,
        };
        profile.validate()?;
        Ok(profile)
    }

    /// A unit-weight, unit-usage agent.
    pub fn plain(id: usize, lambda: f64) -> Result<Self> {
        Self::new(id, lambda, 1, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        check_rate(self.lambda)?;
        if self.weight < 1 {
            return Err(Error::Argument(format!("agent {}: weight must be at least 1", self.id)));
        }
        if !(self.peak_usage.is_finite() && self.peak_usage > 0.0) {
            return Err(Error::Argument(format!(
                "agent {}: peak usage must be positive, got {}",
                self.id, self.peak_usage
            )));
        }
        Ok(())
    }
}

/// Integer discount units per agent.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Allocation {
    pub units: Vec<u32>,
    pub budget: u32,
}

impl Allocation {
    pub fn new(units: Vec<u32>, budget: u32) -> Result<Self> {
        let spent: u64 = units.iter().map(|&u| u64::from(u)).sum();
        if spent > u64::from(budget) {
            return Err(Error::Argument(format!("allocation spends {spent} units, budget is {budget}")));
        }
        Ok(Self { units, budget })
    }

    pub fn zeros(n: usize, budget: u32) -> Self {
        Self {
            units: vec![0; n],
            budget,
        }
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn spent(&self) -> u32 {
        self.units.iter().sum()
    }
}

/// Converts discount units into tariff discount percentages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscountScale(f64);

impl DiscountScale {
    pub fn new(scalar: f64) -> Result<Self> {
        if scalar.is_finite() && scalar > 0.0 {
            Ok(Self(scalar))
        } else {
            Err(Error::Argument(format!("discount scale must be positive, got {scalar}")))
        }
    }

    pub fn scalar(self) -> f64 {
        self.0
    }

    /// Tariff discount (percent) for `units` discount units.
    pub fn apply(self, units: u32) -> f64 {
        self.0 * f64::from(units)
    }
}

impl Default for DiscountScale {
    fn default() -> Self {
        Self(1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const TOL: f64 = 1e-12;

    #[test]
    fn zero_discount_or_zero_rate_never_reduces() {
        assert_eq!(reduction_probability(0.7, 0).unwrap(), 0.0);
        assert_eq!(reduction_probability(0.0, 9).unwrap(), 0.0);
        assert_eq!(jump(0.0, 7).unwrap(), 0.0);
    }

    #[test]
    fn closed_form_values() {
        // 40-digit mpmath evaluations.
        assert_abs_diff_eq!(reduction_probability(0.5, 2).unwrap(), 0.632_120_558_828_557_7, epsilon = TOL);
        assert_abs_diff_eq!(jump(0.5, 0).unwrap(), 0.393_469_340_287_366_6, epsilon = TOL);
        assert_abs_diff_eq!(jump(0.5, 1).unwrap(), 0.238_651_218_541_191_1, epsilon = TOL);
    }

    #[test]
    fn negative_or_nan_rate_is_a_domain_error() {
        assert!(matches!(reduction_probability(-0.1, 1), Err(Error::Domain(_))));
        assert!(matches!(jump(f64::NAN, 1), Err(Error::Domain(_))));
    }

    #[test]
    fn expected_reduction_unweighted_and_weighted() {
        let profiles = vec![AgentProfile::plain(0, 0.5).unwrap(), AgentProfile::plain(1, 0.1).unwrap()];
        let zero = Allocation::zeros(2, 3);
        assert_eq!(expected_reduction(&profiles, &zero, false).unwrap(), 0.0);

        let alloc = Allocation::new(vec![3, 0], 3).unwrap();
        assert_abs_diff_eq!(
            expected_reduction(&profiles, &alloc, false).unwrap(),
            0.776_869_839_851_570_2,
            epsilon = TOL
        );

        // lambda c = ln 2.5 gives a reduction probability of exactly 0.6.
        let c = 4;
        let lambda = 2.5f64.ln() / f64::from(c);
        let household = vec![AgentProfile::new(0, lambda, 1, 10.0).unwrap()];
        let alloc = Allocation::new(vec![c], c).unwrap();
        assert_abs_diff_eq!(expected_reduction(&household, &alloc, true).unwrap(), 6.0, epsilon = 1e-12);
    }

    #[test]
    fn expected_reduction_length_mismatch() {
        let profiles = vec![AgentProfile::plain(0, 0.5).unwrap()];
        let alloc = Allocation::zeros(2, 1);
        assert!(matches!(
            expected_reduction(&profiles, &alloc, false),
            Err(Error::Dimension { expected: 1, actual: 2 })
        ));
    }

    #[test]
    fn profile_and_allocation_invariants() {
        assert!(AgentProfile::new(0, 0.1, 0, 1.0).is_err());
        assert!(AgentProfile::new(0, 0.1, 1, 0.0).is_err());
        assert!(AgentProfile::new(0, -1.0, 1, 1.0).is_err());
        assert!(Allocation::new(vec![2, 2], 3).is_err());
        assert_eq!(Allocation::new(vec![1, 2], 3).unwrap().spent(), 3);
        assert!(DiscountScale::new(0.0).is_err());
        assert_eq!(DiscountScale::new(1.875).unwrap().apply(8), 15.0);
    }

    proptest! {
        #[test]
        fn jumps_never_increase(lambda in 0.0f64..5.0, j in 1u32..50) {
            prop_assert!(jump(lambda, j - 1).unwrap() >= jump(lambda, j).unwrap());
        }

        #[test]
        fn jumps_telescope_to_probability(lambda in 0.0f64..5.0, c in 0u32..60) {
            let total: f64 = (0..c).map(|j| jump(lambda, j).unwrap()).sum();
            prop_assert!((total - reduction_probability(lambda, c).unwrap()).abs() <= TOL);
        }

        #[test]
        fn probability_stays_in_unit_interval(lambda in 0.0f64..1e6, c in 0u32..10_000) {
            let p = reduction_probability(lambda, c).unwrap();
            prop_assert!((0.0..=1.0).contains(&p));
        }
    }
}
