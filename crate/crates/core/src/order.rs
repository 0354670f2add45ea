//! Quantiles, stop-loss transforms and the stochastic orders used to define
//! consistency and to validate comonotone improvements.
//!
//! Everything works on a finite law: a sorted list of distinct values with
//! their masses. Stop-loss transforms of such laws are piecewise linear with
//! kinks at support points only, so comparing them on the union of both
//! supports decides the order exactly.

use crate::space::Belief;
use thiserror::Error;

/// Default absolute tolerance on stop-loss gaps.
pub const ORDER_TOL: f64 = 1e-9;

/// Slack used when comparing cumulative masses with a level.
const LEVEL_SLACK: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OrderError {
    #[error("quantile level {0} is outside (0, 1]")]
    InvalidLevel(f64),
}

/// Distribution of a random variable under some probability vector, with
/// ties merged and zero-mass atoms dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteLaw {
    values: Vec<f64>,
    masses: Vec<f64>,
}

impl DiscreteLaw {
    pub fn new(x: &[f64], probs: &[f64]) -> Self {
        let mut pairs: Vec<(f64, f64)> = x
            .iter()
            .zip(probs)
            .filter(|(_, &p)| p > 0.0)
            .map(|(&v, &p)| (v, p))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut values: Vec<f64> = Vec::with_capacity(pairs.len());
        let mut masses: Vec<f64> = Vec::with_capacity(pairs.len());
        for (v, p) in pairs {
            if values.last() == Some(&v) {
                *masses.last_mut().unwrap() += p;
            } else {
                values.push(v);
                masses.push(p);
            }
        }
        Self { values, masses }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().zip(&self.masses).map(|(v, m)| v * m).sum()
    }

    pub fn min(&self) -> f64 {
        self.values.first().copied().unwrap_or(0.0)
    }

    pub fn max(&self) -> f64 {
        self.values.last().copied().unwrap_or(0.0)
    }

    /// Left-continuous inverse `inf{x : F(x) ≥ u}`.
    pub fn quantile(&self, u: f64) -> f64 {
        let mut cum = 0.0;
        for (v, m) in self.values.iter().zip(&self.masses) {
            cum += m;
            if cum >= u - LEVEL_SLACK {
                return *v;
            }
        }
        self.max()
    }

    /// `inf{x : F(x) > u}`, the right-continuous version.
    pub fn upper_quantile(&self, u: f64) -> f64 {
        let mut cum = 0.0;
        for (v, m) in self.values.iter().zip(&self.masses) {
            cum += m;
            if cum > u + LEVEL_SLACK {
                return *v;
            }
        }
        self.max()
    }

    /// `∫_u^1 q(s) ds`, exact for the step quantile function.
    pub fn upper_tail_integral(&self, u: f64) -> f64 {
        let mut lo = 0.0;
        let mut acc = 0.0;
        for (v, m) in self.values.iter().zip(&self.masses) {
            let hi = lo + m;
            let overlap = hi - lo.max(u);
            if overlap > 0.0 {
                acc += overlap * v;
            }
            lo = hi;
        }
        acc
    }

    /// `E[(X − t)_+]`.
    pub fn stop_loss(&self, t: f64) -> f64 {
        self.values
            .iter()
            .zip(&self.masses)
            .map(|(v, m)| m * (v - t).max(0.0))
            .sum()
    }

    /// `P(X ≤ t)`.
    pub fn cdf(&self, t: f64) -> f64 {
        self.values
            .iter()
            .zip(&self.masses)
            .take_while(|(v, _)| **v <= t)
            .map(|(_, m)| m)
            .sum()
    }
}

/// Outcome of a dominance test. `max_violation` is the largest stop-loss gap
/// in the wrong direction (zero when there is none).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrderVerdict {
    pub dominates: bool,
    pub max_violation: f64,
    pub witness_threshold: f64,
}

pub fn quantile(x: &[f64], belief: &Belief, u: f64) -> Result<f64, OrderError> {
    quantile_with(x, belief.probabilities(), u)
}

pub fn quantile_with(x: &[f64], probs: &[f64], u: f64) -> Result<f64, OrderError> {
    if !(u > 0.0 && u <= 1.0) {
        return Err(OrderError::InvalidLevel(u));
    }
    Ok(DiscreteLaw::new(x, probs).quantile(u))
}

pub fn stop_loss(x: &[f64], belief: &Belief, t: f64) -> f64 {
    DiscreteLaw::new(x, belief.probabilities()).stop_loss(t)
}

/// Whether `Y` is dominated by `X` in the increasing convex order:
/// `E[(Y−t)_+] ≤ E[(X−t)_+]` for every threshold.
pub fn icx_dominates(y: &[f64], x: &[f64], belief: &Belief) -> OrderVerdict {
    icx_dominates_with(y, x, belief.probabilities(), ORDER_TOL)
}

pub fn icx_dominates_with(y: &[f64], x: &[f64], probs: &[f64], tol: f64) -> OrderVerdict {
    let ly = DiscreteLaw::new(y, probs);
    let lx = DiscreteLaw::new(x, probs);
    let mut worst = 0.0;
    let mut at = f64::NAN;
    for &t in ly.values().iter().chain(lx.values()) {
        let gap = ly.stop_loss(t) - lx.stop_loss(t);
        if gap > worst {
            worst = gap;
            at = t;
        }
    }
    OrderVerdict {
        dominates: worst <= tol,
        max_violation: worst,
        witness_threshold: at,
    }
}

/// Convex order `Y ⪯ X`: increasing convex order plus equal means.
pub fn cx_dominates(y: &[f64], x: &[f64], belief: &Belief) -> OrderVerdict {
    cx_dominates_with(y, x, belief.probabilities(), ORDER_TOL)
}

pub fn cx_dominates_with(y: &[f64], x: &[f64], probs: &[f64], tol: f64) -> OrderVerdict {
    let mut verdict = icx_dominates_with(y, x, probs, tol);
    let mean_gap = (DiscreteLaw::new(y, probs).mean() - DiscreteLaw::new(x, probs).mean()).abs();
    if mean_gap > verdict.max_violation {
        verdict.max_violation = mean_gap;
        verdict.witness_threshold = f64::NEG_INFINITY;
    }
    verdict.dominates = verdict.max_violation <= tol;
    verdict
}

/// Equality in law: the distribution functions agree at every support point.
pub fn same_law(x: &[f64], y: &[f64], belief: &Belief) -> bool {
    same_law_with(x, y, belief.probabilities(), ORDER_TOL)
}

pub fn same_law_with(x: &[f64], y: &[f64], probs: &[f64], tol: f64) -> bool {
    let lx = DiscreteLaw::new(x, probs);
    let ly = DiscreteLaw::new(y, probs);
    lx.values()
        .iter()
        .chain(ly.values())
        .all(|&t| (lx.cdf(t) - ly.cdf(t)).abs() <= tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::ScenarioSpace;
    use proptest::prelude::*;

    fn uniform(n: usize) -> Vec<f64> {
        vec![1.0 / n as f64; n]
    }

    #[test]
    fn two_point_quantiles() {
        let p = uniform(2);
        assert_eq!(quantile_with(&[0.0, 10.0], &p, 0.5).unwrap(), 0.0);
        assert_eq!(quantile_with(&[0.0, 10.0], &p, 0.75).unwrap(), 10.0);
        assert_eq!(quantile_with(&[3.0, 3.0], &p, 0.01).unwrap(), 3.0);
        assert!(quantile_with(&[0.0, 1.0], &p, 0.0).is_err());
        assert!(quantile_with(&[0.0, 1.0], &p, 1.5).is_err());
    }

    #[test]
    fn stop_loss_regimes() {
        let law = DiscreteLaw::new(&[0.0, 10.0], &uniform(2));
        assert_eq!(law.stop_loss(0.0), 5.0);
        assert_eq!(law.stop_loss(-3.0), law.mean() + 3.0);
        assert_eq!(law.stop_loss(11.0), 0.0);
    }

    #[test]
    fn conditional_expectation_is_dominated() {
        // X = -1_A with P(A) = 0.5; B ⊃ A with P(B) = 0.8.
        let p = vec![0.1; 10];
        let x: Vec<f64> = (0..10).map(|k| if k < 5 { -1.0 } else { 0.0 }).collect();
        let y: Vec<f64> = (0..10).map(|k| if k < 8 { -0.625 } else { 0.0 }).collect();
        assert!(icx_dominates_with(&y, &x, &p, ORDER_TOL).dominates);
        assert!(cx_dominates_with(&y, &x, &p, ORDER_TOL).dominates);
        assert!(!cx_dominates_with(&x, &y, &p, ORDER_TOL).dominates);
    }

    #[test]
    fn spread_pair() {
        let p = uniform(2);
        assert!(cx_dominates_with(&[-1.0, 1.0], &[-2.0, 2.0], &p, ORDER_TOL).dominates);
        let back = cx_dominates_with(&[-2.0, 2.0], &[-1.0, 1.0], &p, ORDER_TOL);
        assert!(!back.dominates);
        assert!((back.max_violation - 0.5).abs() < 1e-15);
    }

    #[test]
    fn reflexive_with_zero_violation() {
        let x = [0.3, -1.2, 4.0, 0.3];
        let v = cx_dominates_with(&x, &x, &uniform(4), ORDER_TOL);
        assert!(v.dominates);
        assert_eq!(v.max_violation, 0.0);
    }

    #[test]
    fn same_law_cases() {
        assert!(!same_law_with(&[0.0, 1.0], &[1.0, 0.0], &[0.3, 0.7], ORDER_TOL));
        assert!(same_law_with(&[0.0, 1.0], &[1.0, 0.0], &[0.5, 0.5], ORDER_TOL));
        assert!(same_law_with(&[2.0, 1.0], &[2.0, 1.0], &[0.3, 0.7], ORDER_TOL));
    }

    #[test]
    fn belief_wrappers_use_belief_weights() {
        let s = ScenarioSpace::uniform(&["A", "A", "B", "B"]).unwrap();
        let q = Belief::new(&s, vec![0.5, 0.5, 1.5, 1.5]).unwrap();
        let x = [0.0, 0.0, 1.0, 1.0];
        assert!((stop_loss(&x, &q, 0.0) - 0.75).abs() < 1e-15);
        assert_eq!(quantile(&x, &q, 0.25).unwrap(), 0.0);
        assert_eq!(quantile(&x, &q, 0.26).unwrap(), 1.0);
    }

    #[test]
    fn tail_integral_matches_es_definition() {
        let law = DiscreteLaw::new(&[0.0, 10.0], &uniform(2));
        assert_eq!(law.upper_tail_integral(0.5) / 0.5, 10.0);
        assert_eq!(law.upper_tail_integral(0.0), law.mean());
    }

    fn law_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..9).prop_flat_map(|n| {
            (
                prop::collection::vec(-5.0f64..5.0, n),
                prop::collection::vec(0.05f64..1.0, n),
            )
                .prop_map(|(x, w)| {
                    let s: f64 = w.iter().sum();
                    (x, w.into_iter().map(|v| v / s).collect())
                })
        })
    }

    proptest! {
        #[test]
        fn stop_loss_is_convex_and_nonincreasing((x, p) in law_strategy()) {
            let law = DiscreteLaw::new(&x, &p);
            let mut grid: Vec<f64> = law.values().to_vec();
            grid.insert(0, law.min() - 1.0);
            grid.push(law.max() + 1.0);
            let sl: Vec<f64> = grid.iter().map(|&t| law.stop_loss(t)).collect();
            for w in sl.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12);
            }
            for k in 1..grid.len() - 1 {
                let (a, b, c) = (grid[k - 1], grid[k], grid[k + 1]);
                let lam = (c - b) / (c - a);
                prop_assert!(sl[k] <= lam * sl[k - 1] + (1.0 - lam) * sl[k + 1] + 1e-12);
            }
        }

        #[test]
        fn block_average_is_cx_dominated((x, p) in law_strategy(), cut in 1usize..8) {
            let cut = cut.min(x.len() - 1);
            let mut y = x.clone();
            for range in [0..cut, cut..x.len()] {
                let mass: f64 = p[range.clone()].iter().sum();
                let avg = range.clone().map(|k| p[k] * x[k]).sum::<f64>() / mass;
                for k in range {
                    y[k] = avg;
                }
            }
            let cx = cx_dominates_with(&y, &x, &p, 1e-9);
            prop_assert!(cx.dominates);
            prop_assert!(icx_dominates_with(&y, &x, &p, 1e-9).dominates);
        }

        #[test]
        fn refining_the_grid_does_not_change_the_verdict((x, p) in law_strategy(), shift in -1.0f64..1.0) {
            let y: Vec<f64> = x.iter().map(|v| 0.5 * v + shift).collect();
            let coarse = icx_dominates_with(&y, &x, &p, 1e-9);
            let ly = DiscreteLaw::new(&y, &p);
            let lx = DiscreteLaw::new(&x, &p);
            let mut grid: Vec<f64> = ly.values().iter().chain(lx.values()).copied().collect();
            grid.sort_by(f64::total_cmp);
            let mut fine_worst: f64 = 0.0;
            for w in grid.windows(2) {
                for t in [w[0], 0.5 * (w[0] + w[1]), w[1]] {
                    fine_worst = fine_worst.max(ly.stop_loss(t) - lx.stop_loss(t));
                }
            }
            prop_assert!((fine_worst - coarse.max_violation).abs() < 1e-12);
        }
    }
}
