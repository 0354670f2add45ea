//! Independent checks of the solver: the entropic closed form, exhaustive
//! grid search, attainment probing over growing boxes and invariance under
//! measure-preserving permutations.

use super::{solve, SharingError, SharingProblem, SharingSolution, SolveMethod, SolveOptions};
use crate::catalog::MeasureKind;
use crate::comonotone::{block_support, BlockScheme, ComonotoneScheme};
use crate::space::{sup_norm, Allocation, RandomVariable};
use rayon::prelude::*;

/// Largest number of grid points [`brute_force_oracle`] visits.
pub const MAX_GRID_POINTS: usize = 50_000_000;
/// Largest number of atoms [`brute_force_oracle`] accepts.
pub const MAX_ORACLE_ATOMS: usize = 5;

/// Optimal allocation for two entropic agents,
/// `X_1 = (β₂X + log(dQ₂/dQ₁))/(β₁+β₂)` and `X_2 = X − X_1`.
pub fn closed_form_entropic(problem: &SharingProblem) -> Result<SharingSolution, SharingError> {
    let agents = problem.agents();
    let betas: Vec<f64> = agents
        .iter()
        .filter_map(|a| match a.kind() {
            MeasureKind::Entropic { beta } => Some(*beta),
            _ => None,
        })
        .collect();
    if agents.len() != 2 || betas.len() != 2 {
        let labels: Vec<String> = agents.iter().map(|a| a.label()).collect();
        return Err(SharingError::WrongAgentKinds(labels.join(", ")));
    }
    let (b1, b2) = (betas[0], betas[1]);
    let d1 = agents[0].belief().density();
    let d2 = agents[1].belief().density();
    let space = problem.space();
    let x = problem.target();
    let s1 = b2 / (b1 + b2);
    let shift: Vec<f64> = d1.iter().zip(d2).map(|(a, b)| (b / a).ln() / (b1 + b2)).collect();
    let y1: Vec<f64> = x.iter().zip(&shift).map(|(v, c)| s1 * v + c).collect();
    let allocation = Allocation::completing(x, vec![y1]);
    let scheme = ComonotoneScheme {
        blocks: (0..space.num_blocks())
            .map(|b| {
                let c = shift[space.block_atoms(b)[0]];
                BlockScheme::proportional(block_support(x, space, b), &[s1, 1.0 - s1], &[c, -c])
            })
            .collect(),
    };
    let per_agent_risk = agents
        .iter()
        .zip(&allocation.parts)
        .map(|(a, p)| a.evaluate(p))
        .collect::<Result<Vec<_>, _>>()?;
    let intercept_norm = scheme
        .blocks
        .iter()
        .flat_map(|b| b.intercepts.iter().map(|v| v.abs()))
        .fold(0.0, f64::max);
    Ok(SharingSolution {
        allocation,
        total_risk: per_agent_risk.iter().sum(),
        per_agent_risk,
        scheme,
        selection: vec![0, 0],
        method: SolveMethod::ClosedForm,
        box_bound: f64::INFINITY,
        intercept_norm,
        precheck: None,
        certificate: None,
    })
}

/// Result of the exhaustive search.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub allocation: Allocation,
    pub total_risk: f64,
    pub per_agent_risk: Vec<f64>,
    pub evaluations: usize,
}

/// Exhaustive minimum of `ρ₁(X₁) + ρ₂(X − X₁)` over `X₁` on the grid
/// `{−M, −M+h, …, M}` per atom. Cash-additivity lets `X₁` be pinned to `0` on
/// the first atom, so the grid runs over the remaining atoms.
pub fn brute_force_oracle(problem: &SharingProblem, h: f64, bound: f64) -> Result<OracleSolution, SharingError> {
    let agents = problem.agents();
    let x = problem.target();
    if agents.len() == 1 {
        let risk = agents[0].evaluate(x)?;
        return Ok(OracleSolution {
            allocation: Allocation {
                parts: vec![RandomVariable(x.to_vec())],
            },
            total_risk: risk,
            per_agent_risk: vec![risk],
            evaluations: 1,
        });
    }
    if agents.len() != 2 {
        return Err(SharingError::TooLarge(format!("{} agents, the oracle takes two", agents.len())));
    }
    if x.len() > MAX_ORACLE_ATOMS {
        return Err(SharingError::TooLarge(format!("{} atoms, at most {MAX_ORACLE_ATOMS}", x.len())));
    }
    if !(h > 0.0 && bound > 0.0) {
        return Err(SharingError::InvalidBox(bound));
    }
    let steps = (2.0 * bound / h).round() as usize + 1;
    let free = x.len() - 1;
    let total = (steps as f64).powi(free as i32);
    if total > MAX_GRID_POINTS as f64 {
        return Err(SharingError::TooLarge(format!("{total} grid points")));
    }
    let total = total as usize;
    let grid = |j: usize| -bound + j as f64 * h;
    let decode = |mut idx: usize, out: &mut [f64]| {
        out[0] = 0.0;
        for v in out[1..].iter_mut() {
            *v = grid(idx % steps);
            idx /= steps;
        }
    };
    let chunk = steps.max(1);
    let best = (0..total.div_ceil(chunk))
        .into_par_iter()
        .map(|c| {
            let mut y1 = vec![0.0; x.len()];
            let mut y2 = vec![0.0; x.len()];
            let mut best = (f64::INFINITY, usize::MAX);
            for idx in c * chunk..((c + 1) * chunk).min(total) {
                decode(idx, &mut y1);
                for ((b, a), t) in y2.iter_mut().zip(&y1).zip(x) {
                    *b = t - a;
                }
                let v = agents[0].evaluate(&y1).unwrap_or(f64::INFINITY)
                    + agents[1].evaluate(&y2).unwrap_or(f64::INFINITY);
                if v < best.0 {
                    best = (v, idx);
                }
            }
            best
        })
        .reduce(
            || (f64::INFINITY, usize::MAX),
            |a, b| if b.0 < a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a },
        );
    let mut y1 = vec![0.0; x.len()];
    decode(best.1, &mut y1);
    let allocation = Allocation::completing(x, vec![y1]);
    let per_agent_risk = agents
        .iter()
        .zip(&allocation.parts)
        .map(|(a, p)| a.evaluate(p))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(OracleSolution {
        allocation,
        total_risk: per_agent_risk.iter().sum(),
        per_agent_risk,
        evaluations: total,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub box_bound: f64,
    pub minimum: f64,
    pub intercept_norm: f64,
    pub at_boundary: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub rows: Vec<ProbeRow>,
    pub strictly_decreasing: bool,
    pub saturates_every_box: bool,
    /// Change of the first agent's position between the two largest boxes,
    /// centred to mean zero under the last agent's belief and scaled to unit
    /// sup-norm.
    pub direction: Option<Vec<f64>>,
}

impl ProbeReport {
    /// Minima keep falling and every minimizer sits on the box boundary.
    pub fn non_attainment_evidence(&self) -> bool {
        self.strictly_decreasing && self.saturates_every_box
    }
}

/// Solves with each intercept bound in `boxes` (increasing) and reports the
/// minima and minimizer norms.
pub fn exactness_probe(
    problem: &SharingProblem,
    boxes: &[f64],
    options: &SolveOptions,
) -> Result<ProbeReport, SharingError> {
    let mut rows = Vec::with_capacity(boxes.len());
    let mut firsts: Vec<Vec<f64>> = Vec::with_capacity(boxes.len());
    for &m in boxes {
        let opts = SolveOptions {
            box_bound: Some(m),
            certify: false,
            min_norm: true,
            ..options.clone()
        };
        let sol = solve(problem, &opts)?;
        rows.push(ProbeRow {
            box_bound: m,
            minimum: sol.total_risk,
            intercept_norm: sol.intercept_norm,
            at_boundary: sol.at_boundary(),
        });
        firsts.push(sol.allocation.parts[0].0.clone());
    }
    let strictly_decreasing = rows.windows(2).all(|w| w[1].minimum < w[0].minimum);
    let saturates_every_box = !rows.is_empty() && rows.iter().all(|r| r.at_boundary);
    let direction = if firsts.len() >= 2 {
        let k = firsts.len();
        let d: Vec<f64> = firsts[k - 1].iter().zip(&firsts[k - 2]).map(|(a, b)| a - b).collect();
        let last = problem.agents().last().expect("nonempty").belief();
        let mean = last.expectation(&d);
        let centred: Vec<f64> = d.iter().map(|v| v - mean).collect();
        let norm = sup_norm(&centred);
        (norm > 0.0).then(|| centred.iter().map(|v| v / norm).collect())
    } else {
        None
    };
    Ok(ProbeReport {
        rows,
        strictly_decreasing,
        saturates_every_box,
        direction,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum PBasedVerdict {
    /// The permutation preserves every block and the conditional weights.
    Checked {
        original: f64,
        permuted: f64,
        difference: f64,
    },
    NotApplicable(String),
}

impl PBasedVerdict {
    pub fn holds(&self, tol: f64) -> Option<bool> {
        match self {
            Self::Checked { difference, .. } => Some(*difference <= tol),
            Self::NotApplicable(_) => None,
        }
    }
}

/// Re-solves with `X∘σ` where `σ` permutes atoms; applicable only when `σ`
/// maps every atom to one of equal weight in the same block.
pub fn p_based_check(
    problem: &SharingProblem,
    permutation: &[usize],
    options: &SolveOptions,
) -> Result<PBasedVerdict, SharingError> {
    let space = problem.space();
    let n = space.len();
    if permutation.len() != n {
        return Ok(PBasedVerdict::NotApplicable(format!(
            "permutation has {} entries for {n} atoms",
            permutation.len()
        )));
    }
    let mut seen = vec![false; n];
    for (k, &s) in permutation.iter().enumerate() {
        if s >= n || seen[s] {
            return Ok(PBasedVerdict::NotApplicable("not a bijection".into()));
        }
        seen[s] = true;
        if space.block_of(s) != space.block_of(k) {
            return Ok(PBasedVerdict::NotApplicable(format!("atom {k} leaves its block")));
        }
        let (a, b) = (space.weights()[k], space.weights()[s]);
        if (a - b).abs() > 1e-12 * a.max(b) {
            return Ok(PBasedVerdict::NotApplicable(format!("atoms {k} and {s} differ in weight")));
        }
    }
    let opts = SolveOptions {
        certify: false,
        ..options.clone()
    };
    let original = solve(problem, &opts)?.total_risk;
    let x = problem.target();
    let permuted_target: Vec<f64> = permutation.iter().map(|&s| x[s]).collect();
    let permuted = solve(&problem.with_target(permuted_target)?, &opts)?.total_risk;
    Ok(PBasedVerdict::Checked {
        original,
        permuted,
        difference: (original - permuted).abs(),
    })
}
