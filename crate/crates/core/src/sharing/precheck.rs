//! Sufficient conditions for an optimal allocation to exist.
//!
//! Agents `1..n−1` (expectation agents placed last) must be admissible, and
//! each of them needs a compatible density `Z_i` at which every agent's
//! conjugate is finite. Candidates are tried in a fixed order: the agent's
//! own belief density, the other belief densities, their equal mixture, then
//! pairwise mixtures on a grid of weights ordered from the centre outwards.

use super::{SharingError, SharingProblem};
use crate::diagnostics::{compatibility_check, is_admissible, mix, AdmissibilityReport, DiagnosticsError};

/// Mixing weights on the agent's own density, centre first.
const LAMBDAS: [f64; 9] = [0.5, 0.6, 0.4, 0.7, 0.3, 0.8, 0.2, 0.9, 0.1];

#[derive(Debug, Clone, PartialEq)]
pub struct Precheck {
    /// Agent indices in precheck order; the last one is exempt.
    pub order: Vec<usize>,
    /// Admissibility of every agent but the last in `order`, by agent index.
    pub admissibility: Vec<Option<AdmissibilityReport>>,
    /// Compatible cross-finite density found for each checked agent.
    pub densities: Vec<Option<Vec<f64>>>,
    /// A cross-finite candidate that failed compatibility, with the agent and
    /// the kernel direction that rules it out.
    pub witness: Option<(usize, Vec<f64>, Vec<f64>)>,
    pub passed: bool,
}

pub fn precheck(problem: &SharingProblem, seed: u64) -> Result<Precheck, SharingError> {
    let agents = problem.agents();
    let n = agents.len();
    let mut order: Vec<usize> = (0..n).filter(|&i| !agents[i].is_belief_expectation()).collect();
    order.extend((0..n).filter(|&i| agents[i].is_belief_expectation()));

    let mut admissibility = vec![None; n];
    let mut densities = vec![None; n];
    let mut witness = None;
    let mut passed = true;
    let checked = &order[..n.saturating_sub(1)];
    for &i in checked {
        let report = is_admissible(&agents[i], seed.wrapping_add(i as u64))?;
        passed &= report.admissible;
        admissibility[i] = Some(report);

        let found = search(problem, i, &mut witness)?;
        passed &= found.is_some();
        densities[i] = found;
    }
    Ok(Precheck {
        order,
        admissibility,
        densities,
        witness,
        passed,
    })
}

fn candidates(problem: &SharingProblem, i: usize) -> Vec<Vec<f64>> {
    let agents = problem.agents();
    let own = agents[i].belief().density().to_vec();
    let others: Vec<Vec<f64>> = agents
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != i)
        .map(|(_, a)| a.belief().density().to_vec())
        .collect();
    let mut out = vec![own.clone()];
    out.extend(others.iter().cloned());
    let n = agents.len() as f64;
    let mut equal = vec![0.0; own.len()];
    for a in agents {
        for (e, d) in equal.iter_mut().zip(a.belief().density()) {
            *e += d / n;
        }
    }
    out.push(equal);
    for other in &others {
        for &lambda in &LAMBDAS {
            out.push(mix(&own, other, lambda));
        }
    }
    out
}

fn search(
    problem: &SharingProblem,
    i: usize,
    witness: &mut Option<(usize, Vec<f64>, Vec<f64>)>,
) -> Result<Option<Vec<f64>>, SharingError> {
    let agents = problem.agents();
    for z in candidates(problem, i) {
        let mut cross_finite = true;
        for a in agents {
            if !a.conjugate(&z)?.conjugate_value.is_finite() {
                cross_finite = false;
                break;
            }
        }
        if !cross_finite {
            continue;
        }
        let report = match compatibility_check(&agents[i], &z) {
            Ok(r) => r,
            Err(DiagnosticsError::ConeOracleUnavailable(_)) => continue,
            Err(e) => return Err(e.into()),
        };
        if report.compatible() {
            return Ok(Some(z));
        }
        if witness.is_none() {
            if let Some(u) = report.witness {
                *witness = Some((i, z, u));
            }
        }
    }
    Ok(None)
}
