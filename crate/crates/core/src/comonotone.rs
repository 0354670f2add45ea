//! Comonotone partitions of the identity on block supports, locally
//! comonotone allocations, and the comonotone improvement of an arbitrary
//! allocation.
//!
//! On a block `B` with sorted distinct target values `s_0 < … < s_m`, agent
//! `i` receives `f_i(s_k) = c_i + Σ_{l<k} a_{i,l}`. The increments are
//! nonnegative and split each gap `s_{l+1} − s_l`, so every `f_i` is
//! nondecreasing and 1-Lipschitz and `Σ_i f_i` is the identity.

use crate::lp::{Affine, Cmp, LpModel};
use crate::order::{cx_dominates_with, DiscreteLaw, ORDER_TOL};
use crate::space::{check_concordance, Allocation, Belief, RandomVariable, ScenarioSpace, SpaceError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Cap on sweeps of pairwise transfers before the exact completion step.
const MAX_PASSES: usize = 200;

/// Negative increments above this are treated as rounding noise.
const MONOTONE_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ComonotoneError {
    #[error("value {value} on block {block} is not in the scheme's support")]
    SupportMismatch { block: usize, value: f64 },
    #[error("scheme covers {found} blocks but the space has {expected}")]
    BlockCountMismatch { expected: usize, found: usize },
    #[error("allocation has {found} entries, expected {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("improved coordinate of agent {agent} on block {block} misses the convex order by {gap}")]
    ImprovementVerificationFailed { agent: usize, block: usize, gap: f64 },
    #[error("beliefs are not concordant with the partition: {0}")]
    NotConcordant(SpaceError),
}

/// Comonotone partition of the identity on one block's support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockScheme {
    pub support: Vec<f64>,
    /// `f_i(s_0)`; sums to `s_0`.
    pub intercepts: Vec<f64>,
    /// `increments[i][k] = f_i(s_{k+1}) − f_i(s_k) ≥ 0`; sums over `i` to the gap.
    pub increments: Vec<Vec<f64>>,
}

impl BlockScheme {
    /// The identity split in fixed shares with given intercept offsets
    /// (which must sum to zero).
    pub fn proportional(support: Vec<f64>, shares: &[f64], offsets: &[f64]) -> Self {
        let intercepts = shares
            .iter()
            .zip(offsets)
            .map(|(w, o)| w * support[0] + o)
            .collect();
        let increments = shares
            .iter()
            .map(|w| support.windows(2).map(|g| w * (g[1] - g[0])).collect())
            .collect();
        Self {
            support,
            intercepts,
            increments,
        }
    }

    pub fn agents(&self) -> usize {
        self.intercepts.len()
    }

    /// Values of `f_i` on the support.
    pub fn function(&self, i: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.support.len());
        let mut v = self.intercepts[i];
        out.push(v);
        for a in &self.increments[i] {
            v += a;
            out.push(v);
        }
        out
    }

    /// Position of `value` in the support.
    pub fn locate(&self, value: f64) -> Option<usize> {
        let scale = value.abs().max(1.0);
        let idx = self.support.partition_point(|s| *s < value - 1e-12 * scale);
        (idx < self.support.len() && (self.support[idx] - value).abs() <= 1e-12 * scale)
            .then_some(idx)
    }

    /// Largest violation of the invariants: negative increments, gap sums and
    /// intercept sum.
    pub fn defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        let n = self.agents();
        let isum: f64 = self.intercepts.iter().sum();
        worst = worst.max((isum - self.support[0]).abs());
        for (k, g) in self.support.windows(2).enumerate() {
            let mut total = 0.0;
            for i in 0..n {
                let a = self.increments[i][k];
                worst = worst.max(-a);
                total += a;
            }
            worst = worst.max((total - (g[1] - g[0])).abs());
        }
        worst
    }
}

/// Per-block schemes, indexed by the space's block ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComonotoneScheme {
    pub blocks: Vec<BlockScheme>,
}

impl ComonotoneScheme {
    pub fn agents(&self) -> usize {
        self.blocks.first().map_or(0, BlockScheme::agents)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocallyComonotoneAllocation {
    pub scheme: ComonotoneScheme,
    pub realized: Allocation,
}

/// Sorted distinct values of `x` on block `b`.
pub fn block_support(x: &[f64], space: &ScenarioSpace, b: usize) -> Vec<f64> {
    let mut vals: Vec<f64> = space.block_atoms(b).iter().map(|&k| x[k]).collect();
    vals.sort_by(f64::total_cmp);
    vals.dedup();
    vals
}

/// Evaluates `f_i^B(X)` on every block; the last coordinate is `X` minus the
/// others, so the parts add up to `X` exactly.
pub fn realize(
    scheme: &ComonotoneScheme,
    x: &[f64],
    space: &ScenarioSpace,
) -> Result<Allocation, ComonotoneError> {
    if scheme.blocks.len() != space.num_blocks() {
        return Err(ComonotoneError::BlockCountMismatch {
            expected: space.num_blocks(),
            found: scheme.blocks.len(),
        });
    }
    if x.len() != space.len() {
        return Err(ComonotoneError::LengthMismatch {
            expected: space.len(),
            found: x.len(),
        });
    }
    let n = scheme.agents();
    let functions: Vec<Vec<Vec<f64>>> = scheme
        .blocks
        .iter()
        .map(|bs| (0..n).map(|i| bs.function(i)).collect())
        .collect();
    let mut leading = vec![vec![0.0; x.len()]; n.saturating_sub(1)];
    for (k, &v) in x.iter().enumerate() {
        let b = space.block_of(k);
        let idx = scheme.blocks[b]
            .locate(v)
            .ok_or(ComonotoneError::SupportMismatch { block: b, value: v })?;
        for (i, part) in leading.iter_mut().enumerate() {
            part[k] = functions[b][i][idx];
        }
    }
    Ok(Allocation::completing(x, leading))
}

/// Equal split `X/n` on every block.
pub fn equal_split(x: &[f64], space: &ScenarioSpace, n: usize) -> ComonotoneScheme {
    let shares = vec![1.0 / n as f64; n];
    let zeros = vec![0.0; n];
    ComonotoneScheme {
        blocks: (0..space.num_blocks())
            .map(|b| BlockScheme::proportional(block_support(x, space, b), &shares, &zeros))
            .collect(),
    }
}

/// Comonotone improvement on one block.
///
/// `x` and each `parts[i]` hold the block's atom values and `weights` the
/// conditional probabilities. Returns `f` with `f_i(X) ⪯ parts[i]` in convex
/// order under `weights`.
pub fn improve_block(
    x: &[f64],
    parts: &[Vec<f64>],
    weights: &[f64],
) -> Result<BlockScheme, ComonotoneError> {
    improve_block_tagged(x, parts, weights, 0)
}

fn improve_block_tagged(
    x: &[f64],
    parts: &[Vec<f64>],
    weights: &[f64],
    block: usize,
) -> Result<BlockScheme, ComonotoneError> {
    let n = parts.len();
    let mut support: Vec<f64> = x.to_vec();
    support.sort_by(f64::total_cmp);
    support.dedup();
    let m = support.len();
    let index: Vec<usize> = x
        .iter()
        .map(|v| support.partition_point(|s| s < v))
        .collect();
    let mut mass = vec![0.0; m];
    for (k, &j) in index.iter().enumerate() {
        mass[j] += weights[k];
    }

    // Conditional expectations given the value of X.
    let mut g: Vec<Vec<f64>> = parts
        .iter()
        .map(|part| {
            let mut acc = vec![0.0; m];
            for (k, &j) in index.iter().enumerate() {
                acc[j] += weights[k] * part[k];
            }
            acc.iter()
                .zip(&mass)
                .zip(&support)
                .map(|((a, w), s)| if *w > 0.0 { a / w } else { s / n as f64 })
                .collect()
        })
        .collect();

    transfer_passes(&mut g, &mass);
    let mut scheme = scheme_from_values(&support, &g);
    let verified = verify(&scheme, x, parts, weights, &index);
    if !is_monotone(&g) || verified.is_err() {
        if let Some(f) = completion_lp(&support, &mass, parts, weights) {
            scheme = scheme_from_values(&support, &f);
        }
    }
    verify(&scheme, x, parts, weights, &index).map_err(|(agent, gap)| {
        ComonotoneError::ImprovementVerificationFailed { agent, block, gap }
    })?;
    Ok(scheme)
}

/// Pairwise transfers between adjacent support points: an agent whose
/// values drop across a gap is paired with the agent rising the most, and
/// both are contracted toward their two-point means by the same amount.
/// Each step is a mean-preserving contraction, hence a convex-order
/// improvement.
fn transfer_passes(g: &mut [Vec<f64>], mass: &[f64]) {
    let n = g.len();
    let m = mass.len();
    for _ in 0..MAX_PASSES {
        let mut changed = false;
        for k in 0..m.saturating_sub(1) {
            let (wl, wr) = (mass[k], mass[k + 1]);
            if wl + wr <= 0.0 {
                continue;
            }
            loop {
                let delta: Vec<f64> = (0..n).map(|i| g[i][k + 1] - g[i][k]).collect();
                let Some(i) = (0..n)
                    .filter(|&i| delta[i] < -MONOTONE_SLACK)
                    .min_by(|&a, &b| delta[a].total_cmp(&delta[b]))
                else {
                    break;
                };
                let j = (0..n)
                    .max_by(|&a, &b| delta[a].total_cmp(&delta[b]))
                    .expect("at least one agent");
                let tau = (-delta[i]).min(delta[j]);
                if tau <= 0.0 {
                    break;
                }
                let left = tau * wr / (wl + wr);
                let right = tau * wl / (wl + wr);
                g[i][k] -= left;
                g[i][k + 1] += right;
                g[j][k] += left;
                g[j][k + 1] -= right;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
}

fn is_monotone(g: &[Vec<f64>]) -> bool {
    g.iter()
        .all(|f| f.windows(2).all(|w| w[1] - w[0] >= -MONOTONE_SLACK))
}

/// Builds a scheme from per-agent values on the support. Increments of the
/// leading agents are clamped at zero; the last agent takes what is left of
/// each gap and of the intercept.
fn scheme_from_values(support: &[f64], g: &[Vec<f64>]) -> BlockScheme {
    let n = g.len();
    let gaps: Vec<f64> = support.windows(2).map(|w| w[1] - w[0]).collect();
    let mut intercepts: Vec<f64> = g.iter().map(|f| f[0]).collect();
    let mut increments: Vec<Vec<f64>> = g
        .iter()
        .map(|f| f.windows(2).map(|w| (w[1] - w[0]).max(0.0)).collect())
        .collect();
    let lead: f64 = intercepts[..n - 1].iter().sum();
    intercepts[n - 1] = support[0] - lead;
    for (k, gap) in gaps.iter().enumerate() {
        let mut used: f64 = (0..n - 1).map(|i| increments[i][k]).sum();
        if used > *gap {
            // Rounding pushed the leading agents past the gap; scale them back.
            for inc in increments.iter_mut().take(n - 1) {
                inc[k] *= gap / used;
            }
            used = (0..n - 1).map(|i| increments[i][k]).sum();
        }
        increments[n - 1][k] = (gap - used).max(0.0);
    }
    BlockScheme {
        support: support.to_vec(),
        intercepts,
        increments,
    }
}

/// Exact search for comonotone `f` with `f_i(X) ⪯ parts[i]`: with `f_i`
/// nondecreasing, the convex order reduces to the upper-tail sums at the
/// support's breakpoints.
fn completion_lp(
    support: &[f64],
    mass: &[f64],
    parts: &[Vec<f64>],
    weights: &[f64],
) -> Option<Vec<Vec<f64>>> {
    let n = parts.len();
    let m = support.len();
    let mut model = LpModel::new();
    let f: Vec<Vec<usize>> = (0..n).map(|_| (0..m).map(|_| model.free_var()).collect()).collect();
    for k in 0..m {
        let mut row = Affine::default();
        for fi in &f {
            row.add_term(fi[k], 1.0);
        }
        model.constrain(&row, Cmp::Eq, support[k]);
    }
    for (i, fi) in f.iter().enumerate() {
        for k in 0..m.saturating_sub(1) {
            let mut row = Affine::var(fi[k + 1]);
            row.add_term(fi[k], -1.0);
            model.constrain(&row, Cmp::Ge, 0.0);
        }
        let law = DiscreteLaw::new(&parts[i], weights);
        let mut tail_mass = 0.0;
        let mut row = Affine::default();
        for k in (0..m).rev() {
            tail_mass += mass[k];
            row.add_term(fi[k], mass[k]);
            let bound = law.upper_tail_integral((1.0 - tail_mass).max(0.0));
            let cmp = if k == 0 { Cmp::Eq } else { Cmp::Le };
            model.constrain(&row, cmp, bound);
        }
    }
    let sol = model.solve().ok()?;
    Some(f.iter().map(|fi| fi.iter().map(|&v| sol.x[v]).collect()).collect())
}

fn verify(
    scheme: &BlockScheme,
    x: &[f64],
    parts: &[Vec<f64>],
    weights: &[f64],
    index: &[usize],
) -> Result<(), (usize, f64)> {
    let n = parts.len();
    let functions: Vec<Vec<f64>> = (0..n).map(|i| scheme.function(i)).collect();
    let mut last = x.to_vec();
    for i in 0..n {
        let y: Vec<f64> = if i + 1 < n {
            let y: Vec<f64> = index.iter().map(|&j| functions[i][j]).collect();
            for (l, v) in last.iter_mut().zip(&y) {
                *l -= v;
            }
            y
        } else {
            last.clone()
        };
        let verdict = cx_dominates_with(&y, &parts[i], weights, ORDER_TOL);
        if !verdict.dominates {
            return Err((i, verdict.max_violation));
        }
    }
    Ok(())
}

/// Applies [`improve_block`] on every block and realizes the result.
pub fn improve_allocation(
    x: &[f64],
    allocation: &Allocation,
    space: &ScenarioSpace,
    beliefs: &[Belief],
) -> Result<LocallyComonotoneAllocation, ComonotoneError> {
    check_concordance(beliefs, space).map_err(ComonotoneError::NotConcordant)?;
    for part in &allocation.parts {
        if part.len() != space.len() {
            return Err(ComonotoneError::LengthMismatch {
                expected: space.len(),
                found: part.len(),
            });
        }
    }
    let blocks: Vec<BlockScheme> = (0..space.num_blocks())
        .into_par_iter()
        .map(|b| {
            let atoms = space.block_atoms(b);
            let xb: Vec<f64> = atoms.iter().map(|&k| x[k]).collect();
            let parts: Vec<Vec<f64>> = allocation
                .parts
                .iter()
                .map(|p| atoms.iter().map(|&k| p[k]).collect())
                .collect();
            let full = space.conditional_weights_of(b);
            let weights: Vec<f64> = atoms.iter().map(|&k| full[k]).collect();
            improve_block_tagged(&xb, &parts, &weights, b)
        })
        .collect::<Result<_, _>>()?;
    let scheme = ComonotoneScheme { blocks };
    let realized = realize(&scheme, x, space)?;
    Ok(LocallyComonotoneAllocation { scheme, realized })
}

/// Convenience: wraps per-agent vectors as an [`Allocation`].
pub fn allocation_of(parts: Vec<Vec<f64>>) -> Allocation {
    Allocation {
        parts: parts.into_iter().map(RandomVariable).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_agent_is_identity() {
        let s = ScenarioSpace::uniform(&["A", "A", "B", "B"]).unwrap();
        let x = [3.0, 1.0, -2.0, 5.0];
        let alloc = realize(&equal_split(&x, &s, 1), &x, &s).unwrap();
        assert_eq!(alloc.parts[0].0, x.to_vec());
    }

    #[test]
    fn equal_split_halves() {
        let s = ScenarioSpace::uniform(&["A", "A", "B", "B"]).unwrap();
        let x = [3.0, 1.0, -2.0, 5.0];
        let alloc = realize(&equal_split(&x, &s, 2), &x, &s).unwrap();
        for part in &alloc.parts {
            for (a, b) in part.iter().zip(&x) {
                assert!((a - b / 2.0).abs() < 1e-15);
            }
        }
        assert_eq!(alloc.sum_error(&x), 0.0);
    }

    #[test]
    fn cash_offsets_shift_coordinates() {
        let s = ScenarioSpace::uniform(&["A", "A"]).unwrap();
        let x = [0.0, 2.0];
        let scheme = ComonotoneScheme {
            blocks: vec![BlockScheme::proportional(vec![0.0, 2.0], &[0.5, 0.5], &[1.5, -1.5])],
        };
        let alloc = realize(&scheme, &x, &s).unwrap();
        assert_eq!(alloc.parts[0].0, vec![1.5, 2.5]);
        assert_eq!(alloc.parts[1].0, vec![-1.5, -0.5]);
    }

    #[test]
    fn support_mismatch_is_reported() {
        let s = ScenarioSpace::uniform(&["A", "A"]).unwrap();
        let scheme = equal_split(&[0.0, 1.0], &s, 2);
        assert!(matches!(
            realize(&scheme, &[0.0, 1.5], &s),
            Err(ComonotoneError::SupportMismatch { .. })
        ));
    }

    #[test]
    fn constant_target_gives_constant_shares() {
        let x = [2.0; 4];
        let parts = vec![vec![1.0, 0.0, 1.0, 0.0], vec![1.0, 2.0, 1.0, 2.0]];
        let scheme = improve_block(&x, &parts, &[0.25; 4]).unwrap();
        assert_eq!(scheme.support, vec![2.0]);
        assert!((scheme.function(0)[0] - 0.5).abs() < 1e-15);
        assert!((scheme.function(1)[0] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn anti_monotone_pair_becomes_comonotone() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let x1 = [0.0, 2.0, 1.0, 3.0];
        let x2: Vec<f64> = x.iter().zip(&x1).map(|(a, b)| a - b).collect();
        let parts = vec![x1.to_vec(), x2.clone()];
        let w = [0.25; 4];
        let scheme = improve_block(&x, &parts, &w).unwrap();
        assert!(scheme.defect() < 1e-12);
        for i in 0..2 {
            let f = scheme.function(i);
            assert!(f.windows(2).all(|p| p[1] >= p[0] - 1e-12));
            assert!(cx_dominates_with(&f, &parts[i], &w, 1e-9).dominates);
        }
    }

    #[test]
    fn comonotone_input_is_a_fixed_point() {
        let x = [0.0, 1.0, 2.0, 4.0];
        let parts = vec![vec![0.0, 0.5, 0.5, 1.0], vec![0.0, 0.5, 1.5, 3.0]];
        let scheme = improve_block(&x, &parts, &[0.25; 4]).unwrap();
        for i in 0..2 {
            let f = scheme.function(i);
            for (a, b) in f.iter().zip(&parts[i]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_concordant_beliefs_are_rejected() {
        let s = ScenarioSpace::uniform(&["A", "A", "B", "B"]).unwrap();
        let q = Belief::normalized(&s, &[0.5, 1.5, 1.0, 1.0]).unwrap();
        let x = [0.0, 1.0, 2.0, 3.0];
        let alloc = allocation_of(vec![x.to_vec()]);
        assert!(matches!(
            improve_allocation(&x, &alloc, &s, &[q]),
            Err(ComonotoneError::NotConcordant(_))
        ));
    }
}
