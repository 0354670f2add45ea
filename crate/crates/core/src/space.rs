//! Finite scenario spaces with a block partition, beliefs given as densities
//! against the reference weights, and the random variables living on them.
//!
//! Atom order is fixed when a space is built and every vector in the crate is
//! indexed by it.

use serde::{Deserialize, Serialize};
use std::ops::{Deref, DerefMut};
use thiserror::Error;

/// Absolute tolerance for "sums to one" style checks.
pub const WEIGHT_TOL: f64 = 1e-12;

/// Default minimum number of atoms per block.
pub const MIN_ATOMS_PER_BLOCK: usize = 2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpaceError {
    #[error("a scenario space needs at least one atom")]
    NoAtoms,
    #[error("{what} has {found} entries but the space has {expected} atoms")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("atom {atom} has non-positive or non-finite weight {weight}")]
    NonPositiveWeight { atom: usize, weight: f64 },
    #[error("weights sum to {sum}, not 1")]
    WeightsNotNormalized { sum: f64 },
    #[error("declared block `{0}` contains no atom")]
    EmptyBlock(String),
    #[error("block `{block}` has {count} atom(s), fewer than the required {min}")]
    BlockTooSmall {
        block: String,
        count: usize,
        min: usize,
    },
    #[error("atom label `{0}` is not a declared block")]
    UndeclaredBlock(String),
    #[error("unknown block `{0}`")]
    UnknownBlock(String),
    #[error("density entry {atom} is negative or non-finite ({value})")]
    NegativeDensity { atom: usize, value: f64 },
    #[error("density has expectation {mean} under the reference weights, not 1")]
    DensityNotNormalized { mean: f64 },
    #[error("belief {belief} is not constant on block `{block}`")]
    NotBlockConstant { belief: usize, block: String },
}

/// Options for [`ScenarioSpace::build_with`].
#[derive(Debug, Clone, Default)]
pub struct SpaceOptions {
    /// Block labels that must all be used. `None` means "whatever the atoms use".
    pub declared_blocks: Option<Vec<String>>,
    /// Overrides [`MIN_ATOMS_PER_BLOCK`].
    pub min_atoms_per_block: Option<usize>,
}

/// A finite probability space `(Ω, P)` together with a partition of `Ω`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpace {
    atoms: Vec<String>,
    weights: Vec<f64>,
    block_of: Vec<usize>,
    block_labels: Vec<String>,
    #[serde(skip)]
    members: Vec<Vec<usize>>,
}

impl ScenarioSpace {
    /// Builds a space with the default checks (at least two atoms per block).
    pub fn build<A: AsRef<str>, L: AsRef<str>>(
        atoms: &[A],
        weights: &[f64],
        partition: &[L],
    ) -> Result<Self, SpaceError> {
        Self::build_with(atoms, weights, partition, &SpaceOptions::default())
    }

    pub fn build_with<A: AsRef<str>, L: AsRef<str>>(
        atoms: &[A],
        weights: &[f64],
        partition: &[L],
        options: &SpaceOptions,
    ) -> Result<Self, SpaceError> {
        let n = atoms.len();
        if n == 0 {
            return Err(SpaceError::NoAtoms);
        }
        for (what, found) in [("weights", weights.len()), ("partition", partition.len())] {
            if found != n {
                return Err(SpaceError::LengthMismatch {
                    what,
                    expected: n,
                    found,
                });
            }
        }
        for (atom, &weight) in weights.iter().enumerate() {
            if !(weight > 0.0 && weight.is_finite()) {
                return Err(SpaceError::NonPositiveWeight { atom, weight });
            }
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_TOL {
            return Err(SpaceError::WeightsNotNormalized { sum });
        }

        let mut block_labels: Vec<String> = match &options.declared_blocks {
            Some(declared) => declared.clone(),
            None => Vec::new(),
        };
        let mut block_of = Vec::with_capacity(n);
        for label in partition {
            let label = label.as_ref();
            let idx = match block_labels.iter().position(|b| b == label) {
                Some(idx) => idx,
                None if options.declared_blocks.is_some() => {
                    return Err(SpaceError::UndeclaredBlock(label.to_string()))
                }
                None => {
                    block_labels.push(label.to_string());
                    block_labels.len() - 1
                }
            };
            block_of.push(idx);
        }
        let mut members = vec![Vec::new(); block_labels.len()];
        for (atom, &b) in block_of.iter().enumerate() {
            members[b].push(atom);
        }
        let min = options.min_atoms_per_block.unwrap_or(MIN_ATOMS_PER_BLOCK);
        for (b, m) in members.iter().enumerate() {
            if m.is_empty() {
                return Err(SpaceError::EmptyBlock(block_labels[b].clone()));
            }
            if m.len() < min {
                return Err(SpaceError::BlockTooSmall {
                    block: block_labels[b].clone(),
                    count: m.len(),
                    min,
                });
            }
        }
        Ok(Self {
            atoms: atoms.iter().map(|a| a.as_ref().to_string()).collect(),
            weights: weights.to_vec(),
            block_of,
            block_labels,
            members,
        })
    }

    /// Uniform weights, atoms named `w0, w1, …`.
    pub fn uniform<S: AsRef<str>>(partition: &[S]) -> Result<Self, SpaceError> {
        let n = partition.len();
        let atoms: Vec<String> = (0..n).map(|k| format!("w{k}")).collect();
        let labels: Vec<String> = partition.iter().map(|s| s.as_ref().to_string()).collect();
        Self::build(&atoms, &vec![1.0 / n as f64; n], &labels)
    }

    /// Restores the derived membership lists after deserialization.
    pub fn rebuild(self) -> Result<Self, SpaceError> {
        let labels: Vec<&str> = self
            .block_of
            .iter()
            .map(|&b| self.block_labels.get(b).map(String::as_str).unwrap_or(""))
            .collect();
        Self::build_with(
            &self.atoms,
            &self.weights,
            &labels,
            &SpaceOptions {
                declared_blocks: Some(self.block_labels.clone()),
                min_atoms_per_block: Some(1),
            },
        )
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn atoms(&self) -> &[String] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn num_blocks(&self) -> usize {
        self.block_labels.len()
    }

    pub fn block_labels(&self) -> &[String] {
        &self.block_labels
    }

    /// Block index of every atom.
    pub fn partition(&self) -> &[usize] {
        &self.block_of
    }

    pub fn block_of(&self, atom: usize) -> usize {
        self.block_of[atom]
    }

    /// Atoms of block `b`, in atom order.
    pub fn block_atoms(&self, b: usize) -> &[usize] {
        &self.members[b]
    }

    pub fn block_index(&self, label: &str) -> Option<usize> {
        self.block_labels.iter().position(|l| l == label)
    }

    /// `P(B)` for block index `b`.
    pub fn block_mass(&self, b: usize) -> f64 {
        self.members[b].iter().map(|&k| self.weights[k]).sum()
    }

    /// `P^B`: the reference weights conditioned on the block, zero elsewhere.
    pub fn conditional_weights(&self, block: &str) -> Result<Vec<f64>, SpaceError> {
        let b = self
            .block_index(block)
            .ok_or_else(|| SpaceError::UnknownBlock(block.to_string()))?;
        Ok(self.conditional_weights_of(b))
    }

    pub fn conditional_weights_of(&self, b: usize) -> Vec<f64> {
        let mass = self.block_mass(b);
        let mut out = vec![0.0; self.len()];
        for &k in &self.members[b] {
            out[k] = self.weights[k] / mass;
        }
        out
    }

    /// `E_P[x]`.
    pub fn expectation(&self, x: &[f64]) -> f64 {
        dot(&self.weights, x)
    }

    /// `E_P[x | σ(π)]` as a vector over atoms.
    pub fn block_average(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for b in 0..self.num_blocks() {
            let atoms = &self.members[b];
            let mass: f64 = atoms.iter().map(|&k| self.weights[k]).sum();
            let avg = atoms.iter().map(|&k| self.weights[k] * x[k]).sum::<f64>() / mass;
            for &k in atoms {
                out[k] = avg;
            }
        }
        out
    }

    pub(crate) fn check_len(&self, what: &'static str, found: usize) -> Result<(), SpaceError> {
        if found == self.len() {
            Ok(())
        } else {
            Err(SpaceError::LengthMismatch {
                what,
                expected: self.len(),
                found,
            })
        }
    }
}

/// A probability measure `Q ≪ P`, stored as its density `dQ/dP` per atom.
///
/// The per-atom probabilities `P(ω)·dQ/dP(ω)` are cached since every law
/// computation needs them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Belief {
    density: Vec<f64>,
    probs: Vec<f64>,
    reference: Vec<f64>,
}

impl Belief {
    pub fn new(space: &ScenarioSpace, density: Vec<f64>) -> Result<Self, SpaceError> {
        space.check_len("density", density.len())?;
        for (atom, &value) in density.iter().enumerate() {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(SpaceError::NegativeDensity { atom, value });
            }
        }
        let mean = space.expectation(&density);
        if (mean - 1.0).abs() > WEIGHT_TOL {
            return Err(SpaceError::DensityNotNormalized { mean });
        }
        let probs = density
            .iter()
            .zip(space.weights())
            .map(|(d, p)| d * p)
            .collect();
        Ok(Self {
            density,
            probs,
            reference: space.weights().to_vec(),
        })
    }

    /// Rescales a nonnegative vector to unit mean first.
    pub fn normalized(space: &ScenarioSpace, raw: &[f64]) -> Result<Self, SpaceError> {
        space.check_len("density", raw.len())?;
        let mean = space.expectation(raw);
        if !(mean > 0.0 && mean.is_finite()) {
            return Err(SpaceError::DensityNotNormalized { mean });
        }
        Self::new(space, raw.iter().map(|v| v / mean).collect())
    }

    /// The reference measure itself.
    pub fn reference(space: &ScenarioSpace) -> Self {
        Self {
            density: vec![1.0; space.len()],
            probs: space.weights().to_vec(),
            reference: space.weights().to_vec(),
        }
    }

    /// Density given per block, in block order.
    pub fn from_block_values(space: &ScenarioSpace, values: &[f64]) -> Result<Self, SpaceError> {
        if values.len() != space.num_blocks() {
            return Err(SpaceError::LengthMismatch {
                what: "block densities",
                expected: space.num_blocks(),
                found: values.len(),
            });
        }
        Self::new(
            space,
            space.partition().iter().map(|&b| values[b]).collect(),
        )
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    /// `Q(ω)` per atom.
    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    /// The reference weights `P(ω)` the density is taken against.
    pub fn reference_weights(&self) -> &[f64] {
        &self.reference
    }

    pub fn len(&self) -> usize {
        self.density.len()
    }

    pub fn is_empty(&self) -> bool {
        self.density.is_empty()
    }

    /// Strictly positive density, i.e. `Q ~ P`.
    pub fn is_equivalent(&self) -> bool {
        self.density.iter().all(|&d| d > 0.0)
    }

    pub fn expectation(&self, x: &[f64]) -> f64 {
        dot(&self.probs, x)
    }

    /// Whether the density is constant on every block of `space`.
    pub fn is_block_constant(&self, space: &ScenarioSpace) -> bool {
        self.first_nonconstant_block(space).is_none()
    }

    fn first_nonconstant_block(&self, space: &ScenarioSpace) -> Option<usize> {
        (0..space.num_blocks()).find(|&b| {
            let atoms = space.block_atoms(b);
            let d0 = self.density[atoms[0]];
            atoms
                .iter()
                .any(|&k| (self.density[k] - d0).abs() > WEIGHT_TOL * d0.abs().max(1.0))
        })
    }
}

/// A real value per atom (a loss in monetary units).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RandomVariable(pub Vec<f64>);

impl RandomVariable {
    pub fn constant(len: usize, c: f64) -> Self {
        Self(vec![c; len])
    }

    pub fn indicator(len: usize, atoms: &[usize]) -> Self {
        let mut v = vec![0.0; len];
        for &k in atoms {
            v[k] = 1.0;
        }
        Self(v)
    }

    pub fn sup_norm(&self) -> f64 {
        sup_norm(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for RandomVariable {
    type Target = Vec<f64>;
    fn deref(&self) -> &Vec<f64> {
        &self.0
    }
}

impl DerefMut for RandomVariable {
    fn deref_mut(&mut self) -> &mut Vec<f64> {
        &mut self.0
    }
}

impl From<Vec<f64>> for RandomVariable {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// `n` random variables that sum to a target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub parts: Vec<RandomVariable>,
}

impl Allocation {
    /// Uses the first `n−1` parts as given and defines the last one by
    /// subtraction, so the coordinates add up to `target` with no slack
    /// beyond a single rounding per atom.
    pub fn completing(target: &[f64], mut leading: Vec<Vec<f64>>) -> Self {
        let mut last = target.to_vec();
        for part in &leading {
            for (l, v) in last.iter_mut().zip(part) {
                *l -= v;
            }
        }
        leading.push(last);
        Self {
            parts: leading.into_iter().map(RandomVariable).collect(),
        }
    }

    pub fn agents(&self) -> usize {
        self.parts.len()
    }

    pub fn total(&self) -> Vec<f64> {
        let len = self.parts.first().map_or(0, |p| p.len());
        let mut out = vec![0.0; len];
        for part in &self.parts {
            for (o, v) in out.iter_mut().zip(part.iter()) {
                *o += v;
            }
        }
        out
    }

    /// Whether the last part is bit-for-bit `target − Σ others`, the exact
    /// form of the budget identity that floating point allows.
    pub fn is_exact_split(&self, target: &[f64]) -> bool {
        let Some((last, leading)) = self.parts.split_last() else {
            return target.is_empty();
        };
        let mut rest = target.to_vec();
        for part in leading {
            for (r, v) in rest.iter_mut().zip(part.iter()) {
                *r -= v;
            }
        }
        last.len() == rest.len() && last.iter().zip(&rest).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Largest deviation of `Σ parts` from `target`.
    pub fn sum_error(&self, target: &[f64]) -> f64 {
        self.total()
            .iter()
            .zip(target)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Witness returned by [`check_concordance`].
#[derive(Debug, Clone, PartialEq)]
pub struct Concordance {
    /// Coarsest partition on which every density is constant (block id per
    /// atom); the level sets of the joint density vector.
    pub coarsest: Vec<usize>,
    pub num_blocks: usize,
}

/// Checks that every density is constant on the blocks of `space`, so all
/// beliefs share the conditional laws `P^B`.
pub fn check_concordance(
    beliefs: &[Belief],
    space: &ScenarioSpace,
) -> Result<Concordance, SpaceError> {
    for (i, belief) in beliefs.iter().enumerate() {
        space.check_len("density", belief.len())?;
        if let Some(b) = belief.first_nonconstant_block(space) {
            return Err(SpaceError::NotBlockConstant {
                belief: i,
                block: space.block_labels()[b].clone(),
            });
        }
    }
    let mut keys: Vec<Vec<f64>> = Vec::new();
    let mut coarsest = Vec::with_capacity(space.len());
    for k in 0..space.len() {
        let key: Vec<f64> = beliefs.iter().map(|q| q.density()[k]).collect();
        let id = match keys.iter().position(|existing| {
            existing
                .iter()
                .zip(&key)
                .all(|(a, b)| (a - b).abs() <= WEIGHT_TOL * a.abs().max(1.0))
        }) {
            Some(id) => id,
            None => {
                keys.push(key);
                keys.len() - 1
            }
        };
        coarsest.push(id);
    }
    Ok(Concordance {
        coarsest,
        num_blocks: keys.len(),
    })
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sup_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn four() -> ScenarioSpace {
        ScenarioSpace::uniform(&["A", "A", "B", "B"]).unwrap()
    }

    #[test]
    fn builds_uniform_two_block_space() {
        let s = four();
        assert_eq!(s.num_blocks(), 2);
        assert_eq!(s.block_atoms(1), &[2, 3]);
        assert!((s.block_mass(0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rejects_unnormalized_weights() {
        let err = ScenarioSpace::build(&["a", "b", "c"], &[0.5, 0.5, 0.5], &["A", "A", "A"]);
        assert!(matches!(err, Err(SpaceError::WeightsNotNormalized { .. })));
    }

    #[test]
    fn rejects_nonpositive_weight() {
        let err = ScenarioSpace::build(&["a", "b"], &[1.5, -0.5], &["A", "A"]);
        assert!(matches!(err, Err(SpaceError::NonPositiveWeight { atom: 1, .. })));
    }

    #[test]
    fn rejects_unused_declared_block() {
        let opts = SpaceOptions {
            declared_blocks: Some(vec!["A".into(), "B".into()]),
            ..Default::default()
        };
        let err = ScenarioSpace::build_with(
            &["a", "b", "c"],
            &[0.2, 0.3, 0.5],
            &["A", "A", "A"],
            &opts,
        );
        assert_eq!(err.unwrap_err(), SpaceError::EmptyBlock("B".into()));
    }

    #[test]
    fn enforces_two_atoms_per_block_by_default() {
        let err = ScenarioSpace::build(&["a", "b", "c"], &[0.1, 0.3, 0.6], &["A", "A", "B"]);
        assert!(matches!(err, Err(SpaceError::BlockTooSmall { .. })));
    }

    #[test]
    fn conditional_weights_divide_by_block_mass() {
        let opts = SpaceOptions {
            min_atoms_per_block: Some(1),
            ..Default::default()
        };
        let s = ScenarioSpace::build_with(
            &["a", "b", "c"],
            &[0.1, 0.3, 0.6],
            &["A", "A", "B"],
            &opts,
        )
        .unwrap();
        let w = s.conditional_weights("A").unwrap();
        assert!((w[0] - 0.25).abs() < 1e-15 && (w[1] - 0.75).abs() < 1e-15 && w[2] == 0.0);
        assert!(matches!(
            s.conditional_weights("Z"),
            Err(SpaceError::UnknownBlock(_))
        ));
    }

    #[test]
    fn conditional_weights_of_uniform_and_single_block() {
        let s = four();
        assert_eq!(s.conditional_weights("A").unwrap(), vec![0.5, 0.5, 0.0, 0.0]);
        let one = ScenarioSpace::build(&["a", "b", "c"], &[0.2, 0.3, 0.5], &["O", "O", "O"]).unwrap();
        assert_eq!(one.conditional_weights("O").unwrap(), vec![0.2, 0.3, 0.5]);
    }

    #[test]
    fn concordance_accepts_block_constant_and_reports_level_sets() {
        let s = four();
        let q = Belief::new(&s, vec![0.5, 0.5, 1.5, 1.5]).unwrap();
        let c = check_concordance(&[Belief::reference(&s), q], &s).unwrap();
        assert_eq!(c.num_blocks, 2);
        let trivial = check_concordance(&[Belief::reference(&s)], &s).unwrap();
        assert_eq!(trivial.num_blocks, 1);
    }

    #[test]
    fn concordance_rejects_varying_density() {
        let s = four();
        let q = Belief::new(&s, vec![0.5, 1.5, 1.0, 1.0]).unwrap();
        assert_eq!(
            check_concordance(&[q], &s).unwrap_err(),
            SpaceError::NotBlockConstant {
                belief: 0,
                block: "A".into()
            }
        );
    }

    #[test]
    fn belief_rejects_wrong_mean() {
        let s = four();
        assert!(matches!(
            Belief::new(&s, vec![1.0, 1.0, 1.0, 2.0]),
            Err(SpaceError::DensityNotNormalized { .. })
        ));
    }

    #[test]
    fn completing_allocation_sums_exactly() {
        let x = vec![0.1, 0.7, -2.3];
        let a = Allocation::completing(&x, vec![vec![0.3, 0.2, 0.9]]);
        assert_eq!(a.sum_error(&x), 0.0);
    }

    #[test]
    fn rebuild_restores_membership_lists() {
        let s = four();
        let mut stripped = s.clone();
        stripped.members.clear();
        assert_eq!(stripped.rebuild().unwrap(), s);
    }
}
