//! Seeded instance generators shared by the integration tests.
#![allow(dead_code)]

pub mod axioms;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use riskshare::catalog::{MeasureKind, RiskMeasure};
use riskshare::space::{Allocation, Belief, RandomVariable, ScenarioSpace};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random space with `atoms` atoms in `blocks` blocks of at least two atoms,
/// random positive weights.
pub fn random_space(rng: &mut ChaCha8Rng, atoms: usize, blocks: usize) -> ScenarioSpace {
    let mut labels: Vec<String> = Vec::with_capacity(atoms);
    for k in 0..atoms {
        let b = if k < 2 * blocks { k / 2 } else { rng.gen_range(0..blocks) };
        labels.push(format!("B{b}"));
    }
    let raw: Vec<f64> = (0..atoms).map(|_| rng.gen_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let names: Vec<String> = (0..atoms).map(|k| format!("w{k}")).collect();
    ScenarioSpace::build(&names, &weights, &labels).unwrap()
}

pub fn random_block_belief(rng: &mut ChaCha8Rng, space: &ScenarioSpace) -> Belief {
    let values: Vec<f64> = (0..space.num_blocks()).map(|_| rng.gen_range(0.3..2.0)).collect();
    let raw: Vec<f64> = (0..space.len()).map(|k| values[space.block_of(k)]).collect();
    Belief::normalized(space, &raw).unwrap()
}

/// Values on a half-integer grid so ties occur.
pub fn random_target(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| (rng.gen_range(-6..=6) as f64) * 0.5).collect()
}

pub fn random_allocation(rng: &mut ChaCha8Rng, x: &[f64], agents: usize) -> Allocation {
    let leading: Vec<Vec<f64>> = (0..agents.saturating_sub(1))
        .map(|_| x.iter().map(|_| rng.gen_range(-3.0..3.0)).collect())
        .collect();
    Allocation::completing(x, leading)
}

/// A consistent catalog member chosen at random.
pub fn random_kind(rng: &mut ChaCha8Rng) -> MeasureKind {
    match rng.gen_range(0..6) {
        0 => MeasureKind::es(rng.gen_range(0.0..0.9)),
        1 => MeasureKind::entropic(rng.gen_range(0.2..3.0)),
        2 => MeasureKind::min_of(vec![
            MeasureKind::mixture(vec![(0.5, MeasureKind::EssentialSup), (0.5, MeasureKind::Expectation)]),
            MeasureKind::es(0.5),
        ]),
        3 => MeasureKind::min_of(vec![
            MeasureKind::shifted(MeasureKind::Expectation, 1.0),
            MeasureKind::EssentialSup,
        ]),
        4 => MeasureKind::mixture(vec![(0.5, MeasureKind::Expectation), (0.5, MeasureKind::entropic(1.0))]),
        _ => MeasureKind::EssentialSup,
    }
}

pub fn measure(kind: MeasureKind, belief: &Belief) -> RiskMeasure {
    RiskMeasure::new(kind, belief.clone()).unwrap()
}

pub fn rv(v: Vec<f64>) -> RandomVariable {
    RandomVariable(v)
}

/// Seeded 6-atom capital scenario: two blocks of three atoms, a cash-only
/// regime and a regime trading cash plus a random nonnegative security,
/// priced by the equal mixture of the two belief densities.
pub fn capital_scenario(seed: u64) -> (ScenarioSpace, Vec<riskshare::capital::RiskMeasurementRegime>, Vec<f64>) {
    use riskshare::capital::RiskMeasurementRegime;
    let mut r = rng(seed);
    let raw: Vec<f64> = (0..6).map(|_| r.gen_range(0.5..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let names: Vec<String> = (0..6).map(|k| format!("w{k}")).collect();
    let space = ScenarioSpace::build(&names, &weights, &["A", "A", "A", "Ac", "Ac", "Ac"]).unwrap();
    let p = Belief::reference(&space);
    let tilt = r.gen_range(0.7..1.4);
    let q = Belief::normalized(&space, &[1.0, 1.0, 1.0, tilt, tilt, tilt]).unwrap();
    let first = if seed % 2 == 0 {
        MeasureKind::es(r.gen_range(0.3..0.7))
    } else {
        MeasureKind::entropic(r.gen_range(0.5..2.0))
    };
    let second = MeasureKind::es(r.gen_range(0.3..0.7));
    let pricing: Vec<f64> = p.density().iter().zip(q.density()).map(|(a, b)| 0.5 * (a + b)).collect();
    let security: Vec<f64> = (0..6).map(|_| r.gen_range(0.0..2.0)).collect();
    let regimes = vec![
        RiskMeasurementRegime::cash_only(&space, measure(first, &p), pricing.clone()).unwrap(),
        RiskMeasurementRegime::new(&space, measure(second, &q), vec![vec![1.0; 6], security], pricing).unwrap(),
    ];
    let x: Vec<f64> = (0..6).map(|_| r.gen_range(-2.0..2.0)).collect();
    (space, regimes, x)
}
