//! Catalog axiom checks shared by the property tests and the acceptance
//! harness. Each check builds a seeded instance and reports the first
//! violation.

use super::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use riskshare::catalog::{MeasureKind as K, RiskMeasure};
use riskshare::order::icx_dominates;
use riskshare::space::{Belief, ScenarioSpace};

macro_rules! ensure {
    ($cond:expr) => {
        if !$cond {
            return Err(format!("violated: {}", stringify!($cond)));
        }
    };
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

macro_rules! ensure_eq {
    ($a:expr, $b:expr) => {{
        let (a, b) = (&$a, &$b);
        if a != b {
            return Err(format!("{:?} != {:?}", a, b));
        }
    }};
}

pub const CASES: u64 = 128;
const TOL: f64 = 1e-9;

struct Instance {
    space: ScenarioSpace,
    rho: RiskMeasure,
    x: Vec<f64>,
}

fn instance(seed: u64) -> (Instance, ChaCha8Rng) {
    let mut r = rng(seed);
    let atoms = r.gen_range(4..=9);
    let space = random_space(&mut r, atoms, 2);
    let belief = random_block_belief(&mut r, &space);
    let rho = measure(random_kind(&mut r), &belief);
    let x = (0..atoms).map(|_| r.gen_range(-3.0..3.0)).collect();
    (Instance { space, rho, x }, r)
}

fn scale(v: &[f64]) -> f64 {
    v.iter().fold(1.0f64, |m, a| m.max(a.abs()))
}

/// Random density close to the belief density so that bounded-ratio duals
/// are often finite.
fn near_density(r: &mut ChaCha8Rng, space: &ScenarioSpace, belief: &Belief, spread: f64) -> Vec<f64> {
    let raw: Vec<f64> = belief
        .density()
        .iter()
        .map(|d| d * (1.0 + r.gen_range(-spread..=spread)))
        .collect();
    Belief::normalized(space, &raw).unwrap().density().to_vec()
}

fn pair(z: &[f64], x: &[f64], space: &ScenarioSpace) -> f64 {
    let zx: Vec<f64> = z.iter().zip(x).map(|(a, b)| a * b).collect();
    space.expectation(&zx)
}

pub fn cash_additivity(seed: u64) -> Result<(), String> {
    let (inst, mut r) = instance(seed);
    let m = r.gen_range(-2.0..2.0);
    let shifted: Vec<f64> = inst.x.iter().map(|v| v + m).collect();
    let a = inst.rho.evaluate(&inst.x).unwrap();
    let b = inst.rho.evaluate(&shifted).unwrap();
    ensure!((b - a - m).abs() <= TOL * scale(&[a, b]), "{} {a} {b} {m}", inst.rho.label());
    Ok(())
}

pub fn monotonicity(seed: u64) -> Result<(), String> {
    let (inst, mut r) = instance(seed);
    let larger: Vec<f64> = inst.x.iter().map(|v| v + r.gen_range(0.0..1.0)).collect();
    let a = inst.rho.evaluate(&inst.x).unwrap();
    let b = inst.rho.evaluate(&larger).unwrap();
    ensure!(b >= a - TOL * scale(&[a, b]), "{} {a} {b}", inst.rho.label());
    Ok(())
}

pub fn ssd_consistency(seed: u64) -> Result<(), String> {
    let (inst, mut r) = instance(seed);
    // Conditional expectation under the belief on a random grouping,
    // then a nonnegative decrease: dominated in increasing convex order.
    let q = inst.rho.belief().probabilities().to_vec();
    let groups: Vec<usize> = (0..inst.x.len()).map(|_| r.gen_range(0..3)).collect();
    let mut y = inst.x.clone();
    for g in 0..3 {
        let mass: f64 = (0..y.len()).filter(|&k| groups[k] == g).map(|k| q[k]).sum();
        if mass > 0.0 {
            let mean = (0..y.len()).filter(|&k| groups[k] == g).map(|k| q[k] * inst.x[k]).sum::<f64>() / mass;
            for k in 0..y.len() {
                if groups[k] == g {
                    y[k] = mean - r.gen_range(0.0..0.3);
                }
            }
        }
    }
    ensure!(icx_dominates(&y, &inst.x, inst.rho.belief()).dominates);
    let a = inst.rho.evaluate(&inst.x).unwrap();
    let b = inst.rho.evaluate(&y).unwrap();
    ensure!(b <= a + TOL * scale(&[a, b]), "{} {a} {b}", inst.rho.label());
    Ok(())
}

pub fn fenchel_inequality(seed: u64) -> Result<(), String> {
    let (inst, mut r) = instance(seed);
    let belief = inst.rho.belief().clone();
    let own = inst.rho.conjugate(belief.density()).unwrap().conjugate_value;
    ensure!(own.is_finite(), "{}: belief density outside the domain", inst.rho.label());
    let value = inst.rho.evaluate(&inst.x).unwrap();
    for spread in [0.0, 0.1, 0.4, 0.9] {
        let z = near_density(&mut r, &inst.space, &belief, spread);
        let c = inst.rho.conjugate(&z).unwrap().conjugate_value;
        if c.is_finite() {
            let lower = pair(&z, &inst.x, &inst.space) - c.value();
            ensure!(value >= lower - TOL * scale(&[value, lower]), "{} {value} {lower}", inst.rho.label());
        }
    }
    Ok(())
}

pub fn conjugate_identity_under_the_belief(seed: u64) -> Result<(), String> {
    // ρ*(Z) computed on P equals the same kind's conjugate computed on
    // the space reweighted by Q, at Z·(dQ/dP)^{-1}.
    let mut r = rng(seed);
    let atoms = r.gen_range(4..=9);
    let space = random_space(&mut r, atoms, 2);
    let belief = random_block_belief(&mut r, &space);
    let kind = if r.gen_bool(0.5) { K::es(r.gen_range(0.0..0.9)) } else { K::entropic(r.gen_range(0.2..3.0)) };
    let rho = measure(kind.clone(), &belief);
    let names = space.atoms().to_vec();
    let labels: Vec<String> = (0..atoms).map(|k| space.block_labels()[space.block_of(k)].clone()).collect();
    let q_space = ScenarioSpace::build(&names, belief.probabilities(), &labels).unwrap();
    let sharp = measure(kind, &Belief::reference(&q_space));
    for spread in [0.05, 0.3, 0.8] {
        let z = near_density(&mut r, &space, &belief, spread);
        let w: Vec<f64> = z.iter().zip(belief.density()).map(|(a, d)| a / d).collect();
        let lhs = rho.conjugate(&z).unwrap().conjugate_value;
        let rhs = sharp.conjugate(&w).unwrap().conjugate_value;
        ensure_eq!(lhs.is_finite(), rhs.is_finite());
        if lhs.is_finite() {
            ensure!((lhs.value() - rhs.value()).abs() <= TOL, "{lhs} {rhs}");
        }
    }
    Ok(())
}

pub fn conditioning_lowers_the_conjugate(seed: u64) -> Result<(), String> {
    let (inst, mut r) = instance(seed);
    let z = near_density(&mut r, &inst.space, inst.rho.belief(), 0.5);
    let averaged = inst.space.block_average(&z);
    let c = inst.rho.conjugate(&z).unwrap().conjugate_value;
    let ca = inst.rho.conjugate(&averaged).unwrap().conjugate_value;
    if c.is_finite() {
        ensure!(ca.is_finite());
        ensure!(ca.value() <= c.value() + TOL, "{} {ca} {c}", inst.rho.label());
    }
    Ok(())
}

pub fn cone_inequality(seed: u64) -> Result<(), String> {
    let (inst, mut r) = instance(seed);
    let v: Vec<f64> = (0..inst.x.len()).map(|_| r.gen_range(-1.0..1.0)).collect();
    let rec = inst.rho.recession(&v).unwrap();
    let u: Vec<f64> = v.iter().map(|a| a - rec.max(0.0) - r.gen_range(0.0..0.1)).collect();
    if inst.rho.asymptotic_cone_contains(&u).unwrap().contains {
        for spread in [0.0, 0.2, 0.6] {
            let z = near_density(&mut r, &inst.space, inst.rho.belief(), spread);
            if inst.rho.conjugate(&z).unwrap().conjugate_value.is_finite() {
                ensure!(pair(&z, &u, &inst.space) <= TOL, "{} {u:?}", inst.rho.label());
            }
        }
    }
    Ok(())
}

pub fn star_hull_properties(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let atoms = r.gen_range(4..=7);
    let space = random_space(&mut r, atoms, 2);
    let belief = random_block_belief(&mut r, &space);
    let inner = match r.gen_range(0..3) {
        0 => K::min_of(vec![K::shifted(K::Expectation, 1.0), K::EssentialSup]),
        1 => K::min_of(vec![K::mixture(vec![(0.5, K::EssentialSup), (0.5, K::Expectation)]), K::es(0.5)]),
        _ => K::min_of(vec![K::shifted(K::es(0.3), 0.5), K::entropic(1.0)]),
    };
    let rho = measure(inner.clone(), &belief);
    let hull = measure(K::star_hull(inner), &belief);
    let x: Vec<f64> = (0..atoms).map(|_| r.gen_range(-2.0..2.0)).collect();
    let h = hull.evaluate(&x).unwrap();
    ensure!(h <= rho.evaluate(&x).unwrap() + TOL);
    ensure!(hull.evaluate(&vec![0.0; atoms]).unwrap().abs() <= TOL);
    // Star shape: shrinking an accepted position keeps it accepted.
    let accepted: Vec<f64> = x.iter().map(|v| v - h).collect();
    let s = r.gen_range(0.0..1.0);
    let shrunk: Vec<f64> = accepted.iter().map(|v| s * v).collect();
    ensure!(hull.evaluate(&shrunk).unwrap() <= TOL, "{}", hull.evaluate(&shrunk).unwrap());
    // Same asymptotic cone under the limit definition (the union of the
    // members' recession cones) and same conjugate.
    let u: Vec<f64> = (0..atoms).map(|_| r.gen_range(-1.0..0.5)).collect();
    ensure_eq!(
        hull.asymptotic_cone_contains(&u).unwrap().contains,
        rho.recession(&u).unwrap() <= TOL * scale(&u)
    );
    let z = near_density(&mut r, &space, &belief, 0.3);
    let ch = hull.conjugate(&z).unwrap().conjugate_value;
    ensure_eq!(ch, rho.conjugate(&z).unwrap().conjugate_value);
    if ch.is_finite() {
        ensure!(h >= pair(&z, &x, &space) - ch.value() - TOL);
    }
    Ok(())
}
