mod common;

use common::*;
use rand::Rng;
use riskshare::capital::{
    eta_global, eta_single, verify_assumption, CapitalError, CapitalOptions, RiskMeasurementRegime,
};
use riskshare::catalog::MeasureKind as K;
use riskshare::sharing::{solve, SharingProblem, SolveOptions};
use riskshare::space::{Belief, ScenarioSpace};

#[test]
fn reconstruction_splits_into_accepted_kernel_and_unit_parts() {
    let options = CapitalOptions::default();
    for seed in 0..10u64 {
        let (space, regimes, x) = capital_scenario(seed);
        let report = verify_assumption(&regimes).unwrap();
        assert!(report.satisfied, "seed {seed}: {}", report.explanation);
        let g = eta_global(&regimes, &space, &x, None, &options).unwrap();
        assert!(g.parts.is_exact_split(&x), "seed {seed}");
        for (r, a) in regimes.iter().zip(&g.accepted) {
            assert!(r.acceptance().acceptance(a).unwrap(), "seed {seed}: {:?}", r.acceptance().evaluate(a));
        }
        assert!(g.kernel_price.abs() <= 1e-9, "seed {seed}: {}", g.kernel_price);
        assert!(g.shape_gap <= 1e-6, "seed {seed}: {:?} vs {}", g.eta_parts, g.eta);
    }
}

#[test]
fn global_requirement_is_below_each_single_requirement() {
    let options = CapitalOptions::default();
    for seed in 0..6u64 {
        let (space, regimes, x) = capital_scenario(seed);
        let g = eta_global(&regimes, &space, &x, None, &options).unwrap();
        for r in &regimes {
            let single = eta_single(r, &x, &options).unwrap().value;
            assert!(g.eta <= single + 1e-8, "seed {seed}: {} > {single}", g.eta);
        }
    }
}

#[test]
fn security_additivity_and_monotonicity() {
    let options = CapitalOptions::default();
    for seed in 0..6u64 {
        let (_, regimes, x) = capital_scenario(seed);
        let r = &regimes[1];
        let base = eta_single(r, &x, &options).unwrap().value;
        let mut g = rng(70 + seed);
        let c: Vec<f64> = (0..r.securities().len()).map(|_| g.gen_range(-1.0..1.0)).collect();
        let z: Vec<f64> = (0..x.len())
            .map(|k| r.securities().iter().zip(&c).map(|(s, a)| a * s[k]).sum())
            .collect();
        let shifted: Vec<f64> = x.iter().zip(&z).map(|(a, b)| a + b).collect();
        let moved = eta_single(r, &shifted, &options).unwrap().value;
        assert!((moved - base - r.price(&z)).abs() <= 1e-8, "seed {seed}");
        let larger: Vec<f64> = x.iter().map(|v| v + g.gen_range(0.0..0.5)).collect();
        assert!(eta_single(r, &larger, &options).unwrap().value >= base - 1e-9);
    }
}

#[test]
fn cash_only_regimes_reduce_to_the_sharing_solver() {
    // Entropic pair on 16 atoms with tilted second belief.
    let labels: Vec<&str> = (0..16).map(|k| if k < 8 { "A" } else { "Ac" }).collect();
    let space = ScenarioSpace::uniform(&labels).unwrap();
    let p = Belief::reference(&space);
    let q = Belief::from_block_values(&space, &[0.5, 1.5]).unwrap();
    let mut g = rng(11);
    let x: Vec<f64> = (0..16).map(|_| g.gen_range(-2.0..2.0)).collect();
    let agents = vec![measure(K::entropic(1.0), &p), measure(K::entropic(2.0), &q)];
    check_reduction(&space, agents, &x);

    // Expected-shortfall pair under a common belief on 8 atoms.
    let mut g = rng(21);
    let space = random_space(&mut g, 8, 2);
    let p = Belief::reference(&space);
    let x = random_target(&mut g, 8);
    check_reduction(&space, vec![measure(K::es(0.25), &p), measure(K::es(0.6), &p)], &x);
}

fn check_reduction(space: &ScenarioSpace, agents: Vec<riskshare::catalog::RiskMeasure>, x: &[f64]) {
    let pricing = vec![1.0; space.len()];
    let regimes: Vec<RiskMeasurementRegime> = agents
        .iter()
        .map(|a| RiskMeasurementRegime::cash_only(space, a.clone(), pricing.clone()).unwrap())
        .collect();
    let direct = solve(&SharingProblem::new(space.clone(), agents, x.to_vec()).unwrap(), &SolveOptions::default())
        .unwrap()
        .total_risk;
    let g = eta_global(&regimes, space, x, None, &CapitalOptions::default()).unwrap();
    assert!((g.eta - direct).abs() <= 1e-8, "{} vs {direct}", g.eta);
    assert!(g.parts.is_exact_split(x));
    assert!(g.shape_gap <= 1e-6, "{:?}", g.eta_parts);
}

#[test]
fn pricing_that_vanishes_on_a_violates_the_assumption() {
    let space = ScenarioSpace::uniform(&["A", "A", "A", "Ac", "Ac", "Ac"]).unwrap();
    let p = Belief::reference(&space);
    let rho = measure(K::entropic(2.0), &p);
    let pricing = vec![0.0, 0.0, 0.0, 2.0, 2.0, 2.0];
    let outside = vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
    let regimes = vec![
        RiskMeasurementRegime::cash_only(&space, rho.clone(), pricing.clone()).unwrap(),
        RiskMeasurementRegime::new(&space, rho, vec![vec![1.0; 6], outside], pricing).unwrap(),
    ];
    let report = verify_assumption(&regimes).unwrap();
    assert!(!report.satisfied);
    assert!(report.common_density.is_some());
    let x = vec![1.0, 0.0, -1.0, 0.5, 0.0, 2.0];
    match eta_global(&regimes, &space, &x, None, &CapitalOptions::default()) {
        Err(CapitalError::AssumptionViolated(why)) => assert!(why.contains("not strictly positive"), "{why}"),
        other => panic!("{other:?}"),
    }
}
