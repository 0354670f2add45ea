//! Optimal risk sharing over locally comonotone allocations.
//!
//! The search runs over [`ComonotoneScheme`]s: on each block every agent
//! receives a nondecreasing 1-Lipschitz function of the target, described by
//! an intercept and increment shares (see [`layout`]). For a finite minimum
//! every choice of members ("selection") gives a convex subproblem; the
//! answer is the best selection, ties going to the lexicographically smallest
//! one.

mod layout;
mod optim;
pub mod oracle;
pub mod precheck;

pub use oracle::{
    brute_force_oracle, closed_form_entropic, exactness_probe, p_based_check, OracleSolution,
    PBasedVerdict, ProbeReport, ProbeRow,
};
pub use precheck::{precheck, Precheck};

use crate::catalog::normal::NormalForm;
use crate::catalog::{CatalogError, ConjugateValue, MeasureKind, RiskMeasure};
use crate::comonotone::{realize, BlockScheme, ComonotoneError, ComonotoneScheme};
use crate::diagnostics::DiagnosticsError;
use crate::lp::{Affine, Cmp, LpError, LpModel};
use crate::space::{check_concordance, dot, sup_norm, Allocation, ScenarioSpace, SpaceError};
use layout::Layout;
use rayon::prelude::*;
use thiserror::Error;

/// Default solver tolerance.
pub const DEFAULT_TOL: f64 = 1e-9;

/// Largest number of member selections the solver enumerates.
pub const MAX_SELECTIONS: usize = 4096;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SharingError {
    #[error("a sharing problem needs at least one agent")]
    NoAgents,
    #[error("target has {found} entries, the space has {expected} atoms")]
    LengthMismatch { expected: usize, found: usize },
    #[error("agent {agent} (`{label}`) is not consistent")]
    NonConsistentAgent { agent: usize, label: String },
    #[error("belief of agent {agent} is not equivalent to the reference measure")]
    NonEquivalentBelief { agent: usize },
    #[error("beliefs are not concordant with the partition: {0}")]
    NotConcordant(SpaceError),
    #[error("agent {agent} (`{label}`) has no convex decomposition the solver can use")]
    UnsupportedAgent { agent: usize, label: String },
    #[error("{0} member selections exceed the enumeration limit")]
    TooManySelections(usize),
    #[error("instance too large for exhaustive search: {0}")]
    TooLarge(String),
    #[error("closed form needs two entropic agents: {0}")]
    WrongAgentKinds(String),
    #[error("invalid box bound {0}")]
    InvalidBox(f64),
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error(transparent)]
    Comonotone(#[from] ComonotoneError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
}

/// Target `X` to be shared among agents, each carrying its own belief.
#[derive(Debug, Clone, PartialEq)]
pub struct SharingProblem {
    space: ScenarioSpace,
    agents: Vec<RiskMeasure>,
    target: Vec<f64>,
}

impl SharingProblem {
    pub fn new(
        space: ScenarioSpace,
        agents: Vec<RiskMeasure>,
        target: Vec<f64>,
    ) -> Result<Self, SharingError> {
        if agents.is_empty() {
            return Err(SharingError::NoAgents);
        }
        if target.len() != space.len() {
            return Err(SharingError::LengthMismatch {
                expected: space.len(),
                found: target.len(),
            });
        }
        for (i, rho) in agents.iter().enumerate() {
            if !rho.is_consistent() {
                return Err(SharingError::NonConsistentAgent {
                    agent: i,
                    label: rho.label(),
                });
            }
            if rho.belief().len() != space.len() {
                return Err(SharingError::LengthMismatch {
                    expected: space.len(),
                    found: rho.belief().len(),
                });
            }
            if !rho.belief().is_equivalent() {
                return Err(SharingError::NonEquivalentBelief { agent: i });
            }
        }
        let beliefs: Vec<_> = agents.iter().map(|a| a.belief().clone()).collect();
        check_concordance(&beliefs, &space).map_err(SharingError::NotConcordant)?;
        for (i, rho) in agents.iter().enumerate() {
            member_forms(rho).map_err(|()| SharingError::UnsupportedAgent {
                agent: i,
                label: rho.label(),
            })?;
        }
        Ok(Self {
            space,
            agents,
            target,
        })
    }

    pub fn space(&self) -> &ScenarioSpace {
        &self.space
    }

    pub fn agents(&self) -> &[RiskMeasure] {
        &self.agents
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    /// Same agents, different target.
    pub fn with_target(&self, target: Vec<f64>) -> Result<Self, SharingError> {
        Self::new(self.space.clone(), self.agents.clone(), target)
    }

    /// Default intercept bound `4(‖X‖∞ + 1)`.
    pub fn default_box(&self) -> f64 {
        4.0 * (sup_norm(&self.target) + 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOptions {
    /// Intercept bound `M`; `None` means [`SharingProblem::default_box`].
    pub box_bound: Option<f64>,
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Attach the precheck and a weak-duality certificate.
    pub certify: bool,
    /// Among optimal LP solutions pick one with the smallest intercepts.
    pub min_norm: bool,
    /// Seed for the admissibility probes of the precheck.
    pub seed: u64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            box_bound: None,
            tolerance: DEFAULT_TOL,
            max_iterations: 20_000,
            certify: true,
            min_norm: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMethod {
    /// One effective agent takes everything.
    Trivial,
    /// Exact linear program (polyhedral members).
    Linear,
    /// Spectral projected gradient (smooth members).
    Gradient,
    /// Kelley cutting planes (entropic and tail members mixed).
    CuttingPlane,
    /// Explicit formula.
    ClosedForm,
}

/// Weak-duality bound `Σρ_i(X_i) ≥ E[ZX] − Σρ_i*(Z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub density: Vec<f64>,
    pub conjugate_sum: ConjugateValue,
    /// `E[ZX] − Σρ_i*(Z)`, `−∞` when a conjugate is infinite.
    pub lower_bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SharingSolution {
    pub allocation: Allocation,
    pub total_risk: f64,
    pub per_agent_risk: Vec<f64>,
    pub scheme: ComonotoneScheme,
    /// Chosen member of each agent (0 for convex agents).
    pub selection: Vec<usize>,
    pub method: SolveMethod,
    pub box_bound: f64,
    /// Largest intercept magnitude of the scheme.
    pub intercept_norm: f64,
    pub precheck: Option<Precheck>,
    pub certificate: Option<Certificate>,
}

impl SharingSolution {
    /// Whether some intercept sits on the box boundary.
    pub fn at_boundary(&self) -> bool {
        self.intercept_norm >= self.box_bound * (1.0 - 1e-6)
    }
}

/// Convex members an agent selects from. `Err` when the agent's kind has no
/// such decomposition (a star hull of a non-polyhedral member with a positive
/// constant).
pub(crate) fn member_forms(rho: &RiskMeasure) -> Result<Vec<NormalForm>, ()> {
    forms_of(rho.kind(), rho)
}

fn forms_of(kind: &MeasureKind, rho: &RiskMeasure) -> Result<Vec<NormalForm>, ()> {
    if let Some(nf) = NormalForm::of(kind, rho.belief()) {
        return Ok(vec![nf]);
    }
    match kind {
        MeasureKind::MinOf { members } => members
            .iter()
            .map(|m| NormalForm::of(m, rho.belief()).ok_or(()))
            .collect(),
        MeasureKind::StarHull { inner } => forms_of(inner, rho)?
            .into_iter()
            .map(|nf| {
                if nf.constant <= 0.0 {
                    Ok(nf)
                } else if nf.is_polyhedral() {
                    // inf_s s·(ρ₀(X/s) + c) = ρ₀(X) for positively homogeneous ρ₀.
                    Ok(NormalForm { constant: 0.0, ..nf })
                } else {
                    Err(())
                }
            })
            .collect(),
        MeasureKind::Shifted { inner, shift } => Ok(forms_of(inner, rho)?
            .into_iter()
            .map(|nf| NormalForm {
                constant: nf.constant + shift,
                ..nf
            })
            .collect()),
        _ => Err(()),
    }
}

/// Agents after merging expectation agents with a common belief; the merged
/// groups come last.
struct Reduced {
    forms: Vec<Vec<NormalForm>>,
    /// Original agents represented by each reduced agent.
    members: Vec<Vec<usize>>,
}

fn reduce(problem: &SharingProblem) -> Reduced {
    let mut forms = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    let mut groups: Vec<(Vec<f64>, Vec<usize>)> = Vec::new();
    for (i, rho) in problem.agents.iter().enumerate() {
        if rho.is_belief_expectation() {
            let d = rho.belief().density();
            match groups.iter_mut().find(|(g, _)| g.as_slice() == d) {
                Some((_, idx)) => idx.push(i),
                None => groups.push((d.to_vec(), vec![i])),
            }
        } else {
            forms.push(member_forms(rho).expect("validated at construction"));
            members.push(vec![i]);
        }
    }
    for (_, idx) in groups {
        forms.push(member_forms(&problem.agents[idx[0]]).expect("validated at construction"));
        members.push(idx);
    }
    Reduced { forms, members }
}

/// Minimizes `Σ_i ρ_i(X_i)` over locally comonotone allocations of the
/// target with intercepts in `[−M, M]`.
pub fn solve(problem: &SharingProblem, options: &SolveOptions) -> Result<SharingSolution, SharingError> {
    let bound = options.box_bound.unwrap_or_else(|| problem.default_box());
    if !(bound.is_finite() && bound > 0.0) {
        return Err(SharingError::InvalidBox(bound));
    }
    let x = &problem.target;
    let reduced = reduce(problem);
    let m = reduced.forms.len();
    let layout = Layout::new(&problem.space, x, m, bound);

    let (theta, method, chosen) = if m == 1 {
        // One effective agent: it carries X. Its best member is irrelevant
        // to the allocation; the selection records the minimizing one.
        let values: Vec<f64> = reduced.forms[0].iter().map(|f| f.value(x)).collect();
        let j = argmin_first(&values);
        let mut theta = vec![0.0; layout.dim];
        for bl in &layout.blocks {
            theta[bl.c[0]] = bl.support[0];
            for (ak, &gap) in bl.a.iter().zip(&bl.gaps) {
                theta[ak[0]] = gap;
            }
        }
        (theta, SolveMethod::Trivial, vec![j])
    } else {
        let selections = enumerate_selections(&reduced.forms)?;
        let results: Vec<Result<(f64, Vec<f64>, SolveMethod), SharingError>> = selections
            .par_iter()
            .map(|sel| {
                let forms: Vec<&NormalForm> =
                    sel.iter().enumerate().map(|(i, &j)| &reduced.forms[i][j]).collect();
                solve_selection(&layout, &forms, options)
            })
            .collect();
        let mut best: Option<(f64, Vec<f64>, SolveMethod, usize)> = None;
        for (s, r) in results.into_iter().enumerate() {
            let (v, theta, method) = r?;
            let better = match &best {
                None => true,
                Some((bv, ..)) => v < bv - options.tolerance * (1.0 + bv.abs()),
            };
            if better {
                best = Some((v, theta, method, s));
            }
        }
        let (_, theta, method, s) = best.expect("at least one selection");
        (theta, method, selections[s].clone())
    };

    let intercept_norm = layout.intercept_norm(&theta);
    let reduced_scheme = layout.scheme(&theta);
    let scheme = expand_scheme(&reduced_scheme, &reduced.members, problem.agents.len());
    let allocation = realize(&scheme, x, &problem.space)?;
    let per_agent_risk = problem
        .agents
        .iter()
        .zip(&allocation.parts)
        .map(|(rho, part)| rho.evaluate(part))
        .collect::<Result<Vec<_>, _>>()?;
    let total_risk = per_agent_risk.iter().sum();
    let mut selection = vec![0; problem.agents.len()];
    for (r, idx) in reduced.members.iter().enumerate() {
        for &i in idx {
            selection[i] = chosen[r];
        }
    }

    let (precheck, certificate) = if options.certify {
        let pre = precheck::precheck(problem, options.seed)?;
        let z = pre
            .densities
            .iter()
            .flatten()
            .next()
            .cloned()
            .unwrap_or_else(|| problem.agents[0].belief().density().to_vec());
        let cert = certificate(problem, &z)?;
        (Some(pre), Some(cert))
    } else {
        (None, None)
    };

    Ok(SharingSolution {
        allocation,
        total_risk,
        per_agent_risk,
        scheme,
        selection,
        method,
        box_bound: bound,
        intercept_norm,
        precheck,
        certificate,
    })
}

/// Weak-duality certificate for the density `z`.
pub fn certificate(problem: &SharingProblem, z: &[f64]) -> Result<Certificate, SharingError> {
    let mut sum = ConjugateValue::Finite(0.0);
    for rho in &problem.agents {
        let c = rho.conjugate(z)?.conjugate_value;
        sum = match (sum, c) {
            (ConjugateValue::Finite(a), ConjugateValue::Finite(b)) => ConjugateValue::Finite(a + b),
            _ => ConjugateValue::Infinite,
        };
    }
    let p = problem.space.weights();
    let ezx: f64 = z.iter().zip(&problem.target).zip(p).map(|((a, b), w)| a * b * w).sum();
    let lower_bound = match sum {
        ConjugateValue::Finite(s) => ezx - s,
        ConjugateValue::Infinite => f64::NEG_INFINITY,
    };
    Ok(Certificate {
        density: z.to_vec(),
        conjugate_sum: sum,
        lower_bound,
    })
}

fn argmin_first(values: &[f64]) -> usize {
    let mut j = 0;
    for (k, v) in values.iter().enumerate() {
        if *v < values[j] {
            j = k;
        }
    }
    j
}

/// All member selections in lexicographic order.
fn enumerate_selections(forms: &[Vec<NormalForm>]) -> Result<Vec<Vec<usize>>, SharingError> {
    let count = forms
        .iter()
        .try_fold(1usize, |acc, f| acc.checked_mul(f.len()))
        .unwrap_or(usize::MAX);
    if count > MAX_SELECTIONS {
        return Err(SharingError::TooManySelections(count));
    }
    let mut out = vec![vec![]];
    for f in forms {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (0..f.len()).map(move |j| {
                    let mut s = prefix.clone();
                    s.push(j);
                    s
                })
            })
            .collect();
    }
    Ok(out)
}

/// Splits each merged agent's functions equally among its members.
fn expand_scheme(reduced: &ComonotoneScheme, members: &[Vec<usize>], n: usize) -> ComonotoneScheme {
    let mut owner = vec![(0usize, 1.0f64); n];
    for (r, idx) in members.iter().enumerate() {
        let share = 1.0 / idx.len() as f64;
        for &i in idx {
            owner[i] = (r, share);
        }
    }
    ComonotoneScheme {
        blocks: reduced
            .blocks
            .iter()
            .map(|bs| BlockScheme {
                support: bs.support.clone(),
                intercepts: owner.iter().map(|&(r, s)| s * bs.intercepts[r]).collect(),
                increments: owner
                    .iter()
                    .map(|&(r, s)| bs.increments[r].iter().map(|a| s * a).collect())
                    .collect(),
            })
            .collect(),
    }
}

/// Objective of one selection at `θ`.
pub(crate) fn objective(layout: &Layout, forms: &[&NormalForm], theta: &[f64]) -> f64 {
    forms
        .iter()
        .enumerate()
        .map(|(i, f)| f.value(&layout.values(theta, i)))
        .sum()
}

fn solve_selection(
    layout: &Layout,
    forms: &[&NormalForm],
    options: &SolveOptions,
) -> Result<(f64, Vec<f64>, SolveMethod), SharingError> {
    let (theta, method) = if forms.iter().all(|f| f.is_polyhedral()) {
        (solve_linear(layout, forms, options)?, SolveMethod::Linear)
    } else if forms.iter().all(|f| f.is_smooth()) {
        (optim::spg(layout, forms, options), SolveMethod::Gradient)
    } else {
        (optim::kelley(layout, forms, options)?, SolveMethod::CuttingPlane)
    };
    Ok((objective(layout, forms, &theta), theta, method))
}

fn solve_linear(layout: &Layout, forms: &[&NormalForm], options: &SolveOptions) -> Result<Vec<f64>, SharingError> {
    let mut model = LpModel::new();
    let vars = layout.add_to_model(&mut model);
    let mut obj = Affine::default();
    for (i, f) in forms.iter().enumerate() {
        let ys = layout.affine(&vars, i);
        let e = f.lp_epigraph(&mut model, &ys);
        obj.add_scaled(&e, 1.0);
    }
    model.minimize(&obj);
    let sol = model.solve()?;
    let mut x = sol.x;
    if options.min_norm {
        let slack = 1e-9 * (1.0 + sol.objective.abs());
        model.constrain(&obj, Cmp::Le, sol.objective + slack);
        let r = model.var(0.0, layout.bound);
        for c in layout.intercept_vars() {
            let mut up = Affine::var(vars[c]);
            up.add_term(r, -1.0);
            model.constrain(&up, Cmp::Le, 0.0);
            let mut down = Affine::scaled_var(vars[c], -1.0);
            down.add_term(r, -1.0);
            model.constrain(&down, Cmp::Le, 0.0);
        }
        model.clear_objective();
        model.minimize(&Affine::var(r));
        if let Ok(second) = model.solve() {
            x = second.x;
        }
    }
    let mut theta: Vec<f64> = vars.iter().map(|&v| x[v]).collect();
    // Remove LP round-off so the budget rows hold to machine precision.
    layout.project(&mut theta);
    Ok(theta)
}

/// `E_P[Z X]` under the space's reference weights.
pub fn pairing(space: &ScenarioSpace, z: &[f64], x: &[f64]) -> f64 {
    let zx: Vec<f64> = z.iter().zip(x).map(|(a, b)| a * b).collect();
    dot(space.weights(), &zx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::MeasureKind as K;
    use crate::space::Belief;

    fn uniform(n: usize) -> ScenarioSpace {
        ScenarioSpace::uniform(&vec!["O"; n]).unwrap()
    }

    fn problem(space: &ScenarioSpace, kinds: &[K], x: Vec<f64>) -> SharingProblem {
        let p = Belief::reference(space);
        let agents = kinds
            .iter()
            .map(|k| RiskMeasure::new(k.clone(), p.clone()).unwrap())
            .collect();
        SharingProblem::new(space.clone(), agents, x).unwrap()
    }

    #[test]
    fn single_agent_takes_everything() {
        let s = uniform(4);
        let x = vec![1.0, -2.0, 0.5, 3.0];
        let pr = problem(&s, &[K::es(0.5)], x.clone());
        let sol = solve(&pr, &SolveOptions::default()).unwrap();
        assert_eq!(sol.allocation.parts[0].0, x);
        assert!((sol.total_risk - 2.0).abs() < 1e-12);
        assert_eq!(sol.method, SolveMethod::Trivial);
    }

    #[test]
    fn two_es_agents_share_at_the_smaller_level() {
        let s = uniform(8);
        let x: Vec<f64> = (0..8).map(|k| ((k * 5) % 8) as f64 - 3.0).collect();
        let pr = problem(&s, &[K::es(0.25), K::es(0.5)], x.clone());
        let sol = solve(&pr, &SolveOptions::default()).unwrap();
        let es = RiskMeasure::new(K::es(0.25), Belief::reference(&s)).unwrap();
        assert!((sol.total_risk - es.evaluate(&x).unwrap()).abs() < 1e-9);
        assert!(sol.allocation.is_exact_split(&x));
        let cert = sol.certificate.unwrap();
        assert!(sol.total_risk >= cert.lower_bound - 1e-9);
    }

    #[test]
    fn var_agent_is_rejected() {
        let s = uniform(4);
        let p = Belief::reference(&s);
        let agents = vec![
            RiskMeasure::new(K::ValueAtRisk { level: 0.5 }, p.clone()).unwrap(),
            RiskMeasure::expectation(p),
        ];
        let err = SharingProblem::new(s, agents, vec![0.0; 4]).unwrap_err();
        assert!(matches!(err, SharingError::NonConsistentAgent { agent: 0, .. }));
    }

    #[test]
    fn expectation_agents_with_common_belief_split_equally() {
        let s = uniform(4);
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let pr = problem(&s, &[K::EssentialSup, K::Expectation, K::Expectation], x.clone());
        let sol = solve(&pr, &SolveOptions::default()).unwrap();
        assert!((sol.total_risk - 2.5).abs() < 1e-9);
        for (a, b) in sol.allocation.parts[1].0.iter().zip(&sol.allocation.parts[2].0) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn min_of_picks_the_better_member() {
        let s = uniform(4);
        let x = vec![0.0, 0.0, 0.0, 4.0];
        let rho1 = K::min_of(vec![K::shifted(K::Expectation, 1.0), K::EssentialSup]);
        let pr = problem(&s, &[rho1, K::EssentialSup], x);
        let sol = solve(&pr, &SolveOptions::default()).unwrap();
        // E[X] + 1 = 2 beats esssup = 4.
        assert!((sol.total_risk - 2.0).abs() < 1e-9, "{}", sol.total_risk);
        assert_eq!(sol.selection[0], 0);
    }

    #[test]
    fn selections_enumerate_lexicographically() {
        let s = uniform(2);
        let nf = NormalForm::of(&K::Expectation, &Belief::reference(&s)).unwrap();
        let sel = enumerate_selections(&[vec![nf.clone(), nf.clone()], vec![nf.clone(), nf]]).unwrap();
        assert_eq!(sel, vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]);
    }
}
