//! Capital requirements with multidimensional security markets.
//!
//! A [`RiskMeasurementRegime`] pairs an acceptance set `{ρ ≤ 0}` with a
//! finite security basis priced by a shared density `Q*`. Its capital
//! requirement is `η(X) = inf{E[Q*Z] : Z ∈ S, X − Z accepted}`; for several
//! regimes the global requirement is the infimal convolution of the `η_i`,
//! computed jointly over the combined market and decomposed as
//! `X_i = A_i + N_i + η(X)U_i` with accepted `A_i` and a zero-price `N = ΣN_i`.

use crate::catalog::normal::{entropic, NormalForm};
use crate::catalog::{CatalogError, RiskMeasure, ACCEPT_TOL};
use crate::diagnostics::{compatibility_check, CompatibilityReport, DiagnosticsError};
use crate::lp::{Affine, Cmp, LpError, LpModel};
use crate::sharing::{self, SharingError, SharingProblem, SharingSolution, SolveOptions};
use crate::space::{dot, sup_norm, Allocation, RandomVariable, ScenarioSpace};
use thiserror::Error;

/// Tolerance on prices of kernel vectors and on `π(U) = 1`.
pub const PRICE_TOL: f64 = 1e-12;
const KELLEY_ROUNDS: usize = 500;
const FEASIBILITY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CapitalError {
    #[error("regime {regime}: {reason}")]
    InvalidRegime { regime: usize, reason: String },
    #[error("regimes price with different densities")]
    PricingMismatch,
    #[error("assumption violated: {0}")]
    AssumptionViolated(String),
    #[error("no security combination with unit price is available")]
    NoUnitPriceVector,
    #[error("unit vector invalid: {0}")]
    InvalidUnitVector(String),
    #[error("acceptance measure `{0}` has no convex decomposition the solver can use")]
    UnsupportedAcceptance(String),
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error(transparent)]
    Sharing(#[from] SharingError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
}

/// Acceptance set, security basis and linear pricing `p(Z) = E[Q*Z]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskMeasurementRegime {
    acceptance: RiskMeasure,
    securities: Vec<Vec<f64>>,
    pricing: Vec<f64>,
    weights: Vec<f64>,
}

impl RiskMeasurementRegime {
    pub fn new(
        space: &ScenarioSpace,
        acceptance: RiskMeasure,
        securities: Vec<Vec<f64>>,
        pricing: Vec<f64>,
    ) -> Result<Self, CapitalError> {
        let bad = |reason: String| CapitalError::InvalidRegime { regime: 0, reason };
        let n = space.len();
        if !acceptance.is_consistent() {
            return Err(bad(format!("acceptance `{}` is not consistent", acceptance.label())));
        }
        if acceptance.belief().len() != n || pricing.len() != n {
            return Err(bad("length mismatch with the space".into()));
        }
        if securities.is_empty() {
            return Err(bad("empty security basis".into()));
        }
        if securities.iter().any(|s| s.len() != n || s.iter().any(|v| !v.is_finite())) {
            return Err(bad("security with wrong length or non-finite entries".into()));
        }
        if pricing.iter().any(|q| !(q.is_finite() && *q >= 0.0)) {
            return Err(bad("pricing density must be finite and nonnegative".into()));
        }
        let mass = dot(space.weights(), &pricing);
        if (mass - 1.0).abs() > 1e-9 {
            return Err(bad(format!("pricing density has mass {mass}")));
        }
        let regime = Self {
            acceptance,
            securities,
            pricing,
            weights: space.weights().to_vec(),
        };
        let positive = regime
            .securities
            .iter()
            .any(|s| s.iter().all(|v| *v >= 0.0) && s.iter().any(|v| *v > 0.0) && regime.price(s) > 0.0);
        if !positive {
            return Err(bad("no nonnegative security with positive price".into()));
        }
        member_forms(&regime.acceptance)?;
        Ok(regime)
    }

    /// Cash `1` as the only security.
    pub fn cash_only(space: &ScenarioSpace, acceptance: RiskMeasure, pricing: Vec<f64>) -> Result<Self, CapitalError> {
        Self::new(space, acceptance, vec![vec![1.0; space.len()]], pricing)
    }

    pub fn acceptance(&self) -> &RiskMeasure {
        &self.acceptance
    }

    pub fn securities(&self) -> &[Vec<f64>] {
        &self.securities
    }

    pub fn pricing(&self) -> &[f64] {
        &self.pricing
    }

    /// `p(Z) = E[Q*Z]`.
    pub fn price(&self, z: &[f64]) -> f64 {
        let qz: Vec<f64> = self.pricing.iter().zip(z).map(|(a, b)| a * b).collect();
        dot(&self.weights, &qz)
    }

    pub fn security_prices(&self) -> Vec<f64> {
        self.securities.iter().map(|s| self.price(s)).collect()
    }

    /// Whether every security is a multiple of the constant.
    pub fn is_cash_only(&self) -> bool {
        self.securities
            .iter()
            .all(|s| s.iter().all(|v| (v - s[0]).abs() <= 1e-15 * s[0].abs().max(1.0)))
    }

    /// Regime finiteness: no security direction with positive price stays
    /// accepted forever, so `sup{p(Z) : X + Z accepted}` is finite for
    /// every `X`. Decided by an LP over the recession cone of each member.
    pub fn is_finite(&self) -> Result<bool, CapitalError> {
        let prices = self.security_prices();
        for nf in member_forms(&self.acceptance)? {
            let mut model = LpModel::new();
            let vars: Vec<usize> = self.securities.iter().map(|_| model.var(-1.0, 1.0)).collect();
            let dirs = combination(&vars, &self.securities, None, 1.0);
            let rec = nf.lp_recession(&mut model, &dirs);
            model.constrain(&rec, Cmp::Le, 0.0);
            let mut obj = Affine::default();
            for (&v, &p) in vars.iter().zip(&prices) {
                obj.add_term(v, -p);
            }
            model.minimize(&obj);
            let sol = model.solve()?;
            if -sol.objective > 1e-9 {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

fn member_forms(rho: &RiskMeasure) -> Result<Vec<NormalForm>, CapitalError> {
    sharing::member_forms(rho).map_err(|()| CapitalError::UnsupportedAcceptance(rho.label()))
}

/// `base + sign·Σ_j z_j s_j` atom by atom as affine expressions.
fn combination(vars: &[usize], basis: &[Vec<f64>], base: Option<&[f64]>, sign: f64) -> Vec<Affine> {
    let n = basis[0].len();
    (0..n)
        .map(|k| {
            let mut e = Affine::constant(base.map_or(0.0, |b| b[k]));
            for (&v, s) in vars.iter().zip(basis) {
                if s[k] != 0.0 {
                    e.add_term(v, sign * s[k]);
                }
            }
            e
        })
        .collect()
}

/// Capital requirement with the securities used.
#[derive(Debug, Clone, PartialEq)]
pub struct Requirement {
    /// `+∞` when no security in the coordinate box makes `X` acceptable.
    pub value: f64,
    pub coordinates: Option<Vec<f64>>,
    /// Member of a finite minimum whose acceptance set was used.
    pub selection: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapitalOptions {
    /// Bound on security coordinates; `None` means
    /// `8(‖X‖∞ + 1)/min |price|`.
    pub coordinate_box: Option<f64>,
    pub solve: SolveOptions,
}

impl Default for CapitalOptions {
    fn default() -> Self {
        Self {
            coordinate_box: None,
            solve: SolveOptions {
                certify: false,
                ..SolveOptions::default()
            },
        }
    }
}

fn default_box(x: &[f64], prices: &[f64]) -> f64 {
    let smallest = prices
        .iter()
        .filter(|p| p.abs() > PRICE_TOL)
        .fold(f64::INFINITY, |m, p| m.min(p.abs()));
    let scale = if smallest.is_finite() { 1.0 / smallest } else { 1.0 };
    8.0 * (sup_norm(x) + 1.0) * scale.max(1.0)
}

/// Minimizes the price of `Z = Σ z_j b_j` subject to `X − Z = Σ_i Y_i` with
/// every `Y_i` accepted by its convex member `forms[i]`. Entropic atoms are
/// handled by tangent cuts on the constraint.
struct Program<'a> {
    forms: Vec<&'a NormalForm>,
    basis: &'a [Vec<f64>],
    prices: &'a [f64],
    x: &'a [f64],
    z_box: f64,
}

struct ProgramSolution {
    value: f64,
    z: Vec<f64>,
}

impl Program<'_> {
    fn solve(&self) -> Result<Option<ProgramSolution>, CapitalError> {
        let n = self.forms.len();
        let atoms = self.x.len();
        let mut model = LpModel::new();
        let z: Vec<usize> = self.basis.iter().map(|_| model.var(-self.z_box, self.z_box)).collect();
        let y_box = 4.0 * (sup_norm(self.x) + 1.0)
            + self.z_box * self.basis.iter().map(|b| sup_norm(b)).sum::<f64>();
        // Y_i free for i < n − 1, the last one by subtraction.
        let free: Vec<Vec<usize>> = (0..n - 1)
            .map(|_| (0..atoms).map(|_| model.var(-y_box, y_box)).collect())
            .collect();
        let mut ys: Vec<Vec<Affine>> = free
            .iter()
            .map(|vs| vs.iter().map(|&v| Affine::var(v)).collect())
            .collect();
        let mut last = combination(&z, self.basis, Some(self.x), -1.0);
        for vs in &free {
            for (e, &v) in last.iter_mut().zip(vs) {
                e.add_term(v, -1.0);
            }
        }
        ys.push(last);
        let mut entropic_vars: Vec<(usize, f64, usize)> = Vec::new();
        for (i, nf) in self.forms.iter().enumerate() {
            let mut g = nf.lp_epigraph(&mut model, &ys[i]);
            for &(w, beta) in &nf.entropic {
                let t = model.free_var();
                g.add_term(t, w);
                entropic_vars.push((i, beta, t));
            }
            model.constrain(&g, Cmp::Le, 0.0);
        }
        let mut obj = Affine::default();
        for (&v, &p) in z.iter().zip(self.prices) {
            obj.add_term(v, p);
        }
        model.minimize(&obj);

        let values = |sol: &[f64]| -> Vec<Vec<f64>> {
            ys.iter().map(|y| y.iter().map(|e| e.eval(sol)).collect()).collect()
        };
        // Initial cuts at the equal split of X.
        let start: Vec<Vec<f64>> = (0..n).map(|_| self.x.iter().map(|v| v / n as f64).collect()).collect();
        self.add_cuts(&mut model, &ys, &entropic_vars, &start);
        for _ in 0..KELLEY_ROUNDS {
            let sol = match model.solve() {
                Ok(s) => s,
                Err(LpError::Infeasible) => return Ok(None),
                Err(e) => return Err(e.into()),
            };
            let parts = values(&sol.x);
            let violation = self
                .forms
                .iter()
                .zip(&parts)
                .map(|(nf, y)| nf.value(y))
                .fold(f64::NEG_INFINITY, f64::max);
            if entropic_vars.is_empty() || violation <= FEASIBILITY_TOL {
                return Ok(Some(ProgramSolution {
                    value: sol.objective,
                    z: z.iter().map(|&v| sol.x[v]).collect(),
                }));
            }
            self.add_cuts(&mut model, &ys, &entropic_vars, &parts);
        }
        Ok(None)
    }

    fn add_cuts(&self, model: &mut LpModel, ys: &[Vec<Affine>], atoms: &[(usize, f64, usize)], at: &[Vec<f64>]) {
        for &(i, beta, t) in atoms {
            let y = &at[i];
            let probs = &self.forms[i].probs;
            let value = entropic(probs, y, beta);
            let single = NormalForm {
                probs: probs.clone(),
                reference: self.forms[i].reference.clone(),
                linear: vec![0.0; y.len()],
                tails: vec![],
                entropic: vec![(1.0, beta)],
                constant: 0.0,
            };
            let mut grad = vec![0.0; y.len()];
            single.smooth_gradient(y, &mut grad);
            let mut cut = Affine::constant(value);
            for ((e, &g), &yv) in ys[i].iter().zip(&grad).zip(y) {
                if g != 0.0 {
                    cut.add_scaled(e, g);
                    cut.constant -= g * yv;
                }
            }
            model.constrain_ge(&Affine::var(t), &cut);
        }
    }
}

/// `η(X) = inf{p(Z) : Z ∈ S, X − Z accepted}`; a finite minimum is accepted
/// when one member accepts, so the cheapest member wins.
pub fn eta_single(
    regime: &RiskMeasurementRegime,
    x: &[f64],
    options: &CapitalOptions,
) -> Result<Requirement, CapitalError> {
    let prices = regime.security_prices();
    let z_box = options.coordinate_box.unwrap_or_else(|| default_box(x, &prices));
    let forms = member_forms(&regime.acceptance)?;
    let mut best = Requirement {
        value: f64::INFINITY,
        coordinates: None,
        selection: 0,
    };
    for (j, nf) in forms.iter().enumerate() {
        let program = Program {
            forms: vec![nf],
            basis: &regime.securities,
            prices: &prices,
            x,
            z_box,
        };
        if let Some(sol) = program.solve()? {
            if sol.value < best.value - 1e-12 * (1.0 + sol.value.abs()) {
                best = Requirement {
                    value: sol.value,
                    coordinates: Some(sol.z),
                    selection: j,
                };
            }
        }
    }
    Ok(best)
}

/// Combined market `M = ΣS_i` priced by `Q*`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalMarket {
    /// All regime securities, in regime order.
    pub combined_basis: Vec<Vec<f64>>,
    /// Regime owning each combined coordinate.
    pub owners: Vec<usize>,
    pub pricing: Vec<f64>,
    /// Linearly independent securities spanning `M`, as indices into the
    /// combined basis; the joint program trades only these.
    pub independent: Vec<usize>,
    /// Basis of the zero-price securities in `M`.
    pub kernel_basis: Vec<Vec<f64>>,
}

impl GlobalMarket {
    pub fn new(regimes: &[RiskMeasurementRegime]) -> Result<Self, CapitalError> {
        let first = regimes.first().ok_or(CapitalError::NoUnitPriceVector)?;
        let pricing = first.pricing.clone();
        if regimes
            .iter()
            .any(|r| r.pricing.iter().zip(&pricing).any(|(a, b)| (a - b).abs() > 1e-12))
        {
            return Err(CapitalError::PricingMismatch);
        }
        let mut combined_basis = Vec::new();
        let mut owners = Vec::new();
        for (i, r) in regimes.iter().enumerate() {
            for s in &r.securities {
                combined_basis.push(s.clone());
                owners.push(i);
            }
        }
        let independent = independent_subset(&combined_basis);
        let chosen: Vec<&Vec<f64>> = independent.iter().map(|&j| &combined_basis[j]).collect();
        let prices: Vec<f64> = chosen.iter().map(|s| first.price(s)).collect();
        let pivot = (0..prices.len())
            .max_by(|&a, &b| prices[a].abs().total_cmp(&prices[b].abs()))
            .ok_or(CapitalError::NoUnitPriceVector)?;
        let kernel_basis = chosen
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != pivot)
            .map(|(j, b)| {
                let r = prices[j] / prices[pivot];
                b.iter().zip(chosen[pivot]).map(|(x, y)| x - r * y).collect()
            })
            .collect();
        Ok(Self {
            combined_basis,
            owners,
            pricing,
            independent,
            kernel_basis,
        })
    }

    pub fn dimension(&self) -> usize {
        self.independent.len()
    }
}

/// Indices of a greedy linearly independent selection (modified
/// Gram–Schmidt on copies, relative threshold 1e-10).
fn independent_subset(vectors: &[Vec<f64>]) -> Vec<usize> {
    let mut ortho: Vec<Vec<f64>> = Vec::new();
    let mut chosen = Vec::new();
    for (j, v) in vectors.iter().enumerate() {
        let norm = dot(v, v).sqrt();
        if norm == 0.0 {
            continue;
        }
        let mut r = v.clone();
        for q in &ortho {
            let c = dot(&r, q);
            for (a, b) in r.iter_mut().zip(q) {
                *a -= c * b;
            }
        }
        let rn = dot(&r, &r).sqrt();
        if rn > 1e-10 * norm {
            ortho.push(r.iter().map(|a| a / rn).collect());
            chosen.push(j);
        }
    }
    chosen
}

/// Result of [`verify_assumption`].
#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionReport {
    /// Regimes share one pricing density.
    pub shared_pricing: bool,
    /// Compatibility of the pricing density with each acceptance measure.
    pub pricing_reports: Vec<CompatibilityReport>,
    /// A common compatible density found by search, if any.
    pub common_density: Option<Vec<f64>>,
    pub satisfied: bool,
    pub explanation: String,
}

/// Checks that the shared pricing density is compatible with every
/// acceptance measure, and searches for some common compatible density:
/// the equal mixture of belief densities first, then each belief density and
/// pairwise mixtures.
pub fn verify_assumption(regimes: &[RiskMeasurementRegime]) -> Result<AssumptionReport, CapitalError> {
    if regimes.is_empty() {
        return Err(CapitalError::AssumptionViolated("no regimes".into()));
    }
    let pricing = regimes[0].pricing.clone();
    let shared_pricing = regimes
        .iter()
        .all(|r| r.pricing.iter().zip(&pricing).all(|(a, b)| (a - b).abs() <= 1e-12));
    let mut pricing_reports = Vec::with_capacity(regimes.len());
    for r in regimes {
        pricing_reports.push(check_or_incompatible(&r.acceptance, &pricing)?);
    }
    let common_density = search_common(regimes)?;
    let mut explanation = String::new();
    if !shared_pricing {
        explanation.push_str("regimes price with different densities; ");
    }
    if let Some(k) = pricing.iter().position(|q| *q <= 0.0) {
        explanation.push_str(&format!(
            "pricing density vanishes on atom {k}, so it is not strictly positive and the cone directions supported there have zero price; "
        ));
    }
    for (i, rep) in pricing_reports.iter().enumerate() {
        if !rep.conjugate_finite {
            explanation.push_str(&format!("regime {i}: conjugate infinite at the pricing density; "));
        } else if let Some(u) = &rep.witness {
            explanation.push_str(&format!("regime {i}: zero-price cone direction {u:?}; "));
        }
    }
    let satisfied = shared_pricing && pricing_reports.iter().all(CompatibilityReport::compatible);
    if satisfied {
        explanation = "pricing density is compatible with every acceptance measure".into();
    }
    Ok(AssumptionReport {
        shared_pricing,
        pricing_reports,
        common_density,
        satisfied,
        explanation: explanation.trim_end_matches("; ").to_string(),
    })
}

fn check_or_incompatible(rho: &RiskMeasure, z: &[f64]) -> Result<CompatibilityReport, CapitalError> {
    match compatibility_check(rho, z) {
        Ok(r) => Ok(r),
        Err(DiagnosticsError::ConeOracleUnavailable(_)) => Ok(CompatibilityReport {
            candidate: z.to_vec(),
            conjugate_finite: rho.conjugate(z)?.conjugate_value.is_finite(),
            cone_kernel_trivial: false,
            witness: None,
        }),
        Err(e) => Err(e.into()),
    }
}

fn search_common(regimes: &[RiskMeasurementRegime]) -> Result<Option<Vec<f64>>, CapitalError> {
    let densities: Vec<Vec<f64>> = regimes.iter().map(|r| r.acceptance.belief().density().to_vec()).collect();
    let n = densities.len() as f64;
    let mut candidates = vec![(0..densities[0].len())
        .map(|k| densities.iter().map(|d| d[k]).sum::<f64>() / n)
        .collect::<Vec<f64>>()];
    candidates.extend(densities.iter().cloned());
    for a in 0..densities.len() {
        for b in a + 1..densities.len() {
            for lambda in [0.25, 0.75] {
                candidates.push(crate::diagnostics::mix(&densities[a], &densities[b], lambda));
            }
        }
    }
    'outer: for z in candidates {
        for r in regimes {
            if !check_or_incompatible(&r.acceptance, &z)?.compatible() {
                continue 'outer;
            }
        }
        return Ok(Some(z));
    }
    Ok(None)
}

/// Decomposition `X_i = A_i + N_i + ηU_i` with `η = Ση_i(X_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalAllocation {
    pub eta: f64,
    /// Coordinates of the optimal `Z*` in the combined basis.
    pub coordinates: Vec<f64>,
    pub parts: Allocation,
    pub accepted: Vec<Vec<f64>>,
    pub kernel_parts: Vec<Vec<f64>>,
    pub unit: Vec<Vec<f64>>,
    /// `η_i(X_i)` recomputed per regime.
    pub eta_parts: Vec<f64>,
    /// `|Ση_i(X_i) − η|`.
    pub shape_gap: f64,
    /// `π(N)`.
    pub kernel_price: f64,
    /// Sharing solution of the accepted part `X − Z*`.
    pub sharing: SharingSolution,
}

/// Default `U`: cash on the first regime offering it, else the first
/// nonnegative security of positive price scaled to unit price.
pub fn default_unit(regimes: &[RiskMeasurementRegime]) -> Result<Vec<Vec<f64>>, CapitalError> {
    let n = regimes.first().map_or(0, |r| r.pricing.len());
    let mut unit = vec![vec![0.0; n]; regimes.len()];
    let is_cash = |s: &[f64]| s.iter().all(|v| (v - s[0]).abs() <= 1e-15 * s[0].abs().max(1.0)) && s[0] != 0.0;
    for pass in 0..2 {
        for (i, r) in regimes.iter().enumerate() {
            for s in &r.securities {
                let ok = if pass == 0 {
                    is_cash(s)
                } else {
                    s.iter().all(|v| *v >= 0.0) && r.price(s) > PRICE_TOL
                };
                if ok {
                    let p = r.price(s);
                    if p.abs() > PRICE_TOL {
                        unit[i] = s.iter().map(|v| v / p).collect();
                        return Ok(unit);
                    }
                }
            }
        }
    }
    Err(CapitalError::NoUnitPriceVector)
}

fn residual_in_span(v: &[f64], basis: &[Vec<f64>]) -> f64 {
    let mut ortho: Vec<Vec<f64>> = Vec::new();
    for &j in &independent_subset(basis) {
        let mut r = basis[j].clone();
        for q in &ortho {
            let c = dot(&r, q);
            for (a, x) in r.iter_mut().zip(q) {
                *a -= c * x;
            }
        }
        let rn = dot(&r, &r).sqrt();
        ortho.push(r.iter().map(|a| a / rn).collect());
    }
    let mut r = v.to_vec();
    for q in &ortho {
        let c = dot(&r, q);
        for (a, x) in r.iter_mut().zip(q) {
            *a -= c * x;
        }
    }
    sup_norm(&r)
}

/// Global requirement `η = □η_i` at `X` and its decomposition.
pub fn eta_global(
    regimes: &[RiskMeasurementRegime],
    space: &ScenarioSpace,
    x: &[f64],
    unit: Option<Vec<Vec<f64>>>,
    options: &CapitalOptions,
) -> Result<GlobalAllocation, CapitalError> {
    let report = verify_assumption(regimes)?;
    if !report.satisfied {
        return Err(CapitalError::AssumptionViolated(report.explanation));
    }
    let market = GlobalMarket::new(regimes)?;
    let n = regimes.len();
    let unit = match unit {
        Some(u) => u,
        None => default_unit(regimes)?,
    };
    if unit.len() != n {
        return Err(CapitalError::InvalidUnitVector(format!("{} parts for {n} regimes", unit.len())));
    }
    for (i, (u, r)) in unit.iter().zip(regimes).enumerate() {
        if u.len() != x.len() || residual_in_span(u, &r.securities) > 1e-9 * (1.0 + sup_norm(u)) {
            return Err(CapitalError::InvalidUnitVector(format!("part {i} is not a security of its regime")));
        }
    }
    let total_unit: Vec<f64> = (0..x.len()).map(|k| unit.iter().map(|u| u[k]).sum()).collect();
    if (regimes[0].price(&total_unit) - 1.0).abs() > 1e-9 {
        return Err(CapitalError::InvalidUnitVector("price of U differs from 1".into()));
    }

    let agents: Vec<RiskMeasure> = regimes.iter().map(|r| r.acceptance.clone()).collect();
    let all_cash = regimes.iter().all(RiskMeasurementRegime::is_cash_only);
    let traded: Vec<Vec<f64>> = market.independent.iter().map(|&j| market.combined_basis[j].clone()).collect();
    let prices: Vec<f64> = traded.iter().map(|s| regimes[0].price(s)).collect();

    // Optimal Z* and the remaining accepted part W = X − Z*.
    let (eta, coordinates, sharing_sol) = if all_cash {
        let problem = SharingProblem::new(space.clone(), agents.clone(), x.to_vec())?;
        let sol = sharing::solve(&problem, &options.solve)?;
        let eta = sol.total_risk;
        // Z* = η·1 carried by the first regime's cash security.
        let mut coords = vec![0.0; market.combined_basis.len()];
        coords[0] = eta / market.combined_basis[0][0];
        (eta, coords, sol)
    } else {
        let z_box = options.coordinate_box.unwrap_or_else(|| default_box(x, &prices));
        let forms: Vec<Vec<NormalForm>> = regimes
            .iter()
            .map(|r| member_forms(&r.acceptance))
            .collect::<Result<_, _>>()?;
        let mut best: Option<ProgramSolution> = None;
        for sel in selections(&forms) {
            let program = Program {
                forms: sel.iter().enumerate().map(|(i, &j)| &forms[i][j]).collect(),
                basis: &traded,
                prices: &prices,
                x,
                z_box,
            };
            if let Some(s) = program.solve()? {
                if best.as_ref().map_or(true, |b| s.value < b.value - 1e-12 * (1.0 + b.value.abs())) {
                    best = Some(s);
                }
            }
        }
        let best = best.ok_or_else(|| CapitalError::AssumptionViolated("no accepted decomposition in the box".into()))?;
        let z_star = combine(&best.z, &traded);
        let w: Vec<f64> = x.iter().zip(&z_star).map(|(a, b)| a - b).collect();
        let problem = SharingProblem::new(space.clone(), agents.clone(), w)?;
        let sol = sharing::solve(&problem, &options.solve)?;
        let mut coords = vec![0.0; market.combined_basis.len()];
        for (&j, z) in market.independent.iter().zip(&best.z) {
            coords[j] = *z;
        }
        (best.value, coords, sol)
    };

    // Accepted parts: cash-adjust the sharing allocation so each is accepted.
    let sol_parts: Vec<Vec<f64>> = sharing_sol.allocation.parts.iter().map(|p| p.0.clone()).collect();
    let w: Vec<f64> = (0..x.len()).map(|k| sol_parts.iter().map(|p| p[k]).sum()).collect();
    let mut accepted: Vec<Vec<f64>> = Vec::with_capacity(n);
    let shift_sum: f64 = if all_cash { eta } else { 0.0 };
    for i in 1..n {
        let r = sharing_sol.per_agent_risk[i];
        accepted.push(sol_parts[i].iter().map(|v| v - r).collect());
    }
    let rest: Vec<f64> = (0..x.len())
        .map(|k| w[k] - shift_sum - accepted.iter().map(|a| a[k]).sum::<f64>())
        .collect();
    accepted.insert(0, rest);

    // Kernel parts N_i = Σ_{j ∈ S_i} z_j b_j − ηU_i.
    let kernel_parts: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let own: Vec<f64> = (0..x.len())
                .map(|k| {
                    market
                        .combined_basis
                        .iter()
                        .zip(&market.owners)
                        .zip(&coordinates)
                        .filter(|((_, &o), _)| o == i)
                        .map(|((b, _), z)| z * b[k])
                        .sum::<f64>()
                })
                .collect();
            own.iter().zip(&unit[i]).map(|(a, u)| a - eta * u).collect()
        })
        .collect();
    let leading: Vec<Vec<f64>> = (0..n - 1)
        .map(|i| {
            (0..x.len())
                .map(|k| accepted[i][k] + kernel_parts[i][k] + eta * unit[i][k])
                .collect()
        })
        .collect();
    let parts = Allocation::completing(x, leading);
    // The last accepted part absorbs the rounding of the exact split.
    let last = n - 1;
    accepted[last] = (0..x.len())
        .map(|k| parts.parts[last].0[k] - kernel_parts[last][k] - eta * unit[last][k])
        .collect();

    let n_total: Vec<f64> = (0..x.len()).map(|k| kernel_parts.iter().map(|p| p[k]).sum()).collect();
    let kernel_price = regimes[0].price(&n_total);
    let mut eta_parts = Vec::with_capacity(n);
    for (r, p) in regimes.iter().zip(&parts.parts) {
        let opts = CapitalOptions {
            coordinate_box: options.coordinate_box,
            ..options.clone()
        };
        eta_parts.push(eta_single(r, &p.0, &opts)?.value);
    }
    let shape_gap = (eta_parts.iter().sum::<f64>() - eta).abs();
    Ok(GlobalAllocation {
        eta,
        coordinates,
        parts,
        accepted,
        kernel_parts,
        unit,
        eta_parts,
        shape_gap,
        kernel_price,
        sharing: sharing_sol,
    })
}

fn combine(z: &[f64], basis: &[Vec<f64>]) -> Vec<f64> {
    let n = basis[0].len();
    (0..n).map(|k| z.iter().zip(basis).map(|(c, b)| c * b[k]).sum()).collect()
}

fn selections(forms: &[Vec<NormalForm>]) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for f in forms {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..f.len()).map(move |j| {
                    let mut s = p.clone();
                    s.push(j);
                    s
                })
            })
            .collect();
    }
    out
}

/// Accepted within [`ACCEPT_TOL`].
pub fn is_accepted(rho: &RiskMeasure, y: &[f64]) -> Result<bool, CapitalError> {
    Ok(rho.evaluate(y)? <= ACCEPT_TOL)
}

/// Convenience wrapper turning rows into random variables.
pub fn as_variables(rows: &[Vec<f64>]) -> Vec<RandomVariable> {
    rows.iter().cloned().map(RandomVariable).collect()
}
