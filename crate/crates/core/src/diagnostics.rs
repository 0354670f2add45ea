//! Admissibility and compatibility tests.
//!
//! A density `Z` is compatible with `ρ` when `ρ*(Z) < ∞` and the only
//! direction `U` of the asymptotic cone with `E[ZU] = 0` is zero. Every
//! catalog cone is the zero sublevel set of a polyhedral recession function
//! (entropic atoms recede like the essential supremum), so the kernel search
//! is an exact LP over `U ∈ [−1, 1]^Ω`.

use crate::catalog::normal::NormalForm;
use crate::catalog::{CatalogError, MeasureKind, RiskMeasure, ACCEPT_TOL};
use crate::lp::{Affine, Cmp, LpModel};
use crate::space::{dot, ScenarioSpace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// LP optimum above which a kernel direction counts as nonzero.
const KERNEL_TOL: f64 = 1e-7;

/// Number of random probes used by [`is_admissible`].
pub const RANDOM_PROBES: usize = 50;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiagnosticsError {
    #[error("no asymptotic-cone oracle for `{0}`")]
    ConeOracleUnavailable(String),
    #[error("dual domain of `{0}` has no box description")]
    DomainNotPolyhedral(String),
    #[error("mixing weight {0} is outside (0, 1]")]
    InvalidLambda(f64),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompatibilityReport {
    pub candidate: Vec<f64>,
    pub conjugate_finite: bool,
    pub cone_kernel_trivial: bool,
    /// Nonzero `U` in the asymptotic cone with `E[candidate·U] = 0`, scaled
    /// to unit sup-norm.
    pub witness: Option<Vec<f64>>,
}

impl CompatibilityReport {
    pub fn compatible(&self) -> bool {
        self.conjugate_finite && self.cone_kernel_trivial
    }
}

pub fn compatibility_check(
    rho: &RiskMeasure,
    z: &[f64],
) -> Result<CompatibilityReport, DiagnosticsError> {
    let conjugate_finite = rho.conjugate(z)?.conjugate_value.is_finite();
    let witness = if rho.is_star_shaped() {
        limit_kernel_witness(rho.kind(), rho, z)?
    } else {
        ray_kernel_witness(rho.kind(), rho, z)?
    };
    Ok(CompatibilityReport {
        candidate: z.to_vec(),
        conjugate_finite,
        cone_kernel_trivial: witness.is_none(),
        witness,
    })
}

/// Kernel search in the cone generated by the recession functions: a finite
/// minimum contributes the union of its member cones.
fn limit_kernel_witness(
    kind: &MeasureKind,
    rho: &RiskMeasure,
    z: &[f64],
) -> Result<Option<Vec<f64>>, DiagnosticsError> {
    if let Some(nf) = NormalForm::of(kind, rho.belief()) {
        return Ok(convex_kernel_witness(&nf, z, |_| true));
    }
    match kind {
        MeasureKind::MinOf { members } => {
            for m in members {
                if let Some(u) = limit_kernel_witness(m, rho, z)? {
                    return Ok(Some(u));
                }
            }
            Ok(None)
        }
        MeasureKind::StarHull { inner } | MeasureKind::Shifted { inner, .. } => {
            limit_kernel_witness(inner, rho, z)
        }
        _ => Err(DiagnosticsError::ConeOracleUnavailable(kind.label())),
    }
}

/// Kernel search among accepted rays of a minimum with shifted members.
/// Unshifted members accept their whole recession cone; directions from
/// shifted members only count once the full measure passes a ray test.
fn ray_kernel_witness(
    kind: &MeasureKind,
    rho: &RiskMeasure,
    z: &[f64],
) -> Result<Option<Vec<f64>>, DiagnosticsError> {
    let members: Vec<&MeasureKind> = match kind {
        MeasureKind::MinOf { members } => members.iter().collect(),
        MeasureKind::Shifted { inner, .. } => return ray_kernel_witness(inner, rho, z),
        _ => return Err(DiagnosticsError::ConeOracleUnavailable(kind.label())),
    };
    let mut shifted = Vec::new();
    for m in members {
        let nf = NormalForm::of(m, rho.belief())
            .ok_or_else(|| DiagnosticsError::ConeOracleUnavailable(m.label()))?;
        if nf.constant == 0.0 {
            if let Some(u) = convex_kernel_witness(&nf, z, |_| true) {
                return Ok(Some(u));
            }
        } else {
            shifted.push(nf);
        }
    }
    for nf in shifted {
        let accepted = |u: &[f64]| {
            rho.asymptotic_cone_contains(u)
                .map(|v| v.contains)
                .unwrap_or(false)
        };
        if let Some(u) = convex_kernel_witness(&nf, z, accepted) {
            return Ok(Some(u));
        }
    }
    Ok(None)
}

fn convex_kernel_witness(
    nf: &NormalForm,
    z: &[f64],
    accept: impl Fn(&[f64]) -> bool,
) -> Option<Vec<f64>> {
    let n = z.len();
    let mut base = LpModel::new();
    let us: Vec<usize> = (0..n).map(|_| base.var(-1.0, 1.0)).collect();
    let ua: Vec<Affine> = us.iter().map(|&u| Affine::var(u)).collect();
    let rec = nf.lp_recession(&mut base, &ua);
    base.constrain(&rec, Cmp::Le, 0.0);
    let mut pairing = Affine::default();
    for k in 0..n {
        pairing.add_term(us[k], nf.reference[k] * z[k]);
    }
    base.constrain(&pairing, Cmp::Eq, 0.0);
    for k in 0..n {
        for sign in [1.0, -1.0] {
            let mut model = base.clone();
            model.minimize(&Affine::scaled_var(us[k], -sign));
            let Ok(sol) = model.solve() else { continue };
            if -sol.objective > KERNEL_TOL {
                let raw: Vec<f64> = us.iter().map(|&u| sol.x[u]).collect();
                let u = tidy_witness(nf, z, raw);
                if accept(&u) {
                    return Some(u);
                }
            }
        }
    }
    None
}

/// Replaces an LP vertex by its average over the joint level sets of the
/// belief density and `z` when that stays a valid nonzero witness, then
/// scales to unit sup-norm.
fn tidy_witness(nf: &NormalForm, z: &[f64], raw: Vec<f64>) -> Vec<f64> {
    let n = z.len();
    let key = |k: usize| {
        let d = nf.probs[k] / nf.reference[k];
        ((d * 1e10).round() as i64, (z[k] * 1e10).round() as i64)
    };
    let mut averaged = vec![0.0; n];
    for k in 0..n {
        let (mut num, mut den) = (0.0, 0.0);
        for j in 0..n {
            if key(j) == key(k) {
                num += nf.reference[j] * raw[j];
                den += nf.reference[j];
            }
        }
        averaged[k] = num / den;
    }
    let valid = |u: &[f64]| {
        let norm = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        norm > KERNEL_TOL
            && nf.recession(u) <= ACCEPT_TOL * norm
            && pairing(nf, z, u).abs() <= ACCEPT_TOL * norm
    };
    let chosen = if valid(&averaged) { averaged } else { raw };
    let norm = chosen.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    chosen.iter().map(|v| clean(v / norm)).collect()
}

fn pairing(nf: &NormalForm, z: &[f64], u: &[f64]) -> f64 {
    nf.reference.iter().zip(z).zip(u).map(|((p, zk), uk)| p * zk * uk).sum()
}

/// Snaps values within rounding of a simple rational back onto it.
fn clean(v: f64) -> f64 {
    for den in 1..=12 {
        let r = (v * den as f64).round() / den as f64;
        if (v - r).abs() <= 1e-9 {
            return r;
        }
    }
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmissibilityReport {
    pub admissible: bool,
    /// Probe with `|ρ(X) − E_Q[X]|` above tolerance.
    pub evidence: Option<Vec<f64>>,
    pub gap: f64,
    /// The compatibility report for `dQ/dP`, which must agree.
    pub belief_density: CompatibilityReport,
}

/// Decides `ρ ≠ E_Q` on atom indicators, density level-set indicators and
/// [`RANDOM_PROBES`] seeded random positions.
pub fn is_admissible(rho: &RiskMeasure, seed: u64) -> Result<AdmissibilityReport, DiagnosticsError> {
    let belief = rho.belief();
    let n = belief.len();
    let mut probes: Vec<Vec<f64>> = (0..n)
        .map(|k| (0..n).map(|j| if j == k { 1.0 } else { 0.0 }).collect())
        .collect();
    let d = belief.density();
    let mut levels: Vec<f64> = d.to_vec();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    for level in levels {
        probes.push(d.iter().map(|v| if *v == level { 1.0 } else { 0.0 }).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..RANDOM_PROBES {
        probes.push((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
    }
    let mut evidence = None;
    let mut gap = 0.0f64;
    for x in probes {
        let g = (rho.evaluate(&x)? - belief.expectation(&x)).abs();
        if g > gap {
            gap = g;
            if g > ACCEPT_TOL && evidence.is_none() {
                evidence = Some(x);
            }
        }
    }
    Ok(AdmissibilityReport {
        admissible: evidence.is_some(),
        evidence,
        gap,
        belief_density: compatibility_check(rho, d)?,
    })
}

/// Compatibility of `λ·q_comp + (1 − λ)·z_dual`.
pub fn mix_compatible(
    rho: &RiskMeasure,
    q_comp: &[f64],
    z_dual: &[f64],
    lambda: f64,
) -> Result<CompatibilityReport, DiagnosticsError> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(DiagnosticsError::InvalidLambda(lambda));
    }
    compatibility_check(rho, &mix(q_comp, z_dual, lambda))
}

pub fn mix(a: &[f64], b: &[f64], lambda: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| lambda * x + (1.0 - lambda) * y).collect()
}

/// Box `[lo, hi]` for `Z/(dQ/dP)` describing the dual domain, when the
/// measure has one.
pub fn dual_box(rho: &RiskMeasure) -> Result<(f64, f64), DiagnosticsError> {
    box_of(rho.kind(), rho)
}

fn box_of(kind: &MeasureKind, rho: &RiskMeasure) -> Result<(f64, f64), DiagnosticsError> {
    if let Some(nf) = NormalForm::of(kind, rho.belief()) {
        return nf
            .dual_box()
            .ok_or_else(|| DiagnosticsError::DomainNotPolyhedral(kind.label()));
    }
    match kind {
        // Domains intersect since the conjugate is the maximum.
        MeasureKind::MinOf { members } => {
            let mut out = (f64::NEG_INFINITY, f64::INFINITY);
            for m in members {
                let (lo, hi) = box_of(m, rho)?;
                out = (out.0.max(lo), out.1.min(hi));
            }
            Ok(out)
        }
        MeasureKind::StarHull { inner } | MeasureKind::Shifted { inner, .. } => box_of(inner, rho),
        _ => Err(DiagnosticsError::DomainNotPolyhedral(kind.label())),
    }
}

/// Whether `q` lies in the algebraic interior-type set of densities that can
/// be pushed away from every other domain element and stay in the domain.
pub fn interior_membership(rho: &RiskMeasure, q: &[f64]) -> Result<bool, DiagnosticsError> {
    let (lo, hi) = dual_box(rho)?;
    if !rho.conjugate(q)?.conjugate_value.is_finite() {
        return Ok(false);
    }
    if hi - lo <= 1e-12 {
        // Singleton domain: q is the only element.
        return Ok(true);
    }
    let d = rho.belief().density();
    Ok(q.iter().zip(d).all(|(&z, &dk)| {
        if dk <= 0.0 {
            return true;
        }
        let w = z / dk;
        w > lo + ACCEPT_TOL && w < hi - ACCEPT_TOL
    }))
}

/// Compatibility of the block average `E[Z | σ(π)]`.
pub fn conditional_compatibility(
    rho: &RiskMeasure,
    z: &[f64],
    space: &ScenarioSpace,
) -> Result<CompatibilityReport, DiagnosticsError> {
    compatibility_check(rho, &space.block_average(z))
}

/// Collects up to `k` distinct compatible densities other than `dQ/dP` by
/// mixing it with seeded finite-conjugate perturbations.
pub fn compatible_family(
    rho: &RiskMeasure,
    k: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>, DiagnosticsError> {
    let d = rho.belief().density().to_vec();
    let p = rho.belief().reference_weights().to_vec();
    let n = d.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut found: Vec<Vec<f64>> = Vec::new();
    for _ in 0..20 * k.max(1) {
        if found.len() >= k {
            break;
        }
        let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mean = dot(&p, &d.iter().zip(&r).map(|(a, b)| a * b).collect::<Vec<_>>());
        for eps in [0.5, 0.2, 0.05] {
            let z: Vec<f64> = d
                .iter()
                .zip(&r)
                .map(|(dk, rk)| dk * (1.0 + eps * (rk - mean)))
                .collect();
            if !rho.conjugate(&z)?.conjugate_value.is_finite() {
                continue;
            }
            let lambda = rng.gen_range(0.1..0.9);
            let report = mix_compatible(rho, &d, &z, lambda)?;
            if report.compatible() {
                let cand = report.candidate;
                let distinct = cand
                    .iter()
                    .zip(&d)
                    .any(|(a, b)| (a - b).abs() > 1e-6)
                    && found
                        .iter()
                        .all(|f| f.iter().zip(&cand).any(|(a, b)| (a - b).abs() > 1e-6));
                if distinct {
                    found.push(cand);
                }
                break;
            }
        }
    }
    Ok(found)
}
