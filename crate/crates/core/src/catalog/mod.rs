//! Catalog of law-invariant risk measures: evaluation, acceptance sets,
//! convex conjugates, star-shaped hulls and asymptotic cones.
//!
//! A [`RiskMeasure`] is a [`MeasureKind`] together with the belief under
//! which it is law invariant. Convex kinds are reduced to a
//! [`NormalForm`](normal::NormalForm); finite minima of convex members are the
//! only nonconvex constructor apart from the star hull and the VaR kind kept
//! for negative tests.

pub mod normal;

use crate::order::DiscreteLaw;
use crate::space::Belief;
use normal::{dot, entropic, max_on_support, NormalForm, TailAtom};
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Tolerance for `ρ(X) ≤ 0` style checks.
pub const ACCEPT_TOL: f64 = 1e-9;

/// Spacing of the uniform scale grid used by the star hull.
const HULL_GRID: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CatalogError {
    #[error("vector has {found} entries but the belief lives on {expected} atoms")]
    SpaceMismatch { expected: usize, found: usize },
    #[error("level {0} is outside the admissible range")]
    InvalidLevel(f64),
    #[error("entropic parameter must be positive and finite, got {0}")]
    InvalidBeta(f64),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("finite minimum needs at least one member")]
    EmptyMinOf,
    #[error("member `{0}` is not convex; only finite minima may combine nonconvex pieces")]
    NonConvexMember(String),
    #[error("mixture combines entropic members with tail or other entropic members; its conjugate has no closed form here")]
    UnsupportedMixture,
    #[error("measure is not normalized: value at zero is {0}")]
    NotNormalized(f64),
    #[error("non-finite parameter in `{0}`")]
    NonFinite(String),
}

/// One quantile band of a spectral measure: `weight · ES_level`, where level
/// `1` stands for the essential supremum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub level: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureTerm {
    pub weight: f64,
    pub measure: MeasureKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeasureKind {
    Expectation,
    EssentialSup,
    ExpectedShortfall { level: f64 },
    Entropic { beta: f64 },
    SpectralTail { bands: Vec<Band> },
    /// Convex combination of convex members.
    Mixture { members: Vec<MixtureTerm> },
    MinOf { members: Vec<MeasureKind> },
    StarHull { inner: Box<MeasureKind> },
    Shifted { inner: Box<MeasureKind>, shift: f64 },
    /// `inf{x : Q(X ≤ x) > level}`. Not consistent; kept for negative tests.
    ValueAtRisk { level: f64 },
}

impl MeasureKind {
    pub fn es(level: f64) -> Self {
        Self::ExpectedShortfall { level }
    }

    pub fn entropic(beta: f64) -> Self {
        Self::Entropic { beta }
    }

    pub fn shifted(inner: MeasureKind, shift: f64) -> Self {
        Self::Shifted {
            inner: Box::new(inner),
            shift,
        }
    }

    pub fn mixture(members: Vec<(f64, MeasureKind)>) -> Self {
        Self::Mixture {
            members: members
                .into_iter()
                .map(|(weight, measure)| MixtureTerm { weight, measure })
                .collect(),
        }
    }

    pub fn min_of(members: Vec<MeasureKind>) -> Self {
        Self::MinOf { members }
    }

    pub fn star_hull(inner: MeasureKind) -> Self {
        Self::StarHull {
            inner: Box::new(inner),
        }
    }

    pub fn is_convex(&self) -> bool {
        match self {
            Self::MinOf { .. } | Self::StarHull { .. } | Self::ValueAtRisk { .. } => false,
            Self::Mixture { members } => members.iter().all(|m| m.measure.is_convex()),
            Self::Shifted { inner, .. } => inner.is_convex(),
            _ => true,
        }
    }

    /// False when a VaR piece occurs anywhere.
    pub fn is_consistent(&self) -> bool {
        match self {
            Self::ValueAtRisk { .. } => false,
            Self::Mixture { members } => members.iter().all(|m| m.measure.is_consistent()),
            Self::MinOf { members } => members.iter().all(Self::is_consistent),
            Self::StarHull { inner } | Self::Shifted { inner, .. } => inner.is_consistent(),
            _ => true,
        }
    }

    fn validate(&self) -> Result<(), CatalogError> {
        match self {
            Self::Expectation | Self::EssentialSup => Ok(()),
            Self::ExpectedShortfall { level } => {
                if (0.0..1.0).contains(level) {
                    Ok(())
                } else {
                    Err(CatalogError::InvalidLevel(*level))
                }
            }
            Self::ValueAtRisk { level } => {
                if (0.0..1.0).contains(level) {
                    Ok(())
                } else {
                    Err(CatalogError::InvalidLevel(*level))
                }
            }
            Self::Entropic { beta } => {
                if *beta > 0.0 && beta.is_finite() {
                    Ok(())
                } else {
                    Err(CatalogError::InvalidBeta(*beta))
                }
            }
            Self::SpectralTail { bands } => {
                for b in bands {
                    if !(0.0..=1.0).contains(&b.level) {
                        return Err(CatalogError::InvalidLevel(b.level));
                    }
                }
                check_weights(bands.iter().map(|b| b.weight))
            }
            Self::Mixture { members } => {
                check_weights(members.iter().map(|m| m.weight))?;
                for m in members {
                    m.measure.validate()?;
                    if !m.measure.is_convex() {
                        return Err(CatalogError::NonConvexMember(m.measure.label()));
                    }
                }
                Ok(())
            }
            Self::MinOf { members } => {
                if members.is_empty() {
                    return Err(CatalogError::EmptyMinOf);
                }
                for m in members {
                    m.validate()?;
                    if !m.is_convex() {
                        return Err(CatalogError::NonConvexMember(m.label()));
                    }
                }
                Ok(())
            }
            Self::StarHull { inner } => inner.validate(),
            Self::Shifted { inner, shift } => {
                if !shift.is_finite() {
                    return Err(CatalogError::NonFinite("shifted".into()));
                }
                inner.validate()
            }
        }
    }

    /// Short human-readable description.
    pub fn label(&self) -> String {
        match self {
            Self::Expectation => "E".into(),
            Self::EssentialSup => "esssup".into(),
            Self::ExpectedShortfall { level } => format!("ES_{level}"),
            Self::Entropic { beta } => format!("entropic_{beta}"),
            Self::SpectralTail { bands } => {
                let parts: Vec<String> = bands
                    .iter()
                    .map(|b| format!("{}·ES_{}", b.weight, b.level))
                    .collect();
                format!("spectral[{}]", parts.join(" + "))
            }
            Self::Mixture { members } => {
                let parts: Vec<String> = members
                    .iter()
                    .map(|m| format!("{}·{}", m.weight, m.measure.label()))
                    .collect();
                parts.join(" + ")
            }
            Self::MinOf { members } => {
                let parts: Vec<String> = members.iter().map(Self::label).collect();
                format!("min{{{}}}", parts.join(", "))
            }
            Self::StarHull { inner } => format!("hull({})", inner.label()),
            Self::Shifted { inner, shift } => format!("({}) + {shift}", inner.label()),
            Self::ValueAtRisk { level } => format!("VaR_{level}"),
        }
    }
}

impl fmt::Display for MeasureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

fn check_weights(weights: impl Iterator<Item = f64>) -> Result<(), CatalogError> {
    let w: Vec<f64> = weights.collect();
    if w.is_empty() {
        return Err(CatalogError::InvalidWeights("no members".into()));
    }
    if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(CatalogError::InvalidWeights("negative or non-finite weight".into()));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > 1e-12 {
        return Err(CatalogError::InvalidWeights(format!("weights sum to {s}")));
    }
    Ok(())
}

/// Conjugate value, possibly `+∞`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConjugateValue {
    Finite(f64),
    Infinite,
}

impl ConjugateValue {
    pub fn is_finite(&self) -> bool {
        matches!(self, Self::Finite(_))
    }

    /// `f64::INFINITY` for the infinite case.
    pub fn value(&self) -> f64 {
        match self {
            Self::Finite(v) => *v,
            Self::Infinite => f64::INFINITY,
        }
    }

    pub fn max(self, other: Self) -> Self {
        match (self, other) {
            (Self::Finite(a), Self::Finite(b)) => Self::Finite(a.max(b)),
            _ => Self::Infinite,
        }
    }

    pub fn shift(self, c: f64) -> Self {
        match self {
            Self::Finite(v) => Self::Finite(v + c),
            Self::Infinite => Self::Infinite,
        }
    }
}

impl fmt::Display for ConjugateValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Finite(v) => write!(f, "{v}"),
            Self::Infinite => f.write_str("inf"),
        }
    }
}

/// A density paired with the conjugate value there.
#[derive(Debug, Clone, PartialEq)]
pub struct DualElement {
    pub density: Vec<f64>,
    pub conjugate_value: ConjugateValue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConeMethod {
    /// Decided from the recession function of the member.
    Analytic,
    /// Decided by acceptance of `tU` on a finite grid of `t`.
    Numerical,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConeVerdict {
    pub contains: bool,
    pub method: ConeMethod,
}

/// A catalog member together with its belief.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskMeasure {
    kind: MeasureKind,
    belief: Belief,
}

impl RiskMeasure {
    /// Validates parameters and normalization `ρ(0) = 0`.
    pub fn new(kind: MeasureKind, belief: Belief) -> Result<Self, CatalogError> {
        kind.validate()?;
        let rho = Self { kind, belief };
        let at_zero = rho.value(&vec![0.0; rho.belief.len()]);
        if at_zero.abs() > 1e-12 {
            return Err(CatalogError::NotNormalized(at_zero));
        }
        if let Some(nf) = rho.normal_form() {
            if !nf.conjugate_supported() {
                return Err(CatalogError::UnsupportedMixture);
            }
        }
        if let MeasureKind::MinOf { members } = &rho.kind {
            for m in members {
                if let Some(nf) = NormalForm::of(m, &rho.belief) {
                    if !nf.conjugate_supported() {
                        return Err(CatalogError::UnsupportedMixture);
                    }
                }
            }
        }
        Ok(rho)
    }

    pub fn expectation(belief: Belief) -> Self {
        Self::new(MeasureKind::Expectation, belief).expect("expectation is always valid")
    }

    pub fn kind(&self) -> &MeasureKind {
        &self.kind
    }

    pub fn belief(&self) -> &Belief {
        &self.belief
    }

    pub fn label(&self) -> String {
        self.kind.label()
    }

    pub fn is_consistent(&self) -> bool {
        self.kind.is_consistent()
    }

    /// Normal form when the measure is convex.
    pub fn normal_form(&self) -> Option<NormalForm> {
        NormalForm::of(&self.kind, &self.belief)
    }

    /// Whether the measure coincides with the expectation under its belief.
    pub fn is_belief_expectation(&self) -> bool {
        matches!(self.normal_form(), Some(nf) if nf.tails.is_empty()
            && nf.entropic.is_empty()
            && nf.constant == 0.0)
    }

    fn check(&self, x: &[f64]) -> Result<(), CatalogError> {
        if x.len() == self.belief.len() {
            Ok(())
        } else {
            Err(CatalogError::SpaceMismatch {
                expected: self.belief.len(),
                found: x.len(),
            })
        }
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<f64, CatalogError> {
        self.check(x)?;
        Ok(self.value(x))
    }

    /// Evaluation without the length check.
    pub(crate) fn value(&self, x: &[f64]) -> f64 {
        eval_kind(&self.kind, &self.belief, x)
    }

    pub fn acceptance(&self, x: &[f64]) -> Result<bool, CatalogError> {
        Ok(self.evaluate(x)? <= ACCEPT_TOL)
    }

    pub fn conjugate(&self, z: &[f64]) -> Result<DualElement, CatalogError> {
        self.check(z)?;
        Ok(DualElement {
            density: z.to_vec(),
            conjugate_value: conj_kind(&self.kind, &self.belief, z),
        })
    }

    /// Recession function `lim_{t→∞} ρ(tU)/t`.
    pub fn recession(&self, u: &[f64]) -> Result<f64, CatalogError> {
        self.check(u)?;
        Ok(recession_kind(&self.kind, &self.belief, u))
    }

    /// Whether the acceptance set is star-shaped, so that its asymptotic cone
    /// is the set of rays `{U : ρ(tU) ≤ 0 for all t ≥ 0}`.
    pub fn is_star_shaped(&self) -> bool {
        star_shaped(&self.kind, &self.belief)
    }

    /// Membership in the asymptotic cone of the acceptance set.
    ///
    /// Star-shaped measures are decided from the recession function. A
    /// finite minimum with positively shifted members is not star-shaped;
    /// for it the cone is read as the set of accepted rays and decided by
    /// [`Self::ray_test`] on the geometric grid `2^-20, …, 2^20`.
    pub fn asymptotic_cone_contains(&self, u: &[f64]) -> Result<ConeVerdict, CatalogError> {
        if !self.is_star_shaped() {
            let ts: Vec<f64> = (-20..=20).map(|e| 2f64.powi(e)).collect();
            return self.ray_test(u, &ts);
        }
        let r = self.recession(u)?;
        let scale = u.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        Ok(ConeVerdict {
            contains: r <= ACCEPT_TOL * scale,
            method: ConeMethod::Analytic,
        })
    }

    /// Ray test: `tU` accepted for every `t` in `ts`.
    pub fn ray_test(&self, u: &[f64], ts: &[f64]) -> Result<ConeVerdict, CatalogError> {
        self.check(u)?;
        let contains = ts.iter().all(|&t| {
            let tu: Vec<f64> = u.iter().map(|v| t * v).collect();
            self.value(&tu) <= ACCEPT_TOL
        });
        Ok(ConeVerdict {
            contains,
            method: ConeMethod::Numerical,
        })
    }

    /// Ray test on the geometric grid `1, 2, 4, …, t_max`.
    pub fn ray_test_geometric(&self, u: &[f64], t_max: f64) -> Result<ConeVerdict, CatalogError> {
        let mut ts = vec![];
        let mut t = 1.0;
        while t <= t_max {
            ts.push(t);
            t *= 2.0;
        }
        self.ray_test(u, &ts)
    }
}

pub fn evaluate(rho: &RiskMeasure, x: &[f64]) -> Result<f64, CatalogError> {
    rho.evaluate(x)
}

pub fn acceptance(rho: &RiskMeasure, x: &[f64]) -> Result<bool, CatalogError> {
    rho.acceptance(x)
}

pub fn conjugate(rho: &RiskMeasure, z: &[f64]) -> Result<DualElement, CatalogError> {
    rho.conjugate(z)
}

pub fn asymptotic_cone_contains(rho: &RiskMeasure, u: &[f64]) -> Result<bool, CatalogError> {
    Ok(rho.asymptotic_cone_contains(u)?.contains)
}

/// `ρ⋆(X) = inf{m : X − m ∈ cl ∪_{s∈[0,1]} s·A_ρ}`.
///
/// For cash-additive `ρ`, `X − m ∈ s·A_ρ` iff `m ≥ s·ρ(X/s)`, so the hull is
/// `inf_{s∈(0,1]} s·ρ(X/s)` with the recession function as the `s → 0`
/// limit. The infimum is taken over a uniform grid in `s` followed by a
/// golden-section refinement around the best grid point.
pub fn star_hull_evaluate(rho: &RiskMeasure, x: &[f64]) -> Result<f64, CatalogError> {
    rho.check(x)?;
    Ok(star_hull(&rho.kind, &rho.belief, x))
}

fn star_hull(inner: &MeasureKind, belief: &Belief, x: &[f64]) -> f64 {
    if inner.is_convex() {
        let at_zero = eval_kind(inner, belief, &vec![0.0; x.len()]);
        if at_zero <= 0.0 {
            // 0 ∈ A_ρ and A_ρ convex: already star-shaped.
            return eval_kind(inner, belief, x);
        }
    }
    let mut scaled = vec![0.0; x.len()];
    let mut h = |s: f64| {
        for (o, v) in scaled.iter_mut().zip(x) {
            *o = v / s;
        }
        s * eval_kind(inner, belief, &scaled)
    };
    let steps = (1.0 / HULL_GRID).round() as usize;
    let mut best = h(1.0);
    let mut best_s = 1.0;
    for j in 1..steps {
        let s = j as f64 * HULL_GRID;
        let v = h(s);
        if v < best {
            best = v;
            best_s = s;
        }
    }
    let (mut a, mut b) = ((best_s - HULL_GRID).max(1e-12), (best_s + HULL_GRID).min(1.0));
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (h(c), h(d));
    for _ in 0..60 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = h(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = h(d);
        }
    }
    best = best.min(fc).min(fd);
    best.min(recession_kind(inner, belief, x))
}

fn star_shaped(kind: &MeasureKind, belief: &Belief) -> bool {
    match kind {
        MeasureKind::MinOf { members } => members.iter().all(|m| {
            NormalForm::of(m, belief).map_or(false, |nf| nf.constant == 0.0)
        }),
        MeasureKind::Shifted { inner, shift } if !inner.is_convex() => {
            *shift == 0.0 && star_shaped(inner, belief)
        }
        _ => true,
    }
}

fn eval_kind(kind: &MeasureKind, belief: &Belief, x: &[f64]) -> f64 {
    let q = belief.probabilities();
    match kind {
        MeasureKind::Expectation => dot(q, x),
        MeasureKind::EssentialSup => max_on_support(q, x),
        MeasureKind::ExpectedShortfall { level } => es(q, x, *level),
        MeasureKind::Entropic { beta } => entropic(q, x, *beta),
        MeasureKind::SpectralTail { bands } => {
            bands.iter().map(|b| b.weight * es(q, x, b.level)).sum()
        }
        MeasureKind::Mixture { members } => members
            .iter()
            .map(|m| m.weight * eval_kind(&m.measure, belief, x))
            .sum(),
        MeasureKind::MinOf { members } => members
            .iter()
            .map(|m| eval_kind(m, belief, x))
            .fold(f64::INFINITY, f64::min),
        MeasureKind::StarHull { inner } => star_hull(inner, belief, x),
        MeasureKind::Shifted { inner, shift } => eval_kind(inner, belief, x) + shift,
        MeasureKind::ValueAtRisk { level } => DiscreteLaw::new(x, q).upper_quantile(*level),
    }
}

/// `ES_level` with level `1` read as the essential supremum.
fn es(q: &[f64], x: &[f64], level: f64) -> f64 {
    if level >= 1.0 {
        return max_on_support(q, x);
    }
    DiscreteLaw::new(x, q).upper_tail_integral(level) / (1.0 - level)
}

fn recession_kind(kind: &MeasureKind, belief: &Belief, u: &[f64]) -> f64 {
    if let Some(nf) = NormalForm::of(kind, belief) {
        return nf.recession(u);
    }
    match kind {
        MeasureKind::MinOf { members } => members
            .iter()
            .map(|m| recession_kind(m, belief, u))
            .fold(f64::INFINITY, f64::min),
        MeasureKind::StarHull { inner } | MeasureKind::Shifted { inner, .. } => {
            recession_kind(inner, belief, u)
        }
        // Positively homogeneous: its own recession function.
        MeasureKind::ValueAtRisk { .. } => eval_kind(kind, belief, u),
        _ => unreachable!("convex kinds have a normal form"),
    }
}

fn conj_kind(kind: &MeasureKind, belief: &Belief, z: &[f64]) -> ConjugateValue {
    if let Some(nf) = NormalForm::of(kind, belief) {
        return nf.conjugate(z);
    }
    match kind {
        MeasureKind::MinOf { members } => members
            .iter()
            .map(|m| conj_kind(m, belief, z))
            .fold(ConjugateValue::Finite(f64::NEG_INFINITY), ConjugateValue::max),
        MeasureKind::StarHull { inner } => conj_kind(inner, belief, z),
        MeasureKind::Shifted { inner, shift } => conj_kind(inner, belief, z).shift(-shift),
        MeasureKind::ValueAtRisk { level } => var_conjugate(belief, z, *level),
        _ => unreachable!("convex kinds have a normal form"),
    }
}

/// Support function of the VaR acceptance set. A position may be raised
/// without bound on any atom of belief mass below `1 − level`.
fn var_conjugate(belief: &Belief, z: &[f64], level: f64) -> ConjugateValue {
    let tol = normal::CONJ_TOL;
    let p = belief.reference_weights();
    let q = belief.probabilities();
    let mean: f64 = dot(p, z);
    if z.iter().any(|&v| v < -tol) || (mean - 1.0).abs() > tol {
        return ConjugateValue::Infinite;
    }
    let raisable = z
        .iter()
        .zip(q)
        .any(|(&zk, &qk)| zk > tol && qk < 1.0 - level);
    if raisable {
        ConjugateValue::Infinite
    } else {
        ConjugateValue::Finite(0.0)
    }
}

/// The tail atoms of a normal form, for callers that want to inspect them.
pub fn tail_atoms(nf: &NormalForm) -> &[(f64, TailAtom)] {
    &nf.tails
}
