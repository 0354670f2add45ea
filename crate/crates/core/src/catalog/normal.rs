//! Normal form of the convex catalog members.
//!
//! Every convex member is a nonnegative combination of
//!
//! * a linear part `Σ_k c_k Y_k` (expectations, ES at level 0),
//! * tail atoms: `ES_p` for `p ∈ (0,1)` and the essential supremum,
//! * entropic atoms `(1/β) log E_Q[e^{βY}]`,
//!
//! plus a constant, all under one belief `Q`. The form is what the LP
//! builders, the gradient solver, the conjugates and the recession cones work
//! on.

use super::{ConjugateValue, MeasureKind};
use crate::lp::{es_epigraph, max_epigraph, Affine, Cmp, LpModel};
use crate::order::DiscreteLaw;
use crate::space::Belief;

/// Tolerance for dual-domain membership, on the density scale.
pub const CONJ_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TailAtom {
    /// Essential supremum under the belief.
    Max,
    /// Expected shortfall at a level in `(0, 1)`.
    Es(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalForm {
    pub probs: Vec<f64>,
    pub reference: Vec<f64>,
    pub linear: Vec<f64>,
    pub tails: Vec<(f64, TailAtom)>,
    pub entropic: Vec<(f64, f64)>,
    pub constant: f64,
}

impl NormalForm {
    /// `None` for the nonconvex kinds (finite minima, star hulls, VaR).
    pub fn of(kind: &MeasureKind, belief: &Belief) -> Option<Self> {
        let mut nf = Self {
            probs: belief.probabilities().to_vec(),
            reference: belief.reference_weights().to_vec(),
            linear: vec![0.0; belief.len()],
            tails: Vec::new(),
            entropic: Vec::new(),
            constant: 0.0,
        };
        if nf.accumulate(kind, 1.0) {
            Some(nf)
        } else {
            None
        }
    }

    fn add_linear(&mut self, w: f64) {
        for (c, q) in self.linear.iter_mut().zip(&self.probs) {
            *c += w * q;
        }
    }

    fn add_band(&mut self, w: f64, level: f64) {
        if level <= 0.0 {
            self.add_linear(w);
        } else if level >= 1.0 {
            self.tails.push((w, TailAtom::Max));
        } else {
            self.tails.push((w, TailAtom::Es(level)));
        }
    }

    fn accumulate(&mut self, kind: &MeasureKind, w: f64) -> bool {
        match kind {
            MeasureKind::Expectation => self.add_linear(w),
            MeasureKind::EssentialSup => self.tails.push((w, TailAtom::Max)),
            MeasureKind::ExpectedShortfall { level } => self.add_band(w, *level),
            MeasureKind::Entropic { beta } => self.entropic.push((w, *beta)),
            MeasureKind::SpectralTail { bands } => {
                for b in bands {
                    self.add_band(w * b.weight, b.level);
                }
            }
            MeasureKind::Mixture { members } => {
                for m in members {
                    if !self.accumulate(&m.measure, w * m.weight) {
                        return false;
                    }
                }
            }
            MeasureKind::Shifted { inner, shift } => {
                if !self.accumulate(inner, w) {
                    return false;
                }
                self.constant += w * shift;
            }
            MeasureKind::MinOf { .. }
            | MeasureKind::StarHull { .. }
            | MeasureKind::ValueAtRisk { .. } => return false,
        }
        true
    }

    pub fn is_polyhedral(&self) -> bool {
        self.entropic.is_empty()
    }

    /// No tail atoms: the member is differentiable everywhere.
    pub fn is_smooth(&self) -> bool {
        self.tails.is_empty()
    }

    /// Whether the conjugate has a closed form or an LP description here.
    pub fn conjugate_supported(&self) -> bool {
        self.entropic.is_empty() || (self.entropic.len() == 1 && self.tails.is_empty())
    }

    pub fn value(&self, y: &[f64]) -> f64 {
        self.smooth_value(y) + self.tail_value(y)
    }

    /// Linear part, entropic atoms and the constant.
    pub fn smooth_value(&self, y: &[f64]) -> f64 {
        let mut v = self.constant + dot(&self.linear, y);
        for &(w, beta) in &self.entropic {
            v += w * entropic(&self.probs, y, beta);
        }
        v
    }

    pub fn tail_value(&self, y: &[f64]) -> f64 {
        if self.tails.is_empty() {
            return 0.0;
        }
        let law = DiscreteLaw::new(y, &self.probs);
        self.tails
            .iter()
            .map(|&(w, atom)| {
                w * match atom {
                    TailAtom::Max => law.max(),
                    TailAtom::Es(p) => law.upper_tail_integral(p) / (1.0 - p),
                }
            })
            .sum()
    }

    /// Gradient of [`Self::smooth_value`] with respect to the atom values.
    pub fn smooth_gradient(&self, y: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.linear);
        for &(w, beta) in &self.entropic {
            let m = max_on_support(&self.probs, y);
            let weights: Vec<f64> = self
                .probs
                .iter()
                .zip(y)
                .map(|(&q, &v)| if q > 0.0 { q * (beta * (v - m)).exp() } else { 0.0 })
                .collect();
            let total: f64 = weights.iter().sum();
            for (o, e) in out.iter_mut().zip(&weights) {
                *o += w * e / total;
            }
        }
    }

    /// `lim_{t→∞} ρ(tU)/t`: the member's recession function. The acceptance
    /// set's asymptotic cone is its zero sublevel set.
    pub fn recession(&self, u: &[f64]) -> f64 {
        let mut v = dot(&self.linear, u);
        let law = DiscreteLaw::new(u, &self.probs);
        for &(w, atom) in &self.tails {
            v += w * match atom {
                TailAtom::Max => law.max(),
                TailAtom::Es(p) => law.upper_tail_integral(p) / (1.0 - p),
            };
        }
        for &(w, _) in &self.entropic {
            v += w * law.max();
        }
        v
    }

    /// Linear part plus tail atoms plus constant as an LP epigraph over the
    /// affine atom values `ys`. Entropic atoms are left to the caller.
    pub fn lp_epigraph(&self, model: &mut LpModel, ys: &[Affine]) -> Affine {
        let mut r = Affine::constant(self.constant);
        for (y, &c) in ys.iter().zip(&self.linear) {
            if c != 0.0 {
                r.add_scaled(y, c);
            }
        }
        self.add_tails(model, ys, &mut r, false);
        r
    }

    /// Epigraph of [`Self::recession`].
    pub fn lp_recession(&self, model: &mut LpModel, us: &[Affine]) -> Affine {
        let mut r = Affine::default();
        for (u, &c) in us.iter().zip(&self.linear) {
            if c != 0.0 {
                r.add_scaled(u, c);
            }
        }
        self.add_tails(model, us, &mut r, true);
        r
    }

    fn add_tails(&self, model: &mut LpModel, ys: &[Affine], r: &mut Affine, with_entropic: bool) {
        for &(w, atom) in &self.tails {
            let e = match atom {
                TailAtom::Max => max_epigraph(model, ys, &self.probs),
                TailAtom::Es(p) => es_epigraph(model, ys, &self.probs, p),
            };
            r.add_scaled(&e, w);
        }
        if with_entropic {
            for &(w, _) in &self.entropic {
                let e = max_epigraph(model, ys, &self.probs);
                r.add_scaled(&e, w);
            }
        }
    }

    /// `ρ*(Z) = sup_X E_P[ZX] − ρ(X)` for a density `Z` with respect to the
    /// reference weights.
    pub fn conjugate(&self, z: &[f64]) -> ConjugateValue {
        // Work with the per-atom measure μ = P·Z; what is left after the
        // linear part must split into the tail and entropic dual sets.
        let rest: Vec<f64> = z
            .iter()
            .zip(&self.reference)
            .zip(&self.linear)
            .map(|((zk, pk), ck)| pk * zk - ck)
            .collect();
        if !self.entropic.is_empty() {
            if !self.conjugate_supported() {
                return ConjugateValue::Infinite;
            }
            let (w, beta) = self.entropic[0];
            return self.entropic_conjugate(&rest, w, beta);
        }
        if self.tails.is_empty() {
            let worst = rest
                .iter()
                .zip(&self.reference)
                .map(|(r, p)| (r / p).abs())
                .fold(0.0, f64::max);
            return if worst <= CONJ_TOL {
                ConjugateValue::Finite(-self.constant)
            } else {
                ConjugateValue::Infinite
            };
        }
        match self.tail_split_residual(&rest) {
            Some(s) if s <= CONJ_TOL => ConjugateValue::Finite(-self.constant),
            _ => ConjugateValue::Infinite,
        }
    }

    fn entropic_conjugate(&self, rest: &[f64], w: f64, beta: f64) -> ConjugateValue {
        let mut relative_entropy = 0.0;
        let mut mass = 0.0;
        for ((r, q), p) in rest.iter().zip(&self.probs).zip(&self.reference) {
            let nu = r / w;
            if nu < -CONJ_TOL * p {
                return ConjugateValue::Infinite;
            }
            if *q <= 0.0 {
                if nu > CONJ_TOL * p {
                    return ConjugateValue::Infinite;
                }
                continue;
            }
            let nu = nu.max(0.0);
            mass += nu;
            if nu > 0.0 {
                relative_entropy += nu * (nu / q).ln();
            }
        }
        if (mass - 1.0).abs() > CONJ_TOL {
            return ConjugateValue::Infinite;
        }
        ConjugateValue::Finite(w * relative_entropy / beta - self.constant)
    }

    /// Smallest `s` such that `rest` is within `s·P` (per atom) of a point in
    /// `Σ_j w_j N_j`, where `N_j` is the dual set of tail atom `j`.
    fn tail_split_residual(&self, rest: &[f64]) -> Option<f64> {
        let mut model = LpModel::new();
        let s = model.var(0.0, f64::INFINITY);
        let n = rest.len();
        let mut combo: Vec<Affine> = vec![Affine::default(); n];
        for &(w, atom) in &self.tails {
            let mut total = Affine::default();
            for k in 0..n {
                let q = self.probs[k];
                if q <= 0.0 {
                    continue;
                }
                let cap = match atom {
                    TailAtom::Max => f64::INFINITY,
                    TailAtom::Es(p) => q / (1.0 - p),
                };
                let nu = model.var(0.0, cap);
                total.add_term(nu, 1.0);
                combo[k].add_term(nu, w);
            }
            model.constrain(&total, Cmp::Eq, 1.0);
        }
        for k in 0..n {
            let p = self.reference[k];
            // rest_k − combo_k ≤ s·p and ≥ −s·p
            let mut upper = combo[k].clone();
            upper.add_term(s, p);
            model.constrain(&upper, Cmp::Ge, rest[k]);
            let mut lower = combo[k].clone();
            lower.add_term(s, -p);
            model.constrain(&lower, Cmp::Le, rest[k]);
        }
        model.minimize(&Affine::var(s));
        model.solve().ok().map(|sol| sol.x[s])
    }

    /// Box description `{lo ≤ Z/(dQ/dP) ≤ hi, E_Q = 1}` of the dual domain,
    /// when it has one: a single tail atom plus linear multiples of `Q`.
    pub fn dual_box(&self) -> Option<(f64, f64)> {
        if !self.entropic.is_empty() || self.tails.len() > 1 {
            return None;
        }
        // The linear part must be a multiple of the belief itself.
        let lin_weight: f64 = self.linear.iter().sum();
        let proportional = self
            .linear
            .iter()
            .zip(&self.probs)
            .all(|(c, q)| (c - lin_weight * q).abs() <= 1e-12);
        if !proportional {
            return None;
        }
        match self.tails.first() {
            None => Some((1.0, 1.0)),
            Some(&(w, atom)) => {
                let hi = match atom {
                    TailAtom::Max => f64::INFINITY,
                    TailAtom::Es(p) => w / (1.0 - p) + lin_weight,
                };
                Some((lin_weight, hi))
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn max_on_support(probs: &[f64], y: &[f64]) -> f64 {
    probs
        .iter()
        .zip(y)
        .filter(|(q, _)| **q > 0.0)
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// `(1/β) log E_Q[e^{βY}]` with the maximum factored out.
pub(crate) fn entropic(probs: &[f64], y: &[f64], beta: f64) -> f64 {
    let m = max_on_support(probs, y);
    let s: f64 = probs
        .iter()
        .zip(y)
        .filter(|(q, _)| **q > 0.0)
        .map(|(q, v)| q * (beta * (v - m)).exp())
        .sum();
    m + s.ln() / beta
}
