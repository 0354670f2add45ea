//! Thin model layer over `microlp`.
//!
//! Models are collected first and only turned into a solver problem on
//! `solve`, which lets cutting-plane loops clone a model and append rows.

use microlp::{ComparisonOp, OptimizationDirection, Problem};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LpError {
    #[error("linear program is infeasible")]
    Infeasible,
    #[error("linear program is unbounded")]
    Unbounded,
    #[error("linear program solver failed: {0}")]
    Solver(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cmp {
    Le,
    Ge,
    Eq,
}

/// `Σ coeff·x_var + constant`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Affine {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl Affine {
    pub fn constant(c: f64) -> Self {
        Self {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn var(v: usize) -> Self {
        Self {
            terms: vec![(v, 1.0)],
            constant: 0.0,
        }
    }

    pub fn scaled_var(v: usize, c: f64) -> Self {
        Self {
            terms: vec![(v, c)],
            constant: 0.0,
        }
    }

    pub fn add_term(&mut self, v: usize, c: f64) {
        self.terms.push((v, c));
    }

    /// `self += s·other`.
    pub fn add_scaled(&mut self, other: &Affine, s: f64) {
        self.terms
            .extend(other.terms.iter().map(|&(v, c)| (v, c * s)));
        self.constant += s * other.constant;
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(v, c)| c * x[v]).sum::<f64>()
    }

    /// Terms with repeated variables merged and zeros dropped.
    pub fn merged(&self) -> Vec<(usize, f64)> {
        let mut t = self.terms.clone();
        t.sort_by_key(|&(v, _)| v);
        let mut out: Vec<(usize, f64)> = Vec::with_capacity(t.len());
        for (v, c) in t {
            match out.last_mut() {
                Some(last) if last.0 == v => last.1 += c,
                _ => out.push((v, c)),
            }
        }
        out.retain(|&(_, c)| c != 0.0);
        out
    }
}

#[derive(Debug, Clone)]
struct Row {
    terms: Vec<(usize, f64)>,
    cmp: Cmp,
    rhs: f64,
}

/// A minimization problem under construction.
#[derive(Debug, Clone, Default)]
pub struct LpModel {
    lo: Vec<f64>,
    hi: Vec<f64>,
    obj: Vec<f64>,
    obj_constant: f64,
    rows: Vec<Row>,
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
}

impl LpModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_vars(&self) -> usize {
        self.lo.len()
    }

    pub fn var(&mut self, lo: f64, hi: f64) -> usize {
        self.lo.push(lo);
        self.hi.push(hi);
        self.obj.push(0.0);
        self.lo.len() - 1
    }

    pub fn free_var(&mut self) -> usize {
        self.var(f64::NEG_INFINITY, f64::INFINITY)
    }

    pub fn bounds(&self, v: usize) -> (f64, f64) {
        (self.lo[v], self.hi[v])
    }

    /// Adds `a` to the objective.
    pub fn minimize(&mut self, a: &Affine) {
        for &(v, c) in &a.terms {
            self.obj[v] += c;
        }
        self.obj_constant += a.constant;
    }

    pub fn clear_objective(&mut self) {
        self.obj.iter_mut().for_each(|c| *c = 0.0);
        self.obj_constant = 0.0;
    }

    /// `a cmp rhs`.
    pub fn constrain(&mut self, a: &Affine, cmp: Cmp, rhs: f64) {
        let terms = a.merged();
        let rhs = rhs - a.constant;
        if terms.is_empty() {
            // Constant rows are checked at solve time through a fixed variable.
            let v = self.var(1.0, 1.0);
            self.rows.push(Row {
                terms: vec![(v, 0.0)],
                cmp,
                rhs,
            });
            return;
        }
        self.rows.push(Row { terms, cmp, rhs });
    }

    /// `a ≥ b`, both affine.
    pub fn constrain_ge(&mut self, a: &Affine, b: &Affine) {
        let mut d = a.clone();
        d.add_scaled(b, -1.0);
        self.constrain(&d, Cmp::Ge, 0.0);
    }

    pub fn solve(&self) -> Result<LpSolution, LpError> {
        for row in &self.rows {
            if row.terms.iter().all(|&(_, c)| c == 0.0) {
                let ok = match row.cmp {
                    Cmp::Le => 0.0 <= row.rhs + 1e-12,
                    Cmp::Ge => 0.0 >= row.rhs - 1e-12,
                    Cmp::Eq => row.rhs.abs() <= 1e-12,
                };
                if !ok {
                    return Err(LpError::Infeasible);
                }
            }
        }
        let mut problem = Problem::new(OptimizationDirection::Minimize);
        let vars: Vec<_> = (0..self.lo.len())
            .map(|k| problem.add_var(self.obj[k], (self.lo[k], self.hi[k])))
            .collect();
        for row in &self.rows {
            if row.terms.iter().all(|&(_, c)| c == 0.0) {
                continue;
            }
            let expr: Vec<_> = row.terms.iter().map(|&(v, c)| (vars[v], c)).collect();
            let op = match row.cmp {
                Cmp::Le => ComparisonOp::Le,
                Cmp::Ge => ComparisonOp::Ge,
                Cmp::Eq => ComparisonOp::Eq,
            };
            problem.add_constraint(expr.as_slice(), op, row.rhs);
        }
        let outcome = problem.solve().map_err(|e| match e {
            microlp::Error::Infeasible => LpError::Infeasible,
            microlp::Error::Unbounded => LpError::Unbounded,
            other => LpError::Solver(format!("{other:?}")),
        })?;
        let solution = outcome
            .into_solution()
            .map_err(|_| LpError::Solver("interrupted".into()))?;
        let x: Vec<f64> = vars.iter().map(|&v| solution.var_value(v)).collect();
        let objective = self.obj_constant
            + self.obj.iter().zip(&x).map(|(c, v)| c * v).sum::<f64>();
        Ok(LpSolution { x, objective })
    }
}

/// Adds rows so that the returned expression bounds `ES_level(Y)` from above
/// under `probs`, tightly at any minimizer (Rockafellar–Uryasev form).
pub fn es_epigraph(model: &mut LpModel, ys: &[Affine], probs: &[f64], level: f64) -> Affine {
    let t = model.free_var();
    let mut r = Affine::var(t);
    let scale = 1.0 / (1.0 - level);
    for (y, &q) in ys.iter().zip(probs) {
        if q <= 0.0 {
            continue;
        }
        let u = model.var(0.0, f64::INFINITY);
        // u ≥ y − t
        let mut row = Affine::var(u);
        row.add_scaled(y, -1.0);
        row.add_term(t, 1.0);
        model.constrain(&row, Cmp::Ge, 0.0);
        r.add_term(u, q * scale);
    }
    r
}

/// Adds rows so that the returned variable bounds `max_{q_k>0} Y_k`.
pub fn max_epigraph(model: &mut LpModel, ys: &[Affine], probs: &[f64]) -> Affine {
    let s = model.free_var();
    for (y, &q) in ys.iter().zip(probs) {
        if q > 0.0 {
            model.constrain_ge(&Affine::var(s), y);
        }
    }
    Affine::var(s)
}
