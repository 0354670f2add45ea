//! Convex solvers for one member selection.

use super::layout::Layout;
use super::{objective, SharingError, SolveOptions};
use crate::catalog::normal::{entropic, NormalForm};
use crate::lp::{Affine, LpModel};
use nalgebra::{DMatrix, DVector};

/// Nonmonotone window of the line search.
const WINDOW: usize = 10;
const ARMIJO: f64 = 1e-4;
const STEP_MIN: f64 = 1e-12;
const STEP_MAX: f64 = 1e12;
const KELLEY_ITERATIONS: usize = 2000;
const NEWTON_STEPS: usize = 100;

fn smooth_objective(layout: &Layout, forms: &[&NormalForm], theta: &[f64]) -> f64 {
    forms
        .iter()
        .enumerate()
        .map(|(i, f)| f.smooth_value(&layout.values(theta, i)))
        .sum()
}

fn smooth_gradient(layout: &Layout, forms: &[&NormalForm], theta: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; layout.dim];
    let mut gy = vec![0.0; layout.atoms()];
    for (i, f) in forms.iter().enumerate() {
        f.smooth_gradient(&layout.values(theta, i), &mut gy);
        layout.pullback(i, &gy, &mut g);
    }
    layout.center(&mut g);
    g
}

fn projected_residual(layout: &Layout, theta: &[f64], g: &[f64]) -> f64 {
    let mut p: Vec<f64> = theta.iter().zip(g).map(|(t, gk)| t - gk).collect();
    layout.project(&mut p);
    p.iter().zip(theta).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
}

/// Spectral projected gradient with Barzilai–Borwein steps and a
/// nonmonotone Armijo search, started from the equal split.
pub(crate) fn spg(layout: &Layout, forms: &[&NormalForm], options: &SolveOptions) -> Vec<f64> {
    let mut theta = layout.initial();
    let mut f = smooth_objective(layout, forms, &theta);
    let mut g = smooth_gradient(layout, forms, &theta);
    let mut history = vec![f];
    let gnorm = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut alpha = if gnorm > 0.0 { (1.0 / gnorm).clamp(STEP_MIN, STEP_MAX) } else { 1.0 };
    let stop = 1e-3 * options.tolerance;
    for _ in 0..options.max_iterations {
        if projected_residual(layout, &theta, &g) <= 1e-15 {
            break;
        }
        // Moves longer than the feasible set are pointless and cost digits
        // in the projection.
        let reach = 4.0 * (layout.bound + layout.span());
        let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let step = if gmax > 0.0 { alpha.min(reach / gmax) } else { alpha };
        let mut trial: Vec<f64> = theta.iter().zip(&g).map(|(t, gk)| t - step * gk).collect();
        layout.project(&mut trial);
        let d: Vec<f64> = trial.iter().zip(&theta).map(|(a, b)| a - b).collect();
        // The spectral step tracks the local curvature, so a short step
        // means the iterate has settled even where the gradient is tiny.
        if d.iter().fold(0.0f64, |m, v| m.max(v.abs())) <= stop {
            break;
        }
        let gd: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
        if gd >= 0.0 {
            break;
        }
        let reference = history.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut lambda = 1.0;
        let accepted = loop {
            let cand: Vec<f64> = theta.iter().zip(&d).map(|(t, dk)| t + lambda * dk).collect();
            let fc = smooth_objective(layout, forms, &cand);
            let gc = smooth_gradient(layout, forms, &cand);
            // Convexity: a nonpositive slope at the candidate already
            // implies f(cand) ≤ f(θ), which survives rounding in f.
            let slope: f64 = gc.iter().zip(&d).map(|(a, b)| a * b).sum();
            if fc <= reference + ARMIJO * lambda * gd || slope <= 0.0 {
                break Some((cand, fc, gc));
            }
            lambda *= 0.5;
            if lambda < 1e-20 {
                break None;
            }
        };
        let Some((next, fnext, gnext)) = accepted else {
            break;
        };
        let s: Vec<f64> = next.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gnext.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let ss: f64 = s.iter().map(|v| v * v).sum();
        alpha = if sy > 0.0 { (ss / sy).clamp(STEP_MIN, STEP_MAX) } else { STEP_MAX };
        theta = next;
        f = fnext;
        g = gnext;
        history.push(f);
        if history.len() > WINDOW {
            history.remove(0);
        }
    }
    newton_polish(layout, forms, theta)
}

/// Hessian of the smooth objective in `θ`.
fn smooth_hessian(layout: &Layout, forms: &[&NormalForm], jac: &[DMatrix<f64>], theta: &[f64]) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(layout.dim, layout.dim);
    for (i, f) in forms.iter().enumerate() {
        if f.entropic.is_empty() {
            continue;
        }
        let y = layout.values(theta, i);
        let m = y.len();
        let mut hy = DMatrix::zeros(m, m);
        for &(w, beta) in &f.entropic {
            let top = y.iter().zip(&f.probs).filter(|(_, &q)| q > 0.0).fold(f64::NEG_INFINITY, |a, (v, _)| a.max(*v));
            let e: Vec<f64> = y.iter().zip(&f.probs).map(|(v, q)| q * (beta * (v - top)).exp()).collect();
            let total: f64 = e.iter().sum();
            let pi: Vec<f64> = e.iter().map(|v| v / total).collect();
            for a in 0..m {
                hy[(a, a)] += w * beta * pi[a];
                for b in 0..m {
                    hy[(a, b)] -= w * beta * pi[a] * pi[b];
                }
            }
        }
        h += jac[i].transpose() * hy * &jac[i];
    }
    h
}

/// Projected Newton steps on the free variables, with the budget rows as
/// equality constraints. Variables on a bound whose gradient pushes outward
/// stay fixed. Flat directions produce long steps that the projection clips
/// to the box, which is where such infima sit.
fn newton_polish(layout: &Layout, forms: &[&NormalForm], mut theta: Vec<f64>) -> Vec<f64> {
    if forms.iter().all(|f| f.entropic.is_empty()) {
        return theta;
    }
    let jac: Vec<DMatrix<f64>> = (0..forms.len()).map(|i| layout.jacobian(i)).collect();
    let groups = layout.groups();
    let mut f = smooth_objective(layout, forms, &theta);
    for _ in 0..NEWTON_STEPS {
        let g = smooth_gradient(layout, forms, &theta);
        let h = smooth_hessian(layout, forms, &jac, &theta);
        let mut free = vec![true; layout.dim];
        for (idx, lo, hi) in &groups {
            for &k in idx {
                let scale = 1e-12 * (1.0 + theta[k].abs());
                if (theta[k] <= lo + scale && g[k] > 0.0) || (theta[k] >= hi - scale && g[k] < 0.0) {
                    free[k] = false;
                }
            }
        }
        let fvars: Vec<usize> = (0..layout.dim).filter(|&k| free[k]).collect();
        let rows: Vec<Vec<usize>> = groups
            .iter()
            .map(|(idx, _, _)| idx.iter().filter_map(|k| fvars.iter().position(|v| v == k)).collect::<Vec<_>>())
            .filter(|r: &Vec<usize>| !r.is_empty())
            .collect();
        let nf = fvars.len();
        let size = nf + rows.len();
        if nf == 0 {
            break;
        }
        let diag = (0..nf).map(|a| h[(fvars[a], fvars[a])].abs()).fold(1.0, f64::max);
        let mut kkt = DMatrix::zeros(size, size);
        let mut rhs = DVector::zeros(size);
        for a in 0..nf {
            for b in 0..nf {
                kkt[(a, b)] = h[(fvars[a], fvars[b])];
            }
            kkt[(a, a)] += 1e-14 * diag;
            rhs[a] = -g[fvars[a]];
        }
        for (r, cols) in rows.iter().enumerate() {
            for &a in cols {
                kkt[(nf + r, a)] = 1.0;
                kkt[(a, nf + r)] = 1.0;
            }
        }
        let Some(sol) = kkt.lu().solve(&rhs) else {
            break;
        };
        let mut d = vec![0.0; layout.dim];
        for a in 0..nf {
            d[fvars[a]] = sol[a];
        }
        let gd: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
        if !(gd < 0.0) {
            break;
        }
        let mut t = 1.0;
        let mut moved = false;
        while t > 1e-10 {
            let mut cand: Vec<f64> = theta.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            layout.project(&mut cand);
            let delta: Vec<f64> = cand.iter().zip(&theta).map(|(a, b)| a - b).collect();
            let fc = smooth_objective(layout, forms, &cand);
            let gc = smooth_gradient(layout, forms, &cand);
            let g0: f64 = g.iter().zip(&delta).map(|(a, b)| a * b).sum();
            let slope: f64 = gc.iter().zip(&delta).map(|(a, b)| a * b).sum();
            if g0 < 0.0 && (fc <= f + ARMIJO * g0 || slope <= 0.0) {
                moved = delta.iter().any(|v| *v != 0.0);
                theta = cand;
                f = fc;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    theta
}

/// Kelley's cutting-plane method: tails and linear parts enter the LP
/// exactly, each entropic atom through tangent cuts.
pub(crate) fn kelley(
    layout: &Layout,
    forms: &[&NormalForm],
    options: &SolveOptions,
) -> Result<Vec<f64>, SharingError> {
    let mut model = LpModel::new();
    let vars = layout.add_to_model(&mut model);
    let ys: Vec<Vec<Affine>> = (0..forms.len()).map(|i| layout.affine(&vars, i)).collect();
    let mut obj = Affine::default();
    // (agent, weight, beta, epigraph variable)
    let mut atoms = Vec::new();
    for (i, f) in forms.iter().enumerate() {
        let e = f.lp_epigraph(&mut model, &ys[i]);
        obj.add_scaled(&e, 1.0);
        for &(w, beta) in &f.entropic {
            let t = model.free_var();
            obj.add_term(t, w);
            atoms.push((i, beta, t));
        }
    }
    model.minimize(&obj);

    let add_cuts = |model: &mut LpModel, theta: &[f64]| {
        for &(i, beta, t) in &atoms {
            let y = layout.values(theta, i);
            let probs = &forms[i].probs;
            let value = entropic(probs, &y, beta);
            let single = NormalForm {
                probs: probs.clone(),
                reference: forms[i].reference.clone(),
                linear: vec![0.0; y.len()],
                tails: vec![],
                entropic: vec![(1.0, beta)],
                constant: 0.0,
            };
            let mut grad = vec![0.0; y.len()];
            single.smooth_gradient(&y, &mut grad);
            // t ≥ value + ∇·(Y(θ) − y)
            let mut cut = Affine::constant(value);
            for ((yk, &gk), &yv) in ys[i].iter().zip(&grad).zip(&y) {
                if gk != 0.0 {
                    cut.add_scaled(yk, gk);
                    cut.constant -= gk * yv;
                }
            }
            model.constrain_ge(&Affine::var(t), &cut);
        }
    };

    let mut best = layout.initial();
    let mut upper = objective(layout, forms, &best);
    add_cuts(&mut model, &best);
    for _ in 0..KELLEY_ITERATIONS {
        let sol = model.solve()?;
        let mut theta: Vec<f64> = vars.iter().map(|&v| sol.x[v]).collect();
        layout.project(&mut theta);
        let value = objective(layout, forms, &theta);
        if value < upper {
            upper = value;
            best = theta.clone();
        }
        if upper - sol.objective <= options.tolerance * (1.0 + upper.abs()) {
            break;
        }
        add_cuts(&mut model, &theta);
    }
    Ok(best)
}
