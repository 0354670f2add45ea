//! Parameterization of locally comonotone allocations.
//!
//! For every block `B` and agent `i` the vector `θ` holds an intercept
//! `c[i][B] ∈ [−M, M]` with `Σ_i c[i][B] = s_0`, and for every support gap
//! `k` an increment `a[i][B][k] ∈ [0, gap_k]` with `Σ_i a[i][B][k] = gap_k`.
//! Each agent's position is affine in `θ`.

use crate::comonotone::{block_support, BlockScheme, ComonotoneScheme};
use crate::lp::{Affine, Cmp, LpModel};
use crate::space::ScenarioSpace;

#[derive(Debug, Clone)]
pub(crate) struct BlockLayout {
    pub support: Vec<f64>,
    pub gaps: Vec<f64>,
    /// `c[i]`: index of agent `i`'s intercept.
    pub c: Vec<usize>,
    /// `a[k][i]`: index of agent `i`'s increment on gap `k`.
    pub a: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub n: usize,
    pub blocks: Vec<BlockLayout>,
    pub dim: usize,
    pub bound: f64,
    atom_block: Vec<usize>,
    atom_index: Vec<usize>,
}

impl Layout {
    pub fn new(space: &ScenarioSpace, x: &[f64], n: usize, bound: f64) -> Self {
        let mut dim = 0;
        let mut next = |count: usize| {
            let v: Vec<usize> = (dim..dim + count).collect();
            dim += count;
            v
        };
        let mut blocks = Vec::with_capacity(space.num_blocks());
        for b in 0..space.num_blocks() {
            let support = block_support(x, space, b);
            let gaps: Vec<f64> = support.windows(2).map(|w| w[1] - w[0]).collect();
            let c = next(n);
            let a = gaps.iter().map(|_| next(n)).collect();
            blocks.push(BlockLayout { support, gaps, c, a });
        }
        let atom_block: Vec<usize> = (0..space.len()).map(|k| space.block_of(k)).collect();
        let atom_index = x
            .iter()
            .zip(&atom_block)
            .map(|(v, &b)| blocks[b].support.partition_point(|s| s < v))
            .collect();
        Self {
            n,
            blocks,
            dim,
            bound,
            atom_block,
            atom_index,
        }
    }

    pub fn atoms(&self) -> usize {
        self.atom_block.len()
    }

    /// Agent `i`'s values on the support of each block.
    fn functions(&self, theta: &[f64], i: usize) -> Vec<Vec<f64>> {
        self.blocks
            .iter()
            .map(|bl| {
                let mut v = theta[bl.c[i]];
                let mut out = Vec::with_capacity(bl.support.len());
                out.push(v);
                for ak in &bl.a {
                    v += theta[ak[i]];
                    out.push(v);
                }
                out
            })
            .collect()
    }

    /// `Y_i(θ)` over atoms.
    pub fn values(&self, theta: &[f64], i: usize) -> Vec<f64> {
        let f = self.functions(theta, i);
        self.atom_block
            .iter()
            .zip(&self.atom_index)
            .map(|(&b, &j)| f[b][j])
            .collect()
    }

    /// `Y_i` as affine expressions in LP variables `vars[θ-index]`.
    pub fn affine(&self, vars: &[usize], i: usize) -> Vec<Affine> {
        self.atom_block
            .iter()
            .zip(&self.atom_index)
            .map(|(&b, &j)| {
                let bl = &self.blocks[b];
                let mut e = Affine::var(vars[bl.c[i]]);
                for ak in &bl.a[..j] {
                    e.add_term(vars[ak[i]], 1.0);
                }
                e
            })
            .collect()
    }

    /// Adds `J_iᵀ grad_y` to `out`, where `J_i = ∂Y_i/∂θ`.
    pub fn pullback(&self, i: usize, grad_y: &[f64], out: &mut [f64]) {
        for (b, bl) in self.blocks.iter().enumerate() {
            // Mass of the gradient at or above each support index.
            let mut at = vec![0.0; bl.support.len()];
            for (k, (&ab, &j)) in self.atom_block.iter().zip(&self.atom_index).enumerate() {
                if ab == b {
                    at[j] += grad_y[k];
                }
            }
            let mut tail = 0.0;
            for j in (0..bl.support.len()).rev() {
                tail += at[j];
                if j > 0 {
                    out[bl.a[j - 1][i]] += tail;
                }
            }
            out[bl.c[i]] += tail;
        }
    }

    /// Registers `θ` as LP variables with their bounds and budget rows.
    pub fn add_to_model(&self, model: &mut LpModel) -> Vec<usize> {
        let mut vars = vec![0; self.dim];
        for bl in &self.blocks {
            let mut row = Affine::default();
            for &ci in &bl.c {
                vars[ci] = model.var(-self.bound, self.bound);
                row.add_term(vars[ci], 1.0);
            }
            model.constrain(&row, Cmp::Eq, bl.support[0]);
            for (ak, &gap) in bl.a.iter().zip(&bl.gaps) {
                let mut row = Affine::default();
                for &ai in ak {
                    vars[ai] = model.var(0.0, gap);
                    row.add_term(vars[ai], 1.0);
                }
                model.constrain(&row, Cmp::Eq, gap);
            }
        }
        vars
    }

    /// Equal split.
    pub fn initial(&self) -> Vec<f64> {
        let mut theta = vec![0.0; self.dim];
        let share = 1.0 / self.n as f64;
        for bl in &self.blocks {
            for &ci in &bl.c {
                theta[ci] = share * bl.support[0];
            }
            for (ak, &gap) in bl.a.iter().zip(&bl.gaps) {
                for &ai in ak {
                    theta[ai] = share * gap;
                }
            }
        }
        self.project(&mut theta);
        theta
    }

    /// Removes from `g` its component normal to the budget rows, leaving the
    /// tangent part; projections of `θ − αg` are unchanged.
    pub fn center(&self, g: &mut [f64]) {
        let mut center_group = |idx: &[usize]| {
            let mean = idx.iter().map(|&k| g[k]).sum::<f64>() / idx.len() as f64;
            for &k in idx {
                g[k] -= mean;
            }
        };
        for bl in &self.blocks {
            center_group(&bl.c);
            for ak in &bl.a {
                center_group(ak);
            }
        }
    }

    /// Budget rows as (indices, lower bound, upper bound).
    pub fn groups(&self) -> Vec<(Vec<usize>, f64, f64)> {
        let mut out = Vec::new();
        for bl in &self.blocks {
            out.push((bl.c.clone(), -self.bound, self.bound));
            for (ak, &gap) in bl.a.iter().zip(&bl.gaps) {
                out.push((ak.clone(), 0.0, gap));
            }
        }
        out
    }

    /// `∂Y_i/∂θ` as an atoms × dim matrix.
    pub fn jacobian(&self, i: usize) -> nalgebra::DMatrix<f64> {
        let m = self.atoms();
        let mut jac = nalgebra::DMatrix::zeros(m, self.dim);
        let mut unit = vec![0.0; m];
        let mut row = vec![0.0; self.dim];
        for k in 0..m {
            unit[k] = 1.0;
            row.iter_mut().for_each(|v| *v = 0.0);
            self.pullback(i, &unit, &mut row);
            for (c, v) in row.iter().enumerate() {
                jac[(k, c)] = *v;
            }
            unit[k] = 0.0;
        }
        jac
    }

    /// Largest support range over the blocks.
    pub fn span(&self) -> f64 {
        self.blocks
            .iter()
            .map(|bl| bl.support[bl.support.len() - 1] - bl.support[0])
            .fold(0.0, f64::max)
    }

    /// Euclidean projection onto the feasible set, a product of capped
    /// simplices.
    pub fn project(&self, theta: &mut [f64]) {
        let mut buf = Vec::with_capacity(self.n);
        for bl in &self.blocks {
            buf.clear();
            buf.extend(bl.c.iter().map(|&ci| theta[ci]));
            project_capped(&mut buf, -self.bound, self.bound, bl.support[0]);
            for (&ci, v) in bl.c.iter().zip(&buf) {
                theta[ci] = *v;
            }
            for (ak, &gap) in bl.a.iter().zip(&bl.gaps) {
                buf.clear();
                buf.extend(ak.iter().map(|&ai| theta[ai]));
                project_capped(&mut buf, 0.0, gap, gap);
                for (&ai, v) in ak.iter().zip(&buf) {
                    theta[ai] = *v;
                }
            }
        }
    }

    pub fn scheme(&self, theta: &[f64]) -> ComonotoneScheme {
        ComonotoneScheme {
            blocks: self
                .blocks
                .iter()
                .map(|bl| BlockScheme {
                    support: bl.support.clone(),
                    intercepts: bl.c.iter().map(|&ci| theta[ci]).collect(),
                    increments: (0..self.n)
                        .map(|i| bl.a.iter().map(|ak| theta[ak[i]]).collect())
                        .collect(),
                })
                .collect(),
        }
    }

    /// Largest intercept magnitude.
    pub fn intercept_norm(&self, theta: &[f64]) -> f64 {
        self.blocks
            .iter()
            .flat_map(|bl| bl.c.iter().map(|&ci| theta[ci].abs()))
            .fold(0.0, f64::max)
    }

    pub fn intercept_vars<'a>(&'a self) -> impl Iterator<Item = usize> + 'a {
        self.blocks.iter().flat_map(|bl| bl.c.iter().copied())
    }
}

/// Projects `v` onto `{lo ≤ x ≤ hi, Σx = total}` by locating the shift `λ`
/// with `Σ clamp(v − λ) = total` among the breakpoints.
pub(crate) fn project_capped(v: &mut [f64], lo: f64, hi: f64, total: f64) {
    let n = v.len();
    if n == 0 {
        return;
    }
    let h = |lambda: f64, v: &[f64]| -> f64 { v.iter().map(|x| (x - lambda).clamp(lo, hi)).sum() };
    let mut bps: Vec<f64> = v.iter().flat_map(|x| [x - hi, x - lo]).collect();
    bps.sort_by(f64::total_cmp);
    let (mut left, mut right) = (bps[0], bps[bps.len() - 1]);
    // h is nonincreasing: h(left) = n·hi, h(right) = n·lo.
    for w in bps.windows(2) {
        if h(w[0], v) >= total && h(w[1], v) <= total {
            left = w[0];
            right = w[1];
            break;
        }
    }
    let (hl, hr) = (h(left, v), h(right, v));
    let lambda = if hl - hr > 0.0 {
        left + (hl - total) / (hl - hr) * (right - left)
    } else {
        left
    };
    for x in v.iter_mut() {
        *x = (*x - lambda).clamp(lo, hi);
    }
}
