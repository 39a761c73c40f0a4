//! Max-margin feasibility for small linear matrix inequalities.
//!
//! Decision variables are a symmetric `X` (n×n) and a general `Y` (m×n),
//! packed into one vector `u`. Constraints are symmetric matrices that
//! depend linearly on `(X, Y)`, optionally restricted to an affine subspace
//! `E u = e` (trace normalization, equality-form Lyapunov equations).
//! The solver maximizes `t` subject to `F_b(u) ⪰ t·I` for every block `b`
//! with a log-det barrier and damped Newton steps.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{lambda_min_sym, min_norm_solve, symmetrize};

/// Layout of the packed `(X, Y)` decision vector: the upper triangle of `X`
/// row by row, followed by `Y` in row-major order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecisionSpace {
    pub n: usize,
    pub m: usize,
}

impl DecisionSpace {
    pub fn new(n: usize, m: usize) -> Self {
        DecisionSpace { n, m }
    }

    fn sym_len(&self) -> usize {
        self.n * (self.n + 1) / 2
    }

    pub fn dim(&self) -> usize {
        self.sym_len() + self.m * self.n
    }

    pub fn unpack(&self, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.n;
        let mut x = DMatrix::zeros(n, n);
        let mut k = 0;
        for i in 0..n {
            for j in i..n {
                x[(i, j)] = u[k];
                x[(j, i)] = u[k];
                k += 1;
            }
        }
        let y = DMatrix::from_fn(self.m, n, |r, c| u[k + r * n + c]);
        (x, y)
    }

    pub fn pack(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> DVector<f64> {
        let n = self.n;
        let mut u = DVector::zeros(self.dim());
        let mut k = 0;
        for i in 0..n {
            for j in i..n {
                u[k] = 0.5 * (x[(i, j)] + x[(j, i)]);
                k += 1;
            }
        }
        for r in 0..self.m {
            for c in 0..n {
                u[k + r * n + c] = y[(r, c)];
            }
        }
        u
    }

    /// Row functional `u ↦ trace(X)`.
    pub fn trace_row(&self) -> DVector<f64> {
        let mut row = DVector::zeros(self.dim());
        let mut k = 0;
        for i in 0..self.n {
            for j in i..self.n {
                if i == j {
                    row[k] = 1.0;
                }
                k += 1;
            }
        }
        row
    }

    /// Rows expressing the upper triangle of a symmetric matrix-valued linear
    /// map, one row per entry, so `map(X, Y) = 0` becomes `E u = 0`.
    pub fn linear_map_rows<F>(&self, map: F) -> DMatrix<f64>
    where
        F: Fn(&DMatrix<f64>, &DMatrix<f64>) -> DMatrix<f64>,
    {
        let dim = self.dim();
        let images: Vec<DMatrix<f64>> = (0..dim)
            .map(|k| {
                let (x, y) = self.unpack(&unit(dim, k));
                map(&x, &y)
            })
            .collect();
        let size = images.first().map_or(0, |m| m.nrows());
        let rows = size * (size + 1) / 2;
        let mut e = DMatrix::zeros(rows, dim);
        for (k, img) in images.iter().enumerate() {
            let mut r = 0;
            for i in 0..size {
                for j in i..size {
                    e[(r, k)] = img[(i, j)];
                    r += 1;
                }
            }
        }
        e
    }
}

fn unit(dim: usize, k: usize) -> DVector<f64> {
    let mut v = DVector::zeros(dim);
    v[k] = 1.0;
    v
}

/// Block-diagonal affine matrix function `F(w) = F₀ + Σ w_k F_k` over the
/// reduced coordinates `w` of the admissible affine subspace
/// `u = particular + basis · w`.
pub struct AffineLmi {
    space: DecisionSpace,
    particular: DVector<f64>,
    basis: DMatrix<f64>,
    constant: Vec<DMatrix<f64>>,
    terms: Vec<Vec<DMatrix<f64>>>,
}

/// Linear map from `(X, Y)` to the list of symmetric constraint blocks.
pub type BlockMap<'a> = dyn Fn(&DMatrix<f64>, &DMatrix<f64>) -> Vec<DMatrix<f64>> + 'a;

impl AffineLmi {
    /// Builds the reduced problem for the constraint blocks `map(X, Y)`
    /// restricted to `equalities · u = rhs`.
    pub fn new(
        space: DecisionSpace,
        map: &BlockMap<'_>,
        equalities: &DMatrix<f64>,
        rhs: &DVector<f64>,
    ) -> Result<Self> {
        let (particular, basis) = min_norm_solve(equalities, rhs, 1e-11);
        let residual = (equalities * &particular - rhs).amax();
        if residual > 1e-8 * (1.0 + rhs.amax()) {
            return Err(Error::Infeasible {
                best_margin: f64::NEG_INFINITY,
                detail: format!("equality constraints are inconsistent (residual {residual:.3e})"),
            });
        }
        let eval = |u: &DVector<f64>| {
            let (x, y) = space.unpack(u);
            map(&x, &y).into_iter().map(|b| symmetrize(&b)).collect::<Vec<_>>()
        };
        let constant = eval(&particular);
        let terms = basis.column_iter().map(|col| eval(&col.into_owned())).collect();
        Ok(AffineLmi { space, particular, basis, constant, terms })
    }

    pub fn reduced_dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn space(&self) -> DecisionSpace {
        self.space
    }

    /// Reduced coordinates of the admissible point closest to `u`.
    pub fn reduce(&self, u: &DVector<f64>) -> DVector<f64> {
        self.basis.transpose() * (u - &self.particular)
    }

    pub fn lift(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.particular + &self.basis * w
    }

    pub fn blocks(&self, w: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let mut out = self.constant.clone();
        for (k, term) in self.terms.iter().enumerate() {
            if w[k] != 0.0 {
                for (acc, t) in out.iter_mut().zip(term) {
                    *acc += t * w[k];
                }
            }
        }
        out
    }

    /// Smallest eigenvalue over all blocks.
    pub fn margin(&self, w: &DVector<f64>) -> f64 {
        self.blocks(w).iter().map(lambda_min_sym).fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BarrierOptions {
    /// Maximum number of Newton steps over all centering rounds.
    pub max_newton_steps: usize,
    /// Duality-gap target `(Σ block sizes) / c`.
    pub gap_tol: f64,
    /// Stop as soon as the margin exceeds this value.
    pub stop_at_margin: Option<f64>,
}

impl Default for BarrierOptions {
    fn default() -> Self {
        BarrierOptions { max_newton_steps: 2_000, gap_tol: 1e-9, stop_at_margin: None }
    }
}

#[derive(Debug, Clone)]
pub struct MarginOptimum {
    /// Point in the full decision space.
    pub u: DVector<f64>,
    pub margin: f64,
    pub newton_steps: usize,
}

const BOX_RADIUS: f64 = 1e6;

struct Slack {
    inverses: Vec<DMatrix<f64>>,
    log_det: f64,
}

fn slack(blocks: &[DMatrix<f64>], t: f64) -> Option<Slack> {
    let mut inverses = Vec::with_capacity(blocks.len());
    let mut log_det = 0.0;
    for b in blocks {
        let n = b.nrows();
        let shifted = b - DMatrix::<f64>::identity(n, n) * t;
        let chol = Cholesky::new(shifted)?;
        log_det += 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        inverses.push(chol.inverse());
    }
    Some(Slack { inverses, log_det })
}

/// Maximizes the smallest eigenvalue of the affine block matrix starting from
/// reduced point `w0`.
pub fn maximize_margin(lmi: &AffineLmi, w0: &DVector<f64>, opts: &BarrierOptions) -> MarginOptimum {
    let p = lmi.reduced_dim();
    let total_size: usize = lmi.constant.iter().map(|b| b.nrows()).sum();

    let mut w = w0.clone();
    let mut t = lmi.margin(&w) - 1.0;
    let mut best = (w.clone(), lmi.margin(&w));
    let mut weight = 1.0;
    let mut steps = 0;

    // Wide box on the reduced coordinates keeps the barrier bounded below
    // along directions the constraint blocks do not see.
    let radius = BOX_RADIUS * (1.0 + w0.amax());
    let box_log = |w: &DVector<f64>| -> Option<f64> {
        w.iter()
            .map(|&v| if v.abs() < radius { Some((radius - v).ln() + (radius + v).ln()) } else { None })
            .sum::<Option<f64>>()
    };
    let objective = |w: &DVector<f64>, t: f64, weight: f64| -> Option<f64> {
        let b = box_log(w)?;
        slack(&lmi.blocks(w), t).map(|s| -weight * t - s.log_det - b)
    };

    'outer: loop {
        // Centering for the current barrier weight.
        loop {
            if steps >= opts.max_newton_steps {
                break 'outer;
            }
            let Some(s) = slack(&lmi.blocks(&w), t) else { break 'outer };
            // Q_{b,k} = S_b^{-1} F_{b,k}; the t-direction has F_{b,t} = -I.
            let mut grad = DVector::zeros(p + 1);
            let mut hess = DMatrix::zeros(p + 1, p + 1);
            let q: Vec<Vec<DMatrix<f64>>> = (0..p)
                .map(|k| s.inverses.iter().zip(&lmi.terms[k]).map(|(si, f)| si * f).collect())
                .collect();
            for k in 0..p {
                grad[k] = -q[k].iter().map(|m| m.trace()).sum::<f64>();
                for l in 0..=k {
                    let h: f64 = q[k].iter().zip(&q[l]).map(|(a, b)| a.component_mul(&b.transpose()).sum()).sum();
                    hess[(k, l)] = h;
                    hess[(l, k)] = h;
                }
                // Cross term with t: tr(Q_k · (-S^{-1})).
                let h: f64 = q[k].iter().zip(&s.inverses).map(|(a, si)| -a.component_mul(si).sum()).sum();
                hess[(k, p)] = h;
                hess[(p, k)] = h;
            }
            for k in 0..p {
                let (lo, hi) = (radius + w[k], radius - w[k]);
                grad[k] += 1.0 / hi - 1.0 / lo;
                hess[(k, k)] += 1.0 / (hi * hi) + 1.0 / (lo * lo);
            }
            grad[p] = -weight + s.inverses.iter().map(|si| si.trace()).sum::<f64>();
            hess[(p, p)] = s.inverses.iter().map(|si| si.component_mul(si).sum()).sum();

            let Some(dir) = newton_direction(&hess, &grad) else { break 'outer };
            let decrement = -grad.dot(&dir);
            if !(decrement > 1e-12) {
                break;
            }
            let Some(current) = objective(&w, t, weight) else { break 'outer };
            let mut alpha = 1.0;
            let mut accepted = false;
            while alpha > 1e-12 {
                let w_new = &w + dir.rows(0, p) * alpha;
                let t_new = t + dir[p] * alpha;
                if let Some(val) = objective(&w_new, t_new, weight) {
                    if val <= current - 0.25 * alpha * decrement {
                        w = w_new;
                        t = t_new;
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            steps += 1;
            if !accepted {
                break;
            }
            let m = lmi.margin(&w);
            if m > best.1 {
                best = (w.clone(), m);
            }
            if opts.stop_at_margin.is_some_and(|target| best.1 >= target) {
                break 'outer;
            }
            if decrement < 1e-9 {
                break;
            }
        }
        if total_size as f64 / weight < opts.gap_tol {
            break;
        }
        weight *= 8.0;
    }

    MarginOptimum { u: lmi.lift(&best.0), margin: best.1, newton_steps: steps }
}

fn newton_direction(hess: &DMatrix<f64>, grad: &DVector<f64>) -> Option<DVector<f64>> {
    let scale = hess.diagonal().amax().max(1e-300);
    let mut ridge = 0.0;
    for _ in 0..12 {
        let mut h = hess.clone();
        for i in 0..h.nrows() {
            h[(i, i)] += ridge;
        }
        if let Some(chol) = Cholesky::new(h) {
            let d = chol.solve(&(-grad));
            if d.iter().all(|v| v.is_finite()) {
                return Some(d);
            }
        }
        ridge = if ridge == 0.0 { 1e-14 * scale } else { ridge * 100.0 };
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pack_unpack_roundtrip() {
        let space = DecisionSpace::new(3, 2);
        let u = DVector::from_fn(space.dim(), |i, _| i as f64 + 0.5);
        let (x, y) = space.unpack(&u);
        assert_eq!(x, x.transpose());
        assert_eq!(space.pack(&x, &y), u);
    }

    #[test]
    fn maximizes_min_eigenvalue_under_trace_constraint() {
        // max λ_min(X) subject to trace X = 3 is attained at X = I.
        let space = DecisionSpace::new(3, 1);
        let map = |x: &DMatrix<f64>, _y: &DMatrix<f64>| vec![x.clone()];
        let eq = DMatrix::from_row_slice(1, space.dim(), space.trace_row().as_slice());
        let lmi = AffineLmi::new(space, &map, &eq, &DVector::from_element(1, 3.0)).unwrap();
        // Y is unconstrained here, so the reduced problem has a flat direction.
        let init = DMatrix::from_row_slice(3, 3, &[2.5, 0.1, 0.0, 0.1, 0.4, 0.0, 0.0, 0.0, 0.1]);
        let w0 = lmi.reduce(&space.pack(&init, &DMatrix::zeros(1, 3)));
        let opt = maximize_margin(&lmi, &w0, &BarrierOptions::default());
        assert!((opt.margin - 1.0).abs() < 1e-7, "margin {}", opt.margin);
        let (x, _) = space.unpack(&opt.u);
        assert!((x - DMatrix::identity(3, 3)).amax() < 1e-6);
    }

    #[test]
    fn scalar_lyapunov_margin() {
        // Blocks [X, -2Y - X] with X = 1: max min(1, -2Y - 1) → Y → -1, margin 1.
        let space = DecisionSpace::new(1, 1);
        let map = |x: &DMatrix<f64>, y: &DMatrix<f64>| vec![x.clone(), -(y * 2.0) - x];
        let eq = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let lmi = AffineLmi::new(space, &map, &eq, &DVector::from_element(1, 1.0)).unwrap();
        let w0 = lmi.reduce(&DVector::from_vec(vec![1.0, 0.0]));
        let opt = maximize_margin(&lmi, &w0, &BarrierOptions::default());
        assert!(opt.margin > 0.0);
        let (_, y) = space.unpack(&opt.u);
        assert!(y[(0, 0)] < -0.5);
    }
}
