//! Linear dilations `d(s) = exp(s·G_d)`, the weighted Euclidean norm
//! `‖x‖ = sqrt(xᵀPx)`, and the canonical homogeneous norm they induce.
//!
//! The canonical homogeneous norm of `x ≠ 0` is `e^s` where `s` is the unique
//! solution of `‖d(−s)x‖ = 1`. Uniqueness comes from strict monotonicity of
//! the dilation, i.e. `P·G_d + G_dᵀ·P ≻ 0`.

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{all_finite, lambda_min_sym, matrix_exponential, spd_sqrt, symmetrize};

/// Default threshold on `‖x‖_P` below which a state is treated as the origin.
pub const DEFAULT_ZERO_TOL: f64 = 1e-12;

/// Target accuracy of the implicit norm equation, `|‖d(−s)x‖ − 1|`.
pub const NORM_EQUATION_TOL: f64 = 1e-12;

const MAX_BRACKET_DOUBLINGS: usize = 60;
/// Largest eigenvector condition number accepted for the modal fast path.
const MAX_MODAL_CONDITION: f64 = 1e6;
const MAX_ROOT_ITERATIONS: usize = 200;

/// Checks strict monotonicity of the dilation generated by `generator` with
/// respect to the norm weighted by `weight`.
///
/// Returns `(λ_min(PG + GᵀP) > 0, β)` with
/// `β = ½ λ_min(P^{1/2} G P^{-1/2} + P^{-1/2} Gᵀ P^{1/2})`.
pub fn check_monotonicity(generator: &DMatrix<f64>, weight: &DMatrix<f64>) -> Result<(bool, f64)> {
    let (root, inv_root) = spd_sqrt(weight)?;
    if !generator.is_square() || generator.nrows() != weight.nrows() {
        return Err(Error::InvalidInput(format!(
            "generator is {}x{} but weight is {}x{}",
            generator.nrows(),
            generator.ncols(),
            weight.nrows(),
            weight.ncols()
        )));
    }
    let lyap = weight * generator + generator.transpose() * weight;
    let ok = lambda_min_sym(&lyap) > 0.0;
    let similar = &root * generator * &inv_root;
    let beta = 0.5 * lambda_min_sym(&(&similar + similar.transpose()));
    Ok((ok, beta))
}

/// Value of the canonical homogeneous norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HomNormValue {
    pub value: f64,
    /// `ln ‖x‖_d`, absent at the origin.
    pub log_value: Option<f64>,
}

impl HomNormValue {
    pub const ZERO: HomNormValue = HomNormValue { value: 0.0, log_value: None };

    fn from_log(s: f64) -> Self {
        HomNormValue { value: s.exp(), log_value: Some(s) }
    }

    pub fn is_zero(&self) -> bool {
        self.log_value.is_none()
    }
}

/// A strictly monotone linear dilation together with the weight of the
/// Euclidean norm it is monotone with respect to.
#[derive(Debug, Clone)]
pub struct Dilation {
    generator: DMatrix<f64>,
    weight: DMatrix<f64>,
    weight_sqrt: DMatrix<f64>,
    weight_inv_sqrt: DMatrix<f64>,
    beta: f64,
    zero_tol: f64,
    modal: Option<ModalForm>,
}

/// `G = V·diag(λ)·V⁻¹` with real `λ`, so `d(s) = V·diag(e^{sλ})·V⁻¹`
/// costs no matrix exponential.
#[derive(Debug, Clone)]
struct ModalForm {
    vectors: DMatrix<f64>,
    inverse: DMatrix<f64>,
    rates: DVector<f64>,
}

impl ModalForm {
    /// Real diagonalization, or `None` for complex spectra, defective or
    /// badly conditioned eigenbases.
    fn new(g: &DMatrix<f64>) -> Option<Self> {
        let n = g.nrows();
        let scale = 1.0 + g.amax();
        let mut eigs: Vec<f64> = Vec::with_capacity(n);
        for ev in g.complex_eigenvalues().iter() {
            if ev.im.abs() > 1e-10 * scale {
                return None;
            }
            eigs.push(ev.re);
        }
        eigs.sort_by(f64::total_cmp);
        let mut vectors = DMatrix::zeros(n, n);
        let mut rates = DVector::zeros(n);
        let mut col = 0;
        let mut i = 0;
        while i < n {
            let mut j = i + 1;
            while j < n && eigs[j] - eigs[j - 1] <= 1e-8 * scale {
                j += 1;
            }
            let lambda = eigs[i..j].iter().sum::<f64>() / (j - i) as f64;
            let shifted = g - DMatrix::identity(n, n) * lambda;
            let svd = nalgebra::linalg::SVD::new(shifted, false, true);
            let v_t = svd.v_t?;
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
            for &k in &order[..j - i] {
                if svd.singular_values[k] > 1e-7 * scale {
                    return None;
                }
                vectors.set_column(col, &v_t.row(k).transpose());
                rates[col] = lambda;
                col += 1;
            }
            i = j;
        }
        let inverse = vectors.clone().try_inverse()?;
        let cond = vectors.norm() * inverse.norm();
        let rebuilt = &vectors * DMatrix::from_diagonal(&rates) * &inverse;
        if !(cond <= MAX_MODAL_CONDITION) || (rebuilt - g).amax() > 1e-12 * scale * cond {
            return None;
        }
        Some(ModalForm { vectors, inverse, rates })
    }

    fn exp_diag(&self, s: f64) -> DVector<f64> {
        self.rates.map(|r| (s * r).exp())
    }
}

/// A vector prepared for repeated evaluation of `d(−s)x`.
enum Orbit<'a> {
    Modal { form: &'a ModalForm, coords: DVector<f64> },
    Dense { dilation: &'a Dilation, x: &'a DVector<f64> },
}

impl Orbit<'_> {
    fn shrink(&self, s: f64) -> Result<DVector<f64>> {
        match self {
            Orbit::Modal { form, coords } => {
                if !s.is_finite() {
                    return Err(Error::InvalidInput(format!("dilation parameter {s}")));
                }
                Ok(&form.vectors * form.exp_diag(-s).component_mul(coords))
            }
            Orbit::Dense { dilation, x } => Ok(dilation.matrix(-s)? * *x),
        }
    }
}

impl Dilation {
    /// Validates and builds a dilation. Rejects weights that are not SPD,
    /// generators that are not anti-Hurwitz, and pairs that violate
    /// `PG + GᵀP ≻ 0`.
    pub fn new(generator: DMatrix<f64>, weight: DMatrix<f64>) -> Result<Self> {
        if !all_finite(&generator) {
            return Err(Error::InvalidInput("generator has non-finite entries".into()));
        }
        let weight = symmetrize(&weight);
        let (ok, beta) = check_monotonicity(&generator, &weight)?;
        if !ok || beta <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "dilation is not strictly monotone for this weight (beta = {beta:.3e})"
            )));
        }
        // Monotonicity already forces Re λ(G) ≥ β > 0; checked explicitly anyway
        // since the limits at s → ±∞ depend on it.
        if let Some(ev) = generator.complex_eigenvalues().iter().find(|ev| ev.re <= 0.0) {
            return Err(Error::InvalidInput(format!("generator is not anti-Hurwitz: eigenvalue {ev}")));
        }
        let (weight_sqrt, weight_inv_sqrt) = spd_sqrt(&weight)?;
        let modal = ModalForm::new(&generator);
        Ok(Dilation { generator, weight, weight_sqrt, weight_inv_sqrt, beta, zero_tol: DEFAULT_ZERO_TOL, modal })
    }

    pub fn with_zero_tol(mut self, zero_tol: f64) -> Self {
        self.zero_tol = zero_tol;
        self
    }

    pub fn dim(&self) -> usize {
        self.generator.nrows()
    }

    pub fn generator(&self) -> &DMatrix<f64> {
        &self.generator
    }

    pub fn weight(&self) -> &DMatrix<f64> {
        &self.weight
    }

    pub fn weight_sqrt(&self) -> &DMatrix<f64> {
        &self.weight_sqrt
    }

    pub fn weight_inv_sqrt(&self) -> &DMatrix<f64> {
        &self.weight_inv_sqrt
    }

    /// Monotonicity margin β.
    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn zero_tol(&self) -> f64 {
        self.zero_tol
    }

    /// `d(s) = exp(s·G_d)`.
    pub fn matrix(&self, s: f64) -> Result<DMatrix<f64>> {
        if !s.is_finite() {
            return Err(Error::InvalidInput(format!("dilation parameter {s}")));
        }
        match &self.modal {
            Some(form) => Ok(&form.vectors * DMatrix::from_diagonal(&form.exp_diag(s)) * &form.inverse),
            None => matrix_exponential(&(&self.generator * s)),
        }
    }

    fn orbit<'a>(&'a self, x: &'a DVector<f64>) -> Orbit<'a> {
        match &self.modal {
            Some(form) => Orbit::Modal { form, coords: &form.inverse * x },
            None => Orbit::Dense { dilation: self, x },
        }
    }

    pub fn apply(&self, s: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_vector(x)?;
        Ok(self.matrix(s)? * x)
    }

    /// `‖x‖_P = sqrt(xᵀPx)`.
    pub fn weighted_norm(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.weight * x)).max(0.0).sqrt()
    }

    pub fn is_origin(&self, x: &DVector<f64>) -> bool {
        self.weighted_norm(x) < self.zero_tol
    }

    fn check_vector(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::InvalidInput(format!("vector has length {} but dimension is {}", x.len(), self.dim())));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("vector has non-finite entries".into()));
        }
        Ok(())
    }

    /// Canonical homogeneous norm `‖x‖_d`.
    pub fn canonical_norm(&self, x: &DVector<f64>) -> Result<HomNormValue> {
        self.canonical_norm_from(x, None)
    }

    /// Same as [`canonical_norm`](Self::canonical_norm) with a starting guess
    /// for `ln ‖x‖_d`; trajectories evaluate the norm at nearby states, where
    /// the previous value brackets the root in one or two steps.
    pub fn canonical_norm_from(&self, x: &DVector<f64>, log_guess: Option<f64>) -> Result<HomNormValue> {
        Ok(match self.norm_and_projection(x, log_guess)? {
            Some((s, _)) => HomNormValue::from_log(s),
            None => HomNormValue::ZERO,
        })
    }

    /// `(ln ‖x‖_d, π_d(x))`, or `None` at the origin.
    pub(crate) fn norm_and_projection(&self, x: &DVector<f64>, log_guess: Option<f64>) -> Result<Option<(f64, DVector<f64>)>> {
        self.check_vector(x)?;
        let base = self.weighted_norm(x);
        if base < self.zero_tol {
            return Ok(None);
        }
        let orbit = self.orbit(x);
        self.solve_norm_equation(&orbit, log_guess.filter(|g| g.is_finite()).unwrap_or(base.ln())).map(Some)
    }

    /// `ln ‖d(−s)x‖_P` and its derivative in `s`, with `z = d(−s)x`.
    fn log_radius(&self, orbit: &Orbit, s: f64) -> Result<(f64, f64, DVector<f64>)> {
        let z = orbit.shrink(s)?;
        let pz = &self.weight * &z;
        let sq = z.dot(&pz);
        let slope = -(pz.dot(&(&self.generator * &z))) / sq;
        Ok((0.5 * sq.ln(), slope, z))
    }

    /// Finds the root of `ln ‖d(−s)x‖ = 0`. The function is strictly
    /// decreasing in `s`, so a sign-change bracket always exists; Newton steps
    /// are taken when they stay inside the bracket, bisection otherwise.
    fn solve_norm_equation(&self, x: &Orbit, s0: f64) -> Result<(f64, DVector<f64>)> {
        let (f0, d0, z0) = self.log_radius(x, s0)?;
        if converged(&z0, &self.weight) {
            return Ok((s0, z0));
        }
        // One Newton step from the guess usually lands inside a tight bracket.
        let mut probe = s0 - f0 / d0;
        if !probe.is_finite() {
            probe = s0 + f0.signum();
        }
        let (mut lo, f_lo, mut hi, f_hi);
        let (fp, _, zp) = self.log_radius(x, probe)?;
        if converged(&zp, &self.weight) {
            return Ok((probe, zp));
        }
        if (f0 > 0.0) != (fp > 0.0) {
            if s0 < probe {
                (lo, f_lo, hi, f_hi) = (s0, f0, probe, fp);
            } else {
                (lo, f_lo, hi, f_hi) = (probe, fp, s0, f0);
            }
        } else {
            // Expand from the guess by doubling until the sign flips.
            let dir = if f0 > 0.0 { 1.0 } else { -1.0 };
            let mut step = (probe - s0).abs().max(0.25);
            let (mut prev, mut f_prev) = (s0, f0);
            let mut found = None;
            for _ in 0..MAX_BRACKET_DOUBLINGS {
                let cand = s0 + dir * step;
                let (fc, _, _) = self.log_radius(x, cand)?;
                if (fc > 0.0) != (f0 > 0.0) {
                    found = Some((cand, fc));
                    break;
                }
                prev = cand;
                f_prev = fc;
                step *= 2.0;
            }
            let (cand, fc) = found.ok_or_else(|| Error::InvalidInput("failed to bracket the homogeneous norm".into()))?;
            if dir > 0.0 {
                (lo, f_lo, hi, f_hi) = (prev, f_prev, cand, fc);
            } else {
                (lo, f_lo, hi, f_hi) = (cand, fc, prev, f_prev);
            }
        }
        debug_assert!(f_lo > 0.0 && f_hi < 0.0);

        let mut s = 0.5 * (lo + hi);
        for _ in 0..MAX_ROOT_ITERATIONS {
            let (f, d, z) = self.log_radius(x, s)?;
            if converged(&z, &self.weight) {
                return Ok((s, z));
            }
            if f > 0.0 {
                lo = s;
            } else {
                hi = s;
            }
            let newton = s - f / d;
            s = if newton.is_finite() && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if hi - lo <= f64::EPSILON * (1.0 + s.abs()) {
                break;
            }
        }
        Ok((s, x.shrink(s)?))
    }

    /// Gradient of `‖x‖_d` as a row vector:
    /// `‖x‖_d · zᵀ P d(−s) / (zᵀ P G_d z)` with `s = ln ‖x‖_d`, `z = d(−s)x`.
    pub fn canonical_norm_gradient(&self, x: &DVector<f64>) -> Result<RowDVector<f64>> {
        let norm = self.canonical_norm(x)?;
        let s = norm.log_value.ok_or(Error::UndefinedAtOrigin)?;
        Ok(self.gradient_at(x, norm.value, s)?.0)
    }

    /// Gradient at a state whose norm is already known; also returns the
    /// projection `z = π_d(x)`.
    pub(crate) fn gradient_at(&self, x: &DVector<f64>, value: f64, s: f64) -> Result<(RowDVector<f64>, DVector<f64>)> {
        let shrink = self.matrix(-s)?;
        let z = &shrink * x;
        let pz = &self.weight * &z;
        let denom = pz.dot(&(&self.generator * &z));
        let grad = (pz.transpose() * &shrink) * (value / denom);
        Ok((grad, z))
    }

    /// Homogeneous projection onto the unit sphere `π_d(x) = d(−ln ‖x‖_d)x`.
    pub fn homogeneous_projector(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.norm_and_projection(x, None)?.ok_or(Error::UndefinedAtOrigin)?.1)
    }
}

fn converged(z: &DVector<f64>, weight: &DMatrix<f64>) -> bool {
    let r = z.dot(&(weight * z)).max(0.0).sqrt();
    (r - 1.0).abs() <= NORM_EQUATION_TOL
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn dvec(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn euclidean(n: usize) -> Dilation {
        Dilation::new(DMatrix::identity(n, n), DMatrix::identity(n, n)).unwrap()
    }

    #[test]
    fn apply_at_zero_is_identity() {
        let d = euclidean(3);
        let x = dvec(&[1.0, -2.0, 0.5]);
        assert_eq!(d.apply(0.0, &x).unwrap(), x);
    }

    #[test]
    fn standard_dilation_scales_uniformly() {
        let d = euclidean(2);
        let y = d.apply(0.7, &dvec(&[1.0, 2.0])).unwrap();
        assert!((y - dvec(&[1.0, 2.0]) * 0.7f64.exp()).amax() < 1e-14);
    }

    #[test]
    fn weighted_diagonal_dilation() {
        let g = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        let d = Dilation::new(g, DMatrix::identity(2, 2)).unwrap();
        let y = d.apply(LN_2, &dvec(&[1.0, 1.0])).unwrap();
        assert!((y - dvec(&[4.0, 2.0])).amax() < 1e-13);
    }

    #[test]
    fn monotonicity_examples() {
        let (ok, beta) = check_monotonicity(&DMatrix::identity(2, 2), &DMatrix::identity(2, 2)).unwrap();
        assert!(ok);
        assert!((beta - 1.0).abs() < 1e-15);

        let g = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 1.0]);
        let (ok, beta) = check_monotonicity(&g, &DMatrix::identity(2, 2)).unwrap();
        assert!(!ok);
        assert!((beta + 1.0).abs() < 1e-15);

        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(check_monotonicity(&DMatrix::identity(2, 2), &bad), Err(Error::InvalidWeight(_))));
    }

    #[test]
    fn euclidean_special_case() {
        let d = euclidean(2);
        let v = d.canonical_norm(&dvec(&[3.0, 4.0])).unwrap();
        assert!((v.value - 5.0).abs() < 1e-12);
        let grad = d.canonical_norm_gradient(&dvec(&[3.0, 4.0])).unwrap();
        assert!((grad[0] - 0.6).abs() < 1e-12 && (grad[1] - 0.8).abs() < 1e-12);
        let proj = d.homogeneous_projector(&dvec(&[3.0, 4.0])).unwrap();
        assert!((proj - dvec(&[0.6, 0.8])).amax() < 1e-12);
    }

    #[test]
    fn unit_sphere_points_have_unit_norm_and_are_fixed() {
        let g = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
        let d = Dilation::new(g, p).unwrap();
        let x = dvec(&[0.3, 1.0]);
        let x = &x / d.weighted_norm(&x);
        let v = d.canonical_norm(&x).unwrap();
        assert!((v.value - 1.0).abs() < 1e-12);
        assert!((d.homogeneous_projector(&x).unwrap() - &x).amax() < 1e-12);
    }

    #[test]
    fn origin_handling() {
        let d = euclidean(2);
        let zero = dvec(&[0.0, 0.0]);
        assert_eq!(d.canonical_norm(&zero).unwrap(), HomNormValue::ZERO);
        assert_eq!(d.canonical_norm_gradient(&zero), Err(Error::UndefinedAtOrigin));
        assert_eq!(d.homogeneous_projector(&zero), Err(Error::UndefinedAtOrigin));
    }

    #[test]
    fn rejects_non_monotone_and_non_spd() {
        let g = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 1.0]);
        assert!(Dilation::new(g, DMatrix::identity(2, 2)).is_err());
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(Dilation::new(DMatrix::identity(2, 2), p), Err(Error::InvalidWeight(_))));
    }

    #[test]
    fn warm_start_agrees_with_cold_start() {
        let g = DMatrix::from_row_slice(3, 3, &[3.0, -0.75, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0]);
        let d = Dilation::new(g, DMatrix::identity(3, 3)).unwrap();
        let x = dvec(&[2.0, 1.0, 1.0]);
        let cold = d.canonical_norm(&x).unwrap();
        for guess in [-30.0, -1.0, 0.0, 3.0, 40.0] {
            let warm = d.canonical_norm_from(&x, Some(guess)).unwrap();
            assert!((warm.value - cold.value).abs() < 1e-12 * cold.value);
        }
    }

    #[test]
    fn modal_and_dense_paths_agree() {
        let g = DMatrix::from_row_slice(3, 3, &[3.0, -0.75, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0]);
        let d = Dilation::new(g.clone(), DMatrix::identity(3, 3)).unwrap();
        assert!(d.modal.is_some());
        for s in [-4.0, -0.3, 0.0, 1.7, 5.0] {
            let oracle = (&g * s).exp();
            assert!((d.matrix(s).unwrap() - &oracle).amax() <= 1e-12 * oracle.amax());
        }
        assert!(euclidean(4).modal.is_some());

        // A Jordan block is not diagonalizable and goes through the exponential.
        let jordan = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        let d = Dilation::new(jordan.clone(), DMatrix::identity(2, 2)).unwrap();
        assert!(d.modal.is_none());
        assert!((d.matrix(2.0).unwrap() - (&jordan * 2.0).exp()).amax() < 1e-12);
        let x = dvec(&[0.3, -2.0]);
        let z = d.homogeneous_projector(&x).unwrap();
        assert!((d.weighted_norm(&z) - 1.0).abs() < 1e-12);

        // Complex spectrum.
        let rot = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.5, 1.0]);
        assert!(Dilation::new(rot, DMatrix::identity(2, 2)).unwrap().modal.is_none());
    }
}
