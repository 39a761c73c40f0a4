use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{all_finite, general_inverse, min_norm_solve, numerical_rank};
use crate::matrix_serde;

/// Relative singular-value threshold for the controllability rank test.
pub const CONTROLLABILITY_RANK_TOL: f64 = 1e-9;

/// Linear plant `ẋ = Ax + Bu`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantModel {
    #[serde(rename = "A", with = "matrix_serde")]
    pub a: DMatrix<f64>,
    #[serde(rename = "B", with = "matrix_serde")]
    pub b: DMatrix<f64>,
}

impl PlantModel {
    /// Builds a plant and checks controllability.
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        let plant = Self::unchecked(a, b)?;
        let rank = plant.controllability_rank();
        if rank < plant.n() {
            return Err(Error::NotControllable { rank, n: plant.n() });
        }
        Ok(plant)
    }

    /// Builds a plant after shape checks only.
    pub fn unchecked(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() || a.nrows() == 0 {
            return Err(Error::InvalidInput(format!("A must be square and non-empty, got {}x{}", a.nrows(), a.ncols())));
        }
        if b.nrows() != a.nrows() || b.ncols() == 0 {
            return Err(Error::InvalidInput(format!("B must be {}xm with m ≥ 1, got {}x{}", a.nrows(), b.nrows(), b.ncols())));
        }
        if !all_finite(&a) || !all_finite(&b) {
            return Err(Error::InvalidInput("plant matrices have non-finite entries".into()));
        }
        Ok(PlantModel { a, b })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    /// `[B, AB, …, A^{n−1}B]`.
    pub fn controllability_matrix(&self) -> DMatrix<f64> {
        let (n, m) = (self.n(), self.m());
        let mut out = DMatrix::zeros(n, n * m);
        let mut block = self.b.clone();
        for k in 0..n {
            out.view_mut((0, k * m), (n, m)).copy_from(&block);
            block = &self.a * block;
        }
        out
    }

    pub fn controllability_rank(&self) -> usize {
        numerical_rank(&self.controllability_matrix(), CONTROLLABILITY_RANK_TOL)
    }

    pub fn is_controllable(&self) -> bool {
        self.controllability_rank() == self.n()
    }
}

/// Solution of the homogenization equations
/// `A·G0 + B·Y0 = G0·A + A`, `G0·B = 0`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HomogenizationResult {
    #[serde(rename = "G0", with = "matrix_serde")]
    pub g0: DMatrix<f64>,
    #[serde(rename = "Y0", with = "matrix_serde")]
    pub y0: DMatrix<f64>,
    /// Homogenizing gain `K0 = Y0 (G0 − I)^{-1}`.
    #[serde(rename = "K0", with = "matrix_serde")]
    pub k0: DMatrix<f64>,
    /// `A0 = A + B·K0`, nilpotent.
    #[serde(rename = "A0", with = "matrix_serde")]
    pub a0: DMatrix<f64>,
    /// Generator `G_d = I + μ·G0`.
    #[serde(rename = "Gd", with = "matrix_serde")]
    pub generator: DMatrix<f64>,
    pub mu: f64,
    pub residual_eq: f64,
    pub residual_gb: f64,
    pub nilpotency_residual: f64,
}

impl HomogenizationResult {
    pub fn k0_is_zero(&self) -> bool {
        self.k0.amax() <= 1e-9
    }
}

/// Minimum-norm solution of the homogenization equations, vectorized into a
/// single least-squares problem over `(vec G0, vec Y0)`.
pub fn solve_homogenization(plant: &PlantModel, mu: f64) -> Result<HomogenizationResult> {
    if !(-1.0..0.0).contains(&mu) {
        return Err(Error::InvalidInput(format!("homogeneity degree {mu} outside [-1, 0)")));
    }
    let rank = plant.controllability_rank();
    if rank < plant.n() {
        return Err(Error::NotControllable { rank, n: plant.n() });
    }
    let (a, b) = (&plant.a, &plant.b);
    let (n, m) = (plant.n(), plant.m());
    let ident = DMatrix::<f64>::identity(n, n);

    // Column-major vec: vec(A G0) = (I⊗A) vec G0, vec(G0 A) = (Aᵀ⊗I) vec G0,
    // vec(B Y0) = (I⊗B) vec Y0, vec(G0 B) = (Bᵀ⊗I) vec G0.
    let unknowns = n * n + m * n;
    let rows = n * n + n * m;
    let mut sys = DMatrix::zeros(rows, unknowns);
    sys.view_mut((0, 0), (n * n, n * n))
        .copy_from(&(ident.kronecker(a) - a.transpose().kronecker(&ident)));
    sys.view_mut((0, n * n), (n * n, m * n)).copy_from(&ident.kronecker(b));
    sys.view_mut((n * n, 0), (n * m, n * n)).copy_from(&b.transpose().kronecker(&ident));
    let mut rhs = DVector::zeros(rows);
    rhs.rows_mut(0, n * n).copy_from(&DVector::from_column_slice(a.as_slice()));

    let (sol, _) = min_norm_solve(&sys, &rhs, 1e-12);
    let g0 = DMatrix::from_column_slice(n, n, &sol.as_slice()[..n * n]);
    let y0 = DMatrix::from_column_slice(m, n, &sol.as_slice()[n * n..]);

    let residual_eq = (a * &g0 + b * &y0 - &g0 * a - a).norm();
    let residual_gb = (&g0 * b).norm();
    let tol_eq = 1e-9 * (1.0 + a.norm());
    let tol_gb = 1e-9 * (1.0 + b.norm());
    if residual_eq > tol_eq {
        return Err(Error::NoSolution { residual: residual_eq, tolerance: tol_eq });
    }
    if residual_gb > tol_gb {
        return Err(Error::NoSolution { residual: residual_gb, tolerance: tol_gb });
    }

    let shifted = &g0 - &ident;
    let inv = general_inverse(&shifted).map_err(|_| Error::HomogenizationSingular)?;
    let k0 = &y0 * inv;
    let a0 = a + b * &k0;
    let generator = &ident + &g0 * mu;
    let nilpotency_residual = nilpotency_residual(&a0);
    let a0_norm = a0.norm();
    if nilpotency_residual > 1e-9 * (1.0 + a0_norm.powi(n as i32)) {
        return Err(Error::NoSolution { residual: nilpotency_residual, tolerance: 1e-9 * (1.0 + a0_norm.powi(n as i32)) });
    }

    Ok(HomogenizationResult { g0, y0, k0, a0, generator, mu, residual_eq, residual_gb, nilpotency_residual })
}

/// `‖A0^n‖_F`.
pub fn nilpotency_residual(a0: &DMatrix<f64>) -> f64 {
    let mut pow = DMatrix::<f64>::identity(a0.nrows(), a0.nrows());
    for _ in 0..a0.nrows() {
        pow = &pow * a0;
    }
    pow.norm()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, c, v)
    }

    #[test]
    fn double_integrator() {
        let plant = PlantModel::new(m(2, 2, &[0.0, 1.0, 0.0, 0.0]), m(2, 1, &[0.0, 1.0])).unwrap();
        let h = solve_homogenization(&plant, -1.0).unwrap();
        assert!((&h.g0 - m(2, 2, &[-1.0, 0.0, 0.0, 0.0])).amax() < 1e-12);
        assert!(h.y0.amax() < 1e-12);
        assert!(h.k0.amax() < 1e-12);
        assert!((&h.generator - m(2, 2, &[2.0, 0.0, 0.0, 1.0])).amax() < 1e-12);
    }

    #[test]
    fn scalar_integrator() {
        let plant = PlantModel::new(m(1, 1, &[0.0]), m(1, 1, &[1.0])).unwrap();
        let h = solve_homogenization(&plant, -1.0).unwrap();
        assert!(h.g0.amax() < 1e-14);
        assert!(h.k0.amax() < 1e-14);
        assert!((h.generator[(0, 0)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn non_nilpotent_plant_gets_homogenizing_gain() {
        // Double integrator with a spring term; K0 must cancel it.
        let plant = PlantModel::new(m(2, 2, &[0.0, 1.0, -2.0, -0.5]), m(2, 1, &[0.0, 1.0])).unwrap();
        let h = solve_homogenization(&plant, -1.0).unwrap();
        assert!(h.k0.amax() > 0.1);
        assert!(h.nilpotency_residual < 1e-9);
        assert!(h.residual_eq < 1e-9 && h.residual_gb < 1e-9);
    }

    #[test]
    fn uncontrollable_plant_is_rejected() {
        let err = PlantModel::new(DMatrix::zeros(2, 2), DMatrix::zeros(2, 1)).unwrap_err();
        assert_eq!(err, Error::NotControllable { rank: 0, n: 2 });
        let plant = PlantModel::unchecked(DMatrix::zeros(2, 2), m(2, 1, &[1.0, 0.0])).unwrap();
        assert!(matches!(solve_homogenization(&plant, -1.0), Err(Error::NotControllable { .. })));
    }

    #[test]
    fn degree_out_of_range() {
        let plant = PlantModel::new(m(1, 1, &[0.0]), m(1, 1, &[1.0])).unwrap();
        assert!(solve_homogenization(&plant, 0.0).is_err());
        assert!(solve_homogenization(&plant, -1.5).is_err());
    }
}
