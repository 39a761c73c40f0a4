//! Dense linear-algebra helpers shared by the dilation, synthesis and
//! quantizer modules.
//!
//! Everything here works on small dynamically sized matrices (n ≤ 10 in
//! practice), so clarity wins over blocking or in-place tricks, except in
//! [`matrix_exponential`], which sits on the hot path of every homogeneous
//! norm evaluation.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub(crate) fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub(crate) fn asymmetry(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).amax()
}

/// Eigen-decomposition of the symmetric part of `m`, eigenvalues ascending.
pub fn sym_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(symmetrize(m));
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

pub fn lambda_min_sym(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m)).eigenvalues.min()
}

pub fn lambda_max_sym(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m)).eigenvalues.max()
}

/// Relative tolerance for accepting a weight matrix as symmetric.
const SYMMETRY_TOL: f64 = 1e-9;

/// Checks that `p` is symmetric positive definite and returns its symmetric
/// positive square root together with the inverse square root.
pub fn spd_sqrt(p: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !p.is_square() {
        return Err(Error::InvalidWeight(format!("{}x{} is not square", p.nrows(), p.ncols())));
    }
    if !all_finite(p) {
        return Err(Error::InvalidWeight("non-finite entries".into()));
    }
    let scale = p.amax().max(f64::MIN_POSITIVE);
    if asymmetry(p) > SYMMETRY_TOL * scale {
        return Err(Error::InvalidWeight("matrix is not symmetric".into()));
    }
    let (values, vectors) = sym_eigen(p);
    if values[0] <= 0.0 {
        return Err(Error::InvalidWeight(format!("smallest eigenvalue {:.3e} is not positive", values[0])));
    }
    let root = &vectors * DMatrix::from_diagonal(&values.map(f64::sqrt)) * vectors.transpose();
    let inv_root =
        &vectors * DMatrix::from_diagonal(&values.map(|v| 1.0 / v.sqrt())) * vectors.transpose();
    Ok((symmetrize(&root), symmetrize(&inv_root)))
}

pub fn is_spd(p: &DMatrix<f64>) -> bool {
    p.is_square() && all_finite(p) && lambda_min_sym(p) > 0.0 && asymmetry(p) <= SYMMETRY_TOL * p.amax().max(1.0)
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn spd_inverse(p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = nalgebra::Cholesky::new(symmetrize(p))
        .ok_or_else(|| Error::CannotInvert("matrix is not positive definite".into()))?;
    Ok(symmetrize(&chol.inverse()))
}

pub fn general_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = m.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-13 * smax.max(f64::MIN_POSITIVE)) {
        return Err(Error::CannotInvert(format!("condition estimate {:.3e}", smax / smin)));
    }
    m.clone()
        .try_inverse()
        .ok_or_else(|| Error::CannotInvert("LU factorization failed".into()))
}

/// Numerical rank with singular values below `rel_tol * σ_max` treated as zero.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.max();
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * smax).count()
}

/// Minimum-norm least-squares solution of `a · x = b` together with an
/// orthonormal basis (as columns) of the null space of `a`.
pub fn min_norm_solve(a: &DMatrix<f64>, b: &DVector<f64>, rel_tol: f64) -> (DVector<f64>, DMatrix<f64>) {
    let cols = a.ncols();
    // Pad to at least square so the thin SVD exposes the full right singular basis.
    let padded = if a.nrows() < cols {
        let mut p = DMatrix::zeros(cols, cols);
        p.view_mut((0, 0), (a.nrows(), cols)).copy_from(a);
        p
    } else {
        a.clone()
    };
    let mut rhs = DVector::zeros(padded.nrows());
    rhs.rows_mut(0, b.len()).copy_from(b);

    let svd = padded.svd(true, true);
    let u = svd.u.as_ref().expect("requested U");
    let v_t = svd.v_t.as_ref().expect("requested V^T");
    let smax = svd.singular_values.max();
    let cutoff = rel_tol * smax.max(f64::MIN_POSITIVE);

    let mut x = DVector::zeros(cols);
    let mut null_cols = Vec::new();
    for (k, &s) in svd.singular_values.iter().enumerate() {
        let v_k = v_t.row(k).transpose();
        if s > cutoff {
            let coef = u.column(k).dot(&rhs) / s;
            x += v_k * coef;
        } else {
            null_cols.push(v_k);
        }
    }
    let null = if null_cols.is_empty() {
        DMatrix::zeros(cols, 0)
    } else {
        DMatrix::from_columns(&null_cols)
    };
    (x, null)
}

// Padé coefficients of orders 3, 5, 7, 9, 13 and their 1-norm thresholds.
const PADE3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE7: [f64; 8] = [17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0];
const PADE9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA: [f64; 5] = [
    1.495585217958292e-2,
    2.539_398_330_063_23e-1,
    9.504178996162932e-1,
    2.097847961257068,
    5.371920351148152,
];

fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Matrix exponential by scaling and squaring with a diagonal Padé
/// approximant (degree 3 to 13 selected from the 1-norm).
pub fn matrix_exponential(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::InvalidInput(format!("expm of a {}x{} matrix", m.nrows(), m.ncols())));
    }
    if !all_finite(m) {
        return Err(Error::InvalidInput("expm of a matrix with non-finite entries".into()));
    }
    let n = m.nrows();
    let ident = DMatrix::<f64>::identity(n, n);
    let norm = one_norm(m);
    if norm == 0.0 {
        return Ok(ident);
    }

    let (u, v, squarings) = if norm <= THETA[3] {
        let a2 = m * m;
        let (u, v) = if norm <= THETA[0] {
            pade_low(m, &a2, &ident, &PADE3)
        } else if norm <= THETA[1] {
            pade_low(m, &a2, &ident, &PADE5)
        } else if norm <= THETA[2] {
            pade_low(m, &a2, &ident, &PADE7)
        } else {
            pade_low(m, &a2, &ident, &PADE9)
        };
        (u, v, 0)
    } else {
        let squarings = (norm / THETA[4]).log2().ceil().max(0.0) as i32;
        let a = m * 2f64.powi(-squarings);
        let (u, v) = pade13(&a, &ident);
        (u, v, squarings)
    };

    // r = (V - U)^{-1} (V + U)
    let lhs = &v - &u;
    let rhs = &v + &u;
    let mut r = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::InvalidInput("Padé denominator is singular".into()))?;
    for _ in 0..squarings {
        r = &r * &r;
    }
    Ok(r)
}

fn pade_low(
    a: &DMatrix<f64>,
    a2: &DMatrix<f64>,
    ident: &DMatrix<f64>,
    b: &[f64],
) -> (DMatrix<f64>, DMatrix<f64>) {
    // Even powers A^0, A^2, A^4, ... as needed by the degree.
    let degree = b.len() - 1;
    let mut even = vec![ident.clone(), a2.clone()];
    while 2 * (even.len() - 1) < degree - 1 {
        let next = even.last().unwrap() * a2;
        even.push(next);
    }
    let mut odd_sum = DMatrix::zeros(a.nrows(), a.ncols());
    let mut even_sum = DMatrix::zeros(a.nrows(), a.ncols());
    for (k, pow) in even.iter().enumerate() {
        if 2 * k < degree {
            odd_sum += pow * b[2 * k + 1];
        }
        if 2 * k <= degree {
            even_sum += pow * b[2 * k];
        }
    }
    (a * odd_sum, even_sum)
}

fn pade13(a: &DMatrix<f64>, ident: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let b = &PADE13;
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let inner_u = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9]);
    let u = a * (inner_u + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + ident * b[1]);
    let inner_v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8]);
    let v = inner_v + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + ident * b[0];
    (u, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{E, LN_2};

    fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).amax() / b.amax().max(1e-300)
    }

    #[test]
    fn expm_of_zero_is_identity() {
        let e = matrix_exponential(&DMatrix::zeros(3, 3)).unwrap();
        assert_eq!(e, DMatrix::identity(3, 3));
    }

    #[test]
    fn expm_diagonal() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let e = matrix_exponential(&m).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[E, 0.0, 0.0, 1.0 / E]);
        assert!(rel_err(&e, &expected) < 1e-14);
    }

    #[test]
    fn expm_shifted_nilpotent_closed_form() {
        // e^{s(I+N)} = e^s (I + sN) for N^2 = 0.
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]) * LN_2;
        let e = matrix_exponential(&m).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 2.0 * LN_2, 2.0]);
        assert!(rel_err(&e, &expected) < 1e-13);
    }

    #[test]
    fn expm_matches_series_reference_across_pade_orders() {
        // Truncated Taylor series with exact-ish accumulation as an oracle
        // for moderate norms; scaling keeps the series well conditioned.
        let base = DMatrix::from_row_slice(3, 3, &[0.3, -0.2, 0.1, 0.05, -0.4, 0.2, 0.1, 0.3, 0.25]);
        for scale in [1e-3, 0.05, 0.5, 2.0, 6.0, 20.0, 50.0] {
            let m = &base * scale;
            let got = matrix_exponential(&m).unwrap();
            let reference = taylor_with_squaring(&m);
            assert!(rel_err(&got, &reference) < 1e-12, "scale {scale}: {}", rel_err(&got, &reference));
        }
    }

    fn taylor_with_squaring(m: &DMatrix<f64>) -> DMatrix<f64> {
        let n = m.nrows();
        let mut s = 0;
        let mut a = m.clone();
        while one_norm(&a) > 0.1 {
            a *= 0.5;
            s += 1;
        }
        let mut term = DMatrix::<f64>::identity(n, n);
        let mut sum = term.clone();
        for k in 1..30 {
            term = &term * &a / k as f64;
            sum += &term;
        }
        for _ in 0..s {
            sum = &sum * &sum;
        }
        sum
    }

    #[test]
    fn expm_matches_nalgebra_for_generator() {
        let g = DMatrix::from_row_slice(3, 3, &[3.0, -0.75, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0]);
        for s in [-5.0, -1.3, 0.7, 4.9] {
            let m = &g * s;
            let got = matrix_exponential(&m).unwrap();
            let oracle = m.clone().exp();
            assert!(rel_err(&got, &oracle) < 1e-12);
        }
    }

    #[test]
    fn expm_rejects_non_finite() {
        let m = DMatrix::from_row_slice(1, 1, &[f64::NAN]);
        assert!(matches!(matrix_exponential(&m), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn spd_sqrt_squares_back() {
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let (r, ri) = spd_sqrt(&p).unwrap();
        assert!((&r * &r - &p).amax() < 1e-14);
        assert!((&r * &ri - DMatrix::identity(2, 2)).amax() < 1e-14);
        assert!(spd_sqrt(&DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0])).is_err());
    }

    #[test]
    fn min_norm_solve_reports_null_space() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let b = DVector::from_vec(vec![2.0]);
        let (x, null) = min_norm_solve(&a, &b, 1e-12);
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 1.0).abs() < 1e-14);
        assert_eq!(null.ncols(), 1);
        assert!((&a * null.column(0)).amax() < 1e-14);
    }
}
