use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lmi::{maximize_margin, AffineLmi, BarrierOptions, DecisionSpace};
use crate::error::{Error, Result};
use crate::linalg::{lambda_max_sym, lambda_min_sym, spd_inverse, spd_sqrt, symmetrize};
use crate::matrix_serde;

/// Smallest margins a synthesized certificate must reach.
pub const MIN_MONO_MARGIN: f64 = 1e-6;
pub const MAX_W_EIGENVALUE: f64 = -1e-6;

/// Multipliers tried, in units of `1/δ`, when the default `τ = 1/δ` fails.
pub const TAU_GRID: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

/// Eigenvalue margins of a candidate `(X, Y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmiMargins {
    /// `λ_min(X G_dᵀ + G_d X)`.
    pub margin_mono: f64,
    /// `λ_min(X)`.
    pub margin_posdef: f64,
    /// `λ_max(W)`; negative when the quantized loop is certified.
    pub margin_w: f64,
}

impl LmiMargins {
    pub fn is_certified(&self) -> bool {
        self.margin_mono > 0.0 && self.margin_posdef > 0.0 && self.margin_w < 0.0
    }

    pub fn meets_synthesis_targets(&self) -> bool {
        self.margin_mono >= MIN_MONO_MARGIN && self.margin_posdef > 0.0 && self.margin_w <= MAX_W_EIGENVALUE
    }
}

/// Certified gain for the quantized feedback `u = K·q(x)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GainCertificate {
    #[serde(rename = "X", with = "matrix_serde")]
    pub x: DMatrix<f64>,
    #[serde(rename = "Y", with = "matrix_serde")]
    pub y: DMatrix<f64>,
    #[serde(rename = "K", with = "matrix_serde")]
    pub k: DMatrix<f64>,
    #[serde(rename = "P", with = "matrix_serde")]
    pub p: DMatrix<f64>,
    pub delta: f64,
    pub tau: f64,
    pub margins: LmiMargins,
    /// Guaranteed decay rate of the homogeneous norm.
    pub rho: f64,
    /// Largest decay rate found for this `(δ, τ)` over all feasible `(X, Y)`,
    /// when the decay search ran.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_achievable: Option<f64>,
}

impl GainCertificate {
    /// Certifies a given `(X, Y)`; fails with `NotCertified` unless the LMI
    /// margins have the right signs.
    pub fn from_xy(
        a0: &DMatrix<f64>,
        b: &DMatrix<f64>,
        generator: &DMatrix<f64>,
        x: &DMatrix<f64>,
        y: &DMatrix<f64>,
        delta: f64,
        tau: f64,
    ) -> Result<Self> {
        let margins = verify_lmi(a0, b, generator, x, y, delta, tau)?;
        if !margins.is_certified() {
            return Err(Error::NotCertified(format!(
                "margins mono {:.3e}, posdef {:.3e}, W {:.3e}",
                margins.margin_mono, margins.margin_posdef, margins.margin_w
            )));
        }
        let p = spd_inverse(x)?;
        let k = y * &p;
        let w = assemble_w(a0, b, &k, &p, delta, tau);
        let rho = compute_rho(&w, &decay_weight(generator, &p))?;
        Ok(GainCertificate { x: symmetrize(x), y: y.clone(), k, p, delta, tau, margins, rho, rho_achievable: None })
    }

    /// Certificate from a printed weight `P` and gain `K` (`X = P⁻¹`, `Y = K X`).
    pub fn from_pk(
        a0: &DMatrix<f64>,
        b: &DMatrix<f64>,
        generator: &DMatrix<f64>,
        p: &DMatrix<f64>,
        k: &DMatrix<f64>,
        delta: f64,
        tau: f64,
    ) -> Result<Self> {
        let x = spd_inverse(p)?;
        let y = k * &x;
        Self::from_xy(a0, b, generator, &x, &y, delta, tau)
    }
}

/// S-procedure matrix
/// `W = [[A0ᵀP + PA0 + KᵀBᵀP + PBK + δ²τP, PBK], [KᵀBᵀP, −τP]]`.
pub fn assemble_w(
    a0: &DMatrix<f64>,
    b: &DMatrix<f64>,
    k: &DMatrix<f64>,
    p: &DMatrix<f64>,
    delta: f64,
    tau: f64,
) -> DMatrix<f64> {
    let n = a0.nrows();
    let pbk = p * b * k;
    let top_left = a0.transpose() * p + p * a0 + pbk.transpose() + &pbk + p * (delta * delta * tau);
    let mut w = DMatrix::zeros(2 * n, 2 * n);
    w.view_mut((0, 0), (n, n)).copy_from(&top_left);
    w.view_mut((0, n), (n, n)).copy_from(&pbk);
    w.view_mut((n, 0), (n, n)).copy_from(&pbk.transpose());
    w.view_mut((n, n), (n, n)).copy_from(&(p * -tau));
    symmetrize(&w)
}

/// `blkdiag(G_dᵀP + PG_d, P)`.
pub fn decay_weight(generator: &DMatrix<f64>, p: &DMatrix<f64>) -> DMatrix<f64> {
    let n = p.nrows();
    let mut m = DMatrix::zeros(2 * n, 2 * n);
    m.view_mut((0, 0), (n, n)).copy_from(&(generator.transpose() * p + p * generator));
    m.view_mut((n, n), (n, n)).copy_from(p);
    symmetrize(&m)
}

/// The quantized-feedback LMI in `(X, Y)`:
/// `[[XA0ᵀ + A0X + YᵀBᵀ + BY + δ²τX, BY], [YᵀBᵀ, −τX]]`.
fn lmi_matrix(
    a0: &DMatrix<f64>,
    b: &DMatrix<f64>,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    delta: f64,
    tau: f64,
) -> DMatrix<f64> {
    let n = a0.nrows();
    let by = b * y;
    let top_left = x * a0.transpose() + a0 * x + by.transpose() + &by + x * (delta * delta * tau);
    let mut out = DMatrix::zeros(2 * n, 2 * n);
    out.view_mut((0, 0), (n, n)).copy_from(&top_left);
    out.view_mut((0, n), (n, n)).copy_from(&by);
    out.view_mut((n, 0), (n, n)).copy_from(&by.transpose());
    out.view_mut((n, n), (n, n)).copy_from(&(x * -tau));
    out
}

fn mono_block(generator: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    x * generator.transpose() + generator * x
}

/// Reports `λ_min(XG_dᵀ + G_dX)`, `λ_min(X)` and `λ_max(W)` with
/// `P = X⁻¹`, `K = Y X⁻¹`.
pub fn verify_lmi(
    a0: &DMatrix<f64>,
    b: &DMatrix<f64>,
    generator: &DMatrix<f64>,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    delta: f64,
    tau: f64,
) -> Result<LmiMargins> {
    let n = a0.nrows();
    if !a0.is_square() || b.nrows() != n || generator.shape() != (n, n) || x.shape() != (n, n) || y.shape() != (b.ncols(), n)
    {
        return Err(Error::InvalidInput("inconsistent shapes in LMI verification".into()));
    }
    let margin_posdef = lambda_min_sym(x);
    let margin_mono = lambda_min_sym(&mono_block(generator, x));
    let p = spd_inverse(x).map_err(|_| Error::CannotInvert(format!("X has smallest eigenvalue {margin_posdef:.3e}")))?;
    if !p.iter().all(|v| v.is_finite()) {
        return Err(Error::CannotInvert("X inverse is not finite".into()));
    }
    let k = y * &p;
    let margin_w = lambda_max_sym(&assemble_w(a0, b, &k, &p, delta, tau));
    Ok(LmiMargins { margin_mono, margin_posdef, margin_w })
}

/// Largest `ρ` with `W ⪯ −ρ·M`, i.e. `λ_min(M^{-1/2}(−W)M^{-1/2})`.
pub fn compute_rho(w: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<f64> {
    if w.shape() != m.shape() {
        return Err(Error::InvalidInput("W and M shapes differ".into()));
    }
    let w_max = lambda_max_sym(w);
    if !(w_max < 0.0) {
        return Err(Error::NotCertified(format!("λ_max(W) = {w_max:.3e} is not negative")));
    }
    let (_, m_inv_sqrt) = spd_sqrt(&symmetrize(m))
        .map_err(|e| Error::NotCertified(format!("decay weight is not positive definite: {e}")))?;
    let rho = lambda_min_sym(&(&m_inv_sqrt * (-w) * &m_inv_sqrt));
    if !(rho > 0.0) {
        return Err(Error::NotCertified(format!("decay rate {rho:.3e} is not positive")));
    }
    Ok(rho)
}

/// Tuning knobs of the gain synthesis.
#[derive(Debug, Clone, Copy)]
pub struct GainLmiOptions {
    /// S-procedure multiplier; `None` means `1/δ`.
    pub tau: Option<f64>,
    /// Retry over [`TAU_GRID`] when the default multiplier fails.
    pub tau_grid_fallback: bool,
    pub restarts: usize,
    pub seed: u64,
    /// Newton-step budget per barrier solve.
    pub max_newton_steps: usize,
    /// After feasibility, push the certified decay rate up by bisection.
    pub maximize_decay: bool,
    /// Fraction of the largest feasible decay rate targeted by the final
    /// solve, leaving room for comfortable margins.
    pub decay_backoff: f64,
}

impl Default for GainLmiOptions {
    fn default() -> Self {
        GainLmiOptions {
            tau: None,
            tau_grid_fallback: true,
            restarts: 5,
            seed: 0,
            max_newton_steps: 2_000,
            maximize_decay: true,
            decay_backoff: 0.9,
        }
    }
}

fn random_spd_start(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let r = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() * 2.0 - 1.0);
    let x = DMatrix::identity(n, n) + &r * r.transpose() * 0.1;
    let scale = n as f64 / x.trace();
    x * scale
}

struct GainProblem<'a> {
    a0: &'a DMatrix<f64>,
    b: &'a DMatrix<f64>,
    generator: &'a DMatrix<f64>,
    delta: f64,
    tau: f64,
}

impl GainProblem<'_> {
    fn space(&self) -> DecisionSpace {
        DecisionSpace::new(self.a0.nrows(), self.b.ncols())
    }

    /// Constraint blocks `[XGᵀ + GX, X, −LMI − ρ·blkdiag(XGᵀ + GX, X)]`.
    fn affine(&self, decay: f64) -> Result<AffineLmi> {
        let space = self.space();
        let n = space.n;
        let map = |x: &DMatrix<f64>, y: &DMatrix<f64>| {
            let mono = mono_block(self.generator, x);
            let mut s = -lmi_matrix(self.a0, self.b, x, y, self.delta, self.tau);
            if decay != 0.0 {
                let mut shift = s.view_mut((0, 0), (n, n));
                shift -= &mono * decay;
                let mut shift = s.view_mut((n, n), (n, n));
                shift -= x * decay;
            }
            vec![mono, x.clone(), s]
        };
        let trace = DMatrix::from_row_slice(1, space.dim(), space.trace_row().as_slice());
        AffineLmi::new(space, &map, &trace, &nalgebra::DVector::from_element(1, n as f64))
    }

    fn solve(&self, decay: f64, start: &DMatrix<f64>, opts: &BarrierOptions) -> Result<(DMatrix<f64>, DMatrix<f64>, f64)> {
        let lmi = self.affine(decay)?;
        let space = lmi.space();
        let w0 = lmi.reduce(&space.pack(start, &DMatrix::zeros(space.m, space.n)));
        let opt = maximize_margin(&lmi, &w0, opts);
        let (x, y) = space.unpack(&opt.u);
        Ok((x, y, opt.margin))
    }
}

/// Synthesizes `(X, Y)` for the quantized feedback with error budget `δ`
/// by maximizing the smallest eigenvalue over the LMI blocks under
/// `trace(X) = n`, then certifies the result with exact eigenvalue checks.
pub fn solve_gain_lmi(
    a0: &DMatrix<f64>,
    b: &DMatrix<f64>,
    generator: &DMatrix<f64>,
    delta: f64,
    options: &GainLmiOptions,
) -> Result<GainCertificate> {
    let n = a0.nrows();
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidInput(format!("delta = {delta} outside (0, 1)")));
    }
    if !a0.is_square() || b.nrows() != n || generator.shape() != (n, n) {
        return Err(Error::InvalidInput("inconsistent shapes for gain synthesis".into()));
    }
    let default_tau = options.tau.unwrap_or(1.0 / delta);
    if !(default_tau > 0.0) {
        return Err(Error::InvalidInput(format!("tau = {default_tau} must be positive")));
    }
    let mut taus = vec![default_tau];
    if options.tau_grid_fallback {
        taus.extend(TAU_GRID.iter().map(|f| f / delta).filter(|t| (t - default_tau).abs() > 1e-12 * default_tau));
    }

    let barrier = BarrierOptions { max_newton_steps: options.max_newton_steps, ..BarrierOptions::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut best_margin = f64::NEG_INFINITY;

    for &tau in &taus {
        let problem = GainProblem { a0, b, generator, delta, tau };
        for restart in 0..options.restarts.max(1) {
            let start = if restart == 0 { DMatrix::identity(n, n) } else { random_spd_start(n, &mut rng) };
            let (x, y, margin) = problem.solve(0.0, &start, &barrier)?;
            let Ok(cert) = GainCertificate::from_xy(a0, b, generator, &x, &y, delta, tau) else {
                best_margin = best_margin.max(margin);
                continue;
            };
            if !cert.margins.meets_synthesis_targets() {
                best_margin = best_margin.max(margin);
                continue;
            }
            if !options.maximize_decay {
                return Ok(cert);
            }
            return Ok(improve_decay(&problem, cert, &x, &barrier, options.decay_backoff));
        }
    }
    Err(Error::Infeasible {
        best_margin,
        detail: format!("delta = {delta}, tau tried = {taus:?}"),
    })
}

/// Bisection on the decay rate: the constraint
/// `−LMI ⪰ ρ·blkdiag(XGᵀ + GX, X)` is linear in `(X, Y)` for fixed `ρ` and
/// is the `X`-coordinate form of `W ⪯ −ρ·M`.
fn improve_decay(
    problem: &GainProblem<'_>,
    cert: GainCertificate,
    start: &DMatrix<f64>,
    barrier: &BarrierOptions,
    backoff: f64,
) -> GainCertificate {
    const BISECTION_STEPS: usize = 30;
    const FEASIBILITY_MARGIN: f64 = 1e-9;

    let mut lo = cert.rho;
    let mut hi = problem.tau;
    let probe = BarrierOptions { stop_at_margin: Some(FEASIBILITY_MARGIN), ..*barrier };
    let mut warm = start.clone();
    for _ in 0..BISECTION_STEPS {
        if hi - lo <= 1e-6 * hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        match problem.solve(mid, &warm, &probe) {
            Ok((x, _, margin)) if margin > FEASIBILITY_MARGIN => {
                lo = mid;
                warm = x;
            }
            _ => hi = mid,
        }
    }
    let achievable = lo;
    let target = backoff * achievable;
    let improved = problem
        .solve(target, &warm, barrier)
        .ok()
        .and_then(|(x, y, _)| {
            GainCertificate::from_xy(problem.a0, problem.b, problem.generator, &x, &y, problem.delta, problem.tau).ok()
        })
        .filter(|c| c.margins.meets_synthesis_targets() && c.rho >= cert.rho);
    let mut out = improved.unwrap_or(cert);
    out.rho_achievable = Some(achievable.max(out.rho));
    out
}

/// `(X, Y)` solving the equality-form Lyapunov equation of the unquantized
/// homogeneous stabilizer,
/// `XA0ᵀ + A0X + YᵀBᵀ + BY + ρ(XG_dᵀ + G_dX) = 0`, with `X ≻ 0` and
/// `XG_dᵀ + G_dX ≻ 0`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineGain {
    #[serde(rename = "X", with = "matrix_serde")]
    pub x: DMatrix<f64>,
    #[serde(rename = "Y", with = "matrix_serde")]
    pub y: DMatrix<f64>,
    #[serde(rename = "K", with = "matrix_serde")]
    pub k: DMatrix<f64>,
    #[serde(rename = "P", with = "matrix_serde")]
    pub p: DMatrix<f64>,
    pub rho: f64,
    pub equation_residual: f64,
    pub margin_mono: f64,
    pub margin_posdef: f64,
}

/// Tolerance on the equality constraint of the baseline design.
pub const BASELINE_EQUALITY_TOL: f64 = 1e-8;

pub fn solve_baseline_lmi(
    a0: &DMatrix<f64>,
    b: &DMatrix<f64>,
    generator: &DMatrix<f64>,
    rho: f64,
) -> Result<BaselineGain> {
    let n = a0.nrows();
    if !(rho > 0.0) {
        return Err(Error::InvalidInput(format!("rho = {rho} must be positive")));
    }
    if !a0.is_square() || b.nrows() != n || generator.shape() != (n, n) {
        return Err(Error::InvalidInput("inconsistent shapes for baseline synthesis".into()));
    }
    let space = DecisionSpace::new(n, b.ncols());
    let equation = |x: &DMatrix<f64>, y: &DMatrix<f64>| {
        let by = b * y;
        x * a0.transpose() + a0 * x + by.transpose() + by + mono_block(generator, x) * rho
    };
    let eq_rows = space.linear_map_rows(equation);
    let mut equalities = DMatrix::zeros(eq_rows.nrows() + 1, space.dim());
    equalities.view_mut((0, 0), eq_rows.shape()).copy_from(&eq_rows);
    equalities.row_mut(eq_rows.nrows()).copy_from(&space.trace_row().transpose());
    let mut rhs = nalgebra::DVector::zeros(equalities.nrows());
    rhs[eq_rows.nrows()] = n as f64;

    let map = |x: &DMatrix<f64>, _y: &DMatrix<f64>| vec![mono_block(generator, x), x.clone()];
    let lmi = AffineLmi::new(space, &map, &equalities, &rhs)?;
    let w0 = lmi.reduce(&space.pack(&DMatrix::identity(n, n), &DMatrix::zeros(space.m, n)));
    let opt = maximize_margin(&lmi, &w0, &BarrierOptions::default());
    let (x, y) = space.unpack(&opt.u);

    let margin_mono = lambda_min_sym(&mono_block(generator, &x));
    let margin_posdef = lambda_min_sym(&x);
    let equation_residual = equation(&x, &y).amax();
    if !(margin_mono > 0.0 && margin_posdef > 0.0) || equation_residual > BASELINE_EQUALITY_TOL * (1.0 + x.amax()) {
        return Err(Error::Infeasible {
            best_margin: margin_mono.min(margin_posdef),
            detail: format!("baseline equation residual {equation_residual:.3e}"),
        });
    }
    let p = spd_inverse(&x)?;
    let k = &y * &p;
    Ok(BaselineGain { x, y, k, p, rho, equation_residual, margin_mono, margin_posdef })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, c, v)
    }

    #[test]
    fn zero_gain_closed_form() {
        let eye = DMatrix::identity(2, 2);
        let report = verify_lmi(&DMatrix::zeros(2, 2), &m(2, 1, &[0.0, 1.0]), &eye, &eye, &DMatrix::zeros(1, 2), 0.5, 2.0)
            .unwrap();
        assert!((report.margin_mono - 2.0).abs() < 1e-14);
        assert!((report.margin_posdef - 1.0).abs() < 1e-14);
        assert!((report.margin_w - 0.5).abs() < 1e-14);
        assert!(!report.is_certified());
    }

    #[test]
    fn rho_identity_and_proportional() {
        let eye = DMatrix::<f64>::identity(4, 4);
        assert!((compute_rho(&-&eye, &eye).unwrap() - 1.0).abs() < 1e-14);
        let mm = m(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        assert!((compute_rho(&(&mm * -2.0), &mm).unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(compute_rho(&eye, &eye), Err(Error::NotCertified(_))));
    }

    #[test]
    fn scalar_gain_synthesis() {
        // Scalar LMI with X = 1: [[2Y + δ²τ, Y], [Y, −τ]] ≺ 0.
        let one = m(1, 1, &[1.0]);
        let cert = solve_gain_lmi(&m(1, 1, &[0.0]), &one, &one, 0.4, &GainLmiOptions::default()).unwrap();
        assert!((cert.x[(0, 0)] - 1.0).abs() < 1e-12);
        let y = cert.y[(0, 0)];
        // Hand oracle with τ = 2.5: feasible iff Y² + 5Y + 1 < 0.
        assert!(y * y + 5.0 * y + 1.0 < 0.0);
        assert!(cert.margins.meets_synthesis_targets());
        assert!(cert.rho > 0.0);
    }

    #[test]
    fn singular_x_cannot_be_inverted() {
        let x = m(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let eye = DMatrix::identity(2, 2);
        let err = verify_lmi(&DMatrix::zeros(2, 2), &m(2, 1, &[0.0, 1.0]), &eye, &x, &DMatrix::zeros(1, 2), 0.5, 2.0);
        assert!(matches!(err, Err(Error::CannotInvert(_))));
    }

    #[test]
    fn baseline_scalar_closed_form() {
        let one = m(1, 1, &[1.0]);
        let g = solve_baseline_lmi(&m(1, 1, &[0.0]), &one, &one, 1.0).unwrap();
        assert!((g.x[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((g.y[(0, 0)] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn baseline_double_integrator() {
        let a0 = m(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = m(2, 1, &[0.0, 1.0]);
        let gd = m(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        let g = solve_baseline_lmi(&a0, &b, &gd, 1.0).unwrap();
        assert!(g.margin_mono > 0.0 && g.margin_posdef > 0.0);
        assert!(lambda_min_sym(&mono_block(&gd, &g.x)) > 0.0);
        assert!(g.equation_residual < 1e-8);
    }
}
