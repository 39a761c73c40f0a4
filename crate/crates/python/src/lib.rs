//! Python bindings: dilations, gain synthesis, the spherical quantizer and
//! closed-loop simulation. Matrices cross the boundary as lists of rows.

use homquant_core::simulator::{integrate, PerturbationSpec, SimulationConfig};
use homquant_core::synthesis::{
    solve_gain_lmi, solve_homogenization, verify_lmi, GainCertificate, GainLmiOptions, HomogenizationResult, LmiMargins,
    PlantModel,
};
use homquant_core::{matrix_serde, Dilation as CoreDilation, Error, SphericalQuantizer};
use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

type Rows = Vec<Vec<f64>>;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Divergence { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: &Rows) -> PyResult<DMatrix<f64>> {
    matrix_serde::from_rows(rows).map_err(PyValueError::new_err)
}

fn rows(m: &DMatrix<f64>) -> Rows {
    matrix_serde::to_rows(m)
}

fn margins_dict<'py>(py: Python<'py>, m: &LmiMargins) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("margin_mono", m.margin_mono)?;
    d.set_item("margin_posdef", m.margin_posdef)?;
    d.set_item("margin_W", m.margin_w)?;
    d.set_item("certified", m.is_certified())?;
    Ok(d)
}

fn plant(a: &Rows, b: &Rows) -> PyResult<PlantModel> {
    PlantModel::new(matrix(a)?, matrix(b)?).map_err(to_py)
}

/// Dilation `d(s) = exp(s·G_d)` with its canonical homogeneous norm.
#[pyclass(name = "Dilation", frozen)]
struct Dilation {
    inner: CoreDilation,
}

#[pymethods]
impl Dilation {
    #[new]
    fn new(generator: Rows, weight: Rows) -> PyResult<Self> {
        Ok(Dilation { inner: CoreDilation::new(matrix(&generator)?, matrix(&weight)?).map_err(to_py)? })
    }

    fn matrix(&self, s: f64) -> PyResult<Rows> {
        Ok(rows(&self.inner.matrix(s).map_err(to_py)?))
    }

    /// Canonical homogeneous norm `‖x‖_d`.
    fn norm(&self, x: Vec<f64>) -> PyResult<f64> {
        Ok(self.inner.canonical_norm(&DVector::from_vec(x)).map_err(to_py)?.value)
    }

    /// Projection `d(−ln‖x‖_d)·x` onto the unit sphere.
    fn project(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.homogeneous_projector(&DVector::from_vec(x)).map_err(to_py)?.as_slice().to_vec())
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.inner.beta()
    }
}

/// Certified design: homogenization plus the quantized-feedback gain.
#[pyclass(name = "Certificate", frozen)]
struct Certificate {
    plant: PlantModel,
    homog: HomogenizationResult,
    cert: GainCertificate,
}

#[pymethods]
impl Certificate {
    /// Rebuilds and certifies a design from a weight `P` and gain `K`.
    #[staticmethod]
    #[pyo3(signature = (a, b, p, k, delta, tau = None, mu = -1.0))]
    fn from_pk(a: Rows, b: Rows, p: Rows, k: Rows, delta: f64, tau: Option<f64>, mu: f64) -> PyResult<Self> {
        let plant = plant(&a, &b)?;
        let homog = solve_homogenization(&plant, mu).map_err(to_py)?;
        let cert = GainCertificate::from_pk(
            &homog.a0,
            &plant.b,
            &homog.generator,
            &matrix(&p)?,
            &matrix(&k)?,
            delta,
            tau.unwrap_or(1.0 / delta),
        )
        .map_err(to_py)?;
        Ok(Certificate { plant, homog, cert })
    }

    #[getter]
    fn k(&self) -> Rows {
        rows(&self.cert.k)
    }

    #[getter]
    fn p(&self) -> Rows {
        rows(&self.cert.p)
    }

    #[getter]
    fn generator(&self) -> Rows {
        rows(&self.homog.generator)
    }

    #[getter]
    fn a0(&self) -> Rows {
        rows(&self.homog.a0)
    }

    #[getter]
    fn k0(&self) -> Rows {
        rows(&self.homog.k0)
    }

    #[getter]
    fn delta(&self) -> f64 {
        self.cert.delta
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.cert.tau
    }

    #[getter]
    fn rho(&self) -> f64 {
        self.cert.rho
    }

    fn margins<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        margins_dict(py, &self.cert.margins)
    }

    fn dilation(&self) -> PyResult<Dilation> {
        Ok(Dilation { inner: CoreDilation::new(self.homog.generator.clone(), self.cert.p.clone()).map_err(to_py)? })
    }
}

/// Homogenizes the plant and synthesizes a certified gain for error budget `delta`.
#[pyfunction]
#[pyo3(signature = (a, b, delta, tau = None, mu = -1.0, seed = 0))]
fn synthesize(py: Python<'_>, a: Rows, b: Rows, delta: f64, tau: Option<f64>, mu: f64, seed: u64) -> PyResult<Certificate> {
    let plant = plant(&a, &b)?;
    py.detach(|| {
        let homog = solve_homogenization(&plant, mu)?;
        let options = GainLmiOptions { tau, seed, ..Default::default() };
        let cert = solve_gain_lmi(&homog.a0, &plant.b, &homog.generator, delta, &options)?;
        Ok(Certificate { plant: plant.clone(), homog, cert })
    })
    .map_err(to_py)
}

/// LMI margins of `X = P⁻¹`, `Y = K·X` for the plant, without requiring certification.
#[pyfunction]
#[pyo3(signature = (a, b, p, k, delta, tau = None, mu = -1.0))]
#[allow(clippy::too_many_arguments)]
fn verify<'py>(
    py: Python<'py>,
    a: Rows,
    b: Rows,
    p: Rows,
    k: Rows,
    delta: f64,
    tau: Option<f64>,
    mu: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let plant = plant(&a, &b)?;
    let homog = solve_homogenization(&plant, mu).map_err(to_py)?;
    let x = matrix(&p)?.try_inverse().ok_or_else(|| PyValueError::new_err("P is singular"))?;
    let y = matrix(&k)? * &x;
    let m = verify_lmi(&homog.a0, &plant.b, &homog.generator, &x, &y, delta, tau.unwrap_or(1.0 / delta)).map_err(to_py)?;
    margins_dict(py, &m)
}

/// Spherical quantizer with `N` seeds on the weighted unit sphere.
#[pyclass(name = "SphericalQuantizer", frozen)]
struct Quantizer {
    inner: SphericalQuantizer,
}

#[pymethods]
impl Quantizer {
    #[new]
    #[pyo3(signature = (dim, budget, weight, floor_mode = true))]
    fn new(dim: usize, budget: u64, weight: Rows, floor_mode: bool) -> PyResult<Self> {
        Ok(Quantizer { inner: SphericalQuantizer::new(dim, budget, &matrix(&weight)?, floor_mode).map_err(to_py)? })
    }

    #[getter]
    fn bins(&self) -> u64 {
        self.inner.bins()
    }

    #[getter]
    fn seed_count(&self) -> u64 {
        self.inner.seed_count()
    }

    #[getter]
    fn delta_n(&self) -> f64 {
        self.inner.delta_n()
    }

    #[getter]
    fn code_width(&self) -> u32 {
        self.inner.code_width()
    }

    /// Returns `(seed, code)` for the state `x`.
    fn quantize(&self, dilation: &Dilation, x: Vec<f64>) -> PyResult<(Vec<f64>, u64)> {
        let s = self.inner.quantize(&dilation.inner, &DVector::from_vec(x)).map_err(to_py)?;
        Ok((s.seed.as_slice().to_vec(), s.code()))
    }

    /// Fixed-width big-endian bits of a code.
    fn encode(&self, code: u64) -> PyResult<Vec<bool>> {
        let sample = self.inner.decode_code(code).map_err(to_py)?;
        Ok(self.inner.encode(&sample).to_bits())
    }

    fn decode(&self, bits: Vec<bool>) -> PyResult<Vec<f64>> {
        Ok(self.inner.decode(&bits).map_err(to_py)?.as_slice().to_vec())
    }
}

/// Integrates the quantized closed loop; returns a dict of time series and
/// the settling time. `amplitude` adds the matched perturbation `B·a·sin t`.
#[pyfunction]
#[pyo3(signature = (certificate, budget, x0, t_end = 20.0, h = 1e-4, amplitude = 0.0, settle_threshold = 0.02, floor_mode = true, decimation = 1))]
#[allow(clippy::too_many_arguments)]
fn simulate<'py>(
    py: Python<'py>,
    certificate: &Certificate,
    budget: u64,
    x0: Vec<f64>,
    t_end: f64,
    h: f64,
    amplitude: f64,
    settle_threshold: f64,
    floor_mode: bool,
    decimation: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let n = certificate.plant.n();
    let q = SphericalQuantizer::new(n, budget, &certificate.cert.p, floor_mode).map_err(to_py)?;
    let mut cfg = SimulationConfig::new(
        certificate.plant.clone(),
        certificate.homog.clone(),
        certificate.cert.clone(),
        q,
        DVector::from_vec(x0),
    );
    cfg.t_end = t_end;
    cfg.h = h;
    cfg.settle_threshold = settle_threshold;
    if amplitude != 0.0 {
        cfg.perturbation = PerturbationSpec::matched_sinusoid(amplitude);
    }
    let traj = py.detach(|| integrate(&cfg)).map_err(to_py)?;
    let idx: Vec<usize> = (0..traj.len()).step_by(decimation.max(1)).collect();
    let d = PyDict::new(py);
    d.set_item("t", idx.iter().map(|&k| traj.times[k]).collect::<Vec<_>>())?;
    d.set_item("x", idx.iter().map(|&k| traj.states[k].as_slice().to_vec()).collect::<Vec<_>>())?;
    d.set_item("u", idx.iter().map(|&k| traj.controls[k].as_slice().to_vec()).collect::<Vec<_>>())?;
    d.set_item("hom_norm", idx.iter().map(|&k| traj.hom_norm[k]).collect::<Vec<_>>())?;
    d.set_item("seed_index", idx.iter().map(|&k| traj.seed_indices[k]).collect::<Vec<_>>())?;
    d.set_item("settling_time", traj.settling_time)?;
    d.set_item("kappa", traj.kappa)?;
    Ok(d)
}

#[pymodule]
fn homquant(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dilation>()?;
    m.add_class::<Certificate>()?;
    m.add_class::<Quantizer>()?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
