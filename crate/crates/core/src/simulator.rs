//! Fixed-step simulation of the quantized closed loop
//! `ẋ = Ax + BK·q(π_d(x)) + g(t, x)`.
//!
//! Discontinuous right-hand sides are approximated by small-step RK4 with the
//! control re-evaluated at every stage, so trajectories chatter at the scale
//! of the step near cell boundaries and near the origin.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dilation::Dilation;
use crate::error::{Error, Result};
use crate::quantizer::SphericalQuantizer;
use crate::synthesis::{GainCertificate, HomogenizationResult, PlantModel};

/// States larger than this abort the run.
pub const DIVERGENCE_LIMIT: f64 = 1e9;
/// Default deadband relative to `‖x0‖_d`.
pub const DEFAULT_DEADBAND: f64 = 1e-6;
pub const DEFAULT_SETTLE_THRESHOLD: f64 = 0.02;
pub const DEFAULT_DWELL: f64 = 0.5;
pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_T_END: f64 = 20.0;
/// Slack on the decay test in [`lyapunov_report`], relative to `ρ`.
pub const LYAPUNOV_TOL_REL: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationKind {
    None,
    /// `g = B·a·sin t` (same signal on every input channel).
    MatchedSinusoid,
    /// `g = B·a`, constant.
    MatchedCustomAmplitude,
    /// `g(t)` read from a table with zero-order hold.
    MismatchedTable,
}

/// Time table for mismatched perturbations; `values[k]` applies on
/// `[times[k], times[k+1])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationTable {
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    #[serde(default)]
    pub amplitude: f64,
    /// Budget `κ`; when given, `‖g‖_P ≤ β·κ` is checked at every sample.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_budget: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<PerturbationTable>,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self::none()
    }
}

impl PerturbationSpec {
    pub fn none() -> Self {
        PerturbationSpec { kind: PerturbationKind::None, amplitude: 0.0, kappa_budget: None, table: None }
    }

    pub fn matched_sinusoid(amplitude: f64) -> Self {
        PerturbationSpec { kind: PerturbationKind::MatchedSinusoid, amplitude, ..Self::none() }
    }

    pub fn matched_constant(amplitude: f64) -> Self {
        PerturbationSpec { kind: PerturbationKind::MatchedCustomAmplitude, amplitude, ..Self::none() }
    }

    pub fn table(times: Vec<f64>, values: Vec<Vec<f64>>) -> Self {
        PerturbationSpec {
            kind: PerturbationKind::MismatchedTable,
            table: Some(PerturbationTable { times, values }),
            ..Self::none()
        }
    }

    pub fn with_budget(mut self, kappa: f64) -> Self {
        self.kappa_budget = Some(kappa);
        self
    }

    pub fn is_matched(&self) -> bool {
        matches!(self.kind, PerturbationKind::MatchedSinusoid | PerturbationKind::MatchedCustomAmplitude)
    }

    fn validate(&self, n: usize) -> Result<()> {
        if !self.amplitude.is_finite() {
            return Err(Error::Configuration("perturbation amplitude must be finite".into()));
        }
        if let Some(k) = self.kappa_budget {
            if !(k >= 0.0 && k.is_finite()) {
                return Err(Error::Configuration(format!("kappa budget {k} must be non-negative")));
            }
        }
        if self.kind == PerturbationKind::MismatchedTable {
            let table = self.table.as_ref().ok_or_else(|| Error::Configuration("mismatched-table needs a table".into()))?;
            if table.times.is_empty() || table.times.len() != table.values.len() {
                return Err(Error::Configuration("table times and values must be non-empty and of equal length".into()));
            }
            if table.times.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::Configuration("table times must be strictly increasing".into()));
            }
            if table.values.iter().any(|v| v.len() != n || v.iter().any(|e| !e.is_finite())) {
                return Err(Error::Configuration(format!("table values must be finite {n}-vectors")));
            }
        }
        Ok(())
    }

    /// Input-channel signal `γ(t)` for matched kinds.
    pub fn gamma(&self, t: f64, m: usize) -> Option<DVector<f64>> {
        match self.kind {
            PerturbationKind::MatchedSinusoid => Some(DVector::from_element(m, self.amplitude * t.sin())),
            PerturbationKind::MatchedCustomAmplitude => Some(DVector::from_element(m, self.amplitude)),
            _ => None,
        }
    }

    /// `g(t)`; all supported kinds are state independent.
    pub fn eval(&self, t: f64, b: &DMatrix<f64>) -> DVector<f64> {
        match self.kind {
            PerturbationKind::None => DVector::zeros(b.nrows()),
            PerturbationKind::MatchedSinusoid | PerturbationKind::MatchedCustomAmplitude => {
                b * self.gamma(t, b.ncols()).expect("matched kind")
            }
            PerturbationKind::MismatchedTable => {
                let table = self.table.as_ref().expect("validated");
                let k = table.times.partition_point(|&s| s <= t);
                if k == 0 {
                    DVector::zeros(b.nrows())
                } else {
                    DVector::from_column_slice(&table.values[k - 1])
                }
            }
        }
    }

    /// Smallest `κ` with `sup_t ‖g(t)‖_P ≤ β·κ`.
    pub fn sufficient_kappa(&self, b: &DMatrix<f64>, dilation: &Dilation) -> f64 {
        let p_norm = |v: &DVector<f64>| dilation.weighted_norm(v);
        let sup = match self.kind {
            PerturbationKind::None => 0.0,
            PerturbationKind::MatchedSinusoid | PerturbationKind::MatchedCustomAmplitude => {
                p_norm(&(b * DVector::from_element(b.ncols(), self.amplitude.abs())))
            }
            PerturbationKind::MismatchedTable => self
                .table
                .as_ref()
                .map(|t| t.values.iter().map(|v| p_norm(&DVector::from_column_slice(v))).fold(0.0, f64::max))
                .unwrap_or(0.0),
        };
        sup / dilation.beta()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum HoldMode {
    Continuous,
    /// Control computed at multiples of `period` and held in between.
    SampleAndHold { period: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlLaw {
    /// `u = K·q(π_d(x))`.
    Quantized,
    /// `u = K·π_d(x)`, the unquantized homogeneous feedback.
    Homogeneous,
}

#[derive(Debug, Clone)]
pub struct SimulationConfig {
    pub plant: PlantModel,
    pub homogenization: HomogenizationResult,
    pub certificate: GainCertificate,
    pub quantizer: SphericalQuantizer,
    pub x0: DVector<f64>,
    pub t_end: f64,
    pub h: f64,
    /// Absolute deadband on `‖x‖_d`; defaults to `1e-6·‖x0‖_d`.
    pub eps_dead: Option<f64>,
    pub settle_threshold: f64,
    pub dwell: f64,
    pub hold: HoldMode,
    pub perturbation: PerturbationSpec,
    pub law: ControlLaw,
}

impl SimulationConfig {
    pub fn new(
        plant: PlantModel,
        homogenization: HomogenizationResult,
        certificate: GainCertificate,
        quantizer: SphericalQuantizer,
        x0: DVector<f64>,
    ) -> Self {
        SimulationConfig {
            plant,
            homogenization,
            certificate,
            quantizer,
            x0,
            t_end: DEFAULT_T_END,
            h: DEFAULT_STEP,
            eps_dead: None,
            settle_threshold: DEFAULT_SETTLE_THRESHOLD,
            dwell: DEFAULT_DWELL,
            hold: HoldMode::Continuous,
            perturbation: PerturbationSpec::none(),
            law: ControlLaw::Quantized,
        }
    }
}

/// Validated configuration with the pieces the integrator needs.
#[derive(Debug, Clone)]
pub struct Simulator {
    cfg: SimulationConfig,
    dilation: Dilation,
    eps_dead: f64,
    initial_norm: f64,
}

/// Control evaluated at one state.
#[derive(Debug, Clone)]
struct ControlEval {
    u: DVector<f64>,
    index: Option<u64>,
    norm: f64,
    log_norm: Option<f64>,
}

impl Simulator {
    pub fn new(cfg: SimulationConfig) -> Result<Self> {
        let n = cfg.plant.n();
        let m = cfg.plant.m();
        if cfg.x0.len() != n {
            return Err(Error::Configuration(format!("x0 has length {}, plant has n = {n}", cfg.x0.len())));
        }
        if cfg.certificate.k.shape() != (m, n) || cfg.homogenization.generator.shape() != (n, n) {
            return Err(Error::Configuration("certificate or generator dimensions do not match the plant".into()));
        }
        if cfg.quantizer.dim() != n {
            return Err(Error::Configuration("quantizer dimension does not match the plant".into()));
        }
        if !cfg.quantizer.same_weight(&cfg.certificate.p) {
            return Err(Error::Configuration("certificate and quantizer use different weights P".into()));
        }
        if !(cfg.h > 0.0 && cfg.h.is_finite()) {
            return Err(Error::Configuration(format!("step size {} must be positive", cfg.h)));
        }
        if !(cfg.t_end > 0.0 && cfg.t_end.is_finite()) {
            return Err(Error::Configuration(format!("t_end {} must be positive", cfg.t_end)));
        }
        if !(cfg.settle_threshold > 0.0 && cfg.dwell >= 0.0) {
            return Err(Error::Configuration("settle threshold must be positive and dwell non-negative".into()));
        }
        if let HoldMode::SampleAndHold { period } = cfg.hold {
            if !(period >= cfg.h) {
                return Err(Error::Configuration(format!("hold period {period} shorter than the step {}", cfg.h)));
            }
        }
        cfg.perturbation.validate(n)?;
        let dilation = Dilation::new(cfg.homogenization.generator.clone(), cfg.certificate.p.clone())?;
        let initial_norm = dilation.canonical_norm(&cfg.x0)?.value;
        let eps_dead = cfg.eps_dead.unwrap_or(DEFAULT_DEADBAND * initial_norm);
        if !(eps_dead >= 0.0) {
            return Err(Error::Configuration(format!("deadband {eps_dead} must be non-negative")));
        }
        Ok(Simulator { cfg, dilation, eps_dead, initial_norm })
    }

    pub fn config(&self) -> &SimulationConfig {
        &self.cfg
    }

    pub fn dilation(&self) -> &Dilation {
        &self.dilation
    }

    pub fn eps_dead(&self) -> f64 {
        self.eps_dead
    }

    fn control(&self, x: &DVector<f64>, log_guess: Option<f64>) -> Result<ControlEval> {
        let m = self.cfg.plant.m();
        let (s, z) = match self.dilation.norm_and_projection(x, log_guess)? {
            Some((s, z)) if s.exp() >= self.eps_dead => (s, z),
            other => {
                let log_norm = other.map(|(s, _)| s);
                let norm = log_norm.map_or(0.0, f64::exp);
                return Ok(ControlEval { u: DVector::zeros(m), index: None, norm, log_norm });
            }
        };
        let (seed, index) = match self.cfg.law {
            ControlLaw::Quantized => {
                let q = self.cfg.quantizer.quantize_on_sphere(&z);
                (q.seed, q.index)
            }
            ControlLaw::Homogeneous => (z, None),
        };
        Ok(ControlEval { u: &self.cfg.certificate.k * seed, index, norm: s.exp(), log_norm: Some(s) })
    }

    fn drift(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut dx = &self.cfg.plant.a * x + &self.cfg.plant.b * u;
        if self.cfg.perturbation.kind != PerturbationKind::None {
            dx += self.cfg.perturbation.eval(t, &self.cfg.plant.b);
        }
        dx
    }

    /// Closed-loop vector field at `(t, x)`.
    pub fn rhs(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        let c = self.control(x, None)?;
        Ok(self.drift(t, x, &c.u))
    }

    /// `‖x‖_d · zᵀP d(−s) g / (zᵀ P G_d z)`, the rate contributed by the
    /// perturbation to `d‖x‖_d/dt`.
    pub fn perturbation_margin(&self, t: f64, x: &DVector<f64>) -> Result<f64> {
        let norm = self.dilation.canonical_norm(x)?;
        match norm.log_value {
            Some(s) if norm.value >= self.eps_dead => self.margin_at(t, x, norm.value, s),
            _ => Err(Error::UndefinedAtOrigin),
        }
    }

    fn margin_at(&self, t: f64, x: &DVector<f64>, value: f64, s: f64) -> Result<f64> {
        if self.cfg.perturbation.kind == PerturbationKind::None {
            return Ok(0.0);
        }
        let g = self.cfg.perturbation.eval(t, &self.cfg.plant.b);
        let (grad, _) = self.dilation.gradient_at(x, value, s)?;
        Ok((grad * g)[0])
    }

    fn check_state(&self, t: f64, x: &DVector<f64>) -> Result<()> {
        let norm = x.norm();
        if !norm.is_finite() || norm > DIVERGENCE_LIMIT {
            return Err(Error::Divergence { t, norm });
        }
        Ok(())
    }

    pub fn integrate(&self) -> Result<Trajectory> {
        let cfg = &self.cfg;
        let h = cfg.h;
        let steps = (cfg.t_end / h).round().max(1.0) as usize;
        let hold_steps = match cfg.hold {
            HoldMode::Continuous => None,
            HoldMode::SampleAndHold { period } => Some(((period / h).round() as usize).max(1)),
        };
        let kappa = cfg.perturbation.kappa_budget.unwrap_or_else(|| cfg.perturbation.sufficient_kappa(&cfg.plant.b, &self.dilation));
        let g_bound = kappa * self.dilation.beta();

        let mut traj = Trajectory::with_capacity(steps + 1);
        traj.h = h;
        traj.initial_norm = self.initial_norm;
        traj.settle_threshold = cfg.settle_threshold;
        traj.dwell = cfg.dwell;
        traj.eps_dead = self.eps_dead;
        traj.beta = self.dilation.beta();
        traj.kappa = kappa;

        let mut x = cfg.x0.clone();
        let mut guess: Option<f64> = None;
        let mut held: Option<DVector<f64>> = None;
        for k in 0..=steps {
            let t = k as f64 * h;
            self.check_state(t, &x)?;
            let c = self.control(&x, guess)?;
            guess = c.log_norm.or(guess);

            if cfg.perturbation.kappa_budget.is_some() && cfg.perturbation.is_matched() {
                let g = cfg.perturbation.eval(t, &cfg.plant.b);
                let gp = self.dilation.weighted_norm(&g);
                if gp > g_bound * (1.0 + 1e-12) {
                    return Err(Error::Configuration(format!(
                        "perturbation exceeds its budget at t = {t}: ‖g‖_P = {gp:.6e} > β·κ = {g_bound:.6e}"
                    )));
                }
            }
            let margin = match c.log_norm {
                Some(s) if c.norm >= self.eps_dead => self.margin_at(t, &x, c.norm, s)?,
                _ => f64::NAN,
            };

            if let Some(every) = hold_steps {
                if k % every == 0 {
                    held = Some(c.u.clone());
                }
            }
            let u_rec = held.clone().unwrap_or_else(|| c.u.clone());
            traj.times.push(t);
            traj.states.push(x.clone());
            traj.controls.push(u_rec);
            traj.seed_indices.push(c.index);
            traj.hom_norm.push(c.norm);
            traj.perturbation_margin.push(margin);
            if k == steps {
                break;
            }

            x = match &held {
                Some(u) => self.rk4_held(t, &x, u),
                None => self.rk4(t, &x, c.u, &mut guess)?,
            };
        }
        traj.finish();
        Ok(traj)
    }

    fn rk4(&self, t: f64, x: &DVector<f64>, u1: DVector<f64>, guess: &mut Option<f64>) -> Result<DVector<f64>> {
        let h = self.cfg.h;
        let k1 = self.drift(t, x, &u1);
        let x2 = x + &k1 * (h / 2.0);
        let c2 = self.control(&x2, *guess)?;
        let k2 = self.drift(t + h / 2.0, &x2, &c2.u);
        let x3 = x + &k2 * (h / 2.0);
        let c3 = self.control(&x3, c2.log_norm.or(*guess))?;
        let k3 = self.drift(t + h / 2.0, &x3, &c3.u);
        let x4 = x + &k3 * h;
        let c4 = self.control(&x4, c3.log_norm.or(*guess))?;
        let k4 = self.drift(t + h, &x4, &c4.u);
        *guess = c4.log_norm.or(*guess);
        Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
    }

    fn rk4_held(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let h = self.cfg.h;
        let k1 = self.drift(t, x, u);
        let k2 = self.drift(t + h / 2.0, &(x + &k1 * (h / 2.0)), u);
        let k3 = self.drift(t + h / 2.0, &(x + &k2 * (h / 2.0)), u);
        let k4 = self.drift(t + h, &(x + &k3 * h), u);
        x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
    }
}

/// Closed-loop vector field for a configuration.
pub fn closed_loop_rhs(cfg: &SimulationConfig, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
    Simulator::new(cfg.clone())?.rhs(t, x)
}

pub fn integrate(cfg: &SimulationConfig) -> Result<Trajectory> {
    Simulator::new(cfg.clone())?.integrate()
}

pub fn perturbation_margin(cfg: &SimulationConfig, t: f64, x: &DVector<f64>) -> Result<f64> {
    Simulator::new(cfg.clone())?.perturbation_margin(t, x)
}

#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    /// Seed index per sample, `None` inside the deadband.
    pub seed_indices: Vec<Option<u64>>,
    pub hom_norm: Vec<f64>,
    /// Five-point centered difference of `hom_norm`; `NaN` at the ends and
    /// where the stencil touches the deadband.
    pub lyap_rate: Vec<f64>,
    pub settling_time: Option<f64>,
    /// `NaN` inside the deadband.
    pub perturbation_margin: Vec<f64>,
    pub h: f64,
    pub initial_norm: f64,
    pub settle_threshold: f64,
    pub dwell: f64,
    pub eps_dead: f64,
    pub beta: f64,
    /// Perturbation budget used for the decay test.
    pub kappa: f64,
}

impl Trajectory {
    fn with_capacity(n: usize) -> Self {
        Trajectory {
            times: Vec::with_capacity(n),
            states: Vec::with_capacity(n),
            controls: Vec::with_capacity(n),
            seed_indices: Vec::with_capacity(n),
            hom_norm: Vec::with_capacity(n),
            perturbation_margin: Vec::with_capacity(n),
            ..Default::default()
        }
    }

    fn finish(&mut self) {
        self.lyap_rate = five_point_rate(&self.hom_norm, self.h, self.eps_dead);
        self.settling_time = settling_time(&self.times, &self.hom_norm, self.settle_threshold * self.initial_norm, self.dwell);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Norm level below which the state counts as settled.
    pub fn band(&self) -> f64 {
        self.settle_threshold * self.initial_norm
    }

    pub fn max_perturbation_margin(&self) -> Option<f64> {
        self.perturbation_margin.iter().copied().filter(|v| v.is_finite()).reduce(f64::max)
    }

    pub fn summary(&self, certificate: &GainCertificate) -> TrajectorySummary {
        let report = lyapunov_report(self, certificate).ok();
        TrajectorySummary {
            settling_time: self.settling_time,
            median_rate: report.as_ref().map(|r| r.median_rate),
            violation_fraction: report.as_ref().map(|r| r.violation_fraction),
            max_perturbation_margin: self.max_perturbation_margin(),
            kappa: self.kappa,
            rho: certificate.rho,
            initial_hom_norm: self.initial_norm,
            final_hom_norm: self.hom_norm.last().copied().unwrap_or(0.0),
            samples: self.len(),
        }
    }

    /// Writes `t,x1..xn,u1..um,seed_index,hom_norm,lyap_rate`, keeping every
    /// `decimation`-th row. Lines of `comments` are written first with a `# `
    /// prefix.
    pub fn write_csv<W: Write>(&self, mut out: W, decimation: usize, comments: &[String]) -> std::io::Result<()> {
        for c in comments {
            writeln!(out, "# {c}")?;
        }
        let n = self.states.first().map_or(0, |x| x.len());
        let m = self.controls.first().map_or(0, |u| u.len());
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=m).map(|i| format!("u{i}")));
        header.extend(["seed_index", "hom_norm", "lyap_rate"].map(String::from));
        w.write_record(&header)?;
        for k in (0..self.len()).step_by(decimation.max(1)) {
            let mut row = vec![self.times[k].to_string()];
            row.extend(self.states[k].iter().map(f64::to_string));
            row.extend(self.controls[k].iter().map(f64::to_string));
            row.push(self.seed_indices[k].map(|i| i.to_string()).unwrap_or_default());
            row.push(self.hom_norm[k].to_string());
            row.push(if self.lyap_rate[k].is_finite() { self.lyap_rate[k].to_string() } else { String::new() });
            w.write_record(&row)?;
        }
        w.flush()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub settling_time: Option<f64>,
    pub median_rate: Option<f64>,
    pub violation_fraction: Option<f64>,
    pub max_perturbation_margin: Option<f64>,
    pub kappa: f64,
    pub rho: f64,
    pub initial_hom_norm: f64,
    pub final_hom_norm: f64,
    pub samples: usize,
}

fn five_point_rate(f: &[f64], h: f64, eps_dead: f64) -> Vec<f64> {
    let mut rate = vec![f64::NAN; f.len()];
    for k in 2..f.len().saturating_sub(2) {
        let w = &f[k - 2..=k + 2];
        if w.iter().all(|&v| v >= eps_dead && v > 0.0) {
            rate[k] = (w[0] - 8.0 * w[1] + 8.0 * w[3] - w[4]) / (12.0 * h);
        }
    }
    rate
}

/// First sample after the last one above `level`, provided the state then
/// stays below for at least `dwell` until the end of the run.
fn settling_time(times: &[f64], norms: &[f64], level: f64, dwell: f64) -> Option<f64> {
    let start = norms.iter().rposition(|&v| v > level).map_or(0, |j| j + 1);
    let t_settle = *times.get(start)?;
    let t_end = *times.last()?;
    (t_end - t_settle >= dwell - 1e-9 * dwell.max(1.0)).then_some(t_settle)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovReport {
    pub median_rate: f64,
    pub violation_fraction: f64,
    pub max_rate: f64,
    /// Rates above this count as violations.
    pub threshold: f64,
    pub samples: usize,
}

/// Decay statistics of `‖x‖_d` outside the settled band, with the default
/// slack `0.01·ρ`.
pub fn lyapunov_report(traj: &Trajectory, certificate: &GainCertificate) -> Result<LyapunovReport> {
    lyapunov_report_with_tol(traj, certificate, LYAPUNOV_TOL_REL * certificate.rho.abs())
}

/// Samples whose whole stencil lies above the settled band are compared with
/// `min(−(ρ − κ), 0) + tol`; samples in the band are chattering and skipped.
pub fn lyapunov_report_with_tol(traj: &Trajectory, certificate: &GainCertificate, tol: f64) -> Result<LyapunovReport> {
    let band = traj.band().max(traj.eps_dead);
    let mut rates: Vec<f64> = (2..traj.len().saturating_sub(2))
        .filter(|&k| traj.lyap_rate[k].is_finite() && traj.hom_norm[k - 2..=k + 2].iter().all(|&v| v > band))
        .map(|k| traj.lyap_rate[k])
        .collect();
    if rates.is_empty() {
        return Err(Error::InsufficientData("no rate samples outside the settled band".into()));
    }
    let threshold = (traj.kappa - certificate.rho).min(0.0) + tol;
    let violations = rates.iter().filter(|&&r| r > threshold).count();
    rates.sort_by(f64::total_cmp);
    let mid = rates.len() / 2;
    let median_rate = if rates.len() % 2 == 1 { rates[mid] } else { 0.5 * (rates[mid - 1] + rates[mid]) };
    Ok(LyapunovReport {
        median_rate,
        violation_fraction: violations as f64 / rates.len() as f64,
        max_rate: *rates.last().expect("non-empty"),
        threshold,
        samples: rates.len(),
    })
}
