use std::path::{Path, PathBuf};

use homquant_core::matrix_serde::{from_rows, to_rows};
use homquant_core::simulator::{ControlLaw, HoldMode, PerturbationSpec};
use homquant_core::synthesis::{GainCertificate, HomogenizationResult, LmiMargins, PlantModel};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSpec {
    #[serde(rename = "A")]
    pub a: Rows,
    #[serde(rename = "B")]
    pub b: Rows,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizerSpec {
    /// Seed budget `N`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<u64>,
    /// Bit budget `M`, meaning `N = 2^M`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bits: Option<u32>,
    /// Explicit bins per polar angle; overrides the budget.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<u64>,
    #[serde(default = "default_true")]
    pub floor_mode: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    #[serde(default)]
    pub x0: Vec<f64>,
    #[serde(default = "default_t_end")]
    pub t_end: f64,
    #[serde(default = "default_h")]
    pub h: f64,
    #[serde(default)]
    pub perturbation: PerturbationSpec,
    #[serde(default = "default_settle")]
    pub settle_threshold: f64,
    #[serde(default = "default_dwell")]
    pub dwell: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_dead: Option<f64>,
    #[serde(default = "default_hold")]
    pub hold: HoldMode,
    #[serde(default = "default_law")]
    pub law: ControlLaw,
    /// Keep every k-th step in the CSV trace.
    #[serde(default = "default_decimation")]
    pub decimation: usize,
}

impl Default for QuantizerSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl Default for SimulationSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub plant: PlantSpec,
    #[serde(default = "default_mu")]
    pub mu: f64,
    pub delta: f64,
    /// S-procedure multiplier, `1/δ` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default)]
    pub quantizer: QuantizerSpec,
    #[serde(default)]
    pub simulation: SimulationSpec,
    /// Certificate file used by `simulate`, `quantize-demo` and `sweep`
    /// instead of synthesizing; relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certificate: Option<PathBuf>,
    /// Seed budgets for `sweep`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub budgets: Vec<u64>,
    /// States printed by `quantize-demo`; random ones are drawn when empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub demo_states: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

fn default_true() -> bool {
    true
}
fn default_mu() -> f64 {
    -1.0
}
fn default_t_end() -> f64 {
    homquant_core::simulator::DEFAULT_T_END
}
fn default_h() -> f64 {
    homquant_core::simulator::DEFAULT_STEP
}
fn default_settle() -> f64 {
    homquant_core::simulator::DEFAULT_SETTLE_THRESHOLD
}
fn default_dwell() -> f64 {
    homquant_core::simulator::DEFAULT_DWELL
}
fn default_hold() -> HoldMode {
    HoldMode::Continuous
}
fn default_law() -> ControlLaw {
    ControlLaw::Quantized
}
fn default_decimation() -> usize {
    100
}

pub const DEFAULT_BUDGET: u64 = 512;

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Input(format!("invalid config {}: {e}", path.display())))?;
        if let (Some(cert), Some(dir)) = (&cfg.certificate, path.parent()) {
            if cert.is_relative() {
                cfg.certificate = Some(dir.join(cert));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(CliError::Input(format!("delta = {} must lie in (0, 1)", self.delta)));
        }
        if let Some(tau) = self.tau {
            if !(tau > 0.0) {
                return Err(CliError::Input(format!("tau = {tau} must be positive")));
            }
        }
        let plant = self.plant()?;
        let x0 = &self.simulation.x0;
        if !x0.is_empty() && x0.len() != plant.n() {
            return Err(CliError::Input(format!("x0 has length {} but the plant has n = {}", x0.len(), plant.n())));
        }
        if let Some(s) = self.demo_states.iter().find(|s| s.len() != plant.n()) {
            return Err(CliError::Input(format!("demo state {s:?} does not have length {}", plant.n())));
        }
        Ok(())
    }

    pub fn plant(&self) -> Result<PlantModel, CliError> {
        let a = from_rows(&self.plant.a).map_err(CliError::Input)?;
        let b = from_rows(&self.plant.b).map_err(CliError::Input)?;
        Ok(PlantModel::new(a, b)?)
    }

    pub fn tau(&self) -> f64 {
        self.tau.unwrap_or(1.0 / self.delta)
    }

    /// Seed budget `N` from the quantizer block.
    pub fn budget(&self) -> Result<u64, CliError> {
        match (self.quantizer.budget, self.quantizer.bits) {
            (Some(n), _) => Ok(n),
            (None, Some(bits)) => 1u64
                .checked_shl(bits)
                .filter(|_| bits < 63)
                .ok_or_else(|| CliError::Input(format!("{bits} bits is too many"))),
            (None, None) => Ok(DEFAULT_BUDGET),
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    /// SHA-256 of the effective configuration, hex encoded. The output
    /// directory is left out so identical runs hash alike wherever they write.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&RunConfig { out_dir: None, ..self.clone() }).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Certificate file: everything needed to rebuild and re-verify the design.
/// Only `P` and `K` (or `X` and `Y`) are required when reading.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CertificateDoc {
    #[serde(rename = "A", default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Rows>,
    #[serde(rename = "B", default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Rows>,
    #[serde(rename = "G0", default, skip_serializing_if = "Option::is_none")]
    pub g0: Option<Rows>,
    #[serde(rename = "K0", default, skip_serializing_if = "Option::is_none")]
    pub k0: Option<Rows>,
    #[serde(rename = "Gd", default, skip_serializing_if = "Option::is_none")]
    pub gd: Option<Rows>,
    #[serde(rename = "X", default, skip_serializing_if = "Option::is_none")]
    pub x: Option<Rows>,
    #[serde(rename = "Y", default, skip_serializing_if = "Option::is_none")]
    pub y: Option<Rows>,
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub k: Option<Rows>,
    #[serde(rename = "P", default, skip_serializing_if = "Option::is_none")]
    pub p: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margins: Option<LmiMargins>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_achievable: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

fn matrix(rows: &Option<Rows>, name: &str) -> Result<Option<DMatrix<f64>>, CliError> {
    rows.as_ref()
        .map(|r| from_rows(r).map_err(|e| CliError::Input(format!("{name}: {e}"))))
        .transpose()
}

impl CertificateDoc {
    pub fn new(plant: &PlantModel, homog: &HomogenizationResult, cert: &GainCertificate, hash: String) -> Self {
        CertificateDoc {
            a: Some(to_rows(&plant.a)),
            b: Some(to_rows(&plant.b)),
            g0: Some(to_rows(&homog.g0)),
            k0: Some(to_rows(&homog.k0)),
            gd: Some(to_rows(&homog.generator)),
            x: Some(to_rows(&cert.x)),
            y: Some(to_rows(&cert.y)),
            k: Some(to_rows(&cert.k)),
            p: Some(to_rows(&cert.p)),
            delta: Some(cert.delta),
            tau: Some(cert.tau),
            margins: Some(cert.margins),
            rho: Some(cert.rho),
            rho_achievable: cert.rho_achievable,
            mu: Some(homog.mu),
            config_hash: Some(hash),
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("invalid certificate {}: {e}", path.display())))
    }

    pub fn plant(&self) -> Result<Option<PlantModel>, CliError> {
        match (matrix(&self.a, "A")?, matrix(&self.b, "B")?) {
            (Some(a), Some(b)) => Ok(Some(PlantModel::new(a, b)?)),
            (None, None) => Ok(None),
            _ => Err(CliError::Input("certificate must give both A and B or neither".into())),
        }
    }

    /// `(X, Y)` from the stored pair, or from `X = P⁻¹`, `Y = K·X`.
    pub fn decision(&self) -> Result<(DMatrix<f64>, DMatrix<f64>), CliError> {
        if let (Some(x), Some(y)) = (matrix(&self.x, "X")?, matrix(&self.y, "Y")?) {
            return Ok((x, y));
        }
        match (matrix(&self.p, "P")?, matrix(&self.k, "K")?) {
            (Some(p), Some(k)) => {
                let x = p.try_inverse().ok_or_else(|| CliError::Input("P is singular".into()))?;
                let y = &k * &x;
                Ok((x, y))
            }
            _ => Err(CliError::Input("certificate needs X and Y, or P and K".into())),
        }
    }
}
