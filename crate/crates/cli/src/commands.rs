use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use homquant_core::simulator::{integrate, SimulationConfig, TrajectorySummary};
use homquant_core::synthesis::{
    assemble_w, compute_rho, decay_weight, solve_gain_lmi, solve_homogenization, verify_lmi, GainCertificate,
    GainLmiOptions, HomogenizationResult, LmiMargins, PlantModel,
};
use homquant_core::{Dilation, Error, SphericalQuantizer};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{CertificateDoc, RunConfig};
use crate::{CliError, Common, Switch, SweepArgs, VerifyArgs};

const DEMO_STATES: usize = 8;

/// Loaded configuration with command-line overrides applied.
struct Run {
    cfg: RunConfig,
    hash: String,
}

impl Run {
    fn load(args: &Common) -> Result<Self, CliError> {
        let mut cfg = RunConfig::load(&args.config)?;
        if let Some(v) = &args.out {
            cfg.out_dir = Some(v.clone());
        }
        if let Some(v) = args.seed {
            cfg.seed = v;
        }
        if let Some(v) = args.delta {
            cfg.delta = v;
        }
        if let Some(v) = args.tau {
            cfg.tau = Some(v);
        }
        if let Some(v) = args.bits {
            cfg.quantizer.bits = Some(v);
            cfg.quantizer.budget = None;
            cfg.quantizer.m = None;
        }
        if let Some(v) = args.budget {
            cfg.quantizer.budget = Some(v);
            cfg.quantizer.bits = None;
            cfg.quantizer.m = None;
        }
        if let Some(v) = args.floor_mode {
            cfg.quantizer.floor_mode = v == Switch::On;
        }
        if let Some(v) = args.h {
            cfg.simulation.h = v;
        }
        if let Some(v) = args.t_end {
            cfg.simulation.t_end = v;
        }
        if let Some(v) = &args.certificate {
            cfg.certificate = Some(v.clone());
        }
        cfg.validate()?;
        let hash = cfg.hash();
        Ok(Run { cfg, hash })
    }

    fn out_dir(&self) -> Result<PathBuf, CliError> {
        let dir = self.cfg.out_dir();
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn homogenize(&self) -> Result<(PlantModel, HomogenizationResult), CliError> {
        let plant = self.cfg.plant()?;
        let homog = solve_homogenization(&plant, self.cfg.mu)?;
        Ok((plant, homog))
    }

    fn synthesize(&self, plant: &PlantModel, homog: &HomogenizationResult) -> Result<GainCertificate, CliError> {
        let options = GainLmiOptions { tau: self.cfg.tau, seed: self.cfg.seed, ..Default::default() };
        Ok(solve_gain_lmi(&homog.a0, &plant.b, &homog.generator, self.cfg.delta, &options)?)
    }

    /// Certificate from the configured file, or a fresh synthesis.
    fn certificate(&self, plant: &PlantModel, homog: &HomogenizationResult) -> Result<GainCertificate, CliError> {
        match &self.cfg.certificate {
            Some(path) => {
                let (x, y) = CertificateDoc::load(path)?.decision()?;
                let n = plant.n();
                if x.shape() != (n, n) || y.shape() != (plant.m(), n) {
                    return Err(CliError::Input(format!("certificate {} does not match the plant dimensions", path.display())));
                }
                Ok(GainCertificate::from_xy(&homog.a0, &plant.b, &homog.generator, &x, &y, self.cfg.delta, self.cfg.tau())?)
            }
            None => self.synthesize(plant, homog),
        }
    }

    fn quantizer(&self, cert: &GainCertificate, budget: Option<u64>) -> Result<SphericalQuantizer, CliError> {
        let n = cert.p.nrows();
        let q = match (budget, self.cfg.quantizer.m) {
            (None, Some(m)) => SphericalQuantizer::with_bins(n, m, &cert.p)?,
            (b, _) => {
                let budget = b.map_or_else(|| self.cfg.budget(), Ok)?;
                SphericalQuantizer::new(n, budget, &cert.p, self.cfg.quantizer.floor_mode)?
            }
        };
        Ok(q)
    }

    fn simulation(
        &self,
        plant: &PlantModel,
        homog: &HomogenizationResult,
        cert: &GainCertificate,
        quantizer: SphericalQuantizer,
    ) -> Result<SimulationConfig, CliError> {
        let s = &self.cfg.simulation;
        if s.x0.is_empty() {
            return Err(CliError::Input("simulation.x0 is required".into()));
        }
        let mut sim = SimulationConfig::new(plant.clone(), homog.clone(), cert.clone(), quantizer, DVector::from_column_slice(&s.x0));
        sim.t_end = s.t_end;
        sim.h = s.h;
        sim.eps_dead = s.eps_dead;
        sim.settle_threshold = s.settle_threshold;
        sim.dwell = s.dwell;
        sim.hold = s.hold;
        sim.perturbation = s.perturbation.clone();
        sim.law = s.law;
        Ok(sim)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Input(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn print_margins(m: &LmiMargins) {
    println!("margin_mono   = {:.6e}", m.margin_mono);
    println!("margin_posdef = {:.6e}", m.margin_posdef);
    println!("margin_W      = {:.6e}", m.margin_w);
}

pub fn synthesize(args: &Common) -> Result<u8, CliError> {
    let run = Run::load(args)?;
    let (plant, homog) = run.homogenize()?;
    let cert = run.synthesize(&plant, &homog)?;
    let path = run.out_dir()?.join("certificate.json");
    write_json(&path, &CertificateDoc::new(&plant, &homog, &cert, run.hash.clone()))?;
    println!("certified gain K = {:?}", cert.k.transpose().as_slice());
    print_margins(&cert.margins);
    println!("rho = {:.6e}, tau = {}", cert.rho, cert.tau);
    println!("wrote {}", path.display());
    Ok(0)
}

#[derive(Serialize)]
struct VerifyReport {
    delta: f64,
    tau: f64,
    mu: f64,
    margins: LmiMargins,
    certified: bool,
    w_norm: f64,
    relative_margin_w: f64,
    within_rounding_slack: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    rho: Option<f64>,
}

/// Relative size of `λ_max(W)` still attributed to printed-digit rounding.
const ROUNDING_SLACK: f64 = 1e-2;

pub fn verify(args: &VerifyArgs) -> Result<u8, CliError> {
    let doc = CertificateDoc::load(&args.certificate)?;
    let cfg = args.config.as_deref().map(RunConfig::load).transpose()?;
    let plant = match (doc.plant()?, &cfg) {
        (Some(p), _) => p,
        (None, Some(c)) => c.plant()?,
        (None, None) => return Err(CliError::Input("certificate has no plant; pass --config".into())),
    };
    let delta = args.delta.or(doc.delta).or(cfg.as_ref().map(|c| c.delta)).unwrap_or(0.4);
    let tau = args.tau.or(doc.tau).or(cfg.as_ref().and_then(|c| c.tau)).unwrap_or(1.0 / delta);
    let mu = args.mu.or(doc.mu).or(cfg.as_ref().map(|c| c.mu)).unwrap_or(-1.0);
    if !(delta > 0.0 && delta < 1.0 && tau > 0.0) {
        return Err(CliError::Input(format!("need 0 < delta < 1 and tau > 0, got {delta}, {tau}")));
    }
    let homog = solve_homogenization(&plant, mu)?;
    let (x, y) = doc.decision()?;
    let n = plant.n();
    if x.shape() != (n, n) || y.shape() != (plant.m(), n) {
        return Err(CliError::Input("certificate does not match the plant dimensions".into()));
    }
    let margins = verify_lmi(&homog.a0, &plant.b, &homog.generator, &x, &y, delta, tau)?;
    let certified = margins.is_certified();
    let p = x.clone().try_inverse().ok_or(Error::CannotInvert("X".into()))?;
    let k = &y * &p;
    let w = assemble_w(&homog.a0, &plant.b, &k, &p, delta, tau);
    let w_norm = w.singular_values().max();
    let rho = if certified { Some(compute_rho(&w, &decay_weight(&homog.generator, &p))?) } else { None };
    let report = VerifyReport {
        delta,
        tau,
        mu,
        margins,
        certified,
        w_norm,
        relative_margin_w: margins.margin_w / w_norm,
        within_rounding_slack: margins.margin_mono > 0.0
            && margins.margin_posdef > 0.0
            && margins.margin_w <= ROUNDING_SLACK * w_norm,
        rho,
    };
    print_margins(&margins);
    println!("|W|_2 = {w_norm:.6e}, margin_W/|W|_2 = {:.3e}", report.relative_margin_w);
    if certified {
        println!("certified, rho = {:.6e}", rho.unwrap_or(f64::NAN));
    } else if report.within_rounding_slack {
        println!("not certified; margin_W is within {ROUNDING_SLACK} of |W|_2, consistent with rounded printed digits");
    } else {
        println!("not certified");
    }
    println!("{}", serde_json::to_string(&report).map_err(|e| CliError::Input(e.to_string()))?);
    Ok(if certified { 0 } else { 2 })
}

pub fn quantize_demo(args: &Common) -> Result<u8, CliError> {
    let run = Run::load(args)?;
    let (plant, homog) = run.homogenize()?;
    let cert = run.certificate(&plant, &homog)?;
    let q = run.quantizer(&cert, None)?;
    let dilation = Dilation::new(homog.generator.clone(), cert.p.clone())?;
    let n = plant.n();
    let states: Vec<DVector<f64>> = if run.cfg.demo_states.is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(run.cfg.seed);
        let mut v = vec![DVector::zeros(n)];
        v.extend((1..DEMO_STATES).map(|_| DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0))));
        v
    } else {
        run.cfg.demo_states.iter().map(|s| DVector::from_column_slice(s)).collect()
    };

    let dir = run.out_dir()?;
    let mut csv = Vec::new();
    writeln!(csv, "# config_hash={}", run.hash)?;
    let mut w = csv::Writer::from_writer(&mut csv);
    let mut header: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
    header.extend(["hom_norm", "seed_index", "code", "hex", "bits"].map(String::from));
    header.extend((1..=n).map(|i| format!("q{i}")));
    w.write_record(&header).map_err(std::io::Error::from)?;
    println!("N = {}, m = {}, delta_N = {:.6}, code width = {} bits", q.budget(), q.bins(), q.delta_n(), q.code_width());
    for x in &states {
        let sample = q.quantize(&dilation, x)?;
        let enc = q.encode(&sample);
        let bits: String = enc.to_bits().iter().map(|&b| if b { '1' } else { '0' }).collect();
        let norm = dilation.canonical_norm(x)?.value;
        let decoded = q.decode(&enc.to_bits())?;
        let mut row: Vec<String> = x.iter().map(f64::to_string).collect();
        row.push(norm.to_string());
        row.push(sample.index.map(|i| i.to_string()).unwrap_or_default());
        row.push(enc.code.to_string());
        row.push(enc.to_hex());
        row.push(bits.clone());
        row.extend(decoded.iter().map(f64::to_string));
        w.write_record(&row).map_err(std::io::Error::from)?;
        println!("x = {:?} -> code {} ({bits})", x.as_slice(), enc.code);
    }
    w.flush()?;
    drop(w);
    fs::write(dir.join("codes.csv"), csv)?;

    #[derive(Serialize)]
    struct Doc {
        config_hash: String,
        quantizer: homquant_core::quantizer::QuantizerConfig,
        code_width: u32,
    }
    write_json(&dir.join("quantizer.json"), &Doc { config_hash: run.hash.clone(), quantizer: q.to_config(), code_width: q.code_width() })?;
    println!("wrote {}", dir.display());
    Ok(0)
}

#[derive(Serialize)]
struct SimulateDoc {
    config_hash: String,
    delta: f64,
    #[serde(rename = "N")]
    budget: u64,
    m: u64,
    #[serde(rename = "delta_N")]
    delta_n: f64,
    margins: LmiMargins,
    summary: TrajectorySummary,
}

pub fn simulate(args: &Common) -> Result<u8, CliError> {
    let run = Run::load(args)?;
    let (plant, homog) = run.homogenize()?;
    let cert = run.certificate(&plant, &homog)?;
    let q = run.quantizer(&cert, None)?;
    if q.delta_n() >= cert.delta {
        eprintln!("warning: delta_N = {:.6} is not below delta = {}; the certificate does not cover this quantizer", q.delta_n(), cert.delta);
    }
    let (budget, bins, delta_n) = (q.budget(), q.bins(), q.delta_n());
    let sim = run.simulation(&plant, &homog, &cert, q)?;
    let traj = integrate(&sim)?;
    let summary = traj.summary(&cert);

    let dir = run.out_dir()?;
    let mut csv = Vec::new();
    traj.write_csv(&mut csv, run.cfg.simulation.decimation, &[format!("config_hash={}", run.hash)])?;
    fs::write(dir.join("trajectory.csv"), csv)?;
    let doc = SimulateDoc {
        config_hash: run.hash.clone(),
        delta: cert.delta,
        budget,
        m: bins,
        delta_n,
        margins: cert.margins,
        summary: summary.clone(),
    };
    write_json(&dir.join("summary.json"), &doc)?;

    match summary.settling_time {
        Some(t) => println!("settling time = {t:.4} s"),
        None => println!("did not settle within {} s", run.cfg.simulation.t_end),
    }
    println!("final |x|_d = {:.3e}, rho = {:.4e}, kappa = {:.4e}", summary.final_hom_norm, summary.rho, summary.kappa);
    if let (Some(med), Some(viol)) = (summary.median_rate, summary.violation_fraction) {
        println!("median d|x|_d/dt = {med:.4e}, violation fraction = {viol:.4}");
    }
    println!("wrote {}", dir.display());
    Ok(0)
}

struct SweepRow {
    budget: u64,
    bins: Option<u64>,
    delta_n: Option<f64>,
    feasible: bool,
    settling_time: Option<f64>,
    status: &'static str,
}

pub fn sweep(args: &SweepArgs) -> Result<u8, CliError> {
    let run = Run::load(&args.common)?;
    let budgets = if args.budgets.is_empty() { run.cfg.budgets.clone() } else { args.budgets.clone() };
    if budgets.is_empty() {
        return Err(CliError::Input("no budgets given; use --budgets or the config's budgets list".into()));
    }
    let (plant, homog) = run.homogenize()?;
    let cert = run.certificate(&plant, &homog)?;

    let one = |budget: u64| -> Result<SweepRow, CliError> {
        let q = match run.quantizer(&cert, Some(budget)) {
            Ok(q) => q,
            Err(CliError::Core(Error::BudgetTooSmall { bins, .. })) => {
                return Ok(SweepRow { budget, bins: Some(bins), delta_n: None, feasible: false, settling_time: None, status: "budget-too-small" })
            }
            Err(e) => return Err(e),
        };
        let mut row = SweepRow {
            budget,
            bins: Some(q.bins()),
            delta_n: Some(q.delta_n()),
            feasible: q.delta_n() < cert.delta,
            settling_time: None,
            status: "ok",
        };
        if !row.feasible {
            row.status = "delta-too-large";
            return Ok(row);
        }
        match integrate(&run.simulation(&plant, &homog, &cert, q)?) {
            Ok(traj) => {
                row.settling_time = traj.settling_time;
                if row.settling_time.is_none() {
                    row.status = "not-settled";
                }
            }
            Err(Error::Divergence { .. }) => row.status = "diverged",
            Err(e) => return Err(e.into()),
        }
        Ok(row)
    };

    let rows: Vec<Result<SweepRow, CliError>> = std::thread::scope(|s| {
        let handles: Vec<_> = budgets.iter().map(|&b| s.spawn(move || one(b))).collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    });

    let dir = run.out_dir()?;
    let mut out = Vec::new();
    writeln!(out, "# config_hash={}", run.hash)?;
    let mut w = csv::Writer::from_writer(&mut out);
    w.write_record(["N", "m", "delta_N", "feasible", "rho", "settling_time", "status"]).map_err(std::io::Error::from)?;
    for row in rows {
        let row = row?;
        let opt = |v: Option<String>| v.unwrap_or_default();
        let record = [
            row.budget.to_string(),
            opt(row.bins.map(|m| m.to_string())),
            opt(row.delta_n.map(|d| d.to_string())),
            row.feasible.to_string(),
            if row.feasible { cert.rho.to_string() } else { String::new() },
            opt(row.settling_time.map(|t| t.to_string())),
            row.status.to_string(),
        ];
        println!("{}", record.join(","));
        w.write_record(&record).map_err(std::io::Error::from)?;
    }
    w.flush()?;
    drop(w);
    fs::write(dir.join("sweep.csv"), out)?;
    println!("wrote {}", dir.join("sweep.csv").display());
    Ok(0)
}
