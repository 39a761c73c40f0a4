//! Third-order chain of integrators: synthesis, quantizer sizing and a
//! perturbed closed-loop run.

use std::time::Instant;

use homquant_core::simulator::{integrate, lyapunov_report, PerturbationSpec, SimulationConfig};
use homquant_core::synthesis::{solve_gain_lmi, solve_homogenization, verify_lmi, GainLmiOptions, PlantModel};
use homquant_core::SphericalQuantizer;
use nalgebra::{DMatrix, DVector};

fn main() -> homquant_core::Result<()> {
    let a = DMatrix::from_row_slice(3, 3, &[0.0, 2.0, 3.0, 0.0, 0.0, 4.0, 0.0, 0.0, 0.0]);
    let b = DMatrix::from_column_slice(3, 1, &[0.0, 0.0, 1.5]);
    let plant = PlantModel::new(a, b)?;
    let homog = solve_homogenization(&plant, -1.0)?;
    println!("Gd = {}", homog.generator);

    let clock = Instant::now();
    let opts = GainLmiOptions { tau: Some(2.5), ..Default::default() };
    let cert = solve_gain_lmi(&homog.a0, &plant.b, &homog.generator, 0.4, &opts)?;
    println!("synthesis {:?}", clock.elapsed());
    println!("K = {}P = {}margins = {:?}\nrho = {} rho_achievable = {:?}", cert.k, cert.p, cert.margins, cert.rho, cert.rho_achievable);

    let p_print = DMatrix::from_row_slice(3, 3, &[0.0053, 0.0037, 0.0185, 0.0037, 0.0212, 0.0381, 0.0185, 0.0381, 0.2522]);
    let k_print = DMatrix::from_row_slice(1, 3, &[-0.1327, -0.4089, -1.7270]);
    let x_print = p_print.clone().try_inverse().unwrap();
    let m = verify_lmi(&homog.a0, &plant.b, &homog.generator, &x_print, &(&k_print * &x_print), 0.4, 2.5)?;
    println!("printed P, K margins = {m:?}");

    let quantizer = SphericalQuantizer::new(3, 512, &cert.p, true)?;
    println!("delta_N = {}", quantizer.delta_n());
    let mut cfg = SimulationConfig::new(plant, homog, cert.clone(), quantizer, DVector::from_vec(vec![2.0, 1.0, 1.0]));
    cfg.perturbation = PerturbationSpec::matched_sinusoid(0.2);
    let clock = Instant::now();
    let traj = integrate(&cfg)?;
    println!("simulation {:?}", clock.elapsed());
    println!("summary = {:?}", traj.summary(&cert));
    println!("report = {:?}", lyapunov_report(&traj, &cert));
    let x0n = cfg.x0.norm();
    if let Some(t) = traj.settling_time {
        let worst = traj.times.iter().zip(&traj.states).filter(|(s, _)| **s >= t).map(|(_, x)| x.norm()).fold(0.0, f64::max);
        println!("max |x| after settling / |x0| = {}", worst / x0n);
    }
    Ok(())
}
