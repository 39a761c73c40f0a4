mod common;

use std::f64::consts::PI;

use common::*;
use homquant_core::simulator::{closed_loop_rhs, integrate, lyapunov_report, perturbation_margin, PerturbationSpec, Simulator};
use homquant_core::Dilation;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent pipeline: bisection on the norm equation with the library
/// exponential, spherical angles by hand, bin centers, back to the sphere.
fn oracle_seed(x: &DVector<f64>, g: &DMatrix<f64>, p: &DMatrix<f64>, m: usize) -> DVector<f64> {
    let radius = |s: f64| {
        let z = (g * -s).exp() * x;
        z.dot(&(p * &z)).sqrt()
    };
    let (mut lo, mut hi) = (-50.0, 50.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if radius(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let z = (g * -(0.5 * (lo + hi))).exp() * x;
    let eig = p.clone().symmetric_eigen();
    let root = &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt)) * eig.eigenvectors.transpose();
    let w = &root * z;
    let w = &w / w.norm();
    let step = PI / m as f64;
    let phi1 = (w[1] * w[1] + w[2] * w[2]).sqrt().atan2(w[0]);
    let mut phi2 = w[2].atan2(w[1]);
    if phi2 < 0.0 {
        phi2 += 2.0 * PI;
    }
    let c1 = ((phi1 / step).floor().min(m as f64 - 1.0) + 0.5) * step;
    let c2 = ((phi2 / step).floor().min(2.0 * m as f64 - 1.0) + 0.5) * step;
    let unit = DVector::from_vec(vec![c1.cos(), c1.sin() * c2.cos(), c1.sin() * c2.sin()]);
    root.try_inverse().unwrap() * unit
}

#[test]
fn rhs_matches_step_through_oracle() {
    let cfg = chain_config(x0());
    let rhs = closed_loop_rhs(&cfg, 0.0, &cfg.x0).unwrap();
    let seed = oracle_seed(&cfg.x0, &cfg.homogenization.generator, &cfg.certificate.p, 16);
    let expected = &cfg.plant.a * &cfg.x0 + &cfg.plant.b * (&cfg.certificate.k * seed);
    assert!((rhs - expected).amax() < 1e-9);
}

#[test]
fn origin_stays_put() {
    let mut cfg = chain_config(DVector::zeros(3));
    cfg.t_end = 1.0;
    let traj = integrate(&cfg).unwrap();
    assert!(traj.states.iter().all(|x| x.iter().all(|&v| v == 0.0)));
    assert!(traj.controls.iter().all(|u| u.iter().all(|&v| v == 0.0)));
    assert_eq!(closed_loop_rhs(&cfg, 0.0, &DVector::zeros(3)).unwrap(), DVector::zeros(3));
}

#[test]
fn unperturbed_decay_beats_certificate() {
    let mut cfg = chain_config(x0());
    cfg.t_end = 6.0;
    let traj = integrate(&cfg).unwrap();
    let report = lyapunov_report(&traj, &cfg.certificate).unwrap();
    assert!(report.median_rate <= -0.9 * cfg.certificate.rho);
    assert!(report.violation_fraction <= 0.05);
    assert!(traj.settling_time.is_some());
    for (k, x) in traj.states.iter().enumerate().step_by(997) {
        let d = Dilation::new(cfg.homogenization.generator.clone(), cfg.certificate.p.clone()).unwrap();
        assert!((d.canonical_norm(x).unwrap().value - traj.hom_norm[k]).abs() <= 1e-12 * (1.0 + traj.hom_norm[k]));
    }
}

#[test]
fn matched_perturbation_margin_within_budget() {
    let mut cfg = chain_config(x0());
    cfg.perturbation = PerturbationSpec::matched_sinusoid(0.2);
    let sim = Simulator::new(cfg.clone()).unwrap();
    let beta = sim.dilation().beta();
    let kappa = cfg.perturbation.sufficient_kappa(&cfg.plant.b, sim.dilation());
    assert!((kappa - 0.2 * sim.dilation().weighted_norm(&cfg.plant.b.column(0).into()) / beta).abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..500 {
        let x = DVector::from_fn(3, |_, _| rng.random_range(-3.0..3.0));
        let t = rng.random_range(0.0..20.0);
        let margin = perturbation_margin(&cfg, t, &x).unwrap();
        assert!(margin <= kappa * (1.0 + 1e-12), "{margin} > {kappa}");
    }
    cfg.perturbation = PerturbationSpec::none();
    assert_eq!(perturbation_margin(&cfg, 1.0, &x0()).unwrap(), 0.0);
}

#[test]
fn step_halving_converges() {
    let settle = |h: f64| {
        let mut cfg = chain_config(x0());
        cfg.t_end = 6.0;
        cfg.h = h;
        integrate(&cfg).unwrap().settling_time.unwrap()
    };
    let (t1, t2, t3) = (settle(4e-4), settle(2e-4), settle(1e-4));
    let (c1, c2) = ((t2 - t1).abs(), (t3 - t2).abs());
    assert!(c2 <= 2.0 * c1, "settling times {t1} {t2} {t3}");
}

#[test]
fn csv_export_has_expected_columns() {
    let mut cfg = chain_config(x0());
    cfg.t_end = 0.01;
    let traj = integrate(&cfg).unwrap();
    let mut out = Vec::new();
    traj.write_csv(&mut out, 10, &[]).unwrap();
    let text = String::from_utf8(out).unwrap();
    let mut rows = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = rows.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, ["t", "x1", "x2", "x3", "u1", "seed_index", "hom_norm", "lyap_rate"]);
    assert_eq!(rows.records().count(), 11);
}
