#![allow(dead_code)]

use homquant_core::simulator::SimulationConfig;
use homquant_core::synthesis::{solve_homogenization, GainCertificate, HomogenizationResult, PlantModel};
use homquant_core::SphericalQuantizer;
use nalgebra::{DMatrix, DVector};

pub const DELTA: f64 = 0.4;
pub const TAU: f64 = 2.5;

/// Third-order chain with input on the last state.
pub fn chain_plant() -> PlantModel {
    PlantModel::new(
        DMatrix::from_row_slice(3, 3, &[0.0, 2.0, 3.0, 0.0, 0.0, 4.0, 0.0, 0.0, 0.0]),
        DMatrix::from_column_slice(3, 1, &[0.0, 0.0, 1.5]),
    )
    .unwrap()
}

pub fn chain_homogenization() -> HomogenizationResult {
    solve_homogenization(&chain_plant(), -1.0).unwrap()
}

/// Weight printed with the published design (four decimals).
pub fn printed_p() -> DMatrix<f64> {
    DMatrix::from_row_slice(3, 3, &[0.0053, 0.0037, 0.0185, 0.0037, 0.0212, 0.0381, 0.0185, 0.0381, 0.2522])
}

pub fn printed_k() -> DMatrix<f64> {
    DMatrix::from_row_slice(1, 3, &[-0.1327, -0.4089, -1.7270])
}

pub fn printed_certificate() -> GainCertificate {
    let h = chain_homogenization();
    GainCertificate::from_pk(&h.a0, &chain_plant().b, &h.generator, &printed_p(), &printed_k(), DELTA, TAU).unwrap()
}

pub fn x0() -> DVector<f64> {
    DVector::from_vec(vec![2.0, 1.0, 1.0])
}

/// Closed loop with the printed design and a 512-seed quantizer.
pub fn chain_config(x0: DVector<f64>) -> SimulationConfig {
    let cert = printed_certificate();
    let q = SphericalQuantizer::new(3, 512, &cert.p, true).unwrap();
    SimulationConfig::new(chain_plant(), chain_homogenization(), cert, q, x0)
}
