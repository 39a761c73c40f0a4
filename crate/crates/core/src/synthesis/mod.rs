//! Controller synthesis: homogenization of the plant, the quantized-feedback
//! LMI with its S-procedure certificate, and the unquantized baseline design.

mod certificate;
mod homogenization;
pub mod lmi;

pub use certificate::{
    assemble_w, compute_rho, decay_weight, solve_baseline_lmi, solve_gain_lmi, verify_lmi, BaselineGain,
    GainCertificate, GainLmiOptions, LmiMargins, BASELINE_EQUALITY_TOL, MAX_W_EIGENVALUE, MIN_MONO_MARGIN, TAU_GRID,
};
pub use homogenization::{
    nilpotency_residual, solve_homogenization, HomogenizationResult, PlantModel, CONTROLLABILITY_RANK_TOL,
};
