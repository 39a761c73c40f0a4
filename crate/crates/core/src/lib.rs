//! Finite-time stabilization of controllable linear plants through a finite
//! static quantizer.
//!
//! The state is projected onto the unit sphere of a weighted norm along the
//! orbits of a linear dilation, the projection is quantized in spherical
//! coordinates, and the plant is driven by `u = K·q(x)`. Gains come from an
//! LMI whose S-procedure certificate also yields a guaranteed decay rate of
//! the canonical homogeneous norm.
//!
//! Modules:
//! - [`dilation`]: dilations, the canonical homogeneous norm, its gradient and projector.
//! - [`synthesis`]: homogenization, gain LMIs, certificates.
//! - [`quantizer`]: the spherical quantizer and its bit-level codec.
//! - [`simulator`]: fixed-step closed-loop integration and Lyapunov diagnostics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dilation;
pub mod error;
pub mod linalg;
pub mod matrix_serde;
pub mod quantizer;
pub mod simulator;
pub mod synthesis;

pub use dilation::{check_monotonicity, Dilation, HomNormValue};
pub use error::{Error, Result};
pub use linalg::matrix_exponential;
pub use quantizer::{EncodedSample, QuantizedSample, SphericalQuantizer};
pub use simulator::{PerturbationSpec, SimulationConfig, Trajectory};
pub use synthesis::{GainCertificate, HomogenizationResult, PlantModel};
