//! Finite static quantizer on the unit sphere of the weighted norm.
//!
//! A state is projected onto the sphere along dilation orbits, mapped to
//! Euclidean spherical coordinates after the `P^{1/2}` change of variables,
//! and each angle is snapped to the center of a uniform bin. Polar angles use
//! `m` bins over `[0, π]`, the azimuth `2m` bins over `[0, 2π)`, all of
//! width `Δ = π/m`, giving `2·m^{n−1}` seeds.
//!
//! Seeds are numbered by a mixed-radix index over the bin tuple (first polar
//! angle most significant); code `0` is reserved for the origin and seed `i`
//! is sent as code `i + 1`.

use std::f64::consts::{PI, TAU};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dilation::Dilation;
use crate::error::{Error, Result};
use crate::linalg::spd_sqrt;
use crate::matrix_serde;

/// Tolerance on `|‖z‖ − 1|` accepted by [`to_spherical`].
pub const UNIT_TOL: f64 = 1e-9;

/// Cartesian point on the Euclidean unit sphere from spherical angles
/// `[φ1, …, φ_{n−1}]`, with `φ_i ∈ [0, π]` for `i ≤ n−2` and
/// `φ_{n−1} ∈ [0, 2π)`.
pub fn from_spherical(angles: &[f64]) -> Result<DVector<f64>> {
    let n = angles.len() + 1;
    for (i, &phi) in angles.iter().enumerate() {
        let azimuth = i + 1 == angles.len();
        let ok = if azimuth { (0.0..TAU).contains(&phi) } else { (0.0..=PI).contains(&phi) };
        if !ok {
            return Err(Error::InvalidAngle(format!(
                "angle {} = {phi} outside {}",
                i + 1,
                if azimuth { "[0, 2π)" } else { "[0, π]" }
            )));
        }
    }
    Ok(spherical_to_cartesian(angles, n))
}

fn spherical_to_cartesian(angles: &[f64], n: usize) -> DVector<f64> {
    let mut z = DVector::zeros(n);
    let mut sin_prod = 1.0;
    for (k, &phi) in angles.iter().enumerate() {
        let (s, c) = phi.sin_cos();
        z[k] = c * sin_prod;
        sin_prod *= s;
    }
    z[n - 1] = sin_prod;
    z
}

fn atan2_or_zero(y: f64, x: f64) -> f64 {
    if y == 0.0 && x == 0.0 {
        0.0
    } else {
        y.atan2(x)
    }
}

/// Spherical angles of a Euclidean unit vector. Degenerate tails use
/// `atan2(0, 0) = 0`.
pub fn to_spherical(z: &DVector<f64>) -> Result<Vec<f64>> {
    let norm = z.norm();
    if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOL {
        return Err(Error::InvalidInput(format!("expected a unit vector, |z| = {norm}")));
    }
    Ok(cartesian_to_spherical(z))
}

fn cartesian_to_spherical(z: &DVector<f64>) -> Vec<f64> {
    let n = z.len();
    if n < 2 {
        return Vec::new();
    }
    // tail[i] = Σ_{j ≥ i} z_j².
    let mut tail = vec![0.0; n + 1];
    for i in (0..n).rev() {
        tail[i] = tail[i + 1] + z[i] * z[i];
    }
    let mut angles = Vec::with_capacity(n - 1);
    for i in 0..n - 2 {
        angles.push(atan2_or_zero(tail[i + 1].sqrt(), z[i]));
    }
    let mut azimuth = atan2_or_zero(z[n - 1], z[n - 2]);
    if azimuth < 0.0 {
        azimuth += TAU;
    }
    angles.push(azimuth);
    angles
}

/// Snaps `phi` to the center of its bin of width `step`; the last bin is
/// closed on the right so `phi = bins·step` stays in range.
pub fn quantize_angle(phi: f64, step: f64, bins: u64) -> (f64, u64) {
    let raw = (phi / step).floor();
    let bin = if raw <= 0.0 { 0 } else { (raw as u64).min(bins - 1) };
    ((bin as f64 + 0.5) * step, bin)
}

/// Worst-case Euclidean distance between unit vectors whose spherical angles
/// differ by at most the per-angle tolerance associated with step `Δ`:
/// `sqrt(2 − 2(2cos^{2(n−1)}(Δ/2) − 1))`.
pub fn prop4_bound(step: f64, n: usize) -> Result<f64> {
    if !(step > 0.0 && step < PI / 2.0) {
        return Err(Error::InvalidInput(format!("angle step {step} outside (0, π/2)")));
    }
    let c = (step / 2.0).cos().powi(2 * (n as i32 - 1));
    Ok((2.0 - 2.0 * (2.0 * c - 1.0)).max(0.0).sqrt())
}

fn delta_n_formula(step: f64, n: usize) -> f64 {
    2.0 * (1.0 - (step / 2.0).cos().powi(2 * (n as i32 - 1))).max(0.0).sqrt()
}

/// Quantizer sizing derived from a seed budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    /// Integer number of bins per polar angle.
    pub bins: u64,
    /// Value of `m` fed to the error bound: `bins` in floored mode, the real
    /// `(N/2)^{1/(n−1)}` otherwise.
    pub m_effective: f64,
    /// Bin width `π / bins`.
    pub delta_step: f64,
    pub seed_count: u64,
    pub delta_n: f64,
}

/// Sizing for dimension `n ≥ 2` and budget `N`: `m = ⌊(N/2)^{1/(n−1)}⌋`.
pub fn budget_to_resolution(n: usize, budget: u64, floor_mode: bool) -> Result<Resolution> {
    if n < 2 {
        return Err(Error::InvalidInput("spherical angles need n ≥ 2".into()));
    }
    let real_m = (budget as f64 / 2.0).powf(1.0 / (n as f64 - 1.0));
    let mut bins = real_m.floor() as u64;
    // Guard against powf landing just below an exact integer root.
    while bins.checked_add(1).is_some_and(|b| seeds_for(n, b).is_some_and(|s| s <= budget)) {
        bins += 1;
    }
    while bins > 0 && seeds_for(n, bins).is_none_or(|s| s > budget) {
        bins -= 1;
    }
    if bins <= 2 {
        return Err(Error::BudgetTooSmall { n, budget, bins });
    }
    let m_effective = if floor_mode { bins as f64 } else { real_m };
    Ok(Resolution {
        bins,
        m_effective,
        delta_step: PI / bins as f64,
        seed_count: seeds_for(n, bins).expect("checked above"),
        delta_n: delta_n_formula(PI / m_effective, n),
    })
}

fn seeds_for(n: usize, bins: u64) -> Option<u64> {
    let mut s: u64 = 2;
    for _ in 0..n - 1 {
        s = s.checked_mul(bins)?;
    }
    Some(s)
}

/// Output of the quantizer for one state.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedSample {
    /// Seed on the weighted unit sphere, or zero for the origin.
    pub seed: DVector<f64>,
    /// Seed index in `[0, seed_count)`, `None` at the origin.
    pub index: Option<u64>,
    /// Smallest distance of any angle to a bin edge; infinite at the origin.
    pub boundary_gap: f64,
}

impl QuantizedSample {
    /// Transmitted code: `0` for the origin, `index + 1` otherwise.
    pub fn code(&self) -> u64 {
        self.index.map_or(0, |i| i + 1)
    }
}

/// Fixed-width big-endian bit string carrying one code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EncodedSample {
    pub code: u64,
    pub width: u32,
}

impl EncodedSample {
    pub fn to_bits(&self) -> Vec<bool> {
        (0..self.width).rev().map(|k| (self.code >> k) & 1 == 1).collect()
    }

    pub fn from_bits(bits: &[bool]) -> Result<Self> {
        if bits.len() > 64 {
            return Err(Error::Decode(format!("{} bits exceed 64", bits.len())));
        }
        let code = bits.iter().fold(0u64, |acc, &b| (acc << 1) | b as u64);
        Ok(EncodedSample { code, width: bits.len() as u32 })
    }

    /// Lower-case hex, zero-padded to whole nibbles.
    pub fn to_hex(&self) -> String {
        let digits = (self.width as usize).div_ceil(4).max(1);
        format!("{:0digits$x}", self.code)
    }
}

/// Serializable quantizer description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantizerConfig {
    pub n: usize,
    #[serde(rename = "N")]
    pub budget: u64,
    pub m: u64,
    pub delta_step: f64,
    #[serde(rename = "delta_N")]
    pub delta_n: f64,
    #[serde(rename = "P", with = "matrix_serde")]
    pub weight: DMatrix<f64>,
    pub floor_mode: bool,
}

#[derive(Debug, Clone)]
pub struct SphericalQuantizer {
    dim: usize,
    budget: u64,
    bins: u64,
    delta_step: f64,
    seed_count: u64,
    delta_n: f64,
    floor_mode: bool,
    weight: DMatrix<f64>,
    weight_sqrt: DMatrix<f64>,
    weight_inv_sqrt: DMatrix<f64>,
}

impl SphericalQuantizer {
    /// Quantizer with at most `budget` seeds on the sphere `xᵀPx = 1`.
    ///
    /// In unfloored mode the reported error bound uses the real-valued `m`;
    /// bins stay integer, so that bound is not guaranteed by the partition.
    pub fn new(dim: usize, budget: u64, weight: &DMatrix<f64>, floor_mode: bool) -> Result<Self> {
        Self::check_weight(dim, weight)?;
        if dim == 1 {
            if budget < 2 {
                return Err(Error::BudgetTooSmall { n: 1, budget, bins: budget });
            }
            return Self::build(dim, budget, 1, PI, 2, 0.0, floor_mode, weight);
        }
        let r = budget_to_resolution(dim, budget, floor_mode)?;
        Self::build(dim, budget, r.bins, r.delta_step, r.seed_count, r.delta_n, floor_mode, weight)
    }

    /// Quantizer with an explicit number of polar bins `m ≥ 3`.
    pub fn with_bins(dim: usize, bins: u64, weight: &DMatrix<f64>) -> Result<Self> {
        Self::check_weight(dim, weight)?;
        if dim < 2 {
            return Self::new(dim, 2, weight, true);
        }
        let seed_count = seeds_for(dim, bins).ok_or_else(|| Error::InvalidInput("seed count overflows u64".into()))?;
        if bins <= 2 {
            return Err(Error::BudgetTooSmall { n: dim, budget: seed_count, bins });
        }
        let step = PI / bins as f64;
        Self::build(dim, seed_count, bins, step, seed_count, delta_n_formula(step, dim), true, weight)
    }

    fn check_weight(dim: usize, weight: &DMatrix<f64>) -> Result<()> {
        if dim == 0 || weight.shape() != (dim, dim) {
            return Err(Error::InvalidInput(format!("weight must be {dim}x{dim}")));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        dim: usize,
        budget: u64,
        bins: u64,
        delta_step: f64,
        seed_count: u64,
        delta_n: f64,
        floor_mode: bool,
        weight: &DMatrix<f64>,
    ) -> Result<Self> {
        let (weight_sqrt, weight_inv_sqrt) = spd_sqrt(weight)?;
        if seed_count >= u64::MAX - 1 {
            return Err(Error::InvalidInput("seed count too large to encode".into()));
        }
        Ok(SphericalQuantizer {
            dim,
            budget,
            bins,
            delta_step,
            seed_count,
            delta_n,
            floor_mode,
            weight: weight.clone(),
            weight_sqrt,
            weight_inv_sqrt,
        })
    }

    pub fn from_config(cfg: &QuantizerConfig) -> Result<Self> {
        if cfg.n >= 2 && cfg.m > 0 && seeds_for(cfg.n, cfg.m) != Some(cfg.budget) {
            // A budget that is not exactly 2m^{n-1}: rebuild from the budget.
            let q = Self::new(cfg.n, cfg.budget, &cfg.weight, cfg.floor_mode)?;
            if q.bins != cfg.m {
                return Err(Error::Configuration(format!("m = {} inconsistent with N = {}", cfg.m, cfg.budget)));
            }
            return Ok(q);
        }
        Self::new(cfg.n, cfg.budget, &cfg.weight, cfg.floor_mode)
    }

    pub fn to_config(&self) -> QuantizerConfig {
        QuantizerConfig {
            n: self.dim,
            budget: self.budget,
            m: self.bins,
            delta_step: self.delta_step,
            delta_n: self.delta_n,
            weight: self.weight.clone(),
            floor_mode: self.floor_mode,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn budget(&self) -> u64 {
        self.budget
    }

    /// Bins per polar angle `m`.
    pub fn bins(&self) -> u64 {
        self.bins
    }

    pub fn delta_step(&self) -> f64 {
        self.delta_step
    }

    pub fn seed_count(&self) -> u64 {
        self.seed_count
    }

    /// Error bound `δ_N`.
    pub fn delta_n(&self) -> f64 {
        self.delta_n
    }

    pub fn floor_mode(&self) -> bool {
        self.floor_mode
    }

    pub fn weight(&self) -> &DMatrix<f64> {
        &self.weight
    }

    /// Width of transmitted codes, `⌈log2(seed_count + 1)⌉`.
    pub fn code_width(&self) -> u32 {
        let values = self.seed_count + 1;
        64 - (values - 1).leading_zeros()
    }

    /// Radix of each angle digit: `m` for polar angles, `2m` for the azimuth.
    fn radices(&self) -> Vec<u64> {
        if self.dim == 1 {
            return vec![2];
        }
        let mut r = vec![self.bins; self.dim - 1];
        r[self.dim - 2] = 2 * self.bins;
        r
    }

    pub fn same_weight(&self, weight: &DMatrix<f64>) -> bool {
        weight.shape() == self.weight.shape()
            && (weight - &self.weight).amax() <= 1e-12 * self.weight.amax().max(f64::MIN_POSITIVE)
    }

    /// Quantizes `x` through the homogeneous projector of `dilation`.
    pub fn quantize(&self, dilation: &Dilation, x: &DVector<f64>) -> Result<QuantizedSample> {
        if !self.same_weight(dilation.weight()) {
            return Err(Error::Configuration("quantizer and dilation use different weights".into()));
        }
        Ok(match dilation.norm_and_projection(x, None)? {
            None => self.origin_sample(),
            Some((_, z)) => self.quantize_on_sphere(&z),
        })
    }

    pub fn origin_sample(&self) -> QuantizedSample {
        QuantizedSample { seed: DVector::zeros(self.dim), index: None, boundary_gap: f64::INFINITY }
    }

    /// Quantizes a point already on the weighted unit sphere.
    pub fn quantize_on_sphere(&self, z: &DVector<f64>) -> QuantizedSample {
        if self.dim == 1 {
            let index = if z[0] >= 0.0 { 0 } else { 1 };
            return QuantizedSample { seed: self.seed_from_index(index), index: Some(index), boundary_gap: z[0].abs() };
        }
        let mut w = &self.weight_sqrt * z;
        let len = w.norm();
        if len > 0.0 {
            w /= len;
        }
        let angles = cartesian_to_spherical(&w);
        let radices = self.radices();
        let mut index = 0u64;
        let mut centers = Vec::with_capacity(angles.len());
        let mut gap = f64::INFINITY;
        for (phi, &radix) in angles.iter().zip(&radices) {
            let (center, bin) = quantize_angle(*phi, self.delta_step, radix);
            gap = gap.min(self.delta_step / 2.0 - (phi - center).abs());
            index = index * radix + bin;
            centers.push(center);
        }
        let seed = &self.weight_inv_sqrt * spherical_to_cartesian(&centers, self.dim);
        QuantizedSample { seed, index: Some(index), boundary_gap: gap }
    }

    /// Seed vector of a given index in `[0, seed_count)`.
    pub fn seed_from_index(&self, index: u64) -> DVector<f64> {
        if self.dim == 1 {
            let s = 1.0 / self.weight[(0, 0)].sqrt();
            return DVector::from_element(1, if index == 0 { s } else { -s });
        }
        let radices = self.radices();
        let mut rest = index;
        let mut centers = vec![0.0; radices.len()];
        for (k, &radix) in radices.iter().enumerate().rev() {
            centers[k] = ((rest % radix) as f64 + 0.5) * self.delta_step;
            rest /= radix;
        }
        &self.weight_inv_sqrt * spherical_to_cartesian(&centers, self.dim)
    }

    pub fn encode(&self, sample: &QuantizedSample) -> EncodedSample {
        EncodedSample { code: sample.code(), width: self.code_width() }
    }

    pub fn decode_code(&self, code: u64) -> Result<QuantizedSample> {
        if code == 0 {
            return Ok(self.origin_sample());
        }
        if code > self.seed_count {
            return Err(Error::Decode(format!("code {code} exceeds seed count {}", self.seed_count)));
        }
        let index = code - 1;
        Ok(QuantizedSample { seed: self.seed_from_index(index), index: Some(index), boundary_gap: f64::NAN })
    }

    /// Reconstructs the seed carried by a bit string.
    pub fn decode(&self, bits: &[bool]) -> Result<DVector<f64>> {
        if bits.len() != self.code_width() as usize {
            return Err(Error::Decode(format!("expected {} bits, got {}", self.code_width(), bits.len())));
        }
        Ok(self.decode_code(EncodedSample::from_bits(bits)?.code)?.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn close(a: &DVector<f64>, b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn spherical_examples() {
        assert!(close(&from_spherical(&[0.0, 0.0]).unwrap(), &[1.0, 0.0, 0.0], 1e-15));
        assert!(close(&from_spherical(&[FRAC_PI_2, FRAC_PI_2]).unwrap(), &[0.0, 0.0, 1.0], 1e-15));
        assert!(close(&from_spherical(&[3.0 * FRAC_PI_2]).unwrap(), &[0.0, -1.0], 1e-15));
        assert!(matches!(from_spherical(&[4.0, 0.0]), Err(Error::InvalidAngle(_))));
        assert!(matches!(from_spherical(&[0.0, TAU]), Err(Error::InvalidAngle(_))));
    }

    #[test]
    fn inverse_map_examples() {
        assert_eq!(to_spherical(&DVector::from_vec(vec![1.0, 0.0, 0.0])).unwrap(), vec![0.0, 0.0]);
        let a = to_spherical(&DVector::from_vec(vec![0.0, 0.0, 1.0])).unwrap();
        assert!((a[0] - FRAC_PI_2).abs() < 1e-15 && (a[1] - FRAC_PI_2).abs() < 1e-15);
        assert!(to_spherical(&DVector::from_vec(vec![1.0, 1.0])).is_err());
    }

    #[test]
    fn angle_binning() {
        let step = PI / 4.0;
        assert_eq!(quantize_angle(0.1, step, 4), (PI / 8.0, 0));
        let (c, b) = quantize_angle(PI, step, 4);
        assert_eq!(b, 3);
        assert!((c - 7.0 * PI / 8.0).abs() < 1e-15);
        let (c, _) = quantize_angle(step / 2.0, step, 4);
        assert!((c - step / 2.0).abs() < 1e-15);
    }

    #[test]
    fn sizing_examples() {
        let r = budget_to_resolution(3, 512, true).unwrap();
        assert_eq!((r.bins, r.seed_count), (16, 512));
        let expected = 2.0 * (1.0 - (PI / 32.0).cos().powi(4)).sqrt();
        assert!((r.delta_n - expected).abs() < 1e-15);
        assert!((r.delta_n - 0.276568).abs() < 1e-6);

        let r = budget_to_resolution(3, 256, true).unwrap();
        assert_eq!((r.bins, r.seed_count), (11, 242));
        assert!((r.delta_n - 0.400484).abs() < 1e-6);
        let r = budget_to_resolution(3, 256, false).unwrap();
        assert_eq!(r.bins, 11);
        assert!((r.delta_n - 0.38955).abs() < 1e-5);

        let r = budget_to_resolution(2, 8, true).unwrap();
        assert_eq!((r.bins, r.seed_count), (4, 8));
        assert!((r.delta_n - 2.0 * (PI / 8.0).sin()).abs() < 1e-15);

        assert!(matches!(budget_to_resolution(3, 16, true), Err(Error::BudgetTooSmall { bins: 2, .. })));
    }

    #[test]
    fn prop4_examples() {
        assert!((prop4_bound(PI / 3.0, 2).unwrap() - 1.0).abs() < 1e-15);
        assert!(prop4_bound(1e-9, 3).unwrap() < 1e-8);
        assert!(prop4_bound(PI / 2.0, 3).is_err());
    }

    #[test]
    fn planar_pipeline() {
        let d = Dilation::new(DMatrix::identity(2, 2), DMatrix::identity(2, 2)).unwrap();
        let q = SphericalQuantizer::new(2, 8, &DMatrix::identity(2, 2), true).unwrap();
        let s = q.quantize(&d, &DVector::from_vec(vec![1.0, 1.0])).unwrap();
        // π/4 sits exactly on the edge between bins 0 and 1; floor puts it in bin 1.
        assert_eq!(s.index, Some(1));
        assert!(close(&s.seed, &[(3.0 * PI / 8.0).cos(), (3.0 * PI / 8.0).sin()], 1e-15));
        let origin = q.quantize(&d, &DVector::zeros(2)).unwrap();
        assert_eq!(origin.index, None);
        assert_eq!(q.encode(&origin).code, 0);
    }

    #[test]
    fn planar_codes_and_width() {
        let q = SphericalQuantizer::new(2, 8, &DMatrix::identity(2, 2), true).unwrap();
        assert_eq!(q.code_width(), 4);
        for bin in 0..8u64 {
            let sample = q.decode_code(bin + 1).unwrap();
            assert_eq!(sample.index, Some(bin));
            let enc = q.encode(&sample);
            assert_eq!(enc.code, bin + 1);
            assert_eq!(q.decode(&enc.to_bits()).unwrap(), sample.seed);
        }
        assert!(matches!(q.decode_code(9), Err(Error::Decode(_))));
        assert!(matches!(q.decode(&[true; 3]), Err(Error::Decode(_))));
    }

    #[test]
    fn scalar_quantizer_is_sign() {
        let p = DMatrix::from_element(1, 1, 4.0);
        let d = Dilation::new(DMatrix::identity(1, 1), p.clone()).unwrap();
        let q = SphericalQuantizer::new(1, 2, &p, true).unwrap();
        assert_eq!(q.delta_n(), 0.0);
        assert_eq!(q.code_width(), 2);
        let pos = q.quantize(&d, &DVector::from_element(1, 3.0)).unwrap();
        let neg = q.quantize(&d, &DVector::from_element(1, -0.1)).unwrap();
        assert_eq!(pos.seed[0], 0.5);
        assert_eq!(neg.seed[0], -0.5);
        assert_eq!((pos.code(), neg.code()), (1, 2));
    }

    #[test]
    fn weight_mismatch_is_a_configuration_error() {
        let d = Dilation::new(DMatrix::identity(2, 2), DMatrix::identity(2, 2) * 2.0).unwrap();
        let q = SphericalQuantizer::new(2, 8, &DMatrix::identity(2, 2), true).unwrap();
        assert!(matches!(q.quantize(&d, &DVector::from_vec(vec![1.0, 0.0])), Err(Error::Configuration(_))));
    }

    #[test]
    fn hex_is_nibble_padded() {
        assert_eq!(EncodedSample { code: 5, width: 10 }.to_hex(), "005");
        assert_eq!(EncodedSample { code: 0, width: 2 }.to_hex(), "0");
    }
}
