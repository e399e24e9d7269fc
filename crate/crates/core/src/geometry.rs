//! Uniform planar array steering vectors and geometric channel synthesis.
//!
//! Antenna `(p, q)` with azimuth index `p` and elevation index `q` sits at
//! entry `p * n_ele + q` of every channel vector (elevation index fastest),
//! which is the layout of `a_az ⊗ a_ele`.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::linalg::CVector;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayConfig {
    pub n_ele: usize,
    pub n_az: usize,
    /// Antenna spacing over carrier wavelength.
    pub spacing_ratio: f64,
}

impl Default for ArrayConfig {
    fn default() -> Self {
        ArrayConfig { n_ele: 3, n_az: 4, spacing_ratio: 0.5 }
    }
}

impl ArrayConfig {
    pub fn new(n_ele: usize, n_az: usize, spacing_ratio: f64) -> Result<Self> {
        let cfg = ArrayConfig { n_ele, n_az, spacing_ratio };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_ele == 0 || self.n_az == 0 {
            return Err(Error::domain("array needs at least one antenna per axis"));
        }
        if !(self.spacing_ratio.is_finite() && self.spacing_ratio > 0.0) {
            return Err(Error::domain(format!("spacing ratio {} must be positive", self.spacing_ratio)));
        }
        Ok(())
    }

    /// Total antenna count `N_B`.
    pub fn n_antennas(&self) -> usize {
        self.n_ele * self.n_az
    }
}

/// One propagation path leaving the array.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathComponent {
    pub gain: Complex64,
    /// Polar angle from the array's +z axis, in `[0, π]`.
    pub elevation: f64,
    /// In `[-π, π]`.
    pub azimuth: f64,
}

/// Per-antenna complex channel gains.
#[derive(Debug, Clone, PartialEq)]
pub struct Channel(CVector);

impl Channel {
    pub fn new(coeffs: CVector) -> Result<Self> {
        if coeffs.iter().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
            return Err(Error::NonFinite("channel coefficient".into()));
        }
        Ok(Channel(coeffs))
    }

    pub fn from_vec(coeffs: Vec<Complex64>) -> Result<Self> {
        Self::new(CVector::from_vec(coeffs))
    }

    pub fn zeros(n: usize) -> Self {
        Channel(CVector::zeros(n))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_vector(&self) -> &CVector {
        &self.0
    }

    pub fn into_vector(self) -> CVector {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.0.norm_squared()
    }

    pub fn scaled(&self, s: f64) -> Channel {
        Channel(&self.0 * Complex64::new(s, 0.0))
    }
}

fn check_angles(elevation: f64, azimuth: f64) -> Result<()> {
    if !(0.0..=PI).contains(&elevation) {
        return Err(Error::domain(format!("elevation {elevation} outside [0, π]")));
    }
    if !(-PI..=PI).contains(&azimuth) {
        return Err(Error::domain(format!("azimuth {azimuth} outside [-π, π]")));
    }
    Ok(())
}

/// Unit-norm transmit steering vector `a_az(θ, φ) ⊗ a_ele(θ) / √N_B`.
pub fn steering_vector(cfg: &ArrayConfig, elevation: f64, azimuth: f64) -> Result<Channel> {
    cfg.validate()?;
    check_angles(elevation, azimuth)?;
    Ok(Channel(steering_unchecked(cfg, elevation, azimuth)))
}

pub(crate) fn steering_unchecked(cfg: &ArrayConfig, elevation: f64, azimuth: f64) -> CVector {
    let k = 2.0 * PI * cfg.spacing_ratio;
    let ele_step = k * elevation.cos();
    let az_step = k * elevation.sin() * azimuth.sin();
    let norm = 1.0 / (cfg.n_antennas() as f64).sqrt();
    CVector::from_fn(cfg.n_antennas(), |idx, _| {
        let p = (idx / cfg.n_ele) as f64;
        let q = (idx % cfg.n_ele) as f64;
        Complex64::from_polar(norm, p * az_step + q * ele_step)
    })
}

/// `h = Σ_l α_l a(θ_l, φ_l)`.
pub fn synthesize_channel(cfg: &ArrayConfig, paths: &[PathComponent]) -> Result<Channel> {
    cfg.validate()?;
    if paths.is_empty() {
        return Err(Error::Empty("path list (position has no propagation path)"));
    }
    let mut h = CVector::zeros(cfg.n_antennas());
    for path in paths {
        check_angles(path.elevation, path.azimuth)?;
        if !(path.gain.re.is_finite() && path.gain.im.is_finite()) {
            return Err(Error::NonFinite("path gain".into()));
        }
        h.axpy(path.gain, &steering_unchecked(cfg, path.elevation, path.azimuth), Complex64::new(1.0, 0.0));
    }
    Channel::new(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg34() -> ArrayConfig {
        ArrayConfig::new(3, 4, 0.5).unwrap()
    }

    #[test]
    fn broadside_is_all_equal() {
        let a = steering_vector(&cfg34(), PI / 2.0, 0.0).unwrap();
        assert_eq!(a.len(), 12);
        let want = 1.0 / 12f64.sqrt();
        for z in a.as_vector().iter() {
            assert!((z.re - want).abs() < 1e-15 && z.im.abs() < 1e-15);
        }
    }

    #[test]
    fn two_element_elevation_phase() {
        let cfg = ArrayConfig::new(2, 1, 0.5).unwrap();
        let a = steering_vector(&cfg, PI / 3.0, 0.0).unwrap();
        let s = 1.0 / 2f64.sqrt();
        assert!((a.as_vector()[0] - Complex64::new(s, 0.0)).norm() < 1e-15);
        assert!((a.as_vector()[1] - Complex64::new(0.0, s)).norm() < 1e-12);
    }

    #[test]
    fn rejects_bad_angles() {
        assert!(matches!(steering_vector(&cfg34(), -0.1, 0.0), Err(Error::Domain(_))));
        assert!(matches!(steering_vector(&cfg34(), 0.3, 3.5), Err(Error::Domain(_))));
        assert!(ArrayConfig::new(0, 4, 0.5).is_err());
        assert!(ArrayConfig::new(3, 4, 0.0).is_err());
    }

    #[test]
    fn single_path_is_steering_vector() {
        let cfg = cfg34();
        let p = PathComponent { gain: Complex64::new(1.0, 0.0), elevation: 1.1, azimuth: -0.4 };
        let h = synthesize_channel(&cfg, &[p]).unwrap();
        assert_eq!(h, steering_vector(&cfg, 1.1, -0.4).unwrap());
    }

    #[test]
    fn opposite_gains_cancel() {
        let cfg = cfg34();
        let p1 = PathComponent { gain: Complex64::new(2.0, 0.0), elevation: 0.7, azimuth: 0.2 };
        let p2 = PathComponent { gain: Complex64::new(-2.0, 0.0), ..p1 };
        let h = synthesize_channel(&cfg, &[p1, p2]).unwrap();
        assert!(h.norm() < 1e-15);
    }

    #[test]
    fn empty_paths_rejected() {
        assert!(matches!(synthesize_channel(&cfg34(), &[]), Err(Error::Empty(_))));
    }

    fn path_strategy() -> impl Strategy<Value = PathComponent> {
        (-2.0..2.0f64, -2.0..2.0f64, 0.0..PI, -PI..PI)
            .prop_map(|(re, im, e, a)| PathComponent { gain: Complex64::new(re, im), elevation: e, azimuth: a })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn steering_has_unit_norm(e in 0.0..=PI, a in -PI..=PI) {
            let v = steering_vector(&cfg34(), e, a).unwrap();
            prop_assert!((v.norm() - 1.0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn kronecker_layout(e in 0.0..=PI, a in -PI..=PI) {
            let cfg = cfg34();
            let v = steering_vector(&cfg, e, a).unwrap();
            let k = PI; // 2π d/λ with d/λ = 1/2
            for p in 0..cfg.n_az {
                for q in 0..cfg.n_ele {
                    let az = Complex64::from_polar(1.0, p as f64 * k * e.sin() * a.sin());
                    let el = Complex64::from_polar(1.0, q as f64 * k * e.cos());
                    let want = az * el / 12f64.sqrt();
                    prop_assert!((v.as_vector()[p * cfg.n_ele + q] - want).norm() < 1e-12);
                }
            }
        }

        #[test]
        fn synthesis_is_additive_and_homogeneous(
            p1 in prop::collection::vec(path_strategy(), 1..5),
            p2 in prop::collection::vec(path_strategy(), 1..5),
            s in -3.0..3.0f64,
        ) {
            let cfg = cfg34();
            let h1 = synthesize_channel(&cfg, &p1).unwrap();
            let h2 = synthesize_channel(&cfg, &p2).unwrap();
            let all: Vec<_> = p1.iter().chain(p2.iter()).copied().collect();
            let h12 = synthesize_channel(&cfg, &all).unwrap();
            let sum = h1.as_vector() + h2.as_vector();
            prop_assert!((h12.as_vector() - sum).norm() < 1e-12);

            let scaled: Vec<_> = p1.iter().map(|p| PathComponent { gain: p.gain * s, ..*p }).collect();
            let hs = synthesize_channel(&cfg, &scaled).unwrap();
            prop_assert!((hs.as_vector() - h1.scaled(s).as_vector()).norm() < 1e-12);
        }
    }
}
