//! Pilot design, linear channel estimators and error metrics.

use nalgebra::Cholesky;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::covariance::CovMatrix;
use crate::geometry::Channel;
use crate::linalg::{CMatrix, CVector};
use crate::{Error, Result};

/// Pilot block `P` (N_B × M_p): column `m` is transmitted in pilot slot `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotMatrix {
    pub entries: CMatrix,
    pub energy: f64,
    pub noise_std: f64,
}

impl PilotMatrix {
    pub fn n_antennas(&self) -> usize {
        self.entries.nrows()
    }

    pub fn len(&self) -> usize {
        self.entries.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.ncols() == 0
    }

    pub fn total_energy(&self) -> f64 {
        self.entries.norm_squared()
    }
}

/// Received pilot samples `y = Pᴴ h + n`.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotObservation {
    pub values: CVector,
    pub noise_var: f64,
}

fn check_design_inputs(m_p: usize, energy: f64, noise_std: f64) -> Result<()> {
    if m_p == 0 {
        return Err(Error::domain("at least one pilot slot is required"));
    }
    if !(energy > 0.0 && energy.is_finite()) {
        return Err(Error::domain(format!("pilot energy {energy} must be positive")));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::domain(format!("noise level {noise_std} must be nonnegative")));
    }
    Ok(())
}

/// Water-filling powers `max(ν − σ²/λ_i, 0)` summing to `energy`, for
/// eigenvalues sorted in decreasing order and all positive.
pub fn water_fill(eigenvalues: &[f64], noise_var: f64, energy: f64) -> Vec<f64> {
    let floors: Vec<f64> = eigenvalues.iter().map(|l| noise_var / l).collect();
    let total = |nu: f64| floors.iter().map(|f| (nu - f).max(0.0)).sum::<f64>();
    let (mut lo, mut hi) = (0.0, energy + floors.iter().copied().fold(0.0, f64::max));
    while hi - lo > 1e-12 * hi {
        let mid = 0.5 * (lo + hi);
        if total(mid) < energy {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // exact level for the active set found by the search
    let mut nu = 0.5 * (lo + hi);
    for _ in 0..floors.len() + 1 {
        let active: Vec<f64> = floors.iter().copied().filter(|f| *f < nu).collect();
        let next = (energy + active.iter().sum::<f64>()) / active.len() as f64;
        if next == nu {
            break;
        }
        nu = next;
    }
    floors.iter().map(|f| (nu - f).max(0.0)).collect()
}

/// Water-filling pilot block along the eigenvectors of `r`, zero-padded to
/// `m_p` columns.
pub fn design_pilots(r: &CovMatrix, m_p: usize, energy: f64, noise_std: f64) -> Result<PilotMatrix> {
    check_design_inputs(m_p, energy, noise_std)?;
    let n = r.dim();
    let tol = 1e-12 * r.trace().abs() / n as f64;
    let eig = r.eigen();
    let usable: Vec<f64> = eig.values.iter().copied().take(m_p.min(n)).take_while(|&l| l > tol).collect();
    if usable.is_empty() {
        return Err(Error::domain("covariance has no eigenvalue above tolerance"));
    }
    let powers = water_fill(&usable, noise_std * noise_std, energy);
    let mut entries = CMatrix::zeros(n, m_p);
    for (k, p) in powers.iter().enumerate() {
        if *p > 0.0 {
            entries.set_column(k, &(eig.vectors.column(k) * Complex64::new(p.sqrt(), 0.0)));
        }
    }
    Ok(PilotMatrix { entries, energy, noise_std })
}

/// Scaled identity pilots `sqrt(P/N_B)·[I, 0]` for the least-squares baseline.
pub fn ls_pilots(n_antennas: usize, m_p: usize, energy: f64, noise_std: f64) -> Result<PilotMatrix> {
    check_design_inputs(m_p, energy, noise_std)?;
    if m_p < n_antennas {
        return Err(Error::domain(format!("{m_p} pilot slots cannot sound {n_antennas} antennas")));
    }
    let a = Complex64::new((energy / n_antennas as f64).sqrt(), 0.0);
    let mut entries = CMatrix::zeros(n_antennas, m_p);
    for i in 0..n_antennas {
        entries[(i, i)] = a;
    }
    Ok(PilotMatrix { entries, energy, noise_std })
}

/// Unit-variance circularly symmetric complex Gaussian vector.
pub fn unit_noise<R: Rng + ?Sized>(len: usize, rng: &mut R) -> CVector {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    CVector::from_fn(len, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        Complex64::new(re * s, im * s)
    })
}

/// `Pᴴ h + σ·w` for a given unit-variance noise draw `w`.
pub fn receive(h: &Channel, pilots: &PilotMatrix, unit_noise: &CVector) -> Result<PilotObservation> {
    if h.len() != pilots.n_antennas() {
        return Err(Error::Dimension { expected: pilots.n_antennas(), got: h.len() });
    }
    if unit_noise.len() != pilots.len() {
        return Err(Error::Dimension { expected: pilots.len(), got: unit_noise.len() });
    }
    let values = pilots.entries.ad_mul(h.as_vector()) + unit_noise * Complex64::new(pilots.noise_std, 0.0);
    Ok(PilotObservation { values, noise_var: pilots.noise_std * pilots.noise_std })
}

pub fn simulate_pilot_rx<R: Rng + ?Sized>(h: &Channel, pilots: &PilotMatrix, rng: &mut R) -> Result<PilotObservation> {
    receive(h, pilots, &unit_noise(pilots.len(), rng))
}

/// LMMSE estimator `ĥ = R P (Pᴴ R P + σ² I)⁻¹ y` with the gain matrix
/// precomputed. With `R = Γ Λ Γᴴ` and `B = Λ^{1/2} Γᴴ P` the gain equals
/// `Γ Λ^{1/2} (B Bᴴ + σ² I)⁻¹ B`, an N_B × N_B solve that stays accurate when
/// `R` is rank deficient.
#[derive(Debug, Clone)]
pub struct LmmseEstimator {
    gain: CMatrix,
}

impl LmmseEstimator {
    pub fn new(pilots: &PilotMatrix, r: &CovMatrix) -> Result<Self> {
        let n = pilots.n_antennas();
        if r.dim() != n {
            return Err(Error::Dimension { expected: n, got: r.dim() });
        }
        let eig = r.eigen();
        let tol = 1e-12 * r.trace().abs() / n as f64;
        let sqrt_l: Vec<f64> = eig.values.iter().map(|&l| if l > tol { l.sqrt() } else { 0.0 }).collect();
        let mut b = eig.vectors.ad_mul(&pilots.entries);
        for (i, s) in sqrt_l.iter().enumerate() {
            b.row_mut(i).scale_mut(*s);
        }
        let mut k = &b * b.adjoint();
        let var = pilots.noise_std * pilots.noise_std;
        for i in 0..n {
            k[(i, i)] += var;
        }
        let chol = Cholesky::new(k).ok_or_else(|| Error::Singular("LMMSE system is not positive definite".into()))?;
        let mut gain = chol.solve(&b);
        for (i, s) in sqrt_l.iter().enumerate() {
            gain.row_mut(i).scale_mut(*s);
        }
        let gain = &eig.vectors * gain;
        if gain.iter().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
            return Err(Error::Singular("LMMSE gain is not finite".into()));
        }
        Ok(LmmseEstimator { gain })
    }

    pub fn estimate(&self, y: &PilotObservation) -> Result<Channel> {
        if y.values.len() != self.gain.ncols() {
            return Err(Error::Dimension { expected: self.gain.ncols(), got: y.values.len() });
        }
        Channel::new(&self.gain * &y.values)
    }
}

pub fn lmmse_estimate(y: &PilotObservation, pilots: &PilotMatrix, r: &CovMatrix) -> Result<Channel> {
    LmmseEstimator::new(pilots, r)?.estimate(y)
}

/// Least-squares estimator `ĥ = (P Pᴴ)⁻¹ P y`.
#[derive(Debug, Clone)]
pub struct LsEstimator {
    gain: CMatrix,
}

impl LsEstimator {
    pub fn new(pilots: &PilotMatrix) -> Result<Self> {
        let gram = &pilots.entries * pilots.entries.adjoint();
        let chol = Cholesky::new(gram).ok_or_else(|| Error::Singular("pilots do not span the array".into()))?;
        Ok(LsEstimator { gain: chol.solve(&pilots.entries) })
    }

    pub fn estimate(&self, y: &PilotObservation) -> Result<Channel> {
        if y.values.len() != self.gain.ncols() {
            return Err(Error::Dimension { expected: self.gain.ncols(), got: y.values.len() });
        }
        Channel::new(&self.gain * &y.values)
    }
}

pub fn ls_estimate(y: &PilotObservation, pilots: &PilotMatrix) -> Result<Channel> {
    LsEstimator::new(pilots)?.estimate(y)
}

fn ratio(num: f64, den: f64) -> Result<f64> {
    if !(den > 0.0) {
        return Err(Error::domain("reference set has zero energy"));
    }
    Ok(num / den)
}

fn check_pairs(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Dimension { expected: a, got: b });
    }
    if a == 0 {
        return Err(Error::Empty("metric inputs"));
    }
    Ok(())
}

/// `Σ‖R − R̂‖_F² / Σ‖R‖_F²`.
pub fn nmse_r(truth: &[CovMatrix], est: &[CovMatrix]) -> Result<f64> {
    check_pairs(truth.len(), est.len())?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, e) in truth.iter().zip(est) {
        if t.dim() != e.dim() {
            return Err(Error::Dimension { expected: t.dim(), got: e.dim() });
        }
        num += (t.matrix() - e.matrix()).norm_squared();
        den += t.matrix().norm_squared();
    }
    ratio(num, den)
}

/// `Σ‖h − ĥ‖² / Σ‖h‖²`.
pub fn nmse_h(truth: &[Channel], est: &[Channel]) -> Result<f64> {
    check_pairs(truth.len(), est.len())?;
    let (num, den) = error_energy(truth, est)?;
    ratio(num, den)
}

/// Squared error and reference energy, for pooled NMSE accumulation.
pub fn error_energy(truth: &[Channel], est: &[Channel]) -> Result<(f64, f64)> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, e) in truth.iter().zip(est) {
        if t.len() != e.len() {
            return Err(Error::Dimension { expected: t.len(), got: e.len() });
        }
        num += (t.as_vector() - e.as_vector()).norm_squared();
        den += t.norm_sqr();
    }
    Ok((num, den))
}

/// Per-coordinate root mean-square location error `sqrt(Σ‖n‖² / (2·count))`.
pub fn rmse_l(errors: &[[f64; 2]]) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::Empty("location errors"));
    }
    let sum: f64 = errors.iter().map(|e| e[0] * e[0] + e[1] * e[1]).sum();
    Ok((sum / (2.0 * errors.len() as f64)).sqrt())
}

/// `P / (M_p σ² · count) · Σ‖h‖²`.
pub fn snr(energy: f64, m_p: usize, noise_var: f64, channels: &[Channel]) -> Result<f64> {
    if channels.is_empty() {
        return Err(Error::Empty("channels"));
    }
    if !(noise_var > 0.0) || m_p == 0 {
        return Err(Error::domain("SNR needs positive noise variance and pilot count"));
    }
    let mean = channels.iter().map(Channel::norm_sqr).sum::<f64>() / channels.len() as f64;
    Ok(energy * mean / (m_p as f64 * noise_var))
}

/// Pilot energy giving linear SNR `target` for channels of mean energy `mean_gain`.
pub fn energy_for_snr(target: f64, m_p: usize, noise_var: f64, mean_gain: f64) -> Result<f64> {
    if !(target > 0.0 && noise_var > 0.0 && mean_gain > 0.0) {
        return Err(Error::domain("SNR inversion needs positive inputs"));
    }
    Ok(target * m_p as f64 * noise_var / mean_gain)
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}
