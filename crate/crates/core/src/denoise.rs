//! Location denoising by Gaussian fusion.
//!
//! Each covariance-coherence frame the base station holds three estimates of
//! the user's location at the start of the next frame: the noisy uploaded
//! location, the bias-corrected location predicted from the fed-back channel,
//! and the previous corrected location propagated through a random-motion
//! prior. Treating all three as independent Gaussians, the fused estimate is
//! their precision-weighted mean.

use std::path::Path;

use nalgebra::{Matrix2, Vector2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::covariance::CovMatrix;
use crate::estimator::unit_noise;
use crate::geometry::Channel;
use crate::par::Exec;
use crate::scene::{Bounds, UserPosition};
use crate::{rng, Complex64, Error, Result};

/// Added to every covariance before it is inverted.
pub const REGULARIZATION: f64 = 1e-9;

fn to_vec(p: UserPosition) -> Vector2<f64> {
    Vector2::new(p.x, p.y)
}

fn to_pos(v: Vector2<f64>) -> UserPosition {
    UserPosition::new(v.x, v.y)
}

fn symmetrize(m: Matrix2<f64>) -> Matrix2<f64> {
    (m + m.transpose()) * 0.5
}

/// Bias and covariance of the channel-to-location estimator's error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
}

/// [`ErrorStats`] with the settings that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorStatsFile {
    #[serde(flatten)]
    pub stats: ErrorStats,
    pub samples: usize,
    pub draws: usize,
    pub noise_var: f64,
    pub seed: u64,
}

impl ErrorStatsFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianBelief {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
}

impl GaussianBelief {
    pub fn new(mean: UserPosition, cov: Matrix2<f64>) -> Self {
        GaussianBelief { mean: to_vec(mean), cov }
    }

    pub fn position(&self) -> UserPosition {
        to_pos(self.mean)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiseInputs {
    pub uploaded_location: UserPosition,
    /// σ_c² in m².
    pub uploaded_noise_var: f64,
    pub lenet_estimate: UserPosition,
    /// Speed reported at the start of the previous frame.
    pub speed: f64,
    pub coct_duration: f64,
}

/// Anything that maps a channel to a plane location.
pub trait LocationEstimator: Sync {
    fn locate(&self, h: &Channel) -> Result<UserPosition>;

    fn locate_batch(&self, hs: &[Channel]) -> Result<Vec<UserPosition>> {
        hs.iter().map(|h| self.locate(h)).collect()
    }
}

impl<F> LocationEstimator for F
where
    F: Fn(&Channel) -> Result<UserPosition> + Sync,
{
    fn locate(&self, h: &Channel) -> Result<UserPosition> {
        self(h)
    }
}

/// Estimates estimator bias and unbiased error covariance from `draws` noisy
/// copies `h + ñ`, `ñ ~ CN(0, noise_var·I)`, of every labelled channel.
pub fn estimate_error_stats(
    locator: &dyn LocationEstimator,
    samples: &[(Channel, UserPosition)],
    noise_var: f64,
    draws: usize,
    seed: u64,
    exec: Exec,
) -> Result<ErrorStats> {
    let total = samples.len() * draws;
    if total < 2 {
        return Err(Error::domain("error statistics need at least two draws in total"));
    }
    if !(noise_var >= 0.0 && noise_var.is_finite()) {
        return Err(Error::domain(format!("noise variance {noise_var} must be nonnegative")));
    }
    let sd = Complex64::new(noise_var.sqrt(), 0.0);
    let per_sample = exec.try_map(samples.len(), |i| {
        let (h, truth) = &samples[i];
        let mut r = rng::stream(seed, "error-stats", i as u64);
        let noisy: Vec<Channel> = (0..draws)
            .map(|_| Channel::new(h.as_vector() + unit_noise(h.len(), &mut r) * sd))
            .collect::<Result<_>>()?;
        let est = locator.locate_batch(&noisy)?;
        Ok::<_, Error>(est.into_iter().map(|p| Vector2::new(p.x - truth.x, p.y - truth.y)).collect::<Vec<_>>())
    })?;
    let errors: Vec<Vector2<f64>> = per_sample.into_iter().flatten().collect();
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<Vector2<f64>>() / n;
    let cov = errors.iter().map(|e| (e - mean) * (e - mean).transpose()).sum::<Matrix2<f64>>() / (n - 1.0);
    Ok(ErrorStats { mean, cov: symmetrize(cov) })
}

/// Random-motion prediction: covariance grows by `(v·T_co)²/4·I`, the
/// covariance of a uniform disc of radius `v·T_co`.
pub fn motion_prior(belief: &GaussianBelief, speed: f64, coct_duration: f64) -> GaussianBelief {
    let r = speed * coct_duration;
    GaussianBelief { mean: belief.mean, cov: belief.cov + Matrix2::identity() * (r * r / 4.0) }
}

fn precision(cov: &Matrix2<f64>, what: &str) -> Result<Matrix2<f64>> {
    let reg = cov + Matrix2::identity() * REGULARIZATION;
    reg.try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .map(symmetrize)
        .ok_or_else(|| Error::Singular(format!("{what} covariance")))
}

/// Fuses the uploaded location, the bias-corrected estimator output and the
/// motion-propagated prior.
pub fn fuse(prior: &GaussianBelief, stats: &ErrorStats, inputs: &DenoiseInputs) -> Result<GaussianBelief> {
    if !(inputs.uploaded_noise_var >= 0.0) || !(inputs.speed >= 0.0) {
        return Err(Error::domain("noise variance and speed must be nonnegative"));
    }
    let predicted = motion_prior(prior, inputs.speed, inputs.coct_duration);
    let p_u = precision(&predicted.cov, "prior")?;
    let p_n = precision(&stats.cov, "estimator error")?;
    let p_c = precision(&(Matrix2::identity() * inputs.uploaded_noise_var), "upload")?;
    let corrected = to_vec(inputs.lenet_estimate) - stats.mean;
    let cov = (p_u + p_n + p_c)
        .try_inverse()
        .map(symmetrize)
        .ok_or_else(|| Error::Singular("posterior precision".into()))?;
    let mean = cov * (p_n * corrected + p_c * to_vec(inputs.uploaded_location) + p_u * predicted.mean);
    Ok(GaussianBelief { mean, cov })
}

/// What the user returns after the last channel interval of a frame.
#[derive(Debug, Clone, PartialEq)]
pub enum Feedback {
    /// Location already predicted from the estimated channel.
    Location(UserPosition),
    /// The estimated channel itself; the base station runs the estimator.
    Channel(Channel),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackVariant {
    #[default]
    Location,
    Channel,
}

/// Per-frame reports from the user.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Upload {
    pub location: UserPosition,
    pub speed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    /// Standard deviation of the uploaded location noise per coordinate.
    pub sigma_c: f64,
    pub coct_duration: f64,
    pub bounds: Bounds,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineStep {
    /// Location the covariance was computed at.
    pub location: UserPosition,
    pub ccm: CovMatrix,
    pub belief: GaussianBelief,
    /// Estimator output from this frame's feedback.
    pub lenet_estimate: UserPosition,
}

/// The denoised per-frame loop. Frame 1 uses the raw upload; every later
/// frame fuses the upload, the previous frame's fed-back estimate and the
/// propagated belief, clamps the fused mean to the coverage area, and carries
/// it forward as the next prior.
pub fn run_denoised_pipeline<C, F>(
    uploads: &[Upload],
    cfg: &PipelineConfig,
    stats: &ErrorStats,
    locator: &dyn LocationEstimator,
    mut ccm_of: C,
    mut feedback: F,
) -> Result<Vec<PipelineStep>>
where
    C: FnMut(UserPosition, f64) -> Result<CovMatrix>,
    F: FnMut(usize, &CovMatrix) -> Result<Feedback>,
{
    let var = cfg.sigma_c * cfg.sigma_c;
    let mut steps: Vec<PipelineStep> = Vec::with_capacity(uploads.len());
    for (k, up) in uploads.iter().enumerate() {
        let belief = match steps.last() {
            None => GaussianBelief::new(up.location, Matrix2::identity() * var),
            Some(prev) => {
                let inputs = DenoiseInputs {
                    uploaded_location: up.location,
                    uploaded_noise_var: var,
                    lenet_estimate: prev.lenet_estimate,
                    speed: uploads[k - 1].speed,
                    coct_duration: cfg.coct_duration,
                };
                let mut b = fuse(&prev.belief, stats, &inputs)?;
                b.mean = to_vec(cfg.bounds.clamp(b.position()));
                b
            }
        };
        let location = belief.position();
        let ccm = ccm_of(location, up.speed)?;
        let lenet_estimate = match feedback(k, &ccm)? {
            Feedback::Location(p) => p,
            Feedback::Channel(h) => locator.locate(&h)?,
        };
        steps.push(PipelineStep { location, ccm, belief, lenet_estimate });
    }
    Ok(steps)
}

/// Draws a uniform point from the disc of radius `r`.
pub fn uniform_disc<R: Rng + ?Sized>(r: f64, rng: &mut R) -> Vector2<f64> {
    let rho = r * rng.random::<f64>().sqrt();
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    Vector2::new(rho * phi.cos(), rho * phi.sin())
}
