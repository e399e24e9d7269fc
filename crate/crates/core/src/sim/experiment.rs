//! End-to-end comparison of covariance sources for pilot-aided channel
//! estimation along simulated trajectories.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::trajectory::{gen_trajectory, TrajectoryConfig};
use super::FrameTiming;
use crate::covariance::{CovMatrix, RegionSpec};
use crate::denoise::{run_denoised_pipeline, ErrorStats, Feedback, FeedbackVariant, PipelineConfig, Upload};
use crate::estimator::{
    db_to_linear, design_pilots, energy_for_snr, ls_pilots, receive, unit_noise, LmmseEstimator, LsEstimator,
};
use crate::geometry::{ArrayConfig, Channel};
use crate::linalg::{add_outer_lower, CMatrix};
use crate::nn::{lcnet_predict, LenetLocator, MlpModel};
use crate::par::Exec;
use crate::scene::{channel_map, GridCache, Scene, UserPosition};
use crate::{rng, Complex64, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ls,
    IdentityLmmse,
    Statistical,
    UlccmeRaw,
    UlccmeDenoised,
    UlccmeNoiseless,
    Perfect,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Ls,
        Method::IdentityLmmse,
        Method::Statistical,
        Method::UlccmeRaw,
        Method::UlccmeDenoised,
        Method::UlccmeNoiseless,
        Method::Perfect,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ls => "ls",
            Method::IdentityLmmse => "identity-lmmse",
            Method::Statistical => "statistical",
            Method::UlccmeRaw => "ulccme-raw",
            Method::UlccmeDenoised => "ulccme-denoised",
            Method::UlccmeNoiseless => "ulccme-noiseless",
            Method::Perfect => "perfect",
        }
    }

    /// Covariance predicted by the location network.
    pub fn is_learned(self) -> bool {
        matches!(self, Method::UlccmeRaw | Method::UlccmeDenoised | Method::UlccmeNoiseless)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Covariance of the previous frame's estimated channels, or a scaled
/// identity before any estimates exist.
pub fn statistical_ccm(prev: Option<&[Channel]>, fallback_scale: f64, n_antennas: usize) -> Result<CovMatrix> {
    match prev {
        None => Ok(CovMatrix::scaled_identity(n_antennas, fallback_scale)),
        Some([]) => Err(Error::Empty("previous channel estimates")),
        Some(hs) => {
            let n = hs[0].len();
            let mut acc = CMatrix::zeros(n, n);
            let w = 1.0 / hs.len() as f64;
            for h in hs {
                if h.len() != n {
                    return Err(Error::Dimension { expected: n, got: h.len() });
                }
                add_outer_lower(&mut acc, h.as_vector(), w);
            }
            let mut out = acc;
            crate::linalg::hermitize_from_lower(&mut out);
            CovMatrix::new(out)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub trajectory: TrajectoryConfig,
    pub n_trajectories: usize,
    pub n_coct: usize,
    /// Standard deviation of uploaded location noise per coordinate, meters.
    pub sigma_c: f64,
    /// Standard deviation of uploaded speed noise, m/s.
    pub sigma_v: f64,
    pub snr_db: Vec<f64>,
    pub m_p: usize,
    /// Receiver noise standard deviation; pilot energy follows from the SNR.
    pub noise_std: f64,
    /// `N_B σ̃² / E‖h‖²` for the channel fed to the location network.
    pub feedback_noise_ratio: f64,
    pub feedback: FeedbackVariant,
    pub methods: Vec<Method>,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            trajectory: TrajectoryConfig::default(),
            n_trajectories: 20,
            n_coct: 10,
            sigma_c: 2.0,
            sigma_v: 0.5,
            snr_db: vec![0.0, 5.0, 10.0, 15.0, 20.0],
            m_p: 60,
            noise_std: 0.1,
            feedback_noise_ratio: 1e-2,
            feedback: FeedbackVariant::Location,
            methods: Method::ALL.to_vec(),
            seed: rng::DEFAULT_SEED,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.trajectory.validate()?;
        if self.n_trajectories == 0 || self.n_coct == 0 || self.m_p == 0 {
            return Err(Error::config("trajectory, frame and pilot counts must be positive"));
        }
        if !(self.sigma_c >= 0.0 && self.sigma_v >= 0.0 && self.feedback_noise_ratio >= 0.0) {
            return Err(Error::config("noise levels must be nonnegative"));
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("receiver noise must be positive"));
        }
        if self.snr_db.is_empty() || self.snr_db.iter().any(|s| !s.is_finite()) {
            return Err(Error::config("SNR grid must be non-empty and finite"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("no methods selected"));
        }
        Ok(())
    }
}

/// Trained networks and shared precomputed state.
#[derive(Debug, Clone)]
pub struct ExperimentContext<'a> {
    pub array: ArrayConfig,
    pub scene: &'a Scene,
    pub grid: &'a GridCache,
    pub timing: FrameTiming,
    pub lcnet: Option<(&'a MlpModel, f64)>,
    pub lenet: Option<(&'a MlpModel, f64)>,
    pub stats: Option<ErrorStats>,
    /// Scale of the identity covariance used when nothing better is known.
    pub fallback_scale: f64,
    /// `E‖h‖²` over the coverage area, used to turn SNR into pilot energy.
    pub mean_gain: f64,
    pub exec: Exec,
}

impl<'a> ExperimentContext<'a> {
    pub fn new(array: ArrayConfig, scene: &'a Scene, grid: &'a GridCache, timing: FrameTiming) -> Self {
        let mean_gain = grid.channels().iter().map(Channel::norm_sqr).sum::<f64>() / grid.channels().len().max(1) as f64;
        ExperimentContext {
            array,
            scene,
            grid,
            timing,
            lcnet: None,
            lenet: None,
            stats: None,
            fallback_scale: mean_gain / array.n_antennas() as f64,
            mean_gain,
            exec: Exec::default(),
        }
    }

    fn check(&self, cfg: &ExperimentConfig) -> Result<()> {
        for m in &cfg.methods {
            if m.is_learned() && self.lcnet.is_none() {
                return Err(Error::config(format!("method {m} needs a trained location-to-covariance model")));
            }
            if *m == Method::UlccmeDenoised && (self.lenet.is_none() || self.stats.is_none()) {
                return Err(Error::config("the denoised method needs a channel-to-location model and its error statistics"));
            }
        }
        if !(self.mean_gain > 0.0 && self.fallback_scale > 0.0) {
            return Err(Error::config("mean channel gain and fallback scale must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodResult {
    pub method: Method,
    pub snr_db: f64,
    pub nmse_h: f64,
    pub nmse_r: Option<f64>,
    pub rmse_l: Option<f64>,
    /// NMSE_H of each trajectory on its own.
    pub per_trajectory: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub rows: Vec<MethodResult>,
    /// Per-coordinate RMS error of the uploaded locations.
    pub upload_rmse: f64,
    /// Per-coordinate RMS error of the locations the denoised method used.
    pub corrected_rmse: Option<f64>,
}

pub const REPORT_HEADER: [&str; 9] = ["method", "snr_db", "nmse_h", "nmse_r", "rmse_l", "sigma_c", "sigma_v", "mode", "seed"];

impl ExperimentReport {
    pub fn get(&self, method: Method, snr_db: f64) -> Option<&MethodResult> {
        self.rows.iter().find(|r| r.method == method && r.snr_db == snr_db)
    }

    pub fn nmse_h(&self, method: Method, snr_db: f64) -> Option<f64> {
        self.get(method, snr_db).map(|r| r.nmse_h)
    }

    pub fn write_csv_rows<W: Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.method.name().to_string(),
                r.snr_db.to_string(),
                r.nmse_h.to_string(),
                opt(r.nmse_r),
                opt(r.rmse_l),
                self.config.sigma_c.to_string(),
                self.config.sigma_v.to_string(),
                self.config.trajectory.mode.to_string(),
                self.config.seed.to_string(),
            ])?;
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(REPORT_HEADER)?;
        self.write_csv_rows(&mut wtr)?;
        wtr.flush()?;
        Ok(())
    }
}

/// Sums gathered along one trajectory.
#[derive(Debug, Clone, Default)]
struct Tally {
    /// [method][snr] squared channel error
    err: Vec<Vec<f64>>,
    /// [snr] channel energy (identical across methods)
    energy: f64,
    /// [method] covariance error and reference energy
    r_err: Vec<f64>,
    r_ref: f64,
    lenet_sq: f64,
    lenet_count: usize,
    upload_sq: f64,
    corrected_sq: f64,
    frames: usize,
}

pub fn run_experiment(cfg: &ExperimentConfig, ctx: &ExperimentContext<'_>) -> Result<ExperimentReport> {
    cfg.validate()?;
    ctx.timing.validate()?;
    ctx.check(cfg)?;
    let tallies = ctx.exec.try_map(cfg.n_trajectories, |t| run_trajectory(cfg, ctx, t as u64))?;

    let n_s = cfg.snr_db.len();
    let energy: f64 = tallies.iter().map(|t| t.energy).sum();
    let r_ref: f64 = tallies.iter().map(|t| t.r_ref).sum();
    let mut rows = Vec::new();
    for (mi, &method) in cfg.methods.iter().enumerate() {
        let nmse_r = method.is_learned().then(|| tallies.iter().map(|t| t.r_err[mi]).sum::<f64>() / r_ref);
        let lenet_count: usize = tallies.iter().map(|t| t.lenet_count).sum();
        let rmse_l = (method == Method::UlccmeDenoised && lenet_count > 0)
            .then(|| (tallies.iter().map(|t| t.lenet_sq).sum::<f64>() / (2.0 * lenet_count as f64)).sqrt());
        for s in 0..n_s {
            let err: f64 = tallies.iter().map(|t| t.err[mi][s]).sum();
            rows.push(MethodResult {
                method,
                snr_db: cfg.snr_db[s],
                nmse_h: err / energy,
                nmse_r,
                rmse_l,
                per_trajectory: tallies.iter().map(|t| t.err[mi][s] / t.energy).collect(),
            });
        }
    }
    let frames: usize = tallies.iter().map(|t| t.frames).sum();
    let upload_rmse = (tallies.iter().map(|t| t.upload_sq).sum::<f64>() / (2.0 * frames as f64)).sqrt();
    let corrected_rmse = cfg
        .methods
        .contains(&Method::UlccmeDenoised)
        .then(|| (tallies.iter().map(|t| t.corrected_sq).sum::<f64>() / (2.0 * frames as f64)).sqrt());
    Ok(ExperimentReport { config: cfg.clone(), rows, upload_rmse, corrected_rmse })
}

fn run_trajectory(cfg: &ExperimentConfig, ctx: &ExperimentContext<'_>, t: u64) -> Result<Tally> {
    let bounds = ctx.scene.plane_bounds;
    let n_b = ctx.array.n_antennas();
    let n_cct = ctx.timing.n_cct;
    let (v_lo, v_hi) = cfg.trajectory.speed_range;
    let traj = gen_trajectory(&cfg.trajectory, &ctx.timing, &bounds, cfg.n_coct, rng::derive_seed(cfg.seed, "trajectory", t))?;

    let channels: Vec<Vec<Channel>> = traj
        .cocts
        .iter()
        .map(|c| c.positions.iter().map(|p| channel_map(&ctx.array, ctx.scene, *p)).collect())
        .collect::<Result<_>>()?;

    let mut upload_rng = rng::stream(cfg.seed, "upload", t);
    let uploads: Vec<Upload> = traj
        .cocts
        .iter()
        .map(|c| {
            let [nx, ny, nv]: [f64; 3] = std::array::from_fn(|_| upload_rng.sample(rand_distr::StandardNormal));
            Upload {
                location: bounds.clamp(UserPosition::new(c.start.x + cfg.sigma_c * nx, c.start.y + cfg.sigma_c * ny)),
                speed: (c.speed + cfg.sigma_v * nv).clamp(v_lo, v_hi),
            }
        })
        .collect();

    let mut tally = Tally {
        err: vec![vec![0.0; cfg.snr_db.len()]; cfg.methods.len()],
        r_err: vec![0.0; cfg.methods.len()],
        frames: cfg.n_coct,
        ..Default::default()
    };
    for (c, u) in traj.cocts.iter().zip(&uploads) {
        tally.upload_sq += (u.location.x - c.start.x).powi(2) + (u.location.y - c.start.y).powi(2);
    }

    let learned = |p: UserPosition, v: f64| -> Result<CovMatrix> {
        let (model, coef) = ctx.lcnet.ok_or_else(|| Error::config("missing location-to-covariance model"))?;
        lcnet_predict(model, coef, p, v)
    };

    // corrected locations for the denoised method
    let denoised: Option<Vec<CovMatrix>> = if cfg.methods.contains(&Method::UlccmeDenoised) {
        let (model, zeta) = ctx.lenet.expect("checked");
        let locator = LenetLocator { model, zeta };
        let stats = ctx.stats.expect("checked");
        let sd = Complex64::new((cfg.feedback_noise_ratio * ctx.mean_gain / n_b as f64).sqrt(), 0.0);
        let mut fb_rng = rng::stream(cfg.seed, "feedback", t);
        let fed_back: Vec<Channel> = channels
            .iter()
            .map(|hs| Channel::new(hs[n_cct - 1].as_vector() + unit_noise(n_b, &mut fb_rng) * sd))
            .collect::<Result<_>>()?;
        let pcfg = PipelineConfig { sigma_c: cfg.sigma_c, coct_duration: ctx.timing.t_co, bounds };
        let steps = run_denoised_pipeline(&uploads, &pcfg, &stats, &locator, learned, |k, _| match cfg.feedback {
            FeedbackVariant::Channel => Ok(Feedback::Channel(fed_back[k].clone())),
            FeedbackVariant::Location => {
                use crate::denoise::LocationEstimator;
                locator.locate(&fed_back[k]).map(Feedback::Location)
            }
        })?;
        for (k, st) in steps.iter().enumerate() {
            let end = traj.cocts[k].positions[n_cct - 1];
            tally.lenet_sq += (st.lenet_estimate.x - end.x).powi(2) + (st.lenet_estimate.y - end.y).powi(2);
            tally.lenet_count += 1;
            let start = traj.cocts[k].start;
            tally.corrected_sq += (st.location.x - start.x).powi(2) + (st.location.y - start.y).powi(2);
        }
        Some(steps.into_iter().map(|s| s.ccm).collect())
    } else {
        None
    };

    let energies: Vec<f64> = cfg
        .snr_db
        .iter()
        .map(|db| energy_for_snr(db_to_linear(*db), cfg.m_p, cfg.noise_std * cfg.noise_std, ctx.mean_gain))
        .collect::<Result<_>>()?;
    let any_learned = cfg.methods.iter().any(|m| m.is_learned());
    let mut pilot_rng = rng::stream(cfg.seed, "pilot", t);
    // previous-frame estimates of the statistical method, per SNR
    let mut prev: Vec<Option<Vec<Channel>>> = vec![None; cfg.snr_db.len()];

    for (k, coct) in traj.cocts.iter().enumerate() {
        let hs = &channels[k];
        let noise: Vec<_> = (0..n_cct).map(|_| unit_noise(cfg.m_p, &mut pilot_rng)).collect();
        tally.energy += hs.iter().map(Channel::norm_sqr).sum::<f64>();
        let oracle = if any_learned {
            let spec = RegionSpec::new(coct.start, coct.speed, ctx.timing)?;
            let r = ctx.grid.discrete_ccm(&spec)?;
            tally.r_ref += r.matrix().norm_squared();
            Some(r)
        } else {
            None
        };

        for (mi, &method) in cfg.methods.iter().enumerate() {
            let fixed: Option<CovMatrix> = match method {
                Method::Ls | Method::Statistical => None,
                Method::IdentityLmmse => Some(CovMatrix::scaled_identity(n_b, ctx.fallback_scale)),
                Method::UlccmeRaw => Some(learned(uploads[k].location, uploads[k].speed)?),
                Method::UlccmeNoiseless => Some(learned(coct.start, coct.speed)?),
                Method::UlccmeDenoised => Some(denoised.as_ref().expect("computed above")[k].clone()),
                Method::Perfect => {
                    let mut acc = CMatrix::zeros(n_b, n_b);
                    for h in hs {
                        add_outer_lower(&mut acc, h.as_vector(), 1.0 / n_cct as f64);
                    }
                    crate::linalg::hermitize_from_lower(&mut acc);
                    Some(CovMatrix::new(acc)?)
                }
            };
            if let (Some(r), Some(o)) = (&fixed, &oracle) {
                if method.is_learned() {
                    tally.r_err[mi] += (r.matrix() - o.matrix()).norm_squared();
                }
            }
            for (s, &energy) in energies.iter().enumerate() {
                let estimates: Vec<Channel> = match method {
                    Method::Ls => {
                        let p = ls_pilots(n_b, cfg.m_p, energy, cfg.noise_std)?;
                        let est = LsEstimator::new(&p)?;
                        hs.iter().zip(&noise).map(|(h, w)| est.estimate(&receive(h, &p, w)?)).collect::<Result<_>>()?
                    }
                    _ => {
                        let r = match &fixed {
                            Some(r) => r.clone(),
                            None => statistical_ccm(prev[s].as_deref(), ctx.fallback_scale, n_b)?,
                        };
                        let p = design_pilots(&r, cfg.m_p, energy, cfg.noise_std)?;
                        let est = LmmseEstimator::new(&p, &r)?;
                        hs.iter().zip(&noise).map(|(h, w)| est.estimate(&receive(h, &p, w)?)).collect::<Result<_>>()?
                    }
                };
                for (h, e) in hs.iter().zip(&estimates) {
                    tally.err[mi][s] += (h.as_vector() - e.as_vector()).norm_squared();
                }
                if method == Method::Statistical {
                    prev[s] = Some(estimates);
                }
            }
        }
    }
    Ok(tally)
}
