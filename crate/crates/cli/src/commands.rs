use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ccmlab::covariance::CovMatrix;
use ccmlab::dataset::{lcnet_inputs, LcnetDataset, LenetDataset};
use ccmlab::denoise::{estimate_error_stats, ErrorStatsFile};
use ccmlab::estimator::{nmse_r, rmse_l};
use ccmlab::nn::{
    lcnet_architecture, lcnet_predict_batch, lenet_architecture, load_model, load_state, save_model, save_state, LenetLocator, MlpModel, Samples,
    TrainConfig, Trainer,
};
use ccmlab::denoise::LocationEstimator;
use ccmlab::par::Exec;
use ccmlab::rng;
use ccmlab::scene::{Grid, GridCache, Scene, UserPosition};
use ccmlab::sim::{run_experiment, ExperimentConfig, ExperimentContext, Method, REPORT_HEADER};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::{CliError, RunConfig};

/// Which network a command acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Which {
    Lcnet,
    Lenet,
}

impl fmt::Display for Which {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Which::Lcnet => "lcnet",
            Which::Lenet => "lenet",
        })
    }
}

/// File layout of an output directory.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Artifacts { dir: dir.into() }
    }

    fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn config(&self) -> PathBuf {
        self.file("config.json")
    }
    pub fn scene(&self) -> PathBuf {
        self.file("scene.json")
    }
    pub fn grid(&self) -> PathBuf {
        self.file("grid.bin")
    }
    pub fn lcnet_train(&self) -> PathBuf {
        self.file("lcnet_train.csv")
    }
    pub fn lcnet_test(&self) -> PathBuf {
        self.file("lcnet_test.csv")
    }
    pub fn lenet_train(&self) -> PathBuf {
        self.file("lenet_train.csv")
    }
    pub fn lenet_test(&self) -> PathBuf {
        self.file("lenet_test.csv")
    }
    pub fn lenet_stats(&self) -> PathBuf {
        self.file("lenet_stats.csv")
    }
    pub fn model(&self, which: Which) -> PathBuf {
        self.file(&format!("{which}.ckpt"))
    }
    pub fn optimizer(&self, which: Which) -> PathBuf {
        self.file(&format!("{which}.adam"))
    }
    pub fn loss(&self, which: Which) -> PathBuf {
        self.file(&format!("{which}_loss.csv"))
    }
    pub fn card(&self, which: Which) -> PathBuf {
        self.file(&format!("{which}_card.json"))
    }
    pub fn error_stats(&self) -> PathBuf {
        self.file("lenet_error_stats.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.file("metrics.csv")
    }
    pub fn report(&self) -> PathBuf {
        self.file("report.csv")
    }
}

/// What a trained checkpoint needs besides its weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCard {
    pub which: Which,
    /// Label coefficient (lcnet) or channel normalization ζ (lenet).
    pub scale: f64,
    pub train_rows: usize,
    pub epochs: usize,
    pub final_loss: f64,
}

impl ModelCard {
    fn save(&self, path: &Path) -> Result<(), CliError> {
        fs::write(path, serde_json::to_string_pretty(self).map_err(ccmlab::Error::from)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|_| missing(path, "train"))?;
        Ok(serde_json::from_str(&text).map_err(ccmlab::Error::from)?)
    }
}

fn missing(path: &Path, command: &str) -> CliError {
    CliError::Config(format!("{} not found; run `{command}` first", path.display()))
}

fn require(path: PathBuf, command: &str) -> Result<PathBuf, CliError> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(missing(&path, command))
    }
}

fn prepare(cfg: &RunConfig) -> Result<Artifacts, CliError> {
    let a = Artifacts::new(&cfg.out_dir);
    fs::create_dir_all(&a.dir)?;
    fs::write(a.config(), cfg.to_json())?;
    Ok(a)
}

/// Scene, grid channel cache, and every dataset.
pub fn cmd_gen_dataset(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let a = prepare(cfg)?;
    let exec = Exec::default();
    let scene = cfg.load_scene()?;
    scene.save(&a.scene())?;
    let grid = Grid::square(scene.plane_bounds, cfg.grid_per_side)?;
    let cache = GridCache::build_with(&cfg.array, &scene, grid, exec)?;
    cache.save(&a.grid())?;

    let d = &cfg.data;
    let speeds = cfg.experiment.trajectory.speed_range;
    let bounds = scene.plane_bounds;
    let inputs = lcnet_inputs(&bounds, d.lcnet_train_locations, d.lcnet_train_speeds, speeds, cfg.sub_seed("lcnet-train"));
    let train = LcnetDataset::generate(&cache, &cfg.timing, inputs, None, exec)?;
    train.save(&a.lcnet_train())?;
    let inputs = lcnet_inputs(&bounds, d.lcnet_test_locations, d.lcnet_test_speeds, speeds, cfg.sub_seed("lcnet-test"));
    LcnetDataset::generate(&cache, &cfg.timing, inputs, Some(train.coefficient), exec)?.save(&a.lcnet_test())?;
    drop(train);

    let ratio = cfg.experiment.feedback_noise_ratio;
    let lenet = |n: usize, norm: Option<(f64, f64)>, label: &str| {
        LenetDataset::generate(&cfg.array, &scene, n, ratio, norm, cfg.sub_seed(label), "lenet-location", exec)
    };
    let clean = lenet(d.lenet_train_locations, None, "lenet-train")?;
    let norm = Some((clean.zeta, clean.noise_var));
    clean.with_training_noise(cfg.sub_seed("lenet-noise"))?.save(&a.lenet_train())?;
    lenet(d.lenet_test_locations, norm, "lenet-test")?.save(&a.lenet_test())?;
    lenet(d.stats_locations, norm, "lenet-stats")?.save(&a.lenet_stats())?;

    Ok(vec![a.config(), a.scene(), a.grid(), a.lcnet_train(), a.lcnet_test(), a.lenet_train(), a.lenet_test(), a.lenet_stats()])
}

/// Training samples, network width scale and architecture of `which`.
fn training_set(a: &Artifacts, which: Which) -> Result<(Samples, f64, MlpModel), CliError> {
    Ok(match which {
        Which::Lcnet => {
            let ds = LcnetDataset::load(&require(a.lcnet_train(), "gen-dataset")?)?;
            (ds.samples()?, ds.coefficient, MlpModel::zeros(lcnet_architecture(ds.n_antennas))?)
        }
        Which::Lenet => {
            let ds = LenetDataset::load(&require(a.lenet_train(), "gen-dataset")?)?;
            (ds.samples()?, ds.zeta, MlpModel::zeros(lenet_architecture(ds.n_antennas()))?)
        }
    })
}

/// Fresh model with input/output scalings fitted to `samples`.
fn initial_model(shape: &MlpModel, samples: &Samples, seed: u64) -> Result<MlpModel, CliError> {
    let mut model = MlpModel::init(shape.architecture().clone(), &mut rng::stream(seed, "init", 0))?;
    model.fit_scalings(samples)?;
    Ok(model)
}

fn write_loss(path: &Path, trace: &[f64]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "loss"])?;
    for (i, l) in trace.iter().enumerate() {
        w.write_record([(i + 1).to_string(), l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Trains `which` up to the configured epoch count, optionally continuing
/// from a previous checkpoint and optimizer state. Training the
/// channel-to-location network also refreshes its error statistics.
pub fn cmd_train(cfg: &RunConfig, which: Which, resume: bool) -> Result<Vec<PathBuf>, CliError> {
    let a = prepare(cfg)?;
    let tcfg = match which {
        Which::Lcnet => &cfg.lcnet_train,
        Which::Lenet => &cfg.lenet_train,
    };
    let (samples, scale, shape) = training_set(&a, which)?;
    let mut trainer = if resume && a.model(which).is_file() && a.optimizer(which).is_file() {
        let model = load_model(&a.model(which))?;
        let state = load_state(&model, &a.optimizer(which))?;
        Trainer::resume(model, state, tcfg.clone())?
    } else {
        Trainer::new(initial_model(&shape, &samples, tcfg.seed)?, tcfg.clone())?
    };
    trainer.run(&samples)?;
    save_model(&trainer.model, &a.model(which))?;
    save_state(&trainer.state, &a.optimizer(which))?;
    write_loss(&a.loss(which), &trainer.state.loss_trace)?;
    let card = ModelCard {
        which,
        scale,
        train_rows: samples.len(),
        epochs: trainer.state.epoch,
        final_loss: trainer.state.loss_trace.last().copied().unwrap_or(f64::NAN),
    };
    card.save(&a.card(which))?;
    let mut written = vec![a.config(), a.model(which), a.optimizer(which), a.loss(which), a.card(which)];
    if which == Which::Lenet {
        let ds = LenetDataset::load(&require(a.lenet_stats(), "gen-dataset")?)?;
        let locator = LenetLocator { model: &trainer.model, zeta: scale };
        let seed = cfg.sub_seed("error-stats");
        let stats = estimate_error_stats(&locator, &ds.pairs(), ds.noise_var, cfg.data.stats_draws, seed, Exec::default())?;
        ErrorStatsFile { stats, samples: ds.len(), draws: cfg.data.stats_draws, noise_var: ds.noise_var, seed }.save(&a.error_stats())?;
        written.push(a.error_stats());
    }
    Ok(written)
}

pub const METRICS_HEADER: [&str; 7] = ["fraction", "repeat", "lcnet_rows", "lenet_rows", "nmse_r", "rmse_l", "centroid_rmse_l"];

/// Covariance error of `predicted` against a labelled test set.
pub fn covariance_nmse(test: &LcnetDataset, predicted: &[CovMatrix]) -> Result<f64, CliError> {
    let truth = (0..test.len()).map(|i| test.physical_label(i)).collect::<ccmlab::Result<Vec<_>>>()?;
    Ok(nmse_r(&truth, predicted)?)
}

/// Per-coordinate RMS location error of `predicted` against `truth`.
pub fn location_rmse(truth: &[UserPosition], predicted: &[UserPosition]) -> Result<f64, CliError> {
    let errors: Vec<[f64; 2]> = truth.iter().zip(predicted).map(|(t, p)| [p.x - t.x, p.y - t.y]).collect();
    Ok(rmse_l(&errors)?)
}

fn fraction_rows(fraction: f64, total: usize) -> usize {
    ((fraction * total as f64).round() as usize).clamp(1, total)
}

fn train_subset(shape: &MlpModel, samples: &Samples, order: &[usize], rows: usize, tcfg: &TrainConfig, seed: u64) -> Result<MlpModel, CliError> {
    let subset = samples.subset(&order[..rows]);
    let cfg = TrainConfig { seed, ..tcfg.clone() };
    let mut trainer = Trainer::new(initial_model(shape, &subset, seed)?, cfg)?;
    trainer.run(&subset)?;
    Ok(trainer.into_model())
}

/// Learning-curve sweep: retrains both networks on nested random fractions of
/// their training sets and scores them on the held-out sets.
pub fn cmd_eval(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let a = prepare(cfg)?;
    let (lc_samples, coefficient, lc_shape) = training_set(&a, Which::Lcnet)?;
    let (le_samples, zeta, le_shape) = training_set(&a, Which::Lenet)?;
    let lc_test = LcnetDataset::load(&require(a.lcnet_test(), "gen-dataset")?)?;
    let le_test = LenetDataset::load(&require(a.lenet_test(), "gen-dataset")?)?;
    let scene = Scene::load(&require(a.scene(), "gen-dataset")?)?;
    let centroid = scene.plane_bounds.centroid();
    let centroid_rmse = location_rmse(&le_test.positions, &vec![centroid; le_test.len()])?;

    let mut w = csv::Writer::from_writer(BufWriter::new(fs::File::create(a.metrics())?));
    w.write_record(METRICS_HEADER)?;
    for repeat in 0..cfg.eval.repeats {
        let r = repeat as u64;
        let shuffled = |n: usize, label: &str| {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng::stream(cfg.sub_seed("eval-subset"), label, r));
            order
        };
        let lc_order = shuffled(lc_samples.len(), "lcnet");
        let le_order = shuffled(le_samples.len(), "lenet");
        for &fraction in &cfg.eval.fractions {
            let lc_rows = fraction_rows(fraction, lc_samples.len());
            let seed = rng::derive_seed(cfg.lcnet_train.seed, "eval", r);
            let lc = train_subset(&lc_shape, &lc_samples, &lc_order, lc_rows, &cfg.lcnet_train, seed)?;
            let predicted = lcnet_predict_batch(&lc, coefficient, &lc_test.inputs)?;
            let nmse = covariance_nmse(&lc_test, &predicted)?;

            let le_rows = fraction_rows(fraction, le_samples.len());
            let seed = rng::derive_seed(cfg.lenet_train.seed, "eval", r);
            let le = train_subset(&le_shape, &le_samples, &le_order, le_rows, &cfg.lenet_train, seed)?;
            let located = LenetLocator { model: &le, zeta }.locate_batch(&le_test.channels)?;
            let rmse = location_rmse(&le_test.positions, &located)?;

            w.write_record([
                fraction.to_string(),
                repeat.to_string(),
                lc_rows.to_string(),
                le_rows.to_string(),
                nmse.to_string(),
                rmse.to_string(),
                centroid_rmse.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(vec![a.config(), a.metrics()])
}

/// Trajectory experiment over the configured SNR grid, once per location-noise
/// level in `sigma_c_sweep`; one report row per (noise level, method, SNR).
pub fn cmd_run(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let a = prepare(cfg)?;
    let scene = Scene::load(&require(a.scene(), "gen-dataset")?)?;
    let cache = GridCache::load(&require(a.grid(), "gen-dataset")?)?;
    let methods = &cfg.experiment.methods;
    let load = |which: Which| -> Result<(MlpModel, f64), CliError> {
        let model = load_model(&require(a.model(which), &format!("train --which {which}"))?)?;
        Ok((model, ModelCard::load(&a.card(which))?.scale))
    };
    let lcnet = if methods.iter().any(|m| m.is_learned()) { Some(load(Which::Lcnet)?) } else { None };
    let (lenet, stats) = if methods.contains(&Method::UlccmeDenoised) {
        let stats = ErrorStatsFile::load(&require(a.error_stats(), "train --which lenet")?)?;
        (Some(load(Which::Lenet)?), Some(stats.stats))
    } else {
        (None, None)
    };

    let mut ctx = ExperimentContext::new(cfg.array, &scene, &cache, cfg.timing);
    ctx.lcnet = lcnet.as_ref().map(|(m, c)| (m, *c));
    ctx.lenet = lenet.as_ref().map(|(m, z)| (m, *z));
    ctx.stats = stats;
    if a.card(Which::Lcnet).is_file() {
        ctx.fallback_scale = ModelCard::load(&a.card(Which::Lcnet))?.scale;
    }

    let mut out = BufWriter::new(fs::File::create(a.report())?);
    let mut w = csv::Writer::from_writer(&mut out);
    w.write_record(REPORT_HEADER)?;
    for &sigma_c in &cfg.sigma_c_sweep {
        let ecfg = ExperimentConfig { sigma_c, ..cfg.experiment.clone() };
        run_experiment(&ecfg, &ctx)?.write_csv_rows(&mut w)?;
    }
    w.flush()?;
    drop(w);
    out.flush()?;
    Ok(vec![a.config(), a.report()])
}
