//! Minibatch Adam training on mean squared error in normalized units.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{add_grads, LayerGrad, MlpModel};
use crate::par::Exec;
use crate::{rng, Error, Result};

/// Columns per gradient work item. Fixed so the reduction order, and hence
/// every bit of the result, does not depend on the executor.
const GRAD_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// First and second moment decay rates.
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Epochs without improvement before the learning rate is cut.
    pub patience: usize,
    pub decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            batch_size: 128,
            epochs: 20,
            seed: rng::DEFAULT_SEED,
            patience: 5,
            decay: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be nonnegative and finite"));
        }
        if !(b1 > 0.0 && b1 < 1.0 && b2 > 0.0 && b2 < 1.0) {
            return Err(Error::config("Adam decays must lie in (0, 1)"));
        }
        if self.batch_size == 0 || self.patience == 0 || !(self.adam_eps > 0.0) {
            return Err(Error::config("batch size, patience and Adam epsilon must be positive"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::config("learning-rate decay must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: Vec<f64>,
}

/// Training pairs stored column-wise in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub features: DMatrix<f64>,
    pub labels: DMatrix<f64>,
}

impl Samples {
    pub fn new(features: DMatrix<f64>, labels: DMatrix<f64>) -> Result<Self> {
        if features.ncols() != labels.ncols() {
            return Err(Error::Dimension { expected: features.ncols(), got: labels.ncols() });
        }
        Ok(Samples { features, labels })
    }

    pub fn from_samples(samples: &[Sample]) -> Result<Self> {
        let first = samples.first().ok_or(Error::Empty("samples"))?;
        let (fi, lo) = (first.features.len(), first.label.len());
        for s in samples {
            if s.features.len() != fi {
                return Err(Error::Dimension { expected: fi, got: s.features.len() });
            }
            if s.label.len() != lo {
                return Err(Error::Dimension { expected: lo, got: s.label.len() });
            }
        }
        let features = DMatrix::from_fn(fi, samples.len(), |i, j| samples[j].features[i]);
        let labels = DMatrix::from_fn(lo, samples.len(), |i, j| samples[j].label[i]);
        Ok(Samples { features, labels })
    }

    pub fn len(&self) -> usize {
        self.features.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn subset(&self, indices: &[usize]) -> Samples {
        Samples {
            features: self.features.select_columns(indices),
            labels: self.labels.select_columns(indices),
        }
    }

    pub fn head(&self, n: usize) -> Samples {
        let n = n.min(self.len());
        Samples {
            features: self.features.columns(0, n).into_owned(),
            labels: self.labels.columns(0, n).into_owned(),
        }
    }
}

impl MlpModel {
    /// Sets the input and output scalings to per-feature mean and spread.
    pub fn fit_scalings(&mut self, samples: &Samples) -> Result<()> {
        self.check_samples(samples)?;
        self.input_norm = super::model::Affine::fit(&samples.features);
        self.output_norm = super::model::Affine::fit(&samples.labels);
        Ok(())
    }

    fn check_samples(&self, samples: &Samples) -> Result<()> {
        if samples.is_empty() {
            return Err(Error::Empty("samples"));
        }
        if samples.features.nrows() != self.input_width() {
            return Err(Error::Dimension { expected: self.input_width(), got: samples.features.nrows() });
        }
        if samples.labels.nrows() != self.output_width() {
            return Err(Error::Dimension { expected: self.output_width(), got: samples.labels.nrows() });
        }
        Ok(())
    }

    /// Mean squared error in normalized units.
    pub fn loss(&self, samples: &Samples) -> Result<f64> {
        self.check_samples(samples)?;
        let x = self.input_norm.normalize(&samples.features);
        let y = self.output_norm.normalize(&samples.labels);
        let pred = self.forward_normalized(&x);
        Ok((pred - y).norm_squared() / (samples.labels.len() as f64))
    }

    /// Sum of squared errors and its gradient scaled by `scale`, over a
    /// normalized batch.
    pub(crate) fn sse_grad(&self, x: &DMatrix<f64>, y: &DMatrix<f64>, scale: f64) -> (f64, Vec<LayerGrad>) {
        let cache = self.forward_cached(x);
        let resid = &cache.output - y;
        let sse = resid.norm_squared();
        let grads = self.backward(&cache, resid * (2.0 * scale));
        (sse, grads)
    }
}

/// Optimizer and schedule state; together with the model it fully determines
/// the continuation of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub epoch: usize,
    pub learning_rate: f64,
    pub best_loss: f64,
    pub since_best: usize,
    pub loss_trace: Vec<f64>,
    pub m: Vec<LayerGrad>,
    pub v: Vec<LayerGrad>,
}

impl TrainState {
    pub fn new(model: &MlpModel, cfg: &TrainConfig) -> Self {
        let zeros: Vec<LayerGrad> = model.layers.iter().map(LayerGrad::zeros_like).collect();
        TrainState {
            step: 0,
            epoch: 0,
            learning_rate: cfg.learning_rate,
            best_loss: f64::INFINITY,
            since_best: 0,
            loss_trace: Vec::new(),
            m: zeros.clone(),
            v: zeros,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: MlpModel,
    pub state: TrainState,
    pub config: TrainConfig,
    pub exec: Exec,
}

impl Trainer {
    pub fn new(model: MlpModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let state = TrainState::new(&model, &config);
        Ok(Trainer { model, state, config, exec: Exec::default() })
    }

    pub fn resume(model: MlpModel, state: TrainState, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let shapes_ok = state.m.len() == model.layers.len()
            && state.v.len() == model.layers.len()
            && model.layers.iter().zip(&state.m).zip(&state.v).all(|((l, m), v)| {
                m.w.shape() == l.w.shape() && v.w.shape() == l.w.shape() && m.b.len() == l.b.len() && v.b.len() == l.b.len()
            });
        if !shapes_ok {
            return Err(Error::config("optimizer state does not match the model"));
        }
        Ok(Trainer { model, state, config, exec: Exec::default() })
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    /// Runs until `config.epochs` epochs have completed in total.
    pub fn run(&mut self, samples: &Samples) -> Result<()> {
        let remaining = self.config.epochs.saturating_sub(self.state.epoch);
        self.run_epochs(samples, remaining)
    }

    pub fn run_epochs(&mut self, samples: &Samples, epochs: usize) -> Result<()> {
        self.model.check_samples(samples)?;
        let x = self.model.input_norm.normalize(&samples.features);
        let y = self.model.output_norm.normalize(&samples.labels);
        for _ in 0..epochs {
            let loss = self.epoch(&x, &y)?;
            let st = &mut self.state;
            st.loss_trace.push(loss);
            if loss < st.best_loss {
                st.best_loss = loss;
                st.since_best = 0;
            } else {
                st.since_best += 1;
                if st.since_best >= self.config.patience {
                    st.learning_rate *= self.config.decay;
                    st.since_best = 0;
                }
            }
            st.epoch += 1;
        }
        Ok(())
    }

    fn epoch(&mut self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
        let n = x.ncols();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(self.config.seed, "batch-order", self.state.epoch as u64));
        let d_out = y.nrows() as f64;
        let mut total = 0.0;
        for (b, batch) in order.chunks(self.config.batch_size).enumerate() {
            let scale = 1.0 / (batch.len() as f64 * d_out);
            let chunks: Vec<&[usize]> = batch.chunks(GRAD_CHUNK).collect();
            let model = &self.model;
            let parts = self.exec.map(chunks.len(), |c| {
                let idx = chunks[c];
                model.sse_grad(&x.select_columns(idx), &y.select_columns(idx), scale)
            });
            let mut parts = parts.into_iter();
            let (mut sse, mut grads) = parts.next().expect("non-empty batch");
            for (s, g) in parts {
                sse += s;
                add_grads(&mut grads, &g);
            }
            if !sse.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {} batch {b}",
                    self.state.epoch
                )));
            }
            total += sse;
            self.adam_step(&grads);
        }
        Ok(total / (n as f64 * d_out))
    }

    fn adam_step(&mut self, grads: &[LayerGrad]) {
        let (b1, b2) = self.config.betas;
        let st = &mut self.state;
        st.step += 1;
        let t = st.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let lr = st.learning_rate;
        let eps = self.config.adam_eps;
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            }
        };
        for (((layer, g), m), v) in self.model.layers.iter_mut().zip(grads).zip(st.m.iter_mut()).zip(st.v.iter_mut()) {
            update(layer.w.as_mut_slice(), g.w.as_slice(), m.w.as_mut_slice(), v.w.as_mut_slice());
            update(layer.b.as_mut_slice(), g.b.as_slice(), m.b.as_mut_slice(), v.b.as_mut_slice());
        }
    }

    pub fn into_model(self) -> MlpModel {
        self.model
    }
}

/// Trains a copy of `model`; returns it with the per-epoch loss trace.
pub fn train(model: &MlpModel, samples: &Samples, cfg: &TrainConfig) -> Result<(MlpModel, Vec<f64>)> {
    let mut t = Trainer::new(model.clone(), cfg.clone())?;
    t.run(samples)?;
    Ok((t.model, t.state.loss_trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::{chain, Activation, Architecture, LayerSpec};
    use rand::Rng;

    fn affine_data(n: usize) -> (Samples, DMatrix<f64>, Vec<f64>) {
        let mut r = rng::stream(11, "affine", 0);
        let a = DMatrix::from_row_slice(2, 3, &[0.5, -1.0, 2.0, 1.5, 0.25, -0.75]);
        let b = vec![0.3, -0.2];
        let x = DMatrix::from_fn(3, n, |_, _| r.random_range(-1.0..1.0));
        let mut y = &a * &x;
        for mut c in y.column_iter_mut() {
            c[0] += b[0];
            c[1] += b[1];
        }
        (Samples::new(x, y).unwrap(), a, b)
    }

    #[test]
    fn zero_learning_rate_freezes_weights() {
        let (s, _, _) = affine_data(40);
        let arch = Architecture::plain(chain(&[3, 5, 2], Activation::Relu, Activation::Linear));
        let m = MlpModel::init(arch, &mut rng::stream(1, "init", 0)).unwrap();
        let cfg = TrainConfig { learning_rate: 0.0, epochs: 3, batch_size: 8, ..Default::default() };
        let (trained, trace) = train(&m, &s, &cfg).unwrap();
        assert_eq!(trained, m);
        assert_eq!(trace.len(), 3);
    }

    #[test]
    fn linear_model_reaches_least_squares() {
        let (s, a, b) = affine_data(64);
        let m = MlpModel::zeros(Architecture::plain(vec![LayerSpec::new(3, 2, Activation::Linear)])).unwrap();
        let cfg = TrainConfig { learning_rate: 0.05, epochs: 3000, batch_size: 64, patience: 20, ..Default::default() };
        let (trained, trace) = train(&m, &s, &cfg).unwrap();
        // normal-equation solution of the noiseless system
        let mut xa = DMatrix::from_element(4, 64, 1.0);
        xa.rows_mut(0, 3).copy_from(&s.features);
        let gram = &xa * xa.transpose();
        let theta = gram.cholesky().unwrap().solve(&(&xa * s.labels.transpose()));
        let w_ls = theta.rows(0, 3).transpose();
        let b_ls = theta.row(3).transpose();
        assert!((&w_ls - &a).abs().max() < 1e-9 && (b_ls[0] - b[0]).abs() < 1e-9);
        assert!((&trained.layers[0].w - w_ls).abs().max() < 1e-6);
        assert!((trained.layers[0].b[0] - b[0]).abs() < 1e-6 && (trained.layers[0].b[1] - b[1]).abs() < 1e-6);
        assert!(*trace.last().unwrap() < 1e-12);
    }

    #[test]
    fn same_seed_same_weights_and_executors_agree() {
        let (s, _, _) = affine_data(100);
        let arch = Architecture::plain(chain(&[3, 16, 16, 2], Activation::Relu, Activation::Linear));
        let mut m = MlpModel::init(arch, &mut rng::stream(2, "init", 0)).unwrap();
        m.fit_scalings(&s).unwrap();
        let cfg = TrainConfig { learning_rate: 1e-2, epochs: 5, batch_size: 70, ..Default::default() };
        let (a, ta) = train(&m, &s, &cfg).unwrap();
        let (b, tb) = train(&m, &s, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let mut t = Trainer::new(m, cfg).unwrap().with_exec(Exec::Sequential);
        t.run(&s).unwrap();
        assert_eq!(t.model, a);
        assert!(ta.last().unwrap() < &ta[0]);
    }

    #[test]
    fn split_runs_match_uninterrupted_run() {
        let (s, _, _) = affine_data(50);
        let arch = Architecture::plain(chain(&[3, 8, 2], Activation::Relu, Activation::Linear));
        let m = MlpModel::init(arch, &mut rng::stream(4, "init", 0)).unwrap();
        let cfg = TrainConfig { learning_rate: 1e-2, epochs: 6, batch_size: 16, patience: 1, ..Default::default() };
        let (full, _) = train(&m, &s, &cfg).unwrap();
        let mut t = Trainer::new(m, cfg.clone()).unwrap();
        t.run_epochs(&s, 2).unwrap();
        let mut t2 = Trainer::resume(t.model.clone(), t.state.clone(), cfg).unwrap();
        t2.run(&s).unwrap();
        assert_eq!(t2.model, full);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let (mut s, _, _) = affine_data(10);
        s.labels[(0, 3)] = f64::NAN;
        let m = MlpModel::zeros(Architecture::plain(vec![LayerSpec::new(3, 2, Activation::Linear)])).unwrap();
        let cfg = TrainConfig { epochs: 1, ..Default::default() };
        assert!(matches!(train(&m, &s, &cfg), Err(Error::NonFinite(_))));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { betas: (1.0, 0.9), ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: -1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    }
}
