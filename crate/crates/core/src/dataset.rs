//! Training sets for the two networks and their CSV files.
//!
//! Each file starts with one metadata line,
//! `#ccmlab-dataset v1 kind=<lcnet|lenet> key=value ...`, followed by an
//! ordinary CSV table with a header row.
//!
//! * `kind=lcnet` rows: `x, y, speed, o0 .. o{N_B²-1}` where `o` is the packed
//!   label divided by `coefficient` (metadata).
//! * `kind=lenet` rows: `x, y, re0 .. re{N_B-1}, im0 .. im{N_B-1}`; `zeta` and
//!   `noise_var` (metadata) give the input normalization and the training-noise
//!   variance, and `noisy=1` marks channels that already carry that noise.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;

use crate::covariance::{label_scale, pack_cov, unpack_cov, CovMatrix, PackedCov, RegionSpec};
use crate::estimator::unit_noise;
use crate::geometry::{ArrayConfig, Channel};
use crate::nn::{lenet_features, Samples};
use crate::par::Exec;
use crate::scene::{channel_map, Bounds, GridCache, Scene, UserPosition};
use crate::sim::FrameTiming;
use crate::{rng, Complex64, Error, Result};

const MAGIC: &str = "#ccmlab-dataset";
const VERSION: &str = "v1";

fn uniform_positions(bounds: &Bounds, n: usize, seed: u64, label: &str) -> Vec<UserPosition> {
    let mut r = rng::stream(seed, label, 0);
    (0..n)
        .map(|_| UserPosition::new(r.random_range(bounds.x_min..=bounds.x_max), r.random_range(bounds.y_min..=bounds.y_max)))
        .collect()
}

fn write_meta(w: &mut impl Write, kind: &str, meta: &[(&str, String)]) -> Result<()> {
    write!(w, "{MAGIC} {VERSION} kind={kind}")?;
    for (k, v) in meta {
        write!(w, " {k}={v}")?;
    }
    writeln!(w)?;
    Ok(())
}

fn read_meta(r: &mut impl BufRead, kind: &str) -> Result<BTreeMap<String, String>> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    let mut parts = line.split_ascii_whitespace();
    if parts.next() != Some(MAGIC) || parts.next() != Some(VERSION) {
        return Err(Error::Parse(format!("missing `{MAGIC} {VERSION}` metadata line")));
    }
    let meta: BTreeMap<String, String> = parts
        .filter_map(|kv| kv.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    if meta.get("kind").map(String::as_str) != Some(kind) {
        return Err(Error::Parse(format!("expected a `{kind}` dataset")));
    }
    Ok(meta)
}

fn meta_value<T: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<T> {
    meta.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Parse(format!("metadata field `{key}` missing or invalid")))
}

fn parse_row(record: &csv::StringRecord, width: usize, row: usize) -> Result<Vec<f64>> {
    if record.len() != width {
        return Err(Error::Parse(format!("row {row}: {} fields, expected {width}", record.len())));
    }
    record
        .iter()
        .map(|f| f.trim().parse::<f64>().map_err(|_| Error::Parse(format!("row {row}: bad number `{f}`"))))
        .collect()
}

/// (location, speed) inputs with labels scaled to unit mean trace per antenna.
#[derive(Debug, Clone, PartialEq)]
pub struct LcnetDataset {
    pub inputs: Vec<(UserPosition, f64)>,
    pub labels: Vec<PackedCov>,
    /// Multiply a label by this to recover the physical covariance.
    pub coefficient: f64,
    pub n_antennas: usize,
}

/// Uniform locations, `speeds_per_location` uniform speeds each.
pub fn lcnet_inputs(bounds: &Bounds, n_locations: usize, speeds_per_location: usize, speed_range: (f64, f64), seed: u64) -> Vec<(UserPosition, f64)> {
    let positions = uniform_positions(bounds, n_locations, seed, "lcnet-location");
    let mut r = rng::stream(seed, "lcnet-speed", 0);
    let (lo, hi) = speed_range;
    positions
        .into_iter()
        .flat_map(|p| (0..speeds_per_location).map(move |_| p).collect::<Vec<_>>())
        .map(|p| (p, if hi > lo { r.random_range(lo..=hi) } else { lo }))
        .collect()
}

/// Region covariances of every input over the cached grid.
pub fn lcnet_labels(cache: &GridCache, timing: &FrameTiming, inputs: &[(UserPosition, f64)], exec: Exec) -> Result<Vec<CovMatrix>> {
    exec.try_map(inputs.len(), |i| {
        let (p, v) = inputs[i];
        cache.discrete_ccm(&RegionSpec::new(p, v, *timing)?)
    })
}

/// Labels are computed in blocks of this many inputs and packed at once, so
/// full complex covariances never accumulate for large sets.
const LABEL_BLOCK: usize = 4096;

impl LcnetDataset {
    /// Labels every input over the cached grid. With `coefficient = None` the
    /// scale is computed from this set (training), otherwise it is reused.
    pub fn generate(cache: &GridCache, timing: &FrameTiming, inputs: Vec<(UserPosition, f64)>, coefficient: Option<f64>, exec: Exec) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::Empty("inputs"));
        }
        let mut labels = Vec::with_capacity(inputs.len());
        let mut trace_sum = 0.0;
        for block in inputs.chunks(LABEL_BLOCK) {
            for cov in lcnet_labels(cache, timing, block, exec)? {
                trace_sum += cov.trace();
                labels.push(pack_cov(&cov));
            }
        }
        let n_antennas = cache.n_antennas;
        let coefficient = match coefficient {
            Some(c) => c,
            None => trace_sum / (n_antennas * inputs.len()) as f64,
        };
        if !(coefficient > 0.0 && coefficient.is_finite()) {
            return Err(Error::domain(format!("label coefficient {coefficient} must be positive")));
        }
        for l in &mut labels {
            l.0.iter_mut().for_each(|v| *v /= coefficient);
        }
        Ok(LcnetDataset { inputs, labels, coefficient, n_antennas })
    }

    /// Scales precomputed `raw` labels, like [`LcnetDataset::generate`].
    pub fn from_raw(inputs: Vec<(UserPosition, f64)>, raw: &[CovMatrix], coefficient: Option<f64>) -> Result<Self> {
        if inputs.len() != raw.len() {
            return Err(Error::Dimension { expected: inputs.len(), got: raw.len() });
        }
        let first = raw.first().ok_or(Error::Empty("labels"))?;
        let n_antennas = first.dim();
        let (scaled, coefficient) = match coefficient {
            None => label_scale(raw)?,
            Some(c) if c > 0.0 => (raw.iter().map(|r| r.scaled(1.0 / c)).collect(), c),
            Some(c) => return Err(Error::domain(format!("label coefficient {c} must be positive"))),
        };
        Ok(LcnetDataset { inputs, labels: scaled.iter().map(pack_cov).collect(), coefficient, n_antennas })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn physical_label(&self, i: usize) -> Result<CovMatrix> {
        Ok(unpack_cov(&self.labels[i])?.scaled(self.coefficient))
    }

    pub fn head(&self, n: usize) -> LcnetDataset {
        let n = n.min(self.len());
        LcnetDataset {
            inputs: self.inputs[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            coefficient: self.coefficient,
            n_antennas: self.n_antennas,
        }
    }

    pub fn samples(&self) -> Result<Samples> {
        let width = self.n_antennas * self.n_antennas;
        let features = DMatrix::from_fn(3, self.len(), |i, j| {
            let (p, v) = self.inputs[j];
            [p.x, p.y, v][i]
        });
        let labels = DMatrix::from_fn(width, self.len(), |i, j| self.labels[j].0[i]);
        Samples::new(features, labels)
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        write_meta(
            &mut w,
            "lcnet",
            &[
                ("n_antennas", self.n_antennas.to_string()),
                ("coefficient", self.coefficient.to_string()),
                ("rows", self.len().to_string()),
            ],
        )?;
        let mut wtr = csv::Writer::from_writer(w);
        let width = self.n_antennas * self.n_antennas;
        let mut header = vec!["x".to_string(), "y".to_string(), "speed".to_string()];
        header.extend((0..width).map(|k| format!("o{k}")));
        wtr.write_record(&header)?;
        for ((p, v), l) in self.inputs.iter().zip(&self.labels) {
            let mut rec = vec![p.x.to_string(), p.y.to_string(), v.to_string()];
            rec.extend(l.0.iter().map(f64::to_string));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let meta = read_meta(&mut r, "lcnet")?;
        let n_antennas: usize = meta_value(&meta, "n_antennas")?;
        let coefficient: f64 = meta_value(&meta, "coefficient")?;
        let rows: usize = meta_value(&meta, "rows")?;
        let width = 3 + n_antennas * n_antennas;
        let mut inputs = Vec::with_capacity(rows);
        let mut labels = Vec::with_capacity(rows);
        for (i, rec) in csv::Reader::from_reader(r).records().enumerate() {
            let v = parse_row(&rec?, width, i)?;
            inputs.push((UserPosition::new(v[0], v[1]), v[2]));
            labels.push(PackedCov(v[3..].to_vec()));
        }
        if inputs.len() != rows {
            return Err(Error::Parse(format!("expected {rows} rows, found {}", inputs.len())));
        }
        Ok(LcnetDataset { inputs, labels, coefficient, n_antennas })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(BufWriter::new(fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(fs::File::open(path)?)
    }
}

/// Labelled channels for the channel-to-location network.
#[derive(Debug, Clone, PartialEq)]
pub struct LenetDataset {
    pub positions: Vec<UserPosition>,
    pub channels: Vec<Channel>,
    /// Input normalization: RMS channel amplitude per antenna.
    pub zeta: f64,
    /// Variance of the complex noise added to training inputs.
    pub noise_var: f64,
    /// Whether `channels` already carry `CN(0, noise_var·I)` noise.
    pub noisy: bool,
}

impl LenetDataset {
    /// `n` uniform locations. Without `norm`, `ζ² = E‖h‖²/N_B` and the noise
    /// variance `noise_ratio·ζ²` come from this set; otherwise they are reused.
    #[allow(clippy::too_many_arguments)]
    pub fn generate(
        array: &ArrayConfig,
        scene: &Scene,
        n: usize,
        noise_ratio: f64,
        norm: Option<(f64, f64)>,
        seed: u64,
        label: &str,
        exec: Exec,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("locations"));
        }
        let positions = uniform_positions(&scene.plane_bounds, n, seed, label);
        let channels = exec.try_map(n, |i| channel_map(array, scene, positions[i]))?;
        let (zeta, noise_var) = match norm {
            Some(z) => z,
            None => {
                let mean = channels.iter().map(Channel::norm_sqr).sum::<f64>() / (n * array.n_antennas()) as f64;
                (mean.sqrt(), noise_ratio * mean)
            }
        };
        if !(zeta > 0.0) {
            return Err(Error::domain("channels carry no energy"));
        }
        Ok(LenetDataset { positions, channels, zeta, noise_var, noisy: false })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn n_antennas(&self) -> usize {
        self.channels.first().map_or(0, Channel::len)
    }

    pub fn head(&self, n: usize) -> LenetDataset {
        let n = n.min(self.len());
        LenetDataset {
            positions: self.positions[..n].to_vec(),
            channels: self.channels[..n].to_vec(),
            ..*self
        }
    }

    pub fn samples(&self) -> Result<Samples> {
        let cols = self.channels.iter().map(|h| lenet_features(h, self.zeta)).collect::<Result<Vec<_>>>()?;
        let width = 2 * self.n_antennas();
        let features = DMatrix::from_fn(width, cols.len(), |i, j| cols[j][i]);
        let labels = DMatrix::from_fn(2, self.len(), |i, j| if i == 0 { self.positions[j].x } else { self.positions[j].y });
        Samples::new(features, labels)
    }

    /// Copy with every channel corrupted once by `CN(0, noise_var·I)` noise
    /// drawn from `seed`.
    pub fn with_training_noise(&self, seed: u64) -> Result<LenetDataset> {
        if self.noisy {
            return Err(Error::domain("dataset already carries training noise"));
        }
        let sd = Complex64::new(self.noise_var.sqrt(), 0.0);
        let mut r = rng::stream(seed, "lenet-augment", 0);
        let channels = self
            .channels
            .iter()
            .map(|h| Channel::new(h.as_vector() + unit_noise(h.len(), &mut r) * sd))
            .collect::<Result<Vec<_>>>()?;
        Ok(LenetDataset { channels, noisy: true, positions: self.positions.clone(), ..*self })
    }

    pub fn pairs(&self) -> Vec<(Channel, UserPosition)> {
        self.channels.iter().cloned().zip(self.positions.iter().copied()).collect()
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let n_b = self.n_antennas();
        write_meta(
            &mut w,
            "lenet",
            &[
                ("n_antennas", n_b.to_string()),
                ("zeta", self.zeta.to_string()),
                ("noise_var", self.noise_var.to_string()),
                ("noisy", u8::from(self.noisy).to_string()),
                ("rows", self.len().to_string()),
            ],
        )?;
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["x".to_string(), "y".to_string()];
        header.extend((0..n_b).map(|k| format!("re{k}")));
        header.extend((0..n_b).map(|k| format!("im{k}")));
        wtr.write_record(&header)?;
        for (p, h) in self.positions.iter().zip(&self.channels) {
            let mut rec = vec![p.x.to_string(), p.y.to_string()];
            rec.extend(h.as_vector().iter().map(|z| z.re.to_string()));
            rec.extend(h.as_vector().iter().map(|z| z.im.to_string()));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let meta = read_meta(&mut r, "lenet")?;
        let n_b: usize = meta_value(&meta, "n_antennas")?;
        let zeta = meta_value(&meta, "zeta")?;
        let noise_var = meta_value(&meta, "noise_var")?;
        let noisy = meta_value::<u8>(&meta, "noisy")? == 1;
        let rows: usize = meta_value(&meta, "rows")?;
        let mut positions = Vec::with_capacity(rows);
        let mut channels = Vec::with_capacity(rows);
        for (i, rec) in csv::Reader::from_reader(r).records().enumerate() {
            let v = parse_row(&rec?, 2 + 2 * n_b, i)?;
            positions.push(UserPosition::new(v[0], v[1]));
            channels.push(Channel::from_vec((0..n_b).map(|k| Complex64::new(v[2 + k], v[2 + n_b + k])).collect())?);
        }
        if positions.len() != rows {
            return Err(Error::Parse(format!("expected {rows} rows, found {}", positions.len())));
        }
        Ok(LenetDataset { positions, channels, zeta, noise_var, noisy })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(BufWriter::new(fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(fs::File::open(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Grid;

    fn cache() -> GridCache {
        let scene = Scene::default();
        GridCache::build(&ArrayConfig::default(), &scene, Grid::square(scene.plane_bounds, 80).unwrap()).unwrap()
    }

    #[test]
    fn lcnet_round_trip_and_scaling() {
        let c = cache();
        let inputs = lcnet_inputs(&c.grid.bounds, 4, 2, (2.0, 10.0), 3);
        assert_eq!(inputs.len(), 8);
        assert_eq!(inputs[0].0, inputs[1].0);
        let raw = lcnet_labels(&c, &FrameTiming::default(), &inputs, Exec::default()).unwrap();
        let ds = LcnetDataset::from_raw(inputs.clone(), &raw, None).unwrap();
        let generated = LcnetDataset::generate(&c, &FrameTiming::default(), inputs, None, Exec::default()).unwrap();
        assert!((generated.coefficient / ds.coefficient - 1.0).abs() < 1e-12);
        for (g, l) in generated.labels.iter().zip(&ds.labels) {
            assert!(g.0.iter().zip(&l.0).all(|(a, b)| (a - b).abs() <= 1e-12 * b.abs().max(1e-3)));
        }
        let total: f64 = raw.iter().map(CovMatrix::trace).sum();
        assert!((ds.coefficient - total / (12.0 * 8.0)).abs() < 1e-15 * ds.coefficient.max(1e-300) * 10.0);
        for (i, r) in raw.iter().enumerate() {
            assert!((ds.physical_label(i).unwrap().matrix() - r.matrix()).norm() < 1e-12 * r.matrix().norm());
        }
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        assert!(buf.starts_with(b"#ccmlab-dataset v1 kind=lcnet n_antennas=12 coefficient="));
        assert_eq!(LcnetDataset::read_csv(buf.as_slice()).unwrap(), ds);
        let s = ds.samples().unwrap();
        assert_eq!((s.features.nrows(), s.labels.nrows(), s.len()), (3, 144, 8));
    }

    #[test]
    fn lenet_round_trip_and_noise_level() {
        let scene = Scene::default();
        let ds = LenetDataset::generate(&ArrayConfig::default(), &scene, 50, 1e-2, None, 4, "lenet-location", Exec::default()).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        assert_eq!(LenetDataset::read_csv(buf.as_slice()).unwrap(), ds);
        let mean: f64 = ds.channels.iter().map(Channel::norm_sqr).sum::<f64>() / 50.0;
        assert!((12.0 * ds.noise_var / mean - 1e-2).abs() < 1e-12);
        let clean = ds.samples().unwrap();
        let noisy_ds = ds.with_training_noise(1).unwrap();
        let noisy = noisy_ds.samples().unwrap();
        assert_eq!(clean.labels, noisy.labels);
        assert_ne!(clean.features, noisy.features);
        assert_eq!(noisy_ds, ds.with_training_noise(1).unwrap());
        assert!(noisy_ds.with_training_noise(1).is_err());
        let mut buf = Vec::new();
        noisy_ds.write_csv(&mut buf).unwrap();
        assert_eq!(LenetDataset::read_csv(buf.as_slice()).unwrap(), noisy_ds);
        // empirical noise power matches the configured variance
        let power: f64 = noisy_ds.channels.iter().zip(&ds.channels).map(|(a, b)| (a.as_vector() - b.as_vector()).norm_squared()).sum::<f64>()
            / (50.0 * 12.0);
        assert!((power / ds.noise_var - 1.0).abs() < 0.15, "{power} vs {}", ds.noise_var);
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let scene = Scene::default();
        let ds = LenetDataset::generate(&ArrayConfig::default(), &scene, 3, 1e-2, None, 4, "x", Exec::default()).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        assert!(matches!(LcnetDataset::read_csv(buf.as_slice()), Err(Error::Parse(_))));
        assert!(LenetDataset::read_csv(&b"x,y\n1,2\n"[..]).is_err());
    }
}
