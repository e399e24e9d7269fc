//! Line-oriented text checkpoints.
//!
//! ```text
//! mlpckpt 1
//! arch {"input":24,"trunk":[...]}
//! tensor input.shift 24 <values>
//! tensor input.scale 24 <values>
//! tensor output.shift 2 <values>
//! tensor output.scale 2 <values>
//! tensor layer0.w 1200 <values>      (column-major, output × input)
//! tensor layer0.b 50 <values>
//! ...
//! ```
//!
//! Values use Rust's shortest round-trip decimal form, so a save/load cycle
//! is bit-exact on every platform. Optimizer state goes to a separate
//! `adamstate 1` file with the same tensor lines.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::model::{Affine, Architecture, Dense, LayerGrad, MlpModel};
use super::train::TrainState;
use crate::{Error, Result};

const MODEL_HEADER: &str = "mlpckpt 1";
const STATE_HEADER: &str = "adamstate 1";

fn write_tensor(w: &mut impl Write, name: &str, values: &[f64]) -> Result<()> {
    write!(w, "tensor {name} {}", values.len())?;
    for v in values {
        write!(w, " {v}")?;
    }
    writeln!(w)?;
    Ok(())
}

struct Lines<R> {
    inner: std::io::Lines<R>,
    number: usize,
}

impl<R: BufRead> Lines<R> {
    fn new(r: R) -> Self {
        Lines { inner: r.lines(), number: 0 }
    }

    fn next_line(&mut self) -> Result<String> {
        self.number += 1;
        match self.inner.next() {
            Some(line) => Ok(line?),
            None => Err(Error::Parse(format!("unexpected end of file at line {}", self.number))),
        }
    }

    fn err(&self, msg: impl std::fmt::Display) -> Error {
        Error::Parse(format!("line {}: {msg}", self.number))
    }

    fn keyed(&mut self, key: &str) -> Result<String> {
        let line = self.next_line()?;
        match line.split_once(' ') {
            Some((k, rest)) if k == key => Ok(rest.to_string()),
            _ => Err(self.err(format!("expected `{key}`"))),
        }
    }

    fn scalar<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let s = self.keyed(key)?;
        s.trim().parse().map_err(|_| self.err(format!("bad value for `{key}`")))
    }

    fn tensor(&mut self, name: &str, len: usize) -> Result<Vec<f64>> {
        let rest = self.keyed("tensor")?;
        let mut parts = rest.split_ascii_whitespace();
        if parts.next() != Some(name) {
            return Err(self.err(format!("expected tensor `{name}`")));
        }
        let n: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(|| self.err("missing tensor length"))?;
        if n != len {
            return Err(self.err(format!("tensor `{name}` has length {n}, expected {len}")));
        }
        let values = parts
            .map(|s| s.parse::<f64>().map_err(|_| self.err(format!("bad number `{s}`"))))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != len {
            return Err(self.err(format!("tensor `{name}` lists {} values, expected {len}", values.len())));
        }
        Ok(values)
    }
}

pub fn write_model(model: &MlpModel, mut w: impl Write) -> Result<()> {
    writeln!(w, "{MODEL_HEADER}")?;
    writeln!(w, "arch {}", serde_json::to_string(model.architecture())?)?;
    write_tensor(&mut w, "input.shift", &model.input_norm.shift)?;
    write_tensor(&mut w, "input.scale", &model.input_norm.scale)?;
    write_tensor(&mut w, "output.shift", &model.output_norm.shift)?;
    write_tensor(&mut w, "output.scale", &model.output_norm.scale)?;
    for (k, l) in model.layers.iter().enumerate() {
        write_tensor(&mut w, &format!("layer{k}.w"), l.w.as_slice())?;
        write_tensor(&mut w, &format!("layer{k}.b"), l.b.as_slice())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_model(r: impl BufRead) -> Result<MlpModel> {
    let mut lines = Lines::new(r);
    if lines.next_line()?.trim_end() != MODEL_HEADER {
        return Err(lines.err(format!("missing `{MODEL_HEADER}` header")));
    }
    let arch: Architecture = serde_json::from_str(&lines.keyed("arch")?)?;
    arch.validate()?;
    let (n_in, n_out) = (arch.input, arch.output());
    let input_norm = Affine { shift: lines.tensor("input.shift", n_in)?, scale: lines.tensor("input.scale", n_in)? };
    let output_norm = Affine { shift: lines.tensor("output.shift", n_out)?, scale: lines.tensor("output.scale", n_out)? };
    let mut layers = Vec::new();
    for (k, spec) in arch.layer_specs().into_iter().enumerate() {
        let w = lines.tensor(&format!("layer{k}.w"), spec.output * spec.input)?;
        let b = lines.tensor(&format!("layer{k}.b"), spec.output)?;
        layers.push(Dense {
            w: DMatrix::from_vec(spec.output, spec.input, w),
            b: DVector::from_vec(b),
            activation: spec.activation,
        });
    }
    MlpModel::with_layers(arch, layers, input_norm, output_norm)
}

pub fn save_model(model: &MlpModel, path: &Path) -> Result<()> {
    write_model(model, BufWriter::new(fs::File::create(path)?))
}

pub fn load_model(path: &Path) -> Result<MlpModel> {
    read_model(BufReader::new(fs::File::open(path)?))
}

pub fn write_state(state: &TrainState, mut w: impl Write) -> Result<()> {
    writeln!(w, "{STATE_HEADER}")?;
    writeln!(w, "step {}", state.step)?;
    writeln!(w, "epoch {}", state.epoch)?;
    writeln!(w, "learning_rate {}", state.learning_rate)?;
    writeln!(w, "best_loss {}", state.best_loss)?;
    writeln!(w, "since_best {}", state.since_best)?;
    write_tensor(&mut w, "loss_trace", &state.loss_trace)?;
    for (prefix, moments) in [("m", &state.m), ("v", &state.v)] {
        for (k, g) in moments.iter().enumerate() {
            write_tensor(&mut w, &format!("{prefix}.layer{k}.w"), g.w.as_slice())?;
            write_tensor(&mut w, &format!("{prefix}.layer{k}.b"), g.b.as_slice())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads optimizer state; `model` supplies the tensor shapes.
pub fn read_state(model: &MlpModel, r: impl BufRead) -> Result<TrainState> {
    let mut lines = Lines::new(r);
    if lines.next_line()?.trim_end() != STATE_HEADER {
        return Err(lines.err(format!("missing `{STATE_HEADER}` header")));
    }
    let step = lines.scalar("step")?;
    let epoch: usize = lines.scalar("epoch")?;
    let learning_rate = lines.scalar("learning_rate")?;
    let best_loss = lines.scalar("best_loss")?;
    let since_best = lines.scalar("since_best")?;
    let loss_trace = lines.tensor("loss_trace", epoch)?;
    let mut read_moments = |prefix: &str| -> Result<Vec<LayerGrad>> {
        model
            .layers
            .iter()
            .enumerate()
            .map(|(k, l)| {
                let (r, c) = l.w.shape();
                let w = lines.tensor(&format!("{prefix}.layer{k}.w"), r * c)?;
                let b = lines.tensor(&format!("{prefix}.layer{k}.b"), r)?;
                Ok(LayerGrad { w: DMatrix::from_vec(r, c, w), b: DVector::from_vec(b) })
            })
            .collect()
    };
    let m = read_moments("m")?;
    let v = read_moments("v")?;
    Ok(TrainState { step, epoch, learning_rate, best_loss, since_best, loss_trace, m, v })
}

pub fn save_state(state: &TrainState, path: &Path) -> Result<()> {
    write_state(state, BufWriter::new(fs::File::create(path)?))
}

pub fn load_state(model: &MlpModel, path: &Path) -> Result<TrainState> {
    read_state(model, BufReader::new(fs::File::open(path)?))
}
