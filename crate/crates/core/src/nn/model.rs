//! Dense feedforward networks with optional input branches and a sigmoid gate.
//!
//! A plain model is a single stack of dense layers (the trunk). A fusion model
//! first runs each input slice through its own branch stack, concatenates the
//! branch outputs into `c`, passes `c` through the gate stack to get weights
//! `g`, and feeds `c ⊙ g` to the trunk.
//!
//! Batches are matrices with one sample per column. Every layer lives in one
//! flat list ordered branches, gate, trunk; gradients and optimizer moments
//! use the same order.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Linear,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Linear => z,
        }
    }

    /// Derivative expressed through the activation output.
    /// `apply(z + d) - apply(z)` without cancellation.
    fn difference(self, z: f64, d: f64) -> f64 {
        match self {
            Activation::Relu => match (z > 0.0, z + d > 0.0) {
                (true, true) => d,
                (false, false) => 0.0,
                _ => (z + d).max(0.0) - z.max(0.0),
            },
            // s(a) - s(b) = -s(a) s(-b) expm1(-(a - b))
            Activation::Sigmoid => -self.apply(z + d) * self.apply(-z) * (-d).exp_m1(),
            Activation::Linear => d,
        }
    }

    fn derivative_at_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(input: usize, output: usize, activation: Activation) -> Self {
        LayerSpec { input, output, activation }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSpec {
    /// Number of consecutive input features this branch consumes.
    pub width: usize,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub branches: Vec<BranchSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gate: Vec<LayerSpec>,
    pub trunk: Vec<LayerSpec>,
}

/// Builds a chain of layer specs from a list of widths.
pub fn chain(widths: &[usize], hidden: Activation, last: Activation) -> Vec<LayerSpec> {
    let n = widths.len().saturating_sub(1);
    (0..n)
        .map(|k| LayerSpec::new(widths[k], widths[k + 1], if k + 1 == n { last } else { hidden }))
        .collect()
}

fn check_chain(name: &str, layers: &[LayerSpec], input: usize) -> Result<usize> {
    let mut width = input;
    for (k, l) in layers.iter().enumerate() {
        if l.input != width || l.output == 0 {
            return Err(Error::config(format!(
                "{name} layer {k}: expects input {} but receives {width}",
                l.input
            )));
        }
        width = l.output;
    }
    Ok(width)
}

impl Architecture {
    pub fn plain(layers: Vec<LayerSpec>) -> Self {
        let input = layers.first().map_or(0, |l| l.input);
        Architecture { input, branches: Vec::new(), gate: Vec::new(), trunk: layers }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.trunk.is_empty() {
            return Err(Error::config("architecture needs a nonzero input and a trunk"));
        }
        let trunk_in = if self.branches.is_empty() {
            if !self.gate.is_empty() {
                return Err(Error::config("a gate requires input branches"));
            }
            self.input
        } else {
            let mut consumed = 0;
            let mut concat = 0;
            for (b, br) in self.branches.iter().enumerate() {
                if br.layers.is_empty() {
                    return Err(Error::config(format!("branch {b} has no layers")));
                }
                consumed += br.width;
                concat += check_chain(&format!("branch {b}"), &br.layers, br.width)?;
            }
            if consumed != self.input {
                return Err(Error::config(format!(
                    "branches consume {consumed} features but the input has {}",
                    self.input
                )));
            }
            if !self.gate.is_empty() && check_chain("gate", &self.gate, concat)? != concat {
                return Err(Error::config("gate output width must equal the concatenation width"));
            }
            concat
        };
        check_chain("trunk", &self.trunk, trunk_in)?;
        Ok(())
    }

    pub fn output(&self) -> usize {
        self.trunk.last().map_or(0, |l| l.output)
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut out: Vec<LayerSpec> = self.branches.iter().flat_map(|b| b.layers.iter().copied()).collect();
        out.extend(self.gate.iter().copied());
        out.extend(self.trunk.iter().copied());
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_specs().iter().map(|l| l.output * (l.input + 1)).sum()
    }
}

/// Layer index ranges of each stack in the flat layer list.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Topology {
    /// (layer range, input row offset, input width)
    pub branches: Vec<(Range<usize>, usize, usize)>,
    pub gate: Range<usize>,
    pub trunk: Range<usize>,
}

impl Topology {
    fn of(arch: &Architecture) -> Self {
        let mut start = 0;
        let mut offset = 0;
        let mut branches = Vec::new();
        for b in &arch.branches {
            branches.push((start..start + b.layers.len(), offset, b.width));
            start += b.layers.len();
            offset += b.width;
        }
        let gate = start..start + arch.gate.len();
        let trunk = gate.end..gate.end + arch.trunk.len();
        Topology { branches, gate, trunk }
    }

    pub fn stack_of(&self, layer: usize) -> Stack {
        if let Some(b) = self.branches.iter().position(|(r, _, _)| r.contains(&layer)) {
            Stack::Branch(b)
        } else if self.gate.contains(&layer) {
            Stack::Gate
        } else {
            Stack::Trunk
        }
    }

    pub fn range(&self, stack: Stack) -> Range<usize> {
        match stack {
            Stack::Branch(b) => self.branches[b].0.clone(),
            Stack::Gate => self.gate.clone(),
            Stack::Trunk => self.trunk.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Stack {
    Branch(usize),
    Gate,
    Trunk,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// output × input
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn zeros(spec: LayerSpec) -> Self {
        Dense {
            w: DMatrix::zeros(spec.output, spec.input),
            b: DVector::zeros(spec.output),
            activation: spec.activation,
        }
    }

    /// Pre-activation `W a + b` for a batch.
    pub fn affine(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = &self.w * a;
        for mut col in z.column_iter_mut() {
            col += &self.b;
        }
        z
    }

    pub fn activate(&self, mut z: DMatrix<f64>) -> DMatrix<f64> {
        let act = self.activation;
        z.apply(|v| *v = act.apply(*v));
        z
    }
}

/// Per-feature affine map; `normalize(x) = (x - shift) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Affine {
    pub fn identity(n: usize) -> Self {
        Affine { shift: vec![0.0; n], scale: vec![1.0; n] }
    }

    /// Row means and standard deviations of a feature-by-sample matrix.
    pub fn fit(data: &DMatrix<f64>) -> Self {
        let n = data.ncols().max(1) as f64;
        let mut shift = Vec::with_capacity(data.nrows());
        let mut scale = Vec::with_capacity(data.nrows());
        for row in data.row_iter() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let sd = var.sqrt();
            shift.push(mean);
            scale.push(if sd > 0.0 && sd > 1e-12 * mean.abs() { sd } else { 1.0 });
        }
        Affine { shift, scale }
    }

    pub fn len(&self) -> usize {
        self.shift.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shift.is_empty()
    }

    pub fn normalize(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x.clone();
        for (i, mut row) in out.row_iter_mut().enumerate() {
            let (s, c) = (self.shift[i], self.scale[i]);
            row.apply(|v| *v = (*v - s) / c);
        }
        out
    }

    pub fn denormalize(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = y.clone();
        for (i, mut row) in out.row_iter_mut().enumerate() {
            let (s, c) = (self.shift[i], self.scale[i]);
            row.apply(|v| *v = *v * c + s);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub(crate) arch: Architecture,
    pub(crate) topo: Topology,
    pub layers: Vec<Dense>,
    pub input_norm: Affine,
    pub output_norm: Affine,
}

/// Activations recorded by a forward pass.
#[derive(Debug, Clone)]
pub(crate) struct Cache {
    /// Input fed to each layer.
    pub inputs: Vec<DMatrix<f64>>,
    pub z: Vec<DMatrix<f64>>,
    pub out: Vec<DMatrix<f64>>,
    /// Concatenated branch outputs (fusion models only).
    pub concat: Option<DMatrix<f64>>,
    pub output: DMatrix<f64>,
}

/// Gradient of one dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl LayerGrad {
    pub fn zeros_like(l: &Dense) -> Self {
        LayerGrad { w: DMatrix::zeros(l.w.nrows(), l.w.ncols()), b: DVector::zeros(l.b.len()) }
    }
}

pub(crate) fn add_grads(acc: &mut [LayerGrad], other: &[LayerGrad]) {
    for (a, o) in acc.iter_mut().zip(other) {
        a.w += &o.w;
        a.b += &o.b;
    }
}

impl MlpModel {
    /// All weights and biases zero, identity scalings.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let layers = arch.layer_specs().into_iter().map(Dense::zeros).collect();
        let topo = Topology::of(&arch);
        Ok(MlpModel {
            input_norm: Affine::identity(arch.input),
            output_norm: Affine::identity(arch.output()),
            arch,
            topo,
            layers,
        })
    }

    /// Uniform fan-in initialization: limit `sqrt(6/fan_in)` ahead of ReLU,
    /// `sqrt(3/fan_in)` otherwise; zero biases.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        let mut m = Self::zeros(arch)?;
        for l in m.layers.iter_mut() {
            let fan_in = l.w.ncols() as f64;
            let gain = if l.activation == Activation::Relu { 6.0 } else { 3.0 };
            let limit = (gain / fan_in).sqrt();
            l.w.apply(|v| *v = rng.random_range(-limit..limit));
        }
        Ok(m)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn input_width(&self) -> usize {
        self.arch.input
    }

    pub fn output_width(&self) -> usize {
        self.arch.output()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub(crate) fn with_layers(arch: Architecture, layers: Vec<Dense>, input_norm: Affine, output_norm: Affine) -> Result<Self> {
        arch.validate()?;
        let specs = arch.layer_specs();
        let shapes_ok = specs.len() == layers.len()
            && specs.iter().zip(&layers).all(|(s, l)| {
                l.w.nrows() == s.output && l.w.ncols() == s.input && l.b.len() == s.output && l.activation == s.activation
            });
        if !shapes_ok {
            return Err(Error::config("layer tensors do not match the architecture"));
        }
        if input_norm.len() != arch.input || output_norm.len() != arch.output() {
            return Err(Error::config("scaling widths do not match the architecture"));
        }
        if input_norm.scale.iter().chain(&output_norm.scale).any(|s| !(s.is_finite() && *s != 0.0)) {
            return Err(Error::config("scalings must be finite and nonzero"));
        }
        let topo = Topology::of(&arch);
        Ok(MlpModel { arch, topo, layers, input_norm, output_norm })
    }

    fn check_width(&self, rows: usize) -> Result<()> {
        if rows != self.arch.input {
            return Err(Error::Dimension { expected: self.arch.input, got: rows });
        }
        Ok(())
    }

    /// Physical-unit forward pass for one feature vector.
    pub fn forward(&self, features: &[f64]) -> Result<Vec<f64>> {
        let x = DMatrix::from_column_slice(features.len(), 1, features);
        Ok(self.forward_batch(&x)?.as_slice().to_vec())
    }

    /// Physical-unit forward pass over a feature-by-sample batch.
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_width(x.nrows())?;
        let y = self.forward_normalized(&self.input_norm.normalize(x));
        Ok(self.output_norm.denormalize(&y))
    }

    pub(crate) fn forward_normalized(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward_cached(x).output
    }

    pub(crate) fn forward_cached(&self, x: &DMatrix<f64>) -> Cache {
        let n = self.layers.len();
        let mut cache = Cache {
            inputs: Vec::with_capacity(n),
            z: Vec::with_capacity(n),
            out: Vec::with_capacity(n),
            concat: None,
            output: DMatrix::zeros(0, 0),
        };
        let trunk_input = if self.topo.branches.is_empty() {
            x.clone()
        } else {
            let parts: Vec<DMatrix<f64>> = self
                .topo
                .branches
                .iter()
                .map(|(range, offset, width)| self.run_cached(range.clone(), x.rows(*offset, *width).into_owned(), &mut cache))
                .collect();
            let c = vstack(&parts);
            let u = if self.topo.gate.is_empty() {
                c.clone()
            } else {
                let g = self.run_cached(self.topo.gate.clone(), c.clone(), &mut cache);
                c.component_mul(&g)
            };
            cache.concat = Some(c);
            u
        };
        cache.output = self.run_cached(self.topo.trunk.clone(), trunk_input, &mut cache);
        cache
    }

    fn run_cached(&self, range: Range<usize>, mut a: DMatrix<f64>, cache: &mut Cache) -> DMatrix<f64> {
        for l in range {
            let layer = &self.layers[l];
            let z = layer.affine(&a);
            let out = layer.activate(z.clone());
            cache.inputs.push(a);
            cache.z.push(z);
            cache.out.push(out.clone());
            a = out;
        }
        a
    }

    /// Backpropagates `dL/d(output)` through a cached pass.
    pub(crate) fn backward(&self, cache: &Cache, d_output: DMatrix<f64>) -> Vec<LayerGrad> {
        let mut grads: Vec<LayerGrad> = self.layers.iter().map(LayerGrad::zeros_like).collect();
        let d_u = self.back_stack(self.topo.trunk.clone(), cache, d_output, &mut grads, !self.topo.branches.is_empty());
        if let (Some(d_u), Some(c)) = (d_u, &cache.concat) {
            let d_c = if self.topo.gate.is_empty() {
                d_u
            } else {
                let g = &cache.out[self.topo.gate.end - 1];
                let d_g = d_u.component_mul(c);
                let via_gate = self
                    .back_stack(self.topo.gate.clone(), cache, d_g, &mut grads, true)
                    .expect("gate input gradient requested");
                d_u.component_mul(g) + via_gate
            };
            let mut row = 0;
            for (range, _, _) in &self.topo.branches {
                let w = self.layers[range.end - 1].w.nrows();
                let d = d_c.rows(row, w).into_owned();
                self.back_stack(range.clone(), cache, d, &mut grads, false);
                row += w;
            }
        }
        grads
    }

    fn back_stack(
        &self,
        range: Range<usize>,
        cache: &Cache,
        mut d: DMatrix<f64>,
        grads: &mut [LayerGrad],
        want_input_grad: bool,
    ) -> Option<DMatrix<f64>> {
        let start = range.start;
        for l in range.rev() {
            let layer = &self.layers[l];
            let act = layer.activation;
            d.zip_apply(&cache.out[l], |dv, a| *dv *= act.derivative_at_output(a));
            grads[l].w = &d * cache.inputs[l].transpose();
            grads[l].b = d.column_sum();
            if l == start && !want_input_grad {
                return None;
            }
            d = layer.w.tr_mul(&d);
        }
        Some(d)
    }

    /// Output change (normalized space) when layer `layer`'s pre-activation
    /// of the single-sample `base` pass moves by each column of `dz`.
    ///
    /// Changes are propagated as differences (`dz' = W·da`) rather than by
    /// recomputing and subtracting full activations, so their roundoff scales
    /// with the perturbation. Also flags columns whose ReLU on/off pattern
    /// differs from the base pass anywhere downstream.
    pub(crate) fn perturbed_delta(&self, base: &Cache, layer: usize, dz: DMatrix<f64>) -> (DMatrix<f64>, Vec<bool>) {
        let k = dz.ncols();
        let mut kinks = vec![false; k];
        let stack = self.topo.stack_of(layer);
        let range = self.topo.range(stack);
        let da = self.resume_delta(layer..range.end, dz, base, &mut kinks);
        let broadcast = |m: &DMatrix<f64>| DMatrix::from_fn(m.nrows(), k, |i, _| m[(i, 0)]);
        let du = match stack {
            Stack::Trunk => return (da, kinks),
            Stack::Gate => broadcast(base.concat.as_ref().expect("fusion cache")).component_mul(&da),
            Stack::Branch(b) => {
                let mut dc = DMatrix::zeros(base.concat.as_ref().expect("fusion cache").nrows(), k);
                let row: usize = self.topo.branches[..b].iter().map(|(r, _, _)| self.layers[r.end - 1].w.nrows()).sum();
                dc.rows_mut(row, da.nrows()).copy_from(&da);
                if self.topo.gate.is_empty() {
                    dc
                } else {
                    let c0 = broadcast(base.concat.as_ref().expect("fusion cache"));
                    let g0 = broadcast(&base.out[self.topo.gate.end - 1]);
                    let gz = &self.layers[self.topo.gate.start].w * &dc;
                    let dg = self.resume_delta(self.topo.gate.clone(), gz, base, &mut kinks);
                    dc.component_mul(&g0) + c0.component_mul(&dg) + dc.component_mul(&dg)
                }
            }
        };
        let tz = &self.layers[self.topo.trunk.start].w * &du;
        (self.resume_delta(self.topo.trunk.clone(), tz, base, &mut kinks), kinks)
    }

    /// Carries pre-activation changes of `range`'s first layer to its output.
    fn resume_delta(&self, range: Range<usize>, mut dz: DMatrix<f64>, base: &Cache, kinks: &mut [bool]) -> DMatrix<f64> {
        let end = range.end;
        let mut l = range.start;
        loop {
            let layer = &self.layers[l];
            let z0 = &base.z[l];
            if layer.activation == Activation::Relu {
                for (col, flag) in dz.column_iter().zip(kinks.iter_mut()) {
                    if !*flag {
                        *flag = col.iter().zip(z0.iter()).any(|(d, z)| (z + d > 0.0) != (*z > 0.0));
                    }
                }
            }
            let act = layer.activation;
            for mut col in dz.column_iter_mut() {
                for (d, &z) in col.iter_mut().zip(z0.iter()) {
                    *d = act.difference(z, *d);
                }
            }
            l += 1;
            if l == end {
                return dz;
            }
            dz = &self.layers[l].w * &dz;
        }
    }
}

pub(crate) fn vstack(parts: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = parts.iter().map(|p| p.nrows()).sum();
    let cols = parts.first().map_or(0, |p| p.ncols());
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for p in parts {
        out.rows_mut(r, p.nrows()).copy_from(p);
        r += p.nrows();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn fusion_arch(gated: bool) -> Architecture {
        Architecture {
            input: 3,
            branches: vec![
                BranchSpec { width: 2, layers: chain(&[2, 4, 5], Activation::Relu, Activation::Relu) },
                BranchSpec { width: 1, layers: chain(&[1, 3], Activation::Relu, Activation::Relu) },
            ],
            gate: if gated { chain(&[8, 8, 8], Activation::Relu, Activation::Sigmoid) } else { vec![] },
            trunk: chain(&[8, 6, 4], Activation::Relu, Activation::Linear),
        }
    }

    #[test]
    fn zero_model_outputs_zero() {
        let m = MlpModel::zeros(fusion_arch(true)).unwrap();
        assert_eq!(m.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn single_linear_layer_is_affine() {
        let mut m = MlpModel::zeros(Architecture::plain(vec![LayerSpec::new(2, 2, Activation::Linear)])).unwrap();
        m.layers[0].w = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -3.0, 0.5]);
        m.layers[0].b = DVector::from_vec(vec![0.25, -1.0]);
        assert_eq!(m.forward(&[2.0, 4.0]).unwrap(), vec![10.25, -5.0]);
    }

    #[test]
    fn saturated_gate_matches_ungated_model() {
        let mut r = rng::stream(7, "test", 0);
        let gated = MlpModel::init(fusion_arch(true), &mut r).unwrap();
        let mut ungated = MlpModel::zeros(fusion_arch(false)).unwrap();
        // copy branches and trunk; force the sigmoid to one with a large bias
        let mut forced = gated.clone();
        let last_gate = forced.topo.gate.end - 1;
        forced.layers[last_gate].w.fill(0.0);
        forced.layers[last_gate].b.fill(60.0);
        let n_branch = forced.topo.gate.start;
        for l in 0..n_branch {
            ungated.layers[l] = gated.layers[l].clone();
        }
        for (t, l) in forced.topo.trunk.clone().enumerate() {
            ungated.layers[ungated.topo.trunk.start + t] = gated.layers[l].clone();
        }
        let x = [0.3, -0.7, 1.1];
        let a = forced.forward(&x).unwrap();
        let b = ungated.forward(&x).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12 * (1.0 + v.abs()));
        }
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let m = MlpModel::zeros(fusion_arch(true)).unwrap();
        assert!(matches!(m.forward(&[1.0]), Err(Error::Dimension { expected: 3, got: 1 })));
    }

    #[test]
    fn invalid_architectures_rejected() {
        let mut a = fusion_arch(true);
        a.gate = chain(&[8, 7], Activation::Relu, Activation::Sigmoid);
        assert!(a.validate().is_err());
        let mut a = fusion_arch(true);
        a.branches[0].width = 1;
        assert!(a.validate().is_err());
        let a = Architecture::plain(vec![LayerSpec::new(2, 3, Activation::Relu), LayerSpec::new(4, 1, Activation::Linear)]);
        assert!(a.validate().is_err());
    }

    #[test]
    fn perturbed_delta_matches_full_pass() {
        let mut r = rng::stream(3, "test", 0);
        let m = MlpModel::init(fusion_arch(true), &mut r).unwrap();
        let x = DMatrix::from_column_slice(3, 1, &[0.2, 0.9, -0.4]);
        let base = m.forward_cached(&x);
        for l in 0..m.layers.len() {
            let zero = DMatrix::zeros(base.z[l].nrows(), 1);
            let (d, kinks) = m.perturbed_delta(&base, l, zero);
            assert!(!kinks[0] && d.iter().all(|v| *v == 0.0), "layer {l}");
            // shift a bias and compare with a full forward pass
            let mut shifted = m.clone();
            shifted.layers[l].b[0] += 1e-3;
            let mut dz = DMatrix::zeros(base.z[l].nrows(), 1);
            dz[0] = 1e-3;
            let (d, _) = m.perturbed_delta(&base, l, dz);
            let full = shifted.forward_cached(&x).output - &base.output;
            assert!((d - full).abs().max() < 1e-12, "layer {l}");
        }
    }

    #[test]
    fn activation_difference_matches_subtraction() {
        for act in [Activation::Relu, Activation::Sigmoid, Activation::Linear] {
            for (z, d) in [(0.3, 1e-3), (-2.0, 0.5), (40.0, -1e-2), (-40.0, 2e-2), (0.1, -0.2)] {
                // the direct subtraction itself carries roundoff of order ulp(z)
                let direct = act.apply(z + d) - act.apply(z);
                assert!((act.difference(z, d) - direct).abs() < 1e-14 * z.abs().max(1.0), "{act:?} {z} {d}");
            }
        }
    }

    #[test]
    fn batch_forward_matches_columns() {
        let mut r = rng::stream(5, "test", 0);
        let m = MlpModel::init(fusion_arch(true), &mut r).unwrap();
        let x = DMatrix::from_fn(3, 4, |i, j| (i as f64 - 1.0) * 0.3 + j as f64 * 0.1);
        let y = m.forward_batch(&x).unwrap();
        for j in 0..4 {
            let col: Vec<f64> = x.column(j).iter().copied().collect();
            let single = m.forward(&col).unwrap();
            for i in 0..4 {
                assert!((y[(i, j)] - single[i]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn affine_round_trip() {
        let x = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 5.0, 5.0, 5.0]);
        let a = Affine::fit(&x);
        assert_eq!(a.scale[1], 1.0);
        let back = a.denormalize(&a.normalize(&x));
        assert!((back - x).abs().max() < 1e-14);
    }
}
