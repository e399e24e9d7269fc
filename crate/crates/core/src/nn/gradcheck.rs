//! Finite-difference verification of backpropagated gradients.
//!
//! Perturbing `W_ij` of a layer by `±ε` moves only pre-activation `z_i`, by
//! `±ε a_j`, so each central difference is evaluated by resuming the forward
//! pass from that layer, carrying output differences rather than full
//! activations. Many perturbations are batched into one resumed pass. When the perturbation provably leaves the forward
//! pass bit-identical (`a_j = 0`, or a ReLU unit that stays off either way)
//! the difference is exactly zero and no pass is needed.

use nalgebra::DMatrix;

use super::model::{Activation, MlpModel};
use super::train::Sample;
use crate::{Error, Result};

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const GRADIENT_FLOOR: f64 = 1e-7;

/// Perturbations per resumed pass (each uses two columns).
const BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameters whose difference was evaluated.
    pub checked: usize,
    /// Parameters skipped because a perturbation crossed a ReLU kink.
    pub skipped_kinks: usize,
    /// (layer, flat parameter index within the layer) of the worst entry.
    pub worst: Option<(usize, usize)>,
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADIENT_FLOOR)
}

/// Compares the analytic gradient of the squared-error loss on `sample`
/// against central differences for every parameter.
pub fn gradient_check(model: &MlpModel, sample: &Sample, epsilon: f64) -> Result<GradCheckReport> {
    if !(epsilon > 1e-8 && epsilon < 1e-3) {
        return Err(Error::domain(format!("epsilon {epsilon} outside (1e-8, 1e-3)")));
    }
    if sample.features.len() != model.input_width() {
        return Err(Error::Dimension { expected: model.input_width(), got: sample.features.len() });
    }
    if sample.label.len() != model.output_width() {
        return Err(Error::Dimension { expected: model.output_width(), got: sample.label.len() });
    }
    let x = model.input_norm.normalize(&DMatrix::from_column_slice(sample.features.len(), 1, &sample.features));
    let y = model.output_norm.normalize(&DMatrix::from_column_slice(sample.label.len(), 1, &sample.label));
    let d_out = y.nrows() as f64;
    let base = model.forward_cached(&x);
    let grads = model.backward(&base, (&base.output - &y) * (2.0 / d_out));
    // L(p0 + u) - L(p0 + w), expanded so the loss itself never cancels.
    let residual = &base.output - &y;
    let loss_diff = |delta: &DMatrix<f64>, up: usize, down: usize| {
        delta
            .column(up)
            .iter()
            .zip(delta.column(down).iter())
            .zip(residual.iter())
            .map(|((u, w), r)| (u - w) * (2.0 * r + u + w))
            .sum::<f64>()
            / d_out
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, skipped_kinks: 0, worst: None };
    let record = |report: &mut GradCheckReport, layer: usize, flat: usize, analytic: f64, numeric: f64| {
        let e = relative_error(analytic, numeric);
        report.checked += 1;
        if e > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(e);
            report.worst = Some((layer, flat));
        }
    };

    for (l, layer) in model.layers.iter().enumerate() {
        let (n_out, n_in) = layer.w.shape();
        let a = &base.inputs[l];
        let z0 = &base.z[l];
        let g = &grads[l];
        // (flat index, unit, delta, analytic)
        let mut pending: Vec<(usize, usize, f64, f64)> = Vec::new();
        for i in 0..n_out {
            let off = layer.activation == Activation::Relu && z0[i] <= 0.0;
            let mut consider = |flat: usize, delta: f64, analytic: f64, report: &mut GradCheckReport| {
                let (up, down) = (z0[i] + delta, z0[i] - delta);
                if delta == 0.0 || (off && up <= 0.0 && down <= 0.0) {
                    record(report, l, flat, analytic, 0.0);
                } else {
                    pending.push((flat, i, delta, analytic));
                }
            };
            for j in 0..n_in {
                consider(i + j * n_out, epsilon * a[j], g.w[(i, j)], &mut report);
            }
            consider(n_out * n_in + i, epsilon, g.b[i], &mut report);
        }
        for chunk in pending.chunks(BATCH) {
            let mut dz = DMatrix::zeros(n_out, 2 * chunk.len());
            for (c, &(_, i, delta, _)) in chunk.iter().enumerate() {
                dz[(i, 2 * c)] = delta;
                dz[(i, 2 * c + 1)] = -delta;
            }
            let (out, kinks) = model.perturbed_delta(&base, l, dz);
            for (c, &(flat, _, _, analytic)) in chunk.iter().enumerate() {
                if kinks[2 * c] || kinks[2 * c + 1] {
                    report.skipped_kinks += 1;
                    continue;
                }
                let numeric = loss_diff(&out, 2 * c, 2 * c + 1) / (2.0 * epsilon);
                record(&mut report, l, flat, analytic, numeric);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::{chain, Architecture, BranchSpec, LayerSpec};
    use crate::rng;
    use rand::Rng;

    fn sample(n_in: usize, n_out: usize, seed: u64) -> Sample {
        let mut r = rng::stream(seed, "sample", 0);
        Sample {
            features: (0..n_in).map(|_| r.random_range(-1.0..1.0)).collect(),
            label: (0..n_out).map(|_| r.random_range(-1.0..1.0)).collect(),
        }
    }

    /// Brute-force central differences through full forward passes.
    fn brute_force(model: &MlpModel, s: &Sample, eps: f64) -> Vec<Vec<f64>> {
        let loss = |m: &MlpModel| {
            let out = m.forward(&s.features).unwrap();
            out.iter().zip(&s.label).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / out.len() as f64
        };
        let mut all = Vec::new();
        for l in 0..model.layers.len() {
            let mut v = Vec::new();
            let nw = model.layers[l].w.len();
            for k in 0..nw + model.layers[l].b.len() {
                let mut p = model.clone();
                let mut q = model.clone();
                if k < nw {
                    p.layers[l].w.as_mut_slice()[k] += eps;
                    q.layers[l].w.as_mut_slice()[k] -= eps;
                } else {
                    p.layers[l].b[k - nw] += eps;
                    q.layers[l].b[k - nw] -= eps;
                }
                v.push((loss(&p) - loss(&q)) / (2.0 * eps));
            }
            all.push(v);
        }
        all
    }

    #[test]
    fn linear_model_is_exact() {
        let arch = Architecture::plain(vec![LayerSpec::new(4, 3, Activation::Linear)]);
        let m = MlpModel::init(arch, &mut rng::stream(1, "init", 0)).unwrap();
        let r = gradient_check(&m, &sample(4, 3, 1), 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.checked, 15);
    }

    #[test]
    fn relu_model_below_tolerance() {
        let arch = Architecture::plain(chain(&[5, 8, 8, 3], Activation::Relu, Activation::Linear));
        for seed in 0..5 {
            let m = MlpModel::init(arch.clone(), &mut rng::stream(seed, "init", 0)).unwrap();
            let r = gradient_check(&m, &sample(5, 3, seed), 1e-6).unwrap();
            assert!(r.max_rel_error < 1e-5, "{r:?}");
            assert_eq!(r.checked + r.skipped_kinks, m.parameter_count());
        }
    }

    #[test]
    fn gated_fusion_model_below_tolerance() {
        let arch = Architecture {
            input: 3,
            branches: vec![
                BranchSpec { width: 2, layers: chain(&[2, 6, 7], Activation::Relu, Activation::Relu) },
                BranchSpec { width: 1, layers: chain(&[1, 4, 5], Activation::Relu, Activation::Relu) },
            ],
            gate: chain(&[12, 12, 12], Activation::Relu, Activation::Sigmoid),
            trunk: chain(&[12, 10, 6], Activation::Relu, Activation::Linear),
        };
        let m = MlpModel::init(arch, &mut rng::stream(9, "init", 0)).unwrap();
        let r = gradient_check(&m, &sample(3, 6, 9), 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn shortcuts_agree_with_brute_force() {
        let arch = Architecture {
            input: 3,
            branches: vec![
                BranchSpec { width: 2, layers: chain(&[2, 5], Activation::Relu, Activation::Relu) },
                BranchSpec { width: 1, layers: chain(&[1, 3], Activation::Relu, Activation::Relu) },
            ],
            gate: chain(&[8, 8], Activation::Relu, Activation::Sigmoid),
            trunk: chain(&[8, 6, 2], Activation::Relu, Activation::Linear),
        };
        let m = MlpModel::init(arch, &mut rng::stream(21, "init", 0)).unwrap();
        let s = sample(3, 2, 21);
        let eps = 1e-6;
        let bf = brute_force(&m, &s, eps);
        let x = m.input_norm.normalize(&DMatrix::from_column_slice(3, 1, &s.features));
        let y = DMatrix::from_column_slice(2, 1, &s.label);
        let base = m.forward_cached(&x);
        let g = m.backward(&base, (&base.output - &y) * (2.0 / 2.0));
        for (l, v) in bf.iter().enumerate() {
            let nw = g[l].w.len();
            for (k, fd) in v.iter().enumerate() {
                let an = if k < nw { g[l].w.as_slice()[k] } else { g[l].b[k - nw] };
                assert!(relative_error(an, *fd) < 1e-5, "layer {l} param {k}: {an} vs {fd}");
            }
        }
        assert!(gradient_check(&m, &s, eps).unwrap().max_rel_error < 1e-5);
    }

    #[test]
    fn epsilon_domain() {
        let m = MlpModel::zeros(Architecture::plain(vec![LayerSpec::new(1, 1, Activation::Linear)])).unwrap();
        let s = sample(1, 1, 0);
        assert!(gradient_check(&m, &s, 1e-2).is_err());
        assert!(gradient_check(&m, &s, 1e-9).is_err());
    }
}
