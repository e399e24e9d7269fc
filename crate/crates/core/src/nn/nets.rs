//! The two networks: location and speed to packed covariance, and channel to
//! location.

use nalgebra::DMatrix;

use super::model::{chain, Activation, Architecture, BranchSpec, MlpModel};
use crate::denoise::LocationEstimator;
use crate::covariance::{psd_repair, unpack_cov, CovMatrix, PackedCov};
use crate::geometry::Channel;
use crate::scene::UserPosition;
use crate::{Error, Result};

/// Location-to-covariance network for an `n_antennas` array: a location
/// branch 2→50→100 and a speed branch 1→20→50, a three-layer sigmoid gate
/// over the 150 concatenated features, and a trunk 150→200→200→150→150→N_B².
pub fn lcnet_architecture(n_antennas: usize) -> Architecture {
    use Activation::*;
    Architecture {
        input: 3,
        branches: vec![
            BranchSpec { width: 2, layers: chain(&[2, 50, 100], Relu, Relu) },
            BranchSpec { width: 1, layers: chain(&[1, 20, 50], Relu, Relu) },
        ],
        gate: chain(&[150, 150, 150, 150], Relu, Sigmoid),
        trunk: chain(&[150, 200, 200, 150, 150, n_antennas * n_antennas], Relu, Linear),
    }
}

/// Channel-to-location network: 2N_B→50→100→200→100→50→2.
pub fn lenet_architecture(n_antennas: usize) -> Architecture {
    Architecture::plain(chain(&[2 * n_antennas, 50, 100, 200, 100, 50, 2], Activation::Relu, Activation::Linear))
}

pub fn lcnet_features(pos: UserPosition, speed: f64) -> [f64; 3] {
    [pos.x, pos.y, speed]
}

/// `[Re h / ζ; Im h / ζ]`.
pub fn lenet_features(h: &Channel, zeta: f64) -> Result<Vec<f64>> {
    if !(zeta > 0.0 && zeta.is_finite()) {
        return Err(Error::domain(format!("normalization {zeta} must be positive")));
    }
    let v = h.as_vector();
    Ok(v.iter().map(|z| z.re / zeta).chain(v.iter().map(|z| z.im / zeta)).collect())
}

fn unpack_output(model: &MlpModel, out: &[f64], coefficient: f64) -> Result<CovMatrix> {
    let n = (out.len() as f64).sqrt().round() as usize;
    if n * n != out.len() || n == 0 {
        return Err(Error::Dimension { expected: n * n, got: model.output_width() });
    }
    Ok(psd_repair(&unpack_cov(&PackedCov(out.to_vec()))?.scaled(coefficient)))
}

/// Predicted covariance: forward pass, unpack, undo label scaling, repair.
pub fn lcnet_predict(model: &MlpModel, coefficient: f64, pos: UserPosition, speed: f64) -> Result<CovMatrix> {
    let out = model.forward(&lcnet_features(pos, speed))?;
    unpack_output(model, &out, coefficient)
}

/// [`lcnet_predict`] over many inputs with one batched forward pass.
pub fn lcnet_predict_batch(model: &MlpModel, coefficient: f64, inputs: &[(UserPosition, f64)]) -> Result<Vec<CovMatrix>> {
    if inputs.is_empty() {
        return Ok(Vec::new());
    }
    let x = DMatrix::from_fn(3, inputs.len(), |i, j| lcnet_features(inputs[j].0, inputs[j].1)[i]);
    let y = model.forward_batch(&x)?;
    y.column_iter()
        .map(|c| unpack_output(model, c.as_slice(), coefficient))
        .collect()
}

/// Channel-to-location network with its input normalization.
#[derive(Debug, Clone, Copy)]
pub struct LenetLocator<'a> {
    pub model: &'a MlpModel,
    pub zeta: f64,
}

impl LocationEstimator for LenetLocator<'_> {
    fn locate(&self, h: &Channel) -> Result<UserPosition> {
        lenet_predict(self.model, self.zeta, h)
    }

    fn locate_batch(&self, hs: &[Channel]) -> Result<Vec<UserPosition>> {
        if hs.is_empty() {
            return Ok(Vec::new());
        }
        let cols = hs.iter().map(|h| lenet_features(h, self.zeta)).collect::<Result<Vec<_>>>()?;
        let x = DMatrix::from_fn(cols[0].len(), cols.len(), |i, j| cols[j][i]);
        let y = self.model.forward_batch(&x)?;
        if y.nrows() != 2 {
            return Err(Error::Dimension { expected: 2, got: y.nrows() });
        }
        Ok(y.column_iter().map(|c| UserPosition::new(c[0], c[1])).collect())
    }
}

pub fn lenet_predict(model: &MlpModel, zeta: f64, h: &Channel) -> Result<UserPosition> {
    let out = model.forward(&lenet_features(h, zeta)?)?;
    if out.len() != 2 {
        return Err(Error::Dimension { expected: 2, got: out.len() });
    }
    Ok(UserPosition::new(out[0], out[1]))
}
