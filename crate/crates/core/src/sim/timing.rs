use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Covariance-coherence frame: an upload/estimation stage of length `t_o`
/// followed by `n_cct` channel-coherence intervals of length `t_c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameTiming {
    pub t_co: f64,
    pub t_c: f64,
    pub t_o: f64,
    pub n_cct: usize,
}

impl Default for FrameTiming {
    fn default() -> Self {
        FrameTiming { t_co: 0.255, t_c: 0.005, t_o: 0.005, n_cct: 50 }
    }
}

impl FrameTiming {
    pub fn new(t_co: f64, t_c: f64, t_o: f64, n_cct: usize) -> Result<Self> {
        let t = FrameTiming { t_co, t_c, t_o, n_cct };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_co > 0.0 && self.t_c > 0.0 && self.t_o > 0.0) || self.n_cct == 0 {
            return Err(Error::config("frame timing values must be positive"));
        }
        if self.t_o + self.n_cct as f64 * self.t_c > self.t_co * (1.0 + 1e-12) {
            return Err(Error::config(format!(
                "t_o + n_cct·t_c = {} exceeds t_co = {}",
                self.t_o + self.n_cct as f64 * self.t_c,
                self.t_co
            )));
        }
        Ok(())
    }

    /// Elapsed time from the frame start to the `q`-th channel interval,
    /// `T_q = t_o + (q - 1) t_c` for `q` in `1..=n_cct`.
    pub fn offset(&self, q: usize) -> f64 {
        debug_assert!(q >= 1 && q <= self.n_cct);
        self.t_o + (q - 1) as f64 * self.t_c
    }

    pub fn offsets(&self) -> impl Iterator<Item = f64> + '_ {
        (1..=self.n_cct).map(|q| self.offset(q))
    }

    /// `T_N`, the offset of the last channel interval.
    pub fn last_offset(&self) -> f64 {
        self.offset(self.n_cct)
    }
}
