//! Rate coding between real tensors and spike trains.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuron::{run_window, NeuronParams, SpikeTrain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EncodingScheme {
    /// Drive a bipolar IF layer with the value as a constant current.
    #[default]
    CurrentDriven,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub time_window: usize,
    pub scheme: EncodingScheme,
    /// Largest encodable magnitude; inputs are divided by it and clamped.
    pub clip: f64,
}

impl EncodingConfig {
    pub fn new(time_window: usize, clip: f64) -> Self {
        Self {
            time_window,
            scheme: EncodingScheme::CurrentDriven,
            clip,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.time_window == 0 {
            return Err(Error::InvalidParam("time window must be at least one step".into()));
        }
        if !(self.clip.is_finite() && self.clip > 0.0) {
            return Err(Error::InvalidParam(format!("encoder clip must be positive, got {}", self.clip)));
        }
        Ok(())
    }
}

/// Encode `(positions, channels)` values as a `(T, positions, channels)`
/// ternary train whose rates approximate `clamp(x / clip, -1, 1)` to within
/// `1/T`.
pub fn rate_encode(x: ArrayView2<'_, f64>, cfg: &EncodingConfig) -> Result<SpikeTrain> {
    cfg.validate()?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("rate_encode input"));
    }
    let level = x.mapv(|v| (v / cfg.clip).clamp(-1.0, 1.0));
    let (p, c) = level.dim();
    let currents = level
        .broadcast((cfg.time_window, p, c))
        .expect("broadcast of a 2-d array over a leading axis")
        .to_owned();
    let (train, _) = run_window(NeuronParams::bipolar_if(1.0), currents.view())?;
    Ok(train)
}

/// Signed mean spike count per element.
pub fn decode_rates(s: &SpikeTrain) -> Array2<f64> {
    s.rates()
}

/// Constant-current train helper used by tests and benches.
pub fn constant_currents(level: ArrayView2<'_, f64>, steps: usize) -> Array3<f64> {
    let mut out = Array3::zeros((steps, level.nrows(), level.ncols()));
    for mut step in out.axis_iter_mut(Axis(0)) {
        step.assign(&level);
    }
    out
}
