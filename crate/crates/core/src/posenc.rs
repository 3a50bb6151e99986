//! Temperature-scaled sinusoidal positional encoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How the temperature enters the frequency denominator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureMode {
    /// `sin(pos / (T·10000^{2i/d}))` and `cos(pos / (T·10000^{(2i+1)/d}))`.
    #[default]
    Scaled,
    /// DETR-style: `T` replaces the base, `pos / T^{2i/d}` for both slots of pair `i`.
    Base,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosEncConfig {
    pub d_model: usize,
    pub temperature: f64,
    #[serde(default)]
    pub temperature_mode: TemperatureMode,
}

impl Default for PosEncConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            temperature: 20.0,
            temperature_mode: TemperatureMode::Scaled,
        }
    }
}

impl PosEncConfig {
    pub fn new(d_model: usize, temperature: f64) -> Result<Self> {
        let cfg = Self {
            d_model,
            temperature,
            temperature_mode: TemperatureMode::Scaled,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || !self.d_model.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "d_model must be even and positive, got {}",
                self.d_model
            )));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::invalid(format!(
                "temperature must be finite and positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    fn denominator(&self, slot: usize) -> f64 {
        let d = self.d_model as f64;
        match self.temperature_mode {
            TemperatureMode::Scaled => self.temperature * 10000f64.powf(slot as f64 / d),
            TemperatureMode::Base => self.temperature.powf((slot - slot % 2) as f64 / d),
        }
    }
}

/// Encoding of one scalar position: even slots sine, odd slots cosine.
pub fn positional_encoding(pos: f64, cfg: &PosEncConfig) -> Result<Tensor> {
    cfg.validate()?;
    if !pos.is_finite() {
        return Err(Error::NonFinite("positional_encoding"));
    }
    Ok(Tensor::vector(encode_into(pos, cfg)))
}

fn encode_into(pos: f64, cfg: &PosEncConfig) -> Vec<f64> {
    (0..cfg.d_model)
        .map(|j| {
            let arg = pos / cfg.denominator(j);
            if j % 2 == 0 {
                arg.sin()
            } else {
                arg.cos()
            }
        })
        .collect()
}

/// `d_model×H×W` grid encoding: the first half of the channels encodes the row index,
/// the second half the column index, each with width `d_model/2`.
pub fn encode_2d_grid(height: usize, width: usize, cfg: &PosEncConfig) -> Result<Tensor> {
    cfg.validate()?;
    if height == 0 || width == 0 {
        return Err(Error::invalid("grid extents must be positive"));
    }
    let half = cfg.d_model / 2;
    if !half.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "d_model/2 = {half} must be even for a 2D grid encoding"
        )));
    }
    let sub = PosEncConfig { d_model: half, ..*cfg };
    let rows: Vec<Vec<f64>> = (0..height).map(|y| encode_into(y as f64, &sub)).collect();
    let cols: Vec<Vec<f64>> = (0..width).map(|x| encode_into(x as f64, &sub)).collect();
    let hw = height * width;
    Ok(Tensor::from_fn(&[cfg.d_model, height, width], |i| {
        let (c, rem) = (i / hw, i % hw);
        let (y, x) = (rem / width, rem % width);
        if c < half {
            rows[y][c]
        } else {
            cols[x][c - half]
        }
    }))
}
