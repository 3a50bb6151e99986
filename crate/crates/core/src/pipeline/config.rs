use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{DnNoise, LossWeights};
use crate::msfca::FrequencyAssignment;
use crate::posenc::{PosEncConfig, TemperatureMode};

/// Pyramid depth produced by the backbone and fusion stages.
pub const PYRAMID_LEVELS: usize = 4;
pub const MAX_ENCODER_LAYERS: usize = 6;
pub const MAX_DECODER_LAYERS: usize = 6;
/// Benign and malignant.
pub const NUM_CLASSES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MsdaShape {
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
}

impl Default for MsdaShape {
    fn default() -> Self {
        Self {
            heads: 8,
            levels: 4,
            points: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosEncSettings {
    pub temperature: f64,
    #[serde(default)]
    pub temperature_mode: TemperatureMode,
}

impl Default for PosEncSettings {
    fn default() -> Self {
        Self {
            temperature: 20.0,
            temperature_mode: TemperatureMode::Scaled,
        }
    }
}

/// Frequency groups shared by every backbone stage. Without explicit `pairs` the first
/// `groups` zigzag frequencies are used.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MsfcaSettings {
    pub groups: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairs: Option<Vec<(usize, usize)>>,
}

impl MsfcaSettings {
    pub fn assignment(&self) -> Result<FrequencyAssignment> {
        match &self.pairs {
            Some(p) if p.len() != self.groups => Err(Error::invalid(format!(
                "msfca lists {} frequency pairs for {} groups",
                p.len(),
                self.groups
            ))),
            Some(p) => FrequencyAssignment::new(p.clone()),
            None => FrequencyAssignment::new(FrequencyAssignment::zigzag(self.groups).pairs),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub d_model: usize,
    pub msda: MsdaShape,
    pub posenc: PosEncSettings,
    pub loss_weights: LossWeights,
    pub dn_noise: DnNoise,
    pub msfca: MsfcaSettings,
    /// Output channels of the four backbone stages.
    pub backbone_channels: [usize; 4],
    pub num_queries: usize,
    /// Queries whose best class probability falls below this are dropped.
    pub score_floor: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            encoder_layers: 6,
            decoder_layers: 6,
            d_model: 64,
            msda: MsdaShape::default(),
            posenc: PosEncSettings::default(),
            loss_weights: LossWeights::default(),
            dn_noise: DnNoise::default(),
            msfca: MsfcaSettings {
                groups: 16,
                pairs: None,
            },
            backbone_channels: [16, 32, 64, 64],
            num_queries: 100,
            score_floor: 0.05,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn posenc_config(&self) -> PosEncConfig {
        PosEncConfig {
            d_model: self.d_model,
            temperature: self.posenc.temperature,
            temperature_mode: self.posenc.temperature_mode,
        }
    }

    /// Checks everything that can be checked without an image.
    pub fn validate(&self) -> Result<()> {
        if self.encoder_layers > MAX_ENCODER_LAYERS {
            return Err(Error::invalid(format!(
                "encoder_layers must lie in 0..={MAX_ENCODER_LAYERS}, got {}",
                self.encoder_layers
            )));
        }
        if !(1..=MAX_DECODER_LAYERS).contains(&self.decoder_layers) {
            return Err(Error::invalid(format!(
                "decoder_layers must lie in 1..={MAX_DECODER_LAYERS}, got {}",
                self.decoder_layers
            )));
        }
        if self.msda.levels != PYRAMID_LEVELS {
            return Err(Error::invalid(format!(
                "msda.levels must equal the {PYRAMID_LEVELS} pyramid levels, got {}",
                self.msda.levels
            )));
        }
        if self.msda.heads == 0 || self.msda.points == 0 || !self.d_model.is_multiple_of(self.msda.heads) {
            return Err(Error::invalid(format!(
                "msda.heads = {} must divide d_model = {} and points must be positive",
                self.msda.heads, self.d_model
            )));
        }
        if !self.d_model.is_multiple_of(4) || self.d_model == 0 {
            return Err(Error::invalid(format!(
                "d_model must be a positive multiple of 4 for the 2D encoding, got {}",
                self.d_model
            )));
        }
        self.posenc_config().validate()?;
        self.loss_weights.validate()?;
        self.dn_noise.validate()?;
        let assignment = self.msfca.assignment()?;
        for (i, &c) in self.backbone_channels.iter().enumerate() {
            if c == 0 || c % assignment.groups() != 0 {
                return Err(Error::invalid(format!(
                    "{} frequency groups do not divide stage {} width {c}",
                    assignment.groups(),
                    i + 1
                )));
            }
        }
        if self.num_queries == 0 {
            return Err(Error::invalid("num_queries must be positive"));
        }
        if !(0.0..=1.0).contains(&self.score_floor) {
            return Err(Error::invalid(format!(
                "score_floor must lie in [0, 1], got {}",
                self.score_floor
            )));
        }
        Ok(())
    }
}
