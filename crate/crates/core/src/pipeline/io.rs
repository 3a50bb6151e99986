//! JSON files: scenes, detections, ground truth and configs.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::scene::SyntheticScene;
use crate::error::{Error, Result};
use crate::eval::{Detection, GroundTruth};
use crate::tensor::Tensor;

/// On-disk form of a scene image; ground truth lives in its own file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    /// Row-major intensities.
    pub pixels: Vec<f64>,
}

impl From<&SyntheticScene> for SceneRecord {
    fn from(s: &SyntheticScene) -> Self {
        Self {
            image_id: s.image_id.clone(),
            height: s.height(),
            width: s.width(),
            pixels: s.image.data().to_vec(),
        }
    }
}

impl SceneRecord {
    /// The image as a `1×H×W` tensor.
    pub fn image(&self) -> Result<Tensor> {
        Tensor::new(vec![1, self.height, self.width], self.pixels.clone())
    }

    pub fn into_scene(self) -> Result<SyntheticScene> {
        Ok(SyntheticScene {
            image: self.image()?,
            image_id: self.image_id,
            gts: vec![],
        })
    }
}

fn data_error(path: &Path, at: impl Into<String>, message: impl ToString) -> Error {
    Error::Data {
        path: path.to_path_buf(),
        at: at.into(),
        message: message.to_string(),
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let at = e.path().to_string();
        data_error(path, at, e.into_inner())
    })
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io(e.into()))?;
    text.push('\n');
    fs::write(path, text).map_err(io)
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let dets: Vec<Detection> = read_json(path)?;
    for (i, d) in dets.iter().enumerate() {
        d.validate().map_err(|e| data_error(path, format!("[{i}].score"), e))?;
    }
    Ok(dets)
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruth>> {
    let gts: Vec<GroundTruth> = read_json(path)?;
    for (i, g) in gts.iter().enumerate() {
        g.validate()
            .map_err(|e| data_error(path, format!("[{i}].pixel_area"), e))?;
    }
    Ok(gts)
}

pub fn read_scenes(path: &Path) -> Result<Vec<SceneRecord>> {
    let scenes: Vec<SceneRecord> = read_json(path)?;
    for (i, s) in scenes.iter().enumerate() {
        if s.pixels.len() != s.height * s.width {
            return Err(data_error(
                path,
                format!("[{i}].pixels"),
                format!(
                    "expected {}×{} = {} values, got {}",
                    s.height,
                    s.width,
                    s.height * s.width,
                    s.pixels.len()
                ),
            ));
        }
    }
    Ok(scenes)
}

/// Reads a config and checks it.
pub fn read_config(path: &Path) -> Result<PipelineConfig> {
    let cfg: PipelineConfig = read_json(path)?;
    cfg.validate().map_err(|e| data_error(path, ".", e))?;
    Ok(cfg)
}
