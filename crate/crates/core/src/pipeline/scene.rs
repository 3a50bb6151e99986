use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::eval::GroundTruth;
use crate::matching::BoundingBox;
use crate::tensor::Tensor;

pub const MIN_IMAGE_EXTENT: usize = 32;
const BACKGROUND: f64 = 0.5;
const CONTRAST: f64 = 0.35;
/// Multiplicative speckle factors are uniform in `1 ± SPECKLE`.
const SPECKLE: f64 = 0.3;
const MIN_SEMI_AXIS: f64 = 2.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub nodules: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            nodules: 2,
        }
    }
}

/// Grayscale `1×H×W` image with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub image_id: String,
    pub image: Tensor,
    pub gts: Vec<GroundTruth>,
}

impl SyntheticScene {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Elliptical nodules on a flat background with multiplicative speckle.
///
/// Class 0 nodules are brighter than the background and class 1 nodules darker. Each
/// ellipse lies entirely inside the image, its box is the tight axis-aligned box of the
/// ellipse and `pixel_area` is the ellipse area.
pub fn gen_synthetic_scene<R: Rng + ?Sized>(image_id: &str, spec: &SceneSpec, rng: &mut R) -> Result<SyntheticScene> {
    let (h, w) = (spec.height, spec.width);
    if h < MIN_IMAGE_EXTENT || w < MIN_IMAGE_EXTENT {
        return Err(Error::invalid(format!(
            "image extents must be at least {MIN_IMAGE_EXTENT}, got {h}×{w}"
        )));
    }
    let (hf, wf) = (h as f64, w as f64);
    let max_axis = hf.min(wf) / 3.0;
    let mut field = vec![BACKGROUND; h * w];
    let mut gts = Vec::with_capacity(spec.nodules);
    for _ in 0..spec.nodules {
        let a: f64 = rng.random_range(MIN_SEMI_AXIS..max_axis);
        let b: f64 = rng.random_range(MIN_SEMI_AXIS..max_axis);
        let theta: f64 = rng.random_range(0.0..PI);
        let class_id = rng.random_range(0..NUM_CLASSES);
        let (s, c) = theta.sin_cos();
        let ex = (a * a * c * c + b * b * s * s).sqrt();
        let ey = (a * a * s * s + b * b * c * c).sqrt();
        let cx: f64 = rng.random_range(ex..wf - ex);
        let cy: f64 = rng.random_range(ey..hf - ey);
        let sign = if class_id == 0 { 1.0 } else { -1.0 };
        for (i, px) in field.iter_mut().enumerate() {
            let dx = (i % w) as f64 + 0.5 - cx;
            let dy = (i / w) as f64 + 0.5 - cy;
            let u = (dx * c + dy * s) / a;
            let v = (-dx * s + dy * c) / b;
            let r2 = u * u + v * v;
            if r2 <= 1.0 {
                // Soft shoulder towards the rim.
                *px += sign * CONTRAST * (1.0 - r2 * r2);
            }
        }
        gts.push(GroundTruth {
            image_id: image_id.to_owned(),
            bbox: BoundingBox::new(cx / wf, cy / hf, 2.0 * ex / wf, 2.0 * ey / hf)?,
            class_id,
            pixel_area: PI * a * b,
        });
    }
    for px in field.iter_mut() {
        let k: f64 = rng.random_range(1.0 - SPECKLE..=1.0 + SPECKLE);
        *px = (*px * k).clamp(0.0, 1.0);
    }
    Ok(SyntheticScene {
        image_id: image_id.to_owned(),
        image: Tensor::new(vec![1, h, w], field)?,
        gts,
    })
}
