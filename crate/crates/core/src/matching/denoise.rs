//! Noised ground-truth queries for denoising training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::boxes::BoundingBox;
use crate::error::{Error, Result};

/// Smallest width/height a perturbed box is clamped to.
pub const MIN_EXTENT: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DnNoise {
    pub box_noise_scale: f64,
    pub label_flip_prob: f64,
}

impl Default for DnNoise {
    fn default() -> Self {
        Self {
            box_noise_scale: 0.4,
            label_flip_prob: 0.2,
        }
    }
}

impl DnNoise {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("box_noise_scale", self.box_noise_scale),
            ("label_flip_prob", self.label_flip_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledBox {
    pub bbox: BoundingBox,
    pub class_id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenoisingQuery {
    pub bbox: BoundingBox,
    pub class_id: usize,
    pub flipped: bool,
}

/// Jitters every box and flips labels.
///
/// The center moves uniformly within `±scale·(w/2, h/2)`, width and height are multiplied
/// by independent factors uniform in `[1 − scale, 1 + scale]`, and the label is replaced by
/// a uniformly chosen different class with probability `label_flip_prob`. Results are
/// clamped back into the normalized range. Exactly six draws are consumed per box.
pub fn denoise_perturb<R: Rng + ?Sized>(
    gts: &[LabeledBox],
    noise: &DnNoise,
    num_classes: usize,
    rng: &mut R,
) -> Result<Vec<DenoisingQuery>> {
    noise.validate()?;
    if num_classes < 2 {
        return Err(Error::invalid("label flipping needs at least two classes"));
    }
    let s = noise.box_noise_scale;
    gts.iter()
        .map(|gt| {
            let b = gt.bbox;
            let jx: f64 = rng.random_range(-1.0..=1.0);
            let jy: f64 = rng.random_range(-1.0..=1.0);
            let sw: f64 = rng.random_range(-1.0..=1.0);
            let sh: f64 = rng.random_range(-1.0..=1.0);
            let flip_draw: f64 = rng.random();
            let other: usize = rng.random_range(0..num_classes - 1);

            let cx = (b.cx() + jx * s * b.w() / 2.0).clamp(0.0, 1.0);
            let cy = (b.cy() + jy * s * b.h() / 2.0).clamp(0.0, 1.0);
            let w = (b.w() * (1.0 + sw * s)).clamp(MIN_EXTENT, 1.0);
            let h = (b.h() * (1.0 + sh * s)).clamp(MIN_EXTENT, 1.0);
            let flipped = flip_draw < noise.label_flip_prob;
            let class_id = if flipped {
                // Skip over the true class.
                if other >= gt.class_id {
                    other + 1
                } else {
                    other
                }
            } else {
                gt.class_id
            };
            Ok(DenoisingQuery {
                bbox: BoundingBox::new(cx, cy, w, h)?,
                class_id,
                flipped,
            })
        })
        .collect()
}
