//! Set-prediction supervision: box geometry, loss terms, Hungarian matching and
//! denoising perturbation.

mod boxes;
mod denoise;
mod hungarian;
mod loss;

pub use boxes::{giou_loss, iou, BoundingBox, Corners};
pub use denoise::{denoise_perturb, DenoisingQuery, DnNoise, LabeledBox, MIN_EXTENT};
pub use hungarian::{hungarian_match, AssignmentResult};
pub use loss::{
    background_focal_grad, fit_box, focal_loss, giou_grad, l1_box_loss, l1_grad, loss_gradients, pair_cost,
    weighted_focal, BoxFit, L1Reduction, LossGradient, LossWeights, Prediction, Target, PROB_CLAMP,
};

use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SetLoss {
    pub loss: f64,
    pub assignment: AssignmentResult,
}

/// `#preds×#gts` matrix of [`pair_cost`].
pub fn cost_matrix(preds: &[Prediction], gts: &[BoundingBox], weights: &LossWeights) -> Result<Tensor> {
    let data = preds
        .iter()
        .flat_map(|p| gts.iter().map(move |g| pair_cost(p, g, weights)))
        .collect();
    Tensor::new(vec![preds.len(), gts.len()], data)
}

/// Hungarian-matched set loss.
///
/// Matched pairs contribute their full weighted cost; unmatched predictions contribute
/// the weighted focal term against the background label. The total is divided by
/// `max(1, #gts)`.
pub fn set_loss(preds: &[Prediction], gts: &[BoundingBox], weights: &LossWeights) -> Result<SetLoss> {
    weights.validate()?;
    let background = |p: &Prediction| weighted_focal(p.prob, Target::Background, weights);
    if gts.is_empty() || preds.is_empty() {
        let loss = preds.iter().map(background).sum();
        return Ok(SetLoss {
            loss,
            assignment: AssignmentResult {
                pairs: vec![],
                total_cost: 0.0,
                unmatched_predictions: (0..preds.len()).collect(),
            },
        });
    }
    let assignment = hungarian_match(&cost_matrix(preds, gts, weights)?)?;
    let unmatched: f64 = assignment
        .unmatched_predictions
        .iter()
        .map(|&i| background(&preds[i]))
        .sum();
    let loss = (assignment.total_cost + unmatched) / gts.len() as f64;
    Ok(SetLoss { loss, assignment })
}
