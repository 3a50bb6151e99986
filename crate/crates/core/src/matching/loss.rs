//! Focal, L1 and GIoU terms of the set-prediction loss, with hand-written gradients.

use serde::{Deserialize, Serialize};

use super::boxes::{giou_loss, overlap, BoundingBox};
use crate::error::{Error, Result};

pub const PROB_CLAMP: f64 = 1e-7;

/// Binary focal target: foreground (`y = +1`) or background (`y = −1`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Foreground,
    Background,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L1Reduction {
    /// Mean over the four box coordinates.
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub focal: f64,
    pub l1: f64,
    pub giou: f64,
    pub gamma: f64,
    /// Optional α-balancing of the focal term; off by default.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub l1_reduction: L1Reduction,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            focal: 2.0,
            l1: 5.0,
            giou: 2.0,
            gamma: 2.0,
            alpha: None,
            l1_reduction: L1Reduction::Mean,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.focal, self.l1, self.giou, self.gamma];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(format!(
                "loss weights must be finite and nonnegative: {all:?}"
            )));
        }
        if let Some(a) = self.alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::invalid(format!("focal alpha must lie in [0, 1], got {a}")));
            }
        }
        Ok(())
    }

    /// All three term weights multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            focal: self.focal * k,
            l1: self.l1 * k,
            giou: self.giou * k,
            ..*self
        }
    }

    fn alpha_factor(&self, target: Target) -> f64 {
        match (self.alpha, target) {
            (None, _) => 1.0,
            (Some(a), Target::Foreground) => a,
            (Some(a), Target::Background) => 1.0 - a,
        }
    }

    fn l1_divisor(&self) -> f64 {
        match self.l1_reduction {
            L1Reduction::Mean => 4.0,
            L1Reduction::Sum => 1.0,
        }
    }
}

/// Predicted box plus foreground probability.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub bbox: BoundingBox,
    pub prob: f64,
}

impl Prediction {
    pub fn new(bbox: BoundingBox, prob: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&prob) {
            return Err(Error::invalid(format!("probability {prob} outside [0, 1]")));
        }
        Ok(Self { bbox, prob })
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// `−(1 − p_t)^γ · ln p_t` with `p_t = p` for foreground and `1 − p` for background.
pub fn focal_loss(p: f64, target: Target, gamma: f64) -> f64 {
    let p = clamp_prob(p);
    let pt = match target {
        Target::Foreground => p,
        Target::Background => 1.0 - p,
    };
    -(1.0 - pt).powf(gamma) * pt.ln()
}

/// d focal / dp, zero where the clamp is active.
fn focal_grad(p: f64, target: Target, gamma: f64) -> f64 {
    if p <= PROB_CLAMP || p >= 1.0 - PROB_CLAMP {
        return 0.0;
    }
    let (pt, sign) = match target {
        Target::Foreground => (p, 1.0),
        Target::Background => (1.0 - p, -1.0),
    };
    let q = 1.0 - pt;
    let d_pt = if gamma == 0.0 {
        -1.0 / pt
    } else {
        gamma * q.powf(gamma - 1.0) * pt.ln() - q.powf(gamma) / pt
    };
    sign * d_pt
}

/// Mean absolute difference over `(cx, cy, w, h)`.
pub fn l1_box_loss(pred: &BoundingBox, gt: &BoundingBox) -> f64 {
    pred.to_array()
        .iter()
        .zip(gt.to_array())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / 4.0
}

/// Weighted focal term including the optional α factor.
pub fn weighted_focal(p: f64, target: Target, weights: &LossWeights) -> f64 {
    weights.focal * weights.alpha_factor(target) * focal_loss(p, target, weights.gamma)
}

/// `λ_focal·L_focal + λ_L1·L_L1 + λ_GIoU·L_GIoU` for a prediction against a foreground box.
pub fn pair_cost(pred: &Prediction, gt: &BoundingBox, weights: &LossWeights) -> f64 {
    let l1 = l1_box_loss(&pred.bbox, gt) * 4.0 / weights.l1_divisor();
    weighted_focal(pred.prob, Target::Foreground, weights) + weights.l1 * l1 + weights.giou * giou_loss(&pred.bbox, gt)
}

/// Partials of [`pair_cost`] w.r.t. the prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossGradient {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub prob: f64,
}

impl LossGradient {
    pub fn to_array(&self) -> [f64; 5] {
        [self.cx, self.cy, self.w, self.h, self.prob]
    }
}

/// Gradient of `1 − I/U + (C − U)/C` w.r.t. the corners of `pred`.
///
/// Where a min/max ties between the two boxes, the predicted box's coordinate is
/// treated as the active one, which yields a one-sided derivative.
fn giou_corner_grad(pred: &BoundingBox, gt: &BoundingBox) -> [f64; 4] {
    let (a, b) = (pred.corners(), gt.corners());
    let o = overlap(pred, gt);
    let (i, u, c) = (o.inter, o.union, o.hull);
    let d_inter = -(u + i) / (u * u) + 1.0 / c;
    let d_area = i / (u * u) - 1.0 / c;
    let d_hull = u / (c * c);

    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    let (aw, ah) = (a.x2 - a.x1, a.y2 - a.y1);
    let (cw, ch) = (a.x2.max(b.x2) - a.x1.min(b.x1), a.y2.max(b.y2) - a.y1.min(b.y1));
    let overlapping = iw > 0.0 && ih > 0.0;

    let di = |active: bool, extent: f64, sign: f64| if overlapping && active { sign * extent } else { 0.0 };
    let dc = |active: bool, extent: f64, sign: f64| if active { sign * extent } else { 0.0 };

    let gx1 = d_inter * di(a.x1 >= b.x1, ih, -1.0) + d_area * -ah + d_hull * dc(a.x1 <= b.x1, ch, -1.0);
    let gx2 = d_inter * di(a.x2 <= b.x2, ih, 1.0) + d_area * ah + d_hull * dc(a.x2 >= b.x2, ch, 1.0);
    let gy1 = d_inter * di(a.y1 >= b.y1, iw, -1.0) + d_area * -aw + d_hull * dc(a.y1 <= b.y1, cw, -1.0);
    let gy2 = d_inter * di(a.y2 <= b.y2, iw, 1.0) + d_area * aw + d_hull * dc(a.y2 >= b.y2, cw, 1.0);
    [gx1, gy1, gx2, gy2]
}

/// Gradient of the GIoU loss w.r.t. `(cx, cy, w, h)` of `pred`.
pub fn giou_grad(pred: &BoundingBox, gt: &BoundingBox) -> [f64; 4] {
    let [gx1, gy1, gx2, gy2] = giou_corner_grad(pred, gt);
    [gx1 + gx2, gy1 + gy2, (gx2 - gx1) / 2.0, (gy2 - gy1) / 2.0]
}

/// Gradient of the L1 term (with the configured reduction); `sign(0) = 0`.
pub fn l1_grad(pred: &BoundingBox, gt: &BoundingBox, reduction: L1Reduction) -> [f64; 4] {
    let div = match reduction {
        L1Reduction::Mean => 4.0,
        L1Reduction::Sum => 1.0,
    };
    let mut g = [0.0; 4];
    for (gi, (a, b)) in g.iter_mut().zip(pred.to_array().iter().zip(gt.to_array())) {
        let d = a - b;
        *gi = if d > 0.0 {
            1.0 / div
        } else if d < 0.0 {
            -1.0 / div
        } else {
            0.0
        };
    }
    g
}

/// Analytic gradient of [`pair_cost`] over `(cx, cy, w, h, p)`.
pub fn loss_gradients(pred: &Prediction, gt: &BoundingBox, weights: &LossWeights) -> LossGradient {
    let gl1 = l1_grad(&pred.bbox, gt, weights.l1_reduction);
    let gg = giou_grad(&pred.bbox, gt);
    let b: Vec<f64> = (0..4).map(|i| weights.l1 * gl1[i] + weights.giou * gg[i]).collect();
    LossGradient {
        cx: b[0],
        cy: b[1],
        w: b[2],
        h: b[3],
        prob: weights.focal
            * weights.alpha_factor(Target::Foreground)
            * focal_grad(pred.prob, Target::Foreground, weights.gamma),
    }
}

/// Gradient of the background focal term w.r.t. `p`.
pub fn background_focal_grad(p: f64, weights: &LossWeights) -> f64 {
    weights.focal * weights.alpha_factor(Target::Background) * focal_grad(p, Target::Background, weights.gamma)
}

/// Outcome of [`fit_box`].
#[derive(Clone, Copy, Debug)]
pub struct BoxFit {
    pub bbox: BoundingBox,
    pub steps: usize,
    pub l1: f64,
    pub converged: bool,
}

/// Box-regression gradient descent on `λ_L1·L1 + λ_GIoU·GIoU` towards `target`.
///
/// The step length is `f/|g|²` capped at `step`: the objective's minimum is zero, and a
/// fixed step keeps bouncing across the kinks of the L1 and GIoU surfaces instead of
/// settling. The step is halved only when it would produce a degenerate box.
/// Stops once `l1_box_loss < tol` or after `max_steps` iterations.
pub fn fit_box(
    start: BoundingBox,
    target: &BoundingBox,
    weights: &LossWeights,
    step: f64,
    tol: f64,
    max_steps: usize,
) -> BoxFit {
    let objective = |b: &BoundingBox| {
        weights.l1 * l1_box_loss(b, target) * 4.0 / weights.l1_divisor() + weights.giou * giou_loss(b, target)
    };
    let mut cur = start;
    for it in 0..max_steps {
        let l1 = l1_box_loss(&cur, target);
        if l1 < tol {
            return BoxFit {
                bbox: cur,
                steps: it,
                l1,
                converged: true,
            };
        }
        let gl1 = l1_grad(&cur, target, weights.l1_reduction);
        let gg = giou_grad(&cur, target);
        let g: [f64; 4] = std::array::from_fn(|i| weights.l1 * gl1[i] + weights.giou * gg[i]);
        let norm_sq: f64 = g.iter().map(|v| v * v).sum();
        if norm_sq == 0.0 {
            break;
        }
        // The minimum value is zero, so f/|g|² is the Polyak step; `step` caps it.
        let mut eta = (objective(&cur) / norm_sq).min(step);
        let x = cur.to_array();
        let next = loop {
            match BoundingBox::new(
                x[0] - eta * g[0],
                x[1] - eta * g[1],
                x[2] - eta * g[2],
                x[3] - eta * g[3],
            ) {
                Ok(b) => break Some(b),
                Err(_) if eta > 1e-14 => eta /= 2.0,
                Err(_) => break None,
            }
        };
        match next {
            Some(b) => cur = b,
            None => break,
        }
    }
    let l1 = l1_box_loss(&cur, target);
    BoxFit {
        bbox: cur,
        steps: max_steps,
        l1,
        converged: l1 < tol,
    }
}
