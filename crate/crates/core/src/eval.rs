//! COCO-style detection metrics.
//!
//! Detections are matched greedily in descending score order at each IoU threshold,
//! AP is the 101-point interpolated area under the precision/recall curve, and mAP
//! averages over thresholds first and classes second.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{iou, BoundingBox};

pub const SMALL_AREA_MAX: f64 = 32.0 * 32.0;
pub const MEDIUM_AREA_MAX: f64 = 64.0 * 64.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    pub image_id: String,
    pub bbox: BoundingBox,
    pub score: f64,
    pub class_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub image_id: String,
    pub bbox: BoundingBox,
    pub class_id: usize,
    pub pixel_area: f64,
}

impl Detection {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::invalid(format!("detection score {} outside [0, 1]", self.score)));
        }
        Ok(())
    }
}

impl GroundTruth {
    pub fn validate(&self) -> Result<()> {
        if !(self.pixel_area > 0.0 && self.pixel_area.is_finite()) {
            return Err(Error::invalid(format!(
                "ground-truth pixel_area must be positive, got {}",
                self.pixel_area
            )));
        }
        Ok(())
    }
}

/// Size bucket. Areas are in pixels; `32²` and `64²` both fall in `Medium`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AreaRange {
    All,
    Small,
    Medium,
    Large,
}

impl AreaRange {
    pub fn contains(self, area: f64) -> bool {
        match self {
            AreaRange::All => true,
            AreaRange::Small => area < SMALL_AREA_MAX,
            AreaRange::Medium => (SMALL_AREA_MAX..=MEDIUM_AREA_MAX).contains(&area),
            AreaRange::Large => area > MEDIUM_AREA_MAX,
        }
    }
}

/// `0.50, 0.55, …, 0.95`.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledDetection {
    pub score: f64,
    pub true_positive: bool,
    /// Position of the detection in the caller's input, used to break score ties.
    pub order: usize,
}

/// Match outcome for one image and class.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageMatch {
    /// Non-ignored detections, in descending score order.
    pub labeled: Vec<LabeledDetection>,
    /// Number of ground truths inside the area range.
    pub n_gt: usize,
}

/// Greedy matching of one image/class at `threshold`.
///
/// Each detection, highest score first (ties in input order), claims the unclaimed
/// in-range ground truth with the highest IoU ≥ threshold; failing that, an out-of-range
/// one, in which case the detection is ignored. Unmatched detections are false positives.
pub fn match_at_threshold(dets: &[&Detection], gts: &[&GroundTruth], threshold: f64, range: AreaRange) -> ImageMatch {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let in_range: Vec<bool> = gts.iter().map(|g| range.contains(g.pixel_area)).collect();
    let mut claimed = vec![false; gts.len()];
    let mut labeled = Vec::with_capacity(dets.len());

    for di in order {
        let det = dets[di];
        let best = |want_in_range: bool, claimed: &[bool]| {
            let mut best: Option<(usize, f64)> = None;
            for (gi, gt) in gts.iter().enumerate() {
                if claimed[gi] || in_range[gi] != want_in_range {
                    continue;
                }
                let v = iou(&det.bbox, &gt.bbox);
                if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((gi, v));
                }
            }
            best.map(|(gi, _)| gi)
        };
        match best(true, &claimed) {
            Some(gi) => {
                claimed[gi] = true;
                labeled.push(LabeledDetection {
                    score: det.score,
                    true_positive: true,
                    order: di,
                });
            }
            None => match best(false, &claimed) {
                Some(gi) => claimed[gi] = true,
                None => labeled.push(LabeledDetection {
                    score: det.score,
                    true_positive: false,
                    order: di,
                }),
            },
        }
    }
    ImageMatch {
        labeled,
        n_gt: in_range.iter().filter(|&&b| b).count(),
    }
}

/// 101-point interpolated AP of a ranked TP/FP sequence.
///
/// `None` when there is nothing to score (`n_gt = 0` and no detections); `Some(0)` when
/// there are detections but no ground truth.
pub fn average_precision(ranked: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return if ranked.is_empty() { None } else { Some(0.0) };
    }
    let mut recall = Vec::with_capacity(ranked.len());
    let mut precision = Vec::with_capacity(ranked.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &hit in ranked {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    // Precision envelope: running max from the right.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let total: f64 = (0..=100)
        .map(|r| {
            let r = r as f64 / 100.0;
            let i = recall.partition_point(|&x| x < r);
            precision.get(i).copied().unwrap_or(0.0)
        })
        .sum();
    Some(total / 101.0)
}

/// AP for one class, merging per-image matches into one global ranking.
fn class_ap(
    images: &BTreeMap<&str, (Vec<&Detection>, Vec<&GroundTruth>)>,
    threshold: f64,
    range: AreaRange,
) -> Option<f64> {
    let mut all: Vec<(usize, LabeledDetection)> = Vec::new();
    let mut n_gt = 0;
    for (img_rank, (dets, gts)) in images.values().enumerate() {
        let m = match_at_threshold(dets, gts, threshold, range);
        n_gt += m.n_gt;
        all.extend(m.labeled.into_iter().map(|l| (img_rank, l)));
    }
    if range != AreaRange::All && n_gt == 0 {
        return None;
    }
    // Stable global order: score descending, then image order, then input order.
    all.sort_by(|a, b| {
        b.1.score
            .total_cmp(&a.1.score)
            .then(a.0.cmp(&b.0))
            .then(a.1.order.cmp(&b.1.order))
    });
    let ranked: Vec<bool> = all.iter().map(|(_, l)| l.true_positive).collect();
    average_precision(&ranked, n_gt)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub ap_50_95: Option<f64>,
    pub ap_50: Option<f64>,
    pub ap_75: Option<f64>,
}

/// The six headline metrics; `None` marks a metric with nothing to evaluate.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "mAP")]
    pub map_50_95: Option<f64>,
    #[serde(rename = "mAP50")]
    pub map_50: Option<f64>,
    #[serde(rename = "mAP75")]
    pub map_75: Option<f64>,
    #[serde(rename = "AP_s")]
    pub ap_small: Option<f64>,
    #[serde(rename = "AP_m")]
    pub ap_medium: Option<f64>,
    #[serde(rename = "AP_l")]
    pub ap_large: Option<f64>,
    #[serde(skip)]
    pub per_class: BTreeMap<usize, ClassAp>,
}

impl EvalReport {
    pub fn metrics(&self) -> [(&'static str, Option<f64>); 6] {
        [
            ("mAP", self.map_50_95),
            ("mAP50", self.map_50),
            ("mAP75", self.map_75),
            ("AP_s", self.ap_small),
            ("AP_m", self.ap_medium),
            ("AP_l", self.ap_large),
        ]
    }

    /// True if no metric could be computed (no ground truth and no detections).
    pub fn is_undefined(&self) -> bool {
        self.metrics().iter().all(|(_, v)| v.is_none())
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.metrics();
        for (name, _) in &m {
            write!(f, "{name:>8}")?;
        }
        writeln!(f)?;
        for (_, v) in &m {
            match v {
                Some(v) => write!(f, "{v:>8.3}")?,
                None => write!(f, "{:>8}", "n/a")?,
            }
        }
        Ok(())
    }
}

fn mean(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.into_iter().flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

type ClassImages<'a> = BTreeMap<usize, BTreeMap<&'a str, (Vec<&'a Detection>, Vec<&'a GroundTruth>)>>;

fn group<'a>(dets: &'a [Detection], gts: &'a [GroundTruth]) -> ClassImages<'a> {
    let mut by_class: ClassImages<'a> = BTreeMap::new();
    for d in dets {
        by_class
            .entry(d.class_id)
            .or_default()
            .entry(d.image_id.as_str())
            .or_default()
            .0
            .push(d);
    }
    for g in gts {
        by_class
            .entry(g.class_id)
            .or_default()
            .entry(g.image_id.as_str())
            .or_default()
            .1
            .push(g);
    }
    by_class
}

/// Per-class AP at every threshold for one area range; mean over thresholds per class.
fn range_class_means(by_class: &ClassImages<'_>, range: AreaRange) -> Vec<Option<f64>> {
    by_class
        .values()
        .map(|images| mean(iou_thresholds().iter().map(|&t| class_ap(images, t, range))))
        .collect()
}

/// Full report over the ten IoU thresholds and the three size buckets.
pub fn map_range(dets: &[Detection], gts: &[GroundTruth]) -> Result<EvalReport> {
    for d in dets {
        d.validate()?;
    }
    for g in gts {
        g.validate()?;
    }
    let known: BTreeSet<&str> = gts.iter().map(|g| g.image_id.as_str()).collect();
    if !gts.is_empty() {
        if let Some(d) = dets.iter().find(|d| !known.contains(d.image_id.as_str())) {
            return Err(Error::invalid(format!(
                "detection refers to unknown image `{}`",
                d.image_id
            )));
        }
    }
    let by_class = group(dets, gts);
    let mut per_class = BTreeMap::new();
    for (&class, images) in &by_class {
        let at = |t: f64| class_ap(images, t, AreaRange::All);
        per_class.insert(
            class,
            ClassAp {
                ap_50_95: mean(iou_thresholds().iter().map(|&t| at(t))),
                ap_50: at(0.5),
                ap_75: at(0.75),
            },
        );
    }
    Ok(EvalReport {
        map_50_95: mean(per_class.values().map(|c| c.ap_50_95)),
        map_50: mean(per_class.values().map(|c| c.ap_50)),
        map_75: mean(per_class.values().map(|c| c.ap_75)),
        ap_small: mean(range_class_means(&by_class, AreaRange::Small)),
        ap_medium: mean(range_class_means(&by_class, AreaRange::Medium)),
        ap_large: mean(range_class_means(&by_class, AreaRange::Large)),
        per_class,
    })
}

/// Per-class AP at a single threshold over all areas, keyed by class.
pub fn per_class_ap_at(dets: &[Detection], gts: &[GroundTruth], threshold: f64) -> HashMap<usize, Option<f64>> {
    group(dets, gts)
        .iter()
        .map(|(&c, images)| (c, class_ap(images, threshold, AreaRange::All)))
        .collect()
}
