use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normalized center-size box. Width and height are strictly positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

/// Corner form `(x1, y1, x2, y2)` with `x1 < x2`, `y1 < y2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Corners {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Corners {
    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if ![cx, cy, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("BoundingBox::new"));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::invalid(format!("degenerate box with w = {w}, h = {h}")));
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }

    pub fn cy(&self) -> f64 {
        self.cy
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn corners(&self) -> Corners {
        Corners {
            x1: self.cx - self.w / 2.0,
            y1: self.cy - self.h / 2.0,
            x2: self.cx + self.w / 2.0,
            y2: self.cy + self.h / 2.0,
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// True if the corner form lies inside `[0, 1]²`.
    pub fn within_unit_square(&self) -> bool {
        let c = self.corners();
        c.x1 >= 0.0 && c.y1 >= 0.0 && c.x2 <= 1.0 && c.y2 <= 1.0
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

/// Intersection, union and enclosing-hull areas of two boxes.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Overlap {
    pub inter: f64,
    pub union: f64,
    pub hull: f64,
}

pub(crate) fn overlap(a: &BoundingBox, b: &BoundingBox) -> Overlap {
    let (ca, cb) = (a.corners(), b.corners());
    let iw = (ca.x2.min(cb.x2) - ca.x1.max(cb.x1)).max(0.0);
    let ih = (ca.y2.min(cb.y2) - ca.y1.max(cb.y1)).max(0.0);
    let inter = iw * ih;
    let union = ca.area() + cb.area() - inter;
    let hull = (ca.x2.max(cb.x2) - ca.x1.min(cb.x1)) * (ca.y2.max(cb.y2) - ca.y1.min(cb.y1));
    Overlap { inter, union, hull }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let o = overlap(a, b);
    o.inter / o.union
}

/// `1 − IoU + |hull \ union| / |hull|`, in `[0, 2)`.
pub fn giou_loss(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let o = overlap(a, b);
    1.0 - o.inter / o.union + (o.hull - o.union) / o.hull
}
