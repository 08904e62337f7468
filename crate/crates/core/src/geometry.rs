//! Axis-aligned boxes in normalized center format and the overlap primitives
//! used by matching, losses and metrics.
//!
//! Coordinates are never clamped here. A box may extend past the unit square;
//! only a strictly positive width and height are required.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normalized center-format box `(cx, cy, w, h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct BBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

#[derive(Serialize, Deserialize)]
struct RawBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

impl TryFrom<RawBox> for BBox {
    type Error = Error;

    fn try_from(r: RawBox) -> Result<Self> {
        BBox::new(r.cx, r.cy, r.w, r.h)
    }
}

impl From<BBox> for RawBox {
    fn from(b: BBox) -> Self {
        RawBox { cx: b.cx, cy: b.cy, w: b.w, h: b.h }
    }
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let finite = cx.is_finite() && cy.is_finite() && w.is_finite() && h.is_finite();
        if !finite || w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidBox { cx, cy, w, h });
        }
        Ok(Self { cx, cy, w, h })
    }

    /// Builds a box from corner coordinates `(x1, y1, x2, y2)`.
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

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Fields in `(cx, cy, w, h)` order.
    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }

    /// `(x1, y1, x2, y2)`.
    pub fn to_corners(&self) -> [f64; 4] {
        [self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.cx + self.w / 2.0, self.cy + self.h / 2.0]
    }

    /// Returns the box clipped to the unit square, or `None` if nothing
    /// of it remains inside.
    pub fn clamp_to_unit(&self) -> Option<Self> {
        let [x1, y1, x2, y2] = self.to_corners();
        Self::from_corners(x1.max(0.0), y1.max(0.0), x2.min(1.0), y2.min(1.0)).ok()
    }
}

struct Overlap {
    inter: f64,
    union: f64,
    enclosing: f64,
}

fn overlap(a: &BBox, b: &BBox) -> Overlap {
    let [ax1, ay1, ax2, ay2] = a.to_corners();
    let [bx1, by1, bx2, by2] = b.to_corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let ew = ax2.max(bx2) - ax1.min(bx1);
    let eh = ay2.max(by2) - ay1.min(by1);
    Overlap { inter, union, enclosing: ew * eh }
}

pub fn to_corners(b: &BBox) -> [f64; 4] {
    b.to_corners()
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let o = overlap(a, b);
    o.inter / o.union
}

/// Generalized IoU, in `(-1, 1]`.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let o = overlap(a, b);
    // rounding can put the enclosing area a hair under the union
    o.inter / o.union - (o.enclosing - o.union).max(0.0) / o.enclosing
}

/// Sum of absolute differences of the center-format fields.
pub fn l1_box(a: &BBox, b: &BBox) -> f64 {
    a.to_array().iter().zip(b.to_array().iter()).map(|(x, y)| (x - y).abs()).sum()
}

/// Per-axis interval derivatives of the overlap and enclosing extents with
/// respect to the low and high edges of `a` on that axis.
struct AxisGrad {
    overlap: f64,
    d_overlap_lo: f64,
    d_overlap_hi: f64,
    enclosing: f64,
    d_enclosing_lo: f64,
    d_enclosing_hi: f64,
}

fn axis_grad(a_lo: f64, a_hi: f64, b_lo: f64, b_hi: f64) -> AxisGrad {
    let raw = a_hi.min(b_hi) - a_lo.max(b_lo);
    // Touching or disjoint intervals take the derivative of the clamped side.
    let (overlap, d_overlap_lo, d_overlap_hi) = if raw > 0.0 {
        let lo = if a_lo >= b_lo { -1.0 } else { 0.0 };
        let hi = if a_hi <= b_hi { 1.0 } else { 0.0 };
        (raw, lo, hi)
    } else {
        (0.0, 0.0, 0.0)
    };
    let enclosing = a_hi.max(b_hi) - a_lo.min(b_lo);
    let d_enclosing_lo = if a_lo <= b_lo { -1.0 } else { 0.0 };
    let d_enclosing_hi = if a_hi >= b_hi { 1.0 } else { 0.0 };
    AxisGrad { overlap, d_overlap_lo, d_overlap_hi, enclosing, d_enclosing_lo, d_enclosing_hi }
}

/// Analytic gradient of [`giou`] with respect to the `(cx, cy, w, h)` fields
/// of `a`. Kinks where edges coincide resolve to a fixed one-sided branch.
pub fn giou_grad(a: &BBox, b: &BBox) -> [f64; 4] {
    let [ax1, ay1, ax2, ay2] = a.to_corners();
    let [bx1, by1, bx2, by2] = b.to_corners();
    let gx = axis_grad(ax1, ax2, bx1, bx2);
    let gy = axis_grad(ay1, ay2, by1, by2);

    let inter = gx.overlap * gy.overlap;
    let union = a.area() + b.area() - inter;
    let enclosing = gx.enclosing * gy.enclosing;

    // giou = I/U - 1 + U/E with U = A_a + A_b - I
    let d_inter = 1.0 / union + inter / (union * union) - 1.0 / enclosing;
    let d_area_a = -inter / (union * union) + 1.0 / enclosing;
    let d_enclosing = -union / (enclosing * enclosing);

    let dx_lo = d_inter * gy.overlap * gx.d_overlap_lo + d_enclosing * gy.enclosing * gx.d_enclosing_lo;
    let dx_hi = d_inter * gy.overlap * gx.d_overlap_hi + d_enclosing * gy.enclosing * gx.d_enclosing_hi;
    let dy_lo = d_inter * gx.overlap * gy.d_overlap_lo + d_enclosing * gx.enclosing * gy.d_enclosing_lo;
    let dy_hi = d_inter * gx.overlap * gy.d_overlap_hi + d_enclosing * gx.enclosing * gy.d_enclosing_hi;

    [dx_lo + dx_hi, dy_lo + dy_hi, 0.5 * (dx_hi - dx_lo) + d_area_a * a.h, 0.5 * (dy_hi - dy_lo) + d_area_a * a.w]
}
