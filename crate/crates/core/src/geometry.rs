//! Axis-aligned and rotated boxes, and the IoU family of overlap metrics.
//!
//! For boxes `a`, `b` with intersection area `I`, union `U = |a| + |b| - I`,
//! smallest enclosing box `C`, and enclosing diagonal `c`:
//!
//! ```text
//! iou  = I / U
//! giou = iou - (|C| - U) / |C|
//! diou = iou - ρ²(center_a, center_b) / c²
//! ```
//!
//! Degenerate (zero-area) boxes are accepted; an error is returned only where
//! one of the denominators above vanishes.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Corner-form box. Serializes as `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    /// Box spanning `left/top/right/bottom` distances around a point.
    pub fn from_ltrb(cx: f64, cy: f64, ltrb: [f64; 4]) -> Result<Self> {
        Self::new(cx - ltrb[0], cy - ltrb[1], cx + ltrb[2], cy + ltrb[3])
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.to_array();
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite coordinate in {c:?}")));
        }
        if self.x1 > self.x2 || self.y1 > self.y2 {
            return Err(Error::InvalidBox(format!(
                "expected x1 <= x2 and y1 <= y2, got {c:?}"
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    pub fn intersection_area(&self, other: &Self) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Smallest axis-aligned box containing both.
    pub fn enclosing(&self, other: &Self) -> Self {
        Self {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }

    /// Euclidean distance between corner vectors.
    pub fn corner_distance(&self, other: &Self) -> f64 {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(c: [f64; 4]) -> Result<Self> {
        Self::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

fn union_area(a: &BoundingBox, b: &BoundingBox) -> f64 {
    a.area() + b.area() - a.intersection_area(b)
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let union = union_area(a, b);
    if union <= 0.0 {
        return Err(Error::Undefined("IoU of two boxes with zero union area"));
    }
    Ok(a.intersection_area(b) / union)
}

pub fn giou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let hull = a.enclosing(b).area();
    if hull <= 0.0 {
        return Err(Error::Undefined("GIoU with zero-area enclosing box"));
    }
    let union = union_area(a, b);
    // hull > 0 implies union > 0 unless both boxes are degenerate lines
    let iou = if union > 0.0 {
        a.intersection_area(b) / union
    } else {
        0.0
    };
    Ok(iou - (hull - union) / hull)
}

pub fn diou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let hull = a.enclosing(b);
    let diag2 = hull.width().powi(2) + hull.height().powi(2);
    if diag2 <= 0.0 {
        return Err(Error::Undefined("DIoU with zero enclosing diagonal"));
    }
    let union = union_area(a, b);
    let iou = if union > 0.0 {
        a.intersection_area(b) / union
    } else {
        0.0
    };
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    let rho2 = (ax - bx).powi(2) + (ay - by).powi(2);
    Ok(iou - rho2 / diag2)
}

/// `X[i][j] = diou(anchors[i], gts[j])`.
pub fn diou_matrix(anchors: &[BoundingBox], gts: &[BoundingBox]) -> Result<Vec<Vec<f64>>> {
    if anchors.is_empty() {
        return Err(Error::Empty("anchor list"));
    }
    if gts.is_empty() {
        return Err(Error::Empty("ground-truth list"));
    }
    anchors
        .iter()
        .map(|a| gts.iter().map(|g| diou(a, g)).collect())
        .collect()
}

/// Maps an angle into `[-π/2, π/2)`.
pub fn normalize_angle(theta: f64) -> f64 {
    let t = (theta + FRAC_PI_2).rem_euclid(PI) - FRAC_PI_2;
    // rem_euclid can round up to exactly PI
    if t >= FRAC_PI_2 {
        t - PI
    } else {
        t
    }
}

/// Five-parameter rotated box in long-edge form: `w >= h`, `θ ∈ [-π/2, π/2)`.
/// Serializes as `[cx, cy, w, h, θ]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 5]", into = "[f64; 5]")]
pub struct RotatedBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    theta: f64,
}

impl RotatedBox {
    /// Builds a box and normalizes it to long-edge form. When `h > w` the
    /// extents are swapped and the angle advanced by π/2.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, theta: f64) -> Result<Self> {
        if ![cx, cy, w, h, theta].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidBox("non-finite rotated box parameter".into()));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidBox(format!(
                "rotated box extents must be positive, got w={w}, h={h}"
            )));
        }
        let (w, h, theta) = if h > w {
            (h, w, theta + FRAC_PI_2)
        } else {
            (w, h, theta)
        };
        Ok(Self {
            cx,
            cy,
            w,
            h,
            theta: normalize_angle(theta),
        })
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
    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.cx, self.cy, self.w, self.h, self.theta]
    }

    /// Equality up to `tol`, treating angles modulo π.
    pub fn approx_eq(&self, other: &Self, tol: f64) -> bool {
        let dtheta = normalize_angle(self.theta - other.theta).abs();
        (self.cx - other.cx).abs() <= tol
            && (self.cy - other.cy).abs() <= tol
            && (self.w - other.w).abs() <= tol
            && (self.h - other.h).abs() <= tol
            && dtheta.min(PI - dtheta) <= tol
    }
}

impl TryFrom<[f64; 5]> for RotatedBox {
    type Error = Error;

    fn try_from(p: [f64; 5]) -> Result<Self> {
        Self::new(p[0], p[1], p[2], p[3], p[4])
    }
}

impl From<RotatedBox> for [f64; 5] {
    fn from(b: RotatedBox) -> Self {
        b.to_array()
    }
}

/// Encoded regression targets `(δx, δy, δw, δh, δθ)` of a rotated box
/// relative to an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotatedDeltas {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
    pub dtheta: f64,
}

impl RotatedDeltas {
    pub fn to_array(&self) -> [f64; 5] {
        [self.dx, self.dy, self.dw, self.dh, self.dtheta]
    }

    pub fn from_array(d: [f64; 5]) -> Self {
        Self {
            dx: d[0],
            dy: d[1],
            dw: d[2],
            dh: d[3],
            dtheta: d[4],
        }
    }
}

/// Standard parametric encoding:
/// `δx = (x_g - x_a)/w_a`, `δy = (y_g - y_a)/h_a`, `δw = ln(w_g/w_a)`,
/// `δh = ln(h_g/h_a)`, `δθ = norm(θ_g - θ_a)`.
pub fn encode_rotated(anchor: &RotatedBox, gt: &RotatedBox) -> Result<RotatedDeltas> {
    if anchor.w <= 0.0 || anchor.h <= 0.0 {
        return Err(Error::InvalidBox("anchor extents must be positive".into()));
    }
    Ok(RotatedDeltas {
        dx: (gt.cx - anchor.cx) / anchor.w,
        dy: (gt.cy - anchor.cy) / anchor.h,
        dw: (gt.w / anchor.w).ln(),
        dh: (gt.h / anchor.h).ln(),
        dtheta: normalize_angle(gt.theta - anchor.theta),
    })
}

pub fn decode_rotated(anchor: &RotatedBox, d: &RotatedDeltas) -> Result<RotatedBox> {
    if anchor.w <= 0.0 || anchor.h <= 0.0 {
        return Err(Error::InvalidBox("anchor extents must be positive".into()));
    }
    if !d.to_array().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("rotated deltas"));
    }
    RotatedBox::new(
        anchor.cx + d.dx * anchor.w,
        anchor.cy + d.dy * anchor.h,
        anchor.w * d.dw.exp(),
        anchor.h * d.dh.exp(),
        anchor.theta + d.dtheta,
    )
}
