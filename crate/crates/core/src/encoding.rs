//! Proposal-relative regression targets.
//!
//! Curve targets express every control point as an offset from the proposal
//! center normalized by proposal width and height. Box targets use the usual
//! center-offset / log-size deltas.

use crate::error::{Error, Result};
use crate::geometry::{AxisBox, BezierText, Point2};
use crate::scalar::Real;

pub const CURVE_TARGET_LEN: usize = 16;
pub const BOX_TARGET_LEN: usize = 4;

/// `(t_x, t_y)` per control point, canonical control-point order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveTarget<T> {
    pub offsets: [T; CURVE_TARGET_LEN],
}

/// `(dx, dy, dlog_w, dlog_h)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxTarget<T> {
    pub deltas: [T; BOX_TARGET_LEN],
}

impl<T: Real> CurveTarget<T> {
    pub fn zeros() -> Self {
        Self {
            offsets: [T::zero(); CURVE_TARGET_LEN],
        }
    }

    pub fn from_slice(values: &[T]) -> Result<Self> {
        let offsets: [T; CURVE_TARGET_LEN] = values.try_into().map_err(|_| {
            Error::ShapeMismatch(format!("curve target needs 16 values, got {}", values.len()))
        })?;
        Ok(Self { offsets })
    }

    pub fn is_finite(&self) -> bool {
        self.offsets.iter().all(|v| v.is_finite())
    }
}

impl<T: Real> BoxTarget<T> {
    pub fn zeros() -> Self {
        Self {
            deltas: [T::zero(); BOX_TARGET_LEN],
        }
    }

    pub fn from_slice(values: &[T]) -> Result<Self> {
        let deltas: [T; BOX_TARGET_LEN] = values.try_into().map_err(|_| {
            Error::ShapeMismatch(format!("box target needs 4 values, got {}", values.len()))
        })?;
        Ok(Self { deltas })
    }
}

fn check_proposal<T: Real>(p: &AxisBox<T>) -> Result<()> {
    p.validate()
}

pub fn encode_curve<T: Real>(gt: &BezierText<T>, p: &AxisBox<T>) -> Result<CurveTarget<T>> {
    check_proposal(p)?;
    let mut offsets = [T::zero(); CURVE_TARGET_LEN];
    for (i, c) in gt.control_points().iter().enumerate() {
        offsets[2 * i] = (c.x - p.cx) / p.w;
        offsets[2 * i + 1] = (c.y - p.cy) / p.h;
    }
    Ok(CurveTarget { offsets })
}

pub fn decode_curve<T: Real>(t: &CurveTarget<T>, p: &AxisBox<T>) -> BezierText<T> {
    let pts = std::array::from_fn(|i| {
        Point2::new(
            p.cx + t.offsets[2 * i] * p.w,
            p.cy + t.offsets[2 * i + 1] * p.h,
        )
    });
    BezierText::from_control_points(pts)
}

pub fn encode_box<T: Real>(gt: &AxisBox<T>, p: &AxisBox<T>) -> Result<BoxTarget<T>> {
    check_proposal(p)?;
    gt.validate()?;
    Ok(BoxTarget {
        deltas: [
            (gt.cx - p.cx) / p.w,
            (gt.cy - p.cy) / p.h,
            (gt.w / p.w).ln(),
            (gt.h / p.h).ln(),
        ],
    })
}

/// Inverse of [`encode_box`]. The result is not clipped to any image.
pub fn decode_box<T: Real>(t: &BoxTarget<T>, p: &AxisBox<T>) -> AxisBox<T> {
    let [dx, dy, dw, dh] = t.deltas;
    AxisBox {
        cx: p.cx + dx * p.w,
        cy: p.cy + dy * p.h,
        w: p.w * dw.exp(),
        h: p.h * dh.exp(),
    }
}
