//! 1-D temporal interval algebra: spans, IoU, generalized IoU, and
//! coordinate conversions shared by matching, losses, and metrics.
//!
//! All interval math is carried out in `f64` regardless of what precision
//! the model runs at, so metric and oracle computations stay exact.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimum normalized width produced by coordinate conversions. Keeps the
/// gIoU and L1 losses finite on degenerate (zero-width) predictions.
pub const MIN_NORMALIZED_WIDTH: f64 = 1e-4;

#[derive(Debug, Error, PartialEq)]
pub enum SpanError {
    #[error("span start {start} exceeds end {end}")]
    Inverted { start: f64, end: f64 },
    #[error("normalized span ({start}, {end}) outside [0, 1]")]
    OutOfUnitRange { start: f64, end: f64 },
    #[error("span endpoints must be finite, got ({start}, {end})")]
    NonFinite { start: f64, end: f64 },
    #[error("cannot combine a span in {0:?} units with one in {1:?} units")]
    UnitMismatch(SpanUnit, SpanUnit),
    #[error("duration must be positive, got {0}")]
    NonPositiveDuration(f64),
    #[error("span ({start}, {end}) does not fit in duration {duration}")]
    OutsideDuration { start: f64, end: f64, duration: f64 },
    #[error("frame span ({l_s}, {l_e}) invalid for {num_frames} frames")]
    BadFrameSpan { l_s: usize, l_e: usize, num_frames: usize },
}

/// Unit of a [`TemporalSpan`]: wall-clock seconds or a fraction of the
/// video duration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpanUnit {
    Seconds,
    Normalized,
}

/// A closed interval `[start, end]` on a video timeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemporalSpan {
    start: f64,
    end: f64,
    unit: SpanUnit,
}

impl TemporalSpan {
    pub fn new(start: f64, end: f64, unit: SpanUnit) -> Result<Self, SpanError> {
        if !start.is_finite() || !end.is_finite() {
            return Err(SpanError::NonFinite { start, end });
        }
        if start > end {
            return Err(SpanError::Inverted { start, end });
        }
        if unit == SpanUnit::Normalized && (start < 0.0 || end > 1.0) {
            return Err(SpanError::OutOfUnitRange { start, end });
        }
        Ok(Self { start, end, unit })
    }

    pub fn seconds(start: f64, end: f64) -> Result<Self, SpanError> {
        Self::new(start, end, SpanUnit::Seconds)
    }

    pub fn normalized(start: f64, end: f64) -> Result<Self, SpanError> {
        Self::new(start, end, SpanUnit::Normalized)
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn unit(&self) -> SpanUnit {
        self.unit
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }
}

/// A normalized span in (center, width) form, the parameterization used by
/// the learnable decoder anchors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenterWidthSpan {
    pub center: f64,
    pub width: f64,
}

/// Inclusive frame-feature index range. `|[l_s, l_e]|` counts
/// `l_e + 1 - l_s` frames, matching the segment-pooling denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameIndexSpan {
    pub l_s: usize,
    pub l_e: usize,
}

impl FrameIndexSpan {
    pub fn new(l_s: usize, l_e: usize, num_frames: usize) -> Result<Self, SpanError> {
        if l_s > l_e || l_e >= num_frames {
            return Err(SpanError::BadFrameSpan { l_s, l_e, num_frames });
        }
        Ok(Self { l_s, l_e })
    }

    pub fn num_frames(&self) -> usize {
        self.l_e + 1 - self.l_s
    }
}

fn check_units(a: &TemporalSpan, b: &TemporalSpan) -> Result<(), SpanError> {
    if a.unit != b.unit {
        return Err(SpanError::UnitMismatch(a.unit, b.unit));
    }
    Ok(())
}

/// Intersection over union of two spans. Returns 0 when the union has zero
/// length.
pub fn iou_1d(a: &TemporalSpan, b: &TemporalSpan) -> Result<f64, SpanError> {
    check_units(a, b)?;
    Ok(iou_raw(a.start, a.end, b.start, b.end))
}

/// IoU on raw endpoints; callers guarantee consistent units.
pub fn iou_raw(a_start: f64, a_end: f64, b_start: f64, b_end: f64) -> f64 {
    let inter = (a_end.min(b_end) - a_start.max(b_start)).max(0.0);
    let union = (a_end - a_start) + (b_end - b_start) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `IoU(a, b) - |C \ (a ∪ b)| / |C|` where `C` is the
/// smallest span enclosing both. Coincident zero-length spans give 1.0.
pub fn giou_1d(a: &TemporalSpan, b: &TemporalSpan) -> Result<f64, SpanError> {
    check_units(a, b)?;
    Ok(giou_raw(a.start, a.end, b.start, b.end))
}

pub fn giou_raw(a_start: f64, a_end: f64, b_start: f64, b_end: f64) -> f64 {
    let inter = (a_end.min(b_end) - a_start.max(b_start)).max(0.0);
    let union = (a_end - a_start) + (b_end - b_start) - inter;
    let enclosing = a_end.max(b_end) - a_start.min(b_start);
    if enclosing <= 0.0 {
        // Both spans are zero-length and coincident.
        return 1.0;
    }
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    iou - (enclosing - union) / enclosing
}

/// Convert a second-valued span to normalized (center, width) coordinates.
/// Width is clamped to at least [`MIN_NORMALIZED_WIDTH`].
pub fn to_center_width(span: &TemporalSpan, duration: f64) -> Result<CenterWidthSpan, SpanError> {
    if duration <= 0.0 || !duration.is_finite() {
        return Err(SpanError::NonPositiveDuration(duration));
    }
    if span.start < 0.0 || span.end > duration {
        return Err(SpanError::OutsideDuration { start: span.start, end: span.end, duration });
    }
    Ok(CenterWidthSpan {
        center: (span.start + span.end) / (2.0 * duration),
        width: ((span.end - span.start) / duration).max(MIN_NORMALIZED_WIDTH),
    })
}

/// Inverse of [`to_center_width`]: reconstruct a second-valued span.
pub fn from_center_width(cw: &CenterWidthSpan, duration: f64) -> Result<TemporalSpan, SpanError> {
    if duration <= 0.0 || !duration.is_finite() {
        return Err(SpanError::NonPositiveDuration(duration));
    }
    let start = (cw.center - cw.width / 2.0) * duration;
    let end = (cw.center + cw.width / 2.0) * duration;
    TemporalSpan::seconds(start.max(0.0), end.min(duration).max(start.max(0.0)))
}

/// Map a ground-truth span in seconds onto inclusive frame-feature indices:
/// `l_s = floor(t_s / duration * L_v)`, `l_e = min(L_v - 1, ceil(t_e / duration * L_v) - 1)`,
/// with `l_e >= l_s` enforced for empty spans.
pub fn seconds_to_frame_span(
    span: &TemporalSpan,
    duration: f64,
    num_frames: usize,
) -> Result<FrameIndexSpan, SpanError> {
    if duration <= 0.0 {
        return Err(SpanError::NonPositiveDuration(duration));
    }
    if num_frames == 0 {
        return Err(SpanError::BadFrameSpan { l_s: 0, l_e: 0, num_frames });
    }
    let lv = num_frames as f64;
    let l_s = ((span.start / duration * lv).floor() as usize).min(num_frames - 1);
    let raw_e = (span.end / duration * lv).ceil() as isize - 1;
    let l_e = raw_e.max(l_s as isize) as usize;
    let l_e = l_e.min(num_frames - 1);
    FrameIndexSpan::new(l_s, l_e, num_frames)
}

/// Frame index span back to the second range it covers.
pub fn frame_span_to_seconds(span: &FrameIndexSpan, duration: f64, num_frames: usize) -> TemporalSpan {
    let per = duration / num_frames as f64;
    TemporalSpan {
        start: span.l_s as f64 * per,
        end: (span.l_e + 1) as f64 * per,
        unit: SpanUnit::Seconds,
    }
}
