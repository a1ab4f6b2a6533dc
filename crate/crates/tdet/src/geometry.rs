//! Temporal interval arithmetic: IoU, anchor grids, and the center/length
//! offset transform used by both regression heads.
//!
//! Segments are kept in `(start, end)` form in input-frame units; the
//! `(center, length)` view is derived on demand. Anchors are generated
//! unclipped (they may extend past the buffer); clipping happens only on
//! final decoded detections.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A closed interval on the time axis, in input-frame units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalSegment {
    start: f64,
    end: f64,
}

impl TemporalSegment {
    /// Panics if `start > end` or either bound is non-finite; segment
    /// validity is an invariant, not a runtime condition.
    pub fn new(start: f64, end: f64) -> Self {
        assert!(
            start.is_finite() && end.is_finite() && start <= end,
            "invalid segment [{start}, {end}]"
        );
        Self { start, end }
    }

    pub fn from_center_length(center: f64, length: f64) -> Self {
        assert!(length >= 0.0, "negative length {length}");
        Self::new(center - 0.5 * length, center + 0.5 * length)
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn translate(&self, dt: f64) -> Self {
        Self::new(self.start + dt, self.end + dt)
    }

    /// Mirrors the segment inside `[0, extent]`: frame `t` maps to `extent - t`.
    pub fn mirror(&self, extent: f64) -> Self {
        Self::new(extent - self.end, extent - self.start)
    }

    /// Clamps the segment to `[lo, hi]`; `None` when nothing remains.
    pub fn clip(&self, lo: f64, hi: f64) -> Option<Self> {
        let s = self.start.max(lo);
        let e = self.end.min(hi);
        if s < e {
            Some(Self::new(s, e))
        } else {
            None
        }
    }
}

/// Regression offsets relative to a reference segment: a center shift
/// normalized by the reference length and the natural log of the length ratio.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetPair {
    pub delta_center: f64,
    pub delta_log_length: f64,
}

impl OffsetPair {
    pub const ZERO: OffsetPair = OffsetPair {
        delta_center: 0.0,
        delta_log_length: 0.0,
    };

    pub fn new(delta_center: f64, delta_log_length: f64) -> Self {
        Self {
            delta_center,
            delta_log_length,
        }
    }
}

/// Intersection-over-union of two segments. Degenerate cases (zero-length
/// union, zero-length operands with no overlap) return 0 so that assignment
/// logic stays total.
pub fn segment_iou(a: TemporalSegment, b: TemporalSegment) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.length() + b.length() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Expresses `gt` relative to `anchor` as a normalized center shift and a log
/// length ratio. Errors if either segment has zero length.
pub fn encode_offsets(anchor: TemporalSegment, gt: TemporalSegment) -> Result<OffsetPair> {
    if anchor.length() <= 0.0 {
        return Err(Error::DegenerateSegment(format!(
            "zero-length anchor [{}, {}]",
            anchor.start, anchor.end
        )));
    }
    if gt.length() <= 0.0 {
        return Err(Error::DegenerateSegment(format!(
            "zero-length ground truth [{}, {}]",
            gt.start, gt.end
        )));
    }
    Ok(OffsetPair::new(
        (gt.center() - anchor.center()) / anchor.length(),
        (gt.length() / anchor.length()).ln(),
    ))
}

/// Inverse of [`encode_offsets`]: applies the offsets to the anchor.
pub fn decode_offsets(anchor: TemporalSegment, offsets: OffsetPair) -> Result<TemporalSegment> {
    if anchor.length() <= 0.0 {
        return Err(Error::DegenerateSegment(format!(
            "zero-length anchor [{}, {}]",
            anchor.start, anchor.end
        )));
    }
    if !offsets.delta_center.is_finite() || !offsets.delta_log_length.is_finite() {
        return Err(Error::NonFinite("offset pair"));
    }
    let center = anchor.center() + offsets.delta_center * anchor.length();
    let length = anchor.length() * offsets.delta_log_length.exp();
    if !center.is_finite() || !length.is_finite() {
        return Err(Error::NonFinite("decoded segment"));
    }
    Ok(TemporalSegment::from_center_length(center, length))
}

/// The lattice of reference segments: the same `K` scales recur at every
/// temporal location, so the grid is translation-invariant by construction.
#[derive(Clone, Debug)]
pub struct AnchorGrid {
    stride: usize,
    scales: Vec<usize>,
    num_locations: usize,
    anchors: Vec<TemporalSegment>,
}

impl AnchorGrid {
    /// Builds the grid: the anchor at location `j`, scale `s` is centered at
    /// `(j + 0.5) * stride` with length `s * stride`, in input-frame units.
    /// Anchors are ordered location-major.
    pub fn generate(num_locations: usize, scales: &[usize], stride: usize) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::EmptyScales);
        }
        if num_locations == 0 || stride == 0 {
            return Err(Error::InvalidConfig(format!(
                "anchor grid needs num_locations >= 1 and stride >= 1, got {num_locations} and {stride}"
            )));
        }
        if let Some(&bad) = scales.iter().find(|&&s| s == 0) {
            return Err(Error::InvalidConfig(format!("anchor scale {bad} must be >= 1")));
        }
        let mut anchors = Vec::with_capacity(num_locations * scales.len());
        for j in 0..num_locations {
            let center = (j as f64 + 0.5) * stride as f64;
            for &s in scales {
                let length = (s * stride) as f64;
                anchors.push(TemporalSegment::from_center_length(center, length));
            }
        }
        Ok(Self {
            stride,
            scales: scales.to_vec(),
            num_locations,
            anchors,
        })
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn scales(&self) -> &[usize] {
        &self.scales
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn num_locations(&self) -> usize {
        self.num_locations
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn anchors(&self) -> &[TemporalSegment] {
        &self.anchors
    }

    /// Anchor at temporal location `j`, scale index `k`.
    pub fn anchor(&self, location: usize, scale_idx: usize) -> TemporalSegment {
        self.anchors[location * self.scales.len() + scale_idx]
    }

    /// Splits a flat anchor index back into `(location, scale index)`.
    pub fn unflatten(&self, idx: usize) -> (usize, usize) {
        (idx / self.scales.len(), idx % self.scales.len())
    }
}
