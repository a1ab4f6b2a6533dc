//! Region-of-interest max pooling over `[C, L, H, W]` feature volumes.
//!
//! A region is a half-open span `[lo, hi)` of feature-map time units. Each
//! region is divided into a fixed `grid.l x grid.h x grid.w` lattice of bins
//! (the time span along the first grid axis, the full spatial extent along
//! the other two) and every bin reports its maximum cell. Bins are clamped so
//! each covers at least one cell even when the region is smaller than the
//! grid, in which case neighboring bins overlap.

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};
use crate::geometry::TemporalSegment;

/// Output lattice of the pooling operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGrid {
    pub l: usize,
    pub h: usize,
    pub w: usize,
}

impl PoolGrid {
    pub fn new(l: usize, h: usize, w: usize) -> Result<Self> {
        if l == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidConfig(format!(
                "pool grid axes must be positive, got ({l}, {h}, {w})"
            )));
        }
        Ok(PoolGrid { l, h, w })
    }

    pub fn cells(&self) -> usize {
        self.l * self.h * self.w
    }
}

/// Converts a frame-coordinate segment to a half-open span of feature-map
/// units: conservative outward rounding (floor of the start, ceiling of the
/// end), clipped to `[0, num_units]`. Errors when nothing remains.
pub fn project_to_units(
    segment: TemporalSegment,
    stride: usize,
    num_units: usize,
) -> Result<(usize, usize)> {
    if stride == 0 || num_units == 0 {
        return Err(Error::InvalidConfig(format!(
            "stride {stride} and num_units {num_units} must be positive"
        )));
    }
    let lo = (segment.start() / stride as f64).floor().max(0.0) as usize;
    let hi_raw = (segment.end() / stride as f64).ceil();
    let hi = (hi_raw.max(0.0) as usize).min(num_units);
    let lo = lo.min(num_units);
    if lo >= hi {
        return Err(Error::EmptyRegion(format!(
            "segment [{:.2}, {:.2}] maps to empty span [{lo}, {hi}) of {num_units} units",
            segment.start(),
            segment.end()
        )));
    }
    Ok((lo, hi))
}

/// Half-open bin boundaries partitioning `extent` cells into `bins` bins.
/// Edges follow `floor(k * extent / bins)`, then each bin is clamped to hold
/// at least one cell; when `extent < bins` neighboring bins overlap.
pub fn bin_edges(extent: usize, bins: usize) -> Vec<(usize, usize)> {
    debug_assert!(extent > 0 && bins > 0);
    let mut edges = Vec::with_capacity(bins);
    for k in 0..bins {
        let b0 = (k * extent / bins).min(extent - 1);
        let b1 = ((k + 1) * extent / bins).max(b0 + 1).min(extent);
        edges.push((b0, b1));
    }
    edges
}

/// Pools each region of `x` (`[C, L, H, W]`) to a `[C, grid.l, grid.h,
/// grid.w]` block of bin maxima. Returns the stacked `[R, C, ...]` output
/// and, per output cell, the flat index of the input cell that supplied the
/// maximum (ties keep the lowest flat index).
pub fn pool_forward<T: Real>(
    x: &Tensor<T>,
    regions: &[(usize, usize)],
    grid: PoolGrid,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let dims = x.dims();
    if dims.len() != 4 {
        return Err(Error::ShapeMismatch {
            expected: vec![0, 0, 0, 0],
            got: dims.to_vec(),
        });
    }
    let (c, l, h, w) = (dims[0], dims[1], dims[2], dims[3]);
    if regions.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    for &(lo, hi) in regions {
        if lo >= hi || hi > l {
            return Err(Error::EmptyRegion(format!(
                "region [{lo}, {hi}) invalid for time extent {l}"
            )));
        }
    }

    let r = regions.len();
    let mut y = Tensor::zeros(&[r, c, grid.l, grid.h, grid.w]);
    let mut argmax = vec![0usize; y.len()];
    let h_edges = bin_edges(h, grid.h);
    let w_edges = bin_edges(w, grid.w);
    let xv = x.data();
    {
        let yd = y.data_mut();
        for (ri, &(lo, hi)) in regions.iter().enumerate() {
            let t_edges = bin_edges(hi - lo, grid.l);
            for cc in 0..c {
                for (bt, &(t0, t1)) in t_edges.iter().enumerate() {
                    for (bh, &(h0, h1)) in h_edges.iter().enumerate() {
                        for (bw, &(w0, w1)) in w_edges.iter().enumerate() {
                            let mut best = ((cc * l + lo + t0) * h + h0) * w + w0;
                            let mut best_v = xv[best];
                            for t in t0..t1 {
                                for hh in h0..h1 {
                                    let base = ((cc * l + lo + t) * h + hh) * w;
                                    for ww in w0..w1 {
                                        let idx = base + ww;
                                        if xv[idx] > best_v {
                                            best_v = xv[idx];
                                            best = idx;
                                        }
                                    }
                                }
                            }
                            let oi = (((ri * c + cc) * grid.l + bt) * grid.h + bh) * grid.w + bw;
                            yd[oi] = best_v;
                            argmax[oi] = best;
                        }
                    }
                }
            }
        }
    }
    Ok((y, argmax))
}

/// Scatter-adds output gradients back to the input cells recorded in
/// `argmax`. `input_len` is the flat length of the pooled volume.
pub fn pool_backward<T: Real>(input_len: usize, argmax: &[usize], grad_out: &[T]) -> Vec<T> {
    debug_assert_eq!(argmax.len(), grad_out.len());
    let mut gx = vec![T::zero(); input_len];
    for (&src, &g) in argmax.iter().zip(grad_out) {
        gx[src] = gx[src] + g;
    }
    gx
}
