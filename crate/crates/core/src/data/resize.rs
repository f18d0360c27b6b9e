//! Bilinear resampling with half-pixel-center alignment.

use super::depth::{ForegroundMask, Resolution};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Source taps `(i0, i1, frac)` for output index `o` when mapping `n_in`
/// samples onto `n_out`. Coordinates are clamped at the edges.
pub(crate) fn taps(o: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, src - i0 as f64)
}

/// Resizes a `[H, W]` map to `[h, w]`.
pub fn bilinear_resize(x: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    if x.rank() != 2 || h == 0 || w == 0 {
        return Err(Error::dim(format!("cannot resize {:?} to {h}x{w}", x.shape())));
    }
    let (hi, wi) = (x.shape()[0], x.shape()[1]);
    let rows: Vec<_> = (0..h).map(|o| taps(o, hi, h)).collect();
    let cols: Vec<_> = (0..w).map(|o| taps(o, wi, w)).collect();
    let at = |r: usize, c: usize| x.data()[r * wi + c] as f64;
    Ok(Tensor::from_fn([h, w], |idx| {
        let (r0, r1, fy) = rows[idx / w];
        let (c0, c1, fx) = cols[idx % w];
        let top = at(r0, c0) * (1.0 - fx) + at(r0, c1) * fx;
        let bottom = at(r1, c0) * (1.0 - fx) + at(r1, c1) * fx;
        (top * (1.0 - fy) + bottom * fy) as f32
    }))
}

/// Bilinear downsampling of a full-resolution mask, then `> 0`.
pub fn downsample_mask(m: &ForegroundMask, h: usize, w: usize) -> Result<ForegroundMask> {
    let r = bilinear_resize(&m.mask, h, w)?;
    Ok(ForegroundMask {
        mask: r.map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
        resolution: Resolution::Feature,
    })
}
