//! Sinusoidal 2-D positional encoding.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `[c_pe, h, w]` encoding. The first half of the channels encodes the row,
/// the second half the column, each as interleaved sin/cos pairs with
/// frequencies `1 / 10000^(4k / c_pe)`.
pub fn positional_encoding<R: Real>(h: usize, w: usize, c_pe: usize) -> Result<Tensor<R>> {
    if c_pe == 0 || c_pe % 4 != 0 {
        return Err(Error::Config(format!(
            "positional channels must be a positive multiple of 4, got {c_pe}"
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::dim("empty positional grid"));
    }
    let half = c_pe / 2;
    Ok(Tensor::from_fn([c_pe, h, w], |idx| {
        let c = idx / (h * w);
        let (i, j) = ((idx / w) % h, idx % w);
        let (pos, c) = if c < half { (i, c) } else { (j, c - half) };
        let k = c / 2;
        let omega = 1.0 / 10000f64.powf(4.0 * k as f64 / c_pe as f64);
        let angle = omega * pos as f64;
        R::of(if c % 2 == 0 { angle.sin() } else { angle.cos() })
    }))
}
