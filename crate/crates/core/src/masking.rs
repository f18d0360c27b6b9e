//! Foreground-masked averaging of per-pixel losses.
//!
//! Background pixels contribute zero and the mean is taken over the
//! foreground count only.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, Var};

fn check_mask<R: Real>(map_shape: &[usize], mask: &Tensor<R>) -> Result<f64> {
    if mask.shape() != map_shape {
        return Err(Error::dim(format!(
            "mask {:?} does not match loss map {:?}",
            mask.shape(),
            map_shape
        )));
    }
    let mut count = 0.0;
    for &m in mask.data() {
        if m == R::one() {
            count += 1.0;
        } else if m != R::zero() {
            return Err(Error::Contract(format!("mask value {m} is not binary")));
        }
    }
    if count == 0.0 {
        return Err(Error::EmptyForeground);
    }
    Ok(count)
}

/// Mean of `map` over mask-foreground pixels, or over all pixels without a mask.
pub fn masked_mean<'t, R: Real>(map: Var<'t, R>, mask: Option<&Tensor<R>>) -> Result<Var<'t, R>> {
    match mask {
        None => Ok(map.mean()),
        Some(mask) => {
            let count = check_mask(&map.shape(), mask)?;
            let m = map.tape().constant(mask.clone());
            Ok(map.mul(m)?.sum().scale(1.0 / count))
        }
    }
}

/// Value-only counterpart of [`masked_mean`], accumulated in `f64`.
pub fn masked_mean_value<R: Real>(map: &Tensor<R>, mask: Option<&Tensor<R>>) -> Result<f64> {
    match mask {
        None => Ok(map.sum_f64() / map.numel() as f64),
        Some(mask) => {
            let count = check_mask(map.shape(), mask)?;
            let total: f64 = map
                .data()
                .iter()
                .zip(mask.data())
                .filter(|(_, &m)| m == R::one())
                .map(|(v, _)| v.f64())
                .sum();
            Ok(total / count)
        }
    }
}

/// Maximum of `map` over the foreground.
pub fn masked_max<R: Real>(map: &Tensor<R>, mask: &Tensor<R>) -> Result<f64> {
    check_mask(map.shape(), mask)?;
    Ok(map
        .data()
        .iter()
        .zip(mask.data())
        .filter(|(_, &m)| m == R::one())
        .map(|(v, _)| v.f64())
        .fold(f64::NEG_INFINITY, f64::max))
}
