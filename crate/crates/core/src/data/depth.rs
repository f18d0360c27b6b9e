//! Depth-map preprocessing: hole filling, background plane, foreground
//! extraction and normalization.

use serde::{Deserialize, Serialize};

use super::resize::{bilinear_resize, downsample_mask};
use crate::error::{Error, Result};
use crate::tensor::{pixel_unshuffle, Tensor};

/// Depth in centimeters with a per-pixel validity flag.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    /// `[H, W]`, 0 where invalid.
    pub values: Tensor<f32>,
    /// `[H, W]`, 1 where the sensor reported a value.
    pub validity: Tensor<f32>,
}

impl DepthMap {
    pub fn new(values: Tensor<f32>, validity: Tensor<f32>) -> Result<Self> {
        if values.rank() != 2 || values.shape() != validity.shape() {
            return Err(Error::dim(format!(
                "depth {:?} with validity {:?}",
                values.shape(),
                validity.shape()
            )));
        }
        let mut values = values;
        for (v, &ok) in values.data_mut().iter_mut().zip(validity.data()) {
            if ok == 0.0 {
                *v = 0.0;
            } else if ok != 1.0 {
                return Err(Error::Contract("validity must be binary".into()));
            }
        }
        Ok(Self { values, validity })
    }

    /// Sensor convention: 0 (or non-finite) means missing.
    pub fn from_raw(values: Tensor<f32>) -> Result<Self> {
        let validity = values.map(|v| if v != 0.0 && v.is_finite() { 1.0 } else { 0.0 });
        Self::new(values, validity)
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    fn valid(&self, i: usize, j: usize) -> bool {
        self.validity.data()[i * self.width() + j] == 1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resolution {
    Full,
    Feature,
}

/// Binary foreground map.
#[derive(Clone, Debug, PartialEq)]
pub struct ForegroundMask {
    pub mask: Tensor<f32>,
    pub resolution: Resolution,
}

impl ForegroundMask {
    pub fn count(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m == 1.0).count()
    }
}

/// Parameters of the depth preprocessing chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub fill_iterations: usize,
    /// Foreground threshold in centimeters.
    pub threshold_cm: f64,
    /// Side of the square dilation element.
    pub dilation: usize,
    /// Depth maps are resized to this `(H, W)` before unshuffling.
    pub resize: (usize, usize),
    pub unshuffle: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            fill_iterations: 3,
            threshold_cm: 0.7,
            dilation: 8,
            resize: (192, 192),
            unshuffle: 8,
        }
    }
}

impl PreprocessConfig {
    pub fn feature_size(&self) -> (usize, usize) {
        (self.resize.0 / self.unshuffle, self.resize.1 / self.unshuffle)
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.unshuffle;
        if f == 0 || self.resize.0 % f != 0 || self.resize.1 % f != 0 {
            return Err(Error::Config(format!(
                "unshuffle factor {f} must divide resize {:?}",
                self.resize
            )));
        }
        if self.dilation == 0 {
            return Err(Error::Config("dilation size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Fills invalid pixels with the mean of their valid 8-neighbors, three
/// times, updating all pixels of an iteration simultaneously.
pub fn fill_missing_depth(d: &DepthMap) -> DepthMap {
    fill_missing_depth_iters(d, 3)
}

pub fn fill_missing_depth_iters(d: &DepthMap, iterations: usize) -> DepthMap {
    let (h, w) = (d.height(), d.width());
    let mut cur = d.clone();
    for _ in 0..iterations {
        let mut next = cur.clone();
        let mut changed = false;
        for i in 0..h {
            for j in 0..w {
                if cur.valid(i, j) {
                    continue;
                }
                let (mut sum, mut n) = (0.0f64, 0usize);
                for di in -1isize..=1 {
                    for dj in -1isize..=1 {
                        if di == 0 && dj == 0 {
                            continue;
                        }
                        let (ni, nj) = (i as isize + di, j as isize + dj);
                        if ni < 0 || nj < 0 || ni >= h as isize || nj >= w as isize {
                            continue;
                        }
                        let (ni, nj) = (ni as usize, nj as usize);
                        if cur.valid(ni, nj) {
                            sum += cur.values.data()[ni * w + nj] as f64;
                            n += 1;
                        }
                    }
                }
                if n > 0 {
                    next.values.data_mut()[i * w + j] = (sum / n as f64) as f32;
                    next.validity.data_mut()[i * w + j] = 1.0;
                    changed = true;
                }
            }
        }
        cur = next;
        if !changed {
            break;
        }
    }
    cur
}

/// Bilinear interpolation of the four corner depths over the whole image.
pub fn background_plane(d: &DepthMap) -> Result<Tensor<f32>> {
    let (h, w) = (d.height(), d.width());
    let corners = [(0, 0), (0, w - 1), (h - 1, 0), (h - 1, w - 1)];
    for &(r, c) in &corners {
        if !d.valid(r, c) {
            return Err(Error::InvalidCorner { row: r, col: c });
        }
    }
    let at = |r: usize, c: usize| d.values.data()[r * w + c] as f64;
    let (tl, tr, bl, br) = (at(0, 0), at(0, w - 1), at(h - 1, 0), at(h - 1, w - 1));
    let frac = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
    Ok(Tensor::from_fn([h, w], |idx| {
        let (v, u) = (frac(idx / w, h), frac(idx % w, w));
        let top = tl * (1.0 - u) + tr * u;
        let bottom = bl * (1.0 - u) + br * u;
        (top * (1.0 - v) + bottom * v) as f32
    }))
}

/// Square binary dilation. The element spans offsets
/// `-(size-1)/2 ..= size/2` on both axes, i.e. a single foreground pixel
/// grows into a `size x size` block extending one extra pixel toward larger
/// indices when `size` is even.
pub fn dilate(mask: &Tensor<f32>, size: usize) -> Tensor<f32> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let (lo, hi) = ((size.max(1) - 1) / 2, size / 2);
    // output(i) = max over input(i - b), b in [-lo, hi]
    let window = |i: usize, n: usize| (i.saturating_sub(hi), (i + lo).min(n - 1));
    let mut rows = vec![0.0f32; h * w];
    for i in 0..h {
        for j in 0..w {
            let (a, b) = window(j, w);
            rows[i * w + j] = (a..=b).map(|k| mask.data()[i * w + k]).fold(0.0, f32::max);
        }
    }
    Tensor::from_fn([h, w], |idx| {
        let (i, j) = (idx / w, idx % w);
        let (a, b) = window(i, h);
        (a..=b).map(|k| rows[k * w + j]).fold(0.0, f32::max)
    })
}

/// Pixels further than `threshold_cm` from the plane, dilated.
pub fn extract_foreground(
    d: &DepthMap,
    plane: &Tensor<f32>,
    threshold_cm: f64,
    dilation: usize,
) -> Result<ForegroundMask> {
    if plane.shape() != d.values.shape() {
        return Err(Error::dim("plane does not match depth map"));
    }
    let raw = Tensor::from_fn(d.values.shape(), |i| {
        let off = (d.values.data()[i] as f64 - plane.data()[i] as f64).abs();
        if d.validity.data()[i] == 1.0 && off > threshold_cm {
            1.0
        } else {
            0.0
        }
    });
    Ok(ForegroundMask {
        mask: dilate(&raw, dilation),
        resolution: Resolution::Full,
    })
}

/// Subtracts the mean depth of valid foreground pixels and zeroes the rest.
pub fn normalize_depth(d: &DepthMap, mask: &ForegroundMask) -> Result<DepthMap> {
    if mask.mask.shape() != d.values.shape() {
        return Err(Error::dim("mask does not match depth map"));
    }
    let keep: Vec<bool> = mask
        .mask
        .data()
        .iter()
        .zip(d.validity.data())
        .map(|(&m, &v)| m == 1.0 && v == 1.0)
        .collect();
    let n = keep.iter().filter(|&&k| k).count();
    if n == 0 {
        return Err(Error::EmptyForeground);
    }
    let mean = d
        .values
        .data()
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(&v, _)| v as f64)
        .sum::<f64>()
        / n as f64;
    let values = Tensor::from_fn(d.values.shape(), |i| {
        if keep[i] {
            (d.values.data()[i] as f64 - mean) as f32
        } else {
            0.0
        }
    });
    Ok(DepthMap {
        values,
        validity: d.validity.clone(),
    })
}

/// Bilinear resize to `size` followed by pixel-unshuffle: `[f^2, H/f, W/f]`.
pub fn depth_to_model_input(d: &DepthMap, size: (usize, usize), factor: usize) -> Result<Tensor<f32>> {
    let resized = bilinear_resize(&d.values, size.0, size.1)?;
    let (h, w) = size;
    pixel_unshuffle(&resized.reshape([1, h, w])?, factor)
}

/// Output of the full depth chain.
#[derive(Clone, Debug, PartialEq)]
pub struct ProcessedDepth {
    /// `[f^2, H, W]` model input channels.
    pub channels: Tensor<f32>,
    /// Foreground at feature resolution.
    pub mask: ForegroundMask,
    /// Foreground at depth resolution.
    pub full_mask: ForegroundMask,
}

/// fill -> plane -> threshold + dilate -> normalize -> resize + unshuffle,
/// plus the feature-resolution mask.
pub fn preprocess_depth(raw: &DepthMap, cfg: &PreprocessConfig) -> Result<ProcessedDepth> {
    cfg.validate()?;
    let filled = fill_missing_depth_iters(raw, cfg.fill_iterations);
    let plane = background_plane(&filled)?;
    let full_mask = extract_foreground(&filled, &plane, cfg.threshold_cm, cfg.dilation)?;
    let normalized = normalize_depth(&filled, &full_mask)?;
    let channels = depth_to_model_input(&normalized, cfg.resize, cfg.unshuffle)?;
    let (fh, fw) = cfg.feature_size();
    let mask = downsample_mask(&full_mask, fh, fw)?;
    Ok(ProcessedDepth {
        channels,
        mask,
        full_mask,
    })
}
