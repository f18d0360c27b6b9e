//! Sample assembly, depth preprocessing, positional encoding, synthetic
//! corpora and on-disk formats.

mod depth;
mod encoding;
mod io;
mod resize;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use depth::{
    background_plane, depth_to_model_input, dilate, extract_foreground, fill_missing_depth,
    fill_missing_depth_iters, normalize_depth, preprocess_depth, DepthMap, ForegroundMask,
    PreprocessConfig, ProcessedDepth, Resolution,
};
pub use encoding::positional_encoding;
pub use io::{
    decode_tensor, decode_tensor_prefix, encode_tensor, load_corpus, load_tensor, save_tensor,
    write_atomic, Manifest, ManifestEntry, ManifestMeta,
};
pub(crate) use io::read_file;
pub use resize::{bilinear_resize, downsample_mask};
pub use synth::{
    synth_corpus, synth_raw, write_corpus, AnomalyTarget, Corpus, CorpusKind, RawCorpus, RawSample,
    SynthSpec,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomalous,
}

impl Label {
    pub fn is_anomalous(self) -> bool {
        self == Label::Anomalous
    }
}

/// One preprocessed sample at feature resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[C_f, H, W]`
    pub features: Tensor<f32>,
    /// `[f^2, H, W]` unshuffled depth, when the corpus has depth.
    pub depth: Option<Tensor<f32>>,
    /// `[H, W]` foreground mask derived from depth.
    pub mask: Option<Tensor<f32>>,
    pub label: Label,
    /// `[H, W]` ground-truth anomaly pixels.
    pub gt_mask: Option<Tensor<f32>>,
}

impl Sample {
    pub fn size(&self) -> (usize, usize) {
        (self.features.shape()[1], self.features.shape()[2])
    }

    pub fn input_channels(&self) -> usize {
        self.features.shape()[0] + self.depth.as_ref().map_or(0, |d| d.shape()[0])
    }

    /// Features with depth channels appended: the teacher input.
    pub fn input(&self) -> Tensor<f32> {
        match &self.depth {
            Some(d) => Tensor::concat_outer(&[&self.features, d]).expect("checked at assembly"),
            None => self.features.clone(),
        }
    }
}

fn check_map(name: &str, t: &Tensor<f32>, h: usize, w: usize, binary: bool) -> Result<()> {
    if t.shape() != [h, w] {
        return Err(Error::dim(format!("{name} {:?}, expected [{h}, {w}]", t.shape())));
    }
    if binary && t.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Contract(format!("{name} is not binary")));
    }
    Ok(())
}

/// Validates shapes and values and builds a [`Sample`].
pub fn assemble_sample(
    features: Tensor<f32>,
    depth: Option<Tensor<f32>>,
    mask: Option<Tensor<f32>>,
    label: Label,
    gt_mask: Option<Tensor<f32>>,
) -> Result<Sample> {
    if features.rank() != 3 {
        return Err(Error::dim(format!("features {:?} must be [C, H, W]", features.shape())));
    }
    if !features.is_finite() {
        return Err(Error::NonFinite("feature input".into()));
    }
    let (h, w) = (features.shape()[1], features.shape()[2]);
    if let Some(d) = &depth {
        if d.rank() != 3 || d.shape()[1..] != [h, w] {
            return Err(Error::dim(format!(
                "depth channels {:?} do not match features {:?}",
                d.shape(),
                features.shape()
            )));
        }
        if !d.is_finite() {
            return Err(Error::NonFinite("depth input".into()));
        }
    }
    if let Some(m) = &mask {
        check_map("foreground mask", m, h, w, true)?;
    }
    if let Some(g) = &gt_mask {
        check_map("ground-truth mask", g, h, w, true)?;
    }
    Ok(Sample {
        features,
        depth,
        mask,
        label,
        gt_mask,
    })
}

/// Stacks sample inputs into `[B, C, H, W]` and masks into `[B, H, W]`.
/// Masks are returned only when every sample has one.
pub fn stack_batch(samples: &[&Sample]) -> Result<(Tensor<f32>, Option<Tensor<f32>>)> {
    if samples.is_empty() {
        return Err(Error::InvalidBatch("empty batch".into()));
    }
    let inputs: Vec<Tensor<f32>> = samples.iter().map(|s| s.input()).collect();
    let x = Tensor::stack(&inputs.iter().collect::<Vec<_>>())?;
    let masks: Option<Vec<&Tensor<f32>>> = samples.iter().map(|s| s.mask.as_ref()).collect();
    let masks = masks.map(|m| Tensor::stack(&m)).transpose()?;
    Ok((x, masks))
}
