//! Deterministic synthetic corpora.
//!
//! Features are one Gaussian white-noise field, plus a little per-channel
//! noise, smoothed by a fixed kernel per channel and added to a fixed
//! per-channel sinusoidal pattern. Sharing the noise source makes channels
//! strongly correlated, as in real backbone features. With depth, each scene is a tilted table
//! plane carrying a dome-shaped object, with a few missing pixels and sensor
//! noise. Anomalies are square patches inside the object that shift the
//! features, push the depth toward the camera, or both.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::depth::{preprocess_depth, DepthMap, PreprocessConfig};
use super::io::{save_tensor, Manifest, ManifestEntry, ManifestMeta};
use super::{assemble_sample, Label, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    RgbOnly,
    RgbDepth,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyTarget {
    Features,
    Depth,
    Both,
    /// Each anomalous sample draws one of the other three.
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub kind: CorpusKind,
    pub n_train: usize,
    pub n_test_normal: usize,
    pub n_test_anomalous: usize,
    pub feature_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Side of the square smoothing kernel applied to feature noise.
    pub smoothing: usize,
    /// Weight of per-channel noise relative to the noise field shared by
    /// all channels.
    pub independent_noise: f64,
    /// Side of the anomalous patch at feature resolution.
    pub anomaly_size: usize,
    /// Feature shift in noise standard deviations; depth shift in cm.
    pub anomaly_amplitude: f64,
    pub anomaly_target: AnomalyTarget,
    /// Raw depth maps are generated at `preprocess.resize`.
    pub preprocess: PreprocessConfig,
}

impl SynthSpec {
    /// Small RGB+depth corpus sized for a single CPU core.
    pub fn desk(seed: u64) -> Self {
        Self {
            seed,
            kind: CorpusKind::RgbDepth,
            n_train: 200,
            n_test_normal: 40,
            n_test_anomalous: 40,
            feature_channels: 16,
            height: 12,
            width: 12,
            smoothing: 3,
            independent_noise: 0.1,
            anomaly_size: 3,
            anomaly_amplitude: 0.25,
            anomaly_target: AnomalyTarget::Mixed,
            preprocess: PreprocessConfig {
                fill_iterations: 3,
                threshold_cm: 0.7,
                dilation: 2,
                resize: (24, 24),
                unshuffle: 2,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        if self.kind == CorpusKind::RgbDepth && self.preprocess.feature_size() != (self.height, self.width) {
            return Err(Error::Config(format!(
                "depth resolution {:?} / {} does not give {}x{} features",
                self.preprocess.resize, self.preprocess.unshuffle, self.height, self.width
            )));
        }
        if self.feature_channels == 0 || self.height == 0 || self.width == 0 || self.smoothing == 0 {
            return Err(Error::Config("empty feature grid".into()));
        }
        if self.anomaly_size == 0 || self.anomaly_size > self.height.min(self.width) {
            return Err(Error::Config(format!("anomaly size {} does not fit", self.anomaly_size)));
        }
        if !(self.independent_noise >= 0.0) || !self.anomaly_amplitude.is_finite() {
            return Err(Error::Config("anomaly amplitude must be finite".into()));
        }
        Ok(())
    }
}

/// A sample before depth preprocessing, as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSample {
    pub features: Tensor<f32>,
    /// Raw depth in cm, 0 where missing.
    pub depth: Option<Tensor<f32>>,
    pub label: Label,
    pub gt_mask: Option<Tensor<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawCorpus {
    pub train: Vec<RawSample>,
    pub test: Vec<RawSample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

struct Shared {
    kernels: Vec<Vec<f64>>,
    offsets: Vec<Tensor<f32>>,
}

fn shared(spec: &SynthSpec) -> Shared {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w, k) = (spec.height, spec.width, spec.smoothing);
    let kernels = (0..spec.feature_channels)
        .map(|_| {
            let raw: Vec<f64> = (0..k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            raw.into_iter().map(|v| v / norm).collect()
        })
        .collect();
    let offsets = (0..spec.feature_channels)
        .map(|_| {
            let (a, b) = (rng.random_range(0.5..1.0), rng.random_range(0.5..1.0));
            let (fi, fj) = (rng.random_range(1..=2) as f64, rng.random_range(1..=2) as f64);
            let (pi, pj) = (rng.random_range(0.0..6.3), rng.random_range(0.0..6.3));
            let tau = std::f64::consts::TAU;
            Tensor::from_fn([h, w], |idx| {
                let (i, j) = ((idx / w) as f64, (idx % w) as f64);
                (a * (tau * fi * i / h as f64 + pi).sin() + b * (tau * fj * j / w as f64 + pj).cos()) as f32
            })
        })
        .collect();
    Shared { kernels, offsets }
}

fn sample_rng(seed: u64, split: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + (split << 40) + index as u64);
    rng
}

fn features(spec: &SynthSpec, sh: &Shared, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let (h, w, k) = (spec.height, spec.width, spec.smoothing);
    let (ph, pw) = (h + k - 1, w + k - 1);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut out = Vec::with_capacity(spec.feature_channels * h * w);
    let shared: Vec<f64> = (0..ph * pw).map(|_| normal.sample(rng)).collect();
    for c in 0..spec.feature_channels {
        let noise: Vec<f64> = shared
            .iter()
            .map(|&v| v + spec.independent_noise * normal.sample(rng))
            .collect();
        let kern = &sh.kernels[c];
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for a in 0..k {
                    for b in 0..k {
                        acc += kern[a * k + b] * noise[(i + a) * pw + j + b];
                    }
                }
                out.push((acc + sh.offsets[c].data()[i * w + j] as f64) as f32);
            }
        }
    }
    Tensor::new([spec.feature_channels, h, w], out).expect("sized above")
}

fn scene_depth(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let (h, w) = spec.preprocess.resize;
    let base = rng.random_range(45.0..55.0);
    let (gy, gx) = (rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
    let cy = rng.random_range(0.4..0.6) * h as f64;
    let cx = rng.random_range(0.4..0.6) * w as f64;
    let radius = rng.random_range(0.25..0.35) * h.min(w) as f64;
    let noise = Normal::new(0.0, 0.02).unwrap();
    let corner = |i: usize, j: usize| (i == 0 || i == h - 1) && (j == 0 || j == w - 1);
    let mut data = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
            let r2 = ((y - cy).powi(2) + (x - cx).powi(2)) / (radius * radius);
            let bump = 3.0 * (1.0 - r2).max(0.0);
            let d = base + gy * i as f64 + gx * j as f64 - bump + noise.sample(rng);
            let hole = !corner(i, j) && rng.random_bool(0.02);
            data.push(if hole { 0.0 } else { d as f32 });
        }
    }
    Tensor::new([h, w], data).expect("sized above")
}

fn patch_origin(
    spec: &SynthSpec,
    fg: Option<&Tensor<f32>>,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, usize)> {
    let p = spec.anomaly_size;
    let (h, w) = (spec.height, spec.width);
    let candidates: Vec<(usize, usize)> = (0..=h - p)
        .flat_map(|r| (0..=w - p).map(move |c| (r, c)))
        .filter(|&(r, c)| match fg {
            None => true,
            Some(m) => (r..r + p).all(|i| (c..c + p).all(|j| m.data()[i * w + j] == 1.0)),
        })
        .collect();
    candidates
        .choose(rng)
        .copied()
        .ok_or_else(|| Error::Contract("no room for an anomaly inside the foreground".into()))
}

fn raw_sample(spec: &SynthSpec, sh: &Shared, split: u64, index: usize, anomalous: bool) -> Result<RawSample> {
    let mut rng = sample_rng(spec.seed, split, index);
    let mut feats = features(spec, sh, &mut rng);
    let mut depth = match spec.kind {
        CorpusKind::RgbDepth => Some(scene_depth(spec, &mut rng)),
        CorpusKind::RgbOnly => None,
    };
    let is_test = split > 0;
    if !anomalous {
        let gt = is_test.then(|| Tensor::zeros([spec.height, spec.width]));
        return Ok(RawSample {
            features: feats,
            depth,
            label: Label::Normal,
            gt_mask: gt,
        });
    }
    let fg = match &depth {
        Some(d) => Some(preprocess_depth(&DepthMap::from_raw(d.clone())?, &spec.preprocess)?.mask.mask),
        None => None,
    };
    let (r0, c0) = patch_origin(spec, fg.as_ref(), &mut rng)?;
    let p = spec.anomaly_size;
    let target = match (spec.anomaly_target, spec.kind) {
        (_, CorpusKind::RgbOnly) => AnomalyTarget::Features,
        (AnomalyTarget::Mixed, _) => {
            *[AnomalyTarget::Features, AnomalyTarget::Depth, AnomalyTarget::Both]
                .choose(&mut rng)
                .unwrap()
        }
        (t, _) => t,
    };
    let amp = spec.anomaly_amplitude;
    let (h, w) = (spec.height, spec.width);
    if matches!(target, AnomalyTarget::Features | AnomalyTarget::Both) {
        for c in 0..spec.feature_channels {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            for i in r0..r0 + p {
                for j in c0..c0 + p {
                    feats.data_mut()[(c * h + i) * w + j] += (sign * amp) as f32;
                }
            }
        }
    }
    if let (Some(d), true) = (&mut depth, matches!(target, AnomalyTarget::Depth | AnomalyTarget::Both)) {
        let f = spec.preprocess.unshuffle;
        let dw = d.shape()[1];
        for i in r0 * f..(r0 + p) * f {
            for j in c0 * f..(c0 + p) * f {
                let v = &mut d.data_mut()[i * dw + j];
                if *v != 0.0 {
                    *v -= amp as f32;
                }
            }
        }
    }
    let gt = Tensor::from_fn([h, w], |idx| {
        let (i, j) = (idx / w, idx % w);
        if (r0..r0 + p).contains(&i) && (c0..c0 + p).contains(&j) {
            1.0
        } else {
            0.0
        }
    });
    Ok(RawSample {
        features: feats,
        depth,
        label: Label::Anomalous,
        gt_mask: Some(gt),
    })
}

/// Generates the raw corpus. The same spec always yields the same bytes.
pub fn synth_raw(spec: &SynthSpec) -> Result<RawCorpus> {
    spec.validate()?;
    let sh = shared(spec);
    let train = (0..spec.n_train)
        .map(|i| raw_sample(spec, &sh, 0, i, false))
        .collect::<Result<_>>()?;
    let normal = (0..spec.n_test_normal).map(|i| raw_sample(spec, &sh, 1, i, false));
    let anomalous = (0..spec.n_test_anomalous).map(|i| raw_sample(spec, &sh, 2, i, true));
    let test = normal.chain(anomalous).collect::<Result<_>>()?;
    Ok(RawCorpus { train, test })
}

fn preprocess(raw: &RawSample, cfg: &PreprocessConfig) -> Result<Sample> {
    let (depth, mask) = match &raw.depth {
        Some(d) => {
            let p = preprocess_depth(&DepthMap::from_raw(d.clone())?, cfg)?;
            (Some(p.channels), Some(p.mask.mask))
        }
        None => (None, None),
    };
    assemble_sample(raw.features.clone(), depth, mask, raw.label, raw.gt_mask.clone())
}

/// Generates and preprocesses a corpus in memory.
pub fn synth_corpus(spec: &SynthSpec) -> Result<Corpus> {
    let raw = synth_raw(spec)?;
    let cfg = &spec.preprocess;
    Ok(Corpus {
        train: raw.train.iter().map(|s| preprocess(s, cfg)).collect::<Result<_>>()?,
        test: raw.test.iter().map(|s| preprocess(s, cfg)).collect::<Result<_>>()?,
    })
}

/// Writes `train.json` and `test.json` manifests plus tensor files under
/// `dir`. Loading them back with `load_corpus` reproduces `synth_corpus`.
pub fn write_corpus(spec: &SynthSpec, raw: &RawCorpus, dir: &Path) -> Result<()> {
    for (name, samples) in [("train", &raw.train), ("test", &raw.test)] {
        let mut entries = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            let stem = format!("{name}/{i:04}");
            let features = format!("{stem}.features.astt");
            save_tensor(&dir.join(&features), &s.features)?;
            let depth = match &s.depth {
                Some(d) => {
                    let p = format!("{stem}.depth.astt");
                    save_tensor(&dir.join(&p), d)?;
                    Some(p.into())
                }
                None => None,
            };
            let gt_mask = match &s.gt_mask {
                Some(g) => {
                    let p = format!("{stem}.gt.astt");
                    save_tensor(&dir.join(&p), g)?;
                    Some(p.into())
                }
                None => None,
            };
            entries.push(ManifestEntry {
                features: features.into(),
                depth,
                label: s.label,
                gt_mask,
            });
        }
        let manifest = Manifest {
            samples: entries,
            meta: ManifestMeta {
                preprocess: spec.preprocess.clone(),
                description: format!("synthetic {name} split, seed {}", spec.seed),
            },
        };
        manifest.save(&dir.join(format!("{name}.json")))?;
    }
    Ok(())
}
