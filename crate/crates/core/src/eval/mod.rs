//! Metrics, diagnostic artifacts and the one-dimensional toy experiment.

mod export;
mod toy;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Label;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::SampleScore;

pub use export::{export_score_map, histogram_csv, scores_csv, write_pgm, Histogram};
pub use toy::{toy_experiment, Mlp, ToyReport, ToySpec};

/// Area under the ROC curve from average ranks; ties count one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("auroc scores".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateLabels);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mean_rank = (i + j + 2) as f64 / 2.0;
        rank_sum += mean_rank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Pools pixels of all maps, restricted to foreground when masks are given.
pub fn pixel_auroc(
    dist_maps: &[Tensor<f32>],
    gt_masks: &[Tensor<f32>],
    fg_masks: Option<&[Tensor<f32>]>,
) -> Result<f64> {
    if dist_maps.len() != gt_masks.len() || fg_masks.is_some_and(|f| f.len() != dist_maps.len()) {
        return Err(Error::dim("map, ground-truth and mask counts differ"));
    }
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for (k, (d, g)) in dist_maps.iter().zip(gt_masks).enumerate() {
        let fg = fg_masks.map(|f| &f[k]);
        if d.shape() != g.shape() || fg.is_some_and(|f| f.shape() != d.shape()) {
            return Err(Error::dim(format!("map {k} shapes differ")));
        }
        for i in 0..d.numel() {
            if fg.is_some_and(|f| f.data()[i] != 1.0) {
                continue;
            }
            scores.push(d.data()[i] as f64);
            labels.push(g.data()[i] > 0.0);
        }
    }
    auroc(&scores, &labels)
}

/// Seeded `[C, 2]` orthonormal basis (Gram-Schmidt on Gaussian columns).
pub fn projection_basis(c: usize, seed: u64) -> Result<[Vec<f64>; 2]> {
    if c < 2 {
        return Err(Error::dim("projection needs at least 2 dimensions"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut a: Vec<f64> = (0..c).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut b: Vec<f64> = (0..c).map(|_| StandardNormal.sample(&mut rng)).collect();
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na < 1e-12 {
            continue;
        }
        a.iter_mut().for_each(|v| *v /= na);
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        b.iter_mut().zip(&a).for_each(|(y, x)| *y -= dot * x);
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nb < 1e-12 {
            continue;
        }
        b.iter_mut().for_each(|v| *v /= nb);
        return Ok([a, b]);
    }
}

/// Projects every point onto the same seeded orthonormal plane. Project
/// teacher and student outputs in one call (or with one seed) so distances
/// in the plot are comparable.
pub fn random_projection_2d(points: &[Vec<f64>], seed: u64) -> Result<Vec<(f64, f64)>> {
    let c = points.first().map_or(2, |p| p.len());
    if points.iter().any(|p| p.len() != c) {
        return Err(Error::dim("points differ in dimension"));
    }
    let [a, b] = projection_basis(c, seed)?;
    let dot = |u: &[f64], p: &[f64]| u.iter().zip(p).map(|(x, y)| x * y).sum::<f64>();
    Ok(points.iter().map(|p| (dot(&a, p), dot(&b, p))).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub index: usize,
    pub label: Label,
    pub score: f64,
    pub teacher_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub image_auroc: f64,
    pub teacher_only_auroc: f64,
    pub pixel_auroc: Option<f64>,
    pub scores: Vec<ScoreEntry>,
    pub seed: u64,
    /// SHA-256 of the canonical JSON of the training configuration.
    pub config_digest: String,
}

pub fn config_digest<T: Serialize>(config: &T) -> Result<String> {
    let json = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&json)))
}

impl MetricsReport {
    /// Image AUROC for both scores, plus pixel AUROC when every sample has
    /// a ground-truth map.
    pub fn from_scores<T: Serialize>(scores: &[SampleScore], seed: u64, config: &T) -> Result<Self> {
        let labels: Vec<bool> = scores.iter().map(|s| s.label.is_anomalous()).collect();
        let ast: Vec<f64> = scores.iter().map(|s| s.score).collect();
        let teacher: Vec<f64> = scores.iter().map(|s| s.teacher_score).collect();
        let gts: Option<Vec<Tensor<f32>>> = scores.iter().map(|s| s.gt_mask.clone()).collect();
        let fgs: Option<Vec<Tensor<f32>>> = scores.iter().map(|s| s.mask.clone()).collect();
        let pixel = match gts {
            Some(gts) => {
                let maps: Vec<Tensor<f32>> = scores.iter().map(|s| s.distance.clone()).collect();
                match pixel_auroc(&maps, &gts, fgs.as_deref()) {
                    Ok(v) => Some(v),
                    Err(Error::DegenerateLabels) => None,
                    Err(e) => return Err(e),
                }
            }
            None => None,
        };
        Ok(Self {
            image_auroc: auroc(&ast, &labels)?,
            teacher_only_auroc: auroc(&teacher, &labels)?,
            pixel_auroc: pixel,
            scores: scores
                .iter()
                .enumerate()
                .map(|(i, s)| ScoreEntry {
                    index: i,
                    label: s.label,
                    score: s.score,
                    teacher_score: s.teacher_score,
                })
                .collect(),
            seed,
            config_digest: config_digest(config)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.9], &[false, true]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.9, 0.1], &[false, true]).unwrap(), 0.0);
        assert_eq!(auroc(&[3.0; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert!(matches!(auroc(&[1.0, 2.0], &[true, true]), Err(Error::DegenerateLabels)));
    }

    #[test]
    fn pixel_examples() {
        let gt = Tensor::from_fn([4, 4], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
        let d = gt.map(|v| 5.0 * v);
        assert_eq!(pixel_auroc(&[d], &[gt.clone()], None).unwrap(), 1.0);
        let flat = Tensor::full([4, 4], 2.0);
        assert_eq!(pixel_auroc(&[flat], &[gt], None).unwrap(), 0.5);
    }

    #[test]
    fn basis_is_orthonormal() {
        let [a, b] = projection_basis(7, 3).unwrap();
        let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).sum::<f64>();
        assert!((dot(&a, &a) - 1.0).abs() < 1e-12);
        assert!((dot(&b, &b) - 1.0).abs() < 1e-12);
        assert!(dot(&a, &b).abs() < 1e-12);
    }
}
