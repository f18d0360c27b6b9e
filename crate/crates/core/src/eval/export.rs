//! Histograms, CSV tables and score-map images.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::MetricsReport;

/// Per-class counts over shared, equal-width bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges from the minimum to the maximum score.
    pub edges: Vec<f64>,
    pub normal: Vec<usize>,
    pub anomalous: Vec<usize>,
}

impl Histogram {
    pub fn new(scores: &[f64], labels: &[bool], bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::Config("histogram needs at least one bin".into()));
        }
        if scores.len() != labels.len() {
            return Err(Error::dim("scores and labels differ in length"));
        }
        let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if scores.is_empty() { (0.0, 0.0) } else { (lo, hi) };
        let edges = (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect();
        let mut normal = vec![0; bins];
        let mut anomalous = vec![0; bins];
        for (&s, &l) in scores.iter().zip(labels) {
            let bin = if hi > lo {
                (((s - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1)
            } else {
                0
            };
            if l {
                anomalous[bin] += 1;
            } else {
                normal[bin] += 1;
            }
        }
        Ok(Self {
            edges,
            normal,
            anomalous,
        })
    }
}

pub fn histogram_csv(h: &Histogram) -> String {
    let mut s = String::from("bin_start,bin_end,normal,anomalous\n");
    for i in 0..h.normal.len() {
        s.push_str(&format!(
            "{:.16e},{:.16e},{},{}\n",
            h.edges[i],
            h.edges[i + 1],
            h.normal[i],
            h.anomalous[i]
        ));
    }
    s
}

pub fn scores_csv(report: &MetricsReport) -> String {
    let mut s = String::from("index,label,score,teacher_score\n");
    for e in &report.scores {
        let label = if e.label.is_anomalous() { "anomalous" } else { "normal" };
        s.push_str(&format!("{},{label},{:.16e},{:.16e}\n", e.index, e.score, e.teacher_score));
    }
    s
}

/// 16-bit binary PGM of a `[H, W]` map, min-max normalized. A constant map
/// becomes all zeros.
pub fn write_pgm(map: &Tensor<f32>, path: &Path) -> Result<()> {
    let (h, w) = match map.shape() {
        &[h, w] => (h, w),
        s => return Err(Error::dim(format!("score map {s:?} must be [H, W]"))),
    };
    let lo = map.data().iter().cloned().fold(f32::INFINITY, f32::min) as f64;
    let hi = map.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut bytes = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for &v in map.data() {
        let q = if hi > lo {
            ((v as f64 - lo) / (hi - lo) * 65535.0).round() as u16
        } else {
            0
        };
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    write_atomic(path, &bytes)
}

/// Writes `path` as PGM and a sidecar `.csv` with `row,col,value` rows.
pub fn export_score_map(dist: &Tensor<f32>, path: &Path) -> Result<()> {
    write_pgm(dist, path)?;
    let w = dist.shape()[1];
    let mut csv = String::from("row,col,value\n");
    for (i, v) in dist.data().iter().enumerate() {
        csv.push_str(&format!("{},{},{:.16e}\n", i / w, i % w, *v as f64));
    }
    write_atomic(&path.with_extension("csv"), csv.as_bytes())
}
