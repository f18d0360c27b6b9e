#![allow(dead_code)]

use ast_core::data::DepthMap;
use ast_core::flow::TeacherModel;
use ast_core::Tensor;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random scene: tilted plane, a few raised boxes, random holes with valid corners.
pub fn random_scene(seed: u64, h: usize, w: usize) -> DepthMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: f32 = rng.random_range(30.0..60.0);
    let (sy, sx): (f32, f32) = (rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
    let mut v = Tensor::from_fn([h, w], |i| base + sy * (i / w) as f32 + sx * (i % w) as f32);
    for _ in 0..rng.random_range(0..4) {
        let (r, c) = (rng.random_range(0..h), rng.random_range(0..w));
        let (bh, bw) = (rng.random_range(1..6), rng.random_range(1..6));
        let lift: f32 = rng.random_range(-3.0..3.0);
        for i in r..(r + bh).min(h) {
            for j in c..(c + bw).min(w) {
                v.data_mut()[i * w + j] += lift;
            }
        }
    }
    let hole_rate = rng.random_range(0.0..0.3);
    let validity = Tensor::from_fn([h, w], |i| {
        let (r, c) = (i / w, i % w);
        let corner = (r == 0 || r == h - 1) && (c == 0 || c == w - 1);
        if !corner && rng.random_bool(hole_rate) {
            0.0
        } else {
            1.0
        }
    });
    DepthMap::new(v, validity).unwrap()
}

/// Three rounds of simultaneous 8-neighbour mean filling.
pub fn fill_oracle(d: &DepthMap) -> (Vec<f32>, Vec<bool>) {
    let (h, w) = (d.height(), d.width());
    let mut vals: Vec<f32> = d.values.data().to_vec();
    let mut ok: Vec<bool> = d.validity.data().iter().map(|&v| v == 1.0).collect();
    for _ in 0..3 {
        let snapshot = (vals.clone(), ok.clone());
        for i in 0..h {
            for j in 0..w {
                if snapshot.1[i * w + j] {
                    continue;
                }
                let neighbours: Vec<f64> = (i.saturating_sub(1)..=(i + 1).min(h - 1))
                    .flat_map(|a| (j.saturating_sub(1)..=(j + 1).min(w - 1)).map(move |b| (a, b)))
                    .filter(|&(a, b)| (a, b) != (i, j) && snapshot.1[a * w + b])
                    .map(|(a, b)| snapshot.0[a * w + b] as f64)
                    .collect();
                if !neighbours.is_empty() {
                    vals[i * w + j] = (neighbours.iter().sum::<f64>() / neighbours.len() as f64) as f32;
                    ok[i * w + j] = true;
                }
            }
        }
    }
    (vals, ok)
}

/// Brute-force square dilation, extra row and column toward larger indices.
pub fn dilate_oracle(m: &[bool], h: usize, w: usize, size: usize) -> Vec<bool> {
    let (lo, hi) = ((size as isize - 1) / 2, size as isize / 2);
    let mut out = vec![false; h * w];
    for i in 0..h {
        for j in 0..w {
            if !m[i * w + j] {
                continue;
            }
            for a in -lo..=hi {
                for b in -lo..=hi {
                    let (r, c) = (i as isize + a, j as isize + b);
                    if r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w {
                        out[r as usize * w + c as usize] = true;
                    }
                }
            }
        }
    }
    out
}

/// Tent weight of source index `p` at output `o` under half-pixel alignment.
pub fn tent(o: usize, p: usize, n_in: usize, n_out: usize) -> f64 {
    let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
    (1.0 - (src - p as f64).abs()).max(0.0)
}

/// O(n^2) AUROC with half credit for ties.
pub fn pairwise_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &p) in scores.iter().enumerate() {
        for (j, &n) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if p > n {
                    wins += 1.0;
                } else if p == n {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// log|det J| of the whole map, from a central-difference Jacobian.
pub fn brute_logdet(m: &TeacherModel<f64>, x: &Tensor<f64>, cond: &Tensor<f64>, h: f64) -> f64 {
    let n = x.numel();
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut xp = x.clone();
        xp.data_mut()[j] += h;
        let mut xm = x.clone();
        xm.data_mut()[j] -= h;
        let zp = m.forward(&xp, cond).unwrap().z;
        let zm = m.forward(&xm, cond).unwrap().z;
        for i in 0..n {
            jac[(i, j)] = (zp.data()[i] - zm.data()[i]) / (2.0 * h);
        }
    }
    jac.determinant().abs().ln()
}

