//! Numerical verification suites behind `ast gradcheck` and `ast selftest`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{decode_tensor, dilate, encode_tensor, positional_encoding};
use crate::error::{Error, Result};
use crate::eval::auroc;
use crate::flow::{clamp_scale_var, teacher_loss_var, TeacherConfig, TeacherModel};
use crate::student::{distance_map_var, student_loss_var, Mode, StudentConfig, StudentModel};
use crate::tensor::{gradcheck_many, BnMode, Padding, Tape, Tensor, Var};

/// Central-difference step used for every check; the suite runs in `f64`.
pub const GRADCHECK_STEP: f64 = 1e-5;
pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
pub const COMPOSITION_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckRow {
    pub name: String,
    pub composition: bool,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub points: usize,
}

impl GradcheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// Keeps samples at least `margin` away from the kink at zero.
fn off_kink(t: Tensor<f64>, margin: f64) -> Tensor<f64> {
    t.map(|v| if v.abs() < margin { v.signum() * margin + v } else { v })
}

/// `sum(out * r)`: a generic scalar read-out with fixed random weights.
fn read_out<'t>(tape: &'t Tape<f64>, out: Var<'t, f64>, r: &Tensor<f64>) -> Result<Var<'t, f64>> {
    Ok(out.mul(tape.constant(r.clone()))?.sum())
}

fn binary_mask(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut m = Tensor::from_fn(shape.to_vec(), |_| if rng.random_bool(0.6) { 1.0 } else { 0.0 });
    m.data_mut()[0] = 1.0;
    m
}

type Check = fn(&mut ChaCha8Rng) -> Result<f64>;

macro_rules! unary_case {
    ($name:expr, $shape:expr, $margin:expr, |$v:ident| $body:expr) => {
        ($name, false, (|rng: &mut ChaCha8Rng| {
            let x = off_kink(randn(&$shape, rng), $margin);
            let shape_out = {
                let tape = Tape::new();
                let $v = tape.constant(x.clone());
                let out: Var<f64> = $body?;
                out.shape()
            };
            let r = randn(&shape_out, rng);
            Ok(gradcheck_many(
                |tape, vars| {
                    let $v = vars[0];
                    read_out(tape, $body?, &r)
                },
                &[x],
                GRADCHECK_STEP,
            )?
            .max_rel_error)
        }) as Check)
    };
}

fn binary(rng: &mut ChaCha8Rng, op: for<'t> fn(Var<'t, f64>, Var<'t, f64>) -> Result<Var<'t, f64>>) -> Result<f64> {
    let shape = [2, 3, 2, 2];
    let (a, b, r) = (randn(&shape, rng), randn(&shape, rng), randn(&shape, rng));
    Ok(gradcheck_many(|tape, v| read_out(tape, op(v[0], v[1])?, &r), &[a, b], GRADCHECK_STEP)?.max_rel_error)
}

fn conv(rng: &mut ChaCha8Rng, padding: Padding) -> Result<f64> {
    let x = randn(&[2, 3, 4, 4], rng);
    let w = randn(&[4, 3, 3, 3], rng);
    let b = randn(&[4], rng);
    let out = if padding == Padding::Same { 4 } else { 2 };
    let r = randn(&[2, 4, out, out], rng);
    Ok(gradcheck_many(
        |tape, v| read_out(tape, v[0].conv2d(v[1], v[2], padding)?, &r),
        &[x, w, b],
        GRADCHECK_STEP,
    )?
    .max_rel_error)
}

fn batch_norm(rng: &mut ChaCha8Rng, train: bool) -> Result<f64> {
    let x = randn(&[3, 2, 3, 3], rng);
    let gamma = randn(&[2], rng);
    let beta = randn(&[2], rng);
    let rm = randn(&[2], rng);
    let rv = Tensor::uniform([2], 0.5, 2.0, rng);
    let r = randn(&[3, 2, 3, 3], rng);
    Ok(gradcheck_many(
        |tape, v| {
            let mode = if train {
                BnMode::Train { eps: 1e-5 }
            } else {
                BnMode::Eval {
                    running_mean: &rm,
                    running_var: &rv,
                    eps: 1e-5,
                }
            };
            read_out(tape, v[0].batch_norm2d(v[1], v[2], mode)?.0, &r)
        },
        &[x, gamma, beta],
        GRADCHECK_STEP,
    )?
    .max_rel_error)
}

fn small_teacher(rng: &mut ChaCha8Rng) -> Result<TeacherModel<f64>> {
    let config = TeacherConfig {
        channels: 4,
        cond_channels: 4,
        n_blocks: 2,
        hidden: 5,
        alpha: 1.9,
        kernel: 3,
    };
    let mut model = TeacherModel::new(config, rng)?;
    for b in &mut model.blocks {
        b.gamma1 = Tensor::full([1], rng.random_range(0.3..0.8));
        b.gamma2 = Tensor::full([1], rng.random_range(0.3..0.8));
    }
    Ok(model)
}

fn teacher_nll(rng: &mut ChaCha8Rng) -> Result<f64> {
    let model = small_teacher(rng)?;
    let x = randn(&[2, 4, 3, 3], rng);
    let cond = positional_encoding::<f64>(3, 3, 4)?.repeat_outer(2);
    let mask = binary_mask(&[2, 3, 3], rng);
    let np = model.params().len();
    let mut points: Vec<Tensor<f64>> = model.params().into_iter().cloned().collect();
    points.push(x);
    Ok(gradcheck_many(
        |tape, v| {
            let bound = model.bind_vars(&v[..np]);
            teacher_loss_var(&bound, v[np], tape.constant(cond.clone()), Some(&mask))
        },
        &points,
        GRADCHECK_STEP,
    )?
    .max_rel_error)
}

fn coupling_block(rng: &mut ChaCha8Rng) -> Result<f64> {
    let model = small_teacher(rng)?;
    let block = &model.blocks[0];
    let x = randn(&[1, 4, 3, 3], rng);
    let cond = positional_encoding::<f64>(3, 3, 4)?.reshape([1, 4, 3, 3])?;
    let (rz, rl) = (randn(&[1, 4, 3, 3], rng), randn(&[1, 3, 3], rng));
    let np = block.params().len();
    let mut points: Vec<Tensor<f64>> = block.params().into_iter().cloned().collect();
    points.push(x);
    Ok(gradcheck_many(
        |tape, v| {
            let (y, ld) = block.bind(&v[..np]).forward(v[np], tape.constant(cond.clone()))?;
            read_out(tape, y, &rz)?.add(read_out(tape, ld, &rl)?)
        },
        &points,
        GRADCHECK_STEP,
    )?
    .max_rel_error)
}

fn student(rng: &mut ChaCha8Rng) -> Result<f64> {
    let config = StudentConfig {
        in_channels: 4,
        cond_channels: 4,
        out_channels: 4,
        hidden: 5,
        n_blocks: 1,
        slope: 0.2,
        bn_eps: 1e-5,
        bn_momentum: 0.1,
        kernel: 3,
    };
    let model = StudentModel::<f64>::new(config, rng)?;
    let x = randn(&[2, 4, 3, 3], rng);
    let cond = positional_encoding::<f64>(3, 3, 4)?.repeat_outer(2);
    let target = randn(&[2, 4, 3, 3], rng);
    let mask = binary_mask(&[2, 3, 3], rng);
    // Biases feeding a training-mode batch norm have an identically zero
    // gradient; they are held fixed so round-off does not dominate the ratio.
    let names = model.param_names();
    let params = model.params();
    let fixed: Vec<Option<Tensor<f64>>> = names
        .iter()
        .zip(&params)
        .map(|(n, p)| (n.ends_with("conv.bias") && !n.starts_with("exit")).then(|| (*p).clone()))
        .collect();
    let mut points: Vec<Tensor<f64>> = params
        .iter()
        .zip(&fixed)
        .filter(|(_, f)| f.is_none())
        .map(|(p, _)| (*p).clone())
        .collect();
    points.push(x);
    Ok(gradcheck_many(
        |tape, v| {
            let mut free = v.iter().copied();
            let all: Vec<Var<f64>> = fixed
                .iter()
                .map(|f| match f {
                    Some(t) => tape.constant(t.clone()),
                    None => free.next().expect("free parameter"),
                })
                .collect();
            let xv = free.next().expect("input");
            let (y, _) = model
                .bind_vars(&all)
                .forward(xv, tape.constant(cond.clone()), Mode::Train)?;
            student_loss_var(distance_map_var(y, tape.constant(target.clone()))?, Some(&mask))
        },
        &points,
        GRADCHECK_STEP,
    )?
    .max_rel_error)
}

fn cases() -> Vec<(&'static str, bool, Check)> {
    const S: [usize; 4] = [2, 3, 2, 2];
    vec![
        unary_case!("exp", S, 0.0, |v| Ok::<_, Error>(v.exp()?)),
        unary_case!("atan", S, 0.0, |v| Ok::<_, Error>(v.atan())),
        unary_case!("square", S, 0.0, |v| Ok::<_, Error>(v.square())),
        unary_case!("tanh", S, 0.0, |v| Ok::<_, Error>(v.tanh())),
        unary_case!("relu", S, 0.05, |v| Ok::<_, Error>(v.relu())),
        unary_case!("leaky_relu", S, 0.05, |v| Ok::<_, Error>(v.leaky_relu(0.2))),
        unary_case!("scale", S, 0.0, |v| Ok::<_, Error>(v.scale(-1.7))),
        unary_case!("offset", S, 0.0, |v| Ok::<_, Error>(v.offset(0.3))),
        unary_case!("sum", S, 0.0, |v| Ok::<_, Error>(v.square().sum())),
        unary_case!("mean", S, 0.0, |v| Ok::<_, Error>(v.square().mean())),
        unary_case!("sum_channels", S, 0.0, |v| v.sum_channels()),
        unary_case!("reshape", S, 0.0, |v| v.reshape([6, 4])),
        unary_case!("narrow_channels", S, 0.0, |v| v.narrow_channels(1, 2)),
        unary_case!("split_half", [2usize, 4, 2, 2], 0.0, |v| {
            v.split_half().and_then(|(a, b)| a.square().sub(b))
        }),
        unary_case!("concat_channels", S, 0.0, |v| Var::concat_channels(&[v.square(), v])),
        unary_case!("permute_channels", S, 0.0, |v| v.permute_channels(&[2, 0, 1])),
        unary_case!("pixel_unshuffle", [2usize, 3, 4, 4], 0.0, |v| v.pixel_unshuffle(2)),
        unary_case!("pixel_shuffle", [2usize, 8, 2, 2], 0.0, |v| v.pixel_shuffle(2)),
        unary_case!("clamp_scale", S, 0.0, |v| Ok::<_, Error>(clamp_scale_var(v.scale(3.0), 1.9))),
        ("add", false, |rng| binary(rng, |a, b| a.add(b))),
        ("sub", false, |rng| binary(rng, |a, b| a.sub(b))),
        ("mul", false, |rng| binary(rng, |a, b| a.mul(b))),
        ("conv2d_same", false, |rng| conv(rng, Padding::Same)),
        ("conv2d_valid", false, |rng| conv(rng, Padding::Valid)),
        ("batch_norm_eval", false, |rng| batch_norm(rng, false)),
        ("linear", false, |rng| {
            let (x, w, b, r) = (randn(&[5, 3], rng), randn(&[4, 3], rng), randn(&[4], rng), randn(&[5, 4], rng));
            Ok(gradcheck_many(|t, v| read_out(t, v[0].linear(v[1], v[2])?, &r), &[x, w, b], GRADCHECK_STEP)?
                .max_rel_error)
        }),
        ("batch_norm_train", true, |rng| batch_norm(rng, true)),
        ("coupling_block", true, coupling_block),
        ("teacher_nll_loss", true, teacher_nll),
        ("student_loss", true, student),
    ]
}

/// Runs every gradient check at `points` random points each.
pub fn gradcheck_suite(seed: u64, points: usize) -> Result<Vec<GradcheckRow>> {
    cases()
        .into_iter()
        .enumerate()
        .map(|(i, (name, composition, check))| {
            let mut worst: f64 = 0.0;
            for p in 0..points {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(((i as u64) << 16) + p as u64);
                worst = worst.max(check(&mut rng)?);
            }
            Ok(GradcheckRow {
                name: name.to_string(),
                composition,
                tolerance: if composition { COMPOSITION_TOLERANCE } else { PRIMITIVE_TOLERANCE },
                max_rel_error: worst,
                points,
            })
        })
        .collect()
}

pub fn format_gradcheck_table(rows: &[GradcheckRow]) -> String {
    let mut s = format!("{:<20} {:<12} {:>12} {:>10}  {}\n", "check", "kind", "max_rel_err", "tolerance", "status");
    for r in rows {
        s.push_str(&format!(
            "{:<20} {:<12} {:>12.3e} {:>10.0e}  {}\n",
            r.name,
            if r.composition { "composition" } else { "primitive" },
            r.max_rel_error,
            r.tolerance,
            if r.passed() { "ok" } else { "FAIL" }
        ));
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelftestRow {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn row(name: &'static str, passed: bool, detail: String) -> SelftestRow {
    SelftestRow { name, passed, detail }
}

fn flow_round_trip(seed: u64) -> Result<SelftestRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for c in [4, 8, 16] {
        let mut model = TeacherModel::<f32>::new(
            TeacherConfig {
                channels: c,
                cond_channels: 4,
                n_blocks: 3,
                hidden: 8,
                alpha: 1.9,
                kernel: 3,
            },
            &mut rng,
        )?;
        for b in &mut model.blocks {
            b.gamma1 = Tensor::full([1], 0.7);
            b.gamma2 = Tensor::full([1], -0.5);
        }
        let x = Tensor::randn([2, c, 5, 5], 1.0, &mut rng);
        let cond = positional_encoding(5, 5, 4)?;
        let z = model.forward(&x, &cond)?.z;
        worst = worst.max(model.inverse(&z, &cond)?.max_abs_diff(&x));
    }
    Ok(row("flow inverse(forward(x)) == x", worst < 1e-4, format!("max abs error {worst:.2e}")))
}

fn logdet_matches_jacobian(seed: u64) -> Result<SelftestRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = small_teacher(&mut rng)?;
    let x = randn(&[4, 3, 3], &mut rng);
    let cond = positional_encoding::<f64>(3, 3, 4)?;
    let out = model.forward(&x, &cond)?;
    let claimed = out.logdet_map.sum_f64();
    let n = x.numel();
    let h = 1e-6;
    let mut jac = nalgebra::DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut xp = x.clone();
        xp.data_mut()[j] += h;
        let mut xm = x.clone();
        xm.data_mut()[j] -= h;
        let (zp, zm) = (model.forward(&xp, &cond)?.z, model.forward(&xm, &cond)?.z);
        for i in 0..n {
            jac[(i, j)] = (zp.data()[i] - zm.data()[i]) / (2.0 * h);
        }
    }
    let numeric = jac.lu().determinant().abs().ln();
    let rel = (claimed - numeric).abs() / numeric.abs().max(1e-12);
    Ok(row(
        "sum of logdet map == log|det J|",
        rel < 1e-3,
        format!("claimed {claimed:.6}, numeric {numeric:.6}"),
    ))
}

fn auroc_matches_pairs(seed: u64) -> Result<SelftestRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.random_range(2..120);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    wins += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        worst = worst.max((auroc(&scores, &labels)? - wins / pairs).abs());
    }
    Ok(row("rank AUROC == pairwise AUROC", worst < 1e-9, format!("max difference {worst:.1e}")))
}

fn dilation_matches_max_filter(seed: u64) -> Result<SelftestRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (20, 17);
    let m = Tensor::from_fn([h, w], |_| if rng.random_bool(0.05) { 1.0 } else { 0.0 });
    let fast = dilate(&m, 8);
    let mut same = true;
    for i in 0..h {
        for j in 0..w {
            let mut v = 0.0f32;
            for a in -3isize..=4 {
                for b in -3isize..=4 {
                    let (si, sj) = (i as isize - a, j as isize - b);
                    if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < w {
                        v = v.max(m.data()[si as usize * w + sj as usize]);
                    }
                }
            }
            same &= v == fast.data()[i * w + j];
        }
    }
    Ok(row("dilation == brute-force max filter", same, String::new()))
}

fn tensor_file_round_trip(seed: u64) -> Result<SelftestRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = Tensor::<f32>::randn([3, 5, 2], 1.0, &mut rng);
    let back = decode_tensor(&encode_tensor(&t))?;
    let same = back.shape() == t.shape()
        && back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    Ok(row("tensor file round trip is bit-exact", same, String::new()))
}

fn encoding_distinct() -> Result<SelftestRow> {
    let pe = positional_encoding::<f64>(24, 24, 32)?;
    let vec_at = |p: usize| (0..32).map(|c| pe.data()[c * 576 + p]).collect::<Vec<_>>();
    let vs: Vec<Vec<f64>> = (0..576).map(vec_at).collect();
    let mut distinct = true;
    for a in 0..576 {
        for b in a + 1..576 {
            distinct &= vs[a].iter().zip(&vs[b]).any(|(x, y)| (x - y).abs() > 1e-9);
        }
    }
    let bounded = pe.data().iter().all(|v| v.abs() <= 1.0);
    Ok(row("positional encoding distinct and bounded", distinct && bounded, String::new()))
}

/// Fast invariant checks, one row each.
pub fn selftest(seed: u64) -> Result<Vec<SelftestRow>> {
    Ok(vec![
        flow_round_trip(seed)?,
        logdet_matches_jacobian(seed)?,
        auroc_matches_pairs(seed)?,
        dilation_matches_max_filter(seed)?,
        tensor_file_round_trip(seed)?,
        encoding_distinct()?,
    ])
}
