//! End-to-end acceptance criteria. Runs without the libtest harness so that
//! every criterion prints exactly one pass/fail line, in order.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use ast_core::checkpoint::{save_student, save_teacher};
use ast_core::data::{
    assemble_sample, background_plane, downsample_mask, extract_foreground, fill_missing_depth,
    load_corpus, positional_encoding, synth_corpus, synth_raw, write_atomic, write_corpus,
    DepthMap, Label, PreprocessConfig, Sample, SynthSpec,
};
use ast_core::eval::{
    auroc, histogram_csv, scores_csv, toy_experiment, Histogram, MetricsReport, ToySpec,
};
use ast_core::flow::{nll_map, TeacherConfig, TeacherModel};
use ast_core::student::StudentModel;
use ast_core::train::{
    score_corpus, score_sample, train_student, train_teacher, Preset, TrainConfig, TrainHistory,
};
use ast_core::verify::{format_gradcheck_table, gradcheck_suite};
use ast_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

mod common;
use common::{brute_logdet, dilate_oracle, fill_oracle, pairwise_auroc, tent};

type Outcome = (bool, String);

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ")
}

fn random_teacher<R: ast_core::Real>(c: usize, blocks: usize, hidden: usize, rng: &mut ChaCha8Rng) -> TeacherModel<R> {
    let config = TeacherConfig {
        channels: c,
        cond_channels: 4,
        n_blocks: blocks,
        hidden,
        alpha: 1.9,
        kernel: 3,
    };
    let mut m = TeacherModel::new(config, rng).unwrap();
    for b in &mut m.blocks {
        b.gamma1 = Tensor::<f64>::full([1], rng.random_range(-1.0..1.0)).cast();
        b.gamma2 = Tensor::<f64>::full([1], rng.random_range(-1.0..1.0)).cast();
    }
    m
}

fn bijectivity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for k in 0..20 {
        let c = [4, 8, 16][k % 3];
        let (h, w) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let blocks = rng.random_range(1..=4);
        let model: TeacherModel = if k % 2 == 0 {
            random_teacher(c, blocks, 8, &mut rng)
        } else {
            let train: Vec<Sample> = (0..16)
                .map(|_| {
                    let f = Tensor::randn([c, h, w], 1.0, &mut rng);
                    assemble_sample(f, None, None, Label::Normal, None).unwrap()
                })
                .collect();
            let mut cfg = TrainConfig::preset(Preset::Desk, k as u64);
            cfg.pos_channels = 4;
            cfg.teacher_blocks = blocks;
            cfg.teacher_hidden = 8;
            cfg.epochs_teacher = 5;
            cfg.lr = 5e-3;
            train_teacher(&train, &cfg).unwrap().model
        };
        let cond = positional_encoding::<f32>(h, w, 4).unwrap();
        let x = Tensor::randn([2, c, h, w], 1.0, &mut rng);
        let z = model.forward(&x, &cond).unwrap().z;
        worst = worst.max(model.inverse(&z, &cond).unwrap().max_abs_diff(&x));
    }
    (worst < 1e-4, format!("max |inverse(forward(x)) - x| = {worst:.2e} over 20 models"))
}

fn logdet_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let shapes = [(4, 2, 2), (4, 4, 4), (8, 2, 4), (8, 2, 2), (16, 2, 2), (4, 3, 5), (4, 1, 6), (8, 1, 8), (16, 2, 1), (4, 4, 2)];
    let mut worst: f64 = 0.0;
    for &(c, h, w) in &shapes {
        let blocks = rng.random_range(1..=4);
        let m = random_teacher::<f64>(c, blocks, 6, &mut rng);
        let x = Tensor::randn([c, h, w], 1.0, &mut rng);
        let cond = positional_encoding::<f64>(h, w, 4).unwrap();
        let claimed = m.forward(&x, &cond).unwrap().logdet_map.sum_f64();
        let numeric = brute_logdet(&m, &x, &cond, 1e-4);
        worst = worst.max((claimed - numeric).abs() / numeric.abs().max(1e-12));
    }
    (worst < 1e-3, format!("max relative error {worst:.2e} over 10 models"))
}

fn gradient_integrity() -> Outcome {
    let rows = gradcheck_suite(3, 10).unwrap();
    let prim = rows.iter().filter(|r| !r.composition).map(|r| r.max_rel_error).fold(0.0, f64::max);
    let comp = rows.iter().filter(|r| r.composition).map(|r| r.max_rel_error).fold(0.0, f64::max);
    let ok = rows.iter().all(|r| r.passed());
    if !ok {
        eprint!("{}", format_gradcheck_table(&rows));
    }
    (ok, format!("{} checks, primitives max {prim:.2e}, compositions max {comp:.2e}", rows.len()))
}

fn auroc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(2..=500);
        let levels = rng.random_range(1..=10);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        worst = worst.max((auroc(&scores, &labels).unwrap() - pairwise_auroc(&scores, &labels)).abs());
    }
    (worst < 1e-9, format!("max deviation {worst:.1e} over 100 tied instances"))
}

fn density_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noise = Normal::new(0.0, 0.5).unwrap();
    let train: Vec<Sample> = (0..1000)
        .map(|_| {
            let m: f64 = if rng.random_bool(0.5) { 1.5 } else { -1.5 };
            let f = Tensor::new([2, 1, 1], vec![(m + noise.sample(&mut rng)) as f32, (0.5 * m + noise.sample(&mut rng)) as f32]).unwrap();
            assemble_sample(f, None, None, Label::Normal, None).unwrap()
        })
        .collect();
    let mut cfg = TrainConfig::preset(Preset::Desk, 5);
    cfg.pos_channels = 4;
    cfg.batch_size = 32;
    cfg.epochs_teacher = 20;
    cfg.lr = 2e-3;
    let run = train_teacher(&train, &cfg).unwrap();
    let g = 200;
    let step = 12.0 / (g - 1) as f64;
    let coords: Vec<f32> = (0..g * g)
        .flat_map(|k| [(-6.0 + (k / g) as f64 * step) as f32, (-6.0 + (k % g) as f64 * step) as f32])
        .collect();
    let x = Tensor::new([g * g, 2, 1, 1], coords).unwrap();
    let out = run.model.forward(&x, &positional_encoding(1, 1, 4).unwrap()).unwrap();
    let nll = nll_map(&out).unwrap();
    let log_2pi = (2.0 * std::f64::consts::PI).ln();
    let edge = |i: usize| if i == 0 || i == g - 1 { 0.5 } else { 1.0 };
    let integral: f64 = (0..g * g)
        .map(|k| edge(k / g) * edge(k % g) * (-(nll.data()[k] as f64) - log_2pi).exp())
        .sum::<f64>()
        * step
        * step;
    (
        (0.9..=1.1).contains(&integral),
        format!(
            "integral {integral:.5} (loss {:.3} -> {:.3})",
            run.history.initial_loss,
            run.history.final_loss()
        ),
    )
}

fn toy_reproduction() -> Outcome {
    let mut wins = 0;
    let mut worst_fit: f64 = 0.0;
    for seed in 0..25 {
        let r = toy_experiment(&ToySpec::new(seed)).unwrap();
        if r.asymmetric_ood_dist.unwrap() > r.symmetric_ood_dist.unwrap() {
            wins += 1;
        }
        worst_fit = worst_fit.max(r.symmetric_id_dist.max(r.asymmetric_id_dist) / r.teacher_range);
    }
    (
        wins >= 20 && worst_fit < 0.05,
        format!(
            "asymmetric OOD distance larger in {wins}/25 seeds, worst in-distribution error {:.2}% of range",
            100.0 * worst_fit
        ),
    )
}

struct DeskRun {
    ast: f64,
    teacher_only: f64,
    single_block: f64,
    teacher_history: TrainHistory,
    student_history: TrainHistory,
    params: Vec<usize>,
    teacher: TeacherModel,
    student: StudentModel,
}

fn image_aurocs(test: &[Sample], teacher: &TeacherModel, student: &StudentModel) -> (f64, f64) {
    let scores = score_corpus(test, teacher, student).unwrap();
    let labels: Vec<bool> = scores.iter().map(|s| s.label.is_anomalous()).collect();
    let ast: Vec<f64> = scores.iter().map(|s| s.score).collect();
    let nll: Vec<f64> = scores.iter().map(|s| s.teacher_score).collect();
    (auroc(&ast, &labels).unwrap(), auroc(&nll, &labels).unwrap())
}

fn desk_run(seed: u64) -> DeskRun {
    let corpus = synth_corpus(&SynthSpec::desk(seed)).unwrap();
    let cfg = TrainConfig::preset(Preset::Desk, seed);
    let teacher = train_teacher(&corpus.train, &cfg).unwrap();
    let student = train_student(&corpus.train, &teacher.model, &cfg).unwrap();
    let (ast, teacher_only) = image_aurocs(&corpus.test, &teacher.model, &student.model);
    let single_cfg = TrainConfig {
        student_blocks: 1,
        ..cfg.clone()
    };
    let single = train_student(&corpus.train, &teacher.model, &single_cfg).unwrap();
    let (single_block, _) = image_aurocs(&corpus.test, &teacher.model, &single.model);
    let c = corpus.train[0].input_channels();
    let params = (1..=4)
        .map(|b| {
            let sc = TrainConfig {
                student_blocks: b,
                ..cfg.clone()
            }
            .student_config(c);
            StudentModel::<f32>::new(sc, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().param_count()
        })
        .collect();
    DeskRun {
        ast,
        teacher_only,
        single_block,
        teacher_history: teacher.history,
        student_history: student.history,
        params,
        teacher: teacher.model,
        student: student.model,
    }
}

fn end_to_end(runs: &[DeskRun]) -> Outcome {
    let v: Vec<f64> = runs.iter().map(|r| r.ast).collect();
    let m = median(v.clone());
    (m >= 0.85, format!("median image AUROC {m:.3} (seeds: {})", fmt_list(&v)))
}

fn teacher_only_trend(runs: &[DeskRun]) -> Outcome {
    let ast = median(runs.iter().map(|r| r.ast).collect());
    let t: Vec<f64> = runs.iter().map(|r| r.teacher_only).collect();
    let tm = median(t.clone());
    (ast >= tm - 0.02, format!("median AST {ast:.3} vs teacher-only {tm:.3} (seeds: {})", fmt_list(&t)))
}

fn depth_trend(runs: &[DeskRun]) -> Outcome {
    let four = median(runs.iter().map(|r| r.ast).collect());
    let one: Vec<f64> = runs.iter().map(|r| r.single_block).collect();
    let om = median(one.clone());
    let params = &runs[0].params;
    let increasing = params.windows(2).all(|p| p[0] < p[1]);
    (
        four >= om - 0.02 && increasing,
        format!(
            "median 4 blocks {four:.3} vs 1 block {om:.3} (seeds: {}), parameters {params:?}",
            fmt_list(&one)
        ),
    )
}

fn preprocessing_exactness() -> Outcome {
    let mut spec = SynthSpec::desk(10);
    spec.n_train = 50;
    spec.n_test_normal = 0;
    spec.n_test_anomalous = 0;
    spec.preprocess = PreprocessConfig {
        resize: (48, 48),
        unshuffle: 4,
        dilation: 8,
        ..spec.preprocess.clone()
    };
    let raw = synth_raw(&spec).unwrap();
    let mut mismatches = [0usize; 5];
    for s in &raw.train {
        let d = DepthMap::from_raw(s.depth.clone().unwrap()).unwrap();
        let (h, w) = (d.height(), d.width());
        let filled = fill_missing_depth(&d);
        let (vals, ok) = fill_oracle(&d);
        mismatches[0] += (0..h * w)
            .filter(|&p| (filled.validity.data()[p] == 1.0) != ok[p] || filled.values.data()[p] != if ok[p] { vals[p] } else { 0.0 })
            .count();

        let plane = background_plane(&filled).unwrap();
        let c = |r: usize, q: usize| filled.values.data()[r * w + q] as f64;
        mismatches[1] += (0..h * w)
            .filter(|&p| {
                let (y, x) = ((p / w) as f64 / (h - 1) as f64, (p % w) as f64 / (w - 1) as f64);
                let top = c(0, 0) * (1.0 - x) + c(0, w - 1) * x;
                let bottom = c(h - 1, 0) * (1.0 - x) + c(h - 1, w - 1) * x;
                plane.data()[p] != (top * (1.0 - y) + bottom * y) as f32
            })
            .count();

        let raw_fg: Vec<bool> = (0..h * w)
            .map(|p| filled.validity.data()[p] == 1.0 && (filled.values.data()[p] as f64 - plane.data()[p] as f64).abs() > 0.7)
            .collect();
        let thresholded = extract_foreground(&filled, &plane, 0.7, 1).unwrap();
        mismatches[2] += (0..h * w).filter(|&p| (thresholded.mask.data()[p] == 1.0) != raw_fg[p]).count();

        let full = extract_foreground(&filled, &plane, 0.7, 8).unwrap();
        let want = dilate_oracle(&raw_fg, h, w, 8);
        mismatches[3] += (0..h * w).filter(|&p| (full.mask.data()[p] == 1.0) != want[p]).count();

        let (fh, fw) = (spec.height, spec.width);
        let small = downsample_mask(&full, fh, fw).unwrap();
        mismatches[4] += (0..fh * fw)
            .filter(|&o| {
                let touched = (0..h * w).any(|p| {
                    full.mask.data()[p] == 1.0 && tent(o / fw, p / w, h, fh) * tent(o % fw, p % w, w, fw) > 0.0
                });
                (small.mask.data()[o] == 1.0) != touched
            })
            .count();
    }
    (
        mismatches.iter().all(|&m| m == 0),
        format!(
            "mismatching pixels over 50 maps: fill {}, plane {}, threshold {}, dilation {}, mask {}",
            mismatches[0], mismatches[1], mismatches[2], mismatches[3], mismatches[4]
        ),
    )
}

/// Runs synth, training, checkpointing and evaluation into `dir`.
fn pipeline(dir: &Path) {
    let mut spec = SynthSpec::desk(11);
    spec.n_train = 40;
    spec.n_test_normal = 10;
    spec.n_test_anomalous = 10;
    write_corpus(&spec, &synth_raw(&spec).unwrap(), dir).unwrap();
    let train = load_corpus(&dir.join("train.json")).unwrap();
    let test = load_corpus(&dir.join("test.json")).unwrap();
    let mut cfg = TrainConfig::preset(Preset::Desk, 11);
    cfg.epochs_teacher = 3;
    cfg.epochs_student = 3;
    let teacher = train_teacher(&train, &cfg).unwrap().model;
    save_teacher(&dir.join("teacher.ckpt"), &teacher, &cfg).unwrap();
    let student = train_student(&train, &teacher, &cfg).unwrap().model;
    save_student(&dir.join("student.ckpt"), &student, &cfg).unwrap();
    let scores = score_corpus(&test, &teacher, &student).unwrap();
    let report = MetricsReport::from_scores(&scores, cfg.seed, &cfg).unwrap();
    write_atomic(&dir.join("metrics.json"), &serde_json::to_vec_pretty(&report).unwrap()).unwrap();
    write_atomic(&dir.join("scores.csv"), scores_csv(&report).as_bytes()).unwrap();
    let values: Vec<f64> = report.scores.iter().map(|e| e.score).collect();
    let labels: Vec<bool> = report.scores.iter().map(|e| e.label.is_anomalous()).collect();
    let hist = Histogram::new(&values, &labels, 10).unwrap();
    write_atomic(&dir.join("histogram.csv"), histogram_csv(&hist).as_bytes()).unwrap();
}

fn determinism() -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pool.install(|| {
        pipeline(a.path());
        pipeline(b.path());
    });
    let files = ["teacher.ckpt", "student.ckpt", "metrics.json", "scores.csv", "histogram.csv", "train.json", "test.json"];
    let differing: Vec<&str> = files
        .iter()
        .filter(|f| std::fs::read(a.path().join(f)).unwrap() != std::fs::read(b.path().join(f)).unwrap())
        .copied()
        .collect();
    (
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} artifacts bitwise identical across two runs", files.len())
        } else {
            format!("differing artifacts: {differing:?}")
        },
    )
}

fn masking(run: &DeskRun) -> Outcome {
    // Foreground in the top-left corner, anomaly in the far bottom-right:
    // further apart than the teacher (16) and student (10) receptive radii.
    let (h, w) = (48, 48);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let features = Tensor::randn([16, h, w], 1.0, &mut rng);
    let depth = Tensor::randn([4, h, w], 0.3, &mut rng);
    let mask = Tensor::from_fn([h, w], |p| if p / w < 8 && p % w < 8 { 1.0 } else { 0.0 });
    let clean = assemble_sample(features.clone(), Some(depth.clone()), Some(mask.clone()), Label::Normal, None).unwrap();
    let mut bad = features;
    for c in 0..16 {
        for i in 38..46 {
            for j in 38..46 {
                bad.data_mut()[(c * h + i) * w + j] += 25.0;
            }
        }
    }
    let dirty = assemble_sample(bad, Some(depth), Some(mask), Label::Anomalous, None).unwrap();
    let a = score_sample(&clean, &run.teacher, &run.student).unwrap();
    let b = score_sample(&dirty, &run.teacher, &run.student).unwrap();
    let unmasked = |s: &ast_core::train::SampleScore| s.distance.data().iter().map(|&v| v as f64).fold(0.0, f64::max);
    let injected = unmasked(&b) > 10.0 * unmasked(&a);
    (
        a.score.to_bits() == b.score.to_bits() && injected,
        format!(
            "masked score {:.6} vs {:.6}; unmasked max distance {:.1} -> {:.1}",
            a.score,
            b.score,
            unmasked(&a),
            unmasked(&b)
        ),
    )
}

fn training_progress(runs: &[DeskRun]) -> (String, String) {
    let t: Vec<f64> = runs
        .iter()
        .map(|r| 1.0 - r.teacher_history.final_loss() / r.teacher_history.initial_loss)
        .collect();
    let s: Vec<f64> = runs
        .iter()
        .map(|r| r.student_history.final_loss() / r.student_history.initial_loss)
        .collect();
    (fmt_list(&t), fmt_list(&s))
}

fn main() {
    let started = Instant::now();
    let mut failures = 0;
    let mut report = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let (ok, detail) = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(o) => o,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        if !ok {
            failures += 1;
        }
        println!(
            "criterion {n:2} {}: {name}: {detail} [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
    };

    report(1, "bijectivity", &mut bijectivity);
    report(2, "log-det exactness", &mut logdet_exactness);
    report(3, "gradient integrity", &mut gradient_integrity);
    report(4, "AUROC oracle equivalence", &mut auroc_oracle);
    report(5, "density normalization", &mut density_normalization);
    report(6, "toy reproduction", &mut toy_reproduction);

    let t = Instant::now();
    let runs: Vec<DeskRun> = match catch_unwind(|| (0..5).map(desk_run).collect()) {
        Ok(r) => r,
        Err(_) => Vec::new(),
    };
    let desk_secs = t.elapsed().as_secs_f64();
    let with_runs = |f: fn(&[DeskRun]) -> Outcome| {
        let runs = &runs;
        move || {
            if runs.is_empty() {
                (false, "desk training failed".to_string())
            } else {
                f(runs)
            }
        }
    };
    report(7, "end-to-end synthetic detection", &mut with_runs(end_to_end));
    report(8, "teacher-only ordinal trend", &mut with_runs(teacher_only_trend));
    report(9, "student depth ordinal trend", &mut with_runs(depth_trend));
    report(10, "preprocessing exactness", &mut preprocessing_exactness);
    report(11, "determinism", &mut determinism);
    report(12, "foreground masking", &mut with_runs(|r| masking(&r[0])));

    if !runs.is_empty() {
        let (t, s) = training_progress(&runs);
        println!("desk runs took {desk_secs:.1}s; teacher loss reduction per seed: {t}; student final/initial per seed: {s}");
    }
    println!(
        "acceptance: {} of 12 criteria passed in {:.1}s",
        12 - failures,
        started.elapsed().as_secs_f64()
    );
    if failures > 0 {
        std::process::exit(1);
    }
}
