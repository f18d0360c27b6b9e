use ast_core::checkpoint::{load_student, load_teacher, save_student, save_teacher};
use ast_core::data::{
    decode_tensor, encode_tensor, load_corpus, load_tensor, save_tensor, synth_corpus, synth_raw,
    write_corpus, AnomalyTarget, Label, SynthSpec,
};
use ast_core::eval::auroc;
use ast_core::train::{score_corpus, train_student, train_teacher, Preset, TrainConfig};
use ast_core::{Error, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tensor_bytes_round_trip(seed in any::<u64>(), shape in prop::collection::vec(1usize..6, 0..4)) {
        let t = Tensor::<f32>::randn(shape.clone(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let bytes = encode_tensor(&t);
        prop_assert_eq!(bytes.len(), 10 + 4 * shape.len() + 4 * t.numel());
        let back = decode_tensor(&bytes).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn truncation_is_reported(seed in any::<u64>(), cut in 0usize..100) {
        let t = Tensor::<f32>::randn([3, 2, 2], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let bytes = encode_tensor(&t);
        let cut = cut % bytes.len();
        let is_format_error = matches!(decode_tensor(&bytes[..cut]), Err(Error::Format { .. }));
        prop_assert!(is_format_error);
    }
}

#[test]
fn sample_file_size_follows_the_format() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.astt");
    save_tensor(&path, &Tensor::zeros([368, 24, 24])).unwrap();
    let header = 4 + 4 + 1 + 1 + 3 * 4;
    assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, 368 * 24 * 24 * 4 + header);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_tensor(&path), Err(Error::Format { offset: 0, .. })));
}

fn small_spec(seed: u64) -> SynthSpec {
    let mut spec = SynthSpec::desk(seed);
    spec.n_train = 6;
    spec.n_test_normal = 4;
    spec.n_test_anomalous = 4;
    spec
}

#[test]
fn written_corpus_loads_back_identically() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec(1);
    write_corpus(&spec, &synth_raw(&spec).unwrap(), dir.path()).unwrap();
    let direct = synth_corpus(&spec).unwrap();
    assert_eq!(load_corpus(&dir.path().join("train.json")).unwrap(), direct.train);
    assert_eq!(load_corpus(&dir.path().join("test.json")).unwrap(), direct.test);
}

#[test]
fn corpus_is_deterministic_and_train_is_normal() {
    let a = synth_raw(&small_spec(2)).unwrap();
    let b = synth_raw(&small_spec(2)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, synth_raw(&small_spec(3)).unwrap());
    assert!(a.train.iter().all(|s| s.label == Label::Normal && s.gt_mask.is_none()));
    let corpus = synth_corpus(&small_spec(2)).unwrap();
    assert!(corpus.train.iter().all(|s| s.label == Label::Normal));
    assert_eq!(corpus.train[0].input_channels(), 16 + 4);
}

#[test]
fn ground_truth_covers_exactly_the_perturbed_patch() {
    for target in [AnomalyTarget::Features, AnomalyTarget::Depth, AnomalyTarget::Both] {
        let mut spec = small_spec(4);
        spec.anomaly_target = target;
        let perturbed = synth_raw(&spec).unwrap();
        spec.anomaly_amplitude = 0.0;
        let clean = synth_raw(&spec).unwrap();
        for (p, c) in perturbed.test.iter().zip(&clean.test).filter(|(p, _)| p.label == Label::Anomalous) {
            let gt = p.gt_mask.as_ref().unwrap();
            let (h, w) = (gt.shape()[0], gt.shape()[1]);
            let feature_diff: Vec<bool> = (0..h * w)
                .map(|q| (0..16).any(|k| p.features.data()[k * h * w + q] != c.features.data()[k * h * w + q]))
                .collect();
            let (dp, dc) = (p.depth.as_ref().unwrap(), c.depth.as_ref().unwrap());
            let dw = dp.shape()[1];
            let f = dw / w;
            let depth_diff: Vec<bool> = (0..h * w)
                .map(|q| {
                    let (i, j) = (q / w, q % w);
                    (i * f..(i + 1) * f).any(|a| (j * f..(j + 1) * f).any(|b| dp.data()[a * dw + b] != dc.data()[a * dw + b]))
                })
                .collect();
            for q in 0..h * w {
                let inside = gt.data()[q] == 1.0;
                if matches!(target, AnomalyTarget::Features | AnomalyTarget::Both) {
                    assert_eq!(feature_diff[q], inside, "{target:?} features at {q}");
                } else {
                    assert!(!feature_diff[q]);
                }
                if matches!(target, AnomalyTarget::Depth | AnomalyTarget::Both) {
                    assert!(!depth_diff[q] || inside, "{target:?} depth outside patch at {q}");
                } else {
                    assert!(!depth_diff[q]);
                }
            }
            if !matches!(target, AnomalyTarget::Features) {
                assert!(depth_diff.iter().any(|&d| d));
            }
        }
    }
}

#[test]
fn zero_amplitude_gives_chance_auroc() {
    let mut spec = SynthSpec::desk(8);
    spec.anomaly_amplitude = 0.0;
    spec.n_train = 100;
    spec.n_test_normal = 150;
    spec.n_test_anomalous = 150;
    let corpus = synth_corpus(&spec).unwrap();
    let mut cfg = TrainConfig::preset(Preset::Desk, 8);
    cfg.epochs_teacher = 3;
    cfg.epochs_student = 3;
    cfg.teacher_hidden = 8;
    cfg.student_hidden = 8;
    cfg.student_blocks = 1;
    let teacher = train_teacher(&corpus.train, &cfg).unwrap().model;
    let student = train_student(&corpus.train, &teacher, &cfg).unwrap().model;
    let scores = score_corpus(&corpus.test, &teacher, &student).unwrap();
    let labels: Vec<bool> = scores.iter().map(|s| s.label.is_anomalous()).collect();
    let ast: Vec<f64> = scores.iter().map(|s| s.score).collect();
    let a = auroc(&ast, &labels).unwrap();
    assert!((a - 0.5).abs() <= 0.1, "AUROC {a}");
}

#[test]
fn checkpoint_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_corpus(&small_spec(5)).unwrap();
    let mut cfg = TrainConfig::preset(Preset::Desk, 5);
    cfg.epochs_teacher = 1;
    cfg.epochs_student = 1;
    cfg.teacher_hidden = 8;
    cfg.student_hidden = 8;
    let teacher = train_teacher(&corpus.train, &cfg).unwrap().model;
    let student = train_student(&corpus.train, &teacher, &cfg).unwrap().model;
    let (tp, sp) = (dir.path().join("t.ckpt"), dir.path().join("s.ckpt"));
    save_teacher(&tp, &teacher, &cfg).unwrap();
    save_student(&sp, &student, &cfg).unwrap();
    let (t2, c2) = load_teacher(&tp).unwrap();
    let (s2, c3) = load_student(&sp).unwrap();
    assert_eq!((t2, s2), (teacher, student));
    assert_eq!((&c2, &c3), (&cfg, &cfg));
    let bytes = std::fs::read(&tp).unwrap();
    std::fs::write(&tp, &bytes[..bytes.len() - 3]).unwrap();
    assert!(load_teacher(&tp).is_err());
}
