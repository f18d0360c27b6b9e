use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ast(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ast"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(
        d.join("synth.json"),
        r#"{"n_train": 24, "n_test_normal": 6, "n_test_anomalous": 6}"#,
    )
    .unwrap();
    fs::write(d.join("train.json"), r#"{"epochs_teacher": 2, "epochs_student": 2}"#).unwrap();

    ok(&ast(d, &["synth", "--config", "synth.json", "--seed", "3", "--out", "data"]));
    ok(&ast(d, &["train-teacher", "--corpus", "data/train.json", "--config", "train.json", "--out", "run"]));
    ok(&ast(
        d,
        &["train-student", "--corpus", "data/train.json", "--teacher", "run/teacher.ckpt", "--config", "train.json", "--out", "run"],
    ));
    let models = ["--corpus", "data/test.json", "--teacher", "run/teacher.ckpt", "--student", "run/student.ckpt"];
    ok(&ast(d, &[&["eval"][..], &models, &["--out", "eval"]].concat()));
    ok(&ast(d, &[&["score"][..], &models, &["--out", "score"]].concat()));

    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(d.join("eval/metrics.json")).unwrap()).unwrap();
    let auroc = metrics["image_auroc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auroc));
    assert_eq!(metrics["scores"].as_array().unwrap().len(), 12);
    for f in ["scores.csv", "histogram.csv", "projection.csv"] {
        assert!(d.join("eval").join(f).exists(), "{f}");
    }
    for f in ["teacher_loss.csv", "student_loss.csv"] {
        assert_eq!(fs::read_to_string(d.join("run").join(f)).unwrap().lines().count(), 4);
    }
    assert!(d.join("score/maps/0011.pgm").exists());
    assert_eq!(fs::read_to_string(d.join("score/scores.csv")).unwrap().lines().count(), 13);
}

#[test]
fn gradcheck_prints_table() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ast(tmp.path(), &["gradcheck", "--points", "2"]);
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("coupling_block"));
    assert!(text.contains("conv2d_same"));
}

#[test]
fn toy_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("toy.json"), r#"{"steps": 200, "curve_points": 41}"#).unwrap();
    ok(&ast(d, &["toy", "--seed", "7", "--config", "toy.json", "--out", "a"]));
    ok(&ast(d, &["toy", "--seed", "7", "--config", "toy.json", "--out", "b"]));
    let a = fs::read(d.join("a/toy_curves.csv")).unwrap();
    assert_eq!(a, fs::read(d.join("b/toy_curves.csv")).unwrap());
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 42);
    assert_eq!(
        fs::read(d.join("a/toy_report.json")).unwrap(),
        fs::read(d.join("b/toy_report.json")).unwrap()
    );
}

#[test]
fn unknown_flag_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(ast(tmp.path(), &["toy", "--bogus"]).status.code(), Some(1));
}

#[test]
fn unknown_config_key_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.json"), r#"{"learning_rate": 0.1}"#).unwrap();
    let out = ast(tmp.path(), &["toy", "--config", "bad.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn missing_checkpoint_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ast(
        tmp.path(),
        &["eval", "--corpus", "none.json", "--teacher", "t.ckpt", "--student", "s.ckpt"],
    );
    assert_eq!(out.status.code(), Some(1));
}
