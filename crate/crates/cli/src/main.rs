use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ast_core::checkpoint::{load_student, load_teacher, save_student, save_teacher};
use ast_core::data::{
    load_corpus, positional_encoding, synth_raw, write_atomic, write_corpus, Sample, SynthSpec,
};
use ast_core::eval::{
    export_score_map, histogram_csv, projection_basis, scores_csv, toy_experiment, Histogram,
    MetricsReport, ToySpec,
};
use ast_core::flow::TeacherModel;
use ast_core::student::StudentModel;
use ast_core::train::{
    score_corpus, train_student, train_teacher, Preset, SampleScore, TrainConfig, TrainHistory,
};
use ast_core::verify::{format_gradcheck_table, gradcheck_suite, selftest};
use ast_core::{Error, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "ast", version, about = "Asymmetric student-teacher anomaly detection")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// JSON file overriding fields of the train config, synth spec or toy spec.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Worker threads; 1 is fully deterministic.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, default_value = "desk")]
    preset: Preset,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus (train.json and test.json manifests).
    Synth,
    /// Train the normalizing-flow teacher.
    TrainTeacher {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Train the student against a frozen teacher.
    TrainStudent {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Write per-sample scores and score maps.
    Score {
        #[command(flatten)]
        models: Models,
    },
    /// Write the metrics report, scores, histogram and a projection.
    Eval {
        #[command(flatten)]
        models: Models,
        #[arg(long, default_value_t = 20)]
        bins: usize,
    },
    /// Run the one-dimensional toy experiment.
    Toy,
    /// Run the gradient verification suite.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        points: usize,
    },
    /// Run the invariant self-tests.
    Selftest,
}

#[derive(Args, Debug)]
struct Models {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    student: PathBuf,
}

/// Overlays the fields of the `--config` file onto `base`. Unknown keys are
/// rejected.
fn overlay<T: Serialize + DeserializeOwned>(base: T, config: Option<&Path>) -> Result<T> {
    let Some(path) = config else { return Ok(base) };
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let patch: serde_json::Value = serde_json::from_str(&text)?;
    let mut value = serde_json::to_value(base)?;
    let (Some(target), Some(fields)) = (value.as_object_mut(), patch.as_object()) else {
        return Err(Error::Config(format!("{}: expected a JSON object", path.display())));
    };
    for (k, v) in fields {
        if !target.contains_key(k) {
            return Err(Error::Config(format!("{}: unknown field `{k}`", path.display())));
        }
        target.insert(k.clone(), v.clone());
    }
    Ok(serde_json::from_value(value)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn loss_csv(h: &TrainHistory) -> String {
    let mut s = format!("epoch,loss\n0,{:.16e}\n", h.initial_loss);
    for (i, l) in h.epoch_losses.iter().enumerate() {
        s.push_str(&format!("{},{l:.16e}\n", i + 1));
    }
    s
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn train_config(g: &Global) -> Result<TrainConfig> {
    let mut cfg = overlay(TrainConfig::preset(g.preset, 0), g.config.as_deref())?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_models(m: &Models) -> Result<(Vec<Sample>, TeacherModel, StudentModel, TrainConfig)> {
    let (teacher, _) = load_teacher(&m.teacher)?;
    let (student, cfg) = load_student(&m.student)?;
    Ok((load_corpus(&m.corpus)?, teacher, student, cfg))
}

/// Teacher and student outputs at every foreground pixel of the first
/// anomalous sample, projected on one shared random basis.
fn projection_csv(test: &[Sample], teacher: &TeacherModel, student: &StudentModel, seed: u64) -> Result<String> {
    let mut s = String::from("row,col,teacher_u,teacher_v,student_u,student_v\n");
    let Some(sample) = test.iter().find(|s| s.label.is_anomalous()).or(test.first()) else {
        return Ok(s);
    };
    let (h, w) = sample.size();
    let pe = positional_encoding::<f32>(h, w, teacher.config.cond_channels)?;
    let x = sample.input();
    let z = teacher.forward(&x, &pe)?.z;
    let y = student.predict(&x, &pe)?;
    let c = teacher.config.channels;
    let basis = projection_basis(c, seed)?;
    let project = |t: &ast_core::Tensor<f32>, p: usize| {
        let dot = |b: &[f64]| (0..c).map(|k| t.data()[k * h * w + p] as f64 * b[k]).sum::<f64>();
        (dot(&basis[0]), dot(&basis[1]))
    };
    for p in 0..h * w {
        if sample.mask.as_ref().is_some_and(|m| m.data()[p] == 0.0) {
            continue;
        }
        let (tu, tv) = project(&z, p);
        let (su, sv) = project(&y, p);
        s.push_str(&format!("{},{},{tu:.16e},{tv:.16e},{su:.16e},{sv:.16e}\n", p / w, p % w));
    }
    Ok(s)
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    if let Some(n) = g.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    match &cli.command {
        Command::Synth => {
            let mut spec = overlay(SynthSpec::desk(0), g.config.as_deref())?;
            if let Some(seed) = g.seed {
                spec.seed = seed;
            }
            create_dir(&g.out)?;
            write_corpus(&spec, &synth_raw(&spec)?, &g.out)?;
            println!("{}", g.out.join("train.json").display());
            println!("{}", g.out.join("test.json").display());
        }
        Command::TrainTeacher { corpus } => {
            let cfg = train_config(g)?;
            let run = train_teacher(&load_corpus(corpus)?, &cfg)?;
            create_dir(&g.out)?;
            save_teacher(&g.out.join("teacher.ckpt"), &run.model, &cfg)?;
            write_atomic(&g.out.join("teacher_loss.csv"), loss_csv(&run.history).as_bytes())?;
            println!(
                "teacher loss {:.6} -> {:.6}",
                run.history.initial_loss,
                run.history.final_loss()
            );
        }
        Command::TrainStudent { corpus, teacher } => {
            let cfg = train_config(g)?;
            let (teacher, _) = load_teacher(teacher)?;
            let run = train_student(&load_corpus(corpus)?, &teacher, &cfg)?;
            create_dir(&g.out)?;
            save_student(&g.out.join("student.ckpt"), &run.model, &cfg)?;
            write_atomic(&g.out.join("student_loss.csv"), loss_csv(&run.history).as_bytes())?;
            println!(
                "student loss {:.6} -> {:.6}",
                run.history.initial_loss,
                run.history.final_loss()
            );
        }
        Command::Score { models } => {
            let (test, teacher, student, cfg) = load_models(models)?;
            let scores = score_corpus(&test, &teacher, &student)?;
            let maps = g.out.join("maps");
            create_dir(&maps)?;
            let mut csv = String::from("index,label,score,teacher_score\n");
            for (i, s) in scores.iter().enumerate() {
                csv.push_str(&format!(
                    "{i},{},{:.16e},{:.16e}\n",
                    if s.label.is_anomalous() { "anomalous" } else { "normal" },
                    s.score,
                    s.teacher_score
                ));
                export_score_map(&s.distance, &maps.join(format!("{i:04}.pgm")))?;
            }
            write_atomic(&g.out.join("scores.csv"), csv.as_bytes())?;
            println!("scored {} samples (seed {})", scores.len(), cfg.seed);
        }
        Command::Eval { models, bins } => {
            let (test, teacher, student, cfg) = load_models(models)?;
            let scores: Vec<SampleScore> = score_corpus(&test, &teacher, &student)?;
            let report = MetricsReport::from_scores(&scores, cfg.seed, &cfg)?;
            create_dir(&g.out)?;
            write_json(&g.out.join("metrics.json"), &report)?;
            write_atomic(&g.out.join("scores.csv"), scores_csv(&report).as_bytes())?;
            let values: Vec<f64> = report.scores.iter().map(|e| e.score).collect();
            let labels: Vec<bool> = report.scores.iter().map(|e| e.label.is_anomalous()).collect();
            let hist = Histogram::new(&values, &labels, *bins)?;
            write_atomic(&g.out.join("histogram.csv"), histogram_csv(&hist).as_bytes())?;
            let proj = projection_csv(&test, &teacher, &student, g.seed.unwrap_or(cfg.seed))?;
            write_atomic(&g.out.join("projection.csv"), proj.as_bytes())?;
            match report.pixel_auroc {
                Some(p) => println!(
                    "image AUROC {:.4}, teacher-only {:.4}, pixel {:.4}",
                    report.image_auroc, report.teacher_only_auroc, p
                ),
                None => println!(
                    "image AUROC {:.4}, teacher-only {:.4}",
                    report.image_auroc, report.teacher_only_auroc
                ),
            }
        }
        Command::Toy => {
            let mut spec = overlay(ToySpec::new(0), g.config.as_deref())?;
            if let Some(seed) = g.seed {
                spec.seed = seed;
            }
            let report = toy_experiment(&spec)?;
            create_dir(&g.out)?;
            write_atomic(&g.out.join("toy_curves.csv"), report.curves_csv().as_bytes())?;
            let mut summary = report.clone();
            summary.curve.clear();
            write_json(&g.out.join("toy_report.json"), &summary)?;
            let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.6}"));
            println!(
                "OOD distance: symmetric {}, asymmetric {}",
                fmt(report.symmetric_ood_dist),
                fmt(report.asymmetric_ood_dist)
            );
        }
        Command::Gradcheck { points } => {
            let rows = gradcheck_suite(g.seed.unwrap_or(0), *points)?;
            print!("{}", format_gradcheck_table(&rows));
            if let Some(bad) = rows.iter().find(|r| !r.passed()) {
                return Err(Error::Numerical(format!(
                    "gradient check `{}` (relative error {:.3e})",
                    bad.name, bad.max_rel_error
                )));
            }
        }
        Command::Selftest => {
            let rows = selftest(g.seed.unwrap_or(0))?;
            for r in &rows {
                println!("{:<4} {} {}", if r.passed { "ok" } else { "FAIL" }, r.name, r.detail);
            }
            if let Some(bad) = rows.iter().find(|r| !r.passed) {
                return Err(Error::Numerical(format!("self-test `{}` failed", bad.name)));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
