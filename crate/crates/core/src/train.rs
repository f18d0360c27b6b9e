//! Two-phase optimization: the teacher by masked NLL, then the student by
//! masked regression onto the frozen teacher, plus end-to-end scoring.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{positional_encoding, stack_batch, Label, Sample};
use crate::error::{Error, Result};
use crate::flow::{nll_map, teacher_loss_var, TeacherConfig, TeacherModel};
use crate::layers::bind_all;
use crate::student::{
    distance_map, distance_map_var, image_score, student_loss_var, Mode, StudentConfig, StudentModel,
};
use crate::tensor::{Real, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Mvt2d,
    Mvt3d,
    Desk,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mvt2d" => Ok(Preset::Mvt2d),
            "mvt3d" => Ok(Preset::Mvt3d),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::Config(format!("unknown preset {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub epochs_teacher: usize,
    pub epochs_student: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Positional-encoding channels.
    pub pos_channels: usize,
    pub teacher_blocks: usize,
    pub teacher_hidden: usize,
    pub alpha: f64,
    pub student_blocks: usize,
    pub student_hidden: usize,
    pub kernel: usize,
    pub leaky_slope: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl TrainConfig {
    pub fn preset(preset: Preset, seed: u64) -> Self {
        let base = Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-5,
            epochs_teacher: 240,
            epochs_student: 240,
            batch_size: 8,
            seed,
            pos_channels: 32,
            teacher_blocks: 4,
            teacher_hidden: 1024,
            alpha: 3.0,
            student_blocks: 4,
            student_hidden: 1024,
            kernel: 3,
            leaky_slope: 0.2,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        };
        match preset {
            Preset::Mvt2d => base,
            Preset::Mvt3d => Self {
                epochs_teacher: 72,
                epochs_student: 72,
                teacher_hidden: 64,
                alpha: 1.9,
                ..base
            },
            Preset::Desk => Self {
                epochs_teacher: 30,
                epochs_student: 30,
                teacher_hidden: 32,
                alpha: 1.9,
                student_hidden: 32,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr, self.adam_eps, self.alpha, self.bn_eps];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Config("lr, adam_eps, alpha and bn_eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("weight decay or batch-norm momentum out of range".into()));
        }
        if self.batch_size == 0 || self.teacher_hidden == 0 || self.student_hidden == 0 || self.teacher_blocks == 0 {
            return Err(Error::Config("batch size, block count and widths must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn teacher_config(&self, channels: usize) -> TeacherConfig {
        TeacherConfig {
            channels,
            cond_channels: self.pos_channels,
            n_blocks: self.teacher_blocks,
            hidden: self.teacher_hidden,
            alpha: self.alpha,
            kernel: self.kernel,
        }
    }

    pub fn student_config(&self, channels: usize) -> StudentConfig {
        StudentConfig {
            in_channels: channels,
            cond_channels: self.pos_channels,
            out_channels: channels,
            hidden: self.student_hidden,
            n_blocks: self.student_blocks,
            slope: self.leaky_slope,
            bn_eps: self.bn_eps,
            bn_momentum: self.bn_momentum,
            kernel: self.kernel,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor<f64>>,
    pub v: Vec<Tensor<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new<R: Real>(params: &[&Tensor<R>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam step with weight decay added to the gradient.
/// Nothing is modified when any gradient is non-finite.
pub fn adam_step<R: Real>(
    params: &mut [&mut Tensor<R>],
    grads: &[Tensor<R>],
    state: &mut AdamState,
    cfg: &AdamConfig,
    names: &[String],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim("parameter, gradient and moment counts differ"));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::dim(format!("gradient of {name} has the wrong shape")));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (k, (theta, g)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let th = theta.f64();
            let g = g.f64() + cfg.weight_decay * th;
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
            let step = cfg.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + cfg.eps);
            *theta = R::of(th - step);
        }
    }
    Ok(())
}

/// Loss before the first update and the mean batch loss of every epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
}

impl TrainHistory {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(self.initial_loss)
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const TEACHER_INIT: u64 = 0;
const TEACHER_SHUFFLE: u64 = 1;
const STUDENT_INIT: u64 = 2;
const STUDENT_SHUFFLE: u64 = 3;

fn check_corpus(samples: &[Sample]) -> Result<(usize, usize, usize)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidBatch("training corpus is empty".into()))?;
    let (c, (h, w)) = (first.input_channels(), first.size());
    for (i, s) in samples.iter().enumerate() {
        if s.label != Label::Normal {
            return Err(Error::Contract(format!("training sample {i} is not labelled normal")));
        }
        if s.input_channels() != c || s.size() != (h, w) || s.mask.is_some() != first.mask.is_some() {
            return Err(Error::dim(format!("training sample {i} differs in shape from sample 0")));
        }
    }
    Ok((c, h, w))
}

fn batches(n: usize, batch_size: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(rng) = rng {
        order.shuffle(rng);
    }
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

fn tag(e: Error, phase: &str, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{m} ({phase} epoch {epoch}, batch {batch})")),
        other => other,
    }
}

fn finite_loss(v: f64, phase: &str, epoch: usize, batch: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{phase} loss (epoch {epoch}, batch {batch})")))
    }
}

fn gather(samples: &[Sample], idx: &[usize]) -> Result<(Tensor<f32>, Option<Tensor<f32>>)> {
    let picked: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
    stack_batch(&picked)
}

#[derive(Clone, Debug)]
pub struct TeacherRun {
    pub model: TeacherModel,
    pub history: TrainHistory,
}

fn teacher_batch_loss(
    model: &TeacherModel,
    x: &Tensor<f32>,
    cond: &Tensor<f32>,
    masks: Option<&Tensor<f32>>,
    grads: bool,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let tape = Tape::new();
    let vars = bind_all(&tape, &model.params(), grads);
    let bound = model.bind_vars(&vars);
    let loss = teacher_loss_var(&bound, tape.constant(x.clone()), tape.constant(cond.clone()), masks)?;
    let value = loss.value().item().f64();
    if !grads || !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let g = tape.backward(loss)?;
    Ok((value, vars.iter().map(|v| g.get_or_zeros(*v)).collect()))
}

/// Trains a fresh teacher on normal samples.
pub fn train_teacher(train: &[Sample], cfg: &TrainConfig) -> Result<TeacherRun> {
    cfg.validate()?;
    let (c, h, w) = check_corpus(train)?;
    let pe = positional_encoding::<f32>(h, w, cfg.pos_channels)?;
    let mut model = TeacherModel::new(cfg.teacher_config(c), &mut rng_for(cfg.seed, TEACHER_INIT))?;
    let names = model.param_names();
    let adam = cfg.adam();
    let mut state = AdamState::new(&model.params());
    let mut shuffle = rng_for(cfg.seed, TEACHER_SHUFFLE);

    let mut initial = 0.0;
    let fixed = batches(train.len(), cfg.batch_size, None);
    for (b, idx) in fixed.iter().enumerate() {
        let (x, masks) = gather(train, idx)?;
        let cond = pe.repeat_outer(idx.len());
        let (loss, _) = teacher_batch_loss(&model, &x, &cond, masks.as_ref(), false).map_err(|e| tag(e, "teacher", 0, b))?;
        initial += finite_loss(loss, "teacher", 0, b)?;
    }
    let initial_loss = initial / fixed.len() as f64;

    let mut epoch_losses = Vec::with_capacity(cfg.epochs_teacher);
    for epoch in 1..=cfg.epochs_teacher {
        let order = batches(train.len(), cfg.batch_size, Some(&mut shuffle));
        let mut total = 0.0;
        for (b, idx) in order.iter().enumerate() {
            let (x, masks) = gather(train, idx)?;
            let cond = pe.repeat_outer(idx.len());
            let (loss, grads) = teacher_batch_loss(&model, &x, &cond, masks.as_ref(), true)
                .map_err(|e| tag(e, "teacher", epoch, b))?;
            total += finite_loss(loss, "teacher", epoch, b)?;
            adam_step(&mut model.params_mut(), &grads, &mut state, &adam, &names)
                .map_err(|e| tag(e, "teacher", epoch, b))?;
        }
        epoch_losses.push(total / order.len() as f64);
    }
    Ok(TeacherRun {
        model,
        history: TrainHistory {
            initial_loss,
            epoch_losses,
        },
    })
}

#[derive(Clone, Debug)]
pub struct StudentRun {
    pub model: StudentModel,
    pub history: TrainHistory,
}

/// Teacher latents for each sample, computed once: the teacher is frozen.
fn teacher_targets(teacher: &TeacherModel, samples: &[Sample], pe: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
    samples
        .par_iter()
        .map(|s| Ok(teacher.forward(&s.input(), pe)?.z))
        .collect()
}

/// Trains a fresh student to regress the frozen teacher's latents.
pub fn train_student(train: &[Sample], teacher: &TeacherModel, cfg: &TrainConfig) -> Result<StudentRun> {
    cfg.validate()?;
    let (c, h, w) = check_corpus(train)?;
    if teacher.config.channels != c || teacher.config.cond_channels != cfg.pos_channels {
        return Err(Error::dim("teacher does not match the corpus or positional channels"));
    }
    let pe = positional_encoding::<f32>(h, w, cfg.pos_channels)?;
    let targets = teacher_targets(teacher, train, &pe)?;
    let mut model = StudentModel::new(cfg.student_config(c), &mut rng_for(cfg.seed, STUDENT_INIT))?;
    let names = model.param_names();
    let adam = cfg.adam();
    let mut state = AdamState::new(&model.params());
    let mut shuffle = rng_for(cfg.seed, STUDENT_SHUFFLE);

    let run_batch = |model: &StudentModel, idx: &[usize], grads: bool| -> Result<(f64, Vec<Tensor<f32>>, Vec<_>)> {
        let (x, masks) = gather(train, idx)?;
        let target = Tensor::stack(&idx.iter().map(|&i| &targets[i]).collect::<Vec<_>>())?;
        let tape = Tape::new();
        let vars = bind_all(&tape, &model.params(), grads);
        let (y, stats) = model.bind_vars(&vars).forward(
            tape.constant(x),
            tape.constant(pe.repeat_outer(idx.len())),
            Mode::Train,
        )?;
        let dist = distance_map_var(y, tape.constant(target))?;
        let loss = student_loss_var(dist, masks.as_ref())?;
        let value = loss.value().item() as f64;
        if !grads || !value.is_finite() {
            return Ok((value, Vec::new(), stats));
        }
        let g = tape.backward(loss)?;
        Ok((value, vars.iter().map(|v| g.get_or_zeros(*v)).collect(), stats))
    };

    let mut initial = 0.0;
    let fixed = batches(train.len(), cfg.batch_size, None);
    for (b, idx) in fixed.iter().enumerate() {
        let (loss, _, _) = run_batch(&model, idx, false).map_err(|e| tag(e, "student", 0, b))?;
        initial += finite_loss(loss, "student", 0, b)?;
    }
    let initial_loss = initial / fixed.len() as f64;

    let mut epoch_losses = Vec::with_capacity(cfg.epochs_student);
    for epoch in 1..=cfg.epochs_student {
        let order = batches(train.len(), cfg.batch_size, Some(&mut shuffle));
        let mut total = 0.0;
        for (b, idx) in order.iter().enumerate() {
            let (loss, grads, stats) = run_batch(&model, idx, true).map_err(|e| tag(e, "student", epoch, b))?;
            total += finite_loss(loss, "student", epoch, b)?;
            adam_step(&mut model.params_mut(), &grads, &mut state, &adam, &names)
                .map_err(|e| tag(e, "student", epoch, b))?;
            model.apply_stats(&stats)?;
        }
        epoch_losses.push(total / order.len() as f64);
    }
    Ok(StudentRun {
        model,
        history: TrainHistory {
            initial_loss,
            epoch_losses,
        },
    })
}

/// Scores and maps for one test sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleScore {
    pub label: Label,
    /// Student-teacher image score.
    pub score: f64,
    /// Teacher-only image score from the NLL map.
    pub teacher_score: f64,
    /// `[H, W]` student-teacher distance.
    pub distance: Tensor<f32>,
    /// `[H, W]` teacher NLL.
    pub nll: Tensor<f32>,
    pub mask: Option<Tensor<f32>>,
    pub gt_mask: Option<Tensor<f32>>,
}

fn squeeze(map: Tensor<f32>) -> Result<Tensor<f32>> {
    let shape = map.shape().to_vec();
    map.reshape(&shape[shape.len() - 2..])
}

pub fn score_sample(sample: &Sample, teacher: &TeacherModel, student: &StudentModel) -> Result<SampleScore> {
    let (h, w) = sample.size();
    let pe = positional_encoding::<f32>(h, w, teacher.config.cond_channels)?;
    let x = sample.input();
    let out = teacher.forward(&x, &pe)?;
    let pred = student.predict(&x, &pe)?;
    let distance = squeeze(distance_map(&pred, &out.z)?)?;
    let nll = squeeze(nll_map(&out)?)?;
    let mask = sample.mask.as_ref();
    Ok(SampleScore {
        label: sample.label,
        score: image_score(&distance, mask)?,
        teacher_score: image_score(&nll, mask)?,
        distance,
        nll,
        mask: sample.mask.clone(),
        gt_mask: sample.gt_mask.clone(),
    })
}

/// Scores every test sample (in parallel, results in input order).
pub fn score_corpus(test: &[Sample], teacher: &TeacherModel, student: &StudentModel) -> Result<Vec<SampleScore>> {
    test.par_iter().map(|s| score_sample(s, teacher, student)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn adam_cfg(lr: f64, wd: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: wd,
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = Tensor::<f32>::from_fn([3], |i| i as f32);
        let before = p.clone();
        let mut st = AdamState::new(&[&p]);
        adam_step(&mut [&mut p], &[Tensor::zeros([3])], &mut st, &adam_cfg(0.1, 0.0), &[]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_by_hand() {
        let mut p = Tensor::<f64>::new([2], vec![1.0, -2.0]).unwrap();
        let g = Tensor::new([2], vec![0.5, -3.0]).unwrap();
        let mut st = AdamState::new(&[&p]);
        adam_step(&mut [&mut p], &[g], &mut st, &adam_cfg(0.01, 0.0), &[]).unwrap();
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        let expect = [1.0 - 0.01 * 0.5 / (0.5 + 1e-8), -2.0 + 0.01 * 3.0 / (3.0 + 1e-8)];
        for (a, b) in p.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn quadratic_converges() {
        let mut p = Tensor::<f64>::scalar(1.0);
        let mut st = AdamState::new(&[&p]);
        for _ in 0..500 {
            let g = p.map(|t| 2.0 * t);
            adam_step(&mut [&mut p], &[g], &mut st, &adam_cfg(0.05, 0.0), &[]).unwrap();
        }
        assert!(p.item().abs() < 1e-3, "{}", p.item());
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = Tensor::<f32>::scalar(1.0);
        let mut st = AdamState::new(&[&p]);
        let err = adam_step(
            &mut [&mut p],
            &[Tensor::scalar(f32::NAN)],
            &mut st,
            &adam_cfg(0.1, 0.0),
            &["block0.gamma1".to_string()],
        )
        .unwrap_err();
        assert!(err.to_string().contains("block0.gamma1"));
        assert_eq!(p.item(), 1.0);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn presets() {
        let c = TrainConfig::preset(Preset::Mvt3d, 0);
        assert_eq!((c.epochs_teacher, c.teacher_hidden, c.alpha), (72, 64, 1.9));
        let c = TrainConfig::preset(Preset::Mvt2d, 0);
        assert_eq!((c.epochs_teacher, c.teacher_hidden, c.alpha), (240, 1024, 3.0));
        assert_eq!("desk".parse::<Preset>().unwrap(), Preset::Desk);
        assert!("x".parse::<Preset>().is_err());
    }
}
