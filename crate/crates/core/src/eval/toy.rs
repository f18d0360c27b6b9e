//! Scalar mini-MLP experiment: a fixed random teacher, a student of the same
//! depth and a deeper student, compared outside the training interval.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{bind_all, Linear};
use crate::tensor::{Tape, Tensor, Var};
use crate::train::{adam_step, AdamConfig, AdamState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub seed: u64,
    pub hidden: usize,
    /// Multiplier on the teacher's fan-in uniform initialization.
    pub teacher_scale: f64,
    pub teacher_layers: usize,
    pub symmetric_layers: usize,
    pub asymmetric_layers: usize,
    /// Training inputs are drawn from `[-train_limit, train_limit]`.
    pub train_limit: f64,
    /// Anomalies are inputs with `train_limit < |x| <= anomaly_limit`.
    pub anomaly_limit: f64,
    pub n_train: usize,
    pub n_anomaly: usize,
    pub steps: usize,
    pub lr: f64,
    pub curve_points: usize,
}

impl ToySpec {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            hidden: 32,
            teacher_scale: 1.0,
            teacher_layers: 1,
            symmetric_layers: 1,
            asymmetric_layers: 3,
            train_limit: 1.0,
            anomaly_limit: 2.0,
            n_train: 256,
            n_anomaly: 256,
            steps: 2000,
            lr: 3e-2,
            curve_points: 401,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_limit > 0.0) || !(self.anomaly_limit >= self.train_limit) {
            return Err(Error::Config(
                "anomaly interval must lie outside a non-empty training interval".into(),
            ));
        }
        if self.hidden == 0 || self.n_train == 0 || self.teacher_layers == 0 {
            return Err(Error::Config("toy sizes must be positive".into()));
        }
        Ok(())
    }
}

/// `tanh` multilayer perceptron with scalar input and output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear<f64>>,
}

impl Mlp {
    pub fn new(hidden_layers: usize, width: usize, rng: &mut impl Rng) -> Self {
        let mut dims = vec![1];
        dims.extend(std::iter::repeat_n(width, hidden_layers));
        dims.push(1);
        Self {
            layers: dims.windows(2).map(|d| Linear::new(d[0], d[1], rng)).collect(),
        }
    }

    pub fn params(&self) -> Vec<&Tensor<f64>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<f64>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    fn forward_vars<'t>(&self, vars: &[Var<'t, f64>], x: Var<'t, f64>) -> Result<Var<'t, f64>> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, pair) in vars.chunks(2).enumerate() {
            h = h.linear(pair[0], pair[1])?;
            if i < last {
                h = h.tanh();
            }
        }
        Ok(h)
    }

    pub fn eval(&self, xs: &[f64]) -> Result<Vec<f64>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let tape = Tape::new();
        let vars = bind_all(&tape, &self.params(), false);
        let x = tape.constant(Tensor::new([xs.len(), 1], xs.to_vec())?);
        Ok(self.forward_vars(&vars, x)?.value().data().to_vec())
    }

    /// Full-batch mean-squared-error regression with Adam.
    pub fn fit(&mut self, xs: &[f64], ys: &[f64], steps: usize, lr: f64) -> Result<()> {
        let adam = AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let mut state = AdamState::new(&self.params());
        let x = Tensor::new([xs.len(), 1], xs.to_vec())?;
        let y = Tensor::new([ys.len(), 1], ys.to_vec())?;
        for step in 0..steps {
            let grads = {
                let tape = Tape::new();
                let vars = bind_all(&tape, &self.params(), true);
                let pred = self.forward_vars(&vars, tape.constant(x.clone()))?;
                let loss = pred.sub(tape.constant(y.clone()))?.square().mean();
                if !loss.value().item().is_finite() {
                    return Err(Error::NonFinite(format!("toy training loss at step {step}")));
                }
                let g = tape.backward(loss)?;
                vars.iter().map(|v| g.get_or_zeros(*v)).collect::<Vec<_>>()
            };
            adam_step(&mut self.params_mut(), &grads, &mut state, &adam, &[])?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub x: f64,
    pub teacher: f64,
    pub symmetric: f64,
    pub asymmetric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    /// Mean `|f_s - f_t|` over the anomaly interval; `None` when it is empty.
    pub symmetric_ood_dist: Option<f64>,
    pub asymmetric_ood_dist: Option<f64>,
    /// Mean `|f_s - f_t|` over a dense grid of the training interval.
    pub symmetric_id_dist: f64,
    pub asymmetric_id_dist: f64,
    /// `max - min` of the teacher over the training interval.
    pub teacher_range: f64,
    pub curve: Vec<CurvePoint>,
}

impl ToyReport {
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("x,teacher,symmetric,asymmetric\n");
        for p in &self.curve {
            s.push_str(&format!(
                "{:.16e},{:.16e},{:.16e},{:.16e}\n",
                p.x, p.teacher, p.symmetric, p.asymmetric
            ));
        }
        s
    }
}

fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![(lo + hi) / 2.0],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

pub fn toy_experiment(spec: &ToySpec) -> Result<ToyReport> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut teacher = Mlp::new(spec.teacher_layers, spec.hidden, &mut rng);
    for p in teacher.params_mut() {
        *p = p.map(|v| v * spec.teacher_scale);
    }
    let (t, a) = (spec.train_limit, spec.anomaly_limit);
    let xs: Vec<f64> = (0..spec.n_train).map(|_| rng.random_range(-t..=t)).collect();
    let ys = teacher.eval(&xs)?;
    let mut symmetric = Mlp::new(spec.symmetric_layers, spec.hidden, &mut rng);
    let mut asymmetric = Mlp::new(spec.asymmetric_layers, spec.hidden, &mut rng);
    symmetric.fit(&xs, &ys, spec.steps, spec.lr)?;
    asymmetric.fit(&xs, &ys, spec.steps, spec.lr)?;

    let id = grid(-t, t, 201);
    let (t_id, s_id, a_id) = (teacher.eval(&id)?, symmetric.eval(&id)?, asymmetric.eval(&id)?);
    let range = t_id.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - t_id.iter().cloned().fold(f64::INFINITY, f64::min);

    // half the anomaly points on each side, both ends excluding |x| = t
    let half = spec.n_anomaly / 2;
    let ood: Vec<f64> = if a > t {
        let step = (a - t) / half.max(1) as f64;
        (1..=half).flat_map(|i| [-(t + step * i as f64), t + step * i as f64]).collect()
    } else {
        Vec::new()
    };
    let (t_ood, s_ood, a_ood) = (teacher.eval(&ood)?, symmetric.eval(&ood)?, asymmetric.eval(&ood)?);
    let ood_dist = |s: &[f64]| (!ood.is_empty()).then(|| mean_abs_diff(s, &t_ood));

    let span = a.max(t);
    let cx = grid(-span, span, spec.curve_points);
    let (ct, cs, ca) = (teacher.eval(&cx)?, symmetric.eval(&cx)?, asymmetric.eval(&cx)?);
    Ok(ToyReport {
        symmetric_ood_dist: ood_dist(&s_ood),
        asymmetric_ood_dist: ood_dist(&a_ood),
        symmetric_id_dist: mean_abs_diff(&s_id, &t_id),
        asymmetric_id_dist: mean_abs_diff(&a_id, &t_id),
        teacher_range: range,
        curve: (0..cx.len())
            .map(|i| CurvePoint {
                x: cx[i],
                teacher: ct[i],
                symmetric: cs[i],
                asymmetric: ca[i],
            })
            .collect(),
    })
}
