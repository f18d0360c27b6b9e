//! Residual convolutional student and the distance-based anomaly score.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::match_condition;
use crate::layers::{bind_all, BatchNorm2d, BoundBatchNorm, BoundConv, Conv2d};
use crate::masking::{masked_max, masked_mean, masked_mean_value};
use crate::tensor::{nchw, BatchStats, Padding, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentConfig {
    /// Channels of the raw input (features plus depth).
    pub in_channels: usize,
    pub cond_channels: usize,
    /// Must equal the teacher's channel count.
    pub out_channels: usize,
    pub hidden: usize,
    pub n_blocks: usize,
    pub slope: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub kernel: usize,
}

impl StudentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.hidden == 0 {
            return Err(Error::Config("student sizes must be positive".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config("student kernel must be odd".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Convolution followed by batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBn<R: Real = f32> {
    pub conv: Conv2d<R>,
    pub bn: BatchNorm2d<R>,
}

impl<R: Real> ConvBn<R> {
    fn new(c_in: usize, c_out: usize, cfg: &StudentConfig, rng: &mut impl Rng) -> Self {
        Self {
            conv: Conv2d::new(c_in, c_out, cfg.kernel, Padding::Same, rng),
            bn: BatchNorm2d::new(c_out, cfg.bn_eps, cfg.bn_momentum),
        }
    }

    fn params(&self) -> Vec<&Tensor<R>> {
        let mut p = self.conv.params();
        p.extend(self.bn.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<R>> {
        let mut p = self.conv.params_mut();
        p.extend(self.bn.params_mut());
        p
    }

    fn bind<'t, 'm>(&'m self, vars: &[Var<'t, R>]) -> BoundConvBn<'t, 'm, R> {
        BoundConvBn {
            conv: self.conv.bind(&vars[0..2]),
            bn: self.bn.bind(&vars[2..4]),
        }
    }
}

/// Two `conv -> bn -> leaky ReLU` stages with an additive skip around both.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock<R: Real = f32> {
    pub first: ConvBn<R>,
    pub second: ConvBn<R>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudentModel<R: Real = f32> {
    pub config: StudentConfig,
    pub entry: ConvBn<R>,
    pub blocks: Vec<ResidualBlock<R>>,
    pub exit: Conv2d<R>,
}

impl<R: Real> StudentModel<R> {
    pub fn new(config: StudentConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let hidden = config.hidden;
        let entry = ConvBn::new(config.in_channels + config.cond_channels, hidden, &config, rng);
        let blocks = (0..config.n_blocks)
            .map(|_| ResidualBlock {
                first: ConvBn::new(hidden, hidden, &config, rng),
                second: ConvBn::new(hidden, hidden, &config, rng),
            })
            .collect();
        let exit = Conv2d::new(hidden, config.out_channels, config.kernel, Padding::Same, rng);
        Ok(Self {
            config,
            entry,
            blocks,
            exit,
        })
    }

    fn norms(&self) -> Vec<&BatchNorm2d<R>> {
        let mut n = vec![&self.entry.bn];
        for b in &self.blocks {
            n.push(&b.first.bn);
            n.push(&b.second.bn);
        }
        n
    }

    fn norms_mut(&mut self) -> Vec<&mut BatchNorm2d<R>> {
        let mut n = vec![&mut self.entry.bn];
        for b in &mut self.blocks {
            n.push(&mut b.first.bn);
            n.push(&mut b.second.bn);
        }
        n
    }

    pub fn params(&self) -> Vec<&Tensor<R>> {
        let mut p = self.entry.params();
        for b in &self.blocks {
            p.extend(b.first.params());
            p.extend(b.second.params());
        }
        p.extend(self.exit.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<R>> {
        let mut p = self.entry.params_mut();
        for b in &mut self.blocks {
            p.extend(b.first.params_mut());
            p.extend(b.second.params_mut());
        }
        p.extend(self.exit.params_mut());
        p
    }

    /// Running statistics, two tensors (mean, var) per batch-norm layer.
    pub fn buffers(&self) -> Vec<&Tensor<R>> {
        self.norms()
            .into_iter()
            .flat_map(|n| [&n.running_mean, &n.running_var])
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor<R>> {
        self.norms_mut()
            .into_iter()
            .flat_map(|n| [&mut n.running_mean, &mut n.running_var])
            .collect()
    }

    /// Names matching `params()` order.
    pub fn param_names(&self) -> Vec<String> {
        let conv_bn = |prefix: &str| {
            ["conv.weight", "conv.bias", "bn.gamma", "bn.beta"]
                .map(|n| format!("{prefix}.{n}"))
                .to_vec()
        };
        let mut names = conv_bn("entry");
        for i in 0..self.blocks.len() {
            names.extend(conv_bn(&format!("block{i}.first")));
            names.extend(conv_bn(&format!("block{i}.second")));
        }
        names.extend(["exit.weight".to_string(), "exit.bias".to_string()]);
        names
    }

    /// Names matching `buffers()` order.
    pub fn buffer_names(&self) -> Vec<String> {
        let mut layers = vec!["entry".to_string()];
        for i in 0..self.blocks.len() {
            layers.push(format!("block{i}.first"));
            layers.push(format!("block{i}.second"));
        }
        layers
            .iter()
            .flat_map(|l| [format!("{l}.bn.running_mean"), format!("{l}.bn.running_var")])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    pub fn bind<'t>(&self, tape: &'t Tape<R>, trainable: bool) -> BoundStudent<'t, '_, R> {
        let vars = bind_all(tape, &self.params(), trainable);
        self.bind_vars(&vars)
    }

    pub fn bind_vars<'t>(&self, vars: &[Var<'t, R>]) -> BoundStudent<'t, '_, R> {
        assert_eq!(vars.len(), 6 + 8 * self.blocks.len());
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let o = 4 + 8 * i;
            blocks.push((b.first.bind(&vars[o..o + 4]), b.second.bind(&vars[o + 4..o + 8])));
        }
        let n = vars.len();
        BoundStudent {
            entry: self.entry.bind(&vars[0..4]),
            blocks,
            exit: self.exit.bind(&vars[n - 2..]),
            slope: self.config.slope,
        }
    }

    /// Folds batch statistics, in layer order, into the running averages.
    pub fn apply_stats(&mut self, stats: &[BatchStats]) -> Result<()> {
        let mut norms = self.norms_mut();
        if stats.len() != norms.len() {
            return Err(Error::dim("batch statistics do not match student layers"));
        }
        for (n, s) in norms.iter_mut().zip(stats) {
            n.update(s)?;
        }
        Ok(())
    }

    /// Eval-mode prediction on `[C_in,H,W]` or `[N,C_in,H,W]` input.
    pub fn predict(&self, x: &Tensor<R>, cond: &Tensor<R>) -> Result<Tensor<R>> {
        let tape = Tape::new();
        let (xv, cv) = self.leaves(&tape, x, cond)?;
        let (y, _) = self.bind(&tape, false).forward(xv, cv, Mode::Eval)?;
        Ok((*y.value()).clone())
    }

    fn leaves<'t>(
        &self,
        tape: &'t Tape<R>,
        x: &Tensor<R>,
        cond: &Tensor<R>,
    ) -> Result<(Var<'t, R>, Var<'t, R>)> {
        let cond = match_condition(x, cond)?;
        let (_, c, _, _) = nchw(x.shape())?;
        if c != self.config.in_channels {
            return Err(Error::dim(format!(
                "student expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        Ok((tape.constant(x.clone()), tape.constant(cond)))
    }
}

struct BoundConvBn<'t, 'm, R: Real> {
    conv: BoundConv<'t, R>,
    bn: BoundBatchNorm<'t, 'm, R>,
}

impl<'t, R: Real> BoundConvBn<'t, '_, R> {
    fn forward(
        &self,
        x: Var<'t, R>,
        mode: Mode,
        slope: f64,
        stats: &mut Vec<BatchStats>,
    ) -> Result<Var<'t, R>> {
        let h = self.conv.forward(x)?;
        let (h, s) = self.bn.forward(h, mode == Mode::Train)?;
        stats.extend(s);
        Ok(h.leaky_relu(slope))
    }
}

pub struct BoundStudent<'t, 'm, R: Real> {
    entry: BoundConvBn<'t, 'm, R>,
    blocks: Vec<(BoundConvBn<'t, 'm, R>, BoundConvBn<'t, 'm, R>)>,
    exit: BoundConv<'t, R>,
    slope: f64,
}

impl<'t, R: Real> BoundStudent<'t, '_, R> {
    /// Returns the prediction and, in training mode, the batch statistics of
    /// every batch-norm layer in order.
    pub fn forward(
        &self,
        x: Var<'t, R>,
        cond: Var<'t, R>,
        mode: Mode,
    ) -> Result<(Var<'t, R>, Vec<BatchStats>)> {
        let mut stats = Vec::new();
        let input = Var::concat_channels(&[x, cond])?;
        let mut h = self.entry.forward(input, mode, self.slope, &mut stats)?;
        for (first, second) in &self.blocks {
            let a = first.forward(h, mode, self.slope, &mut stats)?;
            let a = second.forward(a, mode, self.slope, &mut stats)?;
            h = a.add(h)?;
        }
        Ok((self.exit.forward(h)?, stats))
    }
}

/// Runs the student; in training mode the running statistics are updated.
pub fn student_forward<R: Real>(
    model: &mut StudentModel<R>,
    x: &Tensor<R>,
    cond: &Tensor<R>,
    mode: Mode,
) -> Result<Tensor<R>> {
    match mode {
        Mode::Eval => model.predict(x, cond),
        Mode::Train => {
            let tape = Tape::new();
            let (xv, cv) = model.leaves(&tape, x, cond)?;
            let (y, stats) = model.bind(&tape, false).forward(xv, cv, Mode::Train)?;
            let out = (*y.value()).clone();
            model.apply_stats(&stats)?;
            Ok(out)
        }
    }
}

/// Per-pixel squared distance over channels, on the tape.
pub fn distance_map_var<'t, R: Real>(fs: Var<'t, R>, ft: Var<'t, R>) -> Result<Var<'t, R>> {
    if fs.shape() != ft.shape() {
        return Err(Error::dim(format!(
            "distance between {:?} and {:?}",
            fs.shape(),
            ft.shape()
        )));
    }
    fs.sub(ft)?.square().sum_channels()
}

/// `|f_s(.,i,j) - f_t(.,i,j)|^2` for `[C,H,W]` (or batched) inputs.
pub fn distance_map<R: Real>(fs: &Tensor<R>, ft: &Tensor<R>) -> Result<Tensor<R>> {
    let tape = Tape::new();
    let d = distance_map_var(tape.constant(fs.clone()), tape.constant(ft.clone()))?;
    Ok((*d.value()).clone())
}

/// Mean distance over foreground (or all) pixels.
pub fn student_loss<R: Real>(dist: &Tensor<R>, mask: Option<&Tensor<R>>) -> Result<f64> {
    masked_mean_value(dist, mask)
}

pub fn student_loss_var<'t, R: Real>(
    dist: Var<'t, R>,
    mask: Option<&Tensor<R>>,
) -> Result<Var<'t, R>> {
    masked_mean(dist, mask)
}

/// Image-level score: maximum over the foreground when a mask exists,
/// otherwise the mean over all pixels.
pub fn image_score<R: Real>(dist: &Tensor<R>, mask: Option<&Tensor<R>>) -> Result<f64> {
    match mask {
        Some(m) => masked_max(dist, m),
        None => masked_mean_value(dist, None),
    }
}
