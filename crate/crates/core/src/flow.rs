//! Conditional affine-coupling normalizing flow (the teacher).
//!
//! Each block permutes channels with a fixed permutation, splits them into
//! halves `x1 | x2` and applies two affine half-updates conditioned on the
//! positional encoding `c`:
//!
//! ```text
//! y2 = x2 * exp(s1([x1, c])) + t1([x1, c])
//! y1 = x1 * exp(s2([y2, c])) + t2([y2, c])
//! ```
//!
//! The second update reads the already transformed `y2`, so the Jacobian of a
//! block is triangular and its log-determinant is the channel sum of the two
//! clamped scales. Scales and shifts are the raw subnet outputs multiplied by
//! a learnable scalar `gamma` (zero at init), and scales are bounded by
//! `(2 alpha / pi) * atan(s / alpha)`.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{bind_all, BoundConv, Conv2d};
use crate::masking::{masked_mean, masked_mean_value};
use crate::tensor::{nchw, Padding, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    /// Input (and latent) channel count `C`; must be even.
    pub channels: usize,
    /// Positional-encoding channel count.
    pub cond_channels: usize,
    pub n_blocks: usize,
    /// Hidden width of every subnet.
    pub hidden: usize,
    /// Scale clamping parameter.
    pub alpha: f64,
    pub kernel: usize,
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 2 || self.channels % 2 != 0 {
            return Err(Error::Config(format!(
                "teacher channels must be even and >= 2, got {}",
                self.channels
            )));
        }
        if self.n_blocks == 0 || self.hidden == 0 || self.cond_channels == 0 {
            return Err(Error::Config("teacher sizes must be positive".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config("subnet kernel must be odd".into()));
        }
        Ok(())
    }
}

/// `conv(k) -> ReLU -> conv(k)`, mapping `C/2 + C_pe` to `C` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Subnet<R: Real = f32> {
    pub conv1: Conv2d<R>,
    pub conv2: Conv2d<R>,
}

impl<R: Real> Subnet<R> {
    fn new(c_in: usize, hidden: usize, c_out: usize, k: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv1: Conv2d::new(c_in, hidden, k, Padding::Same, rng),
            conv2: Conv2d::new(hidden, c_out, k, Padding::Same, rng),
        }
    }

    fn params(&self) -> Vec<&Tensor<R>> {
        let mut p = self.conv1.params();
        p.extend(self.conv2.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<R>> {
        let mut p = self.conv1.params_mut();
        p.extend(self.conv2.params_mut());
        p
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingBlock<R: Real = f32> {
    /// Output channel `k` of the permutation is input channel `perm[k]`.
    pub perm: Vec<usize>,
    pub subnet1: Subnet<R>,
    pub subnet2: Subnet<R>,
    pub alpha: f64,
    pub gamma1: Tensor<R>,
    pub gamma2: Tensor<R>,
}

const BLOCK_PARAMS: usize = 10;

impl<R: Real> CouplingBlock<R> {
    pub fn new(config: &TeacherConfig, rng: &mut impl Rng) -> Self {
        let c = config.channels;
        let mut perm: Vec<usize> = (0..c).collect();
        perm.shuffle(rng);
        let c_in = c / 2 + config.cond_channels;
        Self {
            subnet1: Subnet::new(c_in, config.hidden, c, config.kernel, rng),
            subnet2: Subnet::new(c_in, config.hidden, c, config.kernel, rng),
            perm,
            alpha: config.alpha,
            gamma1: Tensor::zeros([1]),
            gamma2: Tensor::zeros([1]),
        }
    }

    pub fn channels(&self) -> usize {
        self.perm.len()
    }

    pub fn inverse_perm(&self) -> Vec<usize> {
        let mut inv = vec![0; self.perm.len()];
        for (k, &p) in self.perm.iter().enumerate() {
            inv[p] = k;
        }
        inv
    }

    pub fn params(&self) -> Vec<&Tensor<R>> {
        let mut p = self.subnet1.params();
        p.push(&self.gamma1);
        p.extend(self.subnet2.params());
        p.push(&self.gamma2);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<R>> {
        let mut p = self.subnet1.params_mut();
        p.push(&mut self.gamma1);
        p.extend(self.subnet2.params_mut());
        p.push(&mut self.gamma2);
        p
    }

    pub fn bind<'t, 'm>(&'m self, vars: &[Var<'t, R>]) -> BoundBlock<'t, 'm, R> {
        BoundBlock {
            block: self,
            subnet1: (self.subnet1.conv1.bind(&vars[0..2]), self.subnet1.conv2.bind(&vars[2..4])),
            gamma1: vars[4],
            subnet2: (self.subnet2.conv1.bind(&vars[5..7]), self.subnet2.conv2.bind(&vars[7..9])),
            gamma2: vars[9],
        }
    }
}

/// A coupling block whose parameters live on a tape.
pub struct BoundBlock<'t, 'm, R: Real> {
    block: &'m CouplingBlock<R>,
    subnet1: (BoundConv<'t, R>, BoundConv<'t, R>),
    gamma1: Var<'t, R>,
    subnet2: (BoundConv<'t, R>, BoundConv<'t, R>),
    gamma2: Var<'t, R>,
}

/// `(2 alpha / pi) * atan(s / alpha)` on the tape.
pub fn clamp_scale_var<'t, R: Real>(s_raw: Var<'t, R>, alpha: f64) -> Var<'t, R> {
    s_raw.scale(1.0 / alpha).atan().scale(2.0 * alpha / PI)
}

/// Bounds raw log-scales to `(-alpha, alpha)`.
pub fn clamp_scale<R: Real>(s_raw: &Tensor<R>, alpha: f64) -> Result<Tensor<R>> {
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("alpha must be > 0, got {alpha}")));
    }
    Ok(s_raw.map(|s| R::of(2.0 * alpha / PI * (s.f64() / alpha).atan())))
}

impl<'t, R: Real> BoundBlock<'t, '_, R> {
    /// Clamped log-scale and shift computed from `half` and the condition.
    fn scale_shift(
        &self,
        subnet: &(BoundConv<'t, R>, BoundConv<'t, R>),
        gamma: Var<'t, R>,
        half: Var<'t, R>,
        cond: Var<'t, R>,
    ) -> Result<(Var<'t, R>, Var<'t, R>)> {
        let input = Var::concat_channels(&[half, cond])?;
        let hidden = subnet.0.forward(input)?.relu();
        let raw = subnet.1.forward(hidden)?;
        let (s_raw, t_raw) = raw.split_half()?;
        let s = clamp_scale_var(gamma.mul(s_raw)?, self.block.alpha);
        let t = gamma.mul(t_raw)?;
        Ok((s, t))
    }

    /// Returns `(y, logdet_map)`.
    pub fn forward(&self, x: Var<'t, R>, cond: Var<'t, R>) -> Result<(Var<'t, R>, Var<'t, R>)> {
        let xp = x.permute_channels(&self.block.perm)?;
        let (x1, x2) = xp.split_half()?;
        let (s1, t1) = self.scale_shift(&self.subnet1, self.gamma1, x1, cond)?;
        let y2 = x2.mul(s1.exp()?)?.add(t1)?;
        let (s2, t2) = self.scale_shift(&self.subnet2, self.gamma2, y2, cond)?;
        let y1 = x1.mul(s2.exp()?)?.add(t2)?;
        let y = Var::concat_channels(&[y1, y2])?;
        let logdet = s1.sum_channels()?.add(s2.sum_channels()?)?;
        Ok((y, logdet))
    }

    pub fn inverse(&self, y: Var<'t, R>, cond: Var<'t, R>) -> Result<Var<'t, R>> {
        let (y1, y2) = y.split_half()?;
        let (s2, t2) = self.scale_shift(&self.subnet2, self.gamma2, y2, cond)?;
        let x1 = y1.sub(t2)?.mul(s2.scale(-1.0).exp()?)?;
        let (s1, t1) = self.scale_shift(&self.subnet1, self.gamma1, x1, cond)?;
        let x2 = y2.sub(t1)?.mul(s1.scale(-1.0).exp()?)?;
        Var::concat_channels(&[x1, x2])?.permute_channels(&self.block.inverse_perm())
    }
}

/// Teacher: an ordered stack of coupling blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherModel<R: Real = f32> {
    pub config: TeacherConfig,
    pub blocks: Vec<CouplingBlock<R>>,
}

/// Latent output and per-pixel log-determinant of a teacher pass.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowOutput<R: Real = f32> {
    pub z: Tensor<R>,
    pub logdet_map: Tensor<R>,
}

impl<R: Real> TeacherModel<R> {
    pub fn new(config: TeacherConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let blocks = (0..config.n_blocks)
            .map(|_| CouplingBlock::new(&config, rng))
            .collect();
        Ok(Self { config, blocks })
    }

    pub fn params(&self) -> Vec<&Tensor<R>> {
        self.blocks.iter().flat_map(|b| b.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<R>> {
        self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Names matching `params()` order.
    pub fn param_names(&self) -> Vec<String> {
        const LOCAL: [&str; BLOCK_PARAMS] = [
            "subnet1.conv1.weight",
            "subnet1.conv1.bias",
            "subnet1.conv2.weight",
            "subnet1.conv2.bias",
            "gamma1",
            "subnet2.conv1.weight",
            "subnet2.conv1.bias",
            "subnet2.conv2.weight",
            "subnet2.conv2.bias",
            "gamma2",
        ];
        (0..self.blocks.len())
            .flat_map(|b| LOCAL.iter().map(move |n| format!("block{b}.{n}")))
            .collect()
    }

    pub fn bind<'t>(&self, tape: &'t Tape<R>, trainable: bool) -> BoundTeacher<'t, '_, R> {
        let vars = bind_all(tape, &self.params(), trainable);
        self.bind_vars(&vars)
    }

    /// Binds to existing leaves, in `params()` order.
    pub fn bind_vars<'t>(&self, vars: &[Var<'t, R>]) -> BoundTeacher<'t, '_, R> {
        assert_eq!(vars.len(), self.blocks.len() * BLOCK_PARAMS);
        BoundTeacher {
            blocks: self
                .blocks
                .iter()
                .zip(vars.chunks(BLOCK_PARAMS))
                .map(|(b, v)| b.bind(v))
                .collect(),
        }
    }

    /// Full forward pass on `[C,H,W]` or `[N,C,H,W]` input. The condition may
    /// be given per sample or once as `[C_pe,H,W]`.
    pub fn forward(&self, x: &Tensor<R>, cond: &Tensor<R>) -> Result<FlowOutput<R>> {
        let tape = Tape::new();
        let (xv, cv) = self.leaves(&tape, x, cond)?;
        let (z, logdet) = self.bind(&tape, false).forward(xv, cv)?;
        Ok(FlowOutput {
            z: (*z.value()).clone(),
            logdet_map: (*logdet.value()).clone(),
        })
    }

    pub fn inverse(&self, z: &Tensor<R>, cond: &Tensor<R>) -> Result<Tensor<R>> {
        let tape = Tape::new();
        let (zv, cv) = self.leaves(&tape, z, cond)?;
        let x = self.bind(&tape, false).inverse(zv, cv)?;
        Ok((*x.value()).clone())
    }

    fn leaves<'t>(
        &self,
        tape: &'t Tape<R>,
        x: &Tensor<R>,
        cond: &Tensor<R>,
    ) -> Result<(Var<'t, R>, Var<'t, R>)> {
        let cond = match_condition(x, cond)?;
        let (_, c, _, _) = nchw(x.shape())?;
        if c != self.config.channels {
            return Err(Error::dim(format!(
                "teacher expects {} channels, got {c}",
                self.config.channels
            )));
        }
        Ok((tape.constant(x.clone()), tape.constant(cond)))
    }
}

/// Repeats a `[C_pe,H,W]` condition to the batch size of `x` when needed and
/// checks spatial agreement.
pub fn match_condition<R: Real>(x: &Tensor<R>, cond: &Tensor<R>) -> Result<Tensor<R>> {
    let (n, _, h, w) = nchw(x.shape())?;
    let (_, _, hc, wc) = nchw(cond.shape())?;
    if (h, w) != (hc, wc) {
        return Err(Error::dim(format!(
            "condition {:?} does not match input {:?}",
            cond.shape(),
            x.shape()
        )));
    }
    match (x.rank(), cond.rank()) {
        (3, 3) => Ok(cond.clone()),
        (4, 3) => Ok(cond.repeat_outer(n)),
        (4, 4) if cond.shape()[0] == n => Ok(cond.clone()),
        _ => Err(Error::dim(format!(
            "condition {:?} does not match input {:?}",
            cond.shape(),
            x.shape()
        ))),
    }
}

pub struct BoundTeacher<'t, 'm, R: Real> {
    blocks: Vec<BoundBlock<'t, 'm, R>>,
}

impl<'t, R: Real> BoundTeacher<'t, '_, R> {
    /// Returns `(z, logdet_map)`.
    pub fn forward(&self, x: Var<'t, R>, cond: Var<'t, R>) -> Result<(Var<'t, R>, Var<'t, R>)> {
        let mut h = x;
        let mut logdet: Option<Var<'t, R>> = None;
        for (i, block) in self.blocks.iter().enumerate() {
            let (y, ld) = block.forward(h, cond).map_err(|e| tag_block(e, i))?;
            if !y.value().is_finite() || !ld.value().is_finite() {
                return Err(Error::NonFinite(format!("coupling block {i}")));
            }
            h = y;
            logdet = Some(match logdet {
                None => ld,
                Some(acc) => acc.add(ld)?,
            });
        }
        Ok((h, logdet.expect("teacher has at least one block")))
    }

    pub fn inverse(&self, z: Var<'t, R>, cond: Var<'t, R>) -> Result<Var<'t, R>> {
        let mut h = z;
        for (i, block) in self.blocks.iter().enumerate().rev() {
            h = block.inverse(h, cond).map_err(|e| tag_block(e, i))?;
        }
        Ok(h)
    }
}

fn tag_block(e: Error, i: usize) -> Error {
    match e {
        Error::NonFinite(op) => Error::NonFinite(format!("coupling block {i}: {op}")),
        other => other,
    }
}

/// One coupling block applied to `[C,H,W]` input with `[C_pe,H,W]` condition.
pub fn coupling_forward<R: Real>(
    block: &CouplingBlock<R>,
    x: &Tensor<R>,
    cond: &Tensor<R>,
) -> Result<(Tensor<R>, Tensor<R>)> {
    let tape = Tape::new();
    let cond = match_condition(x, cond)?;
    let vars = bind_all(&tape, &block.params(), false);
    let (y, ld) = block
        .bind(&vars)
        .forward(tape.constant(x.clone()), tape.constant(cond))?;
    Ok(((*y.value()).clone(), (*ld.value()).clone()))
}

pub fn coupling_inverse<R: Real>(
    block: &CouplingBlock<R>,
    y: &Tensor<R>,
    cond: &Tensor<R>,
) -> Result<Tensor<R>> {
    let tape = Tape::new();
    let cond = match_condition(y, cond)?;
    let vars = bind_all(&tape, &block.params(), false);
    let x = block
        .bind(&vars)
        .inverse(tape.constant(y.clone()), tape.constant(cond))?;
    Ok((*x.value()).clone())
}

pub fn teacher_forward<R: Real>(
    model: &TeacherModel<R>,
    x: &Tensor<R>,
    cond: &Tensor<R>,
) -> Result<FlowOutput<R>> {
    model.forward(x, cond)
}

/// Per-pixel negative log-likelihood `|z|^2 / 2 - logdet` on the tape,
/// without the Gaussian normalization constant.
pub fn nll_map_var<'t, R: Real>(z: Var<'t, R>, logdet: Var<'t, R>) -> Result<Var<'t, R>> {
    z.square().sum_channels()?.scale(0.5).sub(logdet)
}

pub fn nll_map<R: Real>(out: &FlowOutput<R>) -> Result<Tensor<R>> {
    let tape = Tape::new();
    let z = tape.constant(out.z.clone());
    let ld = tape.constant(out.logdet_map.clone());
    Ok((*nll_map_var(z, ld)?.value()).clone())
}

/// Mean NLL over foreground pixels of a `[N,C,H,W]` batch.
pub fn teacher_loss<R: Real>(
    model: &TeacherModel<R>,
    batch: &Tensor<R>,
    cond: &Tensor<R>,
    masks: Option<&Tensor<R>>,
) -> Result<f64> {
    let out = model.forward(batch, cond)?;
    masked_mean_value(&nll_map(&out)?, masks)
}

/// Differentiable [`teacher_loss`] for training.
pub fn teacher_loss_var<'t, R: Real>(
    teacher: &BoundTeacher<'t, '_, R>,
    batch: Var<'t, R>,
    cond: Var<'t, R>,
    masks: Option<&Tensor<R>>,
) -> Result<Var<'t, R>> {
    let (z, ld) = teacher.forward(batch, cond)?;
    masked_mean(nll_map_var(z, ld)?, masks)
}

/// Teacher-only anomaly map: the per-pixel NLL.
pub fn teacher_score_map<R: Real>(
    model: &TeacherModel<R>,
    x: &Tensor<R>,
    cond: &Tensor<R>,
) -> Result<Tensor<R>> {
    nll_map(&model.forward(x, cond)?)
}
