//! Parameterized layers shared by the teacher, the student and the toy MLPs.
//!
//! A layer owns its parameter tensors. For a forward pass it is *bound* to a
//! tape: every parameter becomes a leaf [`Var`] (trainable or constant) and
//! the bound copy runs the computation. Parameter order is fixed by
//! `params()`, which is also the order optimizers and checkpoints use.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, BnMode, Padding, Real, Tape, Tensor, Var};

/// Uniform `±1/sqrt(fan_in)` initialization.
fn fan_in_uniform<R: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<R> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(shape.to_vec(), -bound, bound, rng)
}

/// Registers tensors as tape leaves.
pub fn bind_all<'t, R: Real>(
    tape: &'t Tape<R>,
    params: &[&Tensor<R>],
    trainable: bool,
) -> Vec<Var<'t, R>> {
    params
        .iter()
        .map(|p| tape.leaf((*p).clone(), trainable))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<R: Real = f32> {
    pub weight: Tensor<R>,
    pub bias: Tensor<R>,
    pub padding: Padding,
}

impl<R: Real> Conv2d<R> {
    pub fn new(c_in: usize, c_out: usize, k: usize, padding: Padding, rng: &mut impl Rng) -> Self {
        let fan_in = c_in * k * k;
        Self {
            weight: fan_in_uniform(&[c_out, c_in, k, k], fan_in, rng),
            bias: fan_in_uniform(&[c_out], fan_in, rng),
            padding,
        }
    }

    pub fn zeroed(c_in: usize, c_out: usize, k: usize, padding: Padding) -> Self {
        Self {
            weight: Tensor::zeros([c_out, c_in, k, k]),
            bias: Tensor::zeros([c_out]),
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn params(&self) -> Vec<&Tensor<R>> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<R>> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn bind<'t>(&self, vars: &[Var<'t, R>]) -> BoundConv<'t, R> {
        BoundConv {
            weight: vars[0],
            bias: vars[1],
            padding: self.padding,
        }
    }
}

#[derive(Clone, Copy)]
pub struct BoundConv<'t, R: Real> {
    pub weight: Var<'t, R>,
    pub bias: Var<'t, R>,
    pub padding: Padding,
}

impl<'t, R: Real> BoundConv<'t, R> {
    pub fn forward(&self, x: Var<'t, R>) -> Result<Var<'t, R>> {
        x.conv2d(self.weight, self.bias, self.padding)
    }
}

/// Batch normalization with learnable affine and running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d<R: Real = f32> {
    pub gamma: Tensor<R>,
    pub beta: Tensor<R>,
    pub running_mean: Tensor<R>,
    pub running_var: Tensor<R>,
    pub eps: f64,
    pub momentum: f64,
}

impl<R: Real> BatchNorm2d<R> {
    pub fn new(channels: usize, eps: f64, momentum: f64) -> Self {
        Self {
            gamma: Tensor::full([channels], R::one()),
            beta: Tensor::zeros([channels]),
            running_mean: Tensor::zeros([channels]),
            running_var: Tensor::full([channels], R::one()),
            eps,
            momentum,
        }
    }

    pub fn params(&self) -> Vec<&Tensor<R>> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<R>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn bind<'t, 'm>(&'m self, vars: &[Var<'t, R>]) -> BoundBatchNorm<'t, 'm, R> {
        BoundBatchNorm {
            gamma: vars[0],
            beta: vars[1],
            layer: self,
        }
    }

    /// Folds one batch's statistics into the running averages.
    pub fn update(&mut self, stats: &BatchStats) -> Result<()> {
        let c = self.running_mean.numel();
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::dim("batch statistics do not match channels"));
        }
        let m = self.momentum;
        for ci in 0..c {
            let rm = &mut self.running_mean.data_mut()[ci];
            *rm = R::of((1.0 - m) * rm.f64() + m * stats.mean[ci]);
            let rv = &mut self.running_var.data_mut()[ci];
            *rv = R::of((1.0 - m) * rv.f64() + m * stats.var[ci]);
        }
        Ok(())
    }
}

pub struct BoundBatchNorm<'t, 'm, R: Real> {
    pub gamma: Var<'t, R>,
    pub beta: Var<'t, R>,
    layer: &'m BatchNorm2d<R>,
}

impl<'t, R: Real> BoundBatchNorm<'t, '_, R> {
    pub fn forward(&self, x: Var<'t, R>, train: bool) -> Result<(Var<'t, R>, Option<BatchStats>)> {
        let mode = if train {
            BnMode::Train {
                eps: self.layer.eps,
            }
        } else {
            BnMode::Eval {
                running_mean: &self.layer.running_mean,
                running_var: &self.layer.running_var,
                eps: self.layer.eps,
            }
        };
        x.batch_norm2d(self.gamma, self.beta, mode)
    }
}

/// Fully connected layer, `[N, in] -> [N, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<R: Real = f32> {
    pub weight: Tensor<R>,
    pub bias: Tensor<R>,
}

impl<R: Real> Linear<R> {
    pub fn new(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: fan_in_uniform(&[d_out, d_in], d_in, rng),
            bias: fan_in_uniform(&[d_out], d_in, rng),
        }
    }

    pub fn params(&self) -> Vec<&Tensor<R>> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<R>> {
        vec![&mut self.weight, &mut self.bias]
    }
}
