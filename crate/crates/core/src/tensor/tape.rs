use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::gemm::matmul;
use super::{nchw, with_channels, Real, Tensor};
use crate::error::{Error, Result};

/// Spatial padding of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `k / 2`; output has the input's height and width.
    Same,
    /// No padding; output shrinks by `k - 1`.
    Valid,
}

/// Normalization source for [`Var::batch_norm2d`].
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, R> {
    /// Normalize with the batch's own per-channel statistics.
    Train { eps: f64 },
    /// Normalize with stored running statistics.
    Eval {
        running_mean: &'a Tensor<R>,
        running_var: &'a Tensor<R>,
        eps: f64,
    },
}

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (`m - 1` denominator) variance, as used for running averages.
    pub var: Vec<f64>,
}

type CustomBackward<R> = Box<dyn Fn(&Tensor<R>, &Tensor<R>) -> Tensor<R>>;

enum Op<R> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Exp(usize),
    Atan(usize),
    Square(usize),
    Tanh(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Scale(usize, f64),
    Offset(usize),
    Sum(usize),
    SumChannels(usize),
    Reshape(usize),
    Narrow {
        src: usize,
        start: usize,
    },
    Concat(Vec<usize>),
    Permute {
        src: usize,
        perm: Vec<usize>,
    },
    Unshuffle {
        src: usize,
        d: usize,
    },
    Shuffle {
        src: usize,
        d: usize,
    },
    Conv {
        input: usize,
        weight: usize,
        bias: usize,
        pad: usize,
        cols: Option<Vec<R>>,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<R>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Linear {
        input: usize,
        weight: usize,
        bias: usize,
    },
    Custom {
        input: usize,
        backward: CustomBackward<R>,
    },
}

struct Node<R> {
    value: Rc<Tensor<R>>,
    op: Op<R>,
    requires_grad: bool,
}

/// Record of one forward computation.
///
/// Nodes are appended as ops execute, so the node list is always in
/// topological order.
pub struct Tape<R: Real = f32> {
    nodes: RefCell<Vec<Node<R>>>,
    consumed: Cell<bool>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, R: Real = f32> {
    tape: &'t Tape<R>,
    id: usize,
}

/// Gradients of a scalar loss with respect to every `requires_grad` leaf.
pub struct Gradients<R> {
    grads: Vec<Option<Tensor<R>>>,
}

impl<R: Real> Gradients<R> {
    pub fn get(&self, var: Var<'_, R>) -> Option<&Tensor<R>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of its shape when no path reached it.
    pub fn get_or_zeros(&self, var: Var<'_, R>) -> Tensor<R> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    /// Registers a leaf. Gradients are only produced for leaves with
    /// `requires_grad`.
    pub fn leaf(&self, value: Tensor<R>, requires_grad: bool) -> Var<'_, R> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&self, value: Tensor<R>) -> Var<'_, R> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<R>) -> Var<'_, R> {
        self.leaf(value, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clears all recorded nodes so the tape can record a new forward pass.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
        self.consumed.set(false);
    }

    /// Elementwise op with a user supplied backward rule
    /// `(input_value, grad_output) -> grad_input`.
    pub fn custom<'t>(
        &'t self,
        input: Var<'t, R>,
        value: Tensor<R>,
        backward: impl Fn(&Tensor<R>, &Tensor<R>) -> Tensor<R> + 'static,
    ) -> Var<'t, R> {
        let rg = self.rg(input.id);
        self.push(
            value,
            Op::Custom {
                input: input.id,
                backward: Box::new(backward),
            },
            rg,
        )
    }

    fn push(&self, value: Tensor<R>, op: Op<R>, requires_grad: bool) -> Var<'_, R> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn value(&self, id: usize) -> Rc<Tensor<R>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse-mode sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_, R>) -> Result<Gradients<R>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss belongs to another tape".into()));
        }
        if self.consumed.replace(true) {
            return Err(Error::Contract(
                "backward already ran on this tape; reset it first".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<R>>> = vec![None; nodes.len()];
        let mut leaves: Vec<Option<Tensor<R>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![R::one()]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(g) = grads[id].take() else { continue };
            if !node.requires_grad {
                continue;
            }
            let mut acc = |target: usize, contrib: Vec<R>| {
                accumulate(&nodes, &mut grads, target, contrib);
            };
            let val = |i: usize| -> &Tensor<R> { &nodes[i].value };
            match &node.op {
                Op::Leaf => {
                    leaves[id] = Some(Tensor::new(node.value.shape(), g)?);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.iter().map(|&v| -v).collect());
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a).data(), val(*b).data());
                    if nodes[*a].requires_grad {
                        acc(*a, zip_bcast(&g, bv, |g, y| g * y));
                    }
                    if nodes[*b].requires_grad {
                        acc(*b, zip_bcast(&g, av, |g, x| g * x));
                    }
                }
                Op::Exp(a) => {
                    let y = node.value.data();
                    acc(*a, g.iter().zip(y).map(|(&g, &y)| g * y).collect());
                }
                Op::Atan(a) => {
                    let x = val(*a).data();
                    acc(
                        *a,
                        g.iter()
                            .zip(x)
                            .map(|(&g, &x)| g / (R::one() + x * x))
                            .collect(),
                    );
                }
                Op::Square(a) => {
                    let x = val(*a).data();
                    let two = R::of(2.0);
                    acc(*a, g.iter().zip(x).map(|(&g, &x)| two * x * g).collect());
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    acc(
                        *a,
                        g.iter()
                            .zip(y)
                            .map(|(&g, &y)| g * (R::one() - y * y))
                            .collect(),
                    );
                }
                Op::Relu(a) => {
                    let x = val(*a).data();
                    acc(
                        *a,
                        g.iter()
                            .zip(x)
                            .map(|(&g, &x)| if x > R::zero() { g } else { R::zero() })
                            .collect(),
                    );
                }
                Op::LeakyRelu(a, slope) => {
                    let x = val(*a).data();
                    let s = R::of(*slope);
                    acc(
                        *a,
                        g.iter()
                            .zip(x)
                            .map(|(&g, &x)| if x > R::zero() { g } else { g * s })
                            .collect(),
                    );
                }
                Op::Scale(a, c) => {
                    let c = R::of(*c);
                    acc(*a, g.iter().map(|&g| g * c).collect());
                }
                Op::Offset(a) | Op::Reshape(a) => acc(*a, g),
                Op::Sum(a) => {
                    acc(*a, vec![g[0]; val(*a).numel()]);
                }
                Op::SumChannels(a) => {
                    let (n, c, h, w) = nchw(val(*a).shape())?;
                    let hw = h * w;
                    let mut out = vec![R::zero(); n * c * hw];
                    for b in 0..n {
                        for ci in 0..c {
                            out[(b * c + ci) * hw..(b * c + ci + 1) * hw]
                                .copy_from_slice(&g[b * hw..(b + 1) * hw]);
                        }
                    }
                    acc(*a, out);
                }
                Op::Narrow { src, start } => {
                    let (n, c, h, w) = nchw(val(*src).shape())?;
                    let (_, len, _, _) = nchw(node.value.shape())?;
                    let hw = h * w;
                    let mut out = vec![R::zero(); n * c * hw];
                    for b in 0..n {
                        let dst = (b * c + start) * hw;
                        out[dst..dst + len * hw]
                            .copy_from_slice(&g[b * len * hw..(b + 1) * len * hw]);
                    }
                    acc(*src, out);
                }
                Op::Concat(parts) => {
                    let (n, ct, h, w) = nchw(node.value.shape())?;
                    let hw = h * w;
                    let mut offset = 0;
                    for &p in parts {
                        let (_, cp, _, _) = nchw(val(p).shape())?;
                        if nodes[p].requires_grad {
                            let mut out = vec![R::zero(); n * cp * hw];
                            for b in 0..n {
                                let src = (b * ct + offset) * hw;
                                out[b * cp * hw..(b + 1) * cp * hw]
                                    .copy_from_slice(&g[src..src + cp * hw]);
                            }
                            acc(p, out);
                        }
                        offset += cp;
                    }
                }
                Op::Permute { src, perm } => {
                    let (n, c, h, w) = nchw(node.value.shape())?;
                    let hw = h * w;
                    let mut out = vec![R::zero(); n * c * hw];
                    for b in 0..n {
                        for (k, &p) in perm.iter().enumerate() {
                            let s = (b * c + k) * hw;
                            let d = (b * c + p) * hw;
                            out[d..d + hw].copy_from_slice(&g[s..s + hw]);
                        }
                    }
                    acc(*src, out);
                }
                Op::Unshuffle { src, d } => {
                    let gt = Tensor::new(node.value.shape(), g)?;
                    acc(*src, super::pixel_shuffle(&gt, *d)?.into_data());
                }
                Op::Shuffle { src, d } => {
                    let gt = Tensor::new(node.value.shape(), g)?;
                    acc(*src, super::pixel_unshuffle(&gt, *d)?.into_data());
                }
                Op::Conv {
                    input,
                    weight,
                    bias,
                    pad,
                    cols,
                } => {
                    let x = val(*input);
                    let wt = val(*weight);
                    let (n, cin, h, w) = nchw(x.shape())?;
                    let (cout, k) = (wt.shape()[0], wt.shape()[2]);
                    let (_, _, ho, wo) = nchw(node.value.shape())?;
                    let kk = cin * k * k;
                    let plane = ho * wo;
                    if nodes[*bias].requires_grad {
                        let mut gb = vec![R::zero(); cout];
                        for b in 0..n {
                            for (co, gbc) in gb.iter_mut().enumerate() {
                                let row = &g[(b * cout + co) * plane..][..plane];
                                *gbc = *gbc + sum_r(row);
                            }
                        }
                        acc(*bias, gb);
                    }
                    if nodes[*weight].requires_grad {
                        let mut gw = vec![R::zero(); cout * kk];
                        let mut scratch = Vec::new();
                        for b in 0..n {
                            let col = match cols {
                                Some(c) => &c[b * kk * plane..(b + 1) * kk * plane],
                                None => {
                                    scratch.resize(kk * plane, R::zero());
                                    im2col(
                                        &x.data()[b * cin * h * w..],
                                        (cin, h, w),
                                        k,
                                        *pad,
                                        (ho, wo),
                                        &mut scratch,
                                    );
                                    &scratch[..]
                                }
                            };
                            let gout = &g[b * cout * plane..(b + 1) * cout * plane];
                            matmul(cout, plane, kk, gout, false, col, true, &mut gw, true);
                        }
                        acc(*weight, gw);
                    }
                    if nodes[*input].requires_grad {
                        let mut gx = vec![R::zero(); n * cin * h * w];
                        let mut dcol = vec![R::zero(); kk * plane];
                        for b in 0..n {
                            let gout = &g[b * cout * plane..(b + 1) * cout * plane];
                            matmul(kk, cout, plane, wt.data(), true, gout, false, &mut dcol, false);
                            col2im(
                                &dcol,
                                (cin, h, w),
                                k,
                                *pad,
                                (ho, wo),
                                &mut gx[b * cin * h * w..(b + 1) * cin * h * w],
                            );
                        }
                        acc(*input, gx);
                    }
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    train,
                } => {
                    let (n, c, h, w) = nchw(val(*input).shape())?;
                    let hw = h * w;
                    let m = (n * hw) as f64;
                    let gam = val(*gamma).data();
                    let mut ggamma = vec![R::zero(); c];
                    let mut gbeta = vec![R::zero(); c];
                    let mut gx = vec![R::zero(); g.len()];
                    for ci in 0..c {
                        let (mut sg, mut sgx) = (0.0f64, 0.0f64);
                        for b in 0..n {
                            let o = (b * c + ci) * hw;
                            for i in o..o + hw {
                                sg += g[i].f64();
                                sgx += (g[i] * xhat[i]).f64();
                            }
                        }
                        ggamma[ci] = R::of(sgx);
                        gbeta[ci] = R::of(sg);
                        let gm = gam[ci].f64();
                        let is = inv_std[ci];
                        for b in 0..n {
                            let o = (b * c + ci) * hw;
                            for i in o..o + hw {
                                let v = if *train {
                                    // dxhat sums are gamma * (sg, sgx)
                                    gm * is / m * (m * g[i].f64() - sg - xhat[i].f64() * sgx)
                                } else {
                                    gm * is * g[i].f64()
                                };
                                gx[i] = R::of(v);
                            }
                        }
                    }
                    if nodes[*gamma].requires_grad {
                        acc(*gamma, ggamma);
                    }
                    if nodes[*beta].requires_grad {
                        acc(*beta, gbeta);
                    }
                    if nodes[*input].requires_grad {
                        acc(*input, gx);
                    }
                }
                Op::Linear {
                    input,
                    weight,
                    bias,
                } => {
                    let x = val(*input);
                    let wt = val(*weight);
                    let (n, din) = (x.shape()[0], x.shape()[1]);
                    let dout = wt.shape()[0];
                    if nodes[*input].requires_grad {
                        let mut gx = vec![R::zero(); n * din];
                        matmul(n, dout, din, &g, false, wt.data(), false, &mut gx, false);
                        acc(*input, gx);
                    }
                    if nodes[*weight].requires_grad {
                        let mut gw = vec![R::zero(); dout * din];
                        matmul(dout, n, din, &g, true, x.data(), false, &mut gw, false);
                        acc(*weight, gw);
                    }
                    if nodes[*bias].requires_grad {
                        let mut gb = vec![R::zero(); dout];
                        for row in g.chunks(dout) {
                            for (b, &v) in gb.iter_mut().zip(row) {
                                *b = *b + v;
                            }
                        }
                        acc(*bias, gb);
                    }
                }
                Op::Custom { input, backward } => {
                    let gt = Tensor::new(node.value.shape(), g)?;
                    let gi = backward(val(*input), &gt);
                    acc(*input, gi.into_data());
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }
}

fn accumulate<R: Real>(
    nodes: &[Node<R>],
    grads: &mut [Option<Vec<R>>],
    target: usize,
    contrib: Vec<R>,
) {
    if !nodes[target].requires_grad {
        return;
    }
    let numel = nodes[target].value.numel();
    let contrib = if numel == 1 && contrib.len() != 1 {
        vec![sum_r(&contrib)]
    } else {
        contrib
    };
    match &mut grads[target] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e = *e + c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn sum_r<R: Real>(xs: &[R]) -> R {
    R::of(xs.iter().map(|v| v.f64()).sum())
}

/// `f(g[i], y[i or 0])` over the length of `g`.
fn zip_bcast<R: Real>(g: &[R], y: &[R], f: impl Fn(R, R) -> R) -> Vec<R> {
    if y.len() == 1 {
        g.iter().map(|&gv| f(gv, y[0])).collect()
    } else {
        g.iter().zip(y).map(|(&gv, &yv)| f(gv, yv)).collect()
    }
}

fn im2col<R: Real>(
    x: &[R],
    (c, h, w): (usize, usize, usize),
    k: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    col: &mut [R],
) {
    let plane = ho * wo;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oi in 0..ho {
                    let drow = &mut dst[oi * wo..(oi + 1) * wo];
                    let ii = (oi + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        drow.fill(R::zero());
                        continue;
                    }
                    let src = &x[(ci * h + ii as usize) * w..][..w];
                    for (oj, d) in drow.iter_mut().enumerate() {
                        let jj = (oj + kj) as isize - pad as isize;
                        *d = if jj >= 0 && jj < w as isize {
                            src[jj as usize]
                        } else {
                            R::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<R: Real>(
    col: &[R],
    (c, h, w): (usize, usize, usize),
    k: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    x: &mut [R],
) {
    let plane = ho * wo;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for oi in 0..ho {
                    let ii = (oi + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let dst = &mut x[(ci * h + ii as usize) * w..][..w];
                    for oj in 0..wo {
                        let jj = (oj + kj) as isize - pad as isize;
                        if jj >= 0 && jj < w as isize {
                            dst[jj as usize] = dst[jj as usize] + src[oi * wo + oj];
                        }
                    }
                }
            }
        }
    }
}

fn check_finite<R: Real>(t: &Tensor<R>, op: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(op.to_string()))
    }
}

impl<'t, R: Real> Var<'t, R> {
    pub fn value(&self) -> Rc<Tensor<R>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.rg(self.id)
    }

    pub fn tape(&self) -> &'t Tape<R> {
        self.tape
    }

    fn unary(self, op: Op<R>, value: Tensor<R>) -> Var<'t, R> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary(
        self,
        other: Var<'t, R>,
        name: &str,
        make: fn(usize, usize) -> Op<R>,
        f: impl Fn(R, R) -> R,
    ) -> Result<Var<'t, R>> {
        let a = self.value();
        let b = other.value();
        let out = if a.shape() == b.shape() {
            Tensor::new(
                a.shape(),
                a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
            )?
        } else if b.numel() == 1 {
            let y = b.data()[0];
            a.map(|x| f(x, y))
        } else if a.numel() == 1 {
            let x = a.data()[0];
            b.map(|y| f(x, y))
        } else {
            return Err(Error::dim(format!(
                "{name}: cannot broadcast {:?} with {:?}",
                a.shape(),
                b.shape()
            )));
        };
        check_finite(&out, name)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(out, make(self.id, other.id), rg))
    }

    pub fn add(self, other: Var<'t, R>) -> Result<Var<'t, R>> {
        self.binary(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t, R>) -> Result<Var<'t, R>> {
        self.binary(other, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t, R>) -> Result<Var<'t, R>> {
        self.binary(other, "mul", Op::Mul, |a, b| a * b)
    }

    pub fn exp(self) -> Result<Var<'t, R>> {
        let v = self.value().map(|x| x.exp());
        check_finite(&v, "exp")?;
        Ok(self.unary(Op::Exp(self.id), v))
    }

    pub fn atan(self) -> Var<'t, R> {
        let v = self.value().map(|x| x.atan());
        self.unary(Op::Atan(self.id), v)
    }

    pub fn square(self) -> Var<'t, R> {
        let v = self.value().map(|x| x * x);
        self.unary(Op::Square(self.id), v)
    }

    pub fn tanh(self) -> Var<'t, R> {
        let v = self.value().map(|x| x.tanh());
        self.unary(Op::Tanh(self.id), v)
    }

    pub fn relu(self) -> Var<'t, R> {
        let v = self.value().map(|x| if x > R::zero() { x } else { R::zero() });
        self.unary(Op::Relu(self.id), v)
    }

    /// `x` for `x >= 0`, `slope * x` otherwise. The derivative at exactly
    /// zero is taken as `slope`.
    pub fn leaky_relu(self, slope: f64) -> Var<'t, R> {
        let s = R::of(slope);
        let v = self.value().map(|x| if x >= R::zero() { x } else { s * x });
        self.unary(Op::LeakyRelu(self.id, slope), v)
    }

    pub fn scale(self, c: f64) -> Var<'t, R> {
        let c_r = R::of(c);
        let v = self.value().map(|x| x * c_r);
        self.unary(Op::Scale(self.id, c), v)
    }

    pub fn offset(self, c: f64) -> Var<'t, R> {
        let c = R::of(c);
        let v = self.value().map(|x| x + c);
        self.unary(Op::Offset(self.id), v)
    }

    /// Sum of all entries as a `[1]` tensor.
    pub fn sum(self) -> Var<'t, R> {
        let v = Tensor::scalar(R::of(self.value().sum_f64()));
        self.unary(Op::Sum(self.id), v)
    }

    pub fn mean(self) -> Var<'t, R> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// `[N,C,H,W] -> [N,H,W]` (or `[C,H,W] -> [H,W]`) by summing channels.
    pub fn sum_channels(self) -> Result<Var<'t, R>> {
        let x = self.value();
        let (n, c, h, w) = nchw(x.shape())?;
        let hw = h * w;
        let mut out = vec![R::zero(); n * hw];
        for b in 0..n {
            for (p, o) in out[b * hw..(b + 1) * hw].iter_mut().enumerate() {
                let s: f64 = (0..c).map(|ci| x.data()[(b * c + ci) * hw + p].f64()).sum();
                *o = R::of(s);
            }
        }
        let shape = if x.rank() == 3 { vec![h, w] } else { vec![n, h, w] };
        Ok(self.unary(Op::SumChannels(self.id), Tensor::new(shape, out)?))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, R>> {
        let v = (*self.value()).clone().reshape(shape)?;
        Ok(self.unary(Op::Reshape(self.id), v))
    }

    /// Channels `start..start + len`.
    pub fn narrow_channels(self, start: usize, len: usize) -> Result<Var<'t, R>> {
        let x = self.value();
        let (n, c, h, w) = nchw(x.shape())?;
        if len == 0 || start + len > c {
            return Err(Error::dim(format!(
                "channel range {start}..{} out of {c}",
                start + len
            )));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * len * hw);
        for b in 0..n {
            out.extend_from_slice(&x.data()[(b * c + start) * hw..(b * c + start + len) * hw]);
        }
        let v = Tensor::new(with_channels(x.shape(), len), out)?;
        Ok(self.unary(Op::Narrow { src: self.id, start }, v))
    }

    /// Two halves along the channel axis, in channel order.
    pub fn split_half(self) -> Result<(Var<'t, R>, Var<'t, R>)> {
        let (_, c, _, _) = nchw(&self.shape())?;
        if c % 2 != 0 {
            return Err(Error::dim(format!("split_half of odd channel count {c}")));
        }
        Ok((
            self.narrow_channels(0, c / 2)?,
            self.narrow_channels(c / 2, c / 2)?,
        ))
    }

    pub fn concat_channels(parts: &[Var<'t, R>]) -> Result<Var<'t, R>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let tape = first.tape;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let (n, _, h, w) = nchw(values[0].shape())?;
        let rank = values[0].rank();
        let mut total = 0;
        for v in &values {
            let (nv, cv, hv, wv) = nchw(v.shape())?;
            if v.rank() != rank || (nv, hv, wv) != (n, h, w) {
                return Err(Error::dim(format!(
                    "concat of {:?} with {:?}",
                    values[0].shape(),
                    v.shape()
                )));
            }
            total += cv;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for b in 0..n {
            for v in &values {
                let (_, cv, _, _) = nchw(v.shape())?;
                out.extend_from_slice(&v.data()[b * cv * hw..(b + 1) * cv * hw]);
            }
        }
        let value = Tensor::new(with_channels(values[0].shape(), total), out)?;
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(tape.push(value, Op::Concat(parts.iter().map(|p| p.id).collect()), rg))
    }

    /// Output channel `k` is input channel `perm[k]`.
    pub fn permute_channels(self, perm: &[usize]) -> Result<Var<'t, R>> {
        let x = self.value();
        let (n, c, h, w) = nchw(x.shape())?;
        if !is_permutation(perm, c) {
            return Err(Error::dim(format!(
                "{perm:?} is not a permutation of {c} channels"
            )));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(x.numel());
        for b in 0..n {
            for &p in perm {
                out.extend_from_slice(&x.data()[(b * c + p) * hw..(b * c + p + 1) * hw]);
            }
        }
        let v = Tensor::new(x.shape(), out)?;
        Ok(self.unary(
            Op::Permute {
                src: self.id,
                perm: perm.to_vec(),
            },
            v,
        ))
    }

    pub fn pixel_unshuffle(self, d: usize) -> Result<Var<'t, R>> {
        let v = super::pixel_unshuffle(&self.value(), d)?;
        Ok(self.unary(Op::Unshuffle { src: self.id, d }, v))
    }

    pub fn pixel_shuffle(self, d: usize) -> Result<Var<'t, R>> {
        let v = super::pixel_shuffle(&self.value(), d)?;
        Ok(self.unary(Op::Shuffle { src: self.id, d }, v))
    }

    /// Cross-correlation of `[C_in,H,W]` or `[N,C_in,H,W]` input with a
    /// `[C_out,C_in,k,k]` kernel and `[C_out]` bias.
    pub fn conv2d(
        self,
        weight: Var<'t, R>,
        bias: Var<'t, R>,
        padding: Padding,
    ) -> Result<Var<'t, R>> {
        let x = self.value();
        let wt = weight.value();
        let bs = bias.value();
        let (n, cin, h, w) = nchw(x.shape())?;
        let &[cout, wcin, k, k2] = wt.shape() else {
            return Err(Error::dim(format!("conv weight shape {:?}", wt.shape())));
        };
        if wcin != cin || k != k2 {
            return Err(Error::dim(format!(
                "conv weight {:?} does not fit input {:?}",
                wt.shape(),
                x.shape()
            )));
        }
        if bs.shape() != [cout] {
            return Err(Error::dim(format!(
                "conv bias {:?}, expected [{cout}]",
                bs.shape()
            )));
        }
        let pad = match padding {
            Padding::Same => {
                if k % 2 == 0 {
                    return Err(Error::dim(format!("same padding needs odd kernel, got {k}")));
                }
                k / 2
            }
            Padding::Valid => 0,
        };
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::dim(format!("kernel {k} larger than input {h}x{w}")));
        }
        let (ho, wo) = (h + 2 * pad - k + 1, w + 2 * pad - k + 1);
        let plane = ho * wo;
        let kk = cin * k * k;
        let keep_cols = weight.requires_grad();
        let mut cols = vec![R::zero(); if keep_cols { n * kk * plane } else { kk * plane }];
        let mut out = vec![R::zero(); n * cout * plane];
        for b in 0..n {
            let col = if keep_cols {
                &mut cols[b * kk * plane..(b + 1) * kk * plane]
            } else {
                &mut cols[..]
            };
            im2col(&x.data()[b * cin * h * w..], (cin, h, w), k, pad, (ho, wo), col);
            let o = &mut out[b * cout * plane..(b + 1) * cout * plane];
            matmul(cout, kk, plane, wt.data(), false, col, false, o, false);
            for (co, &bv) in bs.data().iter().enumerate() {
                for v in &mut o[co * plane..(co + 1) * plane] {
                    *v = *v + bv;
                }
            }
        }
        let shape = if x.rank() == 3 {
            vec![cout, ho, wo]
        } else {
            vec![n, cout, ho, wo]
        };
        let value = Tensor::new(shape, out)?;
        let rg = self.requires_grad() || weight.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(
            value,
            Op::Conv {
                input: self.id,
                weight: weight.id,
                bias: bias.id,
                pad,
                cols: keep_cols.then_some(cols),
            },
            rg,
        ))
    }

    /// Per-channel batch normalization of `[N,C,H,W]` (or `[C,H,W]`).
    ///
    /// In training mode the returned statistics are those of this batch; the
    /// caller owns the running averages.
    pub fn batch_norm2d(
        self,
        gamma: Var<'t, R>,
        beta: Var<'t, R>,
        mode: BnMode<'_, R>,
    ) -> Result<(Var<'t, R>, Option<BatchStats>)> {
        let x = self.value();
        let (n, c, h, w) = nchw(x.shape())?;
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::dim(format!(
                "batch norm affine shapes {:?}/{:?} for {c} channels",
                gv.shape(),
                bv.shape()
            )));
        }
        let hw = h * w;
        let m = n * hw;
        let mut xhat = vec![R::zero(); x.numel()];
        let mut out = vec![R::zero(); x.numel()];
        let mut inv_std = vec![0.0; c];
        let (train, stats) = match mode {
            BnMode::Train { eps } => {
                if m < 2 {
                    return Err(Error::InvalidBatch(format!(
                        "batch norm in training mode needs N*H*W >= 2, got {m}"
                    )));
                }
                let mut stats = BatchStats {
                    mean: vec![0.0; c],
                    var: vec![0.0; c],
                };
                for ci in 0..c {
                    let chan = || (0..n).flat_map(move |b| (b * c + ci) * hw..(b * c + ci + 1) * hw);
                    let mean = chan().map(|i| x.data()[i].f64()).sum::<f64>() / m as f64;
                    let var = chan()
                        .map(|i| (x.data()[i].f64() - mean).powi(2))
                        .sum::<f64>()
                        / m as f64;
                    inv_std[ci] = 1.0 / (var + eps).sqrt();
                    stats.mean[ci] = mean;
                    stats.var[ci] = var * m as f64 / (m - 1) as f64;
                    for i in chan() {
                        xhat[i] = R::of((x.data()[i].f64() - mean) * inv_std[ci]);
                    }
                }
                (true, Some(stats))
            }
            BnMode::Eval {
                running_mean,
                running_var,
                eps,
            } => {
                if running_mean.shape() != [c] || running_var.shape() != [c] {
                    return Err(Error::dim("running statistics do not match channels"));
                }
                for ci in 0..c {
                    let mean = running_mean.data()[ci].f64();
                    inv_std[ci] = 1.0 / (running_var.data()[ci].f64() + eps).sqrt();
                    for b in 0..n {
                        for i in (b * c + ci) * hw..(b * c + ci + 1) * hw {
                            xhat[i] = R::of((x.data()[i].f64() - mean) * inv_std[ci]);
                        }
                    }
                }
                (false, None)
            }
        };
        for ci in 0..c {
            let (g, be) = (gv.data()[ci], bv.data()[ci]);
            for b in 0..n {
                for i in (b * c + ci) * hw..(b * c + ci + 1) * hw {
                    out[i] = g * xhat[i] + be;
                }
            }
        }
        let value = Tensor::new(x.shape(), out)?;
        check_finite(&value, "batch_norm2d")?;
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let var = self.tape.push(
            value,
            Op::BatchNorm {
                input: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
                train,
            },
            rg,
        );
        Ok((var, stats))
    }

    /// `[N, in] -> [N, out]` affine map with `[out, in]` weight and `[out]` bias.
    pub fn linear(self, weight: Var<'t, R>, bias: Var<'t, R>) -> Result<Var<'t, R>> {
        let x = self.value();
        let wt = weight.value();
        let bs = bias.value();
        let (&[n, din], &[dout, wdin]) = (x.shape(), wt.shape()) else {
            return Err(Error::dim(format!(
                "linear of {:?} with weight {:?}",
                x.shape(),
                wt.shape()
            )));
        };
        if wdin != din || bs.shape() != [dout] {
            return Err(Error::dim(format!(
                "linear of {:?} with weight {:?} and bias {:?}",
                x.shape(),
                wt.shape(),
                bs.shape()
            )));
        }
        let mut out = vec![R::zero(); n * dout];
        matmul(n, din, dout, x.data(), false, wt.data(), true, &mut out, false);
        for row in out.chunks_mut(dout) {
            for (o, &b) in row.iter_mut().zip(bs.data()) {
                *o = *o + b;
            }
        }
        let value = Tensor::new([n, dout], out)?;
        check_finite(&value, "linear")?;
        let rg = self.requires_grad() || weight.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(
            value,
            Op::Linear {
                input: self.id,
                weight: weight.id,
                bias: bias.id,
            },
            rg,
        ))
    }
}

pub(crate) fn is_permutation(perm: &[usize], n: usize) -> bool {
    if perm.len() != n {
        return false;
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_counts_overlap() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full([1, 3, 3], 1.0));
        let w = tape.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let b = tape.constant(Tensor::zeros([1]));
        let y = x.conv2d(w, b, Padding::Same).unwrap().value();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert_eq!(y.at(&[0, 1, 1]), 9.0);
        assert_eq!(y.at(&[0, 0, 0]), 4.0);
        let y = x.conv2d(w, b, Padding::Valid).unwrap().value();
        assert_eq!(y.shape(), &[1, 1, 1]);
    }

    #[test]
    fn conv_zero_weight_gives_bias() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn([2, 2, 4, 5], |i| i as f32));
        let w = tape.constant(Tensor::zeros([3, 2, 3, 3]));
        let b = tape.constant(Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap());
        let y = x.conv2d(w, b, Padding::Same).unwrap().value();
        for n in 0..2 {
            for c in 0..3 {
                for i in 0..4 {
                    for j in 0..5 {
                        assert_eq!(y.at(&[n, c, i, j]), [0.5, -1.0, 2.0][c]);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_shape_errors() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([2, 4, 4]));
        let w = tape.constant(Tensor::zeros([1, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros([1]));
        assert!(matches!(
            x.conv2d(w, b, Padding::Same),
            Err(Error::Dimension(_))
        ));
        let w = tape.constant(Tensor::zeros([1, 2, 2, 2]));
        assert!(x.conv2d(w, b, Padding::Same).is_err());
    }

    #[test]
    fn leaky_relu_values() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = x.leaky_relu(0.2).value();
        assert!((y.data()[0] + 0.2).abs() < 1e-15);
        assert_eq!(&y.data()[1..], &[0.0, 2.0]);
        assert_eq!(*x.leaky_relu(1.0).value(), *x.value());
    }

    #[test]
    fn elementwise_values() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new([2], vec![0.0, 1.0]).unwrap());
        assert_eq!(x.exp().unwrap().value().data()[0], 1.0);
        assert!((x.atan().value().data()[1] - 0.785_398_2).abs() < 1e-6);
    }

    #[test]
    fn exp_overflow_is_reported() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::scalar(200.0));
        match x.exp() {
            Err(Error::NonFinite(op)) => assert_eq!(op, "exp"),
            other => panic!("expected non-finite error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn broadcasting_is_restricted() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([3]));
        assert!(a.add(b).is_err());
        let s = tape.constant(Tensor::scalar(2.0));
        assert_eq!(a.add(s).unwrap().value().data(), &[2.0; 6]);
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_fn([2, 3], |i| i as f64 - 2.5));
        let loss = x.sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn grad_of_half_square_is_identity() {
        let tape = Tape::<f64>::new();
        let v = Tensor::from_fn([5], |i| (i as f64).sin());
        let x = tape.param(v.clone());
        let loss = x.mul(x).unwrap().sum().scale(0.5);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(x).unwrap().max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn backward_contracts() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros([3]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros([3]));
        let s = x.sum();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::full([2], 3.0));
        let c = tape.constant(Tensor::full([2], 4.0));
        let loss = x.mul(c).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[4.0, 4.0]);
    }

    #[test]
    fn batch_norm_constant_input_trains_to_zero() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full([2, 3, 2, 2], 7.0));
        let g = tape.constant(Tensor::full([3], 1.0));
        let b = tape.constant(Tensor::zeros([3]));
        let (y, stats) = x.batch_norm2d(g, b, BnMode::Train { eps: 1e-5 }).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
        assert_eq!(stats.unwrap().mean, vec![7.0; 3]);
    }

    #[test]
    fn batch_norm_eval_identity() {
        let tape = Tape::<f32>::new();
        let v = Tensor::from_fn([2, 2, 3, 3], |i| i as f32 * 0.3 - 4.0);
        let x = tape.constant(v.clone());
        let g = tape.constant(Tensor::full([2], 1.0));
        let b = tape.constant(Tensor::zeros([2]));
        let (rm, rv) = (Tensor::zeros([2]), Tensor::full([2], 1.0));
        let mode = BnMode::Eval {
            running_mean: &rm,
            running_var: &rv,
            eps: 0.0,
        };
        let (y, stats) = x.batch_norm2d(g, b, mode).unwrap();
        assert!(stats.is_none());
        assert_eq!(*y.value(), v);
    }

    #[test]
    fn batch_norm_rejects_single_value_batch() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([1, 2, 1, 1]));
        let g = tape.constant(Tensor::full([2], 1.0));
        let b = tape.constant(Tensor::zeros([2]));
        assert!(matches!(
            x.batch_norm2d(g, b, BnMode::Train { eps: 1e-5 }),
            Err(Error::InvalidBatch(_))
        ));
    }

    #[test]
    fn channel_ops_round_trip() {
        let tape = Tape::<f32>::new();
        let v = Tensor::from_fn([2, 4, 3, 3], |i| i as f32);
        let x = tape.constant(v.clone());
        let (a, b) = x.split_half().unwrap();
        assert_eq!(a.shape(), vec![2, 2, 3, 3]);
        assert_eq!(*Var::concat_channels(&[a, b]).unwrap().value(), v);
        let p = x.permute_channels(&[2, 0, 3, 1]).unwrap().value();
        assert_eq!(p.at(&[1, 0, 1, 1]), v.at(&[1, 2, 1, 1]));
        assert!(x.permute_channels(&[0, 0, 1, 2]).is_err());
        let odd = tape.constant(Tensor::<f32>::zeros([3, 2, 2]));
        assert!(odd.split_half().is_err());
    }

    #[test]
    fn sum_channels_shapes() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full([3, 2, 2], 1.5));
        let s = x.sum_channels().unwrap().value();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[4.5; 4]);
    }
}
