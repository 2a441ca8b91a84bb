use crate::error::{Error, Result};

use super::ops::{self, HARD_SIGMOID_SLOPE, HARD_SIGMOID_OFFSET};
use super::{Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample(Var),
    Crop(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        start: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    HardSigmoid(Var),
    Clamp {
        input: Var,
        lo: f64,
        hi: f64,
    },
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations in execution order so gradients can be replayed backward.
///
/// Nodes are appended after their inputs, so walking indices in reverse visits
/// every node after all of its consumers. Gradients accumulate on leaves that
/// require them until [`Tape::zero_grad`] is called.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A learnable leaf; its gradient is accumulated by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a learnable leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn unary(&mut self, a: Var, value: Tensor, op: Op) -> Var {
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let rg = self.any_grad(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let value = ops::conv2d(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
        )?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(value, Op::Conv2d { input, kernel, bias }, rg))
    }

    pub fn max_pool_2x2(&mut self, input: Var) -> Var {
        let (value, argmax) = ops::max_pool_2x2_with_argmax(self.value(input));
        self.unary(input, value, Op::MaxPool { input, argmax })
    }

    pub fn upsample_2x(&mut self, input: Var) -> Var {
        let value = ops::upsample_2x(self.value(input));
        self.unary(input, value, Op::Upsample(input))
    }

    pub fn crop(&mut self, input: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(input);
        if (s.h, s.w) == (h, w) {
            return Ok(input);
        }
        let value = ops::crop(self.value(input), h, w)?;
        Ok(self.unary(input, value, Op::Crop(input)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = ops::concat(&values, axis)?;
        let rg = self.any_grad(parts);
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        self.concat(parts, 1)
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        if start == 0 && len == self.shape(input).c {
            return Ok(input);
        }
        let value = ops::slice_channels(self.value(input), start, len)?;
        Ok(self.unary(input, value, Op::Slice { input, start }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::add(self.value(a), self.value(b))?;
        Ok(self.binary(a, b, value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::sub(self.value(a), self.value(b))?;
        Ok(self.binary(a, b, value, Op::Sub(a, b)))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::hadamard(self.value(a), self.value(b))?;
        Ok(self.binary(a, b, value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = ops::scale(self.value(a), s);
        self.unary(a, value, Op::Scale(a, s))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = ops::tanh(self.value(a));
        self.unary(a, value, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = ops::relu(self.value(a));
        self.unary(a, value, Op::Relu(a))
    }

    pub fn hard_sigmoid(&mut self, a: Var) -> Var {
        let value = ops::hard_sigmoid(self.value(a));
        self.unary(a, value, Op::HardSigmoid(a))
    }

    /// Elementwise clamp; the gradient passes wherever `lo <= x <= hi`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|v| v.clamp(lo, hi));
        self.unary(a, value, Op::Clamp { input: a, lo, hi })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.unary(a, value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean());
        self.unary(a, value, Op::Mean(a))
    }

    /// Mean squared difference, as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.hadamard(d, d)?;
        Ok(self.mean(sq))
    }

    /// Back-propagates from a scalar, adding `d loss / d leaf` into every
    /// learnable leaf's gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.shape(loss);
        if ls.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {ls}"
            )));
        }
        let mut buf: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        buf[loss.0] = Some(Tensor::full(ls, 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = buf[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => match &mut self.grads[i] {
                    Some(acc) => add_into(acc, &g),
                    slot @ None => *slot = Some(g),
                },
                op => self.propagate(op, &node.value, g, &mut buf),
            }
        }
        Ok(())
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: Tensor, buf: &mut [Option<Tensor>]) {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match op {
            Op::Leaf => unreachable!(),
            Op::Conv2d {
                input,
                kernel,
                bias,
            } => {
                let grads = ops::conv2d_backward(
                    val(*input),
                    val(*kernel),
                    &g,
                    (wants(*input), wants(*kernel), bias.is_some_and(wants)),
                );
                if let Some(gi) = grads.input {
                    accumulate(buf, *input, gi);
                }
                if let Some(gk) = grads.kernel {
                    accumulate(buf, *kernel, gk);
                }
                if let (Some(b), Some(gb)) = (bias, grads.bias) {
                    accumulate(buf, *b, gb);
                }
            }
            Op::MaxPool { input, argmax } => {
                let mut gi = val(*input).zeros_like();
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    gi.data_mut()[src] += gv;
                }
                accumulate(buf, *input, gi);
            }
            Op::Upsample(input) => {
                accumulate(buf, *input, ops::upsample_2x_backward(&g, val(*input).shape()));
            }
            Op::Crop(input) => {
                let mut gi = val(*input).zeros_like();
                let s = g.shape();
                for n in 0..s.n {
                    for c in 0..s.c {
                        for y in 0..s.h {
                            for x in 0..s.w {
                                gi.set(n, c, y, x, g.at(n, c, y, x));
                            }
                        }
                    }
                }
                accumulate(buf, *input, gi);
            }
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                for &p in parts {
                    let ps = val(p).shape();
                    let extent = if *axis == 0 { ps.n } else { ps.c };
                    if wants(p) {
                        let piece = if *axis == 0 {
                            let per = ps.c * ps.plane();
                            Tensor::from_vec(ps, g.data()[offset * per..(offset + extent) * per].to_vec())
                                .expect("concat part shape")
                        } else {
                            ops::slice_channels(&g, offset, extent).expect("concat part shape")
                        };
                        accumulate(buf, p, piece);
                    }
                    offset += extent;
                }
            }
            Op::Slice { input, start } => {
                let is = val(*input).shape();
                let gs = g.shape();
                let plane = is.plane();
                let mut gi = Tensor::zeros(is);
                for n in 0..is.n {
                    let dst = (n * is.c + start) * plane;
                    let src = n * gs.c * plane;
                    gi.data_mut()[dst..dst + gs.c * plane]
                        .copy_from_slice(&g.data()[src..src + gs.c * plane]);
                }
                accumulate(buf, *input, gi);
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(buf, *a, g.clone());
                }
                if wants(*b) {
                    accumulate(buf, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(buf, *a, g.clone());
                }
                if wants(*b) {
                    accumulate(buf, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    accumulate(buf, *a, ops::hadamard(&g, val(*b)).expect("same shape"));
                }
                if wants(*b) {
                    accumulate(buf, *b, ops::hadamard(&g, val(*a)).expect("same shape"));
                }
            }
            Op::Scale(a, s) => accumulate(buf, *a, ops::scale(&g, *s)),
            Op::Tanh(a) => {
                let gi = zip(&g, out, |gv, y| gv * (1.0 - y * y));
                accumulate(buf, *a, gi);
            }
            Op::Relu(a) => {
                let gi = zip(&g, val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                accumulate(buf, *a, gi);
            }
            Op::HardSigmoid(a) => {
                let gi = zip(&g, val(*a), |gv, x| {
                    let z = HARD_SIGMOID_SLOPE * x + HARD_SIGMOID_OFFSET;
                    if z > 0.0 && z < 1.0 {
                        gv * HARD_SIGMOID_SLOPE
                    } else {
                        0.0
                    }
                });
                accumulate(buf, *a, gi);
            }
            Op::Clamp { input, lo, hi } => {
                let gi = zip(&g, val(*input), |gv, x| if x >= *lo && x <= *hi { gv } else { 0.0 });
                accumulate(buf, *input, gi);
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                accumulate(buf, *a, Tensor::full(val(*a).shape(), gv));
            }
            Op::Mean(a) => {
                let s = val(*a).shape();
                let gv = g.data()[0] / s.len() as f64;
                accumulate(buf, *a, Tensor::full(s, gv));
            }
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}

fn add_into(acc: &mut Tensor, g: &Tensor) {
    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += b;
    }
}

fn accumulate(buf: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut buf[v.0] {
        Some(acc) => add_into(acc, &g),
        slot @ None => *slot = Some(g),
    }
}
