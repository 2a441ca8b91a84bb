//! Recurrent cells: convolutional LSTM and the two Inception-style variants.
//!
//! Weight structs are generic over the parameter handle `P`. With `P = Tensor`
//! they own values; [`Tape::param`] maps them to `P = Var` for a differentiable
//! forward pass. All gate activations except the candidate use
//! [`hard_sigmoid`](crate::tensor::ops::hard_sigmoid); no peephole terms.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tape, Tensor, Var};

mod conv_lstm;
mod inception;

pub use conv_lstm::{conv_lstm_step, ConvLstmGate, ConvLstmWeights};
pub use inception::{
    inception_v1_step, inception_v2_step, InceptionV1Gate, InceptionV1Weights, InceptionV2Gate,
    InceptionV2Weights,
};

/// Initial bias of every forget-gate branch.
pub const FORGET_BIAS_INIT: f64 = 1.0;

/// Default kernel size of the convolutional LSTM.
pub const CONV_LSTM_KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CellType {
    Conv,
    InceptionV1,
    InceptionV2,
}

impl CellType {
    pub const ALL: [CellType; 3] = [CellType::Conv, CellType::InceptionV1, CellType::InceptionV2];

    pub fn name(self) -> &'static str {
        match self {
            CellType::Conv => "conv",
            CellType::InceptionV1 => "iv1",
            CellType::InceptionV2 => "iv2",
        }
    }

    pub fn code(self) -> u32 {
        match self {
            CellType::Conv => 0,
            CellType::InceptionV1 => 1,
            CellType::InceptionV2 => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        CellType::ALL.into_iter().find(|c| c.code() == code)
    }

    pub fn is_inception(self) -> bool {
        !matches!(self, CellType::Conv)
    }
}

impl fmt::Display for CellType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CellType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv" => Ok(CellType::Conv),
            "iv1" => Ok(CellType::InceptionV1),
            "iv2" => Ok(CellType::InceptionV2),
            other => Err(Error::Config(format!(
                "unknown cell type {other:?} (expected conv, iv1 or iv2)"
            ))),
        }
    }
}

/// Nonlinearity applied to the candidate (cell input) gate.
///
/// `Tanh` is the usual LSTM choice. `HardSigmoid` gives the literal form
/// where every stacked gate, the candidate included, uses the gate sigmoid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum CandidateActivation {
    #[default]
    Tanh,
    HardSigmoid,
}

impl CandidateActivation {
    pub fn name(self) -> &'static str {
        match self {
            CandidateActivation::Tanh => "tanh",
            CandidateActivation::HardSigmoid => "hard_sigmoid",
        }
    }

    pub fn code(self) -> u32 {
        match self {
            CandidateActivation::Tanh => 0,
            CandidateActivation::HardSigmoid => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(CandidateActivation::Tanh),
            1 => Some(CandidateActivation::HardSigmoid),
            _ => None,
        }
    }

    fn apply(self, tape: &mut Tape, v: Var) -> Var {
        match self {
            CandidateActivation::Tanh => tape.tanh(v),
            CandidateActivation::HardSigmoid => tape.hard_sigmoid(v),
        }
    }
}

impl FromStr for CandidateActivation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(CandidateActivation::Tanh),
            "hard_sigmoid" => Ok(CandidateActivation::HardSigmoid),
            other => Err(Error::Config(format!(
                "unknown candidate activation {other:?} (expected tanh or hard_sigmoid)"
            ))),
        }
    }
}

/// The four per-gate parameter groups, always visited in the order i, f, g, o.
#[derive(Clone, Debug, PartialEq)]
pub struct Gates<G> {
    pub input: G,
    pub forget: G,
    pub candidate: G,
    pub output: G,
}

impl<G> Gates<G> {
    pub const NAMES: [&'static str; 4] = ["i", "f", "g", "o"];

    pub fn iter(&self) -> impl Iterator<Item = &G> {
        [&self.input, &self.forget, &self.candidate, &self.output].into_iter()
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, &G)> {
        Self::NAMES.into_iter().zip(self.iter())
    }

    pub fn named_mut(&mut self) -> impl Iterator<Item = (&'static str, &mut G)> {
        Self::NAMES.into_iter().zip([
            &mut self.input,
            &mut self.forget,
            &mut self.candidate,
            &mut self.output,
        ])
    }

    pub fn map<H>(&self, mut f: impl FnMut(&'static str, &G) -> H) -> Gates<H> {
        Gates {
            input: f("i", &self.input),
            forget: f("f", &self.forget),
            candidate: f("g", &self.candidate),
            output: f("o", &self.output),
        }
    }

    pub fn try_map<H>(&self, mut f: impl FnMut(&'static str, &G) -> Result<H>) -> Result<Gates<H>> {
        Ok(Gates {
            input: f("i", &self.input)?,
            forget: f("f", &self.forget)?,
            candidate: f("g", &self.candidate)?,
            output: f("o", &self.output)?,
        })
    }
}

/// Named access to every learnable tensor, in a fixed order.
pub trait Parameters<P> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a P)>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut P)>);

    fn named_params(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut P)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut out);
        out
    }
}

/// Declares a group of named parameters with `map` and [`Parameters`] support.
macro_rules! param_group {
    ($(#[$meta:meta])* $name:ident { $($field:ident),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<P = crate::tensor::Tensor> {
            $(pub $field: P,)+
        }

        impl<P> $name<P> {
            pub fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> $name<Q> {
                $name {
                    $($field: f(&format!("{prefix}{}", stringify!($field)), &self.$field),)+
                }
            }
        }

        impl<P> crate::cells::Parameters<P> for $name<P> {
            fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a P)>) {
                $(out.push((format!("{prefix}{}", stringify!($field)), &self.$field));)+
            }

            fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut P)>) {
                $(out.push((format!("{prefix}{}", stringify!($field)), &mut self.$field));)+
            }
        }
    };
}
pub(crate) use param_group;

impl<G: Parameters<P>, P> Parameters<P> for Gates<G> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a P)>) {
        for (name, g) in self.named() {
            g.visit(&format!("{prefix}{name}."), out);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut P)>) {
        for (name, g) in self.named_mut() {
            g.visit_mut(&format!("{prefix}{name}."), out);
        }
    }
}

/// Hidden and cell maps of one recurrent layer.
#[derive(Clone, Debug, PartialEq)]
pub struct CellState {
    pub h: Tensor,
    pub c: Tensor,
}

impl CellState {
    pub fn zeros(n: usize, channels: usize, height: usize, width: usize) -> Self {
        let s = Shape::new(n, channels, height, width);
        CellState {
            h: Tensor::zeros(s),
            c: Tensor::zeros(s),
        }
    }

    pub fn new(h: Tensor, c: Tensor) -> Result<Self> {
        if h.shape() != c.shape() {
            return Err(Error::shape(format!(
                "cell state h {} and c {} differ",
                h.shape(),
                c.shape()
            )));
        }
        Ok(CellState { h, c })
    }
}

/// Everything one cell step produces on the tape.
#[derive(Clone, Copy, Debug)]
pub struct CellOutput {
    pub h: Var,
    pub c: Var,
    pub input_gate: Var,
    pub forget_gate: Var,
    pub output_gate: Var,
    pub candidate: Var,
}

/// `c = f * c_prev + i * g`, `h = o * tanh(c)`.
fn lstm_update(
    tape: &mut Tape,
    [i, f, g, o]: [Var; 4],
    c_prev: Var,
) -> Result<CellOutput> {
    let keep = tape.hadamard(f, c_prev)?;
    let write = tape.hadamard(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c);
    let h = tape.hadamard(o, tc)?;
    Ok(CellOutput {
        h,
        c,
        input_gate: i,
        forget_gate: f,
        output_gate: o,
        candidate: g,
    })
}

fn check_state(tape: &Tape, x: Var, h: Var, c: Var, hidden: usize, input: usize) -> Result<()> {
    let (xs, hs, cs) = (tape.shape(x), tape.shape(h), tape.shape(c));
    if hs != cs {
        return Err(Error::shape(format!("cell state h {hs} and c {cs} differ")));
    }
    if hs.c != hidden {
        return Err(Error::shape(format!(
            "cell state has {} channels, cell expects {hidden}",
            hs.c
        )));
    }
    if xs.c != input {
        return Err(Error::shape(format!(
            "cell input has {} channels, cell expects {input}",
            xs.c
        )));
    }
    if (xs.n, xs.h, xs.w) != (hs.n, hs.h, hs.w) {
        return Err(Error::shape(format!("cell input {xs} does not match state {hs}")));
    }
    Ok(())
}

/// Glorot-uniform kernel `(co, ci, k, k)`.
pub(crate) fn init_kernel(co: usize, ci: usize, k: usize, rng: &mut impl Rng) -> Tensor {
    let fan_in = (ci * k * k) as f64;
    let fan_out = (co * k * k) as f64;
    let bound = (6.0 / (fan_in + fan_out)).sqrt();
    Tensor::uniform(Shape::new(co, ci, k, k), bound, rng)
}

pub(crate) fn init_bias(co: usize, value: f64) -> Tensor {
    Tensor::full(Shape::bias(co), value)
}

/// Learnable-scalar breakdown of one cell.
///
/// `per_gate_kernel_elems` is the sum of kernel spatial sizes over the
/// branches of one gate. Multiplied by the channel product it gives the
/// kernel parameters of that gate: 35 for Inception v1 (1 + 9 + 25), 28 for
/// Inception v2 (1 + 3 * 9) and k*k for the convolutional LSTM.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub per_gate_kernel_elems: usize,
    pub kernel_elems: usize,
    pub biases: usize,
    pub total: usize,
}

impl fmt::Display for ParamCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "per-gate kernel coefficient {}, kernel weights {}, biases {}, total {}",
            self.per_gate_kernel_elems, self.kernel_elems, self.biases, self.total
        )
    }
}

/// Any of the three cell flavours.
#[derive(Clone, Debug, PartialEq)]
pub enum CellWeights<P = Tensor> {
    Conv(ConvLstmWeights<P>),
    InceptionV1(InceptionV1Weights<P>),
    InceptionV2(InceptionV2Weights<P>),
}

impl CellWeights<Tensor> {
    /// Randomly initialized weights. `hidden_channels` must be divisible by 3
    /// for the Inception variants (three equal-width branches).
    pub fn init(
        cell_type: CellType,
        input_channels: usize,
        hidden_channels: usize,
        candidate: CandidateActivation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if input_channels == 0 || hidden_channels == 0 {
            return Err(Error::Config("cell channel counts must be >= 1".into()));
        }
        match cell_type {
            CellType::Conv => Ok(CellWeights::Conv(ConvLstmWeights::init(
                input_channels,
                hidden_channels,
                CONV_LSTM_KERNEL,
                rng,
            )?)),
            CellType::InceptionV1 | CellType::InceptionV2 => {
                if hidden_channels % 3 != 0 {
                    return Err(Error::Config(format!(
                        "inception cells need hidden channels divisible by 3, got {hidden_channels}"
                    )));
                }
                let nb = hidden_channels / 3;
                Ok(if cell_type == CellType::InceptionV1 {
                    CellWeights::InceptionV1(InceptionV1Weights::init(input_channels, nb, candidate, rng)?)
                } else {
                    CellWeights::InceptionV2(InceptionV2Weights::init(input_channels, nb, candidate, rng)?)
                })
            }
        }
    }

    /// Advances one step on plain tensors.
    pub fn step_values(&self, x: &Tensor, state: &CellState) -> Result<(Tensor, CellState)> {
        let mut tape = Tape::new();
        let bound = self.map(&mut |_, t| tape.constant(t.clone()));
        let xv = tape.constant(x.clone());
        let h = tape.constant(state.h.clone());
        let c = tape.constant(state.c.clone());
        let out = bound.step(&mut tape, xv, h, c)?;
        let h = tape.value(out.h).clone();
        Ok((h.clone(), CellState { h, c: tape.value(out.c).clone() }))
    }
}

impl<P> CellWeights<P> {
    pub fn cell_type(&self) -> CellType {
        match self {
            CellWeights::Conv(_) => CellType::Conv,
            CellWeights::InceptionV1(_) => CellType::InceptionV1,
            CellWeights::InceptionV2(_) => CellType::InceptionV2,
        }
    }

    pub fn input_channels(&self) -> usize {
        match self {
            CellWeights::Conv(w) => w.input_channels,
            CellWeights::InceptionV1(w) => w.input_channels,
            CellWeights::InceptionV2(w) => w.input_channels,
        }
    }

    /// Channel count of h and c.
    pub fn hidden_channels(&self) -> usize {
        match self {
            CellWeights::Conv(w) => w.hidden_channels,
            CellWeights::InceptionV1(w) => w.state_channels(),
            CellWeights::InceptionV2(w) => w.state_channels(),
        }
    }

    pub fn candidate_activation(&self) -> CandidateActivation {
        match self {
            CellWeights::Conv(_) => CandidateActivation::Tanh,
            CellWeights::InceptionV1(w) => w.candidate_activation,
            CellWeights::InceptionV2(w) => w.candidate_activation,
        }
    }

    pub fn param_count(&self) -> ParamCount {
        match self {
            CellWeights::Conv(w) => w.param_count(),
            CellWeights::InceptionV1(w) => w.param_count(),
            CellWeights::InceptionV2(w) => w.param_count(),
        }
    }

    pub fn map<Q>(&self, f: &mut dyn FnMut(&str, &P) -> Q) -> CellWeights<Q> {
        match self {
            CellWeights::Conv(w) => CellWeights::Conv(w.map(f)),
            CellWeights::InceptionV1(w) => CellWeights::InceptionV1(w.map(f)),
            CellWeights::InceptionV2(w) => CellWeights::InceptionV2(w.map(f)),
        }
    }
}

impl CellWeights<Var> {
    pub fn step(&self, tape: &mut Tape, x: Var, h: Var, c: Var) -> Result<CellOutput> {
        match self {
            CellWeights::Conv(w) => w.step(tape, x, h, c),
            CellWeights::InceptionV1(w) => w.step(tape, x, h, c),
            CellWeights::InceptionV2(w) => w.step(tape, x, h, c),
        }
    }
}

impl<P> Parameters<P> for CellWeights<P> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a P)>) {
        match self {
            CellWeights::Conv(w) => w.gates.visit(prefix, out),
            CellWeights::InceptionV1(w) => w.gates.visit(prefix, out),
            CellWeights::InceptionV2(w) => w.gates.visit(prefix, out),
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut P)>) {
        match self {
            CellWeights::Conv(w) => w.gates.visit_mut(prefix, out),
            CellWeights::InceptionV1(w) => w.gates.visit_mut(prefix, out),
            CellWeights::InceptionV2(w) => w.gates.visit_mut(prefix, out),
        }
    }
}
