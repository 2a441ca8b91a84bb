//! Inception-style LSTM cells.
//!
//! Every gate sees `z = [x, h]` through three parallel branches whose outputs
//! (each `nb` channels wide) are stacked in the order 1x1, 3x3, 5x5. Version 2
//! swaps the 5x5 branch for two chained 3x3 convolutions with no nonlinearity
//! in between. The state is therefore `3 * nb` channels wide.

use rand::Rng;

use super::{
    check_state, init_bias, init_kernel, lstm_update, param_group, CandidateActivation,
    CellOutput, CellState, CellWeights, Gates, ParamCount, FORGET_BIAS_INIT,
};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

param_group! {
    /// Kernels and per-branch biases of one v1 gate.
    InceptionV1Gate { k1, b1, k3, b3, k5, b5 }
}

param_group! {
    /// One v2 gate. `chain_in` maps `z` to `nb` intermediate channels and
    /// `chain_out` maps those to the branch output; only the output carries a bias.
    InceptionV2Gate { k1, b1, k3, b3, chain_in, chain_out, chain_bias }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InceptionV1Weights<P = Tensor> {
    pub input_channels: usize,
    pub branch_width: usize,
    pub candidate_activation: CandidateActivation,
    pub gates: Gates<InceptionV1Gate<P>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InceptionV2Weights<P = Tensor> {
    pub input_channels: usize,
    pub branch_width: usize,
    pub candidate_activation: CandidateActivation,
    pub gates: Gates<InceptionV2Gate<P>>,
}

fn check_dims(input_channels: usize, branch_width: usize) -> Result<()> {
    if branch_width == 0 {
        return Err(Error::Config("inception branch width must be >= 1".into()));
    }
    if input_channels == 0 {
        return Err(Error::Config("inception input channels must be >= 1".into()));
    }
    Ok(())
}

fn gate_bias(name: &str) -> f64 {
    if name == "f" {
        FORGET_BIAS_INIT
    } else {
        0.0
    }
}

impl InceptionV1Weights<Tensor> {
    pub fn init(
        input_channels: usize,
        branch_width: usize,
        candidate_activation: CandidateActivation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_dims(input_channels, branch_width)?;
        let (cz, nb) = (input_channels + 3 * branch_width, branch_width);
        let mut gate = |name: &str| {
            let b = gate_bias(name);
            InceptionV1Gate {
                k1: init_kernel(nb, cz, 1, rng),
                b1: init_bias(nb, b),
                k3: init_kernel(nb, cz, 3, rng),
                b3: init_bias(nb, b),
                k5: init_kernel(nb, cz, 5, rng),
                b5: init_bias(nb, b),
            }
        };
        let gates = Gates {
            input: gate("i"),
            forget: gate("f"),
            candidate: gate("g"),
            output: gate("o"),
        };
        Ok(InceptionV1Weights {
            input_channels,
            branch_width,
            candidate_activation,
            gates,
        })
    }

    pub fn zeros(input_channels: usize, branch_width: usize) -> Self {
        let (cz, nb) = (input_channels + 3 * branch_width, branch_width);
        let gate = || InceptionV1Gate {
            k1: Tensor::zeros([nb, cz, 1, 1]),
            b1: init_bias(nb, 0.0),
            k3: Tensor::zeros([nb, cz, 3, 3]),
            b3: init_bias(nb, 0.0),
            k5: Tensor::zeros([nb, cz, 5, 5]),
            b5: init_bias(nb, 0.0),
        };
        InceptionV1Weights {
            input_channels,
            branch_width,
            candidate_activation: CandidateActivation::Tanh,
            gates: Gates {
                input: gate(),
                forget: gate(),
                candidate: gate(),
                output: gate(),
            },
        }
    }
}

impl InceptionV2Weights<Tensor> {
    pub fn init(
        input_channels: usize,
        branch_width: usize,
        candidate_activation: CandidateActivation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_dims(input_channels, branch_width)?;
        let (cz, nb) = (input_channels + 3 * branch_width, branch_width);
        let mut gate = |name: &str| {
            let b = gate_bias(name);
            InceptionV2Gate {
                k1: init_kernel(nb, cz, 1, rng),
                b1: init_bias(nb, b),
                k3: init_kernel(nb, cz, 3, rng),
                b3: init_bias(nb, b),
                chain_in: init_kernel(nb, cz, 3, rng),
                chain_out: init_kernel(nb, nb, 3, rng),
                chain_bias: init_bias(nb, b),
            }
        };
        let gates = Gates {
            input: gate("i"),
            forget: gate("f"),
            candidate: gate("g"),
            output: gate("o"),
        };
        Ok(InceptionV2Weights {
            input_channels,
            branch_width,
            candidate_activation,
            gates,
        })
    }

    pub fn zeros(input_channels: usize, branch_width: usize) -> Self {
        let (cz, nb) = (input_channels + 3 * branch_width, branch_width);
        let gate = || InceptionV2Gate {
            k1: Tensor::zeros([nb, cz, 1, 1]),
            b1: init_bias(nb, 0.0),
            k3: Tensor::zeros([nb, cz, 3, 3]),
            b3: init_bias(nb, 0.0),
            chain_in: Tensor::zeros([nb, cz, 3, 3]),
            chain_out: Tensor::zeros([nb, nb, 3, 3]),
            chain_bias: init_bias(nb, 0.0),
        };
        InceptionV2Weights {
            input_channels,
            branch_width,
            candidate_activation: CandidateActivation::Tanh,
            gates: Gates {
                input: gate(),
                forget: gate(),
                candidate: gate(),
                output: gate(),
            },
        }
    }
}

impl<P> InceptionV1Weights<P> {
    pub fn state_channels(&self) -> usize {
        3 * self.branch_width
    }

    pub fn map<Q>(&self, f: &mut dyn FnMut(&str, &P) -> Q) -> InceptionV1Weights<Q> {
        InceptionV1Weights {
            input_channels: self.input_channels,
            branch_width: self.branch_width,
            candidate_activation: self.candidate_activation,
            gates: self.gates.map(|name, g| g.map(&format!("{name}."), &mut *f)),
        }
    }

    pub fn param_count(&self) -> ParamCount {
        let (cz, nb) = (self.input_channels + self.state_channels(), self.branch_width);
        let coefficient = 1 + 9 + 25;
        let kernel_elems = 4 * coefficient * cz * nb;
        let biases = 4 * 3 * nb;
        ParamCount {
            per_gate_kernel_elems: coefficient,
            kernel_elems,
            biases,
            total: kernel_elems + biases,
        }
    }
}

impl<P> InceptionV2Weights<P> {
    pub fn state_channels(&self) -> usize {
        3 * self.branch_width
    }

    pub fn map<Q>(&self, f: &mut dyn FnMut(&str, &P) -> Q) -> InceptionV2Weights<Q> {
        InceptionV2Weights {
            input_channels: self.input_channels,
            branch_width: self.branch_width,
            candidate_activation: self.candidate_activation,
            gates: self.gates.map(|name, g| g.map(&format!("{name}."), &mut *f)),
        }
    }

    pub fn param_count(&self) -> ParamCount {
        let (cz, nb) = (self.input_channels + self.state_channels(), self.branch_width);
        let coefficient = 1 + 9 * 3;
        // 1x1, 3x3 and the first chained 3x3 read all of z; the second chained
        // 3x3 reads only the nb intermediate channels.
        let kernel_elems = 4 * ((1 + 9 + 9) * cz * nb + 9 * nb * nb);
        let biases = 4 * 3 * nb;
        ParamCount {
            per_gate_kernel_elems: coefficient,
            kernel_elems,
            biases,
            total: kernel_elems + biases,
        }
    }
}

/// Applies gate activations to the four stacked pre-activations (order i, f, g, o).
fn activate(
    tape: &mut Tape,
    pre: [Var; 4],
    candidate: CandidateActivation,
) -> [Var; 4] {
    let [pi, pf, pg, po] = pre;
    [
        tape.hard_sigmoid(pi),
        tape.hard_sigmoid(pf),
        candidate.apply(tape, pg),
        tape.hard_sigmoid(po),
    ]
}

/// Runs one kernel size for all four gates as a single convolution.
fn fused_branch(
    tape: &mut Tape,
    z: Var,
    kernels: [Var; 4],
    biases: [Var; 4],
) -> Result<Var> {
    let k = tape.concat(&kernels, 0)?;
    let b = tape.concat(&biases, 0)?;
    tape.conv2d(z, k, Some(b))
}

/// Stacks branch outputs per gate: gate `g` gets channels `[g*nb, (g+1)*nb)` of each branch.
fn stack_branches(tape: &mut Tape, branches: &[Var], nb: usize) -> Result<[Var; 4]> {
    let mut out = [branches[0]; 4];
    for (g, slot) in out.iter_mut().enumerate() {
        let parts = branches
            .iter()
            .map(|&b| tape.slice_channels(b, g * nb, nb))
            .collect::<Result<Vec<_>>>()?;
        *slot = tape.concat_channels(&parts)?;
    }
    Ok(out)
}

fn gate_array<G, T: Copy>(gates: &Gates<G>, pick: impl Fn(&G) -> T) -> [T; 4] {
    [
        pick(&gates.input),
        pick(&gates.forget),
        pick(&gates.candidate),
        pick(&gates.output),
    ]
}

impl InceptionV1Weights<Var> {
    pub fn step(&self, tape: &mut Tape, x: Var, h: Var, c: Var) -> Result<CellOutput> {
        check_state(tape, x, h, c, self.state_channels(), self.input_channels)?;
        let z = tape.concat_channels(&[x, h])?;
        let g = &self.gates;
        let b1 = fused_branch(tape, z, gate_array(g, |g| g.k1), gate_array(g, |g| g.b1))?;
        let b3 = fused_branch(tape, z, gate_array(g, |g| g.k3), gate_array(g, |g| g.b3))?;
        let b5 = fused_branch(tape, z, gate_array(g, |g| g.k5), gate_array(g, |g| g.b5))?;
        let pre = stack_branches(tape, &[b1, b3, b5], self.branch_width)?;
        let acts = activate(tape, pre, self.candidate_activation);
        lstm_update(tape, acts, c)
    }
}

impl InceptionV2Weights<Var> {
    pub fn step(&self, tape: &mut Tape, x: Var, h: Var, c: Var) -> Result<CellOutput> {
        check_state(tape, x, h, c, self.state_channels(), self.input_channels)?;
        let nb = self.branch_width;
        let z = tape.concat_channels(&[x, h])?;
        let g = &self.gates;
        let b1 = fused_branch(tape, z, gate_array(g, |g| g.k1), gate_array(g, |g| g.b1))?;
        let b3 = fused_branch(tape, z, gate_array(g, |g| g.k3), gate_array(g, |g| g.b3))?;

        let chain_in = tape.concat(&gate_array(g, |g| g.chain_in), 0)?;
        let mid = tape.conv2d(z, chain_in, None)?;
        let mut chained = Vec::with_capacity(4);
        for (k, gate) in g.iter().enumerate() {
            let part = tape.slice_channels(mid, k * nb, nb)?;
            chained.push(tape.conv2d(part, gate.chain_out, Some(gate.chain_bias))?);
        }
        let b5 = tape.concat_channels(&chained)?;

        let pre = stack_branches(tape, &[b1, b3, b5], nb)?;
        let acts = activate(tape, pre, self.candidate_activation);
        lstm_update(tape, acts, c)
    }
}

pub fn inception_v1_step(
    w: &InceptionV1Weights,
    x: &Tensor,
    state: &CellState,
) -> Result<(Tensor, CellState)> {
    CellWeights::InceptionV1(w.clone()).step_values(x, state)
}

pub fn inception_v2_step(
    w: &InceptionV2Weights,
    x: &Tensor,
    state: &CellState,
) -> Result<(Tensor, CellState)> {
    CellWeights::InceptionV2(w.clone()).step_values(x, state)
}
