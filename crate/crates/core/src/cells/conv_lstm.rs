use rand::Rng;

use super::{
    check_state, init_bias, init_kernel, lstm_update, param_group, CellOutput, CellState,
    CellWeights, Gates, ParamCount, FORGET_BIAS_INIT,
};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

param_group! {
    /// One gate: `W_x * x + W_h * h + b`.
    ConvLstmGate { wx, wh, bias }
}

/// Convolutional LSTM with a single odd kernel size for every gate.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLstmWeights<P = Tensor> {
    pub input_channels: usize,
    pub hidden_channels: usize,
    pub kernel_size: usize,
    pub gates: Gates<ConvLstmGate<P>>,
}

impl ConvLstmWeights<Tensor> {
    pub fn init(
        input_channels: usize,
        hidden_channels: usize,
        kernel_size: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if kernel_size % 2 == 0 {
            return Err(Error::UnsupportedKernel {
                kh: kernel_size,
                kw: kernel_size,
            });
        }
        let mut gate = |name: &str| ConvLstmGate {
            wx: init_kernel(hidden_channels, input_channels, kernel_size, rng),
            wh: init_kernel(hidden_channels, hidden_channels, kernel_size, rng),
            bias: init_bias(
                hidden_channels,
                if name == "f" { FORGET_BIAS_INIT } else { 0.0 },
            ),
        };
        let gates = Gates {
            input: gate("i"),
            forget: gate("f"),
            candidate: gate("g"),
            output: gate("o"),
        };
        Ok(ConvLstmWeights {
            input_channels,
            hidden_channels,
            kernel_size,
            gates,
        })
    }

    /// All-zero kernels and biases.
    pub fn zeros(input_channels: usize, hidden_channels: usize, kernel_size: usize) -> Self {
        let k = kernel_size;
        let gate = || ConvLstmGate {
            wx: Tensor::zeros([hidden_channels, input_channels, k, k]),
            wh: Tensor::zeros([hidden_channels, hidden_channels, k, k]),
            bias: init_bias(hidden_channels, 0.0),
        };
        ConvLstmWeights {
            input_channels,
            hidden_channels,
            kernel_size,
            gates: Gates {
                input: gate(),
                forget: gate(),
                candidate: gate(),
                output: gate(),
            },
        }
    }
}

impl<P> ConvLstmWeights<P> {
    pub fn map<Q>(&self, f: &mut dyn FnMut(&str, &P) -> Q) -> ConvLstmWeights<Q> {
        ConvLstmWeights {
            input_channels: self.input_channels,
            hidden_channels: self.hidden_channels,
            kernel_size: self.kernel_size,
            gates: self.gates.map(|name, g| g.map(&format!("{name}."), &mut *f)),
        }
    }

    pub fn param_count(&self) -> ParamCount {
        let (ci, nh, k) = (self.input_channels, self.hidden_channels, self.kernel_size);
        let kernel_elems = 4 * k * k * (ci + nh) * nh;
        let biases = 4 * nh;
        ParamCount {
            per_gate_kernel_elems: k * k,
            kernel_elems,
            biases,
            total: kernel_elems + biases,
        }
    }
}

impl ConvLstmWeights<Var> {
    /// One step. All four gates are evaluated by a single convolution over
    /// `[x, h]` whose kernel stacks `[W_gx, W_gh]` for every gate.
    pub fn step(&self, tape: &mut Tape, x: Var, h: Var, c: Var) -> Result<CellOutput> {
        check_state(tape, x, h, c, self.hidden_channels, self.input_channels)?;
        let nh = self.hidden_channels;
        let mut kernels = Vec::with_capacity(4);
        let mut biases = Vec::with_capacity(4);
        for g in self.gates.iter() {
            kernels.push(tape.concat(&[g.wx, g.wh], 1)?);
            biases.push(g.bias);
        }
        let kernel = tape.concat(&kernels, 0)?;
        let bias = tape.concat(&biases, 0)?;
        let z = tape.concat_channels(&[x, h])?;
        let pre = tape.conv2d(z, kernel, Some(bias))?;

        let part = |tape: &mut Tape, k: usize| tape.slice_channels(pre, k * nh, nh);
        let (pi, pf, pg, po) = (part(tape, 0)?, part(tape, 1)?, part(tape, 2)?, part(tape, 3)?);
        let i = tape.hard_sigmoid(pi);
        let f = tape.hard_sigmoid(pf);
        let g = tape.tanh(pg);
        let o = tape.hard_sigmoid(po);
        lstm_update(tape, [i, f, g, o], c)
    }
}

/// One convolutional LSTM step on plain tensors; returns `h_t` and the new state.
pub fn conv_lstm_step(
    w: &ConvLstmWeights,
    x: &Tensor,
    state: &CellState,
) -> Result<(Tensor, CellState)> {
    CellWeights::Conv(w.clone()).step_values(x, state)
}
