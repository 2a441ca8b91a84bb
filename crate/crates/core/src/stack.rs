//! Multi-layer predictive-coding network.
//!
//! Each layer keeps a recurrent representation `R` (an LSTM cell), predicts
//! its input `A` with a 1x1 convolution, and emits a rectified error
//! `E = [relu(A - Â), relu(Â - A)]`. The error of layer `l` becomes the input
//! of layer `l + 1` through a 3x3 convolution and 2x2 max pooling; the
//! representation of layer `l + 1` is fed back down through nearest-neighbour
//! upsampling.
//!
//! Per time step the recurrent layers update top-down first, then
//! predictions, errors and bottom-up targets are computed from layer 0
//! upward. The layer-0 prediction returned by a step is therefore made before
//! the step's frame is seen.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cells::{init_bias, init_kernel, CandidateActivation, CellState, CellType, CellWeights, ParamCount, Parameters};
use crate::datasets::FrameSequence;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tape, Tensor, Var};

/// Per-layer channel counts used by default, bottom (pixels) first.
pub const DEFAULT_CHANNEL_PLAN: [usize; 4] = [3, 48, 96, 192];

pub const MAX_LAYERS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerConfig {
    /// Channels of the layer's target `A` (3 for RGB at layer 0).
    pub input_channels: usize,
    /// Channels of the representation `R`; a multiple of 3 for Inception cells.
    pub hidden_channels: usize,
    pub cell_type: CellType,
    pub candidate: CandidateActivation,
}

impl LayerConfig {
    pub fn new(input_channels: usize, hidden_channels: usize, cell_type: CellType) -> Self {
        LayerConfig {
            input_channels,
            hidden_channels,
            cell_type,
            candidate: CandidateActivation::Tanh,
        }
    }
}

/// The default plan truncated to `layers`, with `R` as wide as `A` in every layer.
pub fn default_plan(layers: usize, cell_type: CellType) -> Result<Vec<LayerConfig>> {
    if !(1..=MAX_LAYERS).contains(&layers) {
        return Err(Error::Config(format!(
            "layer count must be between 1 and {MAX_LAYERS}, got {layers}"
        )));
    }
    Ok(DEFAULT_CHANNEL_PLAN[..layers]
        .iter()
        .map(|&c| LayerConfig::new(c, c, cell_type))
        .collect())
}

/// Spatial size of every layer for a given frame size; each layer halves (rounding up).
pub fn layer_sizes(layers: usize, height: usize, width: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(layers);
    let (mut h, mut w) = (height, width);
    for _ in 0..layers {
        out.push((h, w));
        h = h.div_ceil(2);
        w = w.div_ceil(2);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<P = Tensor> {
    pub kernel: P,
    pub bias: P,
}

impl<P> ConvParams<P> {
    fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> ConvParams<Q> {
        ConvParams {
            kernel: f(&format!("{prefix}kernel"), &self.kernel),
            bias: f(&format!("{prefix}bias"), &self.bias),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<P = Tensor> {
    pub config: LayerConfig,
    pub cell: CellWeights<P>,
    /// 1x1 convolution `R -> Â`.
    pub predict: ConvParams<P>,
    /// 3x3 convolution `E -> A` of the next layer (absent on the top layer).
    pub bottom_up: Option<ConvParams<P>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<P = Tensor> {
    pub layers: Vec<Layer<P>>,
}

impl Network<Tensor> {
    /// Deterministically initialized network for `configs` (bottom layer first).
    pub fn build(configs: &[LayerConfig], seed: u64) -> Result<Self> {
        if !(1..=MAX_LAYERS).contains(&configs.len()) {
            return Err(Error::Config(format!(
                "layer count must be between 1 and {MAX_LAYERS}, got {}",
                configs.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(configs.len());
        for (l, cfg) in configs.iter().enumerate() {
            if cfg.input_channels == 0 || cfg.hidden_channels == 0 {
                return Err(Error::Config(format!("layer {l}: channel counts must be >= 1")));
            }
            let above = configs.get(l + 1);
            let cell_input = 2 * cfg.input_channels + above.map_or(0, |a| a.hidden_channels);
            let cell = CellWeights::init(
                cfg.cell_type,
                cell_input,
                cfg.hidden_channels,
                cfg.candidate,
                &mut rng,
            )
            .map_err(|e| Error::Config(format!("layer {l}: {e}")))?;
            let predict = ConvParams {
                kernel: init_kernel(cfg.input_channels, cfg.hidden_channels, 1, &mut rng),
                bias: init_bias(cfg.input_channels, 0.0),
            };
            let bottom_up = above.map(|a| ConvParams {
                kernel: init_kernel(a.input_channels, 2 * cfg.input_channels, 3, &mut rng),
                bias: init_bias(a.input_channels, 0.0),
            });
            layers.push(Layer {
                config: *cfg,
                cell,
                predict,
                bottom_up,
            });
        }
        Ok(Network { layers })
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Network<Var> {
        self.map(&mut |_, t| tape.leaf(t.clone(), requires_grad))
    }

    /// Advances one time step on `frame` (shape `(n, A_0, H, W)`, values in `[0, 1]`).
    pub fn step(&self, state: &NetworkState, frame: &Tensor) -> Result<StepOutput> {
        self.step_values(state, Some(frame))
    }

    /// Advances one step using the model's own layer-0 prediction as the frame.
    pub fn step_extrapolate(&self, state: &NetworkState) -> Result<StepOutput> {
        self.step_values(state, None)
    }

    fn step_values(&self, state: &NetworkState, frame: Option<&Tensor>) -> Result<StepOutput> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let ts = state.to_tape(&mut tape, false);
        let target = match frame {
            Some(f) => Target::Frame(tape.constant(f.clone())),
            None => Target::OwnPrediction,
        };
        let out = bound.step(&mut tape, &ts, target)?;
        Ok(StepOutput {
            prediction: tape.value(out.prediction).clone(),
            layer_errors: out
                .layer_errors
                .iter()
                .map(|&v| tape.value(v).data()[0])
                .collect(),
            state: NetworkState::from_tape(&tape, &out.state, &out.predictions),
        })
    }
}

impl<P> Network<P> {
    pub fn configs(&self) -> Vec<LayerConfig> {
        self.layers.iter().map(|l| l.config).collect()
    }

    pub fn frame_channels(&self) -> usize {
        self.layers[0].config.input_channels
    }

    pub fn map<Q>(&self, f: &mut dyn FnMut(&str, &P) -> Q) -> Network<Q> {
        Network {
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(l, layer)| {
                    let prefix = format!("layer{l}.");
                    Layer {
                        config: layer.config,
                        cell: layer.cell.map(&mut |name, p| f(&format!("{prefix}cell.{name}"), p)),
                        predict: layer.predict.map(&format!("{prefix}predict."), f),
                        bottom_up: layer
                            .bottom_up
                            .as_ref()
                            .map(|b| b.map(&format!("{prefix}bottom_up."), f)),
                    }
                })
                .collect(),
        }
    }

    /// Per-layer cell breakdown.
    pub fn cell_param_counts(&self) -> Vec<ParamCount> {
        self.layers.iter().map(|l| l.cell.param_count()).collect()
    }

    /// Every learnable scalar in the network, cells and convolutions included.
    pub fn total_params(&self) -> usize
    where
        P: HasLen,
    {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }
}

/// Element count of a parameter handle that owns its values.
pub trait HasLen {
    fn len(&self) -> usize;
}

impl HasLen for Tensor {
    fn len(&self) -> usize {
        Tensor::len(self)
    }
}

impl<P> Parameters<P> for Network<P> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a P)>) {
        for (l, layer) in self.layers.iter().enumerate() {
            let p = format!("{prefix}layer{l}.");
            layer.cell.visit(&format!("{p}cell."), out);
            out.push((format!("{p}predict.kernel"), &layer.predict.kernel));
            out.push((format!("{p}predict.bias"), &layer.predict.bias));
            if let Some(b) = &layer.bottom_up {
                out.push((format!("{p}bottom_up.kernel"), &b.kernel));
                out.push((format!("{p}bottom_up.bias"), &b.bias));
            }
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut P)>) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let p = format!("{prefix}layer{l}.");
            layer.cell.visit_mut(&format!("{p}cell."), out);
            out.push((format!("{p}predict.kernel"), &mut layer.predict.kernel));
            out.push((format!("{p}predict.bias"), &mut layer.predict.bias));
            if let Some(b) = &mut layer.bottom_up {
                out.push((format!("{p}bottom_up.kernel"), &mut b.kernel));
                out.push((format!("{p}bottom_up.bias"), &mut b.bias));
            }
        }
    }
}

/// What layer 0 is compared against in a step.
#[derive(Clone, Copy, Debug)]
pub enum Target {
    Frame(Var),
    /// Treat the prediction itself as the observed frame (extrapolation).
    OwnPrediction,
}

#[derive(Clone, Debug)]
pub struct TapeLayerState {
    pub h: Var,
    pub c: Var,
    pub error: Var,
}

#[derive(Clone, Debug)]
pub struct TapeState {
    pub layers: Vec<TapeLayerState>,
}

#[derive(Clone, Debug)]
pub struct TapeStep {
    /// Layer-0 prediction `Â_0`, clamped to `[0, 1]`.
    pub prediction: Var,
    pub state: TapeState,
    /// Prediction of every layer.
    pub predictions: Vec<Var>,
    /// Mean absolute error `sum(E_l) / |A_l|` of every layer, as scalars.
    pub layer_errors: Vec<Var>,
}

impl Network<Var> {
    pub fn step(&self, tape: &mut Tape, state: &TapeState, target: Target) -> Result<TapeStep> {
        let depth = self.layers.len();
        if state.layers.is_empty() {
            return Err(Error::UninitializedState);
        }
        if state.layers.len() != depth {
            return Err(Error::shape(format!(
                "state has {} layers, network has {depth}",
                state.layers.len()
            )));
        }
        if let Target::Frame(f) = target {
            let fs = tape.shape(f);
            let es = tape.shape(state.layers[0].error);
            if fs.c != self.layers[0].config.input_channels || (fs.n, fs.h, fs.w) != (es.n, es.h, es.w)
            {
                return Err(Error::shape(format!(
                    "frame {fs} does not match network input ({}, {}, {}, {})",
                    es.n, self.layers[0].config.input_channels, es.h, es.w
                )));
            }
        }

        // Top-down recurrent update.
        let mut new_states: Vec<Option<TapeLayerState>> = vec![None; depth];
        for l in (0..depth).rev() {
            let prev = &state.layers[l];
            let x = match &new_states.get(l + 1).and_then(|s| s.as_ref()) {
                None => prev.error,
                Some(above) => {
                    let es = tape.shape(prev.error);
                    let up = tape.upsample_2x(above.h);
                    let up = tape.crop(up, es.h, es.w)?;
                    tape.concat_channels(&[prev.error, up])?
                }
            };
            let out = self.layers[l].cell.step(tape, x, prev.h, prev.c)?;
            new_states[l] = Some(TapeLayerState {
                h: out.h,
                c: out.c,
                error: prev.error,
            });
        }
        let mut new_states: Vec<TapeLayerState> = new_states.into_iter().map(Option::unwrap).collect();

        // Predictions, errors and bottom-up targets.
        let mut predictions = Vec::with_capacity(depth);
        let mut layer_errors = Vec::with_capacity(depth);
        let mut target_a = match target {
            Target::Frame(f) => Some(f),
            Target::OwnPrediction => None,
        };
        for l in 0..depth {
            let layer = &self.layers[l];
            let mut pred = tape.conv2d(new_states[l].h, layer.predict.kernel, Some(layer.predict.bias))?;
            if l == 0 {
                pred = tape.clamp(pred, 0.0, 1.0);
            }
            let a = target_a.unwrap_or(pred);
            let pos = tape.sub(a, pred)?;
            let pos = tape.relu(pos);
            let neg = tape.sub(pred, a)?;
            let neg = tape.relu(neg);
            let e = tape.concat_channels(&[pos, neg])?;
            let total = tape.sum(e);
            let mae = tape.scale(total, 1.0 / tape.shape(a).len() as f64);
            predictions.push(pred);
            layer_errors.push(mae);
            new_states[l].error = e;
            if let Some(bu) = &layer.bottom_up {
                let up = tape.conv2d(e, bu.kernel, Some(bu.bias))?;
                target_a = Some(tape.max_pool_2x2(up));
            }
        }

        Ok(TapeStep {
            prediction: predictions[0],
            state: TapeState { layers: new_states },
            predictions,
            layer_errors,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerState {
    pub cell: CellState,
    pub error: Tensor,
    /// Prediction made by the latest step.
    pub prediction: Option<Tensor>,
}

/// Recurrent state of every layer.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct NetworkState {
    pub layers: Vec<LayerState>,
}

impl NetworkState {
    /// Zero state for a batch of `n` frames of size `height x width`.
    pub fn zeros<P>(net: &Network<P>, n: usize, height: usize, width: usize) -> Self {
        let sizes = layer_sizes(net.layers.len(), height, width);
        NetworkState {
            layers: net
                .layers
                .iter()
                .zip(sizes)
                .map(|(layer, (h, w))| LayerState {
                    cell: CellState::zeros(n, layer.cell.hidden_channels(), h, w),
                    error: Tensor::zeros(Shape::new(n, 2 * layer.config.input_channels, h, w)),
                    prediction: None,
                })
                .collect(),
        }
    }

    pub fn to_tape(&self, tape: &mut Tape, requires_grad: bool) -> TapeState {
        TapeState {
            layers: self
                .layers
                .iter()
                .map(|l| TapeLayerState {
                    h: tape.leaf(l.cell.h.clone(), requires_grad),
                    c: tape.leaf(l.cell.c.clone(), requires_grad),
                    error: tape.leaf(l.error.clone(), requires_grad),
                })
                .collect(),
        }
    }

    pub fn from_tape(tape: &Tape, state: &TapeState, predictions: &[Var]) -> Self {
        NetworkState {
            layers: state
                .layers
                .iter()
                .enumerate()
                .map(|(l, s)| LayerState {
                    cell: CellState {
                        h: tape.value(s.h).clone(),
                        c: tape.value(s.c).clone(),
                    },
                    error: tape.value(s.error).clone(),
                    prediction: predictions.get(l).map(|&p| tape.value(p).clone()),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub prediction: Tensor,
    pub state: NetworkState,
    pub layer_errors: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Rollout {
    /// `frames.len() - 1 + extrapolate` predictions; prediction `k` targets frame `k + 1`.
    pub predictions: FrameSequence,
    /// Number of leading predictions that have a ground-truth frame.
    pub scored: usize,
    /// Per-layer errors of every executed step.
    pub per_step_errors: Vec<Vec<f64>>,
}

/// Runs the network over `frames`, then continues `extrapolate` steps on its own output.
pub fn rollout(net: &Network, frames: &FrameSequence, extrapolate: usize) -> Result<Rollout> {
    let first = frames
        .frames()
        .first()
        .ok_or_else(|| Error::Contract("rollout needs at least one frame".into()))?;
    let s = first.shape();
    let mut state = NetworkState::zeros(net, s.n, s.h, s.w);
    let mut predictions = Vec::with_capacity(frames.len() - 1 + extrapolate);
    let mut per_step_errors = Vec::with_capacity(frames.len() + extrapolate);
    for (t, frame) in frames.frames().iter().enumerate() {
        let out = net.step(&state, frame)?;
        if t > 0 {
            predictions.push(out.prediction);
        }
        per_step_errors.push(out.layer_errors);
        state = out.state;
    }
    for _ in 0..extrapolate {
        let out = net.step_extrapolate(&state)?;
        predictions.push(out.prediction);
        per_step_errors.push(out.layer_errors);
        state = out.state;
    }
    let scored = frames.len() - 1;
    let predictions = FrameSequence::new(predictions, format!("{}:predicted", frames.source_id))?;
    Ok(Rollout {
        predictions,
        scored,
        per_step_errors,
    })
}
