//! Adam, the training loop and IVCK checkpoints.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cells::{CandidateActivation, CellType, Parameters};
use crate::datasets::{windows, FrameSequence};
use crate::error::{Error, Result};
use crate::stack::{LayerConfig, Network, NetworkState, Target};
use crate::tensor::{ops, Shape, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LossMode {
    /// Mean squared error between the layer-0 prediction and the frame.
    #[default]
    PixelMse,
    /// Weighted sum of per-layer mean errors.
    LayerWeightedError,
}

impl LossMode {
    pub fn name(self) -> &'static str {
        match self {
            LossMode::PixelMse => "pixel_mse",
            LossMode::LayerWeightedError => "layer_weighted_error",
        }
    }

    pub fn code(self) -> u32 {
        match self {
            LossMode::PixelMse => 0,
            LossMode::LayerWeightedError => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(LossMode::PixelMse),
            1 => Some(LossMode::LayerWeightedError),
            _ => None,
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixel_mse" => Ok(LossMode::PixelMse),
            "layer_weighted_error" => Ok(LossMode::LayerWeightedError),
            other => Err(Error::Config(format!(
                "unknown loss mode {other:?} (expected pixel_mse or layer_weighted_error)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub steps: u64,
    /// Windows per optimizer step.
    pub batch: usize,
    pub sequence_length: usize,
    /// Offset between consecutive training windows cut from one sequence.
    pub window_stride: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    /// Per-layer weights for `LayerWeightedError`; missing layers weigh 0.
    pub layer_loss_weights: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            steps: 2000,
            batch: 1,
            sequence_length: 10,
            window_stride: 1,
            seed: 0,
            loss_mode: LossMode::PixelMse,
            layer_loss_weights: vec![1.0, 0.1, 0.1, 0.1],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be > 0, got {}", self.adam_eps));
        }
        if self.batch == 0 {
            return bad("batch must be >= 1".into());
        }
        if self.sequence_length < 2 {
            return bad(format!("sequence_length must be >= 2, got {}", self.sequence_length));
        }
        if self.window_stride == 0 {
            return bad("window_stride must be >= 1".into());
        }
        if self.layer_loss_weights.iter().any(|w| !(*w >= 0.0)) {
            return bad("layer_loss_weights must be nonnegative".into());
        }
        Ok(())
    }
}

/// Adam with bias-corrected moments, one moment pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64, eps: f64, params: &[&Tensor]) -> Self {
        Adam {
            learning_rate,
            beta1,
            beta2,
            eps,
            t: 0,
            m: params.iter().map(|p| p.zeros_like()).collect(),
            v: params.iter().map(|p| p.zeros_like()).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::TensorMismatch(format!(
                "optimizer holds {} moments, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, p) in params.iter_mut().enumerate() {
            let g = grads[k].data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Worker threads for per-sequence gradients: `IVP_THREADS` if set, else the core count.
pub fn worker_threads() -> Result<usize> {
    match std::env::var("IVP_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("IVP_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Loss of one window: the mean over `t = 1..T-1` of the per-step objective.
fn window_loss(
    net: &Network,
    cfg: &TrainConfig,
    window: &FrameSequence,
    want_grads: bool,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, want_grads);
    let shape = window
        .frame_shape()
        .ok_or_else(|| Error::Contract("empty training window".into()))?;
    let zero = NetworkState::zeros(net, 1, shape.h, shape.w);
    let mut state = zero.to_tape(&mut tape, false);
    let mut terms = Vec::with_capacity(window.len());
    for (t, frame) in window.frames().iter().enumerate() {
        let f = tape.constant(frame.clone());
        let out = bound.step(&mut tape, &state, Target::Frame(f))?;
        if t > 0 {
            let term = match cfg.loss_mode {
                LossMode::PixelMse => tape.mse(out.prediction, f)?,
                LossMode::LayerWeightedError => {
                    let mut acc = tape.constant(Tensor::scalar(0.0));
                    for (l, &e) in out.layer_errors.iter().enumerate() {
                        let w = cfg.layer_loss_weights.get(l).copied().unwrap_or(0.0);
                        if w != 0.0 {
                            let we = tape.scale(e, w);
                            acc = tape.add(acc, we)?;
                        }
                    }
                    acc
                }
            };
            terms.push(term);
        }
        state = out.state;
    }
    let mut total = terms[0];
    for &term in &terms[1..] {
        total = tape.add(total, term)?;
    }
    let loss = tape.scale(total, 1.0 / terms.len() as f64);
    let value = tape.value(loss).item()?;
    if !want_grads {
        return Ok((value, Vec::new()));
    }
    tape.backward(loss)?;
    let grads = bound
        .named_params()
        .into_iter()
        .map(|(_, &v)| tape.grad(v).cloned().unwrap_or_else(|| tape.value(v).zeros_like()))
        .collect();
    Ok((value, grads))
}

/// Serializable ChaCha8 state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub config: TrainConfig,
    pub adam: Adam,
    pub rng: RngState,
}

impl Checkpoint {
    /// Optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.adam.t
    }
}

pub struct Trainer {
    pub net: Network,
    pub config: TrainConfig,
    pub adam: Adam,
    rng: ChaCha8Rng,
    threads: usize,
}

impl Trainer {
    pub fn new(net: Network, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params: Vec<&Tensor> = net.named_params().into_iter().map(|(_, p)| p).collect();
        let adam = Adam::new(
            config.learning_rate,
            config.adam_beta1,
            config.adam_beta2,
            config.adam_eps,
            &params,
        );
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Trainer {
            net,
            config,
            adam,
            rng,
            threads: 1,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.config.validate()?;
        Ok(Trainer {
            net: ck.network,
            config: ck.config,
            adam: ck.adam,
            rng: ck.rng.restore(),
            threads: 1,
        })
    }

    /// Runs per-window passes on up to `threads` workers; results are reduced
    /// in window order, so the thread count never changes the numbers.
    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = threads.max(1);
        self
    }

    pub fn step_count(&self) -> u64 {
        self.adam.t
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            network: self.net.clone(),
            config: self.config.clone(),
            adam: self.adam.clone(),
            rng: RngState::capture(&self.rng),
        }
    }

    /// Training windows cut from `data` according to the configuration.
    pub fn windows(&self, data: &[FrameSequence]) -> Result<Vec<FrameSequence>> {
        let c = self.net.frame_channels();
        let mut out = Vec::new();
        for seq in data {
            if let Some(s) = seq.frame_shape() {
                if s.c != c {
                    return Err(Error::shape(format!(
                        "{}: frames have {} channels, network expects {c}",
                        seq.source_id, s.c
                    )));
                }
            }
            out.extend(windows(seq, self.config.sequence_length, self.config.window_stride)?);
        }
        if out.is_empty() {
            return Err(Error::Contract(format!(
                "no training window of length {} fits the data",
                self.config.sequence_length
            )));
        }
        Ok(out)
    }

    /// Mean loss and gradients (named-parameter order) over `batch` windows.
    pub fn loss_and_grads(&self, batch: &[&FrameSequence]) -> Result<(f64, Vec<Tensor>)> {
        let results = self.per_window(batch, true)?;
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let mut grads: Vec<Tensor> = Vec::new();
        for (l, g) in results {
            loss += l;
            if grads.is_empty() {
                grads = g;
            } else {
                for (acc, gi) in grads.iter_mut().zip(&g) {
                    for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                        *a += b;
                    }
                }
            }
        }
        for g in &mut grads {
            *g = ops::scale(g, scale);
        }
        Ok((loss * scale, grads))
    }

    /// Mean loss over `batch` without building gradients.
    pub fn loss(&self, batch: &[&FrameSequence]) -> Result<f64> {
        let results = self.per_window(batch, false)?;
        Ok(results.iter().map(|(l, _)| l).sum::<f64>() / batch.len() as f64)
    }

    fn per_window(&self, batch: &[&FrameSequence], grads: bool) -> Result<Vec<(f64, Vec<Tensor>)>> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        if self.threads <= 1 || batch.len() == 1 {
            return batch
                .iter()
                .map(|w| window_loss(&self.net, &self.config, w, grads))
                .collect();
        }
        let chunk = batch.len().div_ceil(self.threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = batch
                .chunks(chunk)
                .map(|part| {
                    s.spawn(move || {
                        part.iter()
                            .map(|w| window_loss(&self.net, &self.config, w, grads))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            let mut out = Vec::with_capacity(batch.len());
            for h in handles {
                out.extend(h.join().expect("training worker panicked")?);
            }
            Ok(out)
        })
    }

    /// Draws a batch of windows, takes one Adam step and returns the pre-update loss.
    pub fn train_step(&mut self, windows: &[FrameSequence]) -> Result<f64> {
        let picks: Vec<&FrameSequence> = (0..self.config.batch)
            .map(|_| &windows[self.rng.gen_range(0..windows.len())])
            .collect();
        let (loss, grads) = self.loss_and_grads(&picks)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step: self.adam.t + 1,
                loss,
            });
        }
        let mut params: Vec<&mut Tensor> = self
            .net
            .named_params_mut()
            .into_iter()
            .map(|(_, p)| p)
            .collect();
        self.adam.update(&mut params, &grads)?;
        Ok(loss)
    }

    /// Trains until `config.steps` optimizer steps have been taken in total.
    pub fn fit(&mut self, data: &[FrameSequence]) -> Result<Vec<f64>> {
        self.fit_with(data, |_, _| {})
    }

    /// As [`Trainer::fit`], calling `progress(step, loss)` after every step.
    pub fn fit_with(
        &mut self,
        data: &[FrameSequence],
        mut progress: impl FnMut(u64, f64),
    ) -> Result<Vec<f64>> {
        let remaining = self.config.steps.saturating_sub(self.adam.t);
        if remaining == 0 {
            return Ok(Vec::new());
        }
        let windows = self.windows(data)?;
        let mut trace = Vec::with_capacity(remaining as usize);
        for _ in 0..remaining {
            let loss = self.train_step(&windows)?;
            trace.push(loss);
            progress(self.adam.t, loss);
        }
        Ok(trace)
    }
}

/// Trains `net` on `data` for `cfg.steps` steps; returns the trained network and the loss trace.
pub fn train(net: Network, data: &[FrameSequence], cfg: &TrainConfig) -> Result<(Network, Vec<f64>)> {
    let mut trainer = Trainer::new(net, cfg.clone())?.with_threads(worker_threads()?);
    let trace = trainer.fit(data)?;
    Ok((trainer.net, trace))
}

/// Writes `step,loss` rows; `first_step` is the step number of `trace[0]`.
pub fn write_loss_csv(path: impl AsRef<Path>, first_step: u64, trace: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss"])?;
    for (k, loss) in trace.iter().enumerate() {
        w.write_record([(first_step + k as u64).to_string(), format!("{loss:e}")])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_loss_csv(path: impl AsRef<Path>) -> Result<Vec<(u64, f64)>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let parse_err = || Error::Config(format!("bad loss CSV row {:?}", row));
        let step = row.get(0).and_then(|s| s.parse().ok()).ok_or_else(parse_err)?;
        let loss = row.get(1).and_then(|s| s.parse().ok()).ok_or_else(parse_err)?;
        out.push((step, loss));
    }
    Ok(out)
}

pub const IVCK_MAGIC: &[u8; 4] = b"IVCK";
pub const IVCK_VERSION: u32 = 1;

const MOMENT_M: &str = "adam.m.";
const MOMENT_V: &str = "adam.v.";

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    for d in t.shape().dims() {
        put_u32(out, d as u32);
    }
    for &v in t.data() {
        put_f64(out, v);
    }
}

/// Layout: magic, version, layer descriptors, training configuration,
/// optimizer scalars, RNG state, then a table of named tensors holding the
/// parameters followed by their first and second Adam moments.
pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(IVCK_MAGIC);
    put_u32(&mut out, IVCK_VERSION);

    put_u32(&mut out, ck.network.layers.len() as u32);
    for l in &ck.network.layers {
        let c = l.config;
        for v in [c.input_channels as u32, c.hidden_channels as u32, c.cell_type.code(), c.candidate.code()] {
            put_u32(&mut out, v);
        }
    }

    let cfg = &ck.config;
    put_u64(&mut out, cfg.steps);
    put_u32(&mut out, cfg.batch as u32);
    put_u32(&mut out, cfg.sequence_length as u32);
    put_u32(&mut out, cfg.window_stride as u32);
    put_u64(&mut out, cfg.seed);
    put_u32(&mut out, cfg.loss_mode.code());
    put_u32(&mut out, cfg.layer_loss_weights.len() as u32);
    for &w in &cfg.layer_loss_weights {
        put_f64(&mut out, w);
    }

    let a = &ck.adam;
    for v in [a.learning_rate, a.beta1, a.beta2, a.eps] {
        put_f64(&mut out, v);
    }
    put_u64(&mut out, a.t);

    out.extend_from_slice(&ck.rng.seed);
    put_u64(&mut out, ck.rng.stream);
    out.extend_from_slice(&ck.rng.word_pos.to_le_bytes());

    let params = ck.network.named_params();
    put_u32(&mut out, 3 * params.len() as u32);
    for (name, p) in &params {
        put_tensor(&mut out, name, p);
    }
    for (prefix, moments) in [(MOMENT_M, &a.m), (MOMENT_V, &a.v)] {
        for ((name, _), t) in params.iter().zip(moments) {
            put_tensor(&mut out, &format!("{prefix}{name}"), t);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.pos as u64, format!("truncated {what}")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn fail<T>(&self, at: usize, msg: impl Into<String>) -> Result<T> {
        Err(Error::format(at as u64, msg))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != IVCK_MAGIC {
        return r.fail(0, "bad magic, expected \"IVCK\"");
    }
    let version = r.u32("version")?;
    if version != IVCK_VERSION {
        return Err(Error::Version {
            found: version,
            expected: IVCK_VERSION,
        });
    }

    let at = r.pos;
    let layers = r.u32("layer count")? as usize;
    if !(1..=crate::stack::MAX_LAYERS).contains(&layers) {
        return r.fail(at, format!("layer count {layers} out of range"));
    }
    let mut configs = Vec::with_capacity(layers);
    for _ in 0..layers {
        let at = r.pos;
        let input = r.u32("layer descriptor")? as usize;
        let hidden = r.u32("layer descriptor")? as usize;
        let cell = CellType::from_code(r.u32("layer descriptor")?);
        let candidate = CandidateActivation::from_code(r.u32("layer descriptor")?);
        match (cell, candidate) {
            (Some(cell_type), Some(candidate)) => configs.push(LayerConfig {
                input_channels: input,
                hidden_channels: hidden,
                cell_type,
                candidate,
            }),
            _ => return r.fail(at, "unknown cell type or candidate activation code"),
        }
    }
    let at_layers = r.pos;
    let mut network = Network::build(&configs, 0)
        .map_err(|e| Error::format(at_layers as u64, format!("invalid architecture: {e}")))?;

    let steps = r.u64("config")?;
    let batch = r.u32("config")? as usize;
    let sequence_length = r.u32("config")? as usize;
    let window_stride = r.u32("config")? as usize;
    let seed = r.u64("config")?;
    let at = r.pos;
    let loss_mode = LossMode::from_code(r.u32("config")?)
        .ok_or_else(|| Error::format(at as u64, "unknown loss mode code"))?;
    let at = r.pos;
    let nweights = r.u32("config")? as usize;
    if nweights > 64 {
        return r.fail(at, format!("implausible layer weight count {nweights}"));
    }
    let layer_loss_weights = (0..nweights).map(|_| r.f64("config")).collect::<Result<Vec<_>>>()?;

    let learning_rate = r.f64("optimizer")?;
    let beta1 = r.f64("optimizer")?;
    let beta2 = r.f64("optimizer")?;
    let eps = r.f64("optimizer")?;
    let t = r.u64("optimizer")?;
    let config = TrainConfig {
        learning_rate,
        adam_beta1: beta1,
        adam_beta2: beta2,
        adam_eps: eps,
        steps,
        batch,
        sequence_length,
        window_stride,
        seed,
        loss_mode,
        layer_loss_weights,
    };

    let rng = RngState {
        seed: r.take(32, "rng state")?.try_into().unwrap(),
        stream: r.u64("rng state")?,
        word_pos: u128::from_le_bytes(r.take(16, "rng state")?.try_into().unwrap()),
    };

    let expected: Vec<(String, Shape)> = network
        .named_params()
        .into_iter()
        .map(|(n, p)| (n, p.shape()))
        .collect();
    let count = r.u32("tensor count")? as usize;
    if count != 3 * expected.len() {
        return Err(Error::TensorMismatch(format!(
            "checkpoint holds {count} tensors, architecture needs {}",
            3 * expected.len()
        )));
    }
    let mut table = std::collections::HashMap::with_capacity(count);
    for _ in 0..count {
        let at = r.pos;
        let len = r.u32("tensor name")? as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| Error::format(at as u64 + 4, "tensor name is not UTF-8"))?
            .to_owned();
        let at_dims = r.pos;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32("tensor dims")? as usize;
        }
        let shape = Shape::from(dims);
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| Error::format(at_dims as u64, "tensor dimensions overflow"))?;
        let at_data = r.pos;
        let raw = r.take(n * 8, &format!("tensor {name}"))?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        if let Some(k) = data.iter().position(|v| !v.is_finite()) {
            return r.fail(at_data + 8 * k, format!("non-finite value in tensor {name}"));
        }
        if table.insert(name.clone(), Tensor::from_vec(shape, data)?).is_some() {
            return r.fail(at, format!("duplicate tensor {name}"));
        }
    }
    if r.pos != bytes.len() {
        return r.fail(r.pos, "trailing bytes after tensor table");
    }

    let mut take = |name: &str, shape: Shape| -> Result<Tensor> {
        let t = table
            .remove(name)
            .ok_or_else(|| Error::TensorMismatch(format!("missing tensor {name}")))?;
        if t.shape() != shape {
            return Err(Error::TensorMismatch(format!(
                "tensor {name} has shape {}, expected {shape}",
                t.shape()
            )));
        }
        Ok(t)
    };
    let mut values = Vec::with_capacity(expected.len());
    let mut m = Vec::with_capacity(expected.len());
    let mut v = Vec::with_capacity(expected.len());
    for (name, shape) in &expected {
        values.push(take(name, *shape)?);
        m.push(take(&format!("{MOMENT_M}{name}"), *shape)?);
        v.push(take(&format!("{MOMENT_V}{name}"), *shape)?);
    }
    for ((_, p), value) in network.named_params_mut().into_iter().zip(values) {
        *p = value;
    }
    Ok(Checkpoint {
        network,
        config,
        adam: Adam {
            learning_rate,
            beta1,
            beta2,
            eps,
            t,
            m,
            v,
        },
        rng,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode_checkpoint(ck)).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
