//! The `ivp` command line: generate, train, eval, compare and params.
//!
//! Exit codes are 0 on success, 2 for usage or data errors and 3 for numeric
//! failures such as diverged training.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::cells::{CandidateActivation, CellType, ParamCount};
use crate::datasets::{
    generate, load_sequence, save_sequence_as, windows, Dtype, FrameSequence,
    SyntheticSceneSpec,
};
use crate::error::{Error, Result};
use crate::metrics::{baseline_copy_last, evaluate_predictor, EvalReport, Metric};
use crate::stack::{default_plan, rollout, Network};
use crate::tensor::Tensor;
use crate::training::{
    load_checkpoint, save_checkpoint, worker_threads, write_loss_csv, Checkpoint, LossMode, TrainConfig,
    Trainer,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "ivp", version, about = "Next-frame prediction with convolutional and Inception-style LSTM cells")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic bouncing-shapes video to an IVSQ file.
    Generate(GenerateArgs),
    /// Train a predictive network and write a checkpoint plus a loss CSV.
    Train(TrainArgs),
    /// Score a checkpoint against the copy-last-frame baseline.
    Eval(EvalArgs),
    /// Train and score conv, iv1 and iv2 under one budget.
    Compare(CompareArgs),
    /// Print parameter counts for a network plan.
    Params(ParamsArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub frames: usize,
    /// Canvas size as HxW.
    #[arg(long, default_value = "16x16", value_parser = parse_size)]
    pub size: (usize, usize),
    #[arg(long, default_value_t = 1)]
    pub shapes: usize,
    /// Side length of every shape in pixels.
    #[arg(long, default_value_t = 4)]
    pub shape_size: usize,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub channels: u8,
    /// Sample type stored in the file: f32 or f64.
    #[arg(long, default_value = "f32", value_parser = parse_dtype)]
    pub dtype: Dtype,
}

/// Training options shared by `train` and `compare`; unset values come from
/// `--config`, then from the defaults.
#[derive(Args, Debug, Default, Clone)]
pub struct TrainOptions {
    /// key = value file; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Training window length T.
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub window_stride: Option<usize>,
    /// pixel_mse or layer_weighted_error.
    #[arg(long)]
    pub loss_mode: Option<String>,
    /// Comma-separated per-layer weights for layer_weighted_error.
    #[arg(long)]
    pub layer_weights: Option<String>,
    /// Print the loss every N steps to stderr (0 disables).
    #[arg(long)]
    pub log_every: Option<u64>,
    /// Candidate-gate nonlinearity of the Inception cells: tanh or hard_sigmoid.
    #[arg(long)]
    pub candidate: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub cell: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss trace CSV (defaults to the checkpoint path with a .loss.csv extension).
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    /// Continue from this checkpoint with its stored settings; only --steps (the total step count) applies.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub opts: TrainOptions,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub seq_len: usize,
    #[arg(long)]
    pub report: PathBuf,
    /// Write PPM frames (and an IVSQ of predictions) per test sequence.
    #[arg(long)]
    pub dump_frames: Option<PathBuf>,
    /// Model name for the report (defaults to the cell type).
    #[arg(long)]
    pub model: Option<String>,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// Held-out sequences for scoring (defaults to the training data).
    #[arg(long, num_args = 1..)]
    pub test: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Evaluation sequence length.
    #[arg(long, default_value_t = 10)]
    pub eval_len: usize,
    #[command(flatten)]
    pub opts: TrainOptions,
}

#[derive(Args, Debug)]
pub struct ParamsArgs {
    #[arg(long, default_value = "iv1")]
    pub cell: String,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad dimension {v:?} in {s:?}"));
    Ok((parse(h)?, parse(w)?))
}

fn parse_dtype(s: &str) -> std::result::Result<Dtype, String> {
    match s {
        "f32" => Ok(Dtype::F32),
        "f64" => Ok(Dtype::F64),
        _ => Err(format!("expected f32 or f64, got {s:?}")),
    }
}

const CONFIG_KEYS: &[&str] = &[
    "cell",
    "layers",
    "steps",
    "seed",
    "learning_rate",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "batch",
    "seq_len",
    "window_stride",
    "loss_mode",
    "layer_weights",
    "log_every",
    "candidate",
];

/// Parses `key = value` lines; `#` starts a comment. Unknown or repeated keys are errors.
pub fn parse_config(text: &str) -> Result<HashMap<String, String>> {
    let mut out = HashMap::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("config line {}: expected key = value", k + 1)))?;
        let key = key.trim().replace('-', "_");
        if !CONFIG_KEYS.contains(&key.as_str()) {
            return Err(Error::Config(format!("config line {}: unknown key {key:?}", k + 1)));
        }
        if out.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(Error::Config(format!("config line {}: duplicate key {key:?}", k + 1)));
        }
    }
    Ok(out)
}

/// Fully resolved training options of one `train` or `compare` run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub cell: CellType,
    pub layers: usize,
    pub candidate: CandidateActivation,
    pub train: TrainConfig,
    pub log_every: u64,
}

impl RunConfig {
    pub const DEFAULT_LAYERS: usize = 2;
    pub const DEFAULT_LOG_EVERY: u64 = 100;

    /// Flags win over the config file, which wins over the defaults.
    pub fn resolve(cell_flag: Option<&str>, opts: &TrainOptions) -> Result<Self> {
        let file = match &opts.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                parse_config(&text)?
            }
            None => HashMap::new(),
        };
        fn pick<T: std::str::FromStr>(
            flag: Option<T>,
            file: &HashMap<String, String>,
            key: &str,
            default: T,
        ) -> Result<T> {
            if let Some(v) = flag {
                return Ok(v);
            }
            match file.get(key) {
                Some(s) => s
                    .parse()
                    .map_err(|_| Error::Config(format!("config key {key}: cannot parse {s:?}"))),
                None => Ok(default),
            }
        }
        let d = TrainConfig::default();
        let cell = match cell_flag.map(str::to_string).or_else(|| file.get("cell").cloned()) {
            Some(c) => c.parse()?,
            None => CellType::Conv,
        };
        let layers = pick(opts.layers, &file, "layers", Self::DEFAULT_LAYERS)?;
        if !(2..=4).contains(&layers) {
            return Err(Error::Config(format!("layers must be 2, 3 or 4, got {layers}")));
        }
        let candidate = match opts.candidate.as_deref().or(file.get("candidate").map(String::as_str)) {
            Some(s) => s.parse()?,
            None => CandidateActivation::default(),
        };
        let loss_mode: LossMode = match opts.loss_mode.as_deref().or(file.get("loss_mode").map(String::as_str)) {
            Some(s) => s.parse()?,
            None => d.loss_mode,
        };
        let layer_loss_weights = match opts.layer_weights.as_deref().or(file.get("layer_weights").map(String::as_str)) {
            Some(s) => s
                .split(',')
                .map(|w| {
                    w.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad layer weight {w:?}")))
                })
                .collect::<Result<Vec<_>>>()?,
            None => d.layer_loss_weights.clone(),
        };
        let train = TrainConfig {
            learning_rate: pick(opts.learning_rate, &file, "learning_rate", d.learning_rate)?,
            adam_beta1: pick(None, &file, "adam_beta1", d.adam_beta1)?,
            adam_beta2: pick(None, &file, "adam_beta2", d.adam_beta2)?,
            adam_eps: pick(None, &file, "adam_eps", d.adam_eps)?,
            steps: pick(opts.steps, &file, "steps", d.steps)?,
            batch: pick(opts.batch, &file, "batch", d.batch)?,
            sequence_length: pick(opts.seq_len, &file, "seq_len", d.sequence_length)?,
            window_stride: pick(opts.window_stride, &file, "window_stride", d.window_stride)?,
            seed: pick(opts.seed, &file, "seed", d.seed)?,
            loss_mode,
            layer_loss_weights,
        };
        train.validate()?;
        Ok(RunConfig {
            cell,
            layers,
            candidate,
            train,
            log_every: pick(opts.log_every, &file, "log_every", Self::DEFAULT_LOG_EVERY)?,
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// P6 RGB image, maxval 255; single-channel frames are written as gray.
pub fn write_ppm(frame: &Tensor, path: &Path) -> Result<()> {
    let s = frame.shape();
    let mut bytes = format!("P6\n{} {}\n255\n", s.w, s.h).into_bytes();
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                let v = frame.at(0, c.min(s.c - 1), y, x);
                bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<FrameSequence>> {
    paths.iter().map(load_sequence).collect()
}

fn check_channels(net: &Network, data: &[FrameSequence]) -> Result<()> {
    for seq in data {
        if let Some(s) = seq.frame_shape() {
            if s.c != net.frame_channels() {
                return Err(Error::shape(format!(
                    "{}: frames have {} channels, the network expects {}",
                    seq.source_id,
                    s.c,
                    net.frame_channels()
                )));
            }
        }
    }
    Ok(())
}

fn describe_params(out: &mut impl Write, net: &Network) -> std::io::Result<()> {
    writeln!(out, "layer,cell,per_gate_kernel_coefficient,kernel_elems,biases,cell_params")?;
    for (l, (layer, pc)) in net.layers.iter().zip(net.cell_param_counts()).enumerate() {
        let ParamCount {
            per_gate_kernel_elems,
            kernel_elems,
            biases,
            total,
        } = pc;
        writeln!(
            out,
            "{l},{},{per_gate_kernel_elems},{kernel_elems},{biases},{total}",
            layer.config.cell_type
        )?;
    }
    let cells: usize = net.cell_param_counts().iter().map(|p| p.total).sum();
    writeln!(out, "cell parameters: {cells}; network parameters: {}", net.total_params())
}

fn loss_csv_path(out: &Path, explicit: Option<&PathBuf>) -> PathBuf {
    explicit.cloned().unwrap_or_else(|| out.with_extension("loss.csv"))
}

fn train_model(
    cfg: &RunConfig,
    data: &[FrameSequence],
    resume: Option<Checkpoint>,
    label: &str,
) -> Result<(Trainer, Vec<f64>, u64)> {
    let trainer = match resume {
        Some(mut ck) => {
            ck.config.steps = cfg.train.steps;
            Trainer::from_checkpoint(ck)?
        }
        None => {
            let mut plan = default_plan(cfg.layers, cfg.cell)?;
            for layer in &mut plan {
                layer.candidate = cfg.candidate;
            }
            let net = Network::build(&plan, cfg.train.seed)?;
            Trainer::new(net, cfg.train.clone())?
        }
    };
    let mut trainer = trainer.with_threads(worker_threads()?);
    check_channels(&trainer.net, data)?;
    let first_step = trainer.step_count() + 1;
    let every = cfg.log_every;
    let trace = trainer.fit_with(data, |step, loss| {
        if every > 0 && step % every == 0 {
            eprintln!("[{label}] step {step} loss {loss:.6e}");
        }
    })?;
    Ok((trainer, trace, first_step))
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let mut spec = SyntheticSceneSpec::random(a.seed, a.frames, a.size, a.shapes, a.shape_size)?;
    spec.channels = a.channels as usize;
    let seq = generate(&spec)?;
    save_sequence_as(&seq, &a.out, a.dtype)?;
    let bytes = fs::read(&a.out).map_err(|e| Error::io(&a.out, e))?;
    println!(
        "wrote {} frames ({}x{}x{}) to {}",
        seq.len(),
        spec.channels,
        spec.height,
        spec.width,
        a.out.display()
    );
    println!("sha256 {}", sha256_hex(&bytes));
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = RunConfig::resolve(a.cell.as_deref(), &a.opts)?;
    let data = load_all(&a.data)?;
    let resume = a.resume.as_ref().map(load_checkpoint).transpose()?;
    let (trainer, trace, first_step) = train_model(&cfg, &data, resume, &cfg.cell.to_string())?;
    save_checkpoint(&trainer.checkpoint(), &a.out)?;
    let csv_path = loss_csv_path(&a.out, a.loss_csv.as_ref());
    write_loss_csv(&csv_path, first_step, &trace)?;
    let mut out = std::io::stdout().lock();
    let io = |e| Error::io("<stdout>", e);
    match trace.last() {
        Some(l) => writeln!(out, "final loss {l:.6e} after {} steps", trainer.step_count()).map_err(io)?,
        None => writeln!(out, "no training steps run; saved the model at step {}", trainer.step_count()).map_err(io)?,
    }
    writeln!(out, "checkpoint {}; loss trace {}", a.out.display(), csv_path.display()).map_err(io)?;
    describe_params(&mut out, &trainer.net).map_err(io)
}

/// Non-overlapping evaluation windows of every file, labelled by file path.
fn eval_sets(paths: &[PathBuf], t: usize) -> Result<Vec<(String, Vec<FrameSequence>)>> {
    let mut out = Vec::new();
    for p in paths {
        let seq = load_sequence(p)?;
        let ws = windows(&seq, t, t)?;
        if ws.is_empty() {
            return Err(Error::Contract(format!(
                "{} has {} frames, evaluation needs {t}",
                p.display(),
                seq.len()
            )));
        }
        out.push((p.display().to_string(), ws));
    }
    Ok(out)
}

fn report_rows(model: &str, source: &str, r: &EvalReport) -> Vec<[String; 7]> {
    r.buckets
        .iter()
        .map(|b| {
            [
                model.to_string(),
                source.to_string(),
                b.history_len.to_string(),
                b.metric.name().to_string(),
                format!("{:e}", b.mean),
                format!("{:e}", b.ci95),
                b.n.to_string(),
            ]
        })
        .collect()
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let net = ck.network;
    let model = a
        .model
        .clone()
        .unwrap_or_else(|| net.layers[0].config.cell_type.to_string());
    let sets = eval_sets(&a.data, a.seq_len)?;
    for (_, seqs) in &sets {
        check_channels(&net, seqs)?;
    }
    if let Some(dir) = &a.dump_frames {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut w = csv::Writer::from_path(&a.report)?;
    w.write_record(["model", "source_id", "history_len", "metric", "mean", "ci95", "n"])?;
    let mut seq_index = 0usize;
    for (source, seqs) in &sets {
        let report = evaluate_predictor(seqs, a.seq_len, |seq| {
            let preds = rollout(&net, seq, 0)?.predictions;
            if let Some(dir) = &a.dump_frames {
                for (k, p) in preds.frames().iter().enumerate() {
                    let t = k + 1;
                    write_ppm(p, &dir.join(format!("seq{seq_index}_t{t}_pred.ppm")))?;
                    write_ppm(&seq.frames()[t], &dir.join(format!("seq{seq_index}_t{t}_true.ppm")))?;
                }
                save_sequence_as(&preds, dir.join(format!("seq{seq_index}_pred.ivsq")), Dtype::F64)?;
            }
            seq_index += 1;
            Ok(preds.into_frames())
        })?;
        let baseline = evaluate_predictor(seqs, a.seq_len, |seq| Ok(baseline_copy_last(seq)?.into_frames()))?;
        if report.single_sample {
            eprintln!("warning: {source} yields a single test sequence; ci95 is reported as 0");
        }
        for row in report_rows(&model, source, &report)
            .into_iter()
            .chain(report_rows("baseline", source, &baseline))
        {
            w.write_record(&row)?;
        }
        println!(
            "{source}: {model} mse {:.6e} mae {:.6e} ssim {:.4} | baseline mse {:.6e} mae {:.6e} ssim {:.4}",
            report.aggregate(Metric::Mse),
            report.aggregate(Metric::Mae),
            report.aggregate(Metric::Ssim),
            baseline.aggregate(Metric::Mse),
            baseline.aggregate(Metric::Mae),
            baseline.aggregate(Metric::Ssim),
        );
    }
    w.flush().map_err(|e| Error::io(&a.report, e))?;
    Ok(())
}

fn cmd_compare(a: &CompareArgs) -> Result<()> {
    let base = RunConfig::resolve(None, &a.opts)?;
    let data = load_all(&a.data)?;
    let test_paths = if a.test.is_empty() { &a.data } else { &a.test };
    let tests: Vec<FrameSequence> = eval_sets(test_paths, a.eval_len)?
        .into_iter()
        .flat_map(|(_, s)| s)
        .collect();
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;

    let mut table = csv::Writer::from_path(a.out.join("compare.csv"))?;
    table.write_record(["model", "layers", "mae", "mse", "ssim"])?;
    let mut params = csv::Writer::from_path(a.out.join("params.csv"))?;
    params.write_record(["model", "layers", "per_gate_kernel_coefficient", "cell_params", "total_params"])?;
    let mut failure: Option<Error> = None;

    for cell in CellType::ALL {
        let cfg = RunConfig { cell, ..base.clone() };
        let result = train_model(&cfg, &data, None, cell.name()).and_then(|(trainer, trace, first)| {
            save_checkpoint(&trainer.checkpoint(), a.out.join(format!("{cell}.ivck")))?;
            write_loss_csv(a.out.join(format!("{cell}.loss.csv")), first, &trace)?;
            let report = evaluate_predictor(&tests, a.eval_len, |seq| {
                Ok(rollout(&trainer.net, seq, 0)?.predictions.into_frames())
            })?;
            report.write_csv(a.out.join(format!("{cell}.eval.csv")))?;
            Ok((trainer.net, report))
        });
        match result {
            Ok((net, report)) => {
                let [mae, mse, ssim] = Metric::ALL.map(|m| report.aggregate(m));
                table.write_record([
                    cell.name().to_string(),
                    cfg.layers.to_string(),
                    format!("{mae:e}"),
                    format!("{mse:e}"),
                    format!("{ssim:e}"),
                ])?;
                let counts = net.cell_param_counts();
                params.write_record([
                    cell.name().to_string(),
                    cfg.layers.to_string(),
                    counts[0].per_gate_kernel_elems.to_string(),
                    counts.iter().map(|p| p.total).sum::<usize>().to_string(),
                    net.total_params().to_string(),
                ])?;
                println!(
                    "{cell}: mae {mae:.6e} mse {mse:.6e} ssim {ssim:.4} (per-gate kernel coefficient {})",
                    counts[0].per_gate_kernel_elems
                );
            }
            Err(e) => {
                eprintln!("error: {cell} failed: {e}");
                table.write_record([cell.name(), &cfg.layers.to_string(), "nan", "nan", "nan"])?;
                failure.get_or_insert(e);
            }
        }
    }
    table.flush().map_err(|e| Error::io(&a.out, e))?;
    params.flush().map_err(|e| Error::io(&a.out, e))?;
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn cmd_params(a: &ParamsArgs) -> Result<()> {
    let cell: CellType = a.cell.parse()?;
    let net = Network::build(&default_plan(a.layers, cell)?, 0)?;
    let mut out = std::io::stdout().lock();
    describe_params(&mut out, &net).map_err(|e| Error::io("<stdout>", e))
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Params(a) => cmd_params(a),
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_USAGE
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
