//! Frame-level scores, the copy-last-frame baseline and history-length curves.

use std::path::Path;

use crate::datasets::FrameSequence;
use crate::error::{Error, Result};
use crate::stack::{rollout, Network};
use crate::tensor::Tensor;

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("cannot compare {} with {}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same(a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.len() as f64)
}

pub fn mae(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same(a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
    Ok(s / a.len() as f64)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Dynamic range of pixel values.
pub const SSIM_L: f64 = 1.0;

/// Normalized 1-D Gaussian of `len` taps centred on the window.
fn gaussian(len: usize) -> Vec<f64> {
    let mid = (len as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..len)
        .map(|i| {
            let d = i as f64 - mid;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Mean SSIM over all valid window positions, every channel and batch item.
///
/// Frames narrower or shorter than the window use a window shrunk to the
/// frame size, with the Gaussian weights renormalized.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same(a, b)?;
    let s = a.shape();
    let (wh, ww) = (SSIM_WINDOW.min(s.h), SSIM_WINDOW.min(s.w));
    let (gy, gx) = (gaussian(wh), gaussian(ww));
    let c1 = (SSIM_K1 * SSIM_L).powi(2);
    let c2 = (SSIM_K2 * SSIM_L).powi(2);

    let mut total = 0.0;
    let mut count = 0usize;
    for n in 0..s.n {
        for c in 0..s.c {
            for y0 in 0..=s.h - wh {
                for x0 in 0..=s.w - ww {
                    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for (dy, wy) in gy.iter().enumerate() {
                        for (dx, wx) in gx.iter().enumerate() {
                            let w = wy * wx;
                            let x = a.at(n, c, y0 + dy, x0 + dx);
                            let y = b.at(n, c, y0 + dy, x0 + dx);
                            mx += w * x;
                            my += w * y;
                            sxx += w * x * x;
                            syy += w * y * y;
                            sxy += w * x * y;
                        }
                    }
                    let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                    total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    count += 1;
                }
            }
        }
    }
    Ok(total / count as f64)
}

/// Predicts frame `t` as frame `t - 1`.
pub fn baseline_copy_last(frames: &FrameSequence) -> Result<FrameSequence> {
    if frames.len() < 2 {
        return Err(Error::Contract(format!(
            "copy-last baseline needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    FrameSequence::new(
        frames.frames()[..frames.len() - 1].to_vec(),
        format!("{}:copy-last", frames.source_id),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Metric {
    Mae,
    Mse,
    Ssim,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Mae, Metric::Mse, Metric::Ssim];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Mae => "mae",
            Metric::Mse => "mse",
            Metric::Ssim => "ssim",
        }
    }

    pub fn score(self, prediction: &Tensor, target: &Tensor) -> Result<f64> {
        match self {
            Metric::Mae => mae(prediction, target),
            Metric::Mse => mse(prediction, target),
            Metric::Ssim => ssim(prediction, target),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Mean and normal-approximation 95% half-width of one metric at one history length.
#[derive(Clone, Debug, PartialEq)]
pub struct Bucket {
    pub history_len: usize,
    pub metric: Metric,
    pub mean: f64,
    pub ci95: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// History lengths `1..T-1`, metrics in `Metric::ALL` order within each.
    pub buckets: Vec<Bucket>,
    /// Number of test sequences.
    pub n: usize,
    /// Set when only one sequence was scored, so every half-width is reported as 0.
    pub single_sample: bool,
}

impl EvalReport {
    pub fn history_lengths(&self) -> usize {
        self.buckets.iter().map(|b| b.history_len).max().unwrap_or(0)
    }

    pub fn bucket(&self, history_len: usize, metric: Metric) -> Option<&Bucket> {
        self.buckets
            .iter()
            .find(|b| b.history_len == history_len && b.metric == metric)
    }

    /// Mean of `metric` over every scored frame.
    pub fn aggregate(&self, metric: Metric) -> f64 {
        let bs: Vec<&Bucket> = self.buckets.iter().filter(|b| b.metric == metric).collect();
        bs.iter().map(|b| b.mean).sum::<f64>() / bs.len() as f64
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["history_len", "metric", "mean", "ci95", "n"])?;
        for b in &self.buckets {
            w.write_record([
                b.history_len.to_string(),
                b.metric.name().to_string(),
                format!("{:e}", b.mean),
                format!("{:e}", b.ci95),
                b.n.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn mean_ci95(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

/// Scores `predict` on the first `t` frames of every test sequence.
///
/// `predict` returns `t - 1` frames; entry `k - 1` is the prediction of frame
/// `k` made from frames `0..k`, i.e. with a history of `k` frames.
pub fn evaluate_predictor(
    test: &[FrameSequence],
    t: usize,
    mut predict: impl FnMut(&FrameSequence) -> Result<Vec<Tensor>>,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Contract("empty test set".into()));
    }
    if t < 2 {
        return Err(Error::Contract(format!("sequence length must be >= 2, got {t}")));
    }
    // scores[k][m] holds one value per sequence.
    let mut scores = vec![vec![Vec::with_capacity(test.len()); Metric::ALL.len()]; t - 1];
    for seq in test {
        if seq.len() < t {
            return Err(Error::Contract(format!(
                "{} has {} frames, evaluation needs {t}",
                seq.source_id,
                seq.len()
            )));
        }
        let head = FrameSequence::new(seq.frames()[..t].to_vec(), seq.source_id.clone())?;
        let preds = predict(&head)?;
        if preds.len() < t - 1 {
            return Err(Error::Contract(format!(
                "predictor returned {} frames, expected {}",
                preds.len(),
                t - 1
            )));
        }
        for k in 1..t {
            for (m, metric) in Metric::ALL.iter().enumerate() {
                scores[k - 1][m].push(metric.score(&preds[k - 1], &head.frames()[k])?);
            }
        }
    }
    let mut buckets = Vec::with_capacity((t - 1) * Metric::ALL.len());
    for (k, per_metric) in scores.iter().enumerate() {
        for (m, samples) in per_metric.iter().enumerate() {
            let (mean, ci95) = mean_ci95(samples);
            buckets.push(Bucket {
                history_len: k + 1,
                metric: Metric::ALL[m],
                mean,
                ci95,
                n: samples.len(),
            });
        }
    }
    Ok(EvalReport {
        buckets,
        n: test.len(),
        single_sample: test.len() == 1,
    })
}

/// History-length curve of `net` over the first `t` frames of each test sequence.
pub fn evaluate_history_curve(net: &Network, test: &[FrameSequence], t: usize) -> Result<EvalReport> {
    evaluate_predictor(test, t, |seq| Ok(rollout(net, seq, 0)?.predictions.into_frames()))
}

/// The same curve for the copy-last-frame baseline.
pub fn evaluate_baseline(test: &[FrameSequence], t: usize) -> Result<EvalReport> {
    evaluate_predictor(test, t, |seq| Ok(baseline_copy_last(seq)?.into_frames()))
}
