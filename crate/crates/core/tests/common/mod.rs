#![allow(dead_code)]

use ivp::{Shape, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Denominator floor for the relative error so that coordinates whose true
/// gradient is numerically zero compare on an absolute scale.
pub const FD_FLOOR: f64 = 1e-7;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: impl Into<Shape>, lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let shape = shape.into();
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

#[derive(Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub worst_rel: f64,
    pub failures: Vec<String>,
}

impl GradCheck {
    pub fn assert_ok(&self, what: &str) {
        assert!(
            self.failures.is_empty(),
            "{what}: {} of {} coordinates failed (worst rel {:.3e}):\n{}",
            self.failures.len(),
            self.checked,
            self.worst_rel,
            self.failures.join("\n")
        );
    }
}

/// Compares reverse-mode gradients of `f` against central finite differences
/// on `coords` random coordinates spread across all parameter tensors.
pub fn grad_check(
    params: &[Tensor],
    coords: usize,
    seed: u64,
    f: impl Fn(&mut Tape, &[Var]) -> Var,
) -> GradCheck {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| tape.grad(v).cloned().unwrap_or_else(|| tape.value(v).zeros_like()))
        .collect();

    let eval = |ps: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.constant(p.clone())).collect();
        let l = f(&mut t, &vs);
        t.value(l).item().unwrap()
    };

    let mut r = rng(seed);
    let total: usize = params.iter().map(Tensor::len).sum();
    let mut out = GradCheck {
        checked: 0,
        worst_rel: 0.0,
        failures: Vec::new(),
    };
    for _ in 0..coords {
        let mut flat = r.gen_range(0..total);
        let mut p = 0;
        while flat >= params[p].len() {
            flat -= params[p].len();
            p += 1;
        }
        let mut plus = params.to_vec();
        plus[p].data_mut()[flat] += FD_EPS;
        let mut minus = params.to_vec();
        minus[p].data_mut()[flat] -= FD_EPS;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_EPS);
        let a = analytic[p].data()[flat];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
        out.checked += 1;
        out.worst_rel = out.worst_rel.max(rel);
        if rel >= FD_REL_TOL {
            out.failures
                .push(format!("param {p}[{flat}]: analytic {a:.9e} numeric {numeric:.9e} rel {rel:.3e}"));
        }
    }
    out
}

/// Straightforward seven-loop "same" convolution used as an oracle.
pub fn naive_conv(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Tensor {
    let s = input.shape();
    let k = kernel.shape();
    let (ph, pw) = (k.h as isize / 2, k.w as isize / 2);
    Tensor::from_fn(Shape::new(s.n, k.n, s.h, s.w), |[n, o, y, x]| {
        let mut acc = bias.map_or(0.0, |b| b.data()[o]);
        for i in 0..k.c {
            for dy in 0..k.h {
                for dx in 0..k.w {
                    let sy = y as isize + dy as isize - ph;
                    let sx = x as isize + dx as isize - pw;
                    if sy >= 0 && sx >= 0 && (sy as usize) < s.h && (sx as usize) < s.w {
                        acc += input.at(n, i, sy as usize, sx as usize) * kernel.at(o, i, dy, dx);
                    }
                }
            }
        }
        acc
    })
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

pub fn hs(x: f64) -> f64 {
    (0.2 * x + 0.5).clamp(0.0, 1.0)
}

/// Scalar reference for one convolutional LSTM step: every gate
/// pre-activation is summed tap by tap, then the LSTM update is applied per pixel.
pub fn oracle_conv_lstm(
    w: &ivp::cells::ConvLstmWeights,
    x: &Tensor,
    h: &Tensor,
    c: &Tensor,
) -> (Tensor, Tensor) {
    let s = h.shape();
    let k = w.kernel_size as isize;
    let p = k / 2;
    let tap = |t: &Tensor, n: usize, i: usize, y: isize, xx: isize| {
        if y < 0 || xx < 0 || y >= s.h as isize || xx >= s.w as isize {
            0.0
        } else {
            t.at(n, i, y as usize, xx as usize)
        }
    };
    let pre = |g: &ivp::cells::ConvLstmGate, n: usize, o: usize, y: usize, xx: usize| {
        let mut acc = g.bias.data()[o];
        for dy in 0..k {
            for dx in 0..k {
                let (sy, sx) = (y as isize + dy - p, xx as isize + dx - p);
                for i in 0..w.input_channels {
                    acc += tap(x, n, i, sy, sx) * g.wx.at(o, i, dy as usize, dx as usize);
                }
                for j in 0..w.hidden_channels {
                    acc += tap(h, n, j, sy, sx) * g.wh.at(o, j, dy as usize, dx as usize);
                }
            }
        }
        acc
    };
    let mut h_out = Tensor::zeros(s);
    let mut c_out = Tensor::zeros(s);
    for n in 0..s.n {
        for o in 0..s.c {
            for y in 0..s.h {
                for xx in 0..s.w {
                    let i = hs(pre(&w.gates.input, n, o, y, xx));
                    let f = hs(pre(&w.gates.forget, n, o, y, xx));
                    let g = pre(&w.gates.candidate, n, o, y, xx).tanh();
                    let og = hs(pre(&w.gates.output, n, o, y, xx));
                    let cv = f * c.at(n, o, y, xx) + i * g;
                    c_out.set(n, o, y, xx, cv);
                    h_out.set(n, o, y, xx, og * cv.tanh());
                }
            }
        }
    }
    (h_out, c_out)
}

fn concat_ch(parts: &[&Tensor]) -> Tensor {
    ivp::tensor::ops::concat_channels(parts).unwrap()
}

fn lstm_pointwise(pre: [Tensor; 4], c: &Tensor, sigma_candidate: bool) -> (Tensor, Tensor) {
    let [pi, pf, pg, po] = pre;
    let mut h_out = c.zeros_like();
    let mut c_out = c.zeros_like();
    for k in 0..c.len() {
        let g = if sigma_candidate { hs(pg.data()[k]) } else { pg.data()[k].tanh() };
        let cv = hs(pf.data()[k]) * c.data()[k] + hs(pi.data()[k]) * g;
        c_out.data_mut()[k] = cv;
        h_out.data_mut()[k] = hs(po.data()[k]) * cv.tanh();
    }
    (h_out, c_out)
}

/// Branch-wise composition of naive convolutions for an Inception v1 step.
pub fn oracle_inception_v1(
    w: &ivp::cells::InceptionV1Weights,
    x: &Tensor,
    h: &Tensor,
    c: &Tensor,
) -> (Tensor, Tensor) {
    let z = concat_ch(&[x, h]);
    let pre = |g: &ivp::cells::InceptionV1Gate| {
        let a = naive_conv(&z, &g.k1, Some(&g.b1));
        let b = naive_conv(&z, &g.k3, Some(&g.b3));
        let d = naive_conv(&z, &g.k5, Some(&g.b5));
        concat_ch(&[&a, &b, &d])
    };
    let gs = &w.gates;
    let sigma = w.candidate_activation == ivp::cells::CandidateActivation::HardSigmoid;
    lstm_pointwise(
        [pre(&gs.input), pre(&gs.forget), pre(&gs.candidate), pre(&gs.output)],
        c,
        sigma,
    )
}

/// Branch-wise composition of naive convolutions for an Inception v2 step.
pub fn oracle_inception_v2(
    w: &ivp::cells::InceptionV2Weights,
    x: &Tensor,
    h: &Tensor,
    c: &Tensor,
) -> (Tensor, Tensor) {
    let z = concat_ch(&[x, h]);
    let pre = |g: &ivp::cells::InceptionV2Gate| {
        let a = naive_conv(&z, &g.k1, Some(&g.b1));
        let b = naive_conv(&z, &g.k3, Some(&g.b3));
        let mid = naive_conv(&z, &g.chain_in, None);
        let d = naive_conv(&mid, &g.chain_out, Some(&g.chain_bias));
        concat_ch(&[&a, &b, &d])
    };
    let gs = &w.gates;
    let sigma = w.candidate_activation == ivp::cells::CandidateActivation::HardSigmoid;
    lstm_pointwise(
        [pre(&gs.input), pre(&gs.forget), pre(&gs.candidate), pre(&gs.output)],
        c,
        sigma,
    )
}
