//! Compares tape gradients of a two-layer network against central finite
//! differences on a handful of random coordinates.

use ivp::cells::{CellType, Parameters};
use ivp::stack::{default_plan, Network, NetworkState, Target};
use ivp::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn loss(net: &Network<Var>, tape: &mut Tape, start: &NetworkState, frames: &[Tensor]) -> ivp::Result<Var> {
    let mut state = start.to_tape(tape, false);
    let mut total = tape.constant(Tensor::scalar(0.0));
    for f in frames {
        let f = tape.constant(f.clone());
        let out = net.step(tape, &state, Target::Frame(f))?;
        let l = tape.mse(out.prediction, f)?;
        total = tape.add(total, l)?;
        state = out.state;
    }
    Ok(total)
}

fn main() -> ivp::Result<()> {
    let eps = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let frames: Vec<Tensor> = (0..3).map(|_| Tensor::uniform([1, 3, 8, 8], 1.0, &mut rng).map(f64::abs)).collect();
    for cell in CellType::ALL {
        let net = Network::build(&default_plan(2, cell)?, 1)?;
        // From an all-zero state the first pixel prediction sits exactly on the
        // clamp boundary, a kink that central differences cannot resolve.
        let mut start = NetworkState::zeros(&net, 1, 8, 8);
        for l in &mut start.layers {
            l.cell.h.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
            l.cell.c.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
            l.error.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(0.0..0.5));
        }
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, true);
        let l = loss(&bound, &mut tape, &start, &frames)?;
        tape.backward(l)?;
        let grads: Vec<Tensor> = bound.named_params().iter().map(|(_, v)| tape.grad(**v).unwrap().clone()).collect();

        let eval = |n: &Network| -> ivp::Result<f64> {
            let mut t = Tape::new();
            let b = n.bind(&mut t, false);
            let v = loss(&b, &mut t, &start, &frames)?;
            t.value(v).item()
        };
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let p = rng.gen_range(0..grads.len());
            let k = rng.gen_range(0..grads[p].len());
            let shifted = |d: f64| {
                let mut n = net.clone();
                n.named_params_mut()[p].1.data_mut()[k] += d;
                eval(&n)
            };
            let numeric = (shifted(eps)? - shifted(-eps)?) / (2.0 * eps);
            let analytic = grads[p].data()[k];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7);
            worst = worst.max(rel);
        }
        println!("{cell}: worst relative error over 20 coordinates {worst:.2e}");
    }
    Ok(())
}
