//! One step of each recurrent cell on the same input, plus a short unrolled
//! sequence showing the state carrying information forward.

use ivp::cells::{CandidateActivation, CellState, CellType, CellWeights};
use ivp::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> ivp::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::uniform([1, 2, 6, 6], 1.0, &mut rng);
    for cell in CellType::ALL {
        let w = CellWeights::init(cell, 2, 6, CandidateActivation::Tanh, &mut rng)?;
        let mut state = CellState::zeros(1, 6, 6, 6);
        print!("{cell:>4}: |h| after steps");
        for _ in 0..4 {
            let (h, next) = w.step_values(&x, &state)?;
            print!(" {:.4}", h.map(f64::abs).mean());
            state = next;
        }
        println!("  ({} parameters)", w.param_count().total);
    }
    Ok(())
}
