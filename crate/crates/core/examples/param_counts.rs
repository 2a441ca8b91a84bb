//! Parameter counts of the three cell types, per gate and in total, for a
//! range of input widths and branch widths.

use ivp::cells::{CandidateActivation, CellType, CellWeights, Parameters};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> ivp::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    println!("cell  input hidden  coeff  kernels  biases  total  enumerated");
    for (input, hidden) in [(1, 3), (3, 3), (6, 48), (96, 48)] {
        for cell in CellType::ALL {
            let w = CellWeights::init(cell, input, hidden, CandidateActivation::Tanh, &mut rng)?;
            let pc = w.param_count();
            let enumerated: usize = w.named_params().iter().map(|(_, t)| t.len()).sum();
            println!(
                "{cell:<5} {input:>5} {hidden:>6} {:>6} {:>8} {:>7} {:>6} {enumerated:>11}",
                pc.per_gate_kernel_elems, pc.kernel_elems, pc.biases, pc.total
            );
        }
    }
    println!("v1 - v2 per-gate coefficient: {}", 35 - 28);
    Ok(())
}
