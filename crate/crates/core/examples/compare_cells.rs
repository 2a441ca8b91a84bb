//! Trains conv, iv1 and iv2 networks under one budget and prints a table of
//! held-out MAE, MSE and SSIM with each cell's per-gate kernel coefficient.
//!
//! cargo run --release --example compare_cells -- [steps]

use ivp::cells::CellType;
use ivp::datasets::{generate, FrameSequence, SyntheticSceneSpec};
use ivp::metrics::{evaluate_history_curve, Metric};
use ivp::stack::{default_plan, Network};
use ivp::training::{train, TrainConfig};

fn videos(seed: u64, count: u64, frames: usize) -> ivp::Result<Vec<FrameSequence>> {
    (0..count)
        .map(|k| generate(&SyntheticSceneSpec::random(seed * 1000 + k, frames, (16, 16), 1, 4)?))
        .collect()
}

fn main() -> ivp::Result<()> {
    let steps = std::env::args().nth(1).map_or(200, |s| s.parse().expect("steps must be an integer"));
    let data = videos(1, 12, 30)?;
    let test = videos(2, 6, 10)?;
    let cfg = TrainConfig { steps, seed: 1, ..TrainConfig::default() };
    println!("model  coeff  params      mae       mse     ssim");
    for cell in CellType::ALL {
        let net = Network::build(&default_plan(2, cell)?, 1)?;
        let coeff = net.cell_param_counts()[0].per_gate_kernel_elems;
        let params = net.total_params();
        let (net, _) = train(net, &data, &cfg)?;
        let r = evaluate_history_curve(&net, &test, 10)?;
        println!(
            "{:<5} {coeff:>6} {params:>7} {:.6} {:.6} {:.4}",
            cell.name(),
            r.aggregate(Metric::Mae),
            r.aggregate(Metric::Mse),
            r.aggregate(Metric::Ssim)
        );
    }
    Ok(())
}
