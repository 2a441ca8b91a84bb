//! Trains a two-layer network on bouncing squares, checkpoints it, reloads
//! it and scores held-out videos against the copy-last-frame baseline.
//!
//! cargo run --release --example train_and_evaluate -- [cell] [steps]

use ivp::cells::CellType;
use ivp::datasets::{generate, FrameSequence, SyntheticSceneSpec};
use ivp::metrics::{evaluate_baseline, evaluate_history_curve, Metric};
use ivp::stack::{default_plan, Network};
use ivp::training::{load_checkpoint, save_checkpoint, TrainConfig, Trainer};

fn videos(seed: u64, count: u64, frames: usize) -> ivp::Result<Vec<FrameSequence>> {
    (0..count)
        .map(|k| generate(&SyntheticSceneSpec::random(seed * 1000 + k, frames, (16, 16), 1, 4)?))
        .collect()
}

fn main() -> ivp::Result<()> {
    let mut args = std::env::args().skip(1);
    let cell: CellType = args.next().as_deref().unwrap_or("conv").parse()?;
    let steps: u64 = args.next().map_or(300, |s| s.parse().expect("steps must be an integer"));

    let train = videos(7, 20, 40)?;
    let test = videos(8, 10, 10)?;
    let net = Network::build(&default_plan(2, cell)?, 7)?;
    let mut trainer = Trainer::new(net, TrainConfig { steps, seed: 7, ..TrainConfig::default() })?;
    let trace = trainer.fit_with(&train, |step, loss| {
        if step % 50 == 0 {
            println!("step {step:>5}  loss {loss:.5}");
        }
    })?;
    println!("trained {} steps, last loss {:.5}", trace.len(), trace.last().copied().unwrap_or(f64::NAN));

    let path = std::env::temp_dir().join(format!("ivp-{cell}.ivck"));
    save_checkpoint(&trainer.checkpoint(), &path)?;
    let restored = load_checkpoint(&path)?;
    assert_eq!(restored.network, trainer.net);

    let model = evaluate_history_curve(&restored.network, &test, 10)?;
    let baseline = evaluate_baseline(&test, 10)?;
    for m in Metric::ALL {
        println!("{m:>4}: model {:.5}  copy-last {:.5}", model.aggregate(m), baseline.aggregate(m));
    }
    Ok(())
}
