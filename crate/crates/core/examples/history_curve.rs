//! Prints the per-history-length error curve with 95% intervals for an
//! untrained network and for the copy-last-frame baseline, and writes both
//! curves as CSV.

use ivp::cells::CellType;
use ivp::datasets::{generate, SyntheticSceneSpec};
use ivp::metrics::{evaluate_baseline, evaluate_history_curve, Metric};
use ivp::stack::{default_plan, Network};

fn main() -> ivp::Result<()> {
    let test = (0..8)
        .map(|k| generate(&SyntheticSceneSpec::random(50 + k, 10, (16, 16), 2, 4)?))
        .collect::<ivp::Result<Vec<_>>>()?;
    let net = Network::build(&default_plan(2, CellType::InceptionV1)?, 0)?;
    let model = evaluate_history_curve(&net, &test, 10)?;
    let baseline = evaluate_baseline(&test, 10)?;
    println!("k   model mse            copy-last mse");
    for k in 1..=model.history_lengths() {
        let (m, b) = (model.bucket(k, Metric::Mse).unwrap(), baseline.bucket(k, Metric::Mse).unwrap());
        println!("{k}   {:.5} ± {:.5}    {:.5} ± {:.5}", m.mean, m.ci95, b.mean, b.ci95);
    }
    let dir = std::env::temp_dir();
    model.write_csv(dir.join("ivp-model-curve.csv"))?;
    baseline.write_csv(dir.join("ivp-baseline-curve.csv"))?;
    println!("curves written to {}", dir.display());
    Ok(())
}
