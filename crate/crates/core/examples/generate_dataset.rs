//! Renders a bouncing-shapes video, saves it as IVSQ and reads it back.
//!
//! cargo run --example generate_dataset -- /tmp/shapes.ivsq

use ivp::datasets::{generate, load_sequence, save_sequence, trajectories, windows, SyntheticSceneSpec};

fn main() -> ivp::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "shapes.ivsq".into());
    let spec = SyntheticSceneSpec::random(7, 24, (16, 16), 2, 4)?;
    for (k, e) in spec.entities.iter().enumerate() {
        println!("entity {k}: {:?} size {} at {:?} moving {:?}", e.kind, e.size, e.position, e.velocity);
    }
    let path = &trajectories(&spec)?[0];
    println!("entity 0 path: {:?}", &path[..8]);

    let seq = generate(&spec)?;
    save_sequence(&seq, &out)?;
    let back = load_sequence(&out)?;
    assert_eq!(back.frames(), seq.frames());
    println!(
        "{} frames of {} written to {out} ({} bytes)",
        seq.len(),
        seq.frame_shape().unwrap(),
        std::fs::metadata(&out).map(|m| m.len()).unwrap_or(0)
    );
    println!("10-frame windows at stride 5: {}", windows(&seq, 10, 5)?.len());
    Ok(())
}
