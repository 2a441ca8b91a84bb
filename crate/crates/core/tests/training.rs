mod common;

use ivp::cells::{CellType, Parameters};
use ivp::datasets::{generate, FrameSequence, SyntheticSceneSpec};
use ivp::metrics::{mae, mse};
use ivp::stack::{default_plan, rollout, LayerConfig, Network};
use ivp::training::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, read_loss_csv, save_checkpoint, train,
    write_loss_csv, Adam, LossMode, TrainConfig, Trainer,
};
use ivp::{Error, Tape, Tensor};

fn small_net(cell: CellType, seed: u64) -> Network {
    Network::build(&[LayerConfig::new(3, 6, cell), LayerConfig::new(6, 6, cell)], seed).unwrap()
}

fn data(seed: u64, n: usize, frames: usize, side: usize) -> Vec<FrameSequence> {
    (0..n)
        .map(|k| {
            let spec = SyntheticSceneSpec::random(seed + 31 * k as u64, frames, (side, side), 1, 3).unwrap();
            generate(&spec).unwrap()
        })
        .collect()
}

fn cfg(steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch: 2,
        sequence_length: 4,
        window_stride: 2,
        seed: 9,
        ..TrainConfig::default()
    }
}

fn params(net: &Network) -> Vec<Tensor> {
    net.named_params().into_iter().map(|(_, p)| p.clone()).collect()
}

#[test]
fn adam_matches_scalar_recurrence() {
    let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
    let mut w = Tensor::scalar(0.0);
    let mut adam = Adam::new(lr, b1, b2, eps, &[&w]);
    let (mut ow, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
    for t in 1..=50 {
        let mut tape = Tape::new();
        let x = tape.param(w.clone());
        let three = tape.constant(Tensor::scalar(3.0));
        let d = tape.sub(x, three).unwrap();
        let sq = tape.hadamard(d, d).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap().clone();
        adam.update(&mut [&mut w], &[g]).unwrap();

        let og = 2.0 * (ow - 3.0);
        m = b1 * m + (1.0 - b1) * og;
        v = b2 * v + (1.0 - b2) * og * og;
        let m_hat = m / (1.0 - b1.powi(t));
        let v_hat = v / (1.0 - b2.powi(t));
        let before = ow;
        ow -= lr * m_hat / (v_hat.sqrt() + eps);
        assert!((w.item().unwrap() - ow).abs() < 1e-12, "step {t}");
        if t == 1 {
            assert!((ow - before - lr * 6.0 / (6.0 + eps)).abs() < 1e-15);
        }
    }
    assert!(ow > 2.0 && ow < 4.0);
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let net = small_net(CellType::Conv, 1);
    let before = params(&net);
    let mut c = cfg(5);
    c.learning_rate = 0.0;
    c.batch = 1;
    // One window only, so every step sees the same batch.
    let seq = data(3, 1, 4, 8);
    let mut trainer = Trainer::new(net, c).unwrap();
    let trace = trainer.fit(&seq).unwrap();
    assert_eq!(trace.len(), 5);
    assert!(trace.iter().all(|&l| l == trace[0]));
    assert_eq!(params(&trainer.net), before);
}

#[test]
fn gradients_do_not_leak_between_steps() {
    let mut c = cfg(2);
    c.learning_rate = 0.0;
    let seq = data(4, 1, 4, 8);
    let mut trainer = Trainer::new(small_net(CellType::InceptionV1, 2), c).unwrap();
    let w = trainer.windows(&seq).unwrap();
    let (_, g1) = trainer.loss_and_grads(&[&w[0]]).unwrap();
    trainer.train_step(&w).unwrap();
    let (_, g2) = trainer.loss_and_grads(&[&w[0]]).unwrap();
    assert_eq!(g1, g2);
    assert!(g1.iter().any(|g| g.max_abs() > 0.0));
}

#[test]
fn fixed_seed_runs_are_identical() {
    let d = data(5, 3, 10, 8);
    let run = || train(small_net(CellType::InceptionV2, 3), &d, &cfg(6)).unwrap();
    let (na, ta) = run();
    let (nb, tb) = run();
    assert_eq!(ta, tb);
    assert_eq!(na, nb);
    assert_eq!(ta.len(), 6);
}

#[test]
fn thread_count_does_not_change_results() {
    let d = data(6, 3, 8, 8);
    let mut c = cfg(4);
    c.batch = 3;
    let run = |threads| {
        let mut t = Trainer::new(small_net(CellType::Conv, 4), c.clone()).unwrap().with_threads(threads);
        (t.fit(&d).unwrap(), t.net)
    };
    let (a, na) = run(1);
    let (b, nb) = run(3);
    assert_eq!(a, b);
    assert_eq!(na, nb);
}

#[test]
fn checkpoint_round_trip_is_lossless() {
    let d = data(7, 2, 8, 8);
    let mut t = Trainer::new(small_net(CellType::InceptionV2, 5), cfg(3)).unwrap();
    t.fit(&d).unwrap();
    let ck = t.checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ivck");
    save_checkpoint(&ck, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.step(), 3);
    assert!(back.adam.m.iter().any(|m| m.max_abs() > 0.0));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let d = data(8, 3, 10, 8);
    let mut full = Trainer::new(small_net(CellType::Conv, 6), cfg(8)).unwrap();
    let full_trace = full.fit(&d).unwrap();

    let mut first = Trainer::new(small_net(CellType::Conv, 6), TrainConfig { steps: 3, ..cfg(8) }).unwrap();
    let head = first.fit(&d).unwrap();
    let mut ck = decode_checkpoint(&encode_checkpoint(&first.checkpoint())).unwrap();
    ck.config.steps = 8;
    let mut resumed = Trainer::from_checkpoint(ck).unwrap();
    let tail = resumed.fit(&d).unwrap();

    assert_eq!(head, full_trace[..3]);
    assert_eq!(tail, full_trace[3..]);
    assert_eq!(resumed.net, full.net);
    assert_eq!(resumed.adam, full.adam);
}

#[test]
fn checkpoint_errors() {
    let t = Trainer::new(small_net(CellType::InceptionV1, 7), cfg(0)).unwrap();
    let good = encode_checkpoint(&t.checkpoint());

    let mut bad = good.clone();
    bad[4..8].copy_from_slice(&2u32.to_le_bytes());
    assert!(matches!(decode_checkpoint(&bad), Err(Error::Version { found: 2, expected: 1 })));

    let mut bad = good.clone();
    bad[0] = b'J';
    assert!(matches!(decode_checkpoint(&bad), Err(Error::Format { offset: 0, .. })));

    for cut in [3, 10, 60, good.len() / 2, good.len() - 1] {
        assert!(
            matches!(decode_checkpoint(&good[..cut]), Err(Error::Format { .. })),
            "cut at {cut}"
        );
    }

    // A checkpoint whose architecture disagrees with its tensor table.
    let mut other = t.checkpoint();
    other.network = small_net(CellType::Conv, 7);
    let bytes = encode_checkpoint(&other);
    let mut spliced = bytes[..44].to_vec();
    spliced.extend_from_slice(&good[44..]);
    assert!(matches!(decode_checkpoint(&spliced), Err(Error::TensorMismatch(_))));

    assert!(matches!(load_checkpoint("/nonexistent/ck.ivck"), Err(Error::Io { .. })));
}

#[test]
fn first_loss_equals_evaluation_mse() {
    let seq = data(9, 1, 5, 8);
    let net = small_net(CellType::InceptionV1, 8);
    let c = TrainConfig {
        sequence_length: 5,
        batch: 1,
        ..cfg(1)
    };
    let mut t = Trainer::new(net.clone(), c).unwrap();
    let trace = t.fit(&seq).unwrap();

    let r = rollout(&net, &seq[0], 0).unwrap();
    let eval: f64 = (1..5)
        .map(|k| mse(&r.predictions.frames()[k - 1], &seq[0].frames()[k]).unwrap())
        .sum::<f64>()
        / 4.0;
    assert!((trace[0] - eval).abs() < 1e-12, "{} vs {eval}", trace[0]);
}

#[test]
fn layer_weighted_error_with_unit_bottom_weight_is_pixel_mae() {
    let seq = data(10, 1, 5, 8);
    let net = small_net(CellType::Conv, 9);
    let c = TrainConfig {
        sequence_length: 5,
        batch: 1,
        loss_mode: LossMode::LayerWeightedError,
        layer_loss_weights: vec![1.0, 0.0],
        ..cfg(1)
    };
    let t = Trainer::new(net.clone(), c).unwrap();
    let w = t.windows(&seq).unwrap();
    let loss = t.loss(&[&w[0]]).unwrap();
    let r = rollout(&net, &seq[0], 0).unwrap();
    let eval: f64 = (1..5)
        .map(|k| mae(&r.predictions.frames()[k - 1], &seq[0].frames()[k]).unwrap())
        .sum::<f64>()
        / 4.0;
    assert!((loss - eval).abs() < 1e-12);
}

#[test]
fn non_finite_loss_reports_divergence() {
    let mut net = small_net(CellType::Conv, 10);
    for (name, p) in net.named_params_mut() {
        if name == "layer0.predict.bias" {
            *p = p.map(|_| f64::NAN);
        }
    }
    let mut t = Trainer::new(net, cfg(3)).unwrap();
    match t.fit(&data(11, 1, 6, 8)) {
        Err(e @ Error::Diverged { step: 1, .. }) => assert!(e.is_numeric()),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn config_and_data_validation() {
    let bad = [
        TrainConfig { learning_rate: -1.0, ..cfg(1) },
        TrainConfig { learning_rate: f64::NAN, ..cfg(1) },
        TrainConfig { sequence_length: 1, ..cfg(1) },
        TrainConfig { batch: 0, ..cfg(1) },
        TrainConfig { adam_beta1: 1.0, ..cfg(1) },
        TrainConfig { adam_eps: 0.0, ..cfg(1) },
        TrainConfig { layer_loss_weights: vec![1.0, -0.5], ..cfg(1) },
    ];
    for c in bad {
        assert!(matches!(Trainer::new(small_net(CellType::Conv, 0), c), Err(Error::Config(_))));
    }
    let gray = FrameSequence::new(vec![Tensor::zeros([1, 1, 8, 8]); 6], "gray").unwrap();
    let mut t = Trainer::new(small_net(CellType::Conv, 0), cfg(1)).unwrap();
    assert!(matches!(t.fit(&[gray]), Err(Error::Shape(_))));
    let short = FrameSequence::new(vec![Tensor::zeros([1, 3, 8, 8]); 2], "short").unwrap();
    assert!(t.fit(&[short]).is_err());
    assert_eq!("layer_weighted_error".parse::<LossMode>().unwrap(), LossMode::LayerWeightedError);
    assert!("l1".parse::<LossMode>().is_err());
}

#[test]
fn zero_steps_and_loss_csv() {
    let mut t = Trainer::new(small_net(CellType::Conv, 0), cfg(0)).unwrap();
    assert!(t.fit(&data(1, 1, 6, 8)).unwrap().is_empty());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("loss.csv");
    write_loss_csv(&path, 1, &[]).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), "step,loss\n");
    let trace = [0.25, 0.1 + 0.2, 1e-9];
    write_loss_csv(&path, 4, &trace).unwrap();
    let rows = read_loss_csv(&path).unwrap();
    assert_eq!(rows, vec![(4, 0.25), (5, 0.1 + 0.2), (6, 1e-9)]);
}

#[test]
fn bouncing_square_loss_descends() {
    let d = data(7, 8, 30, 16);
    let net = Network::build(&default_plan(2, CellType::Conv).unwrap(), 7).unwrap();
    let c = TrainConfig {
        steps: 500,
        batch: 2,
        sequence_length: 5,
        window_stride: 1,
        seed: 7,
        ..TrainConfig::default()
    };
    let (_, trace) = train(net, &d, &c).unwrap();
    let first = trace[..50].iter().sum::<f64>() / 50.0;
    let last = trace[450..].iter().sum::<f64>() / 50.0;
    assert!(last < first, "final {last} vs first {first}");
}
