mod common;

use std::collections::HashMap;

use common::{grad_check, random, rng};
use ivp::cells::{CellType, Parameters};
use ivp::datasets::FrameSequence;
use ivp::stack::{default_plan, layer_sizes, rollout, LayerConfig, Network, NetworkState, Target};
use ivp::{Error, Shape, Tape, Tensor, Var};
use proptest::prelude::*;

fn small_plan(cell: CellType) -> Vec<LayerConfig> {
    vec![LayerConfig::new(3, 6, cell), LayerConfig::new(6, 6, cell)]
}

fn random_frames(t: usize, h: usize, w: usize, seed: u64) -> FrameSequence {
    let mut r = rng(seed);
    let frames = (0..t).map(|_| random([1, 3, h, w], 0.0, 1.0, &mut r)).collect();
    FrameSequence::new(frames, "random").unwrap()
}

#[test]
fn zero_prediction_weights_give_frame_as_positive_error() {
    let mut net = Network::build(&default_plan(2, CellType::Conv).unwrap(), 3).unwrap();
    for (name, p) in net.named_params_mut() {
        if name.starts_with("layer0.predict.") {
            *p = p.zeros_like();
        }
    }
    let frame = random([1, 3, 8, 8], 0.0, 1.0, &mut rng(1));
    let state = NetworkState::zeros(&net, 1, 8, 8);
    let out = net.step(&state, &frame).unwrap();
    assert!(out.prediction.data().iter().all(|&v| v == 0.0));
    let e0 = &out.state.layers[0].error;
    assert_eq!(e0.shape(), Shape::new(1, 6, 8, 8));
    for c in 0..3 {
        assert_eq!(e0.slice_channels(c, 1).unwrap().data(), frame.slice_channels(c, 1).unwrap().data());
        assert!(e0.slice_channels(c + 3, 1).unwrap().data().iter().all(|&v| v == 0.0));
    }
    assert!((out.layer_errors[0] - frame.mean()).abs() < 1e-15);
}

#[test]
fn perfect_prediction_gives_zero_error() {
    // A one-layer net whose prediction is the clamped bias: set the bias to the frame value.
    let mut net = Network::build(&[LayerConfig::new(1, 3, CellType::Conv)], 0).unwrap();
    for (name, p) in net.named_params_mut() {
        if name == "layer0.predict.kernel" {
            *p = p.zeros_like();
        }
        if name == "layer0.predict.bias" {
            *p = Tensor::full(p.shape(), 0.625);
        }
    }
    let frame = Tensor::full(Shape::new(1, 1, 5, 5), 0.625);
    let out = net.step(&NetworkState::zeros(&net, 1, 5, 5), &frame).unwrap();
    assert!(out.state.layers[0].error.data().iter().all(|&v| v == 0.0));
    assert_eq!(out.layer_errors, vec![0.0]);
}

#[test]
fn two_layer_shape_contract() {
    let net = Network::build(&default_plan(2, CellType::Conv).unwrap(), 0).unwrap();
    let frame = random([1, 3, 32, 32], 0.0, 1.0, &mut rng(2));
    let out = net.step(&NetworkState::zeros(&net, 1, 32, 32), &frame).unwrap();
    assert_eq!(out.prediction.shape(), Shape::new(1, 3, 32, 32));
    assert_eq!(out.state.layers[0].error.shape(), Shape::new(1, 6, 32, 32));
    // The layer-1 prediction has the shape of the layer-1 input A_1.
    let p1 = out.state.layers[1].prediction.as_ref().unwrap();
    assert_eq!(p1.shape(), Shape::new(1, 48, 16, 16));
    assert_eq!(out.state.layers[1].error.shape(), Shape::new(1, 96, 16, 16));
    assert_eq!(out.layer_errors.len(), 2);
}

#[test]
fn default_plan_channels_and_halving() {
    let plan = default_plan(4, CellType::Conv).unwrap();
    let channels: Vec<usize> = plan.iter().map(|c| c.input_channels).collect();
    assert_eq!(channels, vec![3, 48, 96, 192]);
    assert!(default_plan(0, CellType::Conv).is_err());
    assert!(default_plan(5, CellType::Conv).is_err());
    assert_eq!(layer_sizes(4, 16, 16), vec![(16, 16), (8, 8), (4, 4), (2, 2)]);
    assert_eq!(layer_sizes(3, 15, 9), vec![(15, 9), (8, 5), (4, 3)]);

    for layers in 2..=4 {
        let net = Network::build(&default_plan(layers, CellType::Conv).unwrap(), 1).unwrap();
        let state = NetworkState::zeros(&net, 1, 16, 16);
        let out = net.step(&state, &Tensor::zeros([1, 3, 16, 16])).unwrap();
        for (l, ls) in out.state.layers.iter().enumerate() {
            let side = 16 >> l;
            let a = [3, 48, 96, 192][l];
            assert_eq!(ls.prediction.as_ref().unwrap().shape(), Shape::new(1, a, side, side));
            assert_eq!(ls.cell.h.shape(), Shape::new(1, a, side, side));
        }
    }
}

#[test]
fn same_seed_same_weights() {
    let plan = default_plan(3, CellType::InceptionV1).unwrap();
    assert_eq!(Network::build(&plan, 11).unwrap(), Network::build(&plan, 11).unwrap());
    assert_ne!(Network::build(&plan, 11).unwrap(), Network::build(&plan, 12).unwrap());
}

#[test]
fn rollout_counts() {
    let net = Network::build(&small_plan(CellType::Conv), 0).unwrap();
    let ten = random_frames(10, 8, 8, 1);
    let r = rollout(&net, &ten, 0).unwrap();
    assert_eq!(r.predictions.len(), 9);
    assert_eq!(r.scored, 9);
    assert_eq!(r.per_step_errors.len(), 10);

    let five = random_frames(5, 8, 8, 2);
    let r = rollout(&net, &five, 3).unwrap();
    assert_eq!(r.predictions.len(), 7);
    assert_eq!(r.scored, 4);

    let empty = FrameSequence::new(vec![], "empty").unwrap();
    assert!(rollout(&net, &empty, 0).is_err());
}

#[test]
fn rollout_prediction_precedes_target() {
    // Prediction k of a rollout must equal the prediction made at step k+1
    // when the frame of step k+1 is replaced by anything else.
    let net = Network::build(&small_plan(CellType::Conv), 4).unwrap();
    let seq = random_frames(3, 8, 8, 9);
    let r = rollout(&net, &seq, 0).unwrap();
    let s0 = NetworkState::zeros(&net, 1, 8, 8);
    let s1 = net.step(&s0, &seq.frames()[0]).unwrap().state;
    let other = net.step(&s1, &Tensor::zeros([1, 3, 8, 8])).unwrap();
    assert_eq!(other.prediction, r.predictions.frames()[0]);
}

#[test]
fn black_video_rollout_is_reproducible() {
    let run = || {
        let net = Network::build(&small_plan(CellType::InceptionV2), 5).unwrap();
        let black = FrameSequence::new(vec![Tensor::zeros([1, 3, 8, 8]); 6], "black").unwrap();
        rollout(&net, &black, 2).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.per_step_errors, b.per_step_errors);
    assert_eq!(a.predictions, b.predictions);
}

#[test]
fn step_is_pure() {
    let net = Network::build(&small_plan(CellType::InceptionV1), 8).unwrap();
    let seq = random_frames(2, 6, 6, 3);
    let state = net.step(&NetworkState::zeros(&net, 1, 6, 6), &seq.frames()[0]).unwrap().state;
    let a = net.step(&state, &seq.frames()[1]).unwrap();
    let b = net.step(&state, &seq.frames()[1]).unwrap();
    assert_eq!(a.prediction, b.prediction);
    assert_eq!(a.state, b.state);
    assert_eq!(a.layer_errors, b.layer_errors);
}

#[test]
fn step_errors() {
    let net = Network::build(&small_plan(CellType::Conv), 0).unwrap();
    let state = NetworkState::zeros(&net, 1, 8, 8);
    assert!(matches!(net.step(&state, &Tensor::zeros([1, 3, 8, 6])), Err(Error::Shape(_))));
    assert!(matches!(net.step(&state, &Tensor::zeros([1, 1, 8, 8])), Err(Error::Shape(_))));
    assert!(matches!(
        net.step(&NetworkState::default(), &Tensor::zeros([1, 3, 8, 8])),
        Err(Error::UninitializedState)
    ));
    assert!(Network::build(&[], 0).is_err());
    assert!(Network::build(&[LayerConfig::new(3, 4, CellType::InceptionV1)], 0).is_err());
}

#[test]
fn odd_frame_sizes_run() {
    for cell in CellType::ALL {
        let plan = vec![
            LayerConfig::new(3, 6, cell),
            LayerConfig::new(6, 6, cell),
            LayerConfig::new(6, 6, cell),
        ];
        let net = Network::build(&plan, 2).unwrap();
        let seq = random_frames(3, 7, 5, 4);
        let r = rollout(&net, &seq, 1).unwrap();
        assert_eq!(r.predictions.frame_shape().unwrap(), Shape::new(1, 3, 7, 5));
    }
}

/// One layer, binary frames. The cell writes `tanh(10)` into `c` wherever the
/// positive error is 1 and keeps it forever (input, forget and output gates
/// saturated open); the prediction conv then saturates the clamp to exactly 1.
fn copy_network() -> Network {
    let mut net = Network::build(&[LayerConfig::new(3, 3, CellType::Conv)], 0).unwrap();
    for (name, p) in net.named_params_mut() {
        *p = p.zeros_like();
        let gate_open = ["i", "f", "o"].iter().any(|g| name == format!("layer0.cell.{g}.bias"));
        if gate_open {
            *p = Tensor::full(p.shape(), 10.0);
        }
        if name == "layer0.cell.g.wx" {
            for c in 0..3 {
                p.set(c, c, 1, 1, 10.0);
            }
        }
        if name == "layer0.predict.kernel" {
            for c in 0..3 {
                p.set(c, c, 0, 0, 100.0);
            }
        }
    }
    net
}

#[test]
fn copy_configuration_reaches_zero_error() {
    let net = copy_network();
    let mut r = rng(21);
    let frame = Tensor::from_fn(Shape::new(1, 3, 8, 8), |_| if rand::Rng::gen_bool(&mut r, 0.5) { 1.0 } else { 0.0 });
    let mut state = NetworkState::zeros(&net, 1, 8, 8);
    for t in 0..6 {
        let out = net.step(&state, &frame).unwrap();
        let e0 = &out.state.layers[0].error;
        if t == 0 {
            assert!(e0.max_abs() > 0.0);
        } else {
            assert_eq!(out.prediction, frame, "t = {t}");
            assert!(e0.data().iter().all(|&v| v == 0.0), "t = {t}");
        }
        state = out.state;
    }
}

fn subst(net: &Network, lookup: &HashMap<String, usize>, vars: &[Var]) -> Network<Var> {
    net.map(&mut |name, _| vars[lookup[name]])
}

#[test]
fn full_network_gradient_check() {
    for cell in CellType::ALL {
        let net = Network::build(&default_plan(2, cell).unwrap(), 17).unwrap();
        let names: Vec<String> = net.named_params().into_iter().map(|(n, _)| n).collect();
        let lookup: HashMap<String, usize> = names.iter().cloned().enumerate().map(|(i, n)| (n, i)).collect();
        let mut params: Vec<Tensor> = net.named_params().into_iter().map(|(_, p)| p.clone()).collect();
        let np = params.len();

        // A random nonzero starting state exercises the recurrent weights in one step.
        let mut r = rng(5);
        let s = NetworkState::zeros(&net, 1, 8, 8);
        for l in &s.layers {
            params.push(random(l.cell.h.shape(), -0.5, 0.5, &mut r));
            params.push(random(l.cell.c.shape(), -1.0, 1.0, &mut r));
            params.push(random(l.error.shape(), 0.0, 0.5, &mut r));
        }
        let frame = random([1, 3, 8, 8], 0.0, 1.0, &mut r);

        let check = grad_check(&params, 40, 99, |tape: &mut Tape, vars: &[Var]| {
            let bound = subst(&net, &lookup, &vars[..np]);
            let state = ivp::stack::TapeState {
                layers: vars[np..]
                    .chunks(3)
                    .map(|v| ivp::stack::TapeLayerState { h: v[0], c: v[1], error: v[2] })
                    .collect(),
            };
            let f = tape.constant(frame.clone());
            let out = bound.step(tape, &state, Target::Frame(f)).unwrap();
            let mut loss = tape.mse(out.prediction, f).unwrap();
            for &e in &out.layer_errors {
                loss = tape.add(loss, e).unwrap();
            }
            let h1 = tape.mean(out.state.layers[1].h);
            tape.add(loss, h1).unwrap()
        });
        check.assert_ok(&format!("{cell} network"));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn errors_nonnegative_and_h_bounded(seed in 0u64..1000, steps in 1usize..4) {
        let cell = CellType::ALL[(seed % 3) as usize];
        let net = Network::build(&small_plan(cell), seed).unwrap();
        let seq = random_frames(steps, 6, 6, seed + 1);
        let mut state = NetworkState::zeros(&net, 1, 6, 6);
        for frame in seq.frames() {
            let out = net.step(&state, frame).unwrap();
            for l in &out.state.layers {
                prop_assert!(l.error.data().iter().all(|&v| v >= 0.0));
                prop_assert!(l.cell.h.data().iter().all(|&v| v > -1.0 && v < 1.0));
            }
            prop_assert!(out.prediction.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            state = out.state;
        }
    }
}
