mod common;

use calibseg::{Tape, Tensor};

const SEEDS: u64 = 20;

#[test]
fn primitives_match_finite_differences() {
    for seed in 0..SEEDS {
        for (name, err) in common::primitive_errors(seed) {
            assert!(err < 1e-3, "{name} seed {seed}: relative error {err:.2e}");
        }
    }
}

#[test]
fn losses_match_finite_differences() {
    for seed in 0..SEEDS {
        for (name, err) in common::loss_errors(seed) {
            assert!(err < 1e-3, "{name} seed {seed}: relative error {err:.2e}");
        }
    }
}

#[test]
fn unet_composite_matches_finite_differences() {
    for seed in 0..SEEDS {
        for (name, err) in common::unet_errors(seed) {
            assert!(err < 1e-2, "{name} seed {seed}: relative error {err:.2e}");
        }
    }
}

#[test]
fn relu_gradient_at_known_points() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[2], vec![-1.0, 2.0]).unwrap().with_requires_grad(true));
    let y = tape.relu(x);
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0]);
}

#[test]
fn downsample_spreads_a_quarter() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[1, 1, 2, 2], vec![0.0, 2.0, 4.0, 6.0]).unwrap().with_requires_grad(true));
    let y = tape.downsample2x(x).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0]);
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.25; 4]);
}

#[test]
fn replaying_the_recorded_pattern_reproduces_the_forward() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[4], vec![-1.0, 0.5, 0.0, 3.0]).unwrap());
    let y = tape.relu(x);
    let pattern = tape.relu_pattern();
    assert_eq!(pattern, vec![false, true, false, true]);
    let mut replay = Tape::with_relu_pattern(pattern);
    // the gate is fixed, so a sign change of the input passes through linearly
    let x2 = replay.leaf(Tensor::new(&[4], vec![-1.0, -0.5, 0.0, 3.0]).unwrap().with_requires_grad(true));
    let y2 = replay.relu(x2);
    assert_eq!(tape.value(y).data(), &[0.0, 0.5, 0.0, 3.0]);
    assert_eq!(replay.value(y2).data(), &[0.0, -0.5, 0.0, 3.0]);
    let s = replay.sum(y2);
    replay.backward(s).unwrap();
    assert_eq!(replay.grad(x2).unwrap(), &[0.0, 1.0, 0.0, 1.0]);
}
