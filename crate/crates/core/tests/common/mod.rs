#![allow(dead_code)]

use fss::numerics::{Mask, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central differences of `f` at `x` along each coordinate.
pub fn central_differences(x: &[f64], step: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Central difference of `f` along `direction`.
pub fn directional_difference(
    x: &[f64],
    direction: &[f64],
    step: f64,
    f: impl Fn(&[f64]) -> f64,
) -> f64 {
    let shifted =
        |s: f64| -> Vec<f64> { x.iter().zip(direction).map(|(a, d)| a + s * d).collect() };
    (f(&shifted(step)) - f(&shifted(-step))) / (2.0 * step)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn tensor3(h: usize, w: usize, c: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-1.0f64..1.0, h * w * c)
        .prop_map(move |v| Tensor::new(vec![h, w, c], v).unwrap())
}

pub fn mask(h: usize, w: usize) -> impl Strategy<Value = Mask> {
    prop::collection::vec(any::<bool>(), h * w).prop_map(move |v| Mask::new(h, w, v).unwrap())
}

pub fn nonempty_mask(h: usize, w: usize) -> impl Strategy<Value = Mask> {
    mask(h, w).prop_filter("needs foreground", Mask::has_foreground)
}

/// Smooth scalar readout of an `h × w × c` node: a fixed 1×1 projection to
/// two channels, softmax, and cross entropy against `target`.
pub fn readout(tape: &mut Tape<'_>, x: Var, projection: &Tensor, target: &Mask) -> Var {
    let k = tape.input(projection.clone());
    let logits = tape.conv2d(x, k, 1, 0).unwrap();
    let probs = tape.channel_softmax(logits).unwrap();
    tape.cross_entropy(probs, target).unwrap()
}

pub fn projection(c: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..c * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![1, 1, c, 2], values).unwrap()
}
