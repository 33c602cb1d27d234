//! Finite-difference gradient oracles.
//!
//! These evaluate a scalar function by perturbing inputs directly and never
//! touch the tape's backward pass, so they stay an independent check on it.

pub mod reference;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::models::{ModelBundle, ParamGroup};
use crate::numerics::{Tape, Tensor, Var};
use reference::{Grid, Kinks};

/// Central-difference derivative of `f` at each listed coordinate of `x`.
pub fn central_differences(
    f: &mut dyn FnMut(&Tensor) -> f64,
    x: &Tensor,
    h: f32,
    coords: &[usize],
) -> Vec<f64> {
    let mut probe = x.clone();
    coords
        .iter()
        .map(|&i| {
            let orig = x.data()[i];
            let (up, down) = (orig + h, orig - h);
            probe.data_mut()[i] = up;
            let f_up = f(&probe);
            probe.data_mut()[i] = down;
            let f_down = f(&probe);
            probe.data_mut()[i] = orig;
            (f_up - f_down) / (up as f64 - down as f64)
        })
        .collect()
}

/// Up to `count` distinct coordinates of a tensor with `len` elements.
pub fn sample_coords(len: usize, count: usize, seed: u64) -> Vec<usize> {
    if count >= len {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, len, count).into_vec();
    idx.sort_unstable();
    idx
}

/// `‖analytic − numeric‖ / max(‖numeric‖, ‖analytic‖)` over the sampled
/// coordinates; 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let scale = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = scale(analytic).max(scale(numeric));
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

/// Picks the analytic gradient entries at `coords`.
pub fn gather(grad: &Tensor, coords: &[usize]) -> Vec<f64> {
    coords.iter().map(|&i| grad.data()[i] as f64).collect()
}

/// Central differences on the smooth piece containing `x`.
///
/// `f` is evaluated once at `x` with a recording [`Kinks`]; the probes at
/// `x ± h` replay those branch choices, so a relu or clamp whose input
/// crosses zero inside the probe interval keeps its branch from `x`.
pub fn frozen_central_differences(
    f: &mut dyn FnMut(&Tensor, &mut Kinks) -> f64,
    x: &Tensor,
    h: f32,
    coords: &[usize],
) -> Vec<f64> {
    let mut at_x = Kinks::record();
    f(x, &mut at_x);
    let mut probe = x.clone();
    coords
        .iter()
        .map(|&i| {
            let orig = x.data()[i];
            let (up, down) = (orig + h, orig - h);
            probe.data_mut()[i] = up;
            let f_up = f(&probe, &mut at_x.replay());
            probe.data_mut()[i] = down;
            let f_down = f(&probe, &mut at_x.replay());
            probe.data_mut()[i] = orig;
            (f_up - f_down) / (up as f64 - down as f64)
        })
        .collect()
}

/// Relative error of `analytic` against [`frozen_central_differences`].
pub fn frozen_gradient_error(
    analytic: &Tensor,
    f: &mut dyn FnMut(&Tensor, &mut Kinks) -> f64,
    x: &Tensor,
    h: f32,
    coords: &[usize],
) -> f64 {
    let numeric = frozen_central_differences(f, x, h, coords);
    relative_error(&gather(analytic, coords), &numeric)
}

pub fn random(shape: &[usize], lo: f32, hi: f32, seed: u64) -> Tensor {
    Tensor::uniform(shape, lo, hi, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Adds small noise to every weight so zero-initialised layers carry
/// gradient too.
pub fn perturbed(bundle: &ModelBundle, seed: u64) -> ModelBundle {
    let mut b = bundle.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in b.params_mut(ParamGroup::All) {
        let noise = Tensor::uniform(p.shape(), -0.1, 0.1, &mut rng);
        p.add_assign(&noise).unwrap();
    }
    b
}

fn probe_weights(shape: &[usize]) -> Tensor {
    random(shape, -1.0, 1.0, 99)
}

/// `mean(out ⊙ r) + 100` on the tape, as an L1 against a far constant.
pub fn probe_loss(tape: &mut Tape, out: Var) -> Var {
    let shape = tape.value(out).shape().to_vec();
    let r = tape.constant(probe_weights(&shape));
    let far = tape.constant(Tensor::full(&shape, -100.0));
    let weighted = tape.mul(out, r).unwrap();
    tape.l1_loss(weighted, far).unwrap()
}

/// The same functional on the `f64` reference output.
pub fn reference_probe(out: &Grid) -> f64 {
    let r = probe_weights(&[out.h, out.w, out.c]);
    let dot: f64 = out.v.iter().zip(r.data()).map(|(a, &b)| a * b as f64).sum();
    dot / out.v.len() as f64 + 100.0
}
