//! Hand-built weights with known behaviour, used as fixtures and for
//! pass-through checkpoints.

use super::{DenoiserNet, ModelConfig, ToneMapperNet, BASE_LAYERS};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Interior knots of the piecewise-linear logit; half sit below 0.5 and
/// half above.
const KNOTS: usize = 40;
const HALF: usize = KNOTS / 2;
/// Units per channel in each hidden layer: one carrier plus `HALF` hinges.
const UNITS: usize = HALF + 1;
/// Keeps the carrier unit of the second layer above zero.
const OFFSET: f64 = 50.0;
/// Logit is clipped to `[δ, 1 − δ]` before fitting.
const CLIP: f64 = 1e-4;
const WARP: f64 = 0.65;

/// Denoiser whose multiplier is `sigmoid(bias)` everywhere.
pub fn constant_denoiser(width: usize, bias: f32) -> DenoiserNet {
    let mut net = DenoiserNet::zeros(width);
    let last = net.layers.len() - 1;
    net.layers[last].bias = Tensor::full(&[3], bias);
    net
}

/// Knot positions on [0, 1], endpoints included, symmetric about 0.5 and
/// dense near both ends where the logit bends hardest.
fn knots() -> Vec<f64> {
    (0..KNOTS + 2)
        .map(|i| {
            let u = i as f64 / (KNOTS + 1) as f64;
            let t = (1.0 - (std::f64::consts::PI * u).cos()) / 2.0;
            let c = 2.0 * t - 1.0;
            0.5 + c.signum() * c.abs().powf(WARP) / 2.0
        })
        .collect()
}

fn clipped_logit(t: f64) -> f64 {
    let t = t.clamp(CLIP, 1.0 - CLIP);
    (t / (1.0 - t)).ln()
}

/// Knot values: the target logit at each knot, shifted by half the mean signed
/// interpolation error of the adjacent segments so the error alternates
/// around zero instead of sitting on one side.
fn knot_values(p: &[f64], target: &dyn Fn(f64) -> f64) -> Vec<f64> {
    const SAMPLES: usize = 200;
    let f: Vec<f64> = p.iter().map(|&t| target(t)).collect();
    let seg_err: Vec<f64> = (0..p.len() - 1)
        .map(|k| {
            (0..=SAMPLES)
                .map(|i| {
                    let a = i as f64 / SAMPLES as f64;
                    let t = p[k] + a * (p[k + 1] - p[k]);
                    f[k] + a * (f[k + 1] - f[k]) - target(t)
                })
                .fold(0.0, |m: f64, e| if e.abs() > m.abs() { e } else { m })
        })
        .collect();
    (0..p.len())
        .map(|k| {
            let near: Vec<f64> = [k.checked_sub(1), (k < seg_err.len()).then_some(k)]
                .into_iter()
                .flatten()
                .map(|j| seg_err[j])
                .collect();
            f[k] - near.iter().sum::<f64>() / near.len() as f64 / 2.0
        })
        .collect()
}

/// Tone-mapper whose output reproduces its input on [0, 1] to within about
/// 3.2e-4.
pub fn identity_tonemapper(config: &ModelConfig) -> Result<ToneMapperNet> {
    curve_tonemapper(config, &|t| t)
}

/// Tone-mapper applying `curve` pointwise on [0, 1] (in the network's unit
/// range). The base path computes a piecewise-linear fit of
/// `logit(curve(t))` that the final sigmoid undoes, and the zero modulation
/// layers give scale 1, shift 0.
///
/// Below 0.5 the hinges face left, `relu(p − x)`, and above it right, so
/// the steep end segments never cancel against each other in the middle.
pub fn curve_tonemapper(
    config: &ModelConfig,
    curve: &dyn Fn(f64) -> f64,
) -> Result<ToneMapperNet> {
    let width = config.tonemap_width;
    if width < 3 * UNITS {
        return Err(Error::InvalidArgument(format!(
            "identity tone-mapper needs width ≥ {}, got {width}",
            3 * UNITS
        )));
    }
    let p = knots();
    let g = knot_values(&p, &|t| clipped_logit(curve(t)));
    let slopes: Vec<f64> = (0..=KNOTS)
        .map(|k| (g[k + 1] - g[k]) / (p[k + 1] - p[k]))
        .collect();
    // slope change at interior knot j (1-based)
    let d = |j: usize| slopes[j] - slopes[j - 1];
    // line through the centre segment
    let sc = slopes[HALF];
    let intercept = g[HALF] - sc * p[HALF];

    let mut net = ToneMapperNet::zeros(config);
    debug_assert_eq!(net.base.len(), BASE_LAYERS);
    let (first, rest) = net.base.split_at_mut(1);
    let (second, third) = rest.split_at_mut(1);
    let (l1, l2, l3) = (&mut first[0], &mut second[0], &mut third[0]);

    for c in 0..3 {
        let u = c * UNITS;
        // layer 1: a0 = x + 1, a_j = relu(p_j − x)
        l1.weight.set(&[u, c], 1.0);
        l1.bias.data_mut()[u] = 1.0;
        for j in 1..=HALF {
            l1.weight.set(&[u + j, c], -1.0);
            l1.bias.data_mut()[u + j] = p[j] as f32;
        }
        // layer 2: q = centre line + left hinges + OFFSET; right hinges
        // relu(x − p) rebuilt from a0
        l2.weight.set(&[u, u], sc as f32);
        for j in 1..=HALF {
            l2.weight.set(&[u, u + j], d(j) as f32);
        }
        l2.bias.data_mut()[u] = (intercept - sc + OFFSET) as f32;
        for j in 1..=HALF {
            l2.weight.set(&[u + j, u], 1.0);
            l2.bias.data_mut()[u + j] = (-1.0 - p[HALF + j]) as f32;
        }
        // layer 3: logit estimate
        l3.weight.set(&[c, u], 1.0);
        for j in 1..=HALF {
            l3.weight.set(&[c, u + j], d(HALF + j) as f32);
        }
        l3.bias.data_mut()[c] = -OFFSET as f32;
    }
    Ok(net)
}
