use proptest::prelude::*;

use super::*;
use crate::models::{constant_denoiser, curve_tonemapper, init_weights, ModelConfig, ParamGroup};
use crate::pyramid::decompose;
use crate::testing::reference::{self, Grid, Kinks};
use crate::testing::{
    frozen_gradient_error, perturbed, probe_loss, random, reference_probe, sample_coords,
};

/// Smooth colour gradients with a little texture, inside [0.1, 0.9].
fn scene(h: usize, w: usize, seed: u64) -> Tensor {
    let noise = random(&[h, w, 3], -0.05, 0.05, seed);
    let mut t = Tensor::zeros(&[h, w, 3]);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (y as f32 / h as f32, x as f32 / w as f32);
            let base = [0.2 + 0.5 * u, 0.3 + 0.4 * v, 0.5 + 0.2 * (6.0 * u * v).sin()];
            for c in 0..3 {
                t.set(&[y, x, c], base[c] + noise.at(&[y, x, c]));
            }
        }
    }
    t
}

fn identity(ordering: Ordering) -> ModelBundle {
    ModelBundle::identity(&ModelConfig::default(), ordering).unwrap()
}

#[test]
fn config_validates_patch_size() {
    assert!(EnhanceConfig::new(Ordering::Tfdl, 224).is_ok());
    assert!(EnhanceConfig::new(Ordering::Dftl, 64).is_ok());
    assert!(EnhanceConfig::new(Ordering::Tfdl, 100).is_err());
    assert!(EnhanceConfig::new(Ordering::Tfdl, 56).is_err());
    assert_eq!(EnhanceConfig::default().stride(), 112);
}

#[test]
fn grid_covers_image_with_half_overlap() {
    let g = PatchGrid::new(224, 336, 3, 224).unwrap();
    assert_eq!(g.len(), 2);
    assert_eq!(g.col_origins, vec![0, 112]);
    let g = PatchGrid::new(500, 300, 3, 224).unwrap();
    assert_eq!(g.row_origins, vec![0, 112, 224, 276]);
    assert_eq!(g.col_origins, vec![0, 76]);
    let g = PatchGrid::new(100, 100, 3, 224).unwrap();
    assert_eq!((g.len(), g.padded()), (1, (224, 224)));
    assert!(PatchGrid::new(0, 10, 3, 224).is_err());
}

#[test]
fn reflection_stays_in_range_and_mirrors() {
    assert_eq!(reflect(0, 1), 0);
    assert_eq!(reflect(5, 1), 0);
    let got: Vec<usize> = (0..10).map(|i| reflect(i, 4)).collect();
    assert_eq!(got, vec![0, 1, 2, 3, 2, 1, 0, 1, 2, 3]);
}

#[test]
fn window_is_symmetric_and_sums_at_half_overlap() {
    let w = Window::new(224);
    let p = w.profile();
    assert!(p.iter().all(|&v| v >= WINDOW_FLOOR && v <= 1.0));
    for t in 0..112 {
        assert!((p[t] - p[223 - t]).abs() < 1e-12);
        assert!((p[t] + p[t + 112] - (1.0 + WINDOW_FLOOR)).abs() < 1e-12);
    }
    assert!(p[0] < 1e-3 + 1e-4);
}

#[test]
fn small_image_is_padded_and_cropped_back() {
    let img = scene(100, 100, 1);
    let (grid, patches) = split_patches(&img, 224).unwrap();
    assert_eq!(patches.len(), 1);
    assert_eq!(patches[0].shape(), &[224, 224, 3]);
    assert_eq!(patches[0].at(&[100, 5, 1]), img.at(&[98, 5, 1]));
    let back = merge_patches(&patches, &grid, &Window::new(224)).unwrap();
    assert_eq!(back.shape(), img.shape());
    assert!(back.max_abs_diff(&img).unwrap() < 1e-6);
}

#[test]
fn merge_rejects_mismatched_input() {
    let img = scene(224, 336, 2);
    let (grid, patches) = split_patches(&img, 224).unwrap();
    assert!(merge_patches(&patches[..1], &grid, &Window::new(224)).is_err());
    assert!(merge_patches(&patches, &grid, &Window::new(112)).is_err());
    assert!(split_patches(&Tensor::zeros(&[10, 10]), 224).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn split_then_merge_is_lossless(h in 1usize..150, w in 1usize..150, seed in 0u64..1000) {
        let img = random(&[h, w, 2], 0.0, 1.0, seed);
        let (grid, patches) = split_patches(&img, 64).unwrap();
        let back = merge_patches(&patches, &grid, &Window::new(64)).unwrap();
        prop_assert!(back.max_abs_diff(&img).unwrap() < 1e-5);
    }

    #[test]
    fn merged_value_lies_between_overlapping_patches(
        h in 64usize..200, w in 64usize..200, seed in 0u64..1000
    ) {
        let grid = PatchGrid::new(h, w, 1, 64).unwrap();
        let values = random(&[grid.len()], 0.0, 1.0, seed);
        let patches: Vec<Tensor> = values.data().iter().map(|&v| Tensor::full(&[64, 64, 1], v)).collect();
        let merged = merge_patches(&patches, &grid, &Window::new(64)).unwrap();
        for y in 0..h {
            for x in 0..w {
                let covering: Vec<f32> = grid
                    .origins()
                    .iter()
                    .zip(values.data())
                    .filter(|((r, c), _)| (*r..r + 64).contains(&y) && (*c..c + 64).contains(&x))
                    .map(|(_, &v)| v)
                    .collect();
                let lo = covering.iter().cloned().fold(f32::INFINITY, f32::min);
                let hi = covering.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let m = merged.at(&[y, x, 0]);
                prop_assert!(m >= lo - 1e-6 && m <= hi + 1e-6);
            }
        }
    }
}

#[test]
fn overlap_blend_moves_monotonically_between_patches() {
    let grid = PatchGrid::new(64, 96, 1, 64).unwrap();
    assert_eq!(grid.col_origins, vec![0, 32]);
    let patches = vec![Tensor::full(&[64, 64, 1], 0.0), Tensor::full(&[64, 64, 1], 1.0)];
    let merged = merge_patches(&patches, &grid, &Window::new(64)).unwrap();
    let row: Vec<f32> = (0..96).map(|x| merged.at(&[10, x, 0])).collect();
    assert!(row[..32].iter().all(|&v| v == 0.0));
    assert!(row[64..].iter().all(|&v| v == 1.0));
    assert!(row.windows(2).all(|p| p[1] >= p[0]));
}

#[test]
fn constant_image_stays_constant_through_identity() {
    let img = Tensor::full(&[128, 160, 3], 0.37);
    let cfg = EnhanceConfig::new(Ordering::Tfdl, 64).unwrap();
    let out = enhance_image(&img, &identity(Ordering::Tfdl), &cfg).unwrap();
    let first = out.data()[0];
    assert!((first - 0.37).abs() < 1e-3);
    assert!(out.data().iter().all(|&v| (v - first).abs() < 1e-5));
}

#[test]
fn identity_bundle_reproduces_image() {
    for ordering in [Ordering::Tfdl, Ordering::Dftl] {
        let img = scene(260, 300, 3);
        let out = enhance_image(&img, &identity(ordering), &EnhanceConfig::new(ordering, 224).unwrap())
            .unwrap();
        assert_eq!(out.shape(), img.shape());
        let err = out.max_abs_diff(&img).unwrap();
        assert!(err < 1e-3, "{ordering}: {err}");
    }
}

#[test]
fn identity_bundle_reproduces_ramp() {
    let mut ramp = Tensor::zeros(&[64, 64, 3]);
    for y in 0..64 {
        for x in 0..64 {
            for c in 0..3 {
                ramp.set(&[y, x, c], (x + y) as f32 / 126.0);
            }
        }
    }
    let out = enhance_patch(&ramp, &identity(Ordering::Tfdl)).unwrap();
    assert!(out.max_abs_diff(&ramp).unwrap() < 1e-3);
}

#[test]
fn output_is_clamped() {
    let img = scene(64, 64, 4);
    let out = enhance_patch(&img, &perturbed(&init_weights(4), 5)).unwrap();
    assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn rejects_non_finite_and_undersized_patches() {
    let mut img = scene(64, 64, 6);
    img.set(&[3, 3, 0], f32::NAN);
    let cfg = EnhanceConfig::new(Ordering::Tfdl, 64).unwrap();
    assert!(matches!(
        enhance_image(&img, &identity(Ordering::Tfdl), &cfg),
        Err(Error::NonFinite(_))
    ));
    assert!(enhance_patch(&scene(32, 32, 6), &identity(Ordering::Tfdl)).is_err());
}

/// With `f(x) = x/2` as denoiser and `g(x) = x + 0.1` as the finest
/// tone-mapper, the two orders give `l0/2 + 0.05` and `l0/2 + 0.1`.
#[test]
fn orderings_differ_for_non_commuting_stages() {
    let cfg = ModelConfig::default();
    let img = scene(64, 64, 7);
    let l0 = decompose(&img).unwrap().laplacian[0].clone();
    let mut outs = Vec::new();
    for ordering in [Ordering::Tfdl, Ordering::Dftl] {
        let mut b = identity(ordering);
        b.denoisers[0] = constant_denoiser(cfg.denoiser_width, 0.0);
        b.tonemappers[0] = curve_tonemapper(&cfg, &|t| t + 0.05).unwrap();
        outs.push(enhance_patch(&img, &b).unwrap());
    }
    for (out, shift) in outs.iter().zip([0.05f32, 0.1]) {
        let expected = img.zip_map(&l0, |x, l| x - l / 2.0 + shift).unwrap();
        let err = out.max_abs_diff(&expected).unwrap();
        assert!(err < 2e-3, "shift {shift}: {err}");
    }
    let gap = outs[1].zip_map(&outs[0], |a, b| a - b).unwrap();
    assert!((gap.mean() - 0.05).abs() < 1e-3);
}

#[test]
fn patch_gradients_match_finite_differences() {
    for ordering in [Ordering::Tfdl, Ordering::Dftl] {
        let mut bundle = perturbed(&init_weights(41), 42);
        bundle.ordering = ordering;
        // strong texture so every level carries signal
        let x = random(&[64, 64, 3], 0.0, 1.0, 43);

        let mut tape = Tape::new();
        let nets = bundle.bind(&mut tape, Some(ParamGroup::All));
        let xv = tape.leaf(x.clone().with_grad());
        let y = enhance_patch_unclamped(&mut tape, xv, &nets, ordering).unwrap();
        let y = tape.clamp01(y);
        let loss = probe_loss(&mut tape, y);
        let grads = tape.backward(loss).unwrap();

        let mut f = |p: &Tensor, k: &mut Kinks| {
            reference_probe(&reference::enhance_patch(&Grid::from_tensor(p), &bundle, k))
        };
        let coords = sample_coords(x.len(), 40, 44);
        let err = frozen_gradient_error(grads.get(xv).unwrap(), &mut f, &x, 1e-3, &coords);
        assert!(err < 1e-3, "{ordering} input: {err}");

        let probes = [
            ("tonemap0 base0 weight", nets.tonemappers[0].vars()[0], bundle.tonemappers[0].base[0].weight.clone()),
            ("tonemap3 base2 bias", nets.tonemappers[3].vars()[5], bundle.tonemappers[3].base[2].bias.clone()),
            ("denoise1 layer0 weight", nets.denoisers[1].vars()[0], bundle.denoisers[1].layers[0].weight.clone()),
        ];
        for (i, (name, var, p0)) in probes.into_iter().enumerate() {
            let mut f = |p: &Tensor, k: &mut Kinks| {
                let mut b = bundle.clone();
                match i {
                    0 => b.tonemappers[0].base[0].weight = p.clone(),
                    1 => b.tonemappers[3].base[2].bias = p.clone(),
                    _ => b.denoisers[1].layers[0].weight = p.clone(),
                }
                reference_probe(&reference::enhance_patch(&Grid::from_tensor(&x), &b, k))
            };
            let coords = sample_coords(p0.len(), 40, 45 + i as u64);
            let err = frozen_gradient_error(grads.get(var).unwrap(), &mut f, &p0, 1e-3, &coords);
            assert!(err < 1e-3, "{ordering} {name}: {err}");
        }
    }
}
