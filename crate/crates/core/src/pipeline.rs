//! Whole-image enhancement over half-overlapping patches.
//!
//! Each patch is decomposed into a Laplacian pyramid, every detail level is
//! tone-mapped and denoised in the configured order, the base level is only
//! tone-mapped, and the reconstruction is clamped to [0, 1]. Patches are
//! blended back with a separable raised-cosine window and per-pixel
//! normalisation.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::models::{denoise_level, tonemap_level, BoundBundle, ModelBundle, Ordering};
use crate::numerics::{Tape, Tensor, Var};
use crate::pyramid::{decompose_on_tape, reconstruct_on_tape, DETAIL_LEVELS, LEVELS};
use crate::transforms::axis_origins;

pub const PATCH_SIZE: usize = 224;
/// Floor of the blending window, keeping border weights away from zero.
pub const WINDOW_FLOOR: f64 = 1e-3;
/// Smallest patch whose coarsest levels still fit a denoiser tile and the
/// tone-mapper's condition path.
pub const MIN_PATCH_SIZE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EnhanceConfig {
    pub ordering: Ordering,
    pub patch_size: usize,
}

impl EnhanceConfig {
    pub fn new(ordering: Ordering, patch_size: usize) -> Result<Self> {
        if patch_size % 8 != 0 || patch_size < MIN_PATCH_SIZE {
            return Err(Error::InvalidArgument(format!(
                "patch size {patch_size} must be a multiple of 8 and at least {MIN_PATCH_SIZE}"
            )));
        }
        Ok(Self {
            ordering,
            patch_size,
        })
    }

    /// Half-overlap stride.
    pub fn stride(&self) -> usize {
        self.patch_size / 2
    }
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        Self {
            ordering: Ordering::Tfdl,
            patch_size: PATCH_SIZE,
        }
    }
}

/// Patch layout over an image, padded by reflection when the image is
/// smaller than one patch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub row_origins: Vec<usize>,
    pub col_origins: Vec<usize>,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, channels: usize, patch_size: usize) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "empty image {height}x{width}x{channels}"
            )));
        }
        if patch_size < 2 || patch_size % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "patch size {patch_size} must be even"
            )));
        }
        let stride = patch_size / 2;
        Ok(Self {
            height,
            width,
            channels,
            patch_size,
            row_origins: axis_origins(height.max(patch_size), patch_size, stride),
            col_origins: axis_origins(width.max(patch_size), patch_size, stride),
        })
    }

    /// Padded extent, at least one patch per axis.
    pub fn padded(&self) -> (usize, usize) {
        (self.height.max(self.patch_size), self.width.max(self.patch_size))
    }

    pub fn origins(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.len());
        for &r in &self.row_origins {
            for &c in &self.col_origins {
                out.push((r, c));
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.row_origins.len() * self.col_origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Reflection without repeating the edge sample; total for any index.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let k = i % period;
    if k < n {
        k
    } else {
        period - k
    }
}

/// Separable window `w(y)·w(x)` with
/// `w(t) = ε + (1 − ε)·sin²(π(t + ½)/P)`. At half overlap the unfloored
/// profiles of neighbouring patches sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    profile: Vec<f64>,
}

impl Window {
    pub fn new(patch_size: usize) -> Self {
        let p = patch_size as f64;
        let profile = (0..patch_size)
            .map(|t| {
                let s = (PI * (t as f64 + 0.5) / p).sin();
                WINDOW_FLOOR + (1.0 - WINDOW_FLOOR) * s * s
            })
            .collect();
        Self { profile }
    }

    pub fn profile(&self) -> &[f64] {
        &self.profile
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.profile[y] * self.profile[x]
    }
}

/// Cuts `image` into overlapping patches, reflect-padding small images.
pub fn split_patches(image: &Tensor, patch_size: usize) -> Result<(PatchGrid, Vec<Tensor>)> {
    if image.rank() != 3 {
        return Err(Error::shape("split_patches", "image must be [H, W, C]"));
    }
    let s = image.shape();
    let grid = PatchGrid::new(s[0], s[1], s[2], patch_size)?;
    let c = grid.channels;
    let data = image.data();
    let patches = grid
        .origins()
        .into_iter()
        .map(|(r, col)| {
            let mut out = Vec::with_capacity(patch_size * patch_size * c);
            for i in 0..patch_size {
                let y = reflect(r + i, grid.height);
                for j in 0..patch_size {
                    let x = reflect(col + j, grid.width);
                    out.extend_from_slice(&data[(y * grid.width + x) * c..][..c]);
                }
            }
            Tensor::new(&[patch_size, patch_size, c], out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((grid, patches))
}

/// Window-weighted average of the patches, cropped to the source size.
pub fn merge_patches(patches: &[Tensor], grid: &PatchGrid, window: &Window) -> Result<Tensor> {
    let p = grid.patch_size;
    if patches.len() != grid.len() || window.profile.len() != p {
        return Err(Error::shape(
            "merge_patches",
            format!(
                "{} patches and window {} for a grid of {} patches of {p}",
                patches.len(),
                window.profile.len(),
                grid.len()
            ),
        ));
    }
    let c = grid.channels;
    let (ph, pw) = grid.padded();
    let mut num = vec![0.0f64; ph * pw * c];
    let mut den = vec![0.0f64; ph * pw];
    for (patch, (r, col)) in patches.iter().zip(grid.origins()) {
        if patch.shape() != [p, p, c] {
            return Err(Error::shape(
                "merge_patches",
                format!("patch {:?} does not match [{p}, {p}, {c}]", patch.shape()),
            ));
        }
        let d = patch.data();
        for i in 0..p {
            for j in 0..p {
                let w = window.at(i, j);
                let dst = (r + i) * pw + col + j;
                den[dst] += w;
                for ch in 0..c {
                    num[dst * c + ch] += w * d[(i * p + j) * c + ch] as f64;
                }
            }
        }
    }
    let mut out = Vec::with_capacity(grid.height * grid.width * c);
    for y in 0..grid.height {
        for x in 0..grid.width {
            let k = y * pw + x;
            for ch in 0..c {
                out.push((num[k * c + ch] / den[k]) as f32);
            }
        }
    }
    Tensor::new(&[grid.height, grid.width, c], out)
}

/// One pyramid level through its networks. Levels `0..3` are signed detail
/// levels; level 3 is the base and is only tone-mapped. Without
/// `denoise` the detail levels are only tone-mapped as well.
pub fn process_level(
    tape: &mut Tape,
    x: Var,
    level: usize,
    nets: &BoundBundle,
    ordering: Ordering,
    denoise: bool,
) -> Result<Var> {
    if level >= LEVELS {
        return Err(Error::InvalidArgument(format!("no pyramid level {level}")));
    }
    let tm = &nets.tonemappers[level];
    if level == DETAIL_LEVELS {
        return tonemap_level(tape, x, tm, false);
    }
    if !denoise {
        return tonemap_level(tape, x, tm, true);
    }
    let dn = &nets.denoisers[level];
    match ordering {
        Ordering::Tfdl => {
            let t = tonemap_level(tape, x, tm, true)?;
            denoise_level(tape, t, dn)
        }
        Ordering::Dftl => {
            let d = denoise_level(tape, x, dn)?;
            tonemap_level(tape, d, tm, true)
        }
    }
}

/// Full patch graph on a tape, without the final clamp.
pub fn enhance_patch_unclamped(
    tape: &mut Tape,
    patch: Var,
    nets: &BoundBundle,
    ordering: Ordering,
) -> Result<Var> {
    let levels = decompose_on_tape(tape, patch)?;
    let mut out = levels;
    for (i, &l) in levels.iter().enumerate() {
        out[i] = process_level(tape, l, i, nets, ordering, true)?;
    }
    reconstruct_on_tape(tape, [out[0], out[1], out[2]], out[3])
}

/// Enhances one patch with the bundle's own ordering.
pub fn enhance_patch(patch: &Tensor, bundle: &ModelBundle) -> Result<Tensor> {
    enhance_patch_with(patch, bundle, bundle.ordering)
}

pub fn enhance_patch_with(patch: &Tensor, bundle: &ModelBundle, ordering: Ordering) -> Result<Tensor> {
    let mut tape = Tape::new();
    let nets = bundle.bind(&mut tape, None);
    let x = tape.constant(patch.clone());
    let y = enhance_patch_unclamped(&mut tape, x, &nets, ordering)?;
    let y = tape.clamp01(y);
    Ok(tape.value(y).clone())
}

/// Split, enhance every patch, merge and crop back to the input size.
pub fn enhance_image(image: &Tensor, bundle: &ModelBundle, config: &EnhanceConfig) -> Result<Tensor> {
    if !image.is_finite() {
        return Err(Error::NonFinite("input image".into()));
    }
    let (grid, patches) = split_patches(image, config.patch_size)?;
    let enhanced = patches
        .par_iter()
        .map(|p| enhance_patch_with(p, bundle, config.ordering))
        .collect::<Result<Vec<_>>>()?;
    merge_patches(&enhanced, &grid, &Window::new(config.patch_size))
}

#[cfg(test)]
mod tests;
