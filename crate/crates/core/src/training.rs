//! Three-phase training: tone-mappers alone, then denoisers against fixed
//! tone-mappers, then everything end to end.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::error::{Error, Result};
use crate::imageio::load_image;
use crate::models::{BoundBundle, ModelBundle, Ordering, ParamGroup};
use crate::numerics::{adam_step, AdamConfig, AdamState, Tape, Tensor, Var};
use crate::pipeline::{process_level, split_patches, PATCH_SIZE};
use crate::pyramid::{decompose, decompose_on_tape, reconstruct_on_tape, LEVELS};

/// Loss weights: one per pyramid level plus the reconstruction term of
/// phase 2.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub levels: [f64; LEVELS],
    pub denoise: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            levels: [2.0, 2.0, 2.0, 1.0],
            denoise: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = self.levels.iter().chain([&self.denoise]);
        if all.clone().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be finite and nonnegative: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    /// Tone-mappers only, per-level targets.
    ToneMap,
    /// Denoisers only, tone-mappers frozen.
    Denoise,
    /// All parameters on the final reconstruction.
    Joint,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::ToneMap, Phase::Denoise, Phase::Joint];

    pub fn number(self) -> u8 {
        match self {
            Phase::ToneMap => 1,
            Phase::Denoise => 2,
            Phase::Joint => 3,
        }
    }

    pub fn from_number(n: u8) -> Option<Self> {
        Phase::ALL.into_iter().find(|p| p.number() == n)
    }

    pub fn trainable(self) -> ParamGroup {
        match self {
            Phase::ToneMap => ParamGroup::ToneMappers,
            Phase::Denoise => ParamGroup::Denoisers,
            Phase::Joint => ParamGroup::All,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseConfig {
    pub phase: Phase,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
}

impl PhaseConfig {
    /// Batch 16 throughout; 500 epochs at 1e-5 for the two pre-training
    /// phases, 1000 at 1e-6 for the joint phase.
    pub fn default_for(phase: Phase) -> Self {
        let (learning_rate, epochs) = match phase {
            Phase::ToneMap | Phase::Denoise => (1e-5, 500),
            Phase::Joint => (1e-6, 1000),
        };
        Self {
            phase,
            batch_size: 16,
            learning_rate,
            epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "phase {}: batch size must be ≥ 1 and learning rate positive",
                self.phase
            )));
        }
        Ok(())
    }
}

/// Noisy input, clean un-tone-mapped target and clean tone-mapped target.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTriplet {
    pub x_noisy: Tensor,
    pub y_merged: Tensor,
    pub y_final: Tensor,
}

impl SampleTriplet {
    pub fn new(x_noisy: Tensor, y_merged: Tensor, y_final: Tensor) -> Result<Self> {
        let s = x_noisy.shape();
        if s.len() != 3 || s[2] != 3 || y_merged.shape() != s || y_final.shape() != s {
            return Err(Error::shape(
                "SampleTriplet",
                format!(
                    "{:?}, {:?}, {:?}",
                    x_noisy.shape(),
                    y_merged.shape(),
                    y_final.shape()
                ),
            ));
        }
        Ok(Self {
            x_noisy,
            y_merged,
            y_final,
        })
    }
}

fn level_terms(
    tape: &mut Tape,
    outputs: &[Var],
    targets: &[Var],
    weights: &[f64],
) -> Result<Vec<(Var, f64)>> {
    outputs
        .iter()
        .zip(targets)
        .zip(weights)
        .map(|((&o, &t), &w)| Ok((tape.l1_loss(o, t)?, w)))
        .collect()
}

/// `Σ λ_i · L1(out_i, target_i)` over all four levels.
pub fn loss_phase1(
    tape: &mut Tape,
    outputs: &[Var; LEVELS],
    targets: &[Var; LEVELS],
    weights: &LossWeights,
) -> Result<Var> {
    let terms = level_terms(tape, outputs, targets, &weights.levels)?;
    tape.weighted_sum(&terms)
}

/// Per-level terms on the three detail levels plus
/// `λd · L1(R(l0, l1, l2, input_base), y_merged)`. The reconstruction
/// uses the untouched input base.
pub fn loss_phase2(
    tape: &mut Tape,
    levels: &[Var; 3],
    input_base: Var,
    targets: &[Var; 3],
    y_merged: Var,
    weights: &LossWeights,
) -> Result<Var> {
    let mut terms = level_terms(tape, levels, targets, &weights.levels[..3])?;
    let recon = reconstruct_on_tape(tape, *levels, input_base)?;
    terms.push((tape.l1_loss(recon, y_merged)?, weights.denoise));
    tape.weighted_sum(&terms)
}

/// `L1(R(l0, l1, l2, base), y_final)` with the tone-mapped base.
pub fn loss_phase3(tape: &mut Tape, levels: &[Var; 3], base: Var, y_final: Var) -> Result<Var> {
    let recon = reconstruct_on_tape(tape, *levels, base)?;
    tape.l1_loss(recon, y_final)
}

fn target_levels(tape: &mut Tape, image: &Tensor) -> Result<[Var; LEVELS]> {
    let p = decompose(image)?;
    let [l0, l1, l2] = p.laplacian;
    Ok([l0, l1, l2, p.base].map(|t| tape.constant(t)))
}

/// Builds one sample's loss for `phase` on `tape`.
pub fn sample_loss(
    tape: &mut Tape,
    nets: &BoundBundle,
    sample: &SampleTriplet,
    phase: Phase,
    ordering: Ordering,
    weights: &LossWeights,
) -> Result<Var> {
    let x = tape.constant(sample.x_noisy.clone());
    let levels = decompose_on_tape(tape, x)?;
    let mut out = levels;
    for (i, &l) in levels.iter().enumerate() {
        let raw_base = phase == Phase::Denoise && i == LEVELS - 1;
        if !raw_base {
            out[i] = process_level(tape, l, i, nets, ordering, phase != Phase::ToneMap)?;
        }
    }
    let detail = [out[0], out[1], out[2]];
    match phase {
        Phase::ToneMap => {
            let targets = target_levels(tape, &sample.y_final)?;
            loss_phase1(tape, &out, &targets, weights)
        }
        Phase::Denoise => {
            let t = target_levels(tape, &sample.y_final)?;
            let y = tape.constant(sample.y_merged.clone());
            loss_phase2(tape, &detail, levels[3], &[t[0], t[1], t[2]], y, weights)
        }
        Phase::Joint => {
            let y = tape.constant(sample.y_final.clone());
            loss_phase3(tape, &detail, out[3], y)
        }
    }
}

/// Mean per-sample loss for one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub loss: f64,
}

/// Runs one phase with a fresh optimiser state. Batches are shuffled with a
/// generator derived from `seed` and the phase; the batch gradient is the
/// mean of the per-sample gradients. Parameters outside the phase's group
/// are never touched.
pub fn run_phase(
    bundle: &mut ModelBundle,
    data: &[SampleTriplet],
    config: &PhaseConfig,
    weights: &LossWeights,
    seed: u64,
) -> Result<Vec<LossRecord>> {
    run_phase_with(bundle, data, config, weights, seed, &mut |_| {})
}

/// [`run_phase`] with a callback after every epoch.
/// Loss and gradients for the phase's trainable parameters on one sample,
/// in [`BoundBundle::vars`] order.
fn sample_gradient(
    bundle: &ModelBundle,
    sample: &SampleTriplet,
    phase: Phase,
    weights: &LossWeights,
) -> Result<(f64, Vec<Tensor>)> {
    let group = phase.trainable();
    let mut tape = Tape::new();
    let nets = bundle.bind(&mut tape, Some(group));
    let loss = sample_loss(&mut tape, &nets, sample, phase, bundle.ordering, weights)?;
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let mut grads = tape.backward(loss)?;
    let g = nets
        .vars(group)
        .into_iter()
        .map(|v| {
            grads
                .take(v)
                .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
        })
        .collect();
    Ok((value, g))
}

pub fn run_phase_with(
    bundle: &mut ModelBundle,
    data: &[SampleTriplet],
    config: &PhaseConfig,
    weights: &LossWeights,
    seed: u64,
    on_epoch: &mut dyn FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    config.validate()?;
    weights.validate()?;
    let phase = config.phase;
    let group = phase.trainable();
    let adam = AdamConfig::with_lr(config.learning_rate);
    let mut state = {
        let params = bundle.params_mut(group);
        let views: Vec<&Tensor> = params.iter().map(|p| &**p).collect();
        AdamState::new(&views)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (phase.number() as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let diverged = |detail: String| Error::Diverged {
                phase: phase.number(),
                epoch,
                batch: b,
                detail,
            };
            // samples run in parallel; the sum is taken in batch order so the
            // result does not depend on the thread count
            let per_sample: Vec<(f64, Vec<Tensor>)> = batch
                .par_iter()
                .map(|&i| sample_gradient(bundle, &data[i], phase, weights))
                .collect::<Result<_>>()?;
            let mut sum: Option<Vec<Tensor>> = None;
            let mut batch_loss = 0.0;
            for (&i, (value, g)) in batch.iter().zip(per_sample) {
                if !value.is_finite() {
                    return Err(diverged(format!("loss {value} on sample {i}")));
                }
                batch_loss += value;
                match &mut sum {
                    None => sum = Some(g),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&g) {
                            a.add_assign(g)?;
                        }
                    }
                }
            }
            let mut grads = sum.expect("batches are nonempty");
            for g in &mut grads {
                g.scale_in_place(1.0 / batch.len() as f32);
            }
            let refs: Vec<&Tensor> = grads.iter().collect();
            let mut params = bundle.params_mut(group);
            adam_step(&mut params, &refs, &mut state, &adam).map_err(|e| match e {
                Error::NonFinite(what) => diverged(what),
                other => other,
            })?;
            epoch_total += batch_loss;
        }
        let record = LossRecord {
            phase,
            epoch,
            loss: epoch_total / data.len() as f64,
        };
        log::info!("phase {} epoch {} loss {:.6}", phase, epoch, record.loss);
        on_epoch(&record);
        history.push(record);
    }
    Ok(history)
}

/// Runs the phases in order, each seeded from `seed`.
pub fn train(
    bundle: &mut ModelBundle,
    data: &[SampleTriplet],
    phases: &[PhaseConfig],
    weights: &LossWeights,
    seed: u64,
) -> Result<Vec<LossRecord>> {
    let mut history = Vec::new();
    for config in phases {
        history.extend(run_phase(bundle, data, config, weights, seed)?);
    }
    Ok(history)
}

/// Mean of [`sample_loss`] over `data` without updating anything.
pub fn evaluate_loss(
    bundle: &ModelBundle,
    data: &[SampleTriplet],
    phase: Phase,
    weights: &LossWeights,
) -> Result<f64> {
    let mut total = 0.0;
    for s in data {
        let mut tape = Tape::new();
        let nets = bundle.bind(&mut tape, None);
        let loss = sample_loss(&mut tape, &nets, s, phase, bundle.ordering, weights)?;
        total += tape.scalar(loss);
    }
    Ok(total / data.len().max(1) as f64)
}

/// Writes `phase,epoch,loss` rows with a header.
pub fn write_loss_csv(records: &[LossRecord], out: &mut dyn Write) -> Result<()> {
    writeln!(out, "phase,epoch,loss")?;
    for r in records {
        writeln!(out, "{},{},{}", r.phase, r.epoch, r.loss)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseConfig {
    /// Standard deviation of the additive Gaussian part.
    pub sigma: f64,
    /// Scale of the signal-dependent Poisson part; 0 disables it.
    pub gain: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            sigma: 0.02,
            gain: 0.01,
        }
    }
}

/// Brightest value of a synthetic clean scene.
pub const SYNTH_EXPOSURE: f32 = 0.3;

/// Fixed tone curve producing `y_final`: gamma 1/2.2 followed by a mild
/// s-curve `0.75v + 0.25(3v² − 2v³)`.
pub fn reference_tone_curve(v: f32) -> f32 {
    let g = v.clamp(0.0, 1.0).powf(1.0 / 2.2);
    0.75 * g + 0.25 * g * g * (3.0 - 2.0 * g)
}

/// Plain gamma 1/2.2, the baseline tone mapping.
pub fn gamma_tone_curve(v: f32) -> f32 {
    v.clamp(0.0, 1.0).powf(1.0 / 2.2)
}

fn synth_scene(rng: &mut ChaCha8Rng, size: usize) -> Tensor {
    let mut img = Tensor::zeros(&[size, size, 3]);
    let s = size as f32;
    // smooth background: per-channel bilinear ramp
    let corners: Vec<[f32; 4]> = (0..3)
        .map(|_| std::array::from_fn(|_| rng.random_range(0.02..0.2)))
        .collect();
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (y as f32 / s, x as f32 / s);
            for (c, k) in corners.iter().enumerate() {
                let top = k[0] + (k[1] - k[0]) * v;
                let bottom = k[2] + (k[3] - k[2]) * v;
                img.set(&[y, x, c], top + (bottom - top) * u);
            }
        }
    }
    let shapes = rng.random_range(3..8);
    for _ in 0..shapes {
        let color: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0..SYNTH_EXPOSURE));
        let (cy, cx) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let (ry, rx) = (rng.random_range(0.05..0.3) * s, rng.random_range(0.05..0.3) * s);
        let disc = rng.random_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let (dy, dx) = ((y as f32 - cy) / ry, (x as f32 - cx) / rx);
                let inside = if disc {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if inside {
                    for (c, &v) in color.iter().enumerate() {
                        img.set(&[y, x, c], v);
                    }
                }
            }
        }
    }
    img.map(|v| v.clamp(0.0, SYNTH_EXPOSURE))
}

fn add_noise(clean: &Tensor, noise: &NoiseConfig, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if !(noise.sigma >= 0.0 && noise.gain >= 0.0) {
        return Err(Error::InvalidArgument(format!("invalid noise {noise:?}")));
    }
    let gauss = Normal::new(0.0, noise.sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut out = clean.clone();
    for v in out.data_mut() {
        let mut x = *v as f64;
        if noise.gain > 0.0 && x > 0.0 {
            let counts = Poisson::new(x / noise.gain)
                .map_err(|e| Error::InvalidArgument(e.to_string()))?
                .sample(rng);
            x = counts * noise.gain;
        }
        if noise.sigma > 0.0 {
            x += gauss.sample(rng);
        }
        *v = x.clamp(0.0, 1.0) as f32;
    }
    Ok(out)
}

/// `n` low-exposure synthetic scenes of 224×224: smooth gradients with
/// flat discs and rectangles, all in [0, 0.3]. The noisy input adds
/// Poisson-Gaussian noise, `y_merged` is the clean scene and `y_final` is
/// [`reference_tone_curve`] applied to it.
pub fn synth_dataset(n: usize, seed: u64, noise: &NoiseConfig) -> Result<Vec<SampleTriplet>> {
    synth_dataset_sized(n, seed, noise, PATCH_SIZE)
}

pub fn synth_dataset_sized(
    n: usize,
    seed: u64,
    noise: &NoiseConfig,
    size: usize,
) -> Result<Vec<SampleTriplet>> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let clean = synth_scene(&mut rng, size);
            let noisy = add_noise(&clean, noise, &mut rng)?;
            let y_final = clean.map(reference_tone_curve);
            SampleTriplet::new(noisy, clean, y_final)
        })
        .collect()
}

/// A manifest line that could not be used.
#[derive(Clone, Debug, PartialEq)]
pub struct SkippedScene {
    pub line: usize,
    pub reason: String,
}

/// Training patches from a manifest plus the scenes that were skipped.
#[derive(Clone, Debug, Default)]
pub struct Ingested {
    pub samples: Vec<SampleTriplet>,
    pub skipped: Vec<SkippedScene>,
}

/// Reads `input<TAB>merged<TAB>final` lines (relative paths resolve
/// against the manifest's directory) and tiles every scene into
/// half-overlapping 224×224 patch triplets. Blank lines and `#` comments are
/// ignored; unusable scenes are logged and skipped.
pub fn ingest_manifest(path: impl AsRef<Path>) -> Result<Ingested> {
    let path = path.as_ref();
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Ingested::default();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        match ingest_scene(&base, trimmed) {
            Ok(mut s) => out.samples.append(&mut s),
            Err(e) => {
                log::warn!("{}:{}: skipping scene: {e}", path.display(), n + 1);
                out.skipped.push(SkippedScene {
                    line: n + 1,
                    reason: e.to_string(),
                });
            }
        }
    }
    if out.samples.is_empty() {
        log::warn!("{}: no usable scenes", path.display());
    }
    Ok(out)
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn ingest_scene(base: &Path, line: &str) -> Result<Vec<SampleTriplet>> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 3 {
        return Err(Error::InvalidArgument(format!(
            "expected 3 tab-separated paths, found {}",
            fields.len()
        )));
    }
    let images = fields
        .iter()
        .map(|f| load_image(resolve(base, f.trim())))
        .collect::<Result<Vec<_>>>()?;
    if images[1].shape() != images[0].shape() || images[2].shape() != images[0].shape() {
        return Err(Error::shape(
            "ingest_manifest",
            format!(
                "triplet sizes differ: {:?}, {:?}, {:?}",
                images[0].shape(),
                images[1].shape(),
                images[2].shape()
            ),
        ));
    }
    let mut patches = images
        .iter()
        .map(|img| split_patches(img, PATCH_SIZE).map(|(_, p)| p))
        .collect::<Result<Vec<_>>>()?;
    let finals = patches.pop().unwrap();
    let merged = patches.pop().unwrap();
    let inputs = patches.pop().unwrap();
    inputs
        .into_iter()
        .zip(merged)
        .zip(finals)
        .map(|((x, m), f)| SampleTriplet::new(x, m, f))
        .collect()
}
