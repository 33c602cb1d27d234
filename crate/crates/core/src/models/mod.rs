//! Per-level networks: the DCT multiplier denoiser and the conditional
//! tone-mapper, plus the bundle that holds one of each per pyramid level.

mod checkpoint;
mod rig;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::pyramid::{DETAIL_LEVELS, LEVELS};
use crate::transforms::{
    Dct2Map, ExtractTiles, MergeTilesAverage, TileGeometry, DEFAULT_TILE_STRIDE, TILE,
};

pub use checkpoint::{load_checkpoint, load_checkpoint_with, save_checkpoint, FORMAT_VERSION};
pub use rig::{constant_denoiser, curve_tonemapper, identity_tonemapper};

/// Smallest level side the tone-mapper accepts.
pub const MIN_TONEMAP_SIDE: usize = 8;

const DENOISER_LAYERS: usize = 5;
const BASE_LAYERS: usize = 3;
const COND_LAYERS: usize = 3;

/// Initial bias of the denoiser output layer; sigmoid(2) ≈ 0.88.
const DENOISER_OUTPUT_BIAS: f32 = 2.0;
/// Output bias of a pass-through denoiser; sigmoid(20) = 1 − 2e-9.
pub const PASS_THROUGH_BIAS: f32 = 20.0;
/// Shrinks the tone-mapper output layer at init so fresh nets start near
/// a flat mid-range response rather than a random one.
const TONEMAP_OUTPUT_GAIN: f32 = 0.1;

/// Hidden widths. Both networks are 3 channels in and out.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub denoiser_width: usize,
    pub tonemap_width: usize,
    pub cond_widths: [usize; COND_LAYERS],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            denoiser_width: 32,
            tonemap_width: 64,
            cond_widths: [16, 32, 64],
        }
    }
}

/// Which per-level operator runs first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ordering {
    /// Denoise first, tone-map last.
    Dftl,
    /// Tone-map first, denoise last.
    Tfdl,
}

impl Ordering {
    pub fn to_byte(self) -> u8 {
        match self {
            Ordering::Dftl => 0,
            Ordering::Tfdl => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Ordering::Dftl),
            1 => Some(Ordering::Tfdl),
            _ => None,
        }
    }
}

impl fmt::Display for Ordering {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ordering::Dftl => "dftl",
            Ordering::Tfdl => "tfdl",
        })
    }
}

impl FromStr for Ordering {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dftl" => Ok(Ordering::Dftl),
            "tfdl" => Ok(Ordering::Tfdl),
            other => Err(Error::InvalidArgument(format!(
                "unknown ordering {other:?} (expected dftl or tfdl)"
            ))),
        }
    }
}

/// A 1×1 convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `[cout, cin]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn zeros(cin: usize, cout: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[cout, cin]),
            bias: Tensor::zeros(&[cout]),
        }
    }

    /// Uniform fan-in init with bound `gain·√(6/cin)`, zero bias.
    fn fan_in<R: Rng + ?Sized>(cin: usize, cout: usize, gain: f32, rng: &mut R) -> Self {
        let bound = gain * (6.0 / cin as f32).sqrt();
        Self {
            weight: Tensor::uniform(&[cout, cin], -bound, bound, rng),
            bias: Tensor::zeros(&[cout]),
        }
    }

    pub fn cin(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn cout(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// A 3×3 convolution, weight layout `[cout, 3, 3, cin]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv {
    fn zeros(cin: usize, cout: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[cout, 3, 3, cin]),
            bias: Tensor::zeros(&[cout]),
        }
    }

    fn fan_in<R: Rng + ?Sized>(cin: usize, cout: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (9 * cin) as f32).sqrt();
        Self {
            weight: Tensor::uniform(&[cout, 3, 3, cin], -bound, bound, rng),
            bias: Tensor::zeros(&[cout]),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Pointwise multiplier network applied to DCT coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserNet {
    pub layers: Vec<Dense>,
}

impl DenoiserNet {
    pub fn zeros(width: usize) -> Self {
        let mut dims = vec![3];
        dims.extend([width; DENOISER_LAYERS - 1]);
        dims.push(3);
        Self {
            layers: dims.windows(2).map(|d| Dense::zeros(d[0], d[1])).collect(),
        }
    }

    fn init<R: Rng + ?Sized>(width: usize, rng: &mut R) -> Self {
        let mut net = Self::zeros(width);
        let last = net.layers.len() - 1;
        for layer in &mut net.layers[..last] {
            *layer = Dense::fan_in(layer.cin(), layer.cout(), 1.0, rng);
        }
        net.layers[last].bias = Tensor::full(&[3], DENOISER_OUTPUT_BIAS);
        net
    }

    fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.layer{i}.weight"), &l.weight));
            out.push((format!("{prefix}.layer{i}.bias"), &l.bias));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Puts the weights on `tape`; they require gradients iff `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundDenoiser {
        BoundDenoiser(bind_all(tape, self.named_params(""), trainable))
    }

    /// Multiplier map for `[.., 3]` coefficients, no tape.
    pub fn multiplier(&self, coeffs: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let net = self.bind(&mut tape, false);
        let x = tape.constant(coeffs.clone());
        let m = net.multiplier(&mut tape, x)?;
        Ok(tape.value(m).clone())
    }

    /// [`denoise_level`] without gradient recording.
    pub fn denoise(&self, level: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let net = self.bind(&mut tape, false);
        let x = tape.constant(level.clone());
        let y = denoise_level(&mut tape, x, &net)?;
        Ok(tape.value(y).clone())
    }

    /// Multiply-accumulates per coefficient position.
    fn macs_per_position(&self) -> usize {
        self.layers.iter().map(|l| l.cin() * l.cout()).sum()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }
}

/// Pointwise base network modulated per channel by a global condition
/// vector computed from the same input.
#[derive(Clone, Debug, PartialEq)]
pub struct ToneMapperNet {
    pub base: Vec<Dense>,
    pub cond: Vec<Conv>,
    /// Condition vector to `γ`; the applied scale is `1 + γ`.
    pub scale: Vec<Dense>,
    pub shift: Vec<Dense>,
}

impl ToneMapperNet {
    pub fn zeros(config: &ModelConfig) -> Self {
        let w = config.tonemap_width;
        let base_dims = [3, w, w, 3];
        let cw = config.cond_widths;
        let cond_dims = [3, cw[0], cw[1], cw[2]];
        let cond_out = cw[COND_LAYERS - 1];
        let base: Vec<Dense> = base_dims.windows(2).map(|d| Dense::zeros(d[0], d[1])).collect();
        Self {
            cond: cond_dims.windows(2).map(|d| Conv::zeros(d[0], d[1])).collect(),
            scale: base.iter().map(|l| Dense::zeros(cond_out, l.cout())).collect(),
            shift: base.iter().map(|l| Dense::zeros(cond_out, l.cout())).collect(),
            base,
        }
    }

    fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let mut net = Self::zeros(config);
        let last = BASE_LAYERS - 1;
        for (i, layer) in net.base.iter_mut().enumerate() {
            let gain = if i == last { TONEMAP_OUTPUT_GAIN } else { 1.0 };
            *layer = Dense::fan_in(layer.cin(), layer.cout(), gain, rng);
        }
        for conv in &mut net.cond {
            let (cout, cin) = (conv.weight.shape()[0], conv.weight.shape()[3]);
            *conv = Conv::fan_in(cin, cout, rng);
        }
        net
    }

    fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        let groups: [(&str, Vec<(&Tensor, &Tensor)>); 4] = [
            ("base", self.base.iter().map(|l| (&l.weight, &l.bias)).collect()),
            ("cond", self.cond.iter().map(|l| (&l.weight, &l.bias)).collect()),
            ("scale", self.scale.iter().map(|l| (&l.weight, &l.bias)).collect()),
            ("shift", self.shift.iter().map(|l| (&l.weight, &l.bias)).collect()),
        ];
        for (group, layers) in groups {
            for (i, (w, b)) in layers.into_iter().enumerate() {
                out.push((format!("{prefix}.{group}{i}.weight"), w));
                out.push((format!("{prefix}.{group}{i}.bias"), b));
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for l in &mut self.base {
            out.extend([&mut l.weight, &mut l.bias]);
        }
        for l in &mut self.cond {
            out.extend([&mut l.weight, &mut l.bias]);
        }
        for l in self.scale.iter_mut().chain(self.shift.iter_mut()) {
            out.extend([&mut l.weight, &mut l.bias]);
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundToneMapper {
        BoundToneMapper(bind_all(tape, self.named_params(""), trainable))
    }

    /// [`tonemap_level`] without gradient recording.
    pub fn tonemap(&self, level: &Tensor, signed: bool) -> Result<Tensor> {
        let mut tape = Tape::new();
        let net = self.bind(&mut tape, false);
        let x = tape.constant(level.clone());
        let y = tonemap_level(&mut tape, x, &net, signed)?;
        Ok(tape.value(y).clone())
    }

    /// Multiply-accumulates for one `side × side` level.
    fn macs(&self, side: usize) -> usize {
        let per_pixel: usize = self.base.iter().map(|l| l.cin() * l.cout()).sum();
        let mut total = side * side * per_pixel;
        let mut s = side;
        for conv in &self.cond {
            s = (s - 1) / 2 + 1;
            total += s * s * conv.weight.len();
        }
        total
            + self
                .scale
                .iter()
                .chain(&self.shift)
                .map(|l| l.cin() * l.cout())
                .sum::<usize>()
    }

    pub fn param_count(&self) -> usize {
        self.base
            .iter()
            .chain(&self.scale)
            .chain(&self.shift)
            .map(Dense::param_count)
            .sum::<usize>()
            + self.cond.iter().map(Conv::param_count).sum::<usize>()
    }
}

fn bind_all(tape: &mut Tape, params: Vec<(String, &Tensor)>, trainable: bool) -> Vec<Var> {
    params
        .into_iter()
        .map(|(_, t)| {
            let mut t = t.clone();
            t.set_requires_grad(trainable);
            tape.leaf(t)
        })
        .collect()
}

/// Denoiser weights placed on a tape, in [`DenoiserNet`] parameter order.
#[derive(Clone, Debug)]
pub struct BoundDenoiser(Vec<Var>);

impl BoundDenoiser {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// `F(C)`: relu between layers, sigmoid at the end.
    pub fn multiplier(&self, tape: &mut Tape, coeffs: Var) -> Result<Var> {
        tape.mlp(coeffs, &self.0)
    }
}

/// Tone-mapper weights placed on a tape, in [`ToneMapperNet`] parameter
/// order: base, condition, scale, shift.
#[derive(Clone, Debug)]
pub struct BoundToneMapper(Vec<Var>);

impl BoundToneMapper {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    fn pair(&self, group: usize, i: usize) -> (Var, Var) {
        let offset = [0, BASE_LAYERS, BASE_LAYERS + COND_LAYERS, 2 * BASE_LAYERS + COND_LAYERS];
        let k = 2 * (offset[group] + i);
        (self.0[k], self.0[k + 1])
    }

    /// Network on an input already in the unit range.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.value(x).shape();
        if s.len() != 3 || s[0] < MIN_TONEMAP_SIDE || s[1] < MIN_TONEMAP_SIDE {
            return Err(Error::InvalidArgument(format!(
                "tone-mapper needs an [H, W, C] input with H, W ≥ {MIN_TONEMAP_SIDE}, got {s:?}"
            )));
        }
        let mut c = x;
        for i in 0..COND_LAYERS {
            let (w, b) = self.pair(1, i);
            c = tape.conv3x3(c, w, b, 2)?;
            c = tape.relu(c);
        }
        let cond = tape.global_avg_pool(c)?;

        let mut h = x;
        for i in 0..BASE_LAYERS {
            let (w, b) = self.pair(0, i);
            h = tape.pointwise_linear(h, w, b)?;
            let (sw, sb) = self.pair(2, i);
            let gamma = tape.pointwise_linear(cond, sw, sb)?;
            let scale = tape.affine(gamma, 1.0, 1.0);
            let (tw, tb) = self.pair(3, i);
            let shift = tape.pointwise_linear(cond, tw, tb)?;
            h = tape.modulate(h, scale, shift)?;
            h = if i + 1 < BASE_LAYERS {
                tape.relu(h)
            } else {
                tape.sigmoid(h)
            };
        }
        Ok(h)
    }
}

/// Full DCT-domain denoising of one level: tiles, orthonormal DCT,
/// `C ⊙ F(C)`, inverse DCT and averaging of overlapping tiles.
pub fn denoise_level(tape: &mut Tape, x: Var, net: &BoundDenoiser) -> Result<Var> {
    let s = tape.value(x).shape();
    if s.len() != 3 {
        return Err(Error::shape("denoise_level", "level must be [H, W, C]"));
    }
    let geometry = Arc::new(TileGeometry::new(s[0], s[1], s[2], DEFAULT_TILE_STRIDE)?);
    let tiles = tape.fixed_map(x, Arc::new(ExtractTiles(geometry.clone())))?;
    let coeffs = tape.fixed_map(tiles, Arc::new(Dct2Map { inverse: false }))?;
    let multiplier = net.multiplier(tape, coeffs)?;
    let cleaned = tape.mul(coeffs, multiplier)?;
    let pixels = tape.fixed_map(cleaned, Arc::new(Dct2Map { inverse: true }))?;
    tape.fixed_map(pixels, Arc::new(MergeTilesAverage::new(geometry)?))
}

/// Tone-maps one level. Signed detail levels are mapped by `(x + 1)/2` into
/// the network's unit range and back by `2y − 1`.
pub fn tonemap_level(tape: &mut Tape, x: Var, net: &BoundToneMapper, signed: bool) -> Result<Var> {
    if !signed {
        return net.forward(tape, x);
    }
    let unit = tape.affine(x, 0.5, 0.5);
    let y = net.forward(tape, unit)?;
    Ok(tape.affine(y, 2.0, -1.0))
}

/// Parameter subsets trained by the different phases.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    ToneMappers,
    Denoisers,
    All,
}

impl ParamGroup {
    pub fn tonemappers(self) -> bool {
        matches!(self, ParamGroup::ToneMappers | ParamGroup::All)
    }

    pub fn denoisers(self) -> bool {
        matches!(self, ParamGroup::Denoisers | ParamGroup::All)
    }
}

/// Four tone-mappers (levels l0, l1, l2 and the base) and three denoisers
/// (detail levels only).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub tonemappers: [ToneMapperNet; LEVELS],
    pub denoisers: [DenoiserNet; DETAIL_LEVELS],
    pub ordering: Ordering,
    pub format_version: u32,
}

/// Weights of a bundle placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundBundle {
    pub tonemappers: [BoundToneMapper; LEVELS],
    pub denoisers: [BoundDenoiser; DETAIL_LEVELS],
}

impl BoundBundle {
    /// Vars of `group` in the order of [`ModelBundle::params_mut`].
    pub fn vars(&self, group: ParamGroup) -> Vec<Var> {
        let mut out = Vec::new();
        if group.tonemappers() {
            for t in &self.tonemappers {
                out.extend_from_slice(t.vars());
            }
        }
        if group.denoisers() {
            for d in &self.denoisers {
                out.extend_from_slice(d.vars());
            }
        }
        out
    }
}

/// Learnable parameter and multiply-accumulate counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamStats {
    pub params: usize,
    /// For one 224×224×3 patch, counting convolution and linear layers.
    pub macs_per_patch: usize,
}

impl ModelBundle {
    /// All-zero weights with the given architecture.
    pub fn zeros(config: &ModelConfig, ordering: Ordering) -> Self {
        Self {
            tonemappers: std::array::from_fn(|_| ToneMapperNet::zeros(config)),
            denoisers: std::array::from_fn(|_| DenoiserNet::zeros(config.denoiser_width)),
            ordering,
            format_version: FORMAT_VERSION,
        }
    }

    /// Random initialisation, deterministic in `seed`.
    pub fn init(config: &ModelConfig, ordering: Ordering, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            tonemappers: std::array::from_fn(|_| ToneMapperNet::init(config, &mut rng)),
            denoisers: std::array::from_fn(|_| DenoiserNet::init(config.denoiser_width, &mut rng)),
            ordering,
            format_version: FORMAT_VERSION,
        }
    }

    /// Identity tone-mappers and pass-through denoisers.
    pub fn identity(config: &ModelConfig, ordering: Ordering) -> Result<Self> {
        let tm = identity_tonemapper(config)?;
        Ok(Self {
            tonemappers: std::array::from_fn(|_| tm.clone()),
            denoisers: std::array::from_fn(|_| {
                constant_denoiser(config.denoiser_width, PASS_THROUGH_BIAS)
            }),
            ordering,
            format_version: FORMAT_VERSION,
        })
    }

    /// Every parameter with its checkpoint name.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, t) in self.tonemappers.iter().enumerate() {
            out.extend(t.named_params(&format!("tonemap{i}")));
        }
        for (i, d) in self.denoisers.iter().enumerate() {
            out.extend(d.named_params(&format!("denoise{i}")));
        }
        out
    }

    pub fn params_mut(&mut self, group: ParamGroup) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        if group.tonemappers() {
            for t in &mut self.tonemappers {
                out.extend(t.params_mut());
            }
        }
        if group.denoisers() {
            for d in &mut self.denoisers {
                out.extend(d.params_mut());
            }
        }
        out
    }

    /// Binds every network; those in `trainable` require gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: Option<ParamGroup>) -> BoundBundle {
        let tm = trainable.is_some_and(ParamGroup::tonemappers);
        let dn = trainable.is_some_and(ParamGroup::denoisers);
        BoundBundle {
            tonemappers: std::array::from_fn(|i| self.tonemappers[i].bind(tape, tm)),
            denoisers: std::array::from_fn(|i| self.denoisers[i].bind(tape, dn)),
        }
    }

    pub fn stats(&self) -> ParamStats {
        param_stats(self)
    }
}

/// Default architecture, TFDL ordering.
pub fn init_weights(seed: u64) -> ModelBundle {
    ModelBundle::init(&ModelConfig::default(), Ordering::Tfdl, seed)
}

pub fn param_stats(bundle: &ModelBundle) -> ParamStats {
    const PATCH: usize = 224;
    let params = bundle.tonemappers.iter().map(ToneMapperNet::param_count).sum::<usize>()
        + bundle.denoisers.iter().map(DenoiserNet::param_count).sum::<usize>();
    let mut macs = 0;
    for (level, t) in bundle.tonemappers.iter().enumerate() {
        macs += t.macs(PATCH >> level);
    }
    for (level, d) in bundle.denoisers.iter().enumerate() {
        let side = PATCH >> level;
        let per_axis = crate::transforms::axis_origins(side, TILE, DEFAULT_TILE_STRIDE).len();
        macs += per_axis * per_axis * TILE * TILE * d.macs_per_position();
    }
    ParamStats {
        params,
        macs_per_patch: macs,
    }
}
