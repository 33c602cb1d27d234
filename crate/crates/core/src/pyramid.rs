//! Four-level Laplacian pyramid with exact reconstruction.
//!
//! Filtering uses the separable binomial kernel `[1, 4, 6, 4, 1] / 16` with
//! mirror padding (edge sample not repeated). Downsampling keeps even samples
//! of the blurred signal; upsampling inserts zeros and blurs with the kernel
//! doubled per axis, which reproduces constants. Every operator here is a
//! constant linear map, so they double as differentiable tape operations.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{LinearMap, Tape, Tensor, Var};

/// Number of Gaussian levels, `g0..g3`.
pub const LEVELS: usize = 4;
/// Number of Laplacian (detail) levels, `l0..l2`.
pub const DETAIL_LEVELS: usize = LEVELS - 1;

const KERNEL: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

fn mirror(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut k = i.rem_euclid(period);
    if k >= n as isize {
        k = period - k;
    }
    k as usize
}

/// Sparse matrix acting on one spatial axis.
#[derive(Clone, Debug)]
struct AxisOp {
    in_len: usize,
    rows: Vec<Vec<(usize, f32)>>,
}

impl AxisOp {
    fn blur(n: usize) -> Vec<Vec<(usize, f32)>> {
        (0..n)
            .map(|i| {
                let mut row: Vec<(usize, f32)> = Vec::with_capacity(5);
                for (o, &k) in KERNEL.iter().enumerate() {
                    let j = mirror(i as isize + o as isize - 2, n);
                    match row.iter_mut().find(|e| e.0 == j) {
                        Some(e) => e.1 += k,
                        None => row.push((j, k)),
                    }
                }
                row
            })
            .collect()
    }

    fn down(n: usize) -> Self {
        let blur = Self::blur(n);
        Self {
            in_len: n,
            rows: blur.into_iter().step_by(2).collect(),
        }
    }

    /// `n/2 → n`: zero insertion then blur with gain 2.
    fn up(n: usize) -> Self {
        let rows = Self::blur(n)
            .into_iter()
            .map(|row| {
                row.into_iter()
                    .filter(|&(j, _)| j % 2 == 0)
                    .map(|(j, k)| (j / 2, 2.0 * k))
                    .collect()
            })
            .collect();
        Self { in_len: n / 2, rows }
    }

    fn out_len(&self) -> usize {
        self.rows.len()
    }
}

/// Applies an axis operator along the height axis and another along the
/// width axis of an `[H, W, C]` tensor.
#[derive(Clone, Debug)]
pub struct SeparableMap {
    rows: AxisOp,
    cols: AxisOp,
}

impl SeparableMap {
    /// Blur + decimate: `[H, W, C] → [H/2, W/2, C]`.
    pub fn down(h: usize, w: usize) -> Self {
        Self {
            rows: AxisOp::down(h),
            cols: AxisOp::down(w),
        }
    }

    /// Zero-insert + blur: `[H/2, W/2, C] → [H, W, C]`.
    pub fn up(h: usize, w: usize) -> Self {
        Self {
            rows: AxisOp::up(h),
            cols: AxisOp::up(w),
        }
    }

    fn run(&self, x: &Tensor, adjoint: bool) -> Result<Tensor> {
        let (in_h, in_w) = if adjoint {
            (self.rows.out_len(), self.cols.out_len())
        } else {
            (self.rows.in_len, self.cols.in_len)
        };
        let s = x.shape();
        if s.len() != 3 || s[0] != in_h || s[1] != in_w {
            return Err(Error::shape(
                "pyramid filter",
                format!("expected [{in_h}, {in_w}, C], got {s:?}"),
            ));
        }
        let c = s[2];
        let tmp = apply_axis(x.data(), in_h, in_w * c, &self.rows, adjoint);
        let out_h = tmp.len() / (in_w * c);
        // width axis: treat each row independently
        let out_w = if adjoint { self.cols.in_len } else { self.cols.out_len() };
        let mut out = Vec::with_capacity(out_h * out_w * c);
        for row in tmp.chunks_exact(in_w * c) {
            out.extend(apply_axis(row, in_w, c, &self.cols, adjoint));
        }
        Ok(Tensor::from_parts(vec![out_h, out_w, c], out))
    }
}

/// Applies `op` (or its transpose) to `data` viewed as `[len, inner]` along
/// the leading axis.
fn apply_axis(data: &[f32], len: usize, inner: usize, op: &AxisOp, transpose: bool) -> Vec<f32> {
    debug_assert_eq!(data.len(), len * inner);
    if !transpose {
        let mut out = vec![0.0; op.out_len() * inner];
        for (i, row) in op.rows.iter().enumerate() {
            let dst = &mut out[i * inner..][..inner];
            for &(j, k) in row {
                for (d, &s) in dst.iter_mut().zip(&data[j * inner..][..inner]) {
                    *d += k * s;
                }
            }
        }
        out
    } else {
        let mut out = vec![0.0; op.in_len * inner];
        for (i, row) in op.rows.iter().enumerate() {
            let src = &data[i * inner..][..inner];
            for &(j, k) in row {
                for (d, &s) in out[j * inner..][..inner].iter_mut().zip(src) {
                    *d += k * s;
                }
            }
        }
        out
    }
}

impl LinearMap for SeparableMap {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x, false)
    }

    fn apply_adjoint(&self, y: &Tensor) -> Result<Tensor> {
        self.run(y, true)
    }
}

/// `l0, l1, l2` detail levels and the coarsest Gaussian level (`g3`, also
/// written `l3`).
#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid {
    pub laplacian: [Tensor; DETAIL_LEVELS],
    pub base: Tensor,
}

impl Pyramid {
    /// Levels in order `l0, l1, l2, base`.
    pub fn levels(&self) -> [&Tensor; LEVELS] {
        [
            &self.laplacian[0],
            &self.laplacian[1],
            &self.laplacian[2],
            &self.base,
        ]
    }
}

fn check_divisible(h: usize, w: usize) -> Result<()> {
    let factor = 1 << (LEVELS - 1);
    if h % factor != 0 || w % factor != 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!(
            "pyramid input {h}x{w} must have both sides divisible by {factor}"
        )));
    }
    Ok(())
}

pub fn downsample(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 || s[0] % 2 != 0 || s[1] % 2 != 0 {
        return Err(Error::shape("downsample", format!("need even [H, W, C], got {s:?}")));
    }
    SeparableMap::down(s[0], s[1]).apply(x)
}

pub fn upsample(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::shape("upsample", format!("need [H, W, C], got {s:?}")));
    }
    SeparableMap::up(2 * s[0], 2 * s[1]).apply(x)
}

pub fn decompose(patch: &Tensor) -> Result<Pyramid> {
    if patch.rank() != 3 {
        return Err(Error::shape("decompose", "patch must be [H, W, C]"));
    }
    check_divisible(patch.shape()[0], patch.shape()[1])?;
    let mut gaussian = vec![patch.clone()];
    for _ in 1..LEVELS {
        let next = downsample(gaussian.last().unwrap())?;
        gaussian.push(next);
    }
    let mut laplacian = Vec::with_capacity(DETAIL_LEVELS);
    for i in 0..DETAIL_LEVELS {
        let up = upsample(&gaussian[i + 1])?;
        laplacian.push(gaussian[i].zip_map(&up, |g, u| g - u)?);
    }
    let base = gaussian.pop().unwrap();
    Ok(Pyramid {
        laplacian: laplacian.try_into().expect("three detail levels"),
        base,
    })
}

fn check_chain(shapes: [&[usize]; LEVELS]) -> Result<()> {
    for i in 0..DETAIL_LEVELS {
        let (fine, coarse) = (shapes[i], shapes[i + 1]);
        let ok = fine.len() == 3
            && coarse.len() == 3
            && fine[0] == 2 * coarse[0]
            && fine[1] == 2 * coarse[1]
            && fine[2] == coarse[2];
        if !ok {
            return Err(Error::shape(
                "reconstruct",
                format!("level {i} {fine:?} is not double level {} {coarse:?}", i + 1),
            ));
        }
    }
    Ok(())
}

/// `g2' = l2 + up(base)`, `g1' = l1 + up(g2')`, `g0' = l0 + up(g1')`.
pub fn reconstruct(l0: &Tensor, l1: &Tensor, l2: &Tensor, base: &Tensor) -> Result<Tensor> {
    check_chain([l0.shape(), l1.shape(), l2.shape(), base.shape()])?;
    let mut g = base.clone();
    for detail in [l2, l1, l0] {
        let up = upsample(&g)?;
        g = detail.zip_map(&up, |a, b| a + b)?;
    }
    Ok(g)
}

/// Differentiable decomposition on a tape: `[l0, l1, l2, base]`.
pub fn decompose_on_tape(tape: &mut Tape, patch: Var) -> Result<[Var; LEVELS]> {
    let s = tape.value(patch).shape().to_vec();
    if s.len() != 3 {
        return Err(Error::shape("decompose", "patch must be [H, W, C]"));
    }
    check_divisible(s[0], s[1])?;
    let mut gaussian = vec![patch];
    for i in 1..LEVELS {
        let down = Arc::new(SeparableMap::down(s[0] >> (i - 1), s[1] >> (i - 1)));
        let next = tape.fixed_map(gaussian[i - 1], down)?;
        gaussian.push(next);
    }
    let mut out = [patch; LEVELS];
    for i in 0..DETAIL_LEVELS {
        let up = Arc::new(SeparableMap::up(s[0] >> i, s[1] >> i));
        let lifted = tape.fixed_map(gaussian[i + 1], up)?;
        out[i] = tape.sub(gaussian[i], lifted)?;
    }
    out[DETAIL_LEVELS] = gaussian[DETAIL_LEVELS];
    Ok(out)
}

/// Differentiable reconstruction on a tape.
pub fn reconstruct_on_tape(tape: &mut Tape, detail: [Var; DETAIL_LEVELS], base: Var) -> Result<Var> {
    check_chain([
        tape.value(detail[0]).shape(),
        tape.value(detail[1]).shape(),
        tape.value(detail[2]).shape(),
        tape.value(base).shape(),
    ])?;
    let mut g = base;
    for &l in detail.iter().rev() {
        let s = tape.value(l).shape();
        let up = Arc::new(SeparableMap::up(s[0], s[1]));
        let lifted = tape.fixed_map(g, up)?;
        g = tape.add(l, lifted)?;
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        Tensor::uniform(shape, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn mirror_indices() {
        assert_eq!(mirror(-1, 5), 1);
        assert_eq!(mirror(-2, 5), 2);
        assert_eq!(mirror(5, 5), 3);
        assert_eq!(mirror(6, 5), 2);
        assert_eq!(mirror(3, 1), 0);
    }

    #[test]
    fn level_shapes_halve() {
        let p = decompose(&random(&[224, 224, 3], 1)).unwrap();
        let dims: Vec<usize> = p.levels().iter().map(|t| t.shape()[0]).collect();
        assert_eq!(dims, vec![224, 112, 56, 28]);
    }

    #[test]
    fn constant_patch_has_flat_details() {
        let p = decompose(&Tensor::full(&[64, 48, 3], 0.37)).unwrap();
        for l in &p.laplacian {
            assert!(l.data().iter().all(|v| v.abs() < 1e-6));
        }
        assert!(p.base.data().iter().all(|v| (v - 0.37).abs() < 1e-6));
    }

    #[test]
    fn rejects_indivisible() {
        let err = decompose(&Tensor::zeros(&[60, 64, 3])).unwrap_err();
        assert!(err.to_string().contains("divisible by 8"));
    }

    #[test]
    fn round_trip_random_and_impulse() {
        let x = random(&[64, 32, 3], 5);
        let p = decompose(&x).unwrap();
        let [l0, l1, l2, b] = p.levels();
        let y = reconstruct(l0, l1, l2, b).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() <= 1e-6);

        let mut impulse = Tensor::zeros(&[32, 32, 1]);
        impulse.set(&[13, 7, 0], 1.0);
        let p = decompose(&impulse).unwrap();
        let [l0, l1, l2, b] = p.levels();
        let y = reconstruct(l0, l1, l2, b).unwrap();
        assert!(y.max_abs_diff(&impulse).unwrap() <= 1e-6);
    }

    #[test]
    fn zero_details_upsample_base_three_times() {
        let base = random(&[4, 4, 3], 2);
        let z = |n| Tensor::zeros(&[n, n, 3]);
        let y = reconstruct(&z(32), &z(16), &z(8), &base).unwrap();
        let want = upsample(&upsample(&upsample(&base).unwrap()).unwrap()).unwrap();
        assert!(y.max_abs_diff(&want).unwrap() < 1e-7);
    }

    #[test]
    fn broken_chain_rejected() {
        let z = |h, w| Tensor::zeros(&[h, w, 3]);
        assert!(reconstruct(&z(32, 32), &z(16, 16), &z(8, 8), &z(8, 8)).is_err());
    }

    #[test]
    fn filters_pass_the_adjoint_test() {
        for map in [SeparableMap::down(16, 24), SeparableMap::up(16, 24)] {
            let (x, y) = if map.rows.in_len == 16 {
                (random(&[16, 24, 2], 1), random(&[8, 12, 2], 2))
            } else {
                (random(&[8, 12, 2], 3), random(&[16, 24, 2], 4))
            };
            let lhs = map.apply(&x).unwrap().dot(&y).unwrap();
            let rhs = x.dot(&map.apply_adjoint(&y).unwrap()).unwrap();
            assert!((lhs - rhs).abs() < 1e-4, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn tape_decomposition_matches_and_round_trips() {
        let x = random(&[32, 40, 3], 5);
        let want = decompose(&x).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let levels = decompose_on_tape(&mut tape, xv).unwrap();
        for (v, w) in levels.iter().zip(want.levels()) {
            assert!(tape.value(*v).max_abs_diff(w).unwrap() < 1e-7);
        }
        let back = reconstruct_on_tape(&mut tape, [levels[0], levels[1], levels[2]], levels[3]);
        assert!(tape.value(back.unwrap()).max_abs_diff(&x).unwrap() < 1e-6);
    }
}
