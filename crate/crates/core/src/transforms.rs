//! Overlapping 16×16 tiles and the orthonormal 2-D DCT used by the denoiser.

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use crate::error::{Error, Result};
use crate::numerics::{LinearMap, Tensor};

pub const TILE: usize = 16;
pub const DEFAULT_TILE_STRIDE: usize = 8;

/// Tile origins along one axis: multiples of `stride`, plus a final origin
/// flush with the far edge when the grid does not land on it.
pub fn axis_origins(len: usize, tile: usize, stride: usize) -> Vec<usize> {
    debug_assert!(len >= tile && stride > 0);
    let mut origins: Vec<usize> = (0..=(len - tile) / stride).map(|k| k * stride).collect();
    if *origins.last().unwrap() != len - tile {
        origins.push(len - tile);
    }
    origins
}

/// Where the tiles of a [`TileStack`] came from.
#[derive(Clone, Debug, PartialEq)]
pub struct TileGeometry {
    height: usize,
    width: usize,
    channels: usize,
    row_origins: Vec<usize>,
    col_origins: Vec<usize>,
}

impl TileGeometry {
    pub fn new(height: usize, width: usize, channels: usize, stride: usize) -> Result<Self> {
        if height < TILE || width < TILE {
            return Err(Error::InvalidArgument(format!(
                "patch {height}x{width} is smaller than the {TILE}x{TILE} tile"
            )));
        }
        if stride == 0 || stride > TILE {
            return Err(Error::InvalidArgument(format!(
                "tile stride must be in 1..={TILE}, got {stride}"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            row_origins: axis_origins(height, TILE, stride),
            col_origins: axis_origins(width, TILE, stride),
        })
    }

    /// Geometry with explicit origins; validated for bounds and coverage.
    pub fn from_origins(
        height: usize,
        width: usize,
        channels: usize,
        row_origins: Vec<usize>,
        col_origins: Vec<usize>,
    ) -> Result<Self> {
        let geom = Self {
            height,
            width,
            channels,
            row_origins,
            col_origins,
        };
        geom.validate()?;
        Ok(geom)
    }

    fn validate(&self) -> Result<()> {
        let bad_bounds = self.row_origins.iter().any(|&r| r + TILE > self.height)
            || self.col_origins.iter().any(|&c| c + TILE > self.width);
        if bad_bounds {
            return Err(Error::InvalidArgument("tile origin out of bounds".into()));
        }
        let covered = |origins: &[usize], len: usize| {
            (0..len).all(|p| origins.iter().any(|&o| o <= p && p < o + TILE))
        };
        if !covered(&self.row_origins, self.height) || !covered(&self.col_origins, self.width) {
            return Err(Error::InvalidArgument(
                "tile geometry leaves source pixels uncovered".into(),
            ));
        }
        Ok(())
    }

    pub fn source_shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.row_origins.len() * self.col_origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(row, col)` origin of every tile, in stack order.
    pub fn origins(&self) -> Vec<(usize, usize)> {
        self.row_origins
            .iter()
            .flat_map(|&r| self.col_origins.iter().map(move |&c| (r, c)))
            .collect()
    }

    pub fn tiles_shape(&self) -> Vec<usize> {
        vec![self.len(), TILE, TILE, self.channels]
    }

    pub fn source_dims(&self) -> Vec<usize> {
        vec![self.height, self.width, self.channels]
    }

    fn coverage(&self) -> Vec<u32> {
        let mut count = vec![0u32; self.height * self.width];
        for (r, c) in self.origins() {
            for i in r..r + TILE {
                for v in &mut count[i * self.width + c..][..TILE] {
                    *v += 1;
                }
            }
        }
        count
    }

    /// Copy (`extract`) or scatter-add (`!extract`) between image and tiles.
    fn transfer(&self, image: &mut [f32], tiles: &mut [f32], extract: bool) {
        let c = self.channels;
        let row_len = TILE * c;
        for (t, (r, col)) in self.origins().into_iter().enumerate() {
            for i in 0..TILE {
                let src = ((r + i) * self.width + col) * c;
                let dst = (t * TILE + i) * row_len;
                let img_row = &mut image[src..src + row_len];
                let tile_row = &mut tiles[dst..dst + row_len];
                if extract {
                    tile_row.copy_from_slice(img_row);
                } else {
                    for (a, &b) in img_row.iter_mut().zip(tile_row.iter()) {
                        *a += b;
                    }
                }
            }
        }
    }

    fn check_image(&self, x: &Tensor, op: &'static str) -> Result<()> {
        if x.shape() != self.source_dims().as_slice() {
            return Err(Error::shape(
                op,
                format!("expected image {:?}, got {:?}", self.source_dims(), x.shape()),
            ));
        }
        Ok(())
    }

    fn check_tiles(&self, x: &Tensor, op: &'static str) -> Result<()> {
        if x.shape() != self.tiles_shape().as_slice() {
            return Err(Error::shape(
                op,
                format!("expected tiles {:?}, got {:?}", self.tiles_shape(), x.shape()),
            ));
        }
        Ok(())
    }
}

/// A batch of 16×16 tiles with the geometry needed to put them back.
#[derive(Clone, Debug, PartialEq)]
pub struct TileStack {
    pub tiles: Tensor,
    pub geometry: Arc<TileGeometry>,
}

/// Image → tiles.
#[derive(Debug)]
pub struct ExtractTiles(pub Arc<TileGeometry>);

impl LinearMap for ExtractTiles {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let g = &self.0;
        g.check_image(x, "extract_tiles")?;
        let mut tiles = vec![0.0; g.tiles_shape().iter().product()];
        let mut image = x.data().to_vec();
        g.transfer(&mut image, &mut tiles, true);
        Tensor::new(&g.tiles_shape(), tiles)
    }

    fn apply_adjoint(&self, y: &Tensor) -> Result<Tensor> {
        let g = &self.0;
        g.check_tiles(y, "extract_tiles adjoint")?;
        let mut image = vec![0.0; g.source_dims().iter().product()];
        let mut tiles = y.data().to_vec();
        g.transfer(&mut image, &mut tiles, false);
        Tensor::new(&g.source_dims(), image)
    }
}

/// Tiles → image, averaging every pixel over the tiles that cover it.
#[derive(Debug)]
pub struct MergeTilesAverage {
    geometry: Arc<TileGeometry>,
    inv_count: Vec<f32>,
}

impl MergeTilesAverage {
    pub fn new(geometry: Arc<TileGeometry>) -> Result<Self> {
        let count = geometry.coverage();
        if count.iter().any(|&n| n == 0) {
            return Err(Error::InvalidArgument(
                "tile geometry leaves source pixels uncovered".into(),
            ));
        }
        let inv_count = count.into_iter().map(|n| 1.0 / n as f32).collect();
        Ok(Self {
            geometry,
            inv_count,
        })
    }

    fn scale_by_coverage(&self, image: &mut [f32]) {
        let c = self.geometry.channels;
        for (px, &s) in image.chunks_exact_mut(c).zip(&self.inv_count) {
            for v in px {
                *v *= s;
            }
        }
    }
}

impl LinearMap for MergeTilesAverage {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let g = &self.geometry;
        g.check_tiles(x, "merge_tiles_average")?;
        let mut image = vec![0.0; g.source_dims().iter().product()];
        let mut tiles = x.data().to_vec();
        g.transfer(&mut image, &mut tiles, false);
        self.scale_by_coverage(&mut image);
        Tensor::new(&g.source_dims(), image)
    }

    fn apply_adjoint(&self, y: &Tensor) -> Result<Tensor> {
        let g = &self.geometry;
        g.check_image(y, "merge_tiles_average adjoint")?;
        let mut image = y.data().to_vec();
        self.scale_by_coverage(&mut image);
        let mut tiles = vec![0.0; g.tiles_shape().iter().product()];
        g.transfer(&mut image, &mut tiles, true);
        Tensor::new(&g.tiles_shape(), tiles)
    }
}

/// The 16×16 orthonormal DCT-II matrix, `B[u][i] = α(u)·cos(π(2i+1)u/32)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DctBasis {
    m: [[f32; TILE]; TILE],
}

impl DctBasis {
    pub fn get() -> &'static DctBasis {
        static BASIS: OnceLock<DctBasis> = OnceLock::new();
        BASIS.get_or_init(|| {
            let n = TILE as f64;
            let mut m = [[0.0f32; TILE]; TILE];
            for (u, row) in m.iter_mut().enumerate() {
                let alpha = if u == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
                for (i, v) in row.iter_mut().enumerate() {
                    *v = (alpha * (PI * (2 * i + 1) as f64 * u as f64 / (2.0 * n)).cos()) as f32;
                }
            }
            DctBasis { m }
        })
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::new(&[TILE, TILE], self.m.iter().flatten().copied().collect()).unwrap()
    }

    pub fn at(&self, u: usize, i: usize) -> f32 {
        self.m[u][i]
    }

    /// Per tile and channel: `B·X·Bᵀ` (forward) or `Bᵀ·X·B` (inverse).
    fn transform(&self, tiles: &Tensor, inverse: bool) -> Tensor {
        let c = tiles.channels();
        let tile_len = TILE * TILE * c;
        let mut out = vec![0.0f32; tiles.len()];
        let mut tmp = vec![0.0f32; tile_len];
        let coef = |a: usize, b: usize| if inverse { self.m[b][a] } else { self.m[a][b] };
        for (src, dst) in tiles.data().chunks_exact(tile_len).zip(out.chunks_exact_mut(tile_len)) {
            // rows: tmp[u, j, ch] = Σ_i coef(u, i) src[i, j, ch]
            tmp.iter_mut().for_each(|v| *v = 0.0);
            for u in 0..TILE {
                let t_row = &mut tmp[u * TILE * c..][..TILE * c];
                for i in 0..TILE {
                    let k = coef(u, i);
                    for (t, &s) in t_row.iter_mut().zip(&src[i * TILE * c..][..TILE * c]) {
                        *t += k * s;
                    }
                }
            }
            // columns: dst[u, v, ch] = Σ_j coef(v, j) tmp[u, j, ch]
            for u in 0..TILE {
                let t_row = &tmp[u * TILE * c..][..TILE * c];
                let d_row = &mut dst[u * TILE * c..][..TILE * c];
                for v in 0..TILE {
                    let d = &mut d_row[v * c..][..c];
                    for j in 0..TILE {
                        let k = coef(v, j);
                        for (dv, &tv) in d.iter_mut().zip(&t_row[j * c..][..c]) {
                            *dv += k * tv;
                        }
                    }
                }
            }
        }
        Tensor::from_parts(tiles.shape().to_vec(), out)
    }
}

fn check_tile_tensor(x: &Tensor, op: &'static str) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1] != TILE || s[2] != TILE {
        return Err(Error::shape(
            op,
            format!("expected [N, {TILE}, {TILE}, C] tiles, got {s:?}"),
        ));
    }
    Ok(())
}

/// Blockwise orthonormal 2-D DCT over `[N, 16, 16, C]`; the adjoint is the
/// inverse transform.
#[derive(Debug, Clone, Copy)]
pub struct Dct2Map {
    pub inverse: bool,
}

impl LinearMap for Dct2Map {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        check_tile_tensor(x, "dct2")?;
        Ok(DctBasis::get().transform(x, self.inverse))
    }

    fn apply_adjoint(&self, y: &Tensor) -> Result<Tensor> {
        check_tile_tensor(y, "dct2 adjoint")?;
        Ok(DctBasis::get().transform(y, !self.inverse))
    }
}

pub fn extract_tiles(patch: &Tensor, stride: usize) -> Result<TileStack> {
    if patch.rank() != 3 {
        return Err(Error::shape("extract_tiles", "patch must be [H, W, C]"));
    }
    let s = patch.shape();
    let geometry = Arc::new(TileGeometry::new(s[0], s[1], s[2], stride)?);
    let tiles = ExtractTiles(geometry.clone()).apply(patch)?;
    Ok(TileStack { tiles, geometry })
}

pub fn dct2(stack: &TileStack) -> Result<TileStack> {
    Ok(TileStack {
        tiles: Dct2Map { inverse: false }.apply(&stack.tiles)?,
        geometry: stack.geometry.clone(),
    })
}

pub fn idct2(stack: &TileStack) -> Result<TileStack> {
    Ok(TileStack {
        tiles: Dct2Map { inverse: true }.apply(&stack.tiles)?,
        geometry: stack.geometry.clone(),
    })
}

pub fn merge_tiles_average(stack: &TileStack) -> Result<Tensor> {
    MergeTilesAverage::new(stack.geometry.clone())?.apply(&stack.tiles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn origin_grid_counts() {
        let one = extract_tiles(&Tensor::zeros(&[16, 16, 3]), 8).unwrap();
        assert_eq!(one.geometry.origins(), vec![(0, 0)]);

        let full = extract_tiles(&Tensor::zeros(&[224, 224, 3]), 8).unwrap();
        assert_eq!(full.geometry.len(), 27 * 27);
        assert_eq!(full.tiles.shape(), &[729, 16, 16, 3]);

        // (20-16)/8 = 0 full steps, then the flush origin at 4
        let tall = extract_tiles(&Tensor::zeros(&[20, 16, 3]), 8).unwrap();
        assert_eq!(tall.geometry.origins(), vec![(0, 0), (4, 0)]);
    }

    #[test]
    fn rejects_small_patch() {
        assert!(extract_tiles(&Tensor::zeros(&[15, 32, 3]), 8).is_err());
        assert!(extract_tiles(&Tensor::zeros(&[32, 10, 3]), 8).is_err());
    }

    #[test]
    fn basis_is_orthonormal() {
        let b = DctBasis::get();
        for u in 0..TILE {
            for v in 0..TILE {
                let dot: f64 = (0..TILE).map(|i| b.at(u, i) as f64 * b.at(v, i) as f64).sum();
                let want = if u == v { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-6, "({u},{v}) = {dot}");
            }
        }
    }

    #[test]
    fn constant_tile_has_only_dc() {
        let stack = extract_tiles(&Tensor::full(&[16, 16, 3], 1.0), 8).unwrap();
        let coeffs = dct2(&stack).unwrap();
        for u in 0..TILE {
            for v in 0..TILE {
                for c in 0..3 {
                    let got = coeffs.tiles.at(&[0, u, v, c]);
                    let want = if u == 0 && v == 0 { 16.0 } else { 0.0 };
                    assert!((got - want).abs() < 1e-5, "({u},{v},{c}) = {got}");
                }
            }
        }
    }

    #[test]
    fn dc_only_coefficients_invert_to_constant() {
        let stack = extract_tiles(&Tensor::zeros(&[16, 16, 3]), 8).unwrap();
        let mut coeffs = stack.clone();
        for c in 0..3 {
            coeffs.tiles.set(&[0, 0, 0, c], 16.0);
        }
        let pixels = idct2(&coeffs).unwrap();
        assert!(pixels.tiles.data().iter().all(|&v| (v - 1.0).abs() < 1e-5));
    }

    #[test]
    fn zero_maps_to_zero() {
        let stack = extract_tiles(&Tensor::zeros(&[32, 32, 3]), 8).unwrap();
        assert!(dct2(&stack).unwrap().tiles.data().iter().all(|&v| v == 0.0));
        assert!(idct2(&stack).unwrap().tiles.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parseval_and_inverse() {
        let x = random(&[48, 40, 3], 3);
        let stack = extract_tiles(&x, 8).unwrap();
        let coeffs = dct2(&stack).unwrap();
        let rel = (coeffs.tiles.sum_squares() - stack.tiles.sum_squares()).abs()
            / stack.tiles.sum_squares();
        assert!(rel < 1e-4);
        let back = idct2(&coeffs).unwrap();
        assert!(back.tiles.max_abs_diff(&stack.tiles).unwrap() < 1e-5);
    }

    #[test]
    fn four_way_overlap_is_averaged() {
        // 24x24 with stride 8: pixel (10,10) lies in tiles at (0,0),(0,8),(8,0),(8,8)
        let x = Tensor::zeros(&[24, 24, 1]);
        let mut stack = extract_tiles(&x, 8).unwrap();
        assert_eq!(stack.geometry.len(), 4);
        for (t, (r, c)) in stack.geometry.origins().into_iter().enumerate() {
            stack.tiles.set(&[t, 10 - r, 10 - c, 0], (t + 1) as f32);
        }
        let merged = merge_tiles_average(&stack).unwrap();
        assert!((merged.at(&[10, 10, 0]) - 2.5).abs() < 1e-6);
    }

    #[test]
    fn single_tile_merge_is_the_tile() {
        let x = random(&[16, 16, 3], 1);
        let stack = extract_tiles(&x, 8).unwrap();
        assert_eq!(merge_tiles_average(&stack).unwrap(), x);
    }

    #[test]
    fn uncovered_geometry_is_rejected() {
        let err = TileGeometry::from_origins(40, 16, 3, vec![0, 24], vec![0]);
        assert!(err.is_err());
    }

    #[test]
    fn wrong_tile_size_rejected() {
        let bad = Tensor::zeros(&[2, 8, 8, 3]);
        assert!(Dct2Map { inverse: false }.apply(&bad).is_err());
    }

    #[test]
    fn maps_pass_the_adjoint_test() {
        let x = random(&[40, 24, 3], 11);
        let stack = extract_tiles(&x, 8).unwrap();
        let g = stack.geometry.clone();
        let y_tiles = random(&g.tiles_shape(), 12);
        let maps: Vec<(Box<dyn LinearMap>, Tensor, Tensor)> = vec![
            (Box::new(ExtractTiles(g.clone())), x.clone(), y_tiles.clone()),
            (
                Box::new(MergeTilesAverage::new(g.clone()).unwrap()),
                y_tiles.clone(),
                random(&[40, 24, 3], 13),
            ),
            (Box::new(Dct2Map { inverse: false }), stack.tiles.clone(), y_tiles.clone()),
            (Box::new(Dct2Map { inverse: true }), stack.tiles.clone(), y_tiles.clone()),
        ];
        for (map, input, probe) in maps {
            let lhs = map.apply(&input).unwrap().dot(&probe).unwrap();
            let rhs = input.dot(&map.apply_adjoint(&probe).unwrap()).unwrap();
            assert!((lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0), "{map:?}: {lhs} vs {rhs}");
        }
    }
}
