//! Straightforward `f64` re-implementation of the forward model.
//!
//! Written loop by loop from the definitions, sharing no code with the
//! library beyond reading weights. Finite differences taken on it are free of
//! the `f32` rounding that swamps small derivatives. Every relu and clamp
//! goes through [`Kinks`], which can record the branch taken at one point and
//! replay it elsewhere, so differences can be taken on a single smooth
//! piece.

use std::f64::consts::PI;

use crate::models::{Conv, Dense, DenoiserNet, ModelBundle, Ordering, ToneMapperNet};
use crate::numerics::Tensor;

/// `[h, w, c]` image in `f64`.
#[derive(Clone, Debug)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub v: Vec<f64>,
}

impl Grid {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            v: vec![0.0; h * w * c],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        assert_eq!(s.len(), 3);
        Self {
            h: s[0],
            w: s[1],
            c: s[2],
            v: t.data().iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[self.h, self.w, self.c],
            self.v.iter().map(|&x| x as f32).collect(),
        )
        .unwrap()
    }

    fn idx(&self, y: usize, x: usize, ch: usize) -> usize {
        (y * self.w + x) * self.c + ch
    }

    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.v[self.idx(y, x, ch)]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            v: self.v.iter().map(|&x| f(x)).collect(),
            ..*self
        }
    }

    fn zip(&self, o: &Grid, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!((self.h, self.w, self.c), (o.h, o.w, o.c));
        Self {
            v: self.v.iter().zip(&o.v).map(|(&a, &b)| f(a, b)).collect(),
            ..*self
        }
    }
}

/// Branch choices of every relu and clamp in one evaluation.
#[derive(Clone, Debug, Default)]
pub struct Kinks {
    taken: Vec<bool>,
    replay: Option<usize>,
}

impl Kinks {
    /// Records branches as they are evaluated.
    pub fn record() -> Self {
        Self::default()
    }

    /// Reuses the branches recorded here, ignoring the actual signs.
    pub fn replay(&self) -> Self {
        Self {
            taken: self.taken.clone(),
            replay: Some(0),
        }
    }

    fn branch(&mut self, actual: bool) -> bool {
        match &mut self.replay {
            None => {
                self.taken.push(actual);
                actual
            }
            Some(i) => {
                let b = self.taken[*i];
                *i += 1;
                b
            }
        }
    }

    fn relu(&mut self, g: &Grid) -> Grid {
        let mut out = g.clone();
        for v in &mut out.v {
            if !self.branch(*v > 0.0) {
                *v = 0.0;
            }
        }
        out
    }

    fn clamp01(&mut self, g: &Grid) -> Grid {
        let mut out = g.clone();
        for v in &mut out.v {
            if self.branch(*v < 0.0) {
                *v = 0.0;
            } else if self.branch(*v > 1.0) {
                *v = 1.0;
            }
        }
        out
    }
}

fn sigmoid(g: &Grid) -> Grid {
    g.map(|x| 1.0 / (1.0 + (-x).exp()))
}

fn w64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&x| x as f64).collect()
}

fn dense(g: &Grid, layer: &Dense) -> Grid {
    let (cout, cin) = (layer.cout(), layer.cin());
    assert_eq!(cin, g.c);
    let (w, b) = (w64(&layer.weight), w64(&layer.bias));
    let mut out = Grid::zeros(g.h, g.w, cout);
    for p in 0..g.h * g.w {
        let x = &g.v[p * cin..][..cin];
        for o in 0..cout {
            let mut acc = b[o];
            for i in 0..cin {
                acc += w[o * cin + i] * x[i];
            }
            out.v[p * cout + o] = acc;
        }
    }
    out
}

/// 3×3, stride 2, zero padding 1.
fn conv_s2(g: &Grid, conv: &Conv) -> Grid {
    let s = conv.weight.shape();
    let (cout, cin) = (s[0], s[3]);
    assert_eq!(cin, g.c);
    let (w, b) = (w64(&conv.weight), w64(&conv.bias));
    let (ho, wo) = ((g.h - 1) / 2 + 1, (g.w - 1) / 2 + 1);
    let mut out = Grid::zeros(ho, wo, cout);
    for oy in 0..ho {
        for ox in 0..wo {
            for o in 0..cout {
                let mut acc = b[o];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let y = (2 * oy + ky) as isize - 1;
                        let x = (2 * ox + kx) as isize - 1;
                        if y < 0 || x < 0 || y >= g.h as isize || x >= g.w as isize {
                            continue;
                        }
                        for i in 0..cin {
                            acc += w[((o * 3 + ky) * 3 + kx) * cin + i]
                                * g.get(y as usize, x as usize, i);
                        }
                    }
                }
                let idx = out.idx(oy, ox, o);
                out.v[idx] = acc;
            }
        }
    }
    out
}

fn mean_pool(g: &Grid) -> Grid {
    let mut out = Grid::zeros(1, 1, g.c);
    for p in 0..g.h * g.w {
        for ch in 0..g.c {
            out.v[ch] += g.v[p * g.c + ch];
        }
    }
    let n = (g.h * g.w) as f64;
    out.map(|x| x / n)
}

pub fn tonemap(x: &Grid, net: &ToneMapperNet, signed: bool, k: &mut Kinks) -> Grid {
    let x = if signed { x.map(|v| (v + 1.0) / 2.0) } else { x.clone() };
    let mut c = x.clone();
    for conv in &net.cond {
        c = k.relu(&conv_s2(&c, conv));
    }
    let cond = mean_pool(&c);
    let mut h = x;
    let last = net.base.len() - 1;
    for i in 0..=last {
        let z = dense(&h, &net.base[i]);
        let scale = dense(&cond, &net.scale[i]);
        let shift = dense(&cond, &net.shift[i]);
        let mut m = z.clone();
        for p in 0..z.h * z.w {
            for ch in 0..z.c {
                let j = p * z.c + ch;
                m.v[j] = z.v[j] * (1.0 + scale.v[ch]) + shift.v[ch];
            }
        }
        h = if i < last { k.relu(&m) } else { sigmoid(&m) };
    }
    if signed {
        h.map(|v| 2.0 * v - 1.0)
    } else {
        h
    }
}

const T: usize = 16;

fn tile_origins(len: usize) -> Vec<usize> {
    let mut o: Vec<usize> = (0..).map(|k| 8 * k).take_while(|&r| r + T <= len).collect();
    if *o.last().unwrap() + T != len {
        o.push(len - T);
    }
    o
}

fn dct_matrix() -> [[f64; T]; T] {
    let mut m = [[0.0; T]; T];
    for (u, row) in m.iter_mut().enumerate() {
        let a = if u == 0 { (1.0 / T as f64).sqrt() } else { (2.0 / T as f64).sqrt() };
        for (i, v) in row.iter_mut().enumerate() {
            *v = a * (PI * (2 * i + 1) as f64 * u as f64 / (2 * T) as f64).cos();
        }
    }
    m
}

/// Tile, transform, multiply by the network's multiplier, invert, average.
/// `B·X·Bᵀ`, or `Bᵀ·X·B` when `transpose`, for a `T×T` block.
fn separable(b: &[[f64; T]; T], x: &[Vec<f64>], transpose: bool) -> Vec<Vec<f64>> {
    let m = |p: usize, q: usize| if transpose { b[q][p] } else { b[p][q] };
    let mut tmp = vec![vec![0.0; T]; T];
    for p in 0..T {
        for j in 0..T {
            tmp[p][j] = (0..T).map(|i| m(p, i) * x[i][j]).sum();
        }
    }
    let mut out = vec![vec![0.0; T]; T];
    for p in 0..T {
        for q in 0..T {
            out[p][q] = (0..T).map(|j| m(q, j) * tmp[p][j]).sum();
        }
    }
    out
}

pub fn denoise(x: &Grid, net: &DenoiserNet, k: &mut Kinks) -> Grid {
    let b = dct_matrix();
    let mut sum = Grid::zeros(x.h, x.w, x.c);
    let mut count = vec![0.0; x.h * x.w];
    for &r in &tile_origins(x.h) {
        for &c0 in &tile_origins(x.w) {
            // coefficients laid out as a 16×16 image with x.c channels
            let mut coef = Grid::zeros(T, T, x.c);
            for ch in 0..x.c {
                let block: Vec<Vec<f64>> = (0..T).map(|i| (0..T).map(|j| x.get(r + i, c0 + j, ch)).collect()).collect();
                let out = separable(&b, &block, false);
                for u in 0..T {
                    for v in 0..T {
                        let idx = coef.idx(u, v, ch);
                        coef.v[idx] = out[u][v];
                    }
                }
            }
            let mut h = coef.clone();
            let last = net.layers.len() - 1;
            for (li, layer) in net.layers.iter().enumerate() {
                let z = dense(&h, layer);
                h = if li < last { k.relu(&z) } else { sigmoid(&z) };
            }
            let cleaned = coef.zip(&h, |a, m| a * m);
            for ch in 0..x.c {
                let block: Vec<Vec<f64>> = (0..T).map(|u| (0..T).map(|v| cleaned.get(u, v, ch)).collect()).collect();
                let out = separable(&b, &block, true);
                for i in 0..T {
                    for j in 0..T {
                        let idx = sum.idx(r + i, c0 + j, ch);
                        sum.v[idx] += out[i][j];
                    }
                }
            }
            for i in 0..T {
                for j in 0..T {
                    count[(r + i) * x.w + c0 + j] += 1.0;
                }
            }
        }
    }
    let mut out = sum;
    for p in 0..x.h * x.w {
        for ch in 0..x.c {
            out.v[p * x.c + ch] /= count[p];
        }
    }
    out
}

const KERNEL: [f64; 5] = [1.0, 4.0, 6.0, 4.0, 1.0];

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        i = if i < 0 { -i } else { 2 * (n - 1) - i };
    }
    i as usize
}

/// Blur along one axis of `g` (0 = rows, 1 = columns).
fn blur_axis(g: &Grid, axis: usize) -> Grid {
    let mut out = Grid::zeros(g.h, g.w, g.c);
    let n = if axis == 0 { g.h } else { g.w };
    for y in 0..g.h {
        for x in 0..g.w {
            for ch in 0..g.c {
                let mut acc = 0.0;
                for (o, &kv) in KERNEL.iter().enumerate() {
                    let pos = if axis == 0 { y } else { x } as isize + o as isize - 2;
                    let m = reflect(pos, n);
                    let (sy, sx) = if axis == 0 { (m, x) } else { (y, m) };
                    acc += kv / 16.0 * g.get(sy, sx, ch);
                }
                let idx = out.idx(y, x, ch);
                out.v[idx] = acc;
            }
        }
    }
    out
}

fn down(g: &Grid) -> Grid {
    let b = blur_axis(&blur_axis(g, 0), 1);
    let mut out = Grid::zeros(g.h / 2, g.w / 2, g.c);
    for y in 0..out.h {
        for x in 0..out.w {
            for ch in 0..g.c {
                let idx = out.idx(y, x, ch);
                out.v[idx] = b.get(2 * y, 2 * x, ch);
            }
        }
    }
    out
}

fn up(g: &Grid) -> Grid {
    let mut z = Grid::zeros(2 * g.h, 2 * g.w, g.c);
    for y in 0..g.h {
        for x in 0..g.w {
            for ch in 0..g.c {
                let idx = z.idx(2 * y, 2 * x, ch);
                z.v[idx] = 4.0 * g.get(y, x, ch);
            }
        }
    }
    blur_axis(&blur_axis(&z, 0), 1)
}

/// `[l0, l1, l2, base]`.
pub fn decompose(x: &Grid) -> [Grid; 4] {
    let g1 = down(x);
    let g2 = down(&g1);
    let g3 = down(&g2);
    let lap = |fine: &Grid, coarse: &Grid| fine.zip(&up(coarse), |a, b| a - b);
    [lap(x, &g1), lap(&g1, &g2), lap(&g2, &g3), g3]
}

pub fn reconstruct(levels: &[Grid; 4]) -> Grid {
    let mut g = levels[3].clone();
    for l in levels[..3].iter().rev() {
        g = l.zip(&up(&g), |a, b| a + b);
    }
    g
}

/// Level `i` of a decomposition through its networks in the bundle's order.
pub fn process_level(level: &Grid, i: usize, bundle: &ModelBundle, k: &mut Kinks) -> Grid {
    let tm = &bundle.tonemappers[i];
    if i == 3 {
        return tonemap(level, tm, false, k);
    }
    let dn = &bundle.denoisers[i];
    match bundle.ordering {
        Ordering::Tfdl => denoise(&tonemap(level, tm, true, k), dn, k),
        Ordering::Dftl => tonemap(&denoise(level, dn, k), tm, true, k),
    }
}

/// Reconstruction of processed levels, clamped to [0, 1].
pub fn finish(levels: &[Grid; 4], k: &mut Kinks) -> Grid {
    k.clamp01(&reconstruct(levels))
}

/// Decompose, per-level networks in the bundle's order, reconstruct, clamp.
pub fn enhance_patch(x: &Grid, bundle: &ModelBundle, k: &mut Kinks) -> Grid {
    let mut levels = decompose(x);
    for (i, l) in levels.iter_mut().enumerate() {
        *l = process_level(l, i, bundle, k);
    }
    finish(&levels, k)
}
