//! Full-reference quality metrics: PSNR, SSIM and TMQI.

use statrs::distribution::{Beta, Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

/// Rec. 709 luma weights.
const LUMA: [f64; 3] = [0.2126, 0.7152, 0.0722];
const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `10·log10(1/MSE)` over every sample, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("psnr", a, b)?;
    if a.is_empty() {
        return Err(Error::InvalidArgument("psnr of empty images".into()));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

/// Single-channel image in `f64`.
#[derive(Clone, Debug)]
struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn scaled(&self, k: f64) -> Plane {
        Plane {
            h: self.h,
            w: self.w,
            v: self.v.iter().map(|x| x * k).collect(),
        }
    }

    fn mul(&self, other: &Plane) -> Plane {
        Plane {
            h: self.h,
            w: self.w,
            v: self.v.iter().zip(&other.v).map(|(a, b)| a * b).collect(),
        }
    }

    /// 2×2 box average, dropping an odd last row or column.
    fn halve(&self) -> Plane {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut v = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let at = |dy: usize, dx: usize| self.v[(2 * y + dy) * self.w + 2 * x + dx];
                v.push((at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0);
            }
        }
        Plane { h, w, v }
    }
}

/// Rec. 709 luma of an RGB image; single-channel images pass through.
fn luma(t: &Tensor) -> Result<Plane> {
    let s = t.shape();
    if t.rank() != 3 || !(s[2] == 1 || s[2] == 3) {
        return Err(Error::shape("luma", format!("expected [H, W, 1|3], got {s:?}")));
    }
    let v = if s[2] == 1 {
        t.data().iter().map(|&x| x as f64).collect()
    } else {
        t.data()
            .chunks_exact(3)
            .map(|p| LUMA.iter().zip(p).map(|(w, &x)| w * x as f64).sum())
            .collect()
    };
    Ok(Plane { h: s[0], w: s[1], v })
}

fn gaussian_kernel() -> [f64; WINDOW] {
    let mut k = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
    }
    let sum: f64 = k.iter().sum();
    k.map(|v| v / sum)
}

/// Gaussian-weighted local mean over every fully contained window.
fn filter_valid(p: &Plane) -> Plane {
    let k = gaussian_kernel();
    let (h, w) = (p.h + 1 - WINDOW, p.w + 1 - WINDOW);
    let mut rows = vec![0.0; p.h * w];
    for y in 0..p.h {
        for x in 0..w {
            rows[y * w + x] = (0..WINDOW).map(|i| k[i] * p.v[y * p.w + x + i]).sum();
        }
    }
    let mut v = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            v[y * w + x] = (0..WINDOW).map(|i| k[i] * rows[(y + i) * w + x]).sum();
        }
    }
    Plane { h, w, v }
}

/// Local means, variances and covariance of two planes.
struct LocalStats {
    mu_a: Plane,
    mu_b: Plane,
    var_a: Vec<f64>,
    var_b: Vec<f64>,
    cov: Vec<f64>,
}

fn local_stats(a: &Plane, b: &Plane) -> LocalStats {
    let mu_a = filter_valid(a);
    let mu_b = filter_valid(b);
    let aa = filter_valid(&a.mul(a));
    let bb = filter_valid(&b.mul(b));
    let ab = filter_valid(&a.mul(b));
    let n = mu_a.v.len();
    let (mut var_a, mut var_b, mut cov) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for i in 0..n {
        var_a[i] = aa.v[i] - mu_a.v[i] * mu_a.v[i];
        var_b[i] = bb.v[i] - mu_b.v[i] * mu_b.v[i];
        cov[i] = ab.v[i] - mu_a.v[i] * mu_b.v[i];
    }
    LocalStats {
        mu_a,
        mu_b,
        var_a,
        var_b,
        cov,
    }
}

fn check_min_side(op: &'static str, p: &Plane) -> Result<()> {
    if p.h < WINDOW || p.w < WINDOW {
        return Err(Error::InvalidArgument(format!(
            "{op} needs images of at least {WINDOW}×{WINDOW}, got {}×{}",
            p.h, p.w
        )));
    }
    Ok(())
}

/// Mean local SSIM on luma with an 11×11 Gaussian window (σ = 1.5),
/// `K1 = 0.01`, `K2 = 0.03` and unit dynamic range.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let (pa, pb) = (luma(a)?, luma(b)?);
    check_min_side("ssim", &pa)?;
    let c1 = (0.01f64).powi(2);
    let c2 = (0.03f64).powi(2);
    let st = local_stats(&pa, &pb);
    let n = st.cov.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (st.mu_a.v[i], st.mu_b.v[i]);
            ((2.0 * ma * mb + c1) * (2.0 * st.cov[i] + c2))
                / ((ma * ma + mb * mb + c1) * (st.var_a[i] + st.var_b[i] + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Tone-mapped image quality: overall score and its structural and
/// naturalness parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tmqi {
    pub q: f64,
    pub s: f64,
    pub n: f64,
}

const TMQI_A: f64 = 0.8012;
const TMQI_ALPHA: f64 = 0.3046;
const TMQI_BETA: f64 = 0.7088;
const SCALE_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
/// Spatial frequency, in cycles per degree, of the finest scale.
const FINEST_FREQUENCY: f64 = 16.0;
const MEAN_MU: f64 = 115.94;
const MEAN_SIGMA: f64 = 27.99;
const CONTRAST_NORM: f64 = 64.29;
const CONTRAST_A: f64 = 4.4;
const CONTRAST_B: f64 = 10.1;

/// Contrast sensitivity at spatial frequency `f`.
fn csf(f: f64) -> f64 {
    100.0 * 2.6 * (0.0192 + 0.114 * f) * (-(0.114 * f).powf(1.1)).exp()
}

/// Mean local structural fidelity at one scale. Local standard deviations
/// pass through a Gaussian CDF centred on the visibility threshold at
/// `freq` before entering the SSIM-like contrast term.
fn local_structure(hdr: &Plane, ldr: &Plane, freq: f64) -> f64 {
    let c1 = 0.01;
    let c2 = 10.0;
    let mu = 128.0 / (1.4 * csf(freq));
    let visibility = Normal::new(mu, mu / 3.0).expect("threshold is positive");
    let st = local_stats(hdr, ldr);
    let n = st.cov.len();
    let total: f64 = (0..n)
        .map(|i| {
            let sa = st.var_a[i].max(0.0).sqrt();
            let sb = st.var_b[i].max(0.0).sqrt();
            let (pa, pb) = (visibility.cdf(sa), visibility.cdf(sb));
            ((2.0 * pa * pb + c1) / (pa * pa + pb * pb + c1)) * ((st.cov[i] + c2) / (sa * sb + c2))
        })
        .sum();
    total / n as f64
}

/// Product of per-scale fidelities raised to fixed weights. Scales whose
/// images drop below the window size are left out and the remaining
/// weights renormalised.
fn structural_fidelity(hdr: &Plane, ldr: &Plane) -> f64 {
    let (mut a, mut b) = (hdr.clone(), ldr.clone());
    let mut freq = FINEST_FREQUENCY;
    let mut parts = Vec::new();
    for (k, &w) in SCALE_WEIGHTS.iter().enumerate() {
        if a.h < WINDOW || a.w < WINDOW {
            break;
        }
        parts.push((local_structure(&a, &b, freq), w));
        if k + 1 < SCALE_WEIGHTS.len() {
            a = a.halve();
            b = b.halve();
            freq /= 2.0;
        }
    }
    let total: f64 = parts.iter().map(|p| p.1).sum();
    parts
        .iter()
        .map(|&(s, w)| s.max(0.0).powf(w / total))
        .product()
}

/// Likelihood of the image's global brightness and mean block contrast
/// under fixed natural-image densities, normalised by their peaks.
fn naturalness(ldr: &Plane) -> f64 {
    let mean = ldr.v.iter().sum::<f64>() / ldr.v.len() as f64;
    let mut stds = Vec::new();
    for by in 0..ldr.h / WINDOW {
        for bx in 0..ldr.w / WINDOW {
            let block: Vec<f64> = (0..WINDOW)
                .flat_map(|y| (0..WINDOW).map(move |x| (by * WINDOW + y, bx * WINDOW + x)))
                .map(|(y, x)| ldr.v[y * ldr.w + x])
                .collect();
            let m = block.iter().sum::<f64>() / block.len() as f64;
            let var = block.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (block.len() - 1) as f64;
            stds.push(var.sqrt());
        }
    }
    let contrast = stds.iter().sum::<f64>() / stds.len() as f64;
    let brightness = Normal::new(MEAN_MU, MEAN_SIGMA).expect("valid density");
    let spread = Beta::new(CONTRAST_A, CONTRAST_B).expect("valid density");
    let mode = (CONTRAST_A - 1.0) / (CONTRAST_A + CONTRAST_B - 2.0);
    let x = (contrast / CONTRAST_NORM).clamp(0.0, 1.0);
    let pm = brightness.pdf(mean) / brightness.pdf(MEAN_MU);
    let pd = spread.pdf(x) / spread.pdf(mode);
    (pm * pd).clamp(0.0, 1.0)
}

/// TMQI of a tone-mapped image in [0, 1] against its high-dynamic-range
/// reference. Both are reduced to luma; the LDR is put on a 0–255 scale and
/// the reference is min-max stretched onto the same range.
pub fn tmqi(ldr: &Tensor, hdr: &Tensor) -> Result<Tmqi> {
    let (l, h) = (luma(ldr)?, luma(hdr)?);
    if (l.h, l.w) != (h.h, h.w) {
        return Err(Error::shape(
            "tmqi",
            format!("{}×{} vs {}×{}", l.h, l.w, h.h, h.w),
        ));
    }
    check_min_side("tmqi", &l)?;
    if !ldr.is_finite() || !hdr.is_finite() {
        return Err(Error::NonFinite("tmqi input".into()));
    }
    let l = l.scaled(255.0);
    let (lo, hi) = h
        .v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let h = if hi > lo {
        Plane {
            h: h.h,
            w: h.w,
            v: h.v.iter().map(|v| 255.0 * (v - lo) / (hi - lo)).collect(),
        }
    } else {
        h.scaled(0.0)
    };
    let s = structural_fidelity(&h, &l).clamp(0.0, 1.0);
    let n = naturalness(&l);
    let q = TMQI_A * s.powf(TMQI_ALPHA) + (1.0 - TMQI_A) * n.powf(TMQI_BETA);
    Ok(Tmqi { q, s, n })
}

/// One row of an evaluation report.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub tmqi: Tmqi,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "name,psnr,ssim,tmqi_q,tmqi_s,tmqi_n";

    /// Scores `output` against `target`, with `reference` as the HDR input
    /// for TMQI.
    pub fn compute(name: &str, output: &Tensor, target: &Tensor, reference: &Tensor) -> Result<Self> {
        Ok(Self {
            name: name.to_owned(),
            psnr: psnr(output, target)?,
            ssim: ssim(output, target)?,
            tmqi: tmqi(output, reference)?,
        })
    }

    /// Field-wise mean, or `None` for an empty slice.
    pub fn mean(name: &str, reports: &[MetricReport]) -> Option<Self> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let avg = |f: &dyn Fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(Self {
            name: name.to_owned(),
            psnr: avg(&|r| r.psnr),
            ssim: avg(&|r| r.ssim),
            tmqi: Tmqi {
                q: avg(&|r| r.tmqi.q),
                s: avg(&|r| r.tmqi.s),
                n: avg(&|r| r.tmqi.n),
            },
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.name, self.psnr, self.ssim, self.tmqi.q, self.tmqi.s, self.tmqi.n
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::random;

    fn box_blur(t: &Tensor, r: usize) -> Tensor {
        let s = t.shape();
        let (h, w, c) = (s[0], s[1], s[2]);
        let mut out = t.clone();
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let (mut sum, mut n) = (0.0, 0.0);
                    for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
                        for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
                            sum += t.at(&[yy, xx, ch]);
                            n += 1.0;
                        }
                    }
                    out.set(&[y, x, ch], sum / n);
                }
            }
        }
        out
    }

    #[test]
    fn psnr_degenerate_and_hand_cases() {
        let x = random(&[16, 16, 3], 0.0, 0.8, 1);
        assert_eq!(psnr(&x, &x).unwrap(), 100.0);
        let y = x.map(|v| v + 0.1);
        assert!((psnr(&x, &y).unwrap() - 20.0).abs() < 1e-6);
        let a = Tensor::full(&[4, 4, 3], 0.25);
        let b = Tensor::full(&[4, 4, 3], 0.35);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-6);
        let z = random(&[16, 16, 3], 0.0, 1.0, 2);
        assert_eq!(psnr(&x, &z).unwrap(), psnr(&z, &x).unwrap());
        assert!(psnr(&x, &Tensor::zeros(&[16, 8, 3])).is_err());
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let x = random(&[32, 40, 3], 0.0, 1.0, 3);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-9);
        assert!(ssim(&Tensor::zeros(&[10, 40, 3]), &Tensor::zeros(&[10, 40, 3])).is_err());
    }

    #[test]
    fn ssim_of_inverted_checkerboard_is_negative() {
        let mut x = Tensor::zeros(&[32, 32, 3]);
        for y in 0..32 {
            for xx in 0..32 {
                let v = ((y / 4 + xx / 4) % 2) as f32;
                for c in 0..3 {
                    x.set(&[y, xx, c], v);
                }
            }
        }
        let inv = x.map(|v| 1.0 - v);
        assert!(ssim(&x, &inv).unwrap() < 0.0);
    }

    #[test]
    fn ssim_drops_with_noise() {
        let x = box_blur(&random(&[48, 48, 3], 0.0, 1.0, 4), 2);
        let n1 = random(&[48, 48, 3], -0.02, 0.02, 5);
        let noisy = x.zip_map(&n1, |a, b| a + b).unwrap();
        let noisier = x.zip_map(&n1, |a, b| a + 3.0 * b).unwrap();
        let s1 = ssim(&x, &noisy).unwrap();
        let s2 = ssim(&x, &noisier).unwrap();
        assert!(s1 < 1.0 && s2 < s1, "{s1} {s2}");
    }

    #[test]
    fn tmqi_structure_is_one_on_identical_images() {
        let x = random(&[64, 64, 3], 0.0, 1.0, 6);
        let t = tmqi(&x, &x).unwrap();
        assert!((t.s - 1.0).abs() < 1e-6, "{t:?}");
        assert!((0.0..=1.0).contains(&t.q) && (0.0..=1.0).contains(&t.n));
    }

    #[test]
    fn tmqi_structure_survives_rescaling_of_reference() {
        let x = box_blur(&random(&[224, 224, 3], 0.0, 1.0, 7), 1);
        let t = tmqi(&x, &x.map(|v| 7.5 * v)).unwrap();
        let same = tmqi(&x, &x).unwrap();
        assert!((t.s - same.s).abs() < 1e-9);
        assert!(t.s > 0.95, "{t:?}");
    }

    #[test]
    fn tmqi_structure_drops_with_blur() {
        let hdr = random(&[96, 96, 3], 0.0, 1.0, 8);
        let sharp = tmqi(&hdr, &hdr).unwrap().s;
        let blurred = tmqi(&box_blur(&hdr, 3), &hdr).unwrap().s;
        assert!(blurred < sharp, "{blurred} vs {sharp}");
    }

    #[test]
    fn tmqi_naturalness_ignores_reference() {
        let ldr = random(&[64, 64, 3], 0.2, 0.7, 9);
        let a = tmqi(&ldr, &random(&[64, 64, 3], 0.0, 1.0, 10)).unwrap();
        let b = tmqi(&ldr, &random(&[64, 64, 3], 0.0, 50.0, 11)).unwrap();
        assert_eq!(a.n, b.n);
        assert!(tmqi(&ldr, &Tensor::zeros(&[64, 32, 3])).is_err());
    }

    #[test]
    fn report_row_matches_header() {
        let x = random(&[32, 32, 3], 0.0, 1.0, 12);
        let r = MetricReport::compute("a", &x, &x, &x).unwrap();
        assert_eq!(r.csv_row().split(',').count(), MetricReport::CSV_HEADER.split(',').count());
        assert!(r.csv_row().starts_with("a,100.000000,1.000000,"));
    }
}
