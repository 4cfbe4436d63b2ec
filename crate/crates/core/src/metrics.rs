//! Image quality metrics on `[0,1]` data.

use crate::error::{ensure, Result};
use crate::ops::gaussian_kernel;
use crate::real::Real;
use crate::tensor::Tensor;

/// Reported for identical images, where PSNR is unbounded.
pub const PSNR_SENTINEL: f64 = 120.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn mse<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    ensure!(
        x.shape() == y.shape(),
        "psnr",
        "shapes {:?} and {:?} differ",
        x.shape(),
        y.shape()
    );
    ensure!(!x.is_empty(), "psnr", "empty image");
    let s: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum();
    Ok(s / x.len() as f64)
}

/// `10 log10(1 / MSE)` over all elements, capped at [`PSNR_SENTINEL`].
pub fn psnr<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    let m = mse(x, y)?;
    Ok(if m == 0.0 {
        PSNR_SENTINEL
    } else {
        (-10.0 * m.log10()).min(PSNR_SENTINEL)
    })
}

/// PSNR in the 8-bit domain: both images are quantized to 0..=255 first.
pub fn psnr_u8<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    let q = |t: &Tensor<T>| t.map(|v| T::of((v.as_f64().clamp(0.0, 1.0) * 255.0).round()));
    let m = mse(&q(x), &q(y))?;
    Ok(if m == 0.0 {
        PSNR_SENTINEL
    } else {
        (10.0 * (255.0f64 * 255.0 / m).log10()).min(PSNR_SENTINEL)
    })
}

/// Separable valid-mode Gaussian filtering of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5), computed per channel
/// over valid windows and averaged over channels and images.
pub fn ssim<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    ensure!(
        x.shape() == y.shape(),
        "ssim",
        "shapes {:?} and {:?} differ",
        x.shape(),
        y.shape()
    );
    let [n, c, h, w] = x.dims4("ssim")?;
    ensure!(
        h >= SSIM_WINDOW && w >= SSIM_WINDOW,
        "ssim",
        "image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
    );
    let k = gaussian_kernel(SSIM_SIGMA, SSIM_WINDOW / 2);
    let (c1, c2) = ((K1 * 1.0).powi(2), (K2 * 1.0).powi(2));
    let plane = h * w;
    let mut total = 0.0;
    for p in 0..n * c {
        let a: Vec<f64> = x.data()[p * plane..(p + 1) * plane]
            .iter()
            .map(|v| v.as_f64())
            .collect();
        let b: Vec<f64> = y.data()[p * plane..(p + 1) * plane]
            .iter()
            .map(|v| v.as_f64())
            .collect();
        let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).collect::<Vec<f64>>();
        let mu_a = filter_valid(&a, h, w, &k);
        let mu_b = filter_valid(&b, h, w, &k);
        let aa = filter_valid(&prod(&a, &a), h, w, &k);
        let bb = filter_valid(&prod(&b, &b), h, w, &k);
        let ab = filter_valid(&prod(&a, &b), h, w, &k);
        let mut s = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            s += num / den;
        }
        total += s / mu_a.len() as f64;
    }
    Ok(total / (n * c) as f64)
}

/// Averages of per-image metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub psnr_u8_db: f64,
    pub ssim: f64,
    pub n_images: usize,
}

/// Per-image PSNR and SSIM, averaged over the set.
pub fn evaluate<'a, T: Real + 'a>(
    pairs: impl IntoIterator<Item = (&'a Tensor<T>, &'a Tensor<T>)>,
) -> Result<MetricReport> {
    let mut r = MetricReport::default();
    for (x, y) in pairs {
        r.psnr_db += psnr(x, y)?;
        r.psnr_u8_db += psnr_u8(x, y)?;
        r.ssim += ssim(x, y)?;
        r.n_images += 1;
    }
    if r.n_images > 0 {
        let n = r.n_images as f64;
        r.psnr_db /= n;
        r.psnr_u8_db /= n;
        r.ssim /= n;
    }
    Ok(r)
}
