//! Separable depthwise Gaussian blur with symmetric reflection at the borders.

use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Result};
use crate::real::Real;
use crate::tensor::{reflect_index, Tensor};

/// Default truncation radius, `ceil(2 sigma)`.
pub fn default_radius(sigma: f64) -> usize {
    ((2.0 * sigma).ceil() as usize).max(1)
}

/// Normalized taps `exp(-i^2 / 2 sigma^2)` for `i in -radius..=radius`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn blur_rows<T: Real>(src: &[T], dst: &mut [T], h: usize, w: usize, k: &[T], transpose: bool) {
    let r = (k.len() / 2) as isize;
    for y in 0..h {
        let s = &src[y * w..(y + 1) * w];
        let d = &mut dst[y * w..(y + 1) * w];
        if transpose {
            d.fill(T::zero());
        }
        for x in 0..w {
            if transpose {
                let gv = s[x];
                for (t, &kv) in k.iter().enumerate() {
                    d[reflect_index(x as isize + t as isize - r, w)] += kv * gv;
                }
            } else {
                let mut acc = T::zero();
                for (t, &kv) in k.iter().enumerate() {
                    acc += kv * s[reflect_index(x as isize + t as isize - r, w)];
                }
                d[x] = acc;
            }
        }
    }
}

fn blur_cols<T: Real>(src: &[T], dst: &mut [T], h: usize, w: usize, k: &[T], transpose: bool) {
    let r = (k.len() / 2) as isize;
    dst.fill(T::zero());
    for y in 0..h {
        for (t, &kv) in k.iter().enumerate() {
            let yy = reflect_index(y as isize + t as isize - r, h);
            let (from, to) = if transpose { (y, yy) } else { (yy, y) };
            let s = &src[from * w..(from + 1) * w];
            let d = &mut dst[to * w..(to + 1) * w];
            d.iter_mut().zip(s).for_each(|(o, &v)| *o += kv * v);
        }
    }
}

fn apply<T: Real>(x: &[T], h: usize, w: usize, k: &[T], transpose: bool) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    let mut tmp = vec![T::zero(); h * w];
    for (src, dst) in x.chunks(h * w).zip(out.chunks_mut(h * w)) {
        if transpose {
            blur_cols(src, &mut tmp, h, w, k, true);
            blur_rows(&tmp, dst, h, w, k, true);
        } else {
            blur_rows(src, &mut tmp, h, w, k, false);
            blur_cols(&tmp, dst, h, w, k, false);
        }
    }
    out
}

pub fn gaussian_blur_forward<T: Real>(
    x: &Tensor<T>,
    sigma: f64,
    radius: usize,
) -> Result<Tensor<T>> {
    ensure!(
        sigma > 0.0,
        "gaussian_blur",
        "sigma must be positive, got {}",
        sigma
    );
    ensure!(radius >= 1, "gaussian_blur", "radius must be at least 1");
    let [_, _, h, w] = x.dims4("gaussian_blur")?;
    let k: Vec<T> = gaussian_kernel(sigma, radius)
        .into_iter()
        .map(T::of)
        .collect();
    Tensor::from_vec(x.shape(), apply(x.data(), h, w, &k, false))
}

impl<T: Real> Tape<T> {
    pub fn gaussian_blur(&self, x: &Var<T>, sigma: f64, radius: usize) -> Result<Var<T>> {
        let value = gaussian_blur_forward(x.value(), sigma, radius)?;
        let [_, _, h, w] = x.value().dims4("gaussian_blur")?;
        let k: Vec<T> = gaussian_kernel(sigma, radius)
            .into_iter()
            .map(T::of)
            .collect();
        let shape = x.shape().to_vec();
        self.record("gaussian_blur", value, &[x], move |g, _| {
            vec![Some(
                Tensor::from_vec(&shape, apply(g.data(), h, w, &k, true)).expect("shape"),
            )]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kernel_is_normalized() {
        for (s, r) in [(12.0, 24), (1.5, 3), (0.3, 1)] {
            let k = gaussian_kernel(s, r);
            assert_eq!(k.len(), 2 * r + 1);
            assert!((k.iter().sum::<f64>() - 1.0).abs() <= 1e-15);
        }
        assert_eq!(default_radius(12.0), 24);
    }

    #[test]
    fn constant_image_is_preserved() {
        let x = Tensor::<f32>::full(&[1, 3, 16, 16], 0.6);
        let y = gaussian_blur_forward(&x, 12.0, 24).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn tiny_sigma_is_near_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::rand_uniform(&[1, 1, 8, 8], 0.0, 1.0, &mut rng);
        let y = gaussian_blur_forward(&x, 0.05, 1).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn impulse_response_is_the_sampled_gaussian() {
        let (sigma, r) = (1.2, 3);
        let mut x = Tensor::<f64>::zeros(&[1, 1, 15, 15]);
        x.data_mut()[7 * 15 + 7] = 1.0;
        let y = gaussian_blur_forward(&x, sigma, r).unwrap();
        let z: f64 = (-3..=3)
            .map(|i: i32| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
            .sum();
        for dy in -3i32..=3 {
            for dx in -3i32..=3 {
                let want = (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp() / (z * z);
                let got = y.data()[((7 + dy) * 15 + 7 + dx) as usize];
                assert!((got - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn global_mean_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (hw, sigma, r) in [(16, 12.0, 24), (64, 12.0, 24), (9, 2.0, 4)] {
            let x = Tensor::<f64>::rand_uniform(&[1, 3, hw, hw], 0.0, 1.0, &mut rng);
            let y = gaussian_blur_forward(&x, sigma, r).unwrap();
            for (a, b) in x.data().chunks(hw * hw).zip(y.data().chunks(hw * hw)) {
                let ma = a.iter().sum::<f64>() / a.len() as f64;
                let mb = b.iter().sum::<f64>() / b.len() as f64;
                assert!((ma - mb).abs() < 1e-5);
            }
        }
    }
}
