//! Max pooling, global average pooling and clipped local average pooling.

use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Result};
use crate::real::Real;
use crate::tensor::Tensor;

fn global_means<T: Real>(x: &Tensor<T>) -> Result<Vec<T>> {
    let [_, _, h, w] = x.dims4("avg_pool_global")?;
    let hw = h * w;
    let inv = T::one() / T::of(hw as f64);
    Ok(x.data()
        .chunks(hw)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect())
}

/// Clipped box offsets for a window: `[-(window-1)/2, window/2]`.
fn offsets(window: usize) -> (isize, isize) {
    (-(((window - 1) / 2) as isize), (window / 2) as isize)
}

fn clip(i: usize, lo: isize, hi: isize, n: usize) -> (usize, usize) {
    let a = (i as isize + lo).max(0) as usize;
    let b = ((i as isize + hi).min(n as isize - 1)) as usize;
    (a, b)
}

/// True when a local window already covers the whole image, in which case
/// local pooling is defined as the broadcast global mean.
pub fn window_covers(window: usize, h: usize, w: usize) -> bool {
    window >= h.max(w)
}

fn local_means<T: Real>(x: &Tensor<T>, window: usize) -> Result<Vec<T>> {
    let [_, _, h, w] = x.dims4("avg_pool_local")?;
    let hw = h * w;
    if window_covers(window, h, w) {
        let means = global_means(x)?;
        let mut out = Vec::with_capacity(x.len());
        for m in means {
            out.extend(std::iter::repeat_n(m, hw));
        }
        return Ok(out);
    }
    let (lo, hi) = offsets(window);
    let mut out = Vec::with_capacity(x.len());
    let mut sat = vec![0.0f64; (h + 1) * (w + 1)];
    for plane in x.data().chunks(hw) {
        for y in 0..h {
            let mut row = 0.0;
            for xx in 0..w {
                row += plane[y * w + xx].as_f64();
                sat[(y + 1) * (w + 1) + xx + 1] = sat[y * (w + 1) + xx + 1] + row;
            }
        }
        for y in 0..h {
            let (y0, y1) = clip(y, lo, hi, h);
            for xx in 0..w {
                let (x0, x1) = clip(xx, lo, hi, w);
                let s = sat[(y1 + 1) * (w + 1) + x1 + 1]
                    - sat[y0 * (w + 1) + x1 + 1]
                    - sat[(y1 + 1) * (w + 1) + x0]
                    + sat[y0 * (w + 1) + x0];
                let count = ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
                out.push(T::of(s / count));
            }
        }
    }
    Ok(out)
}

/// Plain per-channel spatial mean, `[N,C,1,1]`.
pub fn avg_pool_global_forward<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, _, _] = x.dims4("avg_pool_global")?;
    Tensor::from_vec(&[n, c, 1, 1], global_means(x)?)
}

/// Plain local mean over a `window x window` neighborhood clipped to the image.
pub fn avg_pool_local_forward<T: Real>(x: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    ensure!(window >= 1, "avg_pool_local", "window must be positive");
    Tensor::from_vec(x.shape(), local_means(x, window)?)
}

impl<T: Real> Tape<T> {
    pub fn max_pool2d(&self, x: &Var<T>, k: usize, stride: usize) -> Result<Var<T>> {
        let [n, c, h, w] = x.value().dims4("max_pool2d")?;
        ensure!(
            k >= 1 && stride >= 1,
            "max_pool2d",
            "kernel and stride must be positive"
        );
        ensure!(
            h >= k && w >= k,
            "max_pool2d",
            "window {} larger than input {}x{}",
            k,
            h,
            w
        );
        let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let xd = x.value().data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut arg = Vec::with_capacity(n * c * oh * ow);
        for (pi, plane) in xd.chunks(h * w).enumerate() {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = oy * stride * w + ox * stride;
                    for ky in 0..k {
                        for kx in 0..k {
                            let idx = (oy * stride + ky) * w + ox * stride + kx;
                            // strict comparison keeps the first maximum in row-major order
                            if plane[idx] > plane[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(plane[best]);
                    arg.push(pi * h * w + best);
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, oh, ow], out)?;
        let shape = x.shape().to_vec();
        self.record("max_pool2d", value, &[x], move |g, _| {
            let mut gx = Tensor::zeros(&shape);
            let d = gx.data_mut();
            for (&i, &gv) in arg.iter().zip(g.data()) {
                d[i] += gv;
            }
            vec![Some(gx)]
        })
    }

    pub fn avg_pool_global(&self, x: &Var<T>) -> Result<Var<T>> {
        let [n, c, h, w] = x.value().dims4("avg_pool_global")?;
        let value = avg_pool_global_forward(x.value())?;
        self.record("avg_pool_global", value, &[x], move |g, _| {
            let hw = h * w;
            let inv = T::one() / T::of(hw as f64);
            let mut gx = Vec::with_capacity(n * c * hw);
            for &gv in g.data() {
                gx.extend(std::iter::repeat_n(gv * inv, hw));
            }
            vec![Some(Tensor::from_vec(&[n, c, h, w], gx).expect("shape"))]
        })
    }

    /// Mean over a `window x window` neighborhood clipped to the image bounds;
    /// edge windows divide by the number of pixels they actually cover.
    pub fn avg_pool_local(&self, x: &Var<T>, window: usize) -> Result<Var<T>> {
        ensure!(window >= 1, "avg_pool_local", "window must be positive");
        let [n, c, h, w] = x.value().dims4("avg_pool_local")?;
        let value = Tensor::from_vec(x.shape(), local_means(x.value(), window)?)?;
        self.record("avg_pool_local", value, &[x], move |g, _| {
            let hw = h * w;
            let mut gx = Vec::with_capacity(n * c * hw);
            if window_covers(window, h, w) {
                let inv = T::one() / T::of(hw as f64);
                for plane in g.data().chunks(hw) {
                    let s = plane.iter().copied().sum::<T>() * inv;
                    gx.extend(std::iter::repeat_n(s, hw));
                }
            } else {
                let (lo, hi) = offsets(window);
                let mut diff = vec![0.0f64; (h + 1) * (w + 1)];
                for plane in g.data().chunks(hw) {
                    diff.fill(0.0);
                    for y in 0..h {
                        let (y0, y1) = clip(y, lo, hi, h);
                        for xx in 0..w {
                            let (x0, x1) = clip(xx, lo, hi, w);
                            let count = ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
                            let v = plane[y * w + xx].as_f64() / count;
                            diff[y0 * (w + 1) + x0] += v;
                            diff[y0 * (w + 1) + x1 + 1] -= v;
                            diff[(y1 + 1) * (w + 1) + x0] -= v;
                            diff[(y1 + 1) * (w + 1) + x1 + 1] += v;
                        }
                    }
                    for y in 0..h {
                        for xx in 0..w {
                            let mut v = diff[y * (w + 1) + xx];
                            if xx > 0 {
                                v += diff[y * (w + 1) + xx - 1];
                            }
                            if y > 0 {
                                v += diff[(y - 1) * (w + 1) + xx];
                            }
                            if xx > 0 && y > 0 {
                                v -= diff[(y - 1) * (w + 1) + xx - 1];
                            }
                            diff[y * (w + 1) + xx] = v;
                            gx.push(T::of(v));
                        }
                    }
                }
            }
            vec![Some(Tensor::from_vec(&[n, c, h, w], gx).expect("shape"))]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn maxpool(x: &Tensor<f64>, k: usize, s: usize) -> Tensor<f64> {
        let tape = Tape::no_grad();
        tape.max_pool2d(&tape.constant(x.clone()), k, s)
            .unwrap()
            .into_tensor()
    }

    #[test]
    fn max_pool_basics() {
        let x = Tensor::<f64>::full(&[1, 2, 4, 4], 0.3);
        let y = maxpool(&x, 2, 2);
        assert_eq!(y, Tensor::full(&[1, 2, 2, 2], 0.3));
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool(&x, 2, 2).data(), &[4.0]);
        let small = Tensor::<f64>::zeros(&[1, 1, 1, 3]);
        let tape = Tape::no_grad();
        assert!(tape.max_pool2d(&tape.constant(small), 2, 2).is_err());
    }

    #[test]
    fn max_pool_matches_sliding_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::rand_uniform(&[1, 3, 6, 6], -1.0, 1.0, &mut rng);
        let y = maxpool(&x, 2, 2);
        for c in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut m = f64::NEG_INFINITY;
                    for ky in 0..2 {
                        for kx in 0..2 {
                            m = m.max(x.data()[c * 36 + (2 * oy + ky) * 6 + 2 * ox + kx]);
                        }
                    }
                    assert_eq!(y.data()[c * 9 + oy * 3 + ox], m);
                }
            }
        }
    }

    #[test]
    fn max_pool_tie_goes_to_first() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::full(&[1, 1, 2, 2], 1.0));
        let y = tape.max_pool2d(&x, 2, 2).unwrap();
        let s = tape.sum(&y).unwrap();
        let g = tape.backward(&s).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn global_pool_values() {
        let x = Tensor::<f64>::full(&[1, 2, 3, 3], 0.25);
        assert_eq!(
            avg_pool_global_forward(&x).unwrap(),
            Tensor::full(&[1, 2, 1, 1], 0.25)
        );
        let x = Tensor::from_vec(&[1, 1, 1, 2], vec![0.0, 2.0]).unwrap();
        assert_eq!(avg_pool_global_forward(&x).unwrap().data(), &[1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::rand_uniform(&[2, 3, 4, 5], 0.0, 1.0, &mut rng);
        let y = avg_pool_global_forward(&x).unwrap();
        for (i, plane) in x.data().chunks(20).enumerate() {
            let want = plane.iter().sum::<f64>() / 20.0;
            assert!((y.data()[i] - want).abs() <= 1e-6 * want.abs().max(1.0));
        }
    }

    #[test]
    fn local_pool_matches_clipped_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::rand_uniform(&[1, 1, 5, 5], 0.0, 1.0, &mut rng);
        let y = avg_pool_local_forward(&x, 3).unwrap();
        for yy in 0..5i32 {
            for xx in 0..5i32 {
                let (mut s, mut cnt) = (0.0, 0.0);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (a, b) = (yy + dy, xx + dx);
                        if (0..5).contains(&a) && (0..5).contains(&b) {
                            s += x.data()[(a * 5 + b) as usize];
                            cnt += 1.0;
                        }
                    }
                }
                assert!((y.data()[(yy * 5 + xx) as usize] - s / cnt).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn local_pool_full_window_is_global_broadcast() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::<f32>::rand_uniform(&[2, 3, 6, 4], 0.0, 1.0, &mut rng);
        let local = avg_pool_local_forward(&x, 6).unwrap();
        let global = avg_pool_global_forward(&x).unwrap();
        for (i, plane) in local.data().chunks(24).enumerate() {
            assert!(plane
                .iter()
                .all(|v| v.to_bits() == global.data()[i].to_bits()));
        }
        let c = Tensor::<f64>::full(&[1, 1, 7, 7], 0.4);
        assert!(avg_pool_local_forward(&c, 3)
            .unwrap()
            .data()
            .iter()
            .all(|v| (v - 0.4).abs() < 1e-15));
    }
}
