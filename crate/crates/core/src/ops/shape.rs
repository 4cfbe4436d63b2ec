//! Layout ops: pixel (un)shuffle, 2x area downscale, channel concat/narrow,
//! reflect padding and cropping.

use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Result};
use crate::real::Real;
use crate::tensor::{reflect_index, Tensor};

fn shuffle_data<T: Real>(
    x: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    r: usize,
    inverse: bool,
) -> Vec<T> {
    // forward: in [n, c*r*r, h, w] -> out [n, c, h*r, w*r]
    let mut out = vec![T::zero(); x.len()];
    let (oh, ow) = (h * r, w * r);
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let src_c = (ni * c + ci) * r * r + i * r + j;
                    for y in 0..h {
                        for xx in 0..w {
                            let small = (src_c * h + y) * w + xx;
                            let big = ((ni * c + ci) * oh + y * r + i) * ow + xx * r + j;
                            if inverse {
                                out[small] = x[big];
                            } else {
                                out[big] = x[small];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn pixel_shuffle_forward<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4("pixel_shuffle")?;
    ensure!(r >= 1, "pixel_shuffle", "factor must be positive");
    ensure!(
        c % (r * r) == 0,
        "pixel_shuffle",
        "channels {} not divisible by {}",
        c,
        r * r
    );
    let oc = c / (r * r);
    Tensor::from_vec(
        &[n, oc, h * r, w * r],
        shuffle_data(x.data(), n, oc, h, w, r, false),
    )
}

pub fn pixel_unshuffle_forward<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4("pixel_unshuffle")?;
    ensure!(r >= 1, "pixel_unshuffle", "factor must be positive");
    ensure!(
        h % r == 0 && w % r == 0,
        "pixel_unshuffle",
        "extents {}x{} not divisible by {}",
        h,
        w,
        r
    );
    let (sh, sw) = (h / r, w / r);
    Tensor::from_vec(
        &[n, c * r * r, sh, sw],
        shuffle_data(x.data(), n, c, sh, sw, r, true),
    )
}

pub fn resize_half_area_forward<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4("resize_half_area")?;
    ensure!(
        h % 2 == 0 && w % 2 == 0,
        "resize_half_area",
        "extents {}x{} must be even",
        h,
        w
    );
    let (oh, ow) = (h / 2, w / 2);
    let q = T::of(0.25);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks(h * w) {
        for y in 0..oh {
            let r0 = &plane[2 * y * w..(2 * y + 1) * w];
            let r1 = &plane[(2 * y + 1) * w..(2 * y + 2) * w];
            for xx in 0..ow {
                out.push(((r0[2 * xx] + r0[2 * xx + 1]) + (r1[2 * xx] + r1[2 * xx + 1])) * q);
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out)
}

/// Pad bottom/right by symmetric reflection.
pub fn reflect_pad_forward<T: Real>(
    x: &Tensor<T>,
    bottom: usize,
    right: usize,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4("reflect_pad")?;
    let (ph, pw) = (h + bottom, w + right);
    let mut out = Vec::with_capacity(n * c * ph * pw);
    for plane in x.data().chunks(h * w) {
        for y in 0..ph {
            let sy = reflect_index(y as isize, h);
            for xx in 0..pw {
                out.push(plane[sy * w + reflect_index(xx as isize, w)]);
            }
        }
    }
    Tensor::from_vec(&[n, c, ph, pw], out)
}

impl<T: Real> Tape<T> {
    /// Depth-to-space: `[N, C r^2, H, W] -> [N, C, rH, rW]`.
    pub fn pixel_shuffle(&self, x: &Var<T>, r: usize) -> Result<Var<T>> {
        let value = pixel_shuffle_forward(x.value(), r)?;
        self.record("pixel_shuffle", value, &[x], move |g, _| {
            vec![Some(pixel_unshuffle_forward(g, r).expect("shape"))]
        })
    }

    /// Space-to-depth, the exact inverse of [`Tape::pixel_shuffle`].
    pub fn pixel_unshuffle(&self, x: &Var<T>, r: usize) -> Result<Var<T>> {
        let value = pixel_unshuffle_forward(x.value(), r)?;
        self.record("pixel_unshuffle", value, &[x], move |g, _| {
            vec![Some(pixel_shuffle_forward(g, r).expect("shape"))]
        })
    }

    /// Halve both extents by averaging 2x2 blocks.
    pub fn resize_half_area(&self, x: &Var<T>) -> Result<Var<T>> {
        let value = resize_half_area_forward(x.value())?;
        let [n, c, h, w] = x.value().dims4("resize_half_area")?;
        self.record("resize_half_area", value, &[x], move |g, _| {
            let q = T::of(0.25);
            let (oh, ow) = (h / 2, w / 2);
            let mut gx = vec![T::zero(); n * c * h * w];
            for (gp, xp) in g.data().chunks(oh * ow).zip(gx.chunks_mut(h * w)) {
                for y in 0..h {
                    for xx in 0..w {
                        xp[y * w + xx] = gp[(y / 2) * ow + xx / 2] * q;
                    }
                }
            }
            vec![Some(Tensor::from_vec(&[n, c, h, w], gx).expect("shape"))]
        })
    }

    pub fn concat_channels(&self, xs: &[&Var<T>]) -> Result<Var<T>> {
        ensure!(!xs.is_empty(), "concat_channels", "nothing to concatenate");
        let [n, _, h, w] = xs[0].value().dims4("concat_channels")?;
        let mut chans = Vec::with_capacity(xs.len());
        for x in xs {
            let [xn, xc, xh, xw] = x.value().dims4("concat_channels")?;
            ensure!(
                (xn, xh, xw) == (n, h, w),
                "concat_channels",
                "input {:?} does not match batch/spatial extents {:?}",
                x.shape(),
                [n, h, w]
            );
            chans.push(xc);
        }
        let total: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for ni in 0..n {
            for (x, &c) in xs.iter().zip(&chans) {
                out.extend_from_slice(&x.value().data()[ni * c * hw..(ni + 1) * c * hw]);
            }
        }
        let value = Tensor::from_vec(&[n, total, h, w], out)?;
        self.record("concat_channels", value, xs, move |g, needs| {
            let mut offset = 0;
            chans
                .iter()
                .zip(needs)
                .map(|(&c, &need)| {
                    let start = offset;
                    offset += c;
                    need.then(|| narrow(g, start, c))
                })
                .collect()
        })
    }

    /// Channels `[start, start+len)`.
    pub fn narrow_channels(&self, x: &Var<T>, start: usize, len: usize) -> Result<Var<T>> {
        let [n, c, h, w] = x.value().dims4("narrow_channels")?;
        ensure!(
            start + len <= c,
            "narrow_channels",
            "range {}..{} exceeds {} channels",
            start,
            start + len,
            c
        );
        let value = narrow(x.value(), start, len);
        self.record("narrow_channels", value, &[x], move |g, _| {
            let hw = h * w;
            let mut gx = vec![T::zero(); n * c * hw];
            for ni in 0..n {
                gx[(ni * c + start) * hw..(ni * c + start + len) * hw]
                    .copy_from_slice(&g.data()[ni * len * hw..(ni + 1) * len * hw]);
            }
            vec![Some(Tensor::from_vec(&[n, c, h, w], gx).expect("shape"))]
        })
    }

    pub fn split_channels(&self, x: &Var<T>, parts: &[usize]) -> Result<Vec<Var<T>>> {
        let c = x.value().dims4("split_channels")?[1];
        ensure!(
            parts.iter().sum::<usize>() == c,
            "split_channels",
            "parts {:?} do not sum to {} channels",
            parts,
            c
        );
        let mut start = 0;
        parts
            .iter()
            .map(|&len| {
                let v = self.narrow_channels(x, start, len);
                start += len;
                v
            })
            .collect()
    }

    pub fn reflect_pad(&self, x: &Var<T>, bottom: usize, right: usize) -> Result<Var<T>> {
        let value = reflect_pad_forward(x.value(), bottom, right)?;
        let [n, c, h, w] = x.value().dims4("reflect_pad")?;
        self.record("reflect_pad", value, &[x], move |g, _| {
            let (ph, pw) = (h + bottom, w + right);
            let mut gx = vec![T::zero(); n * c * h * w];
            for (gp, xp) in g.data().chunks(ph * pw).zip(gx.chunks_mut(h * w)) {
                for y in 0..ph {
                    let sy = reflect_index(y as isize, h);
                    for xx in 0..pw {
                        xp[sy * w + reflect_index(xx as isize, w)] += gp[y * pw + xx];
                    }
                }
            }
            vec![Some(Tensor::from_vec(&[n, c, h, w], gx).expect("shape"))]
        })
    }

    /// Keep the top-left `h x w` window.
    pub fn crop(&self, x: &Var<T>, h: usize, w: usize) -> Result<Var<T>> {
        let [n, c, sh, sw] = x.value().dims4("crop")?;
        let value = x.value().crop(0, 0, h, w)?;
        self.record("crop", value, &[x], move |g, _| {
            let mut gx = vec![T::zero(); n * c * sh * sw];
            for (gp, xp) in g.data().chunks(h * w).zip(gx.chunks_mut(sh * sw)) {
                for y in 0..h {
                    xp[y * sw..y * sw + w].copy_from_slice(&gp[y * w..(y + 1) * w]);
                }
            }
            vec![Some(Tensor::from_vec(&[n, c, sh, sw], gx).expect("shape"))]
        })
    }
}

fn narrow<T: Real>(x: &Tensor<T>, start: usize, len: usize) -> Tensor<T> {
    let [n, c, h, w] = x.dims4("narrow").expect("rank 4");
    let hw = h * w;
    let mut out = Vec::with_capacity(n * len * hw);
    for ni in 0..n {
        out.extend_from_slice(&x.data()[(ni * c + start) * hw..(ni * c + start + len) * hw]);
    }
    Tensor::from_vec(&[n, len, h, w], out).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shuffle_canonical_ordering() {
        let x = Tensor::<f64>::from_vec(&[1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle_forward(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(pixel_shuffle_forward(&x, 1).unwrap(), x);
        assert!(pixel_shuffle_forward(&Tensor::<f64>::zeros(&[1, 6, 2, 2]), 2).is_err());
    }

    #[test]
    #[allow(clippy::identity_op)]
    fn shuffle_rearranges_two_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f32>::rand_uniform(&[2, 8, 3, 3], -1.0, 1.0, &mut rng);
        let y = pixel_shuffle_forward(&x, 2).unwrap();
        assert_eq!(y.shape(), &[2, 2, 6, 6]);
        // out[n][c][2h+i][2w+j] = in[n][4c+2i+j][h][w]
        let v = y.data()[((1 * 2 + 1) * 6 + 2 * 2 + 1) * 6 + 2 * 1];
        assert_eq!(v, x.data()[((1 * 8 + 4 + 2) * 3 + 2) * 3 + 1]);
    }

    #[test]
    fn half_area_values() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 2], vec![0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(resize_half_area_forward(&x).unwrap().data(), &[1.0]);
        let c = Tensor::<f32>::full(&[1, 3, 8, 8], 0.3);
        assert_eq!(
            resize_half_area_forward(&c).unwrap(),
            Tensor::full(&[1, 3, 4, 4], 0.3)
        );
        assert!(resize_half_area_forward(&Tensor::<f32>::zeros(&[1, 1, 3, 4])).is_err());
    }

    #[test]
    fn half_area_matches_block_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::<f64>::rand_uniform(&[2, 2, 6, 4], 0.0, 1.0, &mut rng);
        let y = resize_half_area_forward(&x).unwrap();
        for p in 0..4 {
            for yy in 0..3 {
                for xx in 0..2 {
                    let at = |a: usize, b: usize| x.data()[p * 24 + a * 4 + b];
                    let want = (at(2 * yy, 2 * xx)
                        + at(2 * yy, 2 * xx + 1)
                        + at(2 * yy + 1, 2 * xx)
                        + at(2 * yy + 1, 2 * xx + 1))
                        / 4.0;
                    assert!((y.data()[p * 6 + yy * 2 + xx] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn concat_and_split() {
        let tape = Tape::<f32>::no_grad();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = tape.constant(Tensor::rand_uniform(&[2, 3, 4, 4], 0.0, 1.0, &mut rng));
        let b = tape.constant(Tensor::rand_uniform(&[2, 5, 4, 4], 0.0, 1.0, &mut rng));
        assert_eq!(tape.concat_channels(&[&a]).unwrap().value(), a.value());
        let cat = tape.concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[2, 8, 4, 4]);
        let parts = tape.split_channels(&cat, &[3, 5]).unwrap();
        assert_eq!(parts[0].value(), a.value());
        assert_eq!(parts[1].value(), b.value());
        let bad = tape.constant(Tensor::zeros(&[2, 1, 3, 4]));
        assert!(tape.concat_channels(&[&a, &bad]).is_err());
    }

    proptest! {
        #[test]
        fn shuffle_roundtrip_is_exact(n in 1usize..3, c in 1usize..4, h in 1usize..5, w in 1usize..5, r in 1usize..4, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f32>::rand_uniform(&[n, c * r * r, h, w], -1.0, 1.0, &mut rng);
            let y = pixel_shuffle_forward(&x, r).unwrap();
            prop_assert_eq!(pixel_unshuffle_forward(&y, r).unwrap(), x);
        }

        #[test]
        fn split_inverts_concat(sizes in proptest::collection::vec(1usize..4, 1..4), seed in any::<u64>()) {
            let tape = Tape::<f64>::no_grad();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xs: Vec<_> = sizes.iter().map(|&c| tape.constant(Tensor::rand_uniform(&[2, c, 3, 2], -1.0, 1.0, &mut rng))).collect();
            let refs: Vec<_> = xs.iter().collect();
            let cat = tape.concat_channels(&refs).unwrap();
            prop_assert_eq!(cat.shape()[1], sizes.iter().sum::<usize>());
            let back = tape.split_channels(&cat, &sizes).unwrap();
            for (a, b) in back.iter().zip(&xs) {
                prop_assert_eq!(a.value(), b.value());
            }
        }
    }
}
