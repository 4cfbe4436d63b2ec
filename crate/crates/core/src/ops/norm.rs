use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-6;

struct Saved<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

fn forward<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<(Tensor<T>, Saved<T>)> {
    let [n, c, h, w] = x.dims4("layer_norm2d")?;
    ensure!(c >= 1, "layer_norm2d", "need at least one channel");
    ensure!(
        gamma.len() == c && beta.len() == c,
        "layer_norm2d",
        "gamma/beta must have {} entries, got {}/{}",
        c,
        gamma.len(),
        beta.len()
    );
    let hw = h * w;
    let inv_c = T::one() / T::of(c as f64);
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    let mut xhat = vec![T::zero(); xd.len()];
    let mut inv_std = vec![T::zero(); n * hw];
    let mut mean = vec![T::zero(); hw];
    let mut var = vec![T::zero(); hw];
    for ni in 0..n {
        let xs = &xd[ni * c * hw..(ni + 1) * c * hw];
        mean.fill(T::zero());
        var.fill(T::zero());
        for plane in xs.chunks(hw) {
            mean.iter_mut().zip(plane).for_each(|(m, &v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m *= inv_c);
        for plane in xs.chunks(hw) {
            var.iter_mut()
                .zip(plane.iter().zip(&mean))
                .for_each(|(s, (&v, &m))| *s += (v - m) * (v - m));
        }
        let inv = &mut inv_std[ni * hw..(ni + 1) * hw];
        inv.iter_mut()
            .zip(&var)
            .for_each(|(i, &s)| *i = T::one() / (s * inv_c + eps).sqrt());
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            let (g, b) = (gamma[ci], beta[ci]);
            for p in 0..hw {
                let xh = (xs[ci * hw + p] - mean[p]) * inv[p];
                xhat[base + p] = xh;
                out[base + p] = g * xh + b;
            }
        }
    }
    Ok((Tensor::from_vec(x.shape(), out)?, Saved { xhat, inv_std }))
}

/// Plain (tape-free) channel layer norm.
pub fn layer_norm2d_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    Ok(forward(x, gamma.data(), beta.data(), T::of(eps))?.0)
}

impl<T: Real> Tape<T> {
    /// Normalizes across channels at every spatial position, then applies a
    /// per-channel affine map.
    pub fn layer_norm2d(
        &self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        eps: f64,
    ) -> Result<Var<T>> {
        ensure!(eps > 0.0, "layer_norm2d", "eps must be positive");
        let (value, saved) = forward(
            x.value(),
            gamma.value().data(),
            beta.value().data(),
            T::of(eps),
        )?;
        let [n, c, h, w] = x.value().dims4("layer_norm2d")?;
        let hw = h * w;
        let saved = Arc::new(saved);
        let gv = gamma.arc();
        let shape = x.shape().to_vec();
        self.record("layer_norm2d", value, &[x, gamma, beta], move |g, needs| {
            let gd = g.data();
            let xhat = &saved.xhat;
            let gamma = gv.data();
            let ggamma = needs[1].then(|| {
                (0..c)
                    .map(|ci| {
                        let mut acc = T::zero();
                        for ni in 0..n {
                            let base = (ni * c + ci) * hw;
                            acc += gd[base..base + hw]
                                .iter()
                                .zip(&xhat[base..base + hw])
                                .map(|(&a, &b)| a * b)
                                .sum::<T>();
                        }
                        acc
                    })
                    .collect::<Vec<T>>()
            });
            let gbeta = needs[2].then(|| {
                (0..c)
                    .map(|ci| {
                        let mut acc = T::zero();
                        for ni in 0..n {
                            let base = (ni * c + ci) * hw;
                            acc += gd[base..base + hw].iter().copied().sum::<T>();
                        }
                        acc
                    })
                    .collect::<Vec<T>>()
            });
            let gx = needs[0].then(|| {
                let inv_c = T::one() / T::of(c as f64);
                let mut gx = vec![T::zero(); gd.len()];
                let mut m1 = vec![T::zero(); hw];
                let mut m2 = vec![T::zero(); hw];
                for ni in 0..n {
                    m1.fill(T::zero());
                    m2.fill(T::zero());
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        let gm = gamma[ci];
                        for p in 0..hw {
                            let gh = gd[base + p] * gm;
                            m1[p] += gh;
                            m2[p] += gh * xhat[base + p];
                        }
                    }
                    let inv = &saved.inv_std[ni * hw..(ni + 1) * hw];
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        let gm = gamma[ci];
                        for p in 0..hw {
                            let gh = gd[base + p] * gm;
                            gx[base + p] =
                                inv[p] * (gh - m1[p] * inv_c - xhat[base + p] * m2[p] * inv_c);
                        }
                    }
                }
                gx
            });
            vec![
                gx.map(|v| Tensor::from_vec(&shape, v).expect("shape")),
                ggamma.map(|v| Tensor::from_vec(&[c], v).expect("shape")),
                gbeta.map(|v| Tensor::from_vec(&[c], v).expect("shape")),
            ]
        })
    }
}
