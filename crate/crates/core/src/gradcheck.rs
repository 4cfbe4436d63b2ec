//! Central finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::nn::{Ctx, PoolMode};
use crate::ops::ConvGeom;
use crate::params::{Binding, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Per-input comparison of analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, 1)` per input.
    pub max_rel_error: Vec<f64>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.worst() <= tol
    }
}

/// Compare tape gradients of the scalar `f(inputs)` with central differences
/// of step `h`. All arithmetic is 64-bit.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| grads.get_or_zeros(v)).collect();
    drop(grads);
    drop(tape);

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::no_grad();
        let vars: Vec<Var<f64>> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.value().data()[0])
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut max_rel_error = Vec::with_capacity(inputs.len());
    let mut checked = 0;
    for i in 0..inputs.len() {
        let mut worst = 0.0f64;
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i].data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            worst = worst.max(err);
            checked += 1;
        }
        max_rel_error.push(worst);
    }
    Ok(GradCheckReport {
        max_rel_error,
        checked,
    })
}

/// Gradient check over every parameter of `store` plus the extra `inputs`.
/// `f` receives a context bound to the parameters and the input vars.
pub fn grad_check_params<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    pool: PoolMode,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&Ctx<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let n = store.len();
    let mut all: Vec<Tensor<f64>> = store.ids().map(|id| store.get(id).clone()).collect();
    all.extend(inputs.iter().cloned());
    grad_check(
        |tape, vars| {
            let bind = Binding::from_vars(vars[..n].to_vec());
            let cx = Ctx::new(tape, &bind).with_pool(pool);
            f(&cx, &vars[n..])
        },
        &all,
        DEFAULT_STEP,
    )
}

/// Reduce an arbitrary tensor to a scalar through a fixed random weighting,
/// so every output element contributes a distinct gradient.
pub fn random_projection(tape: &Tape<f64>, x: &Var<f64>, seed: u64) -> Result<Var<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = x.value().len();
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = tape.constant(Tensor::from_vec(x.shape(), w)?);
    let prod = tape.mul(x, &w)?;
    tape.sum(&prod)
}

/// Tolerance on the worst relative error for the 64-bit suite.
pub const SUITE_TOLERANCE: f64 = 1e-6;

fn rand_input(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::rand_uniform(shape, lo, hi, rng)
}

/// Gradient check of every differentiable tape operator on small random
/// inputs, each reduced to a scalar by a fixed random projection.
pub fn op_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let x = rand_input(&[2, 4, 6, 6], -1.0, 1.0, r);
    let y = rand_input(&[2, 4, 6, 6], -1.0, 1.0, r);
    let per_plane = rand_input(&[2, 4, 1, 1], -1.0, 1.0, r);
    let chan = rand_input(&[4], -1.0, 1.0, r);
    let w3 = rand_input(&[3, 4, 3, 3], -1.0, 1.0, r);
    let wg = rand_input(&[4, 2, 3, 3], -1.0, 1.0, r);
    let wdw = rand_input(&[4, 1, 3, 3], -1.0, 1.0, r);
    let w1 = rand_input(&[5, 4, 1, 1], -1.0, 1.0, r);
    let bias3 = rand_input(&[3], -1.0, 1.0, r);
    let img = rand_input(&[1, 3, 8, 8], 0.0, 1.0, r);
    let target = rand_input(&[1, 3, 8, 8], 0.0, 1.0, r);
    let proj = move |t: &Tape<f64>, v: &Var<f64>| random_projection(t, v, seed ^ 0x5eed);
    type Check = Box<dyn Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>>;
    let cases: Vec<(&'static str, Vec<Tensor<f64>>, Check)> = vec![
        (
            "add",
            vec![x.clone(), y.clone()],
            Box::new(move |t, v| proj(t, &t.add(&v[0], &v[1])?)),
        ),
        (
            "sub",
            vec![x.clone(), y.clone()],
            Box::new(move |t, v| proj(t, &t.sub(&v[0], &v[1])?)),
        ),
        (
            "mul",
            vec![x.clone(), y.clone()],
            Box::new(move |t, v| proj(t, &t.mul(&v[0], &v[1])?)),
        ),
        (
            "mul_broadcast",
            vec![x.clone(), per_plane.clone()],
            Box::new(move |t, v| proj(t, &t.mul(&v[0], &v[1])?)),
        ),
        (
            "add_broadcast",
            vec![x.clone(), per_plane.clone()],
            Box::new(move |t, v| proj(t, &t.add(&v[0], &v[1])?)),
        ),
        (
            "sigmoid",
            vec![x.clone()],
            Box::new(move |t, v| proj(t, &t.sigmoid(&v[0])?)),
        ),
        (
            "scale",
            vec![x.clone()],
            Box::new(move |t, v| proj(t, &t.scale(&v[0], -1.7)?)),
        ),
        (
            "add_scalar",
            vec![x.clone()],
            Box::new(move |t, v| proj(t, &t.add_scalar(&v[0], 0.3)?)),
        ),
        (
            "mul_channel",
            vec![x.clone(), chan.clone()],
            Box::new(move |t, v| proj(t, &t.mul_channel(&v[0], &v[1])?)),
        ),
        (
            "simple_gate",
            vec![x.clone()],
            Box::new(move |t, v| proj(t, &t.simple_gate(&v[0])?)),
        ),
        (
            "sum",
            vec![x.clone()],
            Box::new(move |t, v| t.sum(&t.mul(&v[0], &v[0])?)),
        ),
        (
            "mean",
            vec![x.clone()],
            Box::new(move |t, v| t.mean(&t.mul(&v[0], &v[0])?)),
        ),
        (
            "conv2d",
            vec![x.clone(), w3.clone(), bias3.clone()],
            Box::new(move |t, v| {
                proj(
                    t,
                    &t.conv2d(&v[0], &v[1], Some(&v[2]), ConvGeom::new(1, 1, 1))?,
                )
            }),
        ),
        (
            "conv2d_strided",
            vec![x.clone(), w3.clone()],
            Box::new(move |t, v| proj(t, &t.conv2d(&v[0], &v[1], None, ConvGeom::new(2, 1, 1))?)),
        ),
        (
            "conv2d_grouped",
            vec![x.clone(), wg.clone()],
            Box::new(move |t, v| proj(t, &t.conv2d(&v[0], &v[1], None, ConvGeom::new(1, 1, 2))?)),
        ),
        (
            "conv2d_depthwise",
            vec![x.clone(), wdw.clone()],
            Box::new(move |t, v| proj(t, &t.conv2d(&v[0], &v[1], None, ConvGeom::new(1, 1, 4))?)),
        ),
        (
            "conv2d_pointwise",
            vec![x.clone(), w1.clone()],
            Box::new(move |t, v| proj(t, &t.conv2d(&v[0], &v[1], None, ConvGeom::new(1, 0, 1))?)),
        ),
        (
            "layer_norm2d",
            vec![x.clone(), chan.clone(), chan.clone()],
            Box::new(move |t, v| {
                proj(
                    t,
                    &t.layer_norm2d(&v[0], &v[1], &v[2], crate::ops::LAYER_NORM_EPS)?,
                )
            }),
        ),
        (
            "max_pool2d",
            vec![x.clone()],
            Box::new(move |t, v| proj(t, &t.max_pool2d(&v[0], 2, 2)?)),
        ),
        (
            "avg_pool_global",
            vec![x.clone()],
            Box::new(move |t, v| proj(t, &t.avg_pool_global(&v[0])?)),
        ),
        (
            "avg_pool_local",
            vec![x.clone()],
            Box::new(move |t, v| proj(t, &t.avg_pool_local(&v[0], 3)?)),
        ),
        (
            "gaussian_blur",
            vec![x.clone()],
            Box::new(move |t, v| proj(t, &t.gaussian_blur(&v[0], 1.5, 4)?)),
        ),
        (
            "pixel_shuffle",
            vec![x.clone()],
            Box::new(move |t, v| proj(t, &t.pixel_shuffle(&v[0], 2)?)),
        ),
        (
            "pixel_unshuffle",
            vec![x.clone()],
            Box::new(move |t, v| proj(t, &t.pixel_unshuffle(&v[0], 2)?)),
        ),
        (
            "resize_half_area",
            vec![x.clone()],
            Box::new(move |t, v| proj(t, &t.resize_half_area(&v[0])?)),
        ),
        (
            "concat_channels",
            vec![x.clone(), y.clone()],
            Box::new(move |t, v| proj(t, &t.concat_channels(&[&v[0], &v[1]])?)),
        ),
        (
            "narrow_channels",
            vec![x.clone()],
            Box::new(move |t, v| proj(t, &t.narrow_channels(&v[0], 1, 2)?)),
        ),
        (
            "split_channels",
            vec![x.clone()],
            Box::new(move |t, v| {
                let parts = t.split_channels(&v[0], &[1, 3])?;
                let a = proj(t, &parts[0])?;
                let b = random_projection(t, &parts[1], seed ^ 0xb)?;
                t.add(&a, &b)
            }),
        ),
        (
            "reflect_pad",
            vec![x.clone()],
            Box::new(move |t, v| proj(t, &t.reflect_pad(&v[0], 3, 2)?)),
        ),
        (
            "crop",
            vec![x.clone()],
            Box::new(move |t, v| proj(t, &t.crop(&v[0], 4, 5)?)),
        ),
        (
            "psnr_loss",
            vec![img, target],
            Box::new(move |t, v| t.psnr_loss(&v[0], &v[1])),
        ),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, f)| Ok((name, grad_check(f, &inputs, DEFAULT_STEP)?)))
        .collect()
}

/// Gradient check of the full two-level CAIR-M graph at width 4 on a 16×16
/// image, with randomized residual scales so every branch contributes.
pub fn tiny_model_check(seed: u64) -> Result<GradCheckReport> {
    use crate::model::{CairConfig, CairNet, Network, Variant};
    let cfg = CairConfig {
        levels: 2,
        base_width: 4,
        block_counts: vec![1, 1, 1],
        variant: Variant::M,
        tlsc_window: None,
        ca_width: 4,
        blur_sigma: crate::color::DEFAULT_BLUR_SIGMA,
    };
    let (net, mut store) = CairNet::init::<f64>(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    store.randomize_where(|n| n.ends_with("_scale"), -0.5, 0.5, &mut rng);
    let img = Tensor::rand_uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut rng);
    grad_check_params(&store, &[img], PoolMode::Global, |cx, v| {
        let y = net.forward(cx, &v[0])?;
        random_projection(cx.tape, &y, seed.wrapping_add(2))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_operator_passes() {
        for (name, r) in op_suite(3).unwrap() {
            assert!(r.passed(SUITE_TOLERANCE), "{name}: worst {}", r.worst());
        }
    }

    #[test]
    fn linear_map_has_negligible_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::rand_uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut rng);
        let r = grad_check(
            |t, v| random_projection(t, &t.scale(&v[0], 3.0)?, 1),
            &[x],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(r.worst() < 1e-9, "{r:?}");
    }

    #[test]
    fn conv_and_sigmoid_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::rand_uniform(&[1, 2, 5, 5], -1.0, 1.0, &mut rng);
        let w = Tensor::rand_uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(&[3], -1.0, 1.0, &mut rng);
        let r = grad_check(
            |t, v| {
                let y = t.conv2d(&v[0], &v[1], Some(&v[2]), ConvGeom::new(1, 1, 1))?;
                let y = t.sigmoid(&y)?;
                random_projection(t, &y, 2)
            },
            &[x, w, b],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(r.passed(1e-6), "{r:?}");
    }
}
