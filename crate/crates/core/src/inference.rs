//! Test-time strategies: dihedral self-ensemble, local-statistics
//! conversion, and the fusion network that merges several restorers.

use crate::autodiff::Var;
use crate::error::{ensure, Result};
use crate::model::{CairNet, Network};
use crate::nn::{Ctx, NafBlock, PoolMode};
use crate::ops::ConvGeom;
use crate::params::{Conv2d, ParamBuilder, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::train::{LogLine, Pair, TrainConfig, Trainer};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Dihedral transform `k` in `0..8`: rotate by `k % 4` quarter turns, then
/// flip horizontally when `k >= 4`.
pub fn dihedral<T: Real>(x: &Tensor<T>, k: usize) -> Tensor<T> {
    let r = x.rot90(k % 4);
    if k >= 4 {
        r.flip_h()
    } else {
        r
    }
}

pub fn dihedral_inverse<T: Real>(x: &Tensor<T>, k: usize) -> Tensor<T> {
    let f = if k >= 4 { x.flip_h() } else { x.clone() };
    f.rot90((4 - k % 4) % 4)
}

/// Average of `f` over the 8 dihedral views, each mapped back before the
/// pairwise reduction.
pub fn self_ensemble<T: Real, F>(img: &Tensor<T>, f: F) -> Result<Tensor<T>>
where
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    let outs = (0..8)
        .map(|k| f(&dihedral(img, k)).map(|y| dihedral_inverse(&y, k)))
        .collect::<Result<Vec<_>>>()?;
    let add = |a: &Tensor<T>, b: &Tensor<T>| a.zip_map(b, |p, q| p + q);
    let q: Vec<Tensor<T>> = outs
        .chunks(2)
        .map(|p| add(&p[0], &p[1]))
        .collect::<Result<_>>()?;
    let h: Vec<Tensor<T>> = q
        .chunks(2)
        .map(|p| add(&p[0], &p[1]))
        .collect::<Result<_>>()?;
    let total = add(&h[0], &h[1])?;
    let eighth = T::of(0.125);
    Ok(total.map(|v| v * eighth))
}

/// A network bound to parameters and a pooling mode.
pub struct ModelView<'a, N, T> {
    pub net: &'a N,
    pub store: &'a ParamStore<T>,
    pub pool: PoolMode,
}

impl<N, T> Clone for ModelView<'_, N, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<N, T> Copy for ModelView<'_, N, T> {}

impl<'a, N: Network, T: Real> ModelView<'a, N, T> {
    pub fn new(net: &'a N, store: &'a ParamStore<T>) -> Self {
        Self {
            net,
            store,
            pool: PoolMode::Global,
        }
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.net.predict(self.store, x, self.pool)
    }

    /// Prediction, optionally averaged over the dihedral group.
    pub fn restore(&self, x: &Tensor<T>, tta: bool) -> Result<Tensor<T>> {
        if tta {
            self.restore_tta(x)
        } else {
            self.predict(x)
        }
    }

    pub fn restore_tta(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self_ensemble(x, |v| self.predict(v))
    }
}

/// Same model with every channel-attention pool replaced by a local mean
/// over `window x window`. Parameters are untouched.
pub fn tlsc_apply<'a, N, T>(view: ModelView<'a, N, T>, window: usize) -> ModelView<'a, N, T> {
    ModelView {
        pool: PoolMode::Local(window.max(1)),
        ..view
    }
}

pub const ENSEMBLE_WIDTH: usize = 32;
pub const ENSEMBLE_BLOCKS: usize = 3;

/// Fusion network over `k` concatenated RGB predictions, with a skip that
/// adds their mean.
#[derive(Clone, Debug)]
pub struct EnsembleNet {
    pub inputs: usize,
    pub conv_in: Conv2d,
    pub blocks: Vec<NafBlock>,
    pub conv_out: Conv2d,
}

impl EnsembleNet {
    /// `conv_out` starts at zero so a fresh net returns the input mean.
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, inputs: usize) -> Self {
        let same = ConvGeom::new(1, 1, 1);
        let conv_in = pb.conv("conv_in", 3 * inputs, ENSEMBLE_WIDTH, 3, same, true);
        let blocks = (0..ENSEMBLE_BLOCKS)
            .map(|i| NafBlock::new(&mut pb.scope(&format!("block{i}")), ENSEMBLE_WIDTH))
            .collect();
        let mut out = pb.scope("conv_out");
        let conv_out = Conv2d {
            weight: out.tensor("weight", Tensor::zeros(&[3, ENSEMBLE_WIDTH, 3, 3])),
            bias: Some(out.tensor("bias", Tensor::zeros(&[3]))),
            geom: same,
        };
        Self {
            inputs,
            conv_in,
            blocks,
            conv_out,
        }
    }

    pub fn init<T: Real>(inputs: usize, seed: u64) -> (Self, ParamStore<T>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Self::new(&mut ParamBuilder::new(&mut store, &mut rng), inputs);
        (net, store)
    }
}

impl Network for EnsembleNet {
    fn forward<T: Real>(&self, cx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let t = cx.tape;
        let [_, c, _, _] = x.value().dims4("ensemble forward")?;
        ensure!(
            c == 3 * self.inputs,
            "ensemble forward",
            "expected {} channels, got {c}",
            3 * self.inputs
        );
        let parts = t.split_channels(x, &vec![3; self.inputs])?;
        let mut sum = parts[0].clone();
        for p in &parts[1..] {
            sum = t.add(&sum, p)?;
        }
        let mean = t.scale(&sum, 1.0 / self.inputs as f64)?;
        let mut h = self.conv_in.forward(cx, x)?;
        for b in &self.blocks {
            h = b.forward(cx, &h)?;
        }
        let h = self.conv_out.forward(cx, &h)?;
        t.add(&mean, &h)
    }
}

/// Channel-concatenate same-shaped predictions.
pub fn concat_predictions<T: Real>(preds: &[&Tensor<T>]) -> Result<Tensor<T>> {
    ensure!(!preds.is_empty(), "ensemble forward", "no predictions");
    let [n, _, h, w] = preds[0].dims4("ensemble forward")?;
    for p in preds {
        ensure!(
            p.shape() == [n, 3, h, w],
            "ensemble forward",
            "prediction shape {:?} differs from {:?}",
            p.shape(),
            preds[0].shape()
        );
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * 3 * preds.len() * plane);
    for i in 0..n {
        for p in preds {
            data.extend_from_slice(&p.data()[i * 3 * plane..(i + 1) * 3 * plane]);
        }
    }
    Tensor::from_vec(&[n, 3 * preds.len(), h, w], data)
}

pub fn ensemble_forward<T: Real>(
    net: &EnsembleNet,
    store: &ParamStore<T>,
    preds: &[&Tensor<T>],
) -> Result<Tensor<T>> {
    net.predict(store, &concat_predictions(preds)?, PoolMode::Global)
}

/// Frozen restorers used to build fusion inputs.
pub type Members<'a, T> = [ModelView<'a, CairNet, T>];

/// Train a fusion net on the members' predictions of the training inputs.
pub fn ensemble_train<T: Real>(
    members: &Members<'_, T>,
    data: &[Pair<T>],
    cfg: TrainConfig,
    net_seed: u64,
    log: impl FnMut(&LogLine),
) -> Result<(EnsembleNet, ParamStore<T>)> {
    ensure!(!members.is_empty(), "ensemble_train", "no member models");
    let fused: Vec<Pair<T>> = data
        .iter()
        .map(|p| {
            let preds = members
                .iter()
                .map(|m| m.predict(&p.input))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Tensor<T>> = preds.iter().collect();
            Ok(Pair {
                input: concat_predictions(&refs)?,
                target: p.target.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let (net, store) = EnsembleNet::init::<T>(members.len(), net_seed);
    let mut tr = Trainer::new(&net, store, cfg)?;
    tr.run(&fused, None, log)?;
    let store = tr.store;
    Ok((net, store))
}

/// Optional TTA and TLSC on every member, fusion, then clamping to `[0,1]`.
pub fn cair_star_pipeline<T: Real>(
    img: &Tensor<T>,
    members: &Members<'_, T>,
    ens: (&EnsembleNet, &ParamStore<T>),
    use_tta: bool,
    tlsc_window: Option<usize>,
) -> Result<Tensor<T>> {
    let preds = members
        .iter()
        .map(|&m| {
            let m = match tlsc_window {
                Some(w) => tlsc_apply(m, w),
                None => m,
            };
            m.restore(img, use_tta)
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor<T>> = preds.iter().collect();
    Ok(ensemble_forward(ens.0, ens.1, &refs)?.clamp(T::zero(), T::one()))
}
