//! Activation-free building blocks: SimpleGate, simplified channel
//! attention, NAFBlock and NAFGroup.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::ops::{window_covers, ConvGeom, LAYER_NORM_EPS};
use crate::params::{Binding, Conv2d, LayerNorm, ParamBuilder, ParamId};
use crate::real::Real;

/// Statistic used by channel attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PoolMode {
    /// Global spatial mean (training behaviour).
    #[default]
    Global,
    /// Local mean over a `window x window` neighborhood (TLSC inference).
    Local(usize),
}

/// Everything a module needs to run forward.
pub struct Ctx<'a, T> {
    pub tape: &'a Tape<T>,
    pub params: &'a Binding<T>,
    pub pool: PoolMode,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(tape: &'a Tape<T>, params: &'a Binding<T>) -> Self {
        Self {
            tape,
            params,
            pool: PoolMode::Global,
        }
    }

    pub fn with_pool(mut self, pool: PoolMode) -> Self {
        self.pool = pool;
        self
    }

    pub fn p(&self, id: ParamId) -> &Var<T> {
        self.params.get(id)
    }
}

impl Conv2d {
    pub fn forward<T: Real>(&self, cx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        cx.tape
            .conv2d(x, cx.p(self.weight), self.bias.map(|b| cx.p(b)), self.geom)
    }
}

impl LayerNorm {
    pub fn forward<T: Real>(&self, cx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        cx.tape
            .layer_norm2d(x, cx.p(self.gamma), cx.p(self.beta), LAYER_NORM_EPS)
    }
}

const POINTWISE: ConvGeom = ConvGeom::new(1, 0, 1);
const SAME3: ConvGeom = ConvGeom::new(1, 1, 1);

/// `x1 * x2` over the two channel halves.
pub fn simple_gate<T: Real>(cx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
    cx.tape.simple_gate(x)
}

/// Simplified channel attention: `x * conv1x1(pool(x))`.
pub fn sca<T: Real>(cx: &Ctx<T>, x: &Var<T>, conv: &Conv2d) -> Result<Var<T>> {
    let [_, _, h, w] = x.value().dims4("sca")?;
    let pooled = match cx.pool {
        PoolMode::Local(win) if !window_covers(win, h, w) => cx.tape.avg_pool_local(x, win)?,
        _ => cx.tape.avg_pool_global(x)?,
    };
    let att = conv.forward(cx, &pooled)?;
    cx.tape.mul(x, &att)
}

#[derive(Clone, Debug)]
pub struct NafBlock {
    pub width: usize,
    pub ln1: LayerNorm,
    pub conv_expand1: Conv2d,
    pub dwconv: Conv2d,
    pub sca_conv: Conv2d,
    pub conv_proj1: Conv2d,
    pub beta_scale: ParamId,
    pub ln2: LayerNorm,
    pub conv_expand2: Conv2d,
    pub conv_proj2: Conv2d,
    pub gamma_scale: ParamId,
}

impl NafBlock {
    /// Registers a block of width `c`. Residual scales start at zero, so a
    /// fresh block is the identity.
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, c: usize) -> Self {
        let c2 = 2 * c;
        Self {
            width: c,
            ln1: pb.layer_norm("ln1", c),
            conv_expand1: pb.conv("conv_expand1", c, c2, 1, POINTWISE, true),
            dwconv: pb.conv("dwconv", c2, c2, 3, ConvGeom::new(1, 1, c2), true),
            sca_conv: pb.conv("sca_conv", c, c, 1, POINTWISE, true),
            conv_proj1: pb.conv("conv_proj1", c, c, 1, POINTWISE, true),
            beta_scale: pb.tensor("beta_scale", crate::Tensor::zeros(&[c])),
            ln2: pb.layer_norm("ln2", c),
            conv_expand2: pb.conv("conv_expand2", c, c2, 1, POINTWISE, true),
            conv_proj2: pb.conv("conv_proj2", c, c, 1, POINTWISE, true),
            gamma_scale: pb.tensor("gamma_scale", crate::Tensor::zeros(&[c])),
        }
    }

    pub fn forward<T: Real>(&self, cx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let t = cx.tape;
        let h = self.ln1.forward(cx, x)?;
        let h = self.conv_expand1.forward(cx, &h)?;
        let h = self.dwconv.forward(cx, &h)?;
        let h = simple_gate(cx, &h)?;
        let h = sca(cx, &h, &self.sca_conv)?;
        let h = self.conv_proj1.forward(cx, &h)?;
        let y = t.add(x, &t.mul_channel(&h, cx.p(self.beta_scale))?)?;

        let h = self.ln2.forward(cx, &y)?;
        let h = self.conv_expand2.forward(cx, &h)?;
        let h = simple_gate(cx, &h)?;
        let h = self.conv_proj2.forward(cx, &h)?;
        t.add(&y, &t.mul_channel(&h, cx.p(self.gamma_scale))?)
    }
}

/// A run of NAFBlocks at one width.
#[derive(Clone, Debug, Default)]
pub struct NafStack {
    pub blocks: Vec<NafBlock>,
}

impl NafStack {
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, c: usize, count: usize) -> Self {
        Self {
            blocks: (0..count)
                .map(|i| NafBlock::new(&mut pb.scope(&i.to_string()), c))
                .collect(),
        }
    }

    pub fn forward<T: Real>(&self, cx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(cx, &h)?;
        }
        Ok(h)
    }
}

/// 3x3 conv, 1x1 conv, then two NAFBlocks; width-preserving.
#[derive(Clone, Debug)]
pub struct NafGroup {
    pub conv3: Conv2d,
    pub conv1: Conv2d,
    pub block1: NafBlock,
    pub block2: NafBlock,
}

impl NafGroup {
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, c: usize) -> Self {
        Self {
            conv3: pb.conv("conv3", c, c, 3, SAME3, true),
            conv1: pb.conv("conv1", c, c, 1, POINTWISE, true),
            block1: NafBlock::new(&mut pb.scope("block1"), c),
            block2: NafBlock::new(&mut pb.scope("block2"), c),
        }
    }

    pub fn forward<T: Real>(&self, cx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let h = self.conv3.forward(cx, x)?;
        let h = self.conv1.forward(cx, &h)?;
        let h = self.block1.forward(cx, &h)?;
        self.block2.forward(cx, &h)
    }
}
