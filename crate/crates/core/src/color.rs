//! Color attention: a heavily blurred view of the higher-resolution image
//! produces a sigmoid map that reweights structural features of the
//! lower-resolution image.

use crate::autodiff::Var;
use crate::error::{ensure, Error, Result};
use crate::nn::{Ctx, NafGroup};
use crate::ops::{default_radius, ConvGeom};
use crate::params::{Conv2d, ParamBuilder};
use crate::real::Real;

pub const DEFAULT_BLUR_SIGMA: f64 = 12.0;

#[derive(Clone, Debug)]
pub struct CaModule {
    pub width: usize,
    pub conv1: Conv2d,
    pub ng1: NafGroup,
    pub ng2: NafGroup,
    pub conv2: Conv2d,
    /// Structural branch; absent for the level-1 map-only module.
    pub conv3: Option<Conv2d>,
    pub blur_sigma: f64,
    pub blur_radius: usize,
}

impl CaModule {
    /// Full module with the structural 3x3 branch.
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, width: usize, blur_sigma: f64) -> Self {
        let mut m = Self::map_only(pb, width, blur_sigma);
        m.conv3 = Some(pb.conv("conv3", 3, width, 3, ConvGeom::new(1, 1, 1), true));
        m
    }

    /// Level-1 variant that only produces the color map.
    pub fn map_only<T: Real>(pb: &mut ParamBuilder<T>, width: usize, blur_sigma: f64) -> Self {
        assert!(blur_sigma > 0.0, "blur sigma must be positive");
        let pw = ConvGeom::new(1, 0, 1);
        Self {
            width,
            conv1: pb.conv("conv1", 3, width, 1, pw, true),
            ng1: NafGroup::new(&mut pb.scope("ng1"), width),
            ng2: NafGroup::new(&mut pb.scope("ng2"), width),
            conv2: pb.conv("conv2", width, width, 1, pw, true),
            conv3: None,
            blur_sigma,
            blur_radius: default_radius(blur_sigma),
        }
    }

    /// `sigmoid(conv2(NG2(NG1(maxpool(conv1(blur(img)))))))` at half resolution.
    pub fn color_map<T: Real>(&self, cx: &Ctx<T>, img: &Var<T>) -> Result<Var<T>> {
        let [_, c, h, w] = img.value().dims4("color_map")?;
        ensure!(c == 3, "color_map", "expected 3 channels, got {c}");
        ensure!(
            h % 2 == 0 && w % 2 == 0,
            "color_map",
            "spatial size {h}x{w} must be even"
        );
        let t = cx.tape;
        let x = t.gaussian_blur(img, self.blur_sigma, self.blur_radius)?;
        let x = self.conv1.forward(cx, &x)?;
        let x = t.max_pool2d(&x, 2, 2)?;
        let x = self.ng1.forward(cx, &x)?;
        let x = self.ng2.forward(cx, &x)?;
        let x = self.conv2.forward(cx, &x)?;
        let m = t.sigmoid(&x)?;
        t.check_stage("color_map", &m)?;
        Ok(m)
    }

    /// Structural features of the lower-level image.
    pub fn structure<T: Real>(&self, cx: &Ctx<T>, img_k: &Var<T>) -> Result<Var<T>> {
        let conv3 = self
            .conv3
            .as_ref()
            .ok_or_else(|| Error::contract("color_attention", "module has no structural branch"))?;
        conv3.forward(cx, img_k)
    }

    /// `(M * F_s) + F_s` with `M` from the upper image and `F_s` from the lower.
    pub fn forward<T: Real>(
        &self,
        cx: &Ctx<T>,
        img_k: &Var<T>,
        img_upper: &Var<T>,
    ) -> Result<Var<T>> {
        let [_, _, h, w] = img_k.value().dims4("color_attention")?;
        let [_, _, hu, wu] = img_upper.value().dims4("color_attention")?;
        ensure!(
            hu == 2 * h && wu == 2 * w,
            "color_attention",
            "upper image {hu}x{wu} is not twice the lower image {h}x{w}"
        );
        let fs = self.structure(cx, img_k)?;
        let m = self.color_map(cx, img_upper)?;
        apply_color_map(cx, &fs, &m)
    }
}

/// `M * F_s + F_s`.
pub fn apply_color_map<T: Real>(cx: &Ctx<T>, fs: &Var<T>, m: &Var<T>) -> Result<Var<T>> {
    let weighted = cx.tape.mul(m, fs)?;
    cx.tape.add(&weighted, fs)
}
