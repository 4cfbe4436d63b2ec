//! The multi-scale encoder-decoder and its variants.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::color::{CaModule, DEFAULT_BLUR_SIGMA};
use crate::error::{ensure, Error, Result};
use crate::nn::{Ctx, NafStack, PoolMode};
use crate::ops::ConvGeom;
use crate::params::{Binding, Conv2d, ParamBuilder, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Which parts of the color pathway are present.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Plain U-Net of NAFBlocks without color attention.
    Plain,
    /// Single-scale input with only the level-1 color map on the global skip.
    S,
    /// Full multi-scale color attention.
    M,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Plain => "plain",
            Variant::S => "S",
            Variant::M => "M",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "plain" | "nafnet" => Ok(Variant::Plain),
            "s" | "cair-s" => Ok(Variant::S),
            "m" | "cair-m" => Ok(Variant::M),
            _ => Err(Error::contract(
                "variant",
                format!("unknown variant `{s}` (expected plain, S or M)"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CairConfig {
    pub levels: usize,
    pub base_width: usize,
    /// Encoder counts for levels 1..l followed by decoder counts for l-1..1.
    pub block_counts: Vec<usize>,
    pub variant: Variant,
    pub tlsc_window: Option<usize>,
    pub ca_width: usize,
    pub blur_sigma: f64,
}

impl Default for CairConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            base_width: 32,
            block_counts: vec![2, 2, 4, 22, 2, 2, 2],
            variant: Variant::M,
            tlsc_window: None,
            ca_width: 32,
            blur_sigma: DEFAULT_BLUR_SIGMA,
        }
    }
}

impl CairConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.levels >= 2,
            "config",
            "levels must be at least 2, got {}",
            self.levels
        );
        ensure!(
            self.block_counts.len() == 2 * self.levels - 1,
            "config",
            "expected {} block counts for {} levels, got {}",
            2 * self.levels - 1,
            self.levels,
            self.block_counts.len()
        );
        ensure!(
            self.base_width > 0 && self.ca_width > 0,
            "config",
            "widths must be positive"
        );
        ensure!(
            self.blur_sigma > 0.0,
            "config",
            "blur sigma must be positive"
        );
        ensure!(
            self.tlsc_window != Some(0),
            "config",
            "TLSC window must be at least 1"
        );
        Ok(())
    }

    /// Channel width at 1-based level `k`.
    pub fn width(&self, k: usize) -> usize {
        self.base_width << (k - 1)
    }

    pub fn encoder_blocks(&self, k: usize) -> usize {
        self.block_counts[k - 1]
    }

    pub fn decoder_blocks(&self, k: usize) -> usize {
        self.block_counts[2 * self.levels - k - 1]
    }

    /// Spatial extents must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Replace every color feature with zeros and drop the color skip.
    pub zero_color: bool,
}

/// Anything the trainer can optimize: maps an input batch to a prediction.
pub trait Network: Send + Sync {
    fn forward<T: Real>(&self, cx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>>;

    /// Run without recording gradients.
    fn predict<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        pool: PoolMode,
    ) -> Result<Tensor<T>> {
        let tape = Tape::no_grad();
        let bind = Binding::frozen(&tape, store);
        let cx = Ctx::new(&tape, &bind).with_pool(pool);
        Ok(self.forward(&cx, &tape.constant(x.clone()))?.into_tensor())
    }
}

#[derive(Clone, Debug)]
pub struct CairNet {
    pub config: CairConfig,
    pub intro: Conv2d,
    pub encoders: Vec<NafStack>,
    pub downs: Vec<Conv2d>,
    /// Color attention for levels 2..=l (variant M).
    pub ca: Vec<CaModule>,
    pub fuse: Vec<Conv2d>,
    /// Level-1 color map (variants S and M).
    pub ca1: Option<CaModule>,
    pub color_up: Option<Conv2d>,
    pub color_proj: Option<Conv2d>,
    pub ups: Vec<Conv2d>,
    pub decoders: Vec<NafStack>,
    pub ending: Conv2d,
}

const SAME3: ConvGeom = ConvGeom::new(1, 1, 1);
const POINTWISE: ConvGeom = ConvGeom::new(1, 0, 1);

impl CairNet {
    pub fn new<T: Real>(config: &CairConfig, pb: &mut ParamBuilder<T>) -> Result<Self> {
        config.validate()?;
        let l = config.levels;
        let w = config.base_width;
        let caw = config.ca_width;
        let color = config.variant != Variant::Plain;
        let multi = config.variant == Variant::M;

        let intro = pb.conv("intro", 3, w, 3, SAME3, true);
        let mut encoders = Vec::with_capacity(l);
        let mut downs = Vec::with_capacity(l - 1);
        let mut ca = Vec::new();
        let mut fuse = Vec::new();
        for k in 1..=l {
            let ck = config.width(k);
            if k >= 2 {
                downs.push(pb.conv(
                    &format!("down{}", k - 1),
                    ck / 2,
                    ck,
                    2,
                    ConvGeom::new(2, 0, 1),
                    true,
                ));
                if multi {
                    ca.push(CaModule::new(
                        &mut pb.scope(&format!("ca{k}")),
                        caw,
                        config.blur_sigma,
                    ));
                    fuse.push(pb.conv_select(&format!("fuse{k}"), ck + caw, ck));
                }
            }
            encoders.push(NafStack::new(
                &mut pb.scope(&format!("enc{k}")),
                ck,
                config.encoder_blocks(k),
            ));
        }
        let (ca1, color_up, color_proj) = if color {
            (
                Some(CaModule::map_only(
                    &mut pb.scope("ca1"),
                    caw,
                    config.blur_sigma,
                )),
                Some(pb.conv("color_up", caw, 4 * caw, 1, POINTWISE, false)),
                Some(pb.conv_zero("color_proj", caw, w, 1, POINTWISE, true)),
            )
        } else {
            (None, None, None)
        };
        let mut ups = Vec::with_capacity(l - 1);
        let mut decoders = Vec::with_capacity(l - 1);
        for k in (1..l).rev() {
            let upper = config.width(k + 1);
            ups.push(pb.conv(&format!("up{k}"), upper, 2 * upper, 1, POINTWISE, false));
            decoders.push(NafStack::new(
                &mut pb.scope(&format!("dec{k}")),
                config.width(k),
                config.decoder_blocks(k),
            ));
        }
        let ending = pb.conv("ending", w, 3, 3, SAME3, true);
        Ok(Self {
            config: config.clone(),
            intro,
            encoders,
            downs,
            ca,
            fuse,
            ca1,
            color_up,
            color_proj,
            ups,
            decoders,
            ending,
        })
    }

    /// Fresh network and parameters from a seed.
    pub fn init<T: Real>(config: &CairConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Self::new(config, &mut ParamBuilder::new(&mut store, &mut rng))?;
        Ok((net, store))
    }

    pub fn forward_with<T: Real>(
        &self,
        cx: &Ctx<T>,
        img: &Var<T>,
        opts: ForwardOptions,
    ) -> Result<Var<T>> {
        let t = cx.tape;
        let [_, c, h, w] = img.value().dims4("cair forward")?;
        ensure!(c == 3, "cair forward", "expected 3 input channels, got {c}");
        let m = self.config.size_multiple();
        let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let padded = if (ph, pw) != (h, w) {
            t.reflect_pad(img, ph - h, pw - w)?
        } else {
            img.clone()
        };
        let out = self.forward_aligned(cx, &padded, opts)?;
        if (ph, pw) != (h, w) {
            t.crop(&out, h, w)
        } else {
            Ok(out)
        }
    }

    fn forward_aligned<T: Real>(
        &self,
        cx: &Ctx<T>,
        img: &Var<T>,
        opts: ForwardOptions,
    ) -> Result<Var<T>> {
        let t = cx.tape;
        let l = self.config.levels;
        let multi = !self.ca.is_empty();
        let pyr = if multi {
            build_pyramid(t, img, l)?
        } else {
            vec![img.clone()]
        };

        let mut feats = Vec::with_capacity(l);
        let x = self.intro.forward(cx, img)?;
        let mut ef = self.encoders[0].forward(cx, &x)?;
        t.check_stage("enc1", &ef)?;
        for k in 2..=l {
            feats.push(ef.clone());
            let mut x = self.downs[k - 2].forward(cx, &ef)?;
            if multi {
                let fc = if opts.zero_color {
                    let [n, _, hh, ww] = x.value().dims4("cair forward")?;
                    t.constant(Tensor::zeros(&[n, self.config.ca_width, hh, ww]))
                } else {
                    self.ca[k - 2].forward(cx, &pyr[k - 1], &pyr[k - 2])?
                };
                t.check_stage(&format!("ca{k}"), &fc)?;
                x = self.fuse[k - 2].forward(cx, &t.concat_channels(&[&x, &fc])?)?;
            }
            ef = self.encoders[k - 1].forward(cx, &x)?;
            t.check_stage(&format!("enc{k}"), &ef)?;
        }

        let mut df = ef;
        for (i, k) in (1..l).rev().enumerate() {
            let up = t.pixel_shuffle(&self.ups[i].forward(cx, &df)?, 2)?;
            df = self.decoders[i].forward(cx, &t.add(&feats[k - 1], &up)?)?;
            t.check_stage(&format!("dec{k}"), &df)?;
        }

        if let (Some(ca1), Some(cu), Some(cp), false) =
            (&self.ca1, &self.color_up, &self.color_proj, opts.zero_color)
        {
            let m1 = ca1.color_map(cx, img)?;
            let up = t.pixel_shuffle(&cu.forward(cx, &m1)?, 2)?;
            df = t.add(&df, &cp.forward(cx, &up)?)?;
        }
        let out = t.add(img, &self.ending.forward(cx, &df)?)?;
        t.check_stage("output", &out)?;
        Ok(out)
    }
}

impl Network for CairNet {
    fn forward<T: Real>(&self, cx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        self.forward_with(cx, x, ForwardOptions::default())
    }
}

/// Image pyramid by repeated 2x2 area downscaling; level 1 is the input.
pub fn build_pyramid<T: Real>(tape: &Tape<T>, img: &Var<T>, levels: usize) -> Result<Vec<Var<T>>> {
    let [_, _, h, w] = img.value().dims4("build_pyramid")?;
    let m = 1usize << levels.saturating_sub(1);
    ensure!(
        h % m == 0 && w % m == 0,
        "build_pyramid",
        "spatial size {h}x{w} must be a multiple of {m} for {levels} levels"
    );
    let mut out = vec![img.clone()];
    for _ in 1..levels {
        let next = tape.resize_half_area(out.last().expect("non-empty"))?;
        out.push(next);
    }
    Ok(out)
}

/// Number of learnable scalars.
pub fn count_params<T: Real>(store: &ParamStore<T>) -> usize {
    store.num_scalars()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check_params, random_projection};

    fn tiny(variant: Variant) -> CairConfig {
        CairConfig {
            levels: 2,
            base_width: 4,
            block_counts: vec![1, 1, 1],
            variant,
            tlsc_window: None,
            ca_width: 4,
            blur_sigma: DEFAULT_BLUR_SIGMA,
        }
    }

    fn image(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::rand_uniform(shape, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn zero(store: &mut ParamStore<f64>, conv: Conv2d) {
        let s = store.get(conv.weight).shape().to_vec();
        store.set(conv.weight, Tensor::zeros(&s)).unwrap();
        if let Some(b) = conv.bias {
            let s = store.get(b).shape().to_vec();
            store.set(b, Tensor::zeros(&s)).unwrap();
        }
    }

    #[test]
    fn pyramid_sizes_and_constants() {
        let tape = Tape::<f64>::no_grad();
        let img = tape.constant(image(&[1, 3, 64, 64], 0));
        let p = build_pyramid(&tape, &img, 4).unwrap();
        let sizes: Vec<usize> = p.iter().map(|v| v.shape()[2]).collect();
        assert_eq!(sizes, [64, 32, 16, 8]);
        assert_eq!(build_pyramid(&tape, &img, 1).unwrap().len(), 1);
        let c = tape.constant(Tensor::full(&[1, 3, 16, 16], 0.25));
        for lvl in build_pyramid(&tape, &c, 3).unwrap() {
            assert!(lvl.value().data().iter().all(|&v| v == 0.25));
        }
        let bad = tape.constant(image(&[1, 3, 20, 16], 1));
        let err = build_pyramid(&tape, &bad, 4).unwrap_err();
        assert!(err.to_string().contains("multiple of 8"), "{err}");
    }

    #[test]
    fn config_validation() {
        assert!(CairConfig::default().validate().is_ok());
        let mut c = CairConfig::default();
        c.block_counts.pop();
        assert!(c.validate().is_err());
        c = CairConfig {
            levels: 1,
            block_counts: vec![1],
            ..CairConfig::default()
        };
        assert!(c.validate().is_err());
        assert_eq!("cair-m".parse::<Variant>().unwrap(), Variant::M);
        assert!("x".parse::<Variant>().is_err());
    }

    #[test]
    fn block_index_mapping() {
        let c = CairConfig::default();
        let enc: Vec<usize> = (1..=4).map(|k| c.encoder_blocks(k)).collect();
        let dec: Vec<usize> = (1..4).rev().map(|k| c.decoder_blocks(k)).collect();
        assert_eq!(enc, [2, 2, 4, 22]);
        assert_eq!(dec, [2, 2, 2]);
        let odd = CairConfig {
            block_counts: vec![1, 2, 3, 4, 5, 6, 7],
            ..c
        };
        assert_eq!(odd.decoder_blocks(3), 5);
        assert_eq!(odd.decoder_blocks(1), 7);
    }

    #[test]
    fn zero_init_is_identity_for_every_variant() {
        for v in [Variant::Plain, Variant::S, Variant::M] {
            let cfg = CairConfig {
                levels: 3,
                base_width: 8,
                block_counts: vec![1, 1, 2, 1, 1],
                ca_width: 8,
                ..tiny(v)
            };
            let (net, mut store) = CairNet::init::<f64>(&cfg, 3).unwrap();
            zero(&mut store, net.ending);
            let img = image(&[1, 3, 16, 16], 4);
            let out = net.predict(&store, &img, PoolMode::Global).unwrap();
            assert_eq!(out, img, "variant {v}");
        }
    }

    #[test]
    fn shapes_preserved_including_padding_fallback() {
        let cfg = CairConfig {
            levels: 3,
            base_width: 4,
            block_counts: vec![1; 5],
            ca_width: 4,
            ..tiny(Variant::M)
        };
        let (net, store) = CairNet::init::<f32>(&cfg, 5).unwrap();
        for (h, w) in [(16, 16), (32, 16), (18, 22)] {
            let img = image(&[2, 3, h, w], 6).cast::<f32>();
            let out = net.predict(&store, &img, PoolMode::Global).unwrap();
            assert_eq!(out.shape(), &[2, 3, h, w]);
            assert!(out.all_finite());
        }
    }

    #[test]
    fn encoder_widths_double_per_level() {
        let cfg = CairConfig {
            base_width: 16,
            ca_width: 16,
            ..CairConfig::default()
        };
        let (net, store) = CairNet::init::<f32>(&cfg, 0).unwrap();
        for (k, enc) in net.encoders.iter().enumerate() {
            for b in &enc.blocks {
                assert_eq!(b.width, 16 << k);
                assert_eq!(store.get(b.ln1.gamma).shape(), &[16 << k]);
            }
        }
        for (i, d) in net.downs.iter().enumerate() {
            assert_eq!(store.get(d.weight).shape(), &[32 << i, 16 << i, 2, 2]);
        }
    }

    #[test]
    fn plain_equals_m_with_zeroed_color_and_selecting_fusion() {
        let cfg = CairConfig {
            levels: 3,
            base_width: 4,
            block_counts: vec![1, 1, 1, 1, 1],
            ca_width: 4,
            ..tiny(Variant::M)
        };
        let (m, mut ms) = CairNet::init::<f64>(&cfg, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        ms.randomize_where(
            |n| n.ends_with("_scale") || n.starts_with("color_proj"),
            -0.5,
            0.5,
            &mut rng,
        );
        for (i, f) in m.fuse.iter().enumerate() {
            let ck = cfg.width(i + 2);
            let mut wt = Tensor::zeros(&[ck, ck + cfg.ca_width, 1, 1]);
            for c in 0..ck {
                wt.data_mut()[c * (ck + cfg.ca_width) + c] = 1.0;
            }
            ms.set(f.weight, wt).unwrap();
            ms.set(f.bias.unwrap(), Tensor::zeros(&[ck])).unwrap();
        }
        let (p, mut ps) =
            CairNet::init::<f64>(&cfg.clone().with_variant(Variant::Plain), 99).unwrap();
        ps.load_named(ms.iter().map(|(n, t)| (n, t.clone())))
            .unwrap();

        let img = image(&[1, 3, 16, 16], 9);
        let tape = Tape::no_grad();
        let mb = Binding::frozen(&tape, &ms);
        let x = tape.constant(img.clone());
        let a = m
            .forward_with(
                &Ctx::new(&tape, &mb),
                &x,
                ForwardOptions { zero_color: true },
            )
            .unwrap();
        let b = p.predict(&ps, &img, PoolMode::Global).unwrap();
        assert_eq!(a.value(), &b);
        let c = m
            .forward_with(&Ctx::new(&tape, &mb), &x, ForwardOptions::default())
            .unwrap();
        assert_ne!(c.value(), &b);
    }

    #[test]
    fn every_variant_starts_as_the_plain_network() {
        let cfg = CairConfig {
            levels: 3,
            base_width: 4,
            block_counts: vec![1, 1, 1, 1, 1],
            ca_width: 4,
            ..tiny(Variant::Plain)
        };
        let img = image(&[1, 3, 16, 16], 3);
        let (p, mut ps) = CairNet::init::<f64>(&cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        ps.randomize_where(|n| n.ends_with("_scale"), -0.5, 0.5, &mut rng);
        let plain = p.predict(&ps, &img, PoolMode::Global).unwrap();
        for v in [Variant::S, Variant::M] {
            let (net, mut store) = CairNet::init::<f64>(&cfg.clone().with_variant(v), 5).unwrap();
            let (_, fresh) = CairNet::init::<f64>(&cfg, 5).unwrap();
            for (n, t) in fresh.iter() {
                let id = store.id(n).unwrap();
                assert_eq!(store.get(id), t, "{n} differs at init");
            }
            for (n, t) in ps.iter() {
                let id = store.id(n).unwrap();
                store.set(id, t.clone()).unwrap();
            }
            store.randomize_where(|n| n.starts_with("ca"), -0.5, 0.5, &mut rng);
            assert_eq!(net.predict(&store, &img, PoolMode::Global).unwrap(), plain);
        }
    }

    #[test]
    fn variants_nest_in_parameter_count() {
        let counts: Vec<usize> = [Variant::Plain, Variant::S, Variant::M]
            .iter()
            .map(|&v| count_params(&CairNet::init::<f32>(&tiny(v), 0).unwrap().1))
            .collect();
        assert!(counts[0] < counts[1] && counts[1] < counts[2], "{counts:?}");
    }

    #[test]
    fn checked_mode_names_the_stage() {
        let (net, store) = CairNet::init::<f64>(&tiny(Variant::Plain), 0).unwrap();
        let mut img = image(&[1, 3, 8, 8], 1);
        img.data_mut()[5] = f64::NAN;
        let tape = Tape::no_grad().checked(true);
        let bind = Binding::frozen(&tape, &store);
        let err = net
            .forward(&Ctx::new(&tape, &bind), &tape.constant(img))
            .unwrap_err();
        assert!(
            matches!(err, Error::NonFinite { ref stage } if !stage.is_empty()),
            "{err}"
        );
    }

    #[test]
    fn tiny_m_gradients_match_finite_differences() {
        let (net, mut store) = CairNet::init::<f64>(&tiny(Variant::M), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        store.randomize_where(|n| n.ends_with("_scale"), -0.5, 0.5, &mut rng);
        let img = image(&[1, 3, 16, 16], 13);
        let r = grad_check_params(&store, &[img], PoolMode::Global, |cx, v| {
            let y = net.forward(cx, &v[0])?;
            random_projection(cx.tape, &y, 14)
        })
        .unwrap();
        assert!(r.passed(1e-6), "worst {}", r.worst());
    }
}
