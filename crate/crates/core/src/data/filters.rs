//! Parametric color filters standing in for social-media photo filters.

use crate::error::{ensure, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const CURVE_POINTS: usize = 8;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Debug, PartialEq)]
pub struct FilterSpec {
    pub name: String,
    /// Row-major 3x3 color matrix applied before `offset`.
    pub matrix: [[f64; 3]; 3],
    pub offset: [f64; 3],
    pub gamma: [f64; 3],
    pub saturation: f64,
    pub vignette: f64,
    /// Output values at inputs `i / 7`, strictly increasing.
    pub tone_curve: [f64; CURVE_POINTS],
}

pub const IDENTITY_CURVE: [f64; CURVE_POINTS] = [
    0.0,
    1.0 / 7.0,
    2.0 / 7.0,
    3.0 / 7.0,
    4.0 / 7.0,
    5.0 / 7.0,
    6.0 / 7.0,
    1.0,
];

impl FilterSpec {
    pub fn identity(name: &str) -> Self {
        Self {
            name: name.to_string(),
            matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            offset: [0.0; 3],
            gamma: [1.0; 3],
            saturation: 1.0,
            vignette: 0.0,
            tone_curve: IDENTITY_CURVE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.name.is_empty(), "filter", "filter name is empty");
        ensure!(
            self.gamma.iter().all(|&g| g > 0.0),
            "filter",
            "`{}`: gamma must be positive",
            self.name
        );
        ensure!(
            self.saturation >= 0.0,
            "filter",
            "`{}`: saturation must be non-negative",
            self.name
        );
        ensure!(
            (0.0..=1.0).contains(&self.vignette),
            "filter",
            "`{}`: vignette must lie in [0,1]",
            self.name
        );
        ensure!(
            self.tone_curve.windows(2).all(|w| w[0] < w[1]),
            "filter",
            "`{}`: tone curve must be strictly increasing",
            self.name
        );
        ensure!(
            self.tone_curve.iter().all(|v| (0.0..=1.0).contains(v)),
            "filter",
            "`{}`: tone curve must stay in [0,1]",
            self.name
        );
        Ok(())
    }

    fn curve(&self, v: f64) -> f64 {
        let t = v.clamp(0.0, 1.0) * (CURVE_POINTS - 1) as f64;
        let i = (t.floor() as usize).min(CURVE_POINTS - 2);
        let f = t - i as f64;
        self.tone_curve[i] + (self.tone_curve[i + 1] - self.tone_curve[i]) * f
    }

    /// Filter one RGB pixel; `falloff` is the vignette multiplier.
    pub fn apply_pixel(&self, rgb: [f64; 3], falloff: f64) -> [f64; 3] {
        let mut p = [0.0; 3];
        for (c, out) in p.iter_mut().enumerate() {
            let m = self.matrix[c];
            *out = (m[0] * rgb[0] + m[1] * rgb[1] + m[2] * rgb[2] + self.offset[c]).clamp(0.0, 1.0);
        }
        if self.gamma != [1.0; 3] {
            for (v, g) in p.iter_mut().zip(self.gamma) {
                *v = v.powf(g);
            }
        }
        if self.saturation != 1.0 {
            let luma = LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2];
            for v in &mut p {
                *v = luma + self.saturation * (*v - luma);
            }
        }
        if self.tone_curve != IDENTITY_CURVE {
            for v in &mut p {
                *v = self.curve(*v);
            }
        }
        if self.vignette != 0.0 {
            for v in &mut p {
                *v *= falloff;
            }
        }
        p.map(|v| v.clamp(0.0, 1.0))
    }

    /// Multiplier `1 - s (r / r_max)^2` at pixel `(y, x)` of an `h x w` image.
    pub fn falloff(&self, y: usize, x: usize, h: usize, w: usize) -> f64 {
        let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
        let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
        let r2 = dy * dy + dx * dx;
        let rmax2 = cy * cy + cx * cx;
        1.0 - self.vignette * r2 / rmax2
    }

    /// Apply to `[N, 3, H, W]` data in `[0,1]`.
    pub fn apply<T: Real>(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, c, h, w] = img.dims4("apply_filter")?;
        ensure!(c == 3, "apply_filter", "expected 3 channels, got {c}");
        let plane = h * w;
        let mut out = img.clone();
        let src = img.data();
        let dst = out.data_mut();
        for b in 0..n {
            let base = b * 3 * plane;
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let rgb = [0, 1, 2].map(|ch| src[base + ch * plane + i].as_f64());
                    let f = self.apply_pixel(rgb, self.falloff(y, x, h, w));
                    for ch in 0..3 {
                        dst[base + ch * plane + i] = T::of(f[ch]);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn diag(r: f64, g: f64, b: f64) -> [[f64; 3]; 3] {
    [[r, 0.0, 0.0], [0.0, g, 0.0], [0.0, 0.0, b]]
}

/// Fixed presets; constants never change between releases.
pub fn builtin_filters() -> Vec<FilterSpec> {
    let base = FilterSpec::identity;
    vec![
        FilterSpec {
            matrix: diag(1.08, 1.0, 0.86),
            offset: [0.04, 0.02, 0.0],
            gamma: [0.95, 1.0, 1.05],
            saturation: 0.8,
            vignette: 0.1,
            tone_curve: [0.08, 0.21, 0.34, 0.47, 0.6, 0.72, 0.85, 0.96],
            ..base("warm-fade")
        },
        FilterSpec {
            matrix: diag(0.9, 1.0, 1.12),
            offset: [0.0, 0.01, 0.04],
            gamma: [1.1, 1.05, 0.95],
            saturation: 0.9,
            vignette: 0.15,
            tone_curve: [0.0, 0.07, 0.2, 0.36, 0.53, 0.7, 0.86, 1.0],
            ..base("cool-crush")
        },
        FilterSpec {
            saturation: 1.3,
            vignette: 0.2,
            tone_curve: [0.0, 0.06, 0.18, 0.37, 0.63, 0.83, 0.95, 1.0],
            ..base("high-contrast")
        },
        FilterSpec {
            matrix: [
                [0.575, 0.538, 0.132],
                [0.244, 0.780, 0.118],
                [0.190, 0.374, 0.392],
            ],
            offset: [0.02, 0.0, -0.02],
            saturation: 0.85,
            tone_curve: [0.04, 0.17, 0.31, 0.45, 0.59, 0.72, 0.85, 0.97],
            ..base("sepia-drift")
        },
        FilterSpec {
            matrix: [[1.12, 0.05, -0.1], [-0.02, 1.0, 0.05], [-0.08, 0.1, 1.06]],
            offset: [0.0, 0.0, 0.02],
            saturation: 1.15,
            tone_curve: [0.0, 0.11, 0.25, 0.4, 0.57, 0.74, 0.89, 1.0],
            ..base("teal-orange")
        },
        FilterSpec {
            matrix: diag(0.78, 0.78, 0.8),
            offset: [0.14, 0.14, 0.15],
            gamma: [0.9, 0.9, 0.9],
            saturation: 0.6,
            tone_curve: [0.1, 0.22, 0.34, 0.46, 0.58, 0.69, 0.8, 0.9],
            ..base("washout")
        },
        FilterSpec {
            gamma: [1.05, 1.05, 1.05],
            saturation: 1.05,
            vignette: 0.6,
            ..base("vignette-heavy")
        },
        FilterSpec {
            matrix: diag(0.92, 1.1, 0.9),
            offset: [0.0, 0.03, 0.0],
            saturation: 0.95,
            tone_curve: [0.02, 0.16, 0.3, 0.44, 0.58, 0.72, 0.86, 0.99],
            ..base("green-tint")
        },
    ]
}

pub fn find_filter(name: &str) -> Option<FilterSpec> {
    builtin_filters().into_iter().find(|f| f.name == name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gradient(h: usize, w: usize) -> Tensor<f64> {
        let mut t = Tensor::zeros(&[1, 3, h, w]);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (x as f64 / (w - 1) as f64, y as f64 / (h - 1) as f64);
                let px = [u, v, 1.0 - 0.5 * (u + v)];
                for c in 0..3 {
                    t.data_mut()[(c * h + y) * w + x] = px[c];
                }
            }
        }
        t
    }

    #[test]
    fn identity_spec_is_exact_noop() {
        let img =
            Tensor::<f64>::rand_uniform(&[2, 3, 5, 6], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(FilterSpec::identity("id").apply(&img).unwrap(), img);
    }

    #[test]
    fn zero_saturation_is_grayscale() {
        let spec = FilterSpec {
            saturation: 0.0,
            ..FilterSpec::identity("gray")
        };
        let img =
            Tensor::<f64>::rand_uniform(&[1, 3, 4, 4], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let out = spec.apply(&img).unwrap();
        for i in 0..16 {
            let px: Vec<f64> = (0..3).map(|c| out.data()[c * 16 + i]).collect();
            let luma: f64 = (0..3).map(|c| LUMA[c] * img.data()[c * 16 + i]).sum();
            assert!(px.iter().all(|&v| (v - luma).abs() < 1e-12));
        }
    }

    #[test]
    fn mid_gray_matches_scalar_pipeline() {
        for spec in builtin_filters() {
            let img = Tensor::<f64>::full(&[1, 3, 1, 1], 0.5);
            let out = spec.apply(&img).unwrap();
            let mut p = [0.0; 3];
            for c in 0..3 {
                let s: f64 = spec.matrix[c].iter().sum::<f64>() * 0.5 + spec.offset[c];
                p[c] = s.clamp(0.0, 1.0).powf(spec.gamma[c]);
            }
            let l = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
            for c in 0..3 {
                let v = l + spec.saturation * (p[c] - l);
                let t = v.clamp(0.0, 1.0) * 7.0;
                let i = (t as usize).min(6);
                let v = spec.tone_curve[i]
                    + (spec.tone_curve[i + 1] - spec.tone_curve[i]) * (t - i as f64);
                let want = v.clamp(0.0, 1.0);
                assert!(
                    (out.data()[c] - want).abs() < 1e-12,
                    "{} channel {c}",
                    spec.name
                );
            }
        }
    }

    #[test]
    fn vignette_corner_falloff() {
        let spec = FilterSpec {
            vignette: 0.4,
            ..FilterSpec::identity("v")
        };
        let out = spec
            .apply(&Tensor::<f64>::full(&[1, 3, 4, 4], 0.5))
            .unwrap();
        // corner pixel center sits at distance^2 4.5 of a maximum 8
        assert!((out.data()[0] - 0.5 * (1.0 - 0.4 * 4.5 / 8.0)).abs() < 1e-15);
        assert!(out.data()[5] > out.data()[0]);
    }

    #[test]
    fn presets_are_valid_and_distinct() {
        let f = builtin_filters();
        assert!(f.len() >= 8);
        let g = gradient(32, 32);
        let outs: Vec<Tensor<f64>> = f
            .iter()
            .map(|s| {
                s.validate().unwrap();
                s.apply(&g).unwrap()
            })
            .collect();
        for i in 0..outs.len() {
            assert!(outs[i].data().iter().all(|v| (0.0..=1.0).contains(v)));
            for j in i + 1..outs.len() {
                assert!(
                    outs[i].max_abs_diff(&outs[j]) > 0.02,
                    "{} vs {}",
                    f[i].name,
                    f[j].name
                );
            }
        }
    }

    #[test]
    fn invalid_curves_are_rejected() {
        let mut s = FilterSpec::identity("bad");
        s.tone_curve[3] = s.tone_curve[2];
        assert!(s.validate().is_err());
        let s = FilterSpec {
            gamma: [1.0, 0.0, 1.0],
            ..FilterSpec::identity("g")
        };
        assert!(s.validate().is_err());
    }
}
