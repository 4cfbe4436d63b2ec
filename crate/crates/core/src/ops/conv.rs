//! 2-D cross-correlation: pointwise GEMM, im2col + GEMM, and a direct
//! depthwise kernel.

use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub const fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }
}

impl Default for ConvGeom {
    fn default() -> Self {
        Self::new(1, 0, 1)
    }
}

#[derive(Clone, Copy, Debug)]
struct Dims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    cin_g: usize,
    cout_g: usize,
}

impl Dims {
    fn new(x: &[usize], wt: &[usize], bias: Option<&[usize]>, g: ConvGeom) -> Result<Self> {
        const OP: &str = "conv2d";
        ensure!(x.len() == 4, OP, "input must be NCHW, got {:?}", x);
        ensure!(
            wt.len() == 4,
            OP,
            "weight must be [Cout, Cin/groups, kh, kw], got {:?}",
            wt
        );
        ensure!(g.stride >= 1, OP, "stride must be positive");
        ensure!(g.groups >= 1, OP, "groups must be positive");
        let (n, cin, h, w) = (x[0], x[1], x[2], x[3]);
        let (cout, cin_g, kh, kw) = (wt[0], wt[1], wt[2], wt[3]);
        ensure!(
            cin % g.groups == 0,
            OP,
            "input channels {} not divisible by groups {}",
            cin,
            g.groups
        );
        ensure!(
            cout % g.groups == 0,
            OP,
            "output channels {} not divisible by groups {}",
            cout,
            g.groups
        );
        ensure!(
            cin_g * g.groups == cin,
            OP,
            "weight input-channel dimension is {} but input has {} channels over {} groups",
            cin_g,
            cin,
            g.groups
        );
        ensure!(
            kh >= 1 && kh <= h + 2 * g.padding,
            OP,
            "kernel height {} exceeds padded input height {}",
            kh,
            h + 2 * g.padding
        );
        ensure!(
            kw >= 1 && kw <= w + 2 * g.padding,
            OP,
            "kernel width {} exceeds padded input width {}",
            kw,
            w + 2 * g.padding
        );
        if let Some(b) = bias {
            ensure!(b == [cout], OP, "bias must be [{}], got {:?}", cout, b);
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            oh: (h + 2 * g.padding - kh) / g.stride + 1,
            ow: (w + 2 * g.padding - kw) / g.stride + 1,
            stride: g.stride,
            pad: g.padding,
            groups: g.groups,
            cin_g,
            cout_g: cout / g.groups,
        })
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn depthwise(&self) -> bool {
        self.groups == self.cin && self.cin_g == 1 && self.cout_g == 1 && self.groups > 1
    }

    fn col_rows(&self) -> usize {
        self.cin_g * self.kh * self.kw
    }
}

/// Range of output positions `o` for which `o*stride + k - pad` lands in `[0, len)`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, len: usize, olen: usize) -> (usize, usize) {
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    let hi = if len + pad > k {
        ((len - 1 + pad - k) / stride + 1).min(olen)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<T: Real>(x: &[T], d: &Dims, col: &mut [T]) {
    // x: cin_g planes of h*w; col: (cin_g*kh*kw) x (oh*ow)
    let p = d.oh * d.ow;
    for ci in 0..d.cin_g {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = &mut col[((ci * d.kh + ky) * d.kw + kx) * p..][..p];
                let (xlo, xhi) = valid_range(kx, d.pad, d.stride, d.w, d.ow);
                for oy in 0..d.oh {
                    let dst = &mut row[oy * d.ow..(oy + 1) * d.ow];
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    dst[..xlo].fill(T::zero());
                    dst[xhi..].fill(T::zero());
                    if d.stride == 1 {
                        let off = xlo + kx - d.pad;
                        dst[xlo..xhi].copy_from_slice(&src[off..off + (xhi - xlo)]);
                    } else {
                        for (ox, v) in dst.iter_mut().enumerate().take(xhi).skip(xlo) {
                            *v = src[ox * d.stride + kx - d.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], d: &Dims, x: &mut [T]) {
    let p = d.oh * d.ow;
    for ci in 0..d.cin_g {
        let plane = &mut x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = &col[((ci * d.kh + ky) * d.kw + kx) * p..][..p];
                let (xlo, xhi) = valid_range(kx, d.pad, d.stride, d.w, d.ow);
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let src = &row[oy * d.ow..(oy + 1) * d.ow];
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    if xlo >= xhi {
                        continue;
                    }
                    if d.stride == 1 {
                        let off = xlo + kx - d.pad;
                        for (o, &v) in dst[off..off + xhi - xlo].iter_mut().zip(&src[xlo..xhi]) {
                            *o += v;
                        }
                    } else {
                        for ox in xlo..xhi {
                            dst[ox * d.stride + kx - d.pad] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_plane_forward<T: Real>(x: &[T], wt: &[T], d: &Dims, out: &mut [T]) {
    for oy in 0..d.oh {
        let orow = &mut out[oy * d.ow..(oy + 1) * d.ow];
        for ky in 0..d.kh {
            let iy = (oy * d.stride + ky) as isize - d.pad as isize;
            if iy < 0 || iy >= d.h as isize {
                continue;
            }
            let irow = &x[iy as usize * d.w..(iy as usize + 1) * d.w];
            for kx in 0..d.kw {
                let wv = wt[ky * d.kw + kx];
                let (lo, hi) = valid_range(kx, d.pad, d.stride, d.w, d.ow);
                if lo >= hi {
                    continue;
                }
                if d.stride == 1 {
                    let off = lo + kx - d.pad;
                    for (o, &i) in orow[lo..hi].iter_mut().zip(&irow[off..off + hi - lo]) {
                        *o += wv * i;
                    }
                } else {
                    for ox in lo..hi {
                        orow[ox] += wv * irow[ox * d.stride + kx - d.pad];
                    }
                }
            }
        }
    }
}

/// Accumulates input and weight gradients of one depthwise plane.
fn depthwise_plane_backward<T: Real>(
    x: &[T],
    wt: &[T],
    gy: &[T],
    d: &Dims,
    gx: Option<&mut [T]>,
    gw: Option<&mut [T]>,
) {
    if let Some(gx) = gx {
        for oy in 0..d.oh {
            let grow = &gy[oy * d.ow..(oy + 1) * d.ow];
            for ky in 0..d.kh {
                let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                if iy < 0 || iy >= d.h as isize {
                    continue;
                }
                let xrow = &mut gx[iy as usize * d.w..(iy as usize + 1) * d.w];
                for kx in 0..d.kw {
                    let wv = wt[ky * d.kw + kx];
                    let (lo, hi) = valid_range(kx, d.pad, d.stride, d.w, d.ow);
                    if lo >= hi {
                        continue;
                    }
                    if d.stride == 1 {
                        let off = lo + kx - d.pad;
                        for (xv, &g) in xrow[off..off + hi - lo].iter_mut().zip(&grow[lo..hi]) {
                            *xv += wv * g;
                        }
                    } else {
                        for ox in lo..hi {
                            xrow[ox * d.stride + kx - d.pad] += wv * grow[ox];
                        }
                    }
                }
            }
        }
    }
    if let Some(gw) = gw {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let (lo, hi) = valid_range(kx, d.pad, d.stride, d.w, d.ow);
                let mut acc = T::zero();
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let grow = &gy[oy * d.ow..(oy + 1) * d.ow];
                    let xrow = &x[iy as usize * d.w..(iy as usize + 1) * d.w];
                    if lo >= hi {
                        continue;
                    }
                    let mut s = T::zero();
                    if d.stride == 1 {
                        let off = lo + kx - d.pad;
                        for (&g, &xv) in grow[lo..hi].iter().zip(&xrow[off..off + hi - lo]) {
                            s += g * xv;
                        }
                    } else {
                        for ox in lo..hi {
                            s += grow[ox] * xrow[ox * d.stride + kx - d.pad];
                        }
                    }
                    acc += s;
                }
                gw[ky * d.kw + kx] += acc;
            }
        }
    }
}

fn forward_kernel<T: Real>(x: &[T], wt: &[T], bias: Option<&[T]>, d: &Dims) -> Vec<T> {
    let in_per = d.cin * d.h * d.w;
    let op = d.oh * d.ow;
    let out_per = d.cout * op;
    let mut out = vec![T::zero(); d.n * out_per];
    let kk = d.kh * d.kw;
    let krows = d.col_rows();
    let col_len = if d.depthwise() || d.pointwise() {
        0
    } else {
        krows * op
    };
    out.par_chunks_mut(out_per.max(1))
        .enumerate()
        .for_each_init(
            || vec![T::zero(); col_len],
            |col, (ni, o)| {
                let xi = &x[ni * in_per..(ni + 1) * in_per];
                if d.depthwise() {
                    for c in 0..d.cout {
                        depthwise_plane_forward(
                            &xi[c * d.h * d.w..(c + 1) * d.h * d.w],
                            &wt[c * kk..(c + 1) * kk],
                            d,
                            &mut o[c * op..(c + 1) * op],
                        );
                    }
                } else {
                    for g in 0..d.groups {
                        let xg = &xi[g * d.cin_g * d.h * d.w..(g + 1) * d.cin_g * d.h * d.w];
                        let wg = &wt[g * d.cout_g * krows..(g + 1) * d.cout_g * krows];
                        let og = &mut o[g * d.cout_g * op..(g + 1) * d.cout_g * op];
                        let b = if d.pointwise() {
                            xg
                        } else {
                            im2col(xg, d, col);
                            &col[..]
                        };
                        T::gemm(
                            false,
                            false,
                            d.cout_g,
                            op,
                            krows,
                            T::one(),
                            wg,
                            b,
                            T::zero(),
                            og,
                        );
                    }
                }
                if let Some(bias) = bias {
                    for (c, plane) in o.chunks_mut(op).enumerate() {
                        let bv = bias[c];
                        plane.iter_mut().for_each(|v| *v += bv);
                    }
                }
            },
        );
    out
}

struct ConvGrads<T> {
    gx: Option<Vec<T>>,
    gw: Option<Vec<T>>,
    gb: Option<Vec<T>>,
}

fn backward_kernel<T: Real>(
    x: &[T],
    wt: &[T],
    gy: &[T],
    d: &Dims,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> ConvGrads<T> {
    let in_per = d.cin * d.h * d.w;
    let op = d.oh * d.ow;
    let out_per = d.cout * op;
    let kk = d.kh * d.kw;
    let wlen = wt.len();

    let gb = need_b.then(|| {
        (0..d.cout)
            .map(|c| {
                let mut acc = T::zero();
                for ni in 0..d.n {
                    acc += gy[ni * out_per + c * op..ni * out_per + (c + 1) * op]
                        .iter()
                        .copied()
                        .sum::<T>();
                }
                acc
            })
            .collect::<Vec<T>>()
    });

    if d.depthwise() {
        let mut gx = need_x.then(|| vec![T::zero(); x.len()]);
        let mut gw = need_w.then(|| vec![T::zero(); wlen]);
        let hw = d.h * d.w;
        // parallel over channels; each channel sums over the batch in order
        let gx_planes: Vec<Option<&mut [T]>> = match gx.as_mut() {
            Some(buf) => buf.chunks_mut(hw).map(Some).collect(),
            None => (0..d.n * d.cin).map(|_| None).collect(),
        };
        let mut by_channel: Vec<Vec<Option<&mut [T]>>> = (0..d.cin).map(|_| Vec::new()).collect();
        for (i, p) in gx_planes.into_iter().enumerate() {
            by_channel[i % d.cin].push(p);
        }
        let gw_chunks: Vec<Option<&mut [T]>> = match gw.as_mut() {
            Some(buf) => buf.chunks_mut(kk).map(Some).collect(),
            None => (0..d.cin).map(|_| None).collect(),
        };
        by_channel
            .into_par_iter()
            .zip(gw_chunks)
            .enumerate()
            .for_each(|(c, (planes, mut gwc))| {
                for (ni, gxp) in planes.into_iter().enumerate() {
                    let base = ni * in_per + c * hw;
                    depthwise_plane_backward(
                        &x[base..base + hw],
                        &wt[c * kk..(c + 1) * kk],
                        &gy[ni * out_per + c * op..ni * out_per + (c + 1) * op],
                        d,
                        gxp,
                        gwc.as_deref_mut(),
                    );
                }
            });
        return ConvGrads { gx, gw, gb };
    }

    let krows = d.col_rows();
    let per_image: Vec<ImageGrads<T>> = (0..d.n)
        .into_par_iter()
        .map_init(
            || vec![T::zero(); if d.pointwise() { 0 } else { krows * op }],
            |col, ni| {
                let xi = &x[ni * in_per..(ni + 1) * in_per];
                let gyi = &gy[ni * out_per..(ni + 1) * out_per];
                let mut gxi = need_x.then(|| vec![T::zero(); in_per]);
                let mut gwi = need_w.then(|| vec![T::zero(); wlen]);
                for g in 0..d.groups {
                    let xg = &xi[g * d.cin_g * d.h * d.w..(g + 1) * d.cin_g * d.h * d.w];
                    let wg = &wt[g * d.cout_g * krows..(g + 1) * d.cout_g * krows];
                    let gyg = &gyi[g * d.cout_g * op..(g + 1) * d.cout_g * op];
                    if let Some(gwi) = gwi.as_mut() {
                        let b = if d.pointwise() {
                            xg
                        } else {
                            im2col(xg, d, col);
                            &col[..]
                        };
                        let dst = &mut gwi[g * d.cout_g * krows..(g + 1) * d.cout_g * krows];
                        T::gemm(
                            false,
                            true,
                            d.cout_g,
                            krows,
                            op,
                            T::one(),
                            gyg,
                            b,
                            T::zero(),
                            dst,
                        );
                    }
                    if let Some(gxi) = gxi.as_mut() {
                        let dst = &mut gxi[g * d.cin_g * d.h * d.w..(g + 1) * d.cin_g * d.h * d.w];
                        if d.pointwise() {
                            T::gemm(
                                true,
                                false,
                                krows,
                                op,
                                d.cout_g,
                                T::one(),
                                wg,
                                gyg,
                                T::zero(),
                                dst,
                            );
                        } else {
                            T::gemm(
                                true,
                                false,
                                krows,
                                op,
                                d.cout_g,
                                T::one(),
                                wg,
                                gyg,
                                T::zero(),
                                col,
                            );
                            col2im(col, d, dst);
                        }
                    }
                }
                (gxi, gwi)
            },
        )
        .collect();

    let mut gx = need_x.then(|| Vec::with_capacity(x.len()));
    let mut gw: Option<Vec<T>> = None;
    for (gxi, gwi) in per_image {
        if let (Some(acc), Some(part)) = (gx.as_mut(), gxi) {
            acc.extend_from_slice(&part);
        }
        if let Some(part) = gwi {
            match gw.as_mut() {
                None => gw = Some(part),
                Some(acc) => acc.iter_mut().zip(&part).for_each(|(a, b)| *a += *b),
            }
        }
    }
    if need_w && gw.is_none() {
        gw = Some(vec![T::zero(); wlen]);
    }
    ConvGrads { gx, gw, gb }
}

/// Plain (tape-free) convolution.
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    geom: ConvGeom,
) -> Result<Tensor<T>> {
    let d = Dims::new(x.shape(), w.shape(), b.map(|b| b.shape()), geom)?;
    let out = forward_kernel(x.data(), w.data(), b.map(|b| b.data()), &d);
    Tensor::from_vec(&[d.n, d.cout, d.oh, d.ow], out)
}

/// Per-image input and weight gradients.
type ImageGrads<T> = (Option<Vec<T>>, Option<Vec<T>>);

impl<T: Real> Tape<T> {
    /// Zero-padded cross-correlation, weight `[Cout, Cin/groups, kh, kw]`.
    pub fn conv2d(
        &self,
        x: &Var<T>,
        w: &Var<T>,
        b: Option<&Var<T>>,
        geom: ConvGeom,
    ) -> Result<Var<T>> {
        let d = Dims::new(x.shape(), w.shape(), b.map(|b| b.shape()), geom)?;
        let out = forward_kernel(
            x.value().data(),
            w.value().data(),
            b.map(|b| b.value().data()),
            &d,
        );
        let value = Tensor::from_vec(&[d.n, d.cout, d.oh, d.ow], out)?;
        let (xv, wv) = (x.arc(), w.arc());
        let (xs, ws) = (x.shape().to_vec(), w.shape().to_vec());
        let mut inputs = vec![x, w];
        if let Some(b) = b {
            inputs.push(b);
        }
        let has_bias = b.is_some();
        self.record("conv2d", value, &inputs, move |g, needs| {
            let need_b = has_bias && needs[2];
            let r = backward_kernel(
                xv.data(),
                wv.data(),
                g.data(),
                &d,
                needs[0],
                needs[1],
                need_b,
            );
            let mut out = vec![
                r.gx.map(|v| Tensor::from_vec(&xs, v).expect("gx shape")),
                r.gw.map(|v| Tensor::from_vec(&ws, v).expect("gw shape")),
            ];
            if has_bias {
                out.push(r.gb.map(|v| Tensor::from_vec(&[d.cout], v).expect("gb shape")));
            }
            out
        })
    }
}
