//! Dense rank-≤4 tensors in NCHW layout.

use rand::Rng;

use crate::error::{ensure, Result};
use crate::real::Real;

/// Dense row-major array of up to four dimensions.
///
/// Image-like tensors use the `[batch, channels, height, width]` layout.
/// Gradients are not stored here; the tape owns them (see [`crate::autodiff`]).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        ensure!(shape.len() <= 4, "tensor", "rank {} exceeds 4", shape.len());
        let n: usize = shape.iter().product();
        ensure!(
            n == data.len(),
            "tensor",
            "shape {:?} needs {} values, got {}",
            shape,
            n,
            data.len()
        );
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.random_range(lo..hi))).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extents as `[n, c, h, w]`; fails for tensors of any other rank.
    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        ensure!(
            self.shape.len() == 4,
            op,
            "expected a rank-4 NCHW tensor, got shape {:?}",
            self.shape
        );
        Ok([self.shape[0], self.shape[1], self.shape[2], self.shape[3]])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        ensure!(
            n == self.data.len(),
            "reshape",
            "cannot view {:?} as {:?}",
            self.shape,
            shape
        );
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        ensure!(
            self.shape == other.shape,
            "zip_map",
            "shapes {:?} and {:?} differ",
            self.shape,
            other.shape
        );
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of(self.data.len() as f64)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn clamp(&self, lo: T, hi: T) -> Self {
        self.map(|v| v.max(lo).min(hi))
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Select batch items `[start, start+len)`.
    pub fn narrow_batch(&self, start: usize, len: usize) -> Result<Self> {
        let [n, c, h, w] = self.dims4("narrow_batch")?;
        ensure!(
            start + len <= n,
            "narrow_batch",
            "range {}..{} exceeds batch {}",
            start,
            start + len,
            n
        );
        let per = c * h * w;
        Tensor::from_vec(
            &[len, c, h, w],
            self.data[start * per..(start + len) * per].to_vec(),
        )
    }

    /// Stack rank-4 tensors with identical `[c, h, w]` along the batch axis.
    pub fn stack_batch(items: &[Tensor<T>]) -> Result<Self> {
        ensure!(!items.is_empty(), "stack_batch", "nothing to stack");
        let [_, c, h, w] = items[0].dims4("stack_batch")?;
        let mut data = Vec::with_capacity(items.iter().map(|t| t.len()).sum());
        let mut n = 0;
        for t in items {
            let [tn, tc, th, tw] = t.dims4("stack_batch")?;
            ensure!(
                (tc, th, tw) == (c, h, w),
                "stack_batch",
                "item shape {:?} differs from {:?}",
                t.shape,
                [c, h, w]
            );
            data.extend_from_slice(&t.data);
            n += tn;
        }
        Tensor::from_vec(&[n, c, h, w], data)
    }

    /// Spatial window `[top, top+h) x [left, left+w)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        let [n, c, sh, sw] = self.dims4("crop")?;
        ensure!(
            top + h <= sh && left + w <= sw,
            "crop",
            "window {}x{} at ({}, {}) exceeds {}x{}",
            h,
            w,
            top,
            left,
            sh,
            sw
        );
        let mut out = Vec::with_capacity(n * c * h * w);
        for plane in self.data.chunks(sh * sw) {
            for y in top..top + h {
                out.extend_from_slice(&plane[y * sw + left..y * sw + left + w]);
            }
        }
        Tensor::from_vec(&[n, c, h, w], out)
    }

    /// Mirror left-right.
    pub fn flip_h(&self) -> Self {
        let [_, _, h, w] = self.dims4("flip_h").expect("flip_h on NCHW");
        let mut out = self.data.clone();
        for plane in out.chunks_mut(h * w) {
            for row in plane.chunks_mut(w) {
                row.reverse();
            }
        }
        Self {
            shape: self.shape.clone(),
            data: out,
        }
    }

    /// Rotate by `k * 90` degrees counter-clockwise.
    pub fn rot90(&self, k: usize) -> Self {
        let [n, c, h, w] = self.dims4("rot90").expect("rot90 on NCHW");
        match k % 4 {
            0 => self.clone(),
            2 => {
                let mut out = self.data.clone();
                for plane in out.chunks_mut(h * w) {
                    plane.reverse();
                }
                Self {
                    shape: self.shape.clone(),
                    data: out,
                }
            }
            r => {
                // ccw: out[y][x] = in[x][w-1-y], out is w x h
                let mut out = vec![T::zero(); self.data.len()];
                for (src, dst) in self.data.chunks(h * w).zip(out.chunks_mut(h * w)) {
                    for y in 0..w {
                        for x in 0..h {
                            dst[y * h + x] = if r == 1 {
                                src[x * w + (w - 1 - y)]
                            } else {
                                src[(h - 1 - x) * w + y]
                            };
                        }
                    }
                }
                Self {
                    shape: vec![n, c, w, h],
                    data: out,
                }
            }
        }
    }
}

/// Half-sample symmetric reflection (`dcba|abcd|dcba`) of an index into `[0, n)`.
/// Handles offsets of any magnitude by folding with period `2n`.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    if m < n {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize]) -> Tensor<f32> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::from_vec(&[1, 1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn rot90_four_times_is_identity() {
        let x = ramp(&[1, 2, 3, 5]);
        assert_eq!(x.rot90(1).shape(), &[1, 2, 5, 3]);
        assert_eq!(x.rot90(1).rot90(1).rot90(1).rot90(1), x);
        assert_eq!(x.rot90(1).rot90(1), x.rot90(2));
        assert_eq!(x.rot90(3).rot90(1), x);
    }

    #[test]
    fn rot90_is_counter_clockwise() {
        // [[0,1],[2,3]] -> [[1,3],[0,2]]
        let x = ramp(&[1, 1, 2, 2]);
        assert_eq!(x.rot90(1).data(), &[1.0, 3.0, 0.0, 2.0]);
    }

    #[test]
    fn flip_twice_is_identity() {
        let x = ramp(&[2, 1, 3, 4]);
        assert_eq!(x.flip_h().flip_h(), x);
        assert_eq!(x.flip_h().data()[..4], [3.0, 2.0, 1.0, 0.0]);
    }

    #[test]
    fn crop_selects_window() {
        let x = ramp(&[1, 1, 4, 4]);
        let c = x.crop(1, 2, 2, 2).unwrap();
        assert_eq!(c.data(), &[6.0, 7.0, 10.0, 11.0]);
        assert!(x.crop(3, 3, 2, 2).is_err());
    }

    #[test]
    fn reflect_index_folds() {
        let got: Vec<usize> = (-5..9).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 3, 2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0, 0]);
        assert_eq!(reflect_index(-7, 1), 0);
    }
}
