use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

/// How `b` lines up with `a` in a binary op.
#[derive(Clone, Copy, Debug)]
enum Layout {
    Same,
    /// `b` is `[nb, C, 1, 1]` against `a` `[N, C, H, W]`, nb ∈ {1, N}
    PerPlane {
        planes_b: usize,
        c: usize,
        hw: usize,
    },
}

fn layout(a: &[usize], b: &[usize]) -> Result<Layout> {
    if a == b {
        return Ok(Layout::Same);
    }
    ensure!(
        a.len() == 4
            && b.len() == 4
            && b[1] == a[1]
            && b[2] == 1
            && b[3] == 1
            && (b[0] == a[0] || b[0] == 1),
        "elementwise",
        "shapes {:?} and {:?} are neither equal nor [N,C,1,1]-broadcastable",
        a,
        b
    );
    Ok(Layout::PerPlane {
        planes_b: b[0] * b[1],
        c: a[1],
        hw: a[2] * a[3],
    })
}

fn combine<T: Real>(a: &[T], b: &[T], lay: Layout, f: impl Fn(T, T) -> T) -> Vec<T> {
    match lay {
        Layout::Same => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        Layout::PerPlane { planes_b, c, hw } => {
            let mut out = Vec::with_capacity(a.len());
            for (p, plane) in a.chunks(hw).enumerate() {
                let bi = if planes_b == c { p % c } else { p };
                let bv = b[bi];
                out.extend(plane.iter().map(|&x| f(x, bv)));
            }
            out
        }
    }
}

/// Sum a full-size gradient down to `b`'s broadcast shape.
fn reduce_to_b<T: Real>(g: &[T], lay: Layout, b_shape: &[usize]) -> Tensor<T> {
    match lay {
        Layout::Same => Tensor::from_vec(b_shape, g.to_vec()).expect("shape"),
        Layout::PerPlane { planes_b, c, hw } => {
            let mut out = vec![T::zero(); planes_b];
            for (p, plane) in g.chunks(hw).enumerate() {
                let bi = if planes_b == c { p % c } else { p };
                out[bi] += plane.iter().copied().sum::<T>();
            }
            Tensor::from_vec(b_shape, out).expect("shape")
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn binary(&self, op: BinaryOp, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let lay = layout(a.shape(), b.shape())?;
        let (ad, bd) = (a.value().data(), b.value().data());
        let out = match op {
            BinaryOp::Add => combine(ad, bd, lay, |x, y| x + y),
            BinaryOp::Sub => combine(ad, bd, lay, |x, y| x - y),
            BinaryOp::Mul => combine(ad, bd, lay, |x, y| x * y),
        };
        let value = Tensor::from_vec(a.shape(), out)?;
        let (av, bv) = (a.arc(), b.arc());
        let b_shape = b.shape().to_vec();
        self.record("elementwise", value, &[a, b], move |g, needs| {
            let gd = g.data();
            let ga = needs[0].then(|| match op {
                BinaryOp::Add | BinaryOp::Sub => g.clone(),
                BinaryOp::Mul => {
                    Tensor::from_vec(g.shape(), combine(gd, bv.data(), lay, |x, y| x * y))
                        .expect("shape")
                }
            });
            let gb = needs[1].then(|| match op {
                BinaryOp::Add => reduce_to_b(gd, lay, &b_shape),
                BinaryOp::Sub => {
                    reduce_to_b(&gd.iter().map(|&v| -v).collect::<Vec<_>>(), lay, &b_shape)
                }
                BinaryOp::Mul => {
                    let prod: Vec<T> = gd.iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    reduce_to_b(&prod, lay, &b_shape)
                }
            });
            vec![ga, gb]
        })
    }

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.binary(BinaryOp::Sub, a, b)
    }

    /// Elementwise product; `b` may be `[N,C,1,1]` and is broadcast over space.
    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn sigmoid(&self, x: &Var<T>) -> Result<Var<T>> {
        let value = x.value().map(|v| T::one() / (T::one() + (-v).exp()));
        let y = std::sync::Arc::new(value.clone());
        self.record("sigmoid", value, &[x], move |g, _| {
            let d = g
                .data()
                .iter()
                .zip(y.data())
                .map(|(&gv, &s)| gv * s * (T::one() - s))
                .collect();
            vec![Some(Tensor::from_vec(g.shape(), d).expect("shape"))]
        })
    }

    pub fn scale(&self, x: &Var<T>, s: f64) -> Result<Var<T>> {
        let s = T::of(s);
        let value = x.value().map(|v| v * s);
        self.record("scale", value, &[x], move |g, _| {
            vec![Some(g.map(|v| v * s))]
        })
    }

    pub fn add_scalar(&self, x: &Var<T>, s: f64) -> Result<Var<T>> {
        let s = T::of(s);
        let value = x.value().map(|v| v + s);
        self.record("add_scalar", value, &[x], move |g, _| vec![Some(g.clone())])
    }

    /// Multiply channel `c` of an NCHW tensor by `s[c]` (`s` has shape `[C]`).
    pub fn mul_channel(&self, x: &Var<T>, s: &Var<T>) -> Result<Var<T>> {
        let [_, c, h, w] = x.value().dims4("mul_channel")?;
        ensure!(
            s.shape() == [c],
            "mul_channel",
            "scale must be [{}], got {:?}",
            c,
            s.shape()
        );
        let hw = h * w;
        let sd = s.value().data();
        let mut out = Vec::with_capacity(x.value().len());
        for (p, plane) in x.value().data().chunks(hw).enumerate() {
            let k = sd[p % c];
            out.extend(plane.iter().map(|&v| v * k));
        }
        let value = Tensor::from_vec(x.shape(), out)?;
        let (xv, sv) = (x.arc(), s.arc());
        self.record("mul_channel", value, &[x, s], move |g, needs| {
            let gx = needs[0].then(|| {
                let sd = sv.data();
                let mut out = Vec::with_capacity(g.len());
                for (p, plane) in g.data().chunks(hw).enumerate() {
                    let k = sd[p % c];
                    out.extend(plane.iter().map(|&v| v * k));
                }
                Tensor::from_vec(g.shape(), out).expect("shape")
            });
            let gs = needs[1].then(|| {
                let mut acc = vec![T::zero(); c];
                for (p, (gp, xp)) in g.data().chunks(hw).zip(xv.data().chunks(hw)).enumerate() {
                    acc[p % c] += gp.iter().zip(xp).map(|(&a, &b)| a * b).sum::<T>();
                }
                Tensor::from_vec(&[c], acc).expect("shape")
            });
            vec![gx, gs]
        })
    }

    /// Split channels into halves `(x1, x2)` and return `x1 * x2`.
    pub fn simple_gate(&self, x: &Var<T>) -> Result<Var<T>> {
        let [n, c2, h, w] = x.value().dims4("simple_gate")?;
        ensure!(c2 % 2 == 0, "simple_gate", "channel count {} is odd", c2);
        let c = c2 / 2;
        let block = c * h * w;
        let xd = x.value().data();
        let mut out = Vec::with_capacity(n * block);
        for ni in 0..n {
            let base = ni * 2 * block;
            let (x1, x2) = xd[base..base + 2 * block].split_at(block);
            out.extend(x1.iter().zip(x2).map(|(&a, &b)| a * b));
        }
        let value = Tensor::from_vec(&[n, c, h, w], out)?;
        let xv = x.arc();
        self.record("simple_gate", value, &[x], move |g, _| {
            let xd = xv.data();
            let mut gx = vec![T::zero(); n * 2 * block];
            for ni in 0..n {
                let base = ni * 2 * block;
                let gi = &g.data()[ni * block..(ni + 1) * block];
                let (x1, x2) = xd[base..base + 2 * block].split_at(block);
                let (g1, g2) = gx[base..base + 2 * block].split_at_mut(block);
                for i in 0..block {
                    g1[i] = gi[i] * x2[i];
                    g2[i] = gi[i] * x1[i];
                }
            }
            vec![Some(
                Tensor::from_vec(&[n, 2 * c, h, w], gx).expect("shape"),
            )]
        })
    }

    /// Scalar sum of all elements.
    pub fn sum(&self, x: &Var<T>) -> Result<Var<T>> {
        let value = Tensor::scalar(x.value().sum());
        let shape = x.shape().to_vec();
        self.record("sum", value, &[x], move |g, _| {
            vec![Some(Tensor::full(&shape, g.data()[0]))]
        })
    }

    pub fn mean(&self, x: &Var<T>) -> Result<Var<T>> {
        let n = x.value().len();
        let s = self.sum(x)?;
        self.scale(&s, 1.0 / n as f64)
    }
}
