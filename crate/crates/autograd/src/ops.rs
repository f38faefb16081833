//! Differentiable operations on [`Tensor`].
//!
//! Binary elementwise operations broadcast numpy-style (shapes aligned on the
//! right, size-1 axes stretch). Axis reductions keep or drop the reduced axis
//! on request.

use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;

use crate::tensor::{numel, Tensor};

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            panic!("cannot broadcast shapes {a:?} and {b:?}");
        };
    }
    out
}

/// For each flat index of `out`, the flat index into a tensor of `shape` broadcast to `out`.
fn broadcast_map(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    let n = numel(out);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        map.push(src);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            src -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// `(outer, len, inner)` decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for shape {shape:?}");
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keepdim {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

/// `c (+)= op(a) * op(b)` with row-major storage; `ta`/`tb` read the operand transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked above and the strides address only
    // elements inside those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn binary<F, GA, GB>(a: &Tensor, b: &Tensor, f: F, ga: GA, gb: GB) -> Tensor
where
    F: Fn(f64, f64) -> f64,
    GA: Fn(f64, f64, f64) -> f64 + 'static,
    GB: Fn(f64, f64, f64) -> f64 + 'static,
{
    let out_shape = broadcast_shape(a.shape(), b.shape());
    let n = numel(&out_shape);
    let map_a = (a.shape() != out_shape.as_slice()).then(|| Rc::new(broadcast_map(a.shape(), &out_shape)));
    let map_b = (b.shape() != out_shape.as_slice()).then(|| Rc::new(broadcast_map(b.shape(), &out_shape)));
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<f64> = match (&map_a, &map_b) {
        (None, None) => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        _ => (0..n)
            .map(|i| {
                let ia = map_a.as_ref().map_or(i, |m| m[i]);
                let ib = map_b.as_ref().map_or(i, |m| m[i]);
                f(ad[ia], bd[ib])
            })
            .collect(),
    };
    let (ac, bc) = (a.clone(), b.clone());
    Tensor::from_op(
        data,
        out_shape,
        vec![a.clone(), b.clone()],
        Box::new(move |out, g| {
            let (ad, bd) = (ac.data(), bc.data());
            let idx = |m: &Option<Rc<Vec<usize>>>, i: usize| m.as_ref().map_or(i, |m| m[i]);
            let grad_a = ac.requires_grad().then(|| {
                let mut ga_v = vec![0.0; ac.numel()];
                for i in 0..g.len() {
                    let (ia, ib) = (idx(&map_a, i), idx(&map_b, i));
                    ga_v[ia] += g[i] * ga(ad[ia], bd[ib], out[i]);
                }
                ga_v
            });
            let grad_b = bc.requires_grad().then(|| {
                let mut gb_v = vec![0.0; bc.numel()];
                for i in 0..g.len() {
                    let (ia, ib) = (idx(&map_a, i), idx(&map_b, i));
                    gb_v[ib] += g[i] * gb(ad[ia], bd[ib], out[i]);
                }
                gb_v
            });
            vec![grad_a, grad_b]
        }),
    )
}

fn unary<F, D>(a: &Tensor, f: F, df: D) -> Tensor
where
    F: Fn(f64) -> f64,
    D: Fn(f64, f64) -> f64 + 'static,
{
    let data: Vec<f64> = a.data().iter().map(|&x| f(x)).collect();
    let ac = a.clone();
    Tensor::from_op(
        data,
        a.shape().to_vec(),
        vec![a.clone()],
        Box::new(move |out, g| {
            let x = ac.data();
            vec![Some((0..g.len()).map(|i| g[i] * df(x[i], out[i])).collect())]
        }),
    )
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus_f64(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        binary(self, other, |x, y| x + y, |_, _, _| 1.0, |_, _, _| 1.0)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        binary(self, other, |x, y| x - y, |_, _, _| 1.0, |_, _, _| -1.0)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        binary(self, other, |x, y| x * y, |_, y, _| y, |x, _, _| x)
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        binary(self, other, |x, y| x / y, |_, y, _| 1.0 / y, |x, y, _| -x / (y * y))
    }

    /// Elementwise maximum; ties send the gradient to `self`.
    pub fn maximum(&self, other: &Tensor) -> Tensor {
        binary(
            self,
            other,
            f64::max,
            |x, y, _| if x >= y { 1.0 } else { 0.0 },
            |x, y, _| if x >= y { 0.0 } else { 1.0 },
        )
    }

    pub fn neg(&self) -> Tensor {
        unary(self, |x| -x, |_, _| -1.0)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        unary(self, move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        unary(self, move |x| x + s, |_, _| 1.0)
    }

    pub fn exp(&self) -> Tensor {
        unary(self, f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        unary(self, f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Tensor {
        unary(self, f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(&self) -> Tensor {
        unary(self, |x| x * x, |x, _| 2.0 * x)
    }

    /// Subgradient 0 at the origin.
    pub fn abs(&self) -> Tensor {
        unary(self, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn tanh(&self) -> Tensor {
        unary(self, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(self, sigmoid_f64, |_, y| y * (1.0 - y))
    }

    pub fn relu(&self) -> Tensor {
        unary(self, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        unary(
            self,
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    /// `max(x, floor)`; the gradient passes only where `x > floor`.
    pub fn clamp_min(&self, floor: f64) -> Tensor {
        unary(self, move |x| x.max(floor), move |x, _| if x > floor { 1.0 } else { 0.0 })
    }

    pub fn softplus(&self) -> Tensor {
        unary(self, softplus_f64, |x, _| sigmoid_f64(x))
    }

    /// `ln σ(x)`, stable for large |x|.
    pub fn log_sigmoid(&self) -> Tensor {
        unary(self, |x| -softplus_f64(-x), |x, _| sigmoid_f64(-x))
    }

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            vec![s],
            vec![],
            vec![self.clone()],
            Box::new(move |_, g| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Tensor {
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        Tensor::from_op(
            out,
            reduced_shape(self.shape(), axis, keepdim),
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        gx[(o * len + l) * inner..(o * len + l + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Tensor {
        let len = self.dim(axis) as f64;
        self.sum_axis(axis, keepdim).scale(1.0 / len)
    }

    /// Maximum along `axis`; the gradient goes to the first maximal element.
    pub fn max_axis(&self, axis: usize, keepdim: bool) -> Tensor {
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                for l in 0..len {
                    let v = x[(o * len + l) * inner + i];
                    if v > out[o * inner + i] || l == 0 {
                        out[o * inner + i] = v;
                        arg[o * inner + i] = l;
                    }
                }
            }
        }
        Tensor::from_op(
            out,
            reduced_shape(self.shape(), axis, keepdim),
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        gx[(o * len + arg[o * inner + i]) * inner + i] += g[o * inner + i];
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn logsumexp(&self, axis: usize, keepdim: bool) -> Tensor {
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| x[(o * len + l) * inner + i];
                let m = (0..len).map(at).fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = (0..len).map(|l| (at(l) - m).exp()).sum();
                out[o * inner + i] = m + s.ln();
            }
        }
        let xc = self.clone();
        Tensor::from_op(
            out,
            reduced_shape(self.shape(), axis, keepdim),
            vec![self.clone()],
            Box::new(move |lse, g| {
                let x = xc.data();
                let mut gx = vec![0.0; x.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let oi = o * inner + i;
                        for l in 0..len {
                            let idx = (o * len + l) * inner + i;
                            gx[idx] = g[oi] * (x[idx] - lse[oi]).exp();
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn log_softmax(&self, axis: usize) -> Tensor {
        self.sub(&self.logsumexp(axis, true))
    }

    pub fn softmax(&self, axis: usize) -> Tensor {
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| x[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for l in 0..len {
                    let e = (x[idx(l)] - m).exp();
                    out[idx(l)] = e;
                    s += e;
                }
                for l in 0..len {
                    out[idx(l)] /= s;
                }
            }
        }
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |y, g| {
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                        for l in 0..len {
                            gx[idx(l)] = y[idx(l)] * (g[idx(l)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            numel(shape),
            self.numel(),
            "cannot reshape {:?} into {:?}",
            self.shape(),
            shape
        );
        Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|_, g| vec![Some(g.to_vec())]),
        )
    }

    pub fn unsqueeze(&self, axis: usize) -> Tensor {
        let mut s = self.shape().to_vec();
        s.insert(axis, 1);
        self.reshape(&s)
    }

    pub fn flatten_from(&self, axis: usize) -> Tensor {
        let mut s = self.shape()[..axis].to_vec();
        s.push(self.shape()[axis..].iter().product());
        self.reshape(&s)
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Tensor {
        let rank = self.rank();
        assert_eq!(perm.len(), rank, "permutation length mismatch");
        let in_shape = self.shape();
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let mut in_strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
        }
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        // map[out_flat] = in_flat
        let n = self.numel();
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        let mut src = 0usize;
        for _ in 0..n {
            map.push(src);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                src += src_strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                src -= src_strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        let x = self.data();
        let data: Vec<f64> = map.iter().map(|&s| x[s]).collect();
        Tensor::from_op(
            data,
            out_shape,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut gx = vec![0.0; g.len()];
                for (o, &s) in map.iter().enumerate() {
                    gx[s] = g[o];
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn transpose(&self, a0: usize, a1: usize) -> Tensor {
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        perm.swap(a0, a1);
        self.permute(&perm)
    }

    /// Copy of `self` broadcast to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        let out = broadcast_shape(self.shape(), shape);
        assert_eq!(out.as_slice(), shape, "cannot broadcast {:?} to {:?}", self.shape(), shape);
        let map = broadcast_map(self.shape(), shape);
        let x = self.data();
        let data: Vec<f64> = map.iter().map(|&s| x[s]).collect();
        let n_in = self.numel();
        Tensor::from_op(
            data,
            shape.to_vec(),
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut gx = vec![0.0; n_in];
                for (o, &s) in map.iter().enumerate() {
                    gx[s] += g[o];
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Slice `len` entries along `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let (outer, full, inner) = split_axis(self.shape(), axis);
        assert!(start + len <= full, "narrow {start}+{len} exceeds axis size {full}");
        let x = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&x[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Tensor::from_op(
            data,
            shape,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut gx = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    gx[(o * full + start) * inner..(o * full + start + len) * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Select entries `indices` along axis 0 (rows may repeat).
    pub fn index_select(&self, indices: &[usize]) -> Tensor {
        let rows = self.dim(0);
        let inner: usize = self.shape()[1..].iter().product();
        let x = self.data();
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &r in indices {
            assert!(r < rows, "index {r} out of range for {rows} rows");
            data.extend_from_slice(&x[r * inner..(r + 1) * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = indices.len();
        let indices = indices.to_vec();
        Tensor::from_op(
            data,
            shape,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut gx = vec![0.0; rows * inner];
                for (i, &r) in indices.iter().enumerate() {
                    gx[r * inner..(r + 1) * inner]
                        .iter_mut()
                        .zip(&g[i * inner..(i + 1) * inner])
                        .for_each(|(a, b)| *a += b);
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn cat(parts: &[Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty(), "cat of zero tensors");
        let base = parts[0].shape();
        for p in parts {
            assert_eq!(p.rank(), base.len(), "cat rank mismatch");
            for (ax, (&a, &b)) in p.shape().iter().zip(base).enumerate() {
                assert!(ax == axis || a == b, "cat shape mismatch {:?} vs {:?}", p.shape(), base);
            }
        }
        let (outer, _, inner) = split_axis(base, axis);
        let lens: Vec<usize> = parts.iter().map(|p| p.dim(axis)).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = base.to_vec();
        shape[axis] = total;
        let flags: Vec<bool> = parts.iter().map(|p| p.requires_grad()).collect();
        Tensor::from_op(
            data,
            shape,
            parts.to_vec(),
            Box::new(move |_, g| {
                let mut offset = 0;
                let mut grads = Vec::with_capacity(lens.len());
                for (&l, &tracked) in lens.iter().zip(&flags) {
                    if tracked {
                        let mut gp = Vec::with_capacity(outer * l * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[start..start + l * inner]);
                        }
                        grads.push(Some(gp));
                    } else {
                        grads.push(None);
                    }
                    offset += l;
                }
                grads
            }),
        )
    }

    pub fn stack(parts: &[Tensor], axis: usize) -> Tensor {
        let expanded: Vec<Tensor> = parts.iter().map(|p| p.unsqueeze(axis)).collect();
        Tensor::cat(&expanded, axis)
    }

    /// Matrix product. Supports `[m,k]×[k,n]`, batched `[b,m,k]×[b,k,n]`,
    /// and `[b,m,k]×[k,n]` (shared right operand).
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        match (self.rank(), other.rank()) {
            (2, 2) => matmul2(self, other),
            (3, 2) => {
                let (b, m, k) = (self.dim(0), self.dim(1), self.dim(2));
                matmul2(&self.reshape(&[b * m, k]), other).reshape(&[b, m, other.dim(1)])
            }
            (3, 3) => bmm(self, other),
            (ra, rb) => panic!("matmul unsupported for ranks {ra} and {rb}"),
        }
    }

    /// Cosine similarity along `axis`; zero vectors give 0. Identical nonzero
    /// vectors give exactly 1.
    pub fn cosine_similarity(&self, other: &Tensor, axis: usize, keepdim: bool) -> Tensor {
        let dot = self.mul(other).sum_axis(axis, keepdim);
        let na = self.square().sum_axis(axis, keepdim);
        let nb = other.square().sum_axis(axis, keepdim);
        let denom = na.mul(&nb).clamp_min(1e-24).sqrt();
        dot.div(&denom)
    }

    /// Divide by the L2 norm along `axis` (with `eps` inside the root).
    pub fn l2_normalize(&self, axis: usize, eps: f64) -> Tensor {
        let norm = self.square().sum_axis(axis, true).add_scalar(eps).sqrt();
        self.div(&norm)
    }
}

fn matmul2(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.dim(0), a.dim(1));
    let (k2, n) = (b.dim(0), b.dim(1));
    assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", a.shape(), b.shape());
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    let (ac, bc) = (a.clone(), b.clone());
    Tensor::from_op(
        out,
        vec![m, n],
        vec![a.clone(), b.clone()],
        Box::new(move |_, g| {
            let ga = ac.requires_grad().then(|| {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, false, bc.data(), true, &mut ga, false);
                ga
            });
            let gb = bc.requires_grad().then(|| {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, ac.data(), true, g, false, &mut gb, false);
                gb
            });
            vec![ga, gb]
        }),
    )
}

fn bmm(a: &Tensor, b: &Tensor) -> Tensor {
    let (bs, m, k) = (a.dim(0), a.dim(1), a.dim(2));
    let (bs2, k2, n) = (b.dim(0), b.dim(1), b.dim(2));
    assert_eq!(bs, bs2, "bmm batch mismatch");
    assert_eq!(k, k2, "bmm inner dims {:?} x {:?}", a.shape(), b.shape());
    let mut out = vec![0.0; bs * m * n];
    for i in 0..bs {
        gemm(
            m,
            k,
            n,
            &a.data()[i * m * k..(i + 1) * m * k],
            false,
            &b.data()[i * k * n..(i + 1) * k * n],
            false,
            &mut out[i * m * n..(i + 1) * m * n],
            false,
        );
    }
    let (ac, bc) = (a.clone(), b.clone());
    Tensor::from_op(
        out,
        vec![bs, m, n],
        vec![a.clone(), b.clone()],
        Box::new(move |_, g| {
            let ga = ac.requires_grad().then(|| {
                let mut ga = vec![0.0; bs * m * k];
                for i in 0..bs {
                    gemm(
                        m,
                        n,
                        k,
                        &g[i * m * n..(i + 1) * m * n],
                        false,
                        &bc.data()[i * k * n..(i + 1) * k * n],
                        true,
                        &mut ga[i * m * k..(i + 1) * m * k],
                        false,
                    );
                }
                ga
            });
            let gb = bc.requires_grad().then(|| {
                let mut gb = vec![0.0; bs * k * n];
                for i in 0..bs {
                    gemm(
                        k,
                        m,
                        n,
                        &ac.data()[i * m * k..(i + 1) * m * k],
                        true,
                        &g[i * m * n..(i + 1) * m * n],
                        false,
                        &mut gb[i * k * n..(i + 1) * k * n],
                        false,
                    );
                }
                gb
            });
            vec![ga, gb]
        }),
    )
}

// Only reference receivers: a by-value impl would shadow the inherent
// `&self` methods of the same name during method resolution.
macro_rules! impl_binop {
    ($trait:ident, $method:ident) => {
        impl $trait<&Tensor> for &Tensor {
            type Output = Tensor;
            fn $method(self, rhs: &Tensor) -> Tensor {
                Tensor::$method(self, rhs)
            }
        }
        impl $trait<Tensor> for &Tensor {
            type Output = Tensor;
            fn $method(self, rhs: Tensor) -> Tensor {
                Tensor::$method(self, &rhs)
            }
        }
    };
}

impl_binop!(Add, add);
impl_binop!(Sub, sub);
impl_binop!(Mul, mul);
impl_binop!(Div, div);

impl Neg for &Tensor {
    type Output = Tensor;
    fn neg(self) -> Tensor {
        Tensor::neg(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_map_matches_manual_indexing() {
        let map = broadcast_map(&[3, 1], &[2, 3, 4]);
        for b in 0..2 {
            for i in 0..3 {
                for j in 0..4 {
                    assert_eq!(map[(b * 3 + i) * 4 + j], i);
                }
            }
        }
    }

    #[test]
    fn broadcast_add_and_gradient_reduction() {
        let a = Tensor::leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let b = Tensor::leaf(vec![10.0, 20.0, 30.0], &[3]);
        let y = a.add(&b);
        assert_eq!(y.data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let g = y.sum_all().backward();
        assert_eq!(g.get(&b).unwrap(), &[2.0, 2.0, 2.0]);
        assert_eq!(g.get(&a).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn permute_round_trip() {
        let a = Tensor::new((0..24).map(f64::from).collect(), &[2, 3, 4]);
        let p = a.permute(&[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        // p[k, i, j] = a[i, j, k]
        assert_eq!(p.data()[(1 * 2 + 1) * 3 + 2], a.data()[(1 * 3 + 2) * 4 + 1]);
        let back = p.permute(&[1, 2, 0]);
        assert_eq!(back.data(), a.data());
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let b = Tensor::new(vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0], &[3, 2]);
        assert_eq!(a.matmul(&b).data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn cosine_of_identical_vectors_is_one() {
        let a = Tensor::new(vec![0.3, -1.7, 2.9, 0.01], &[1, 4]);
        assert_eq!(a.cosine_similarity(&a, 1, false).item(), 1.0);
        let z = Tensor::zeros(&[1, 4]);
        assert_eq!(a.cosine_similarity(&z, 1, false).item(), 0.0);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let a = Tensor::new(vec![1.0, 2.0, 3.0, -1.0, 0.0, 1000.0], &[2, 3]);
        let s = a.softmax(1);
        for r in 0..2 {
            let sum: f64 = s.data()[r * 3..r * 3 + 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
