//! Image operators on NCHW tensors.

use crate::ops::gemm;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let hw = self.cols();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let hw = self.cols();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = (c * self.h + iy as usize) * self.w;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                dx[base + ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Tensor {
    /// 2-D cross-correlation. `self`: `[N,C,H,W]`, `weight`: `[O,C,kh,kw]`, `bias`: `[O]`.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
        assert_eq!(self.rank(), 4, "conv2d input must be NCHW, got {:?}", self.shape());
        assert_eq!(weight.rank(), 4, "conv2d weight must be OCkk");
        let (n, c, h, w) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        let (o, wc, kh, kw) = (weight.dim(0), weight.dim(1), weight.dim(2), weight.dim(3));
        assert_eq!(c, wc, "conv2d channel mismatch: input {c}, weight {wc}");
        assert!(stride >= 1);
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "kernel larger than padded input");
        let geom = ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        };
        let (rows, hw) = (geom.rows(), geom.cols());
        let in_sz = c * h * w;
        let out_sz = o * hw;
        let mut out = vec![0.0; n * out_sz];
        let mut cols = vec![0.0; rows * hw];
        for i in 0..n {
            geom.im2col(&self.data()[i * in_sz..(i + 1) * in_sz], &mut cols);
            let dst = &mut out[i * out_sz..(i + 1) * out_sz];
            gemm(o, rows, hw, weight.data(), false, &cols, false, dst, false);
            if let Some(b) = bias {
                for (oc, &bv) in b.data().iter().enumerate() {
                    dst[oc * hw..(oc + 1) * hw].iter_mut().for_each(|v| *v += bv);
                }
            }
        }

        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            assert_eq!(b.shape(), &[o], "conv2d bias shape");
            parents.push(b.clone());
        }
        let (xc, wcl) = (self.clone(), weight.clone());
        let has_bias = bias.is_some();
        let bias_tracked = bias.is_some_and(|b| b.requires_grad());
        Tensor::from_op(
            out,
            vec![n, o, geom.ho, geom.wo],
            parents,
            Box::new(move |_, g| {
                let mut cols = vec![0.0; rows * hw];
                let mut dcols = vec![0.0; rows * hw];
                let mut gx = xc.requires_grad().then(|| vec![0.0; n * in_sz]);
                let mut gw = wcl.requires_grad().then(|| vec![0.0; o * rows]);
                for i in 0..n {
                    let gi = &g[i * out_sz..(i + 1) * out_sz];
                    if let Some(gw) = gw.as_mut() {
                        geom.im2col(&xc.data()[i * in_sz..(i + 1) * in_sz], &mut cols);
                        gemm(o, hw, rows, gi, false, &cols, true, gw, true);
                    }
                    if let Some(gx) = gx.as_mut() {
                        gemm(rows, o, hw, wcl.data(), true, gi, false, &mut dcols, false);
                        geom.col2im(&dcols, &mut gx[i * in_sz..(i + 1) * in_sz]);
                    }
                }
                let mut grads = vec![gx, gw];
                if has_bias {
                    grads.push(bias_tracked.then(|| {
                        let mut gb = vec![0.0; o];
                        for i in 0..n {
                            for (oc, v) in gb.iter_mut().enumerate() {
                                let s = (i * o + oc) * hw;
                                *v += g[s..s + hw].iter().sum::<f64>();
                            }
                        }
                        gb
                    }));
                }
                grads
            }),
        )
    }

    /// Nearest-neighbour 2x upsampling of an NCHW tensor.
    pub fn upsample2x(&self) -> Tensor {
        assert_eq!(self.rank(), 4, "upsample2x expects NCHW");
        let (n, c, h, w) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        let (h2, w2) = (2 * h, 2 * w);
        let x = self.data();
        let mut out = vec![0.0; n * c * h2 * w2];
        for p in 0..n * c {
            for y in 0..h2 {
                let src = &x[(p * h + y / 2) * w..][..w];
                let dst = &mut out[(p * h2 + y) * w2..][..w2];
                for (xx, v) in dst.iter_mut().enumerate() {
                    *v = src[xx / 2];
                }
            }
        }
        Tensor::from_op(
            out,
            vec![n, c, h2, w2],
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut gx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            gx[(p * h + y / 2) * w + xx / 2] += g[(p * h2 + y) * w2 + xx];
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// 2x2 average pooling with stride 2 on an NCHW tensor (even sides).
    pub fn avg_pool2x(&self) -> Tensor {
        assert_eq!(self.rank(), 4, "avg_pool2x expects NCHW");
        let (n, c, h, w) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2x needs even sides");
        let (h2, w2) = (h / 2, w / 2);
        let x = self.data();
        let mut out = vec![0.0; n * c * h2 * w2];
        for p in 0..n * c {
            for y in 0..h {
                for xx in 0..w {
                    out[(p * h2 + y / 2) * w2 + xx / 2] += 0.25 * x[(p * h + y) * w + xx];
                }
            }
        }
        Tensor::from_op(
            out,
            vec![n, c, h2, w2],
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut gx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    for y in 0..h {
                        for xx in 0..w {
                            gx[(p * h + y) * w + xx] = 0.25 * g[(p * h2 + y / 2) * w2 + xx / 2];
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution.
    fn conv_naive(x: &[f64], shape: [usize; 4], w: &[f64], wshape: [usize; 4], stride: usize, pad: usize) -> Vec<f64> {
        let [n, c, h, wd] = shape;
        let [o, _, kh, kw] = wshape;
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * o * ho * wo];
        for b in 0..n {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = 0.0;
                        for ic in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        s += x[((b * c + ic) * h + iy as usize) * wd + ix as usize]
                                            * w[((oc * c + ic) * kh + ki) * kw + kj];
                                    }
                                }
                            }
                        }
                        out[((b * o + oc) * ho + oy) * wo + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_naive_loops() {
        for &(stride, pad) in &[(1, 1), (2, 1), (1, 0), (2, 0)] {
            let xs: Vec<f64> = (0..2 * 3 * 5 * 6).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.1).collect();
            let ws: Vec<f64> = (0..4 * 3 * 3 * 3).map(|i| ((i * 13 % 7) as f64 - 3.0) * 0.2).collect();
            let x = Tensor::new(xs.clone(), &[2, 3, 5, 6]);
            let w = Tensor::new(ws.clone(), &[4, 3, 3, 3]);
            let y = x.conv2d(&w, None, stride, pad);
            let expected = conv_naive(&xs, [2, 3, 5, 6], &ws, [4, 3, 3, 3], stride, pad);
            assert_eq!(y.numel(), expected.len());
            for (a, b) in y.data().iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn upsample_then_pool_is_identity() {
        let x = Tensor::new((0..2 * 2 * 3 * 3).map(f64::from).collect(), &[2, 2, 3, 3]);
        let y = x.upsample2x().avg_pool2x();
        assert_eq!(y.data(), x.data());
    }
}
