//! Spatial and temporal convolutions, pooling and upsampling.

use rayon::prelude::*;

use super::{BackCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::linalg::{gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
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
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }

    /// Input patch matrix `[cin*kh*kw, ho*wo]` for one image.
    fn im2col<T: Real>(&self, x: &[T]) -> Vec<T> {
        let n = self.hw_out();
        let mut cols = vec![T::zero(); self.k() * n];
        for c in 0..self.cin {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..self.ho {
                        let y = (oy * self.stride + i) as isize - self.pad as isize;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        let src = &x[(c * self.h + y as usize) * self.w..];
                        for ox in 0..self.wo {
                            let xx = (ox * self.stride + j) as isize - self.pad as isize;
                            if xx >= 0 && xx < self.w as isize {
                                dst[oy * self.wo + ox] = src[xx as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Real>(&self, cols: &[T], dx: &mut [T]) {
        let n = self.hw_out();
        for c in 0..self.cin {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..self.ho {
                        let y = (oy * self.stride + i) as isize - self.pad as isize;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        let base = (c * self.h + y as usize) * self.w;
                        for ox in 0..self.wo {
                            let xx = (ox * self.stride + j) as isize - self.pad as isize;
                            if xx >= 0 && xx < self.w as isize {
                                let d = &mut dx[base + xx as usize];
                                *d = *d + src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Sums per-item buffers in item order so results do not depend on scheduling.
fn ordered_sum<T: Real>(parts: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for p in parts {
        for (a, b) in acc.iter_mut().zip(p) {
            *a = *a + b;
        }
    }
    acc
}

impl<T: Real> Tape<T> {
    /// Cross-correlation of `x [B,Cin,H,W]` with `weight [Cout,Cin,kh,kw]`, no bias.
    pub fn conv2d(&mut self, x: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::config(format!(
                "conv2d expects rank-4 input and weight, got {xs:?} and {ws:?}"
            )));
        }
        if xs[1] != ws[1] {
            return Err(Error::config(format!(
                "conv2d: input has {} channels, weight expects {}",
                xs[1], ws[1]
            )));
        }
        if stride == 0 {
            return Err(Error::config("conv2d: stride must be positive"));
        }
        let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::config(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let geom = ConvGeom {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
        };
        let in_sz = cin * h * w;
        let out_sz = cout * geom.hw_out();
        let xd = self.value(x).data();
        let wd = self.value(weight).data();
        let mut out = vec![T::zero(); b * out_sz];
        out.par_chunks_mut(out_sz.max(1))
            .enumerate()
            .for_each(|(bi, o)| {
                let cols = geom.im2col(&xd[bi * in_sz..(bi + 1) * in_sz]);
                gemm_nn(cout, geom.k(), geom.hw_out(), wd, &cols, o);
            });
        let out = Tensor::from_vec(&[b, cout, geom.ho, geom.wo], out)?;
        Ok(self.push_op(
            out,
            &[x, weight],
            Box::new(move |ctx: &BackCtx<'_, T>| {
                let xd = ctx.inputs[0].data();
                let wd = ctx.inputs[1].data();
                let gd = ctx.grad.data();
                let k = geom.k();
                let n = geom.hw_out();
                let (need_x, need_w) = (ctx.needs[0], ctx.needs[1]);
                let parts: Vec<(Vec<T>, Vec<T>)> = (0..b)
                    .into_par_iter()
                    .map(|bi| {
                        let g = &gd[bi * out_sz..(bi + 1) * out_sz];
                        let mut dw = Vec::new();
                        if need_w {
                            let cols = geom.im2col(&xd[bi * in_sz..(bi + 1) * in_sz]);
                            dw = vec![T::zero(); cout * k];
                            gemm_nt(cout, n, k, g, &cols, &mut dw);
                        }
                        let mut dx = Vec::new();
                        if need_x {
                            let mut dcols = vec![T::zero(); k * n];
                            gemm_tn(k, cout, n, wd, g, &mut dcols);
                            dx = vec![T::zero(); in_sz];
                            geom.col2im(&dcols, &mut dx);
                        }
                        (dx, dw)
                    })
                    .collect();
                let (dxs, dws): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
                let gx = need_x.then(|| {
                    Tensor::from_vec(ctx.inputs[0].shape(), dxs.concat()).unwrap()
                });
                let gw = need_w.then(|| {
                    Tensor::from_vec(ctx.inputs[1].shape(), ordered_sum(dws, cout * k)).unwrap()
                });
                vec![gx, gw]
            }),
        ))
    }

    /// Three-tap dilated convolution along time.
    ///
    /// `x` is `[T,C,h,w]` or batched `[B,T,C,h,w]`; `weight` is `[Cout,C,3]`.
    /// Tap `j` reads frame `t + (j-1)*dilation`; frames outside `[0,T)` are zero.
    pub fn temporal_conv1d(&mut self, x: Var, weight: Var, dilation: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        let (b, t, c, h, w) = match *xs.as_slice() {
            [t, c, h, w] => (1, t, c, h, w),
            [b, t, c, h, w] => (b, t, c, h, w),
            _ => {
                return Err(Error::config(format!(
                    "temporal_conv1d expects [T,C,h,w] or [B,T,C,h,w], got {xs:?}"
                )))
            }
        };
        if ws.len() != 3 || ws[1] != c || ws[2] != 3 {
            return Err(Error::config(format!(
                "temporal_conv1d: weight {ws:?} incompatible with {c} input channels"
            )));
        }
        if t == 0 {
            return Err(Error::config("temporal_conv1d: empty time axis"));
        }
        let cout = ws[0];
        let s = h * w;
        let wd = self.value(weight).data();
        let taps: Vec<Vec<T>> = (0..3)
            .map(|j| {
                (0..cout * c)
                    .map(|idx| wd[idx * 3 + j])
                    .collect()
            })
            .collect();
        let in_frame = c * s;
        let out_frame = cout * s;
        let xd = self.value(x).data();
        let src = |bi: usize, tt: isize| -> Option<usize> {
            (tt >= 0 && (tt as usize) < t).then(|| (bi * t + tt as usize) * in_frame)
        };
        let mut out = vec![T::zero(); b * t * out_frame];
        out.par_chunks_mut(out_frame.max(1))
            .enumerate()
            .for_each(|(bt, o)| {
                let (bi, ti) = (bt / t, bt % t);
                for (j, tap) in taps.iter().enumerate() {
                    let tt = ti as isize + (j as isize - 1) * dilation as isize;
                    if let Some(off) = src(bi, tt) {
                        gemm_nn(cout, c, s, tap, &xd[off..off + in_frame], o);
                    }
                }
            });
        let mut out_shape = xs.clone();
        let rank = out_shape.len();
        out_shape[rank - 3] = cout;
        let out = Tensor::from_vec(&out_shape, out)?;
        Ok(self.push_op(
            out,
            &[x, weight],
            Box::new(move |ctx: &BackCtx<'_, T>| {
                let xd = ctx.inputs[0].data();
                let gd = ctx.grad.data();
                let src = |bi: usize, tt: isize| -> Option<usize> {
                    (tt >= 0 && (tt as usize) < t).then(|| (bi * t + tt as usize) * in_frame)
                };
                let gx = ctx.needs[0].then(|| {
                    // dx[t'] = sum_j W_j^T g[t' - (j-1)d]
                    let mut dx = vec![T::zero(); b * t * in_frame];
                    dx.par_chunks_mut(in_frame.max(1))
                        .enumerate()
                        .for_each(|(bt, d)| {
                            let (bi, ti) = (bt / t, bt % t);
                            for (j, tap) in taps.iter().enumerate() {
                                let to = ti as isize - (j as isize - 1) * dilation as isize;
                                if to >= 0 && (to as usize) < t {
                                    let g = &gd[(bi * t + to as usize) * out_frame..][..out_frame];
                                    gemm_tn(c, cout, s, tap, g, d);
                                }
                            }
                        });
                    Tensor::from_vec(ctx.inputs[0].shape(), dx).unwrap()
                });
                let gw = ctx.needs[1].then(|| {
                    let mut dw = vec![T::zero(); cout * c * 3];
                    let mut dtap = vec![T::zero(); cout * c];
                    for j in 0..3 {
                        dtap.iter_mut().for_each(|v| *v = T::zero());
                        for bi in 0..b {
                            for ti in 0..t {
                                let tt = ti as isize + (j as isize - 1) * dilation as isize;
                                if let Some(off) = src(bi, tt) {
                                    let g = &gd[(bi * t + ti) * out_frame..][..out_frame];
                                    gemm_nt(cout, s, c, g, &xd[off..off + in_frame], &mut dtap);
                                }
                            }
                        }
                        for (idx, &v) in dtap.iter().enumerate() {
                            dw[idx * 3 + j] = v;
                        }
                    }
                    Tensor::from_vec(&[cout, c, 3], dw).unwrap()
                });
                vec![gx, gw]
            }),
        ))
    }

    /// Max pooling over `[N,C,H,W]`; padded cells never win.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let &[n, c, h, w] = xs.as_slice() else {
            return Err(Error::config(format!("max_pool2d expects rank 4, got {xs:?}")));
        };
        if kernel == 0 || stride == 0 || kernel > h + 2 * padding || kernel > w + 2 * padding {
            return Err(Error::config(format!(
                "max_pool2d: kernel {kernel} stride {stride} invalid for {h}x{w}"
            )));
        }
        if padding >= kernel {
            return Err(Error::config("max_pool2d: padding must be smaller than kernel"));
        }
        let ho = (h + 2 * padding - kernel) / stride + 1;
        let wo = (w + 2 * padding - kernel) / stride + 1;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut best_idx = usize::MAX;
                    for i in 0..kernel {
                        let y = (oy * stride + i) as isize - padding as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for j in 0..kernel {
                            let xx = (ox * stride + j) as isize - padding as isize;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let idx = base + y as usize * w + xx as usize;
                            if best_idx == usize::MAX || xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, ho, wo], out)?;
        Ok(self.push_op(
            out,
            &[x],
            Box::new(move |ctx: &BackCtx<'_, T>| {
                let mut g = Tensor::zeros(&xs);
                let gd = g.data_mut();
                for (&i, &v) in argmax.iter().zip(ctx.grad.data()) {
                    gd[i] = gd[i] + v;
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Non-overlapping average pooling with a `kh x kw` window over `[..., H, W]`.
    pub fn avg_pool2d(&mut self, x: Var, kh: usize, kw: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::config("avg_pool2d expects at least rank 2"));
        }
        let r = xs.len();
        let (h, w) = (xs[r - 2], xs[r - 1]);
        if kh == 0 || kw == 0 || h % kh != 0 || w % kw != 0 {
            return Err(Error::config(format!(
                "avg_pool2d: window {kh}x{kw} does not tile {h}x{w}"
            )));
        }
        let (ho, wo) = (h / kh, w / kw);
        let planes: usize = xs[..r - 2].iter().product();
        let inv = T::one() / T::of((kh * kw) as f64);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); planes * ho * wo];
        for p in 0..planes {
            for y in 0..h {
                for xx in 0..w {
                    let o = (p * ho + y / kh) * wo + xx / kw;
                    out[o] = out[o] + xd[(p * h + y) * w + xx];
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
        let mut out_shape = xs.clone();
        out_shape[r - 2] = ho;
        out_shape[r - 1] = wo;
        let out = Tensor::from_vec(&out_shape, out)?;
        Ok(self.push_op(
            out,
            &[x],
            Box::new(move |ctx: &BackCtx<'_, T>| {
                let gd = ctx.grad.data();
                let mut g = vec![T::zero(); planes * h * w];
                for p in 0..planes {
                    for y in 0..h {
                        for xx in 0..w {
                            g[(p * h + y) * w + xx] = gd[(p * ho + y / kh) * wo + xx / kw] * inv;
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&xs, g).unwrap())]
            }),
        ))
    }

    /// Nearest-neighbour upsampling of the trailing two axes by integer factors.
    pub fn upsample_nearest(&mut self, x: Var, fh: usize, fw: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || fh == 0 || fw == 0 {
            return Err(Error::config("upsample_nearest: need rank >= 2 and positive factors"));
        }
        let r = xs.len();
        let (h, w) = (xs[r - 2], xs[r - 1]);
        let (ho, wo) = (h * fh, w * fw);
        let planes: usize = xs[..r - 2].iter().product();
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            for y in 0..ho {
                for xx in 0..wo {
                    out.push(xd[(p * h + y / fh) * w + xx / fw]);
                }
            }
        }
        let mut out_shape = xs.clone();
        out_shape[r - 2] = ho;
        out_shape[r - 1] = wo;
        let out = Tensor::from_vec(&out_shape, out)?;
        Ok(self.push_op(
            out,
            &[x],
            Box::new(move |ctx: &BackCtx<'_, T>| {
                let gd = ctx.grad.data();
                let mut g = vec![T::zero(); planes * h * w];
                for p in 0..planes {
                    for y in 0..ho {
                        for xx in 0..wo {
                            let i = (p * h + y / fh) * w + xx / fw;
                            g[i] = g[i] + gd[(p * ho + y) * wo + xx];
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&xs, g).unwrap())]
            }),
        ))
    }
}
