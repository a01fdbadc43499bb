use super::{BackCtx, Var};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    /// Output columns `lo..hi` whose input column `ox·stride + kx − pad` is in range.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let ConvGeom { w, stride, pad, wo, .. } = *self;
        let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
        let hi = if w + pad > kx { (w + pad - kx).div_ceil(stride).min(wo) } else { 0 };
        (lo, hi.max(lo))
    }

    /// Unfolds `n` samples into `[ci·k·k, n·ho·wo]`, sample-major within a row.
    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let ConvGeom { n, ci, h, w, k, stride, pad, ho, wo } = *self;
        let hw_o = ho * wo;
        let row_len = n * hw_o;
        for c in 0..ci {
            for ky in 0..k {
                for kx in 0..k {
                    let r = (c * k + ky) * k + kx;
                    let (lo, hi) = self.valid_cols(kx);
                    for i in 0..n {
                        let plane = &x[(i * ci + c) * h * w..(i * ci + c + 1) * h * w];
                        let base = r * row_len + i * hw_o;
                        for oy in 0..ho {
                            let dst = &mut cols[base + oy * wo..base + (oy + 1) * wo];
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize || lo >= hi {
                                dst.fill(T::zero());
                                continue;
                            }
                            let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                            dst[..lo].fill(T::zero());
                            dst[hi..].fill(T::zero());
                            let off = kx as isize - pad as isize;
                            if stride == 1 {
                                let a = (lo as isize + off) as usize;
                                dst[lo..hi].copy_from_slice(&src[a..a + hi - lo]);
                            } else {
                                for (ox, d) in dst[lo..hi].iter_mut().enumerate() {
                                    *d = src[(ox + lo) * stride + kx - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], x: &mut [T]) {
        let ConvGeom { n, ci, h, w, k, stride, pad, ho, wo } = *self;
        let hw_o = ho * wo;
        let row_len = n * hw_o;
        for c in 0..ci {
            for ky in 0..k {
                for kx in 0..k {
                    let r = (c * k + ky) * k + kx;
                    let (lo, hi) = self.valid_cols(kx);
                    if lo >= hi {
                        continue;
                    }
                    for i in 0..n {
                        let plane = &mut x[(i * ci + c) * h * w..(i * ci + c + 1) * h * w];
                        let base = r * row_len + i * hw_o;
                        for oy in 0..ho {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                            let src = &cols[base + oy * wo + lo..base + oy * wo + hi];
                            if stride == 1 {
                                let a = lo + kx - pad;
                                for (d, &v) in dst[a..a + hi - lo].iter_mut().zip(src) {
                                    *d += v;
                                }
                            } else {
                                for (ox, &v) in src.iter().enumerate() {
                                    dst[(ox + lo) * stride + kx - pad] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    /// 2-D convolution of `[N, Ci, H, W]` with `[Co, Ci, k, k]` weights.
    pub fn conv2d(&self, weight: &Var<'t, T>, stride: usize, pad: usize) -> Var<'t, T> {
        let x = self.value();
        let wt = weight.value();
        let (n, ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (co, wci, k) = (wt.shape()[0], wt.shape()[1], wt.shape()[2]);
        assert_eq!(wci, ci, "conv2d input channels");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        // one sample at a time keeps the unfolded columns in cache
        let geom = ConvGeom { n: 1, ci, h, w, k, stride, pad, ho, wo };
        let ckk = ci * k * k;
        let (in_len, out_len, hw_o) = (ci * h * w, co * ho * wo, ho * wo);
        let mut out = vec![T::zero(); n * out_len];
        let mut cols = vec![T::zero(); ckk * hw_o];
        for i in 0..n {
            geom.im2col(&x.data()[i * in_len..(i + 1) * in_len], &mut cols);
            T::gemm(
                co, ckk, hw_o, wt.data(), ckk as isize, 1, &cols, hw_o as isize, 1, T::zero(),
                &mut out[i * out_len..(i + 1) * out_len], hw_o as isize, 1,
            );
        }
        let v = Tensor::from_vec(&[n, co, ho, wo], out).unwrap();
        self.tape
            .record(v, &[self.id, weight.id], move |c: &BackCtx<'_, T>| {
                let (x, wt, g) = (c.inputs[0].data(), c.inputs[1].data(), c.grad.data());
                let mut gx = c.needs[0].then(|| vec![T::zero(); n * in_len]);
                let mut gw = c.needs[1].then(|| vec![T::zero(); co * ckk]);
                let mut cols = vec![T::zero(); ckk * hw_o];
                for i in 0..n {
                    let gi = &g[i * out_len..(i + 1) * out_len];
                    if let Some(gw) = gw.as_mut() {
                        geom.im2col(&x[i * in_len..(i + 1) * in_len], &mut cols);
                        // dW += dY · colsᵀ
                        T::gemm(
                            co, hw_o, ckk, gi, hw_o as isize, 1, &cols, 1, hw_o as isize, T::one(), gw,
                            ckk as isize, 1,
                        );
                    }
                    if let Some(gx) = gx.as_mut() {
                        T::gemm(
                            ckk, co, hw_o, wt, 1, ckk as isize, gi, hw_o as isize, 1, T::zero(), &mut cols,
                            hw_o as isize, 1,
                        );
                        geom.col2im(&cols, &mut gx[i * in_len..(i + 1) * in_len]);
                    }
                }
                vec![
                    gx.map(|g| Tensor::from_vec(c.inputs[0].shape(), g).unwrap()),
                    gw.map(|g| Tensor::from_vec(c.inputs[1].shape(), g).unwrap()),
                ]
            })
    }

    /// Adds `[C]` per channel, or `[N, C]` per sample and channel, to `[N, C, H, W]`.
    pub fn add_channels(&self, bias: &Var<'t, T>) -> Var<'t, T> {
        let x = self.value();
        let b = bias.value();
        let (n, ch) = (x.shape()[0], x.shape()[1]);
        let hw: usize = x.shape()[2..].iter().product();
        let per_sample = b.len() == n * ch && b.shape().len() == 2;
        assert!(per_sample || b.len() == ch, "add_channels bias layout");
        let idx = move |i: usize, c: usize| if per_sample { i * ch + c } else { c };
        let mut out = (*x).clone();
        for (blk, plane) in out.data_mut().chunks_mut(hw).enumerate() {
            let bv = b.data()[idx(blk / ch, blk % ch)];
            plane.iter_mut().for_each(|v| *v += bv);
        }
        self.tape
            .record(out, &[self.id, bias.id], move |c: &BackCtx<'_, T>| {
                let gb = c.needs[1].then(|| {
                    let mut gb = Tensor::zeros(c.inputs[1].shape());
                    for (blk, plane) in c.grad.data().chunks(hw).enumerate() {
                        gb.data_mut()[idx(blk / ch, blk % ch)] += plane.iter().copied().sum::<T>();
                    }
                    gb
                });
                vec![Some(c.grad.clone()), gb]
            })
    }

    /// 2×2 average pooling.
    pub fn avg_pool2(&self) -> Var<'t, T> {
        let x = self.value();
        let (n, ch, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (ho, wo) = (h / 2, w / 2);
        let quarter = lit::<T>(0.25);
        let mut out = vec![T::zero(); n * ch * ho * wo];
        for (p, dst) in out.chunks_mut(ho * wo).enumerate() {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let i = 2 * oy * w + 2 * ox;
                    dst[oy * wo + ox] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
                }
            }
        }
        let v = Tensor::from_vec(&[n, ch, ho, wo], out).unwrap();
        self.tape.record(v, &[self.id], move |c: &BackCtx<'_, T>| {
            let mut gx = vec![T::zero(); n * ch * h * w];
            for (p, src) in c.grad.data().chunks(ho * wo).enumerate() {
                let dst = &mut gx[p * h * w..(p + 1) * h * w];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let g = src[oy * wo + ox] * quarter;
                        let i = 2 * oy * w + 2 * ox;
                        dst[i] += g;
                        dst[i + 1] += g;
                        dst[i + w] += g;
                        dst[i + w + 1] += g;
                    }
                }
            }
            vec![Some(Tensor::from_vec(c.inputs[0].shape(), gx).unwrap())]
        })
    }

    /// Global average over the spatial axes, `[N, C, H, W] → [N, C]`.
    pub fn mean_spatial(&self) -> Var<'t, T> {
        let x = self.value();
        let (n, ch) = (x.shape()[0], x.shape()[1]);
        let hw: usize = x.shape()[2..].iter().product();
        let inv = lit::<T>(1.0 / hw as f64);
        let out: Vec<T> = x.data().chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let v = Tensor::from_vec(&[n, ch], out).unwrap();
        self.tape.record(v, &[self.id], move |c: &BackCtx<'_, T>| {
            let mut gx = Vec::with_capacity(n * ch * hw);
            for &g in c.grad.data() {
                gx.extend(std::iter::repeat_n(g * inv, hw));
            }
            vec![Some(Tensor::from_vec(c.inputs[0].shape(), gx).unwrap())]
        })
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&self) -> Var<'t, T> {
        let x = self.value();
        let (n, ch, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (ho, wo) = (h * 2, w * 2);
        let mut out = vec![T::zero(); n * ch * ho * wo];
        for (p, dst) in out.chunks_mut(ho * wo).enumerate() {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    dst[oy * wo + ox] = src[(oy / 2) * w + ox / 2];
                }
            }
        }
        let v = Tensor::from_vec(&[n, ch, ho, wo], out).unwrap();
        self.tape.record(v, &[self.id], move |c: &BackCtx<'_, T>| {
            let mut gx = vec![T::zero(); n * ch * h * w];
            for (p, src) in c.grad.data().chunks(ho * wo).enumerate() {
                let dst = &mut gx[p * h * w..(p + 1) * h * w];
                for oy in 0..ho {
                    for ox in 0..wo {
                        dst[(oy / 2) * w + ox / 2] += src[oy * wo + ox];
                    }
                }
            }
            vec![Some(Tensor::from_vec(c.inputs[0].shape(), gx).unwrap())]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing::check_grad;
    use super::super::Tape;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rnd(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Direct nested-loop convolution.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
        let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (co, k) = (w.shape()[0], w.shape()[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; n * co * ho * wo];
        for b in 0..n {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = 0.0;
                        for c in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    s += x.data()[((b * ci + c) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((o * ci + c) * k + ky) * k + kx];
                                }
                            }
                        }
                        out[((b * co + o) * ho + oy) * wo + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_nested_loops() {
        for &(k, stride, pad, size) in &[(3, 1, 1, 6), (3, 2, 1, 6), (3, 2, 1, 5), (1, 1, 0, 5), (3, 1, 0, 5)] {
            let x = rnd(&[2, 3, size, size], 1);
            let w = rnd(&[4, 3, k, k], 2);
            let tape = Tape::new();
            let y = tape.constant(x.clone()).conv2d(&tape.constant(w.clone()), stride, pad);
            let expect = naive_conv(&x, &w, stride, pad);
            for (a, b) in y.value().data().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_and_resampling_gradients() {
        check_grad(&[rnd(&[2, 2, 4, 4], 3), rnd(&[3, 2, 3, 3], 4)], |_, v| v[0].conv2d(&v[1], 1, 1), 1e-6);
        check_grad(&[rnd(&[1, 2, 4, 4], 5), rnd(&[2, 2, 3, 3], 6)], |_, v| v[0].conv2d(&v[1], 2, 1), 1e-6);
        check_grad(&[rnd(&[2, 3, 2, 2], 7), rnd(&[2, 3, 1, 1], 8)], |_, v| v[0].conv2d(&v[1], 1, 0), 1e-6);
        check_grad(&[rnd(&[2, 3, 2, 2], 9), rnd(&[3], 10)], |_, v| v[0].add_channels(&v[1]), 1e-6);
        check_grad(&[rnd(&[2, 3, 2, 2], 11), rnd(&[2, 3], 12)], |_, v| v[0].add_channels(&v[1]), 1e-6);
        check_grad(&[rnd(&[1, 2, 4, 4], 13)], |_, v| v[0].avg_pool2(), 1e-6);
        check_grad(&[rnd(&[1, 2, 2, 2], 14)], |_, v| v[0].upsample2(), 1e-6);
        check_grad(&[rnd(&[2, 3, 2, 3], 15)], |_, v| v[0].mean_spatial(), 1e-6);
    }
}
