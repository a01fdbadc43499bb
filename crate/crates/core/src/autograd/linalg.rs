use super::{BackCtx, Var};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Row-major `[rows, cols]` view; `trans` reads the stored matrix transposed.
#[derive(Clone, Copy)]
struct View {
    rs: isize,
    cs: isize,
}

impl View {
    fn plain(cols: usize) -> Self {
        View { rs: cols as isize, cs: 1 }
    }
    /// Transposed view of a stored `[_, stored_cols]` matrix.
    fn trans(stored_cols: usize) -> Self {
        View { rs: 1, cs: stored_cols as isize }
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    va: View,
    b: &[T],
    vb: View,
    c: &mut [T],
    accumulate: bool,
) {
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, a, va.rs, va.cs, b, vb.rs, vb.cs, beta, c, n as isize, 1);
}

impl<'t, T: Scalar> Var<'t, T> {
    /// `[M, K] · [K, N]`.
    pub fn matmul(&self, other: &Var<'t, T>) -> Var<'t, T> {
        let a = self.value();
        let b = other.value();
        let (m, k) = (a.shape()[0], a.shape()[1]);
        assert_eq!(a.shape().len(), 2);
        assert_eq!(b.shape()[0], k, "matmul inner dimension");
        let n = b.shape()[1];
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, a.data(), View::plain(k), b.data(), View::plain(n), &mut out, false);
        let v = Tensor::from_vec(&[m, n], out).unwrap();
        self.tape
            .record(v, &[self.id, other.id], move |c: &BackCtx<'_, T>| {
                let (a, b, g) = (c.inputs[0], c.inputs[1], c.grad.data());
                let ga = c.needs[0].then(|| {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(m, n, k, g, View::plain(n), b.data(), View::trans(n), &mut ga, false);
                    Tensor::from_vec(&[m, k], ga).unwrap()
                });
                let gb = c.needs[1].then(|| {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(k, m, n, a.data(), View::trans(k), g, View::plain(n), &mut gb, false);
                    Tensor::from_vec(&[k, n], gb).unwrap()
                });
                vec![ga, gb]
            })
    }

    /// `x · Wᵀ` where `x` is `[.., K]` and `W` is `[N, K]` (linear-layer layout).
    pub fn matmul_nt(&self, weight: &Var<'t, T>) -> Var<'t, T> {
        let a = self.value();
        let w = weight.value();
        let k = *a.shape().last().unwrap();
        let m = a.len() / k;
        let n = w.shape()[0];
        assert_eq!(w.shape()[1], k, "matmul_nt inner dimension");
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, a.data(), View::plain(k), w.data(), View::trans(k), &mut out, false);
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let v = Tensor::from_vec(&shape, out).unwrap();
        self.tape
            .record(v, &[self.id, weight.id], move |c: &BackCtx<'_, T>| {
                let (a, w, g) = (c.inputs[0], c.inputs[1], c.grad.data());
                let ga = c.needs[0].then(|| {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(m, n, k, g, View::plain(n), w.data(), View::plain(k), &mut ga, false);
                    Tensor::from_vec(a.shape(), ga).unwrap()
                });
                let gw = c.needs[1].then(|| {
                    let mut gw = vec![T::zero(); n * k];
                    gemm(n, m, k, g, View::trans(n), a.data(), View::plain(k), &mut gw, false);
                    Tensor::from_vec(&[n, k], gw).unwrap()
                });
                vec![ga, gw]
            })
    }

    /// Batched `[B, M, K] · [B, K, N]`, or `[B, M, K] · [B, N, K]ᵀ` when
    /// `transpose_rhs` is set.
    pub fn bmm(&self, other: &Var<'t, T>, transpose_rhs: bool) -> Var<'t, T> {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.shape().len(), 3);
        assert_eq!(b.shape().len(), 3);
        let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        assert_eq!(b.shape()[0], bs, "bmm batch");
        let n = if transpose_rhs { b.shape()[1] } else { b.shape()[2] };
        let bk = if transpose_rhs { b.shape()[2] } else { b.shape()[1] };
        assert_eq!(bk, k, "bmm inner dimension");
        let vb = if transpose_rhs { View::trans(k) } else { View::plain(n) };
        let mut out = vec![T::zero(); bs * m * n];
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &a.data()[i * m * k..(i + 1) * m * k],
                View::plain(k),
                &b.data()[i * k * n..(i + 1) * k * n],
                vb,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let v = Tensor::from_vec(&[bs, m, n], out).unwrap();
        self.tape
            .record(v, &[self.id, other.id], move |c: &BackCtx<'_, T>| {
                let (a, b, g) = (c.inputs[0].data(), c.inputs[1].data(), c.grad.data());
                let ga = c.needs[0].then(|| {
                    let mut ga = vec![T::zero(); bs * m * k];
                    // dA = dC · Bᵀ (or dC · B when B was read transposed)
                    let vb = if transpose_rhs { View::plain(k) } else { View::trans(n) };
                    for i in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            View::plain(n),
                            &b[i * k * n..(i + 1) * k * n],
                            vb,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    Tensor::from_vec(&[bs, m, k], ga).unwrap()
                });
                let gb = c.needs[1].then(|| {
                    let mut gb = vec![T::zero(); bs * k * n];
                    for i in 0..bs {
                        let (ai, gi) = (&a[i * m * k..(i + 1) * m * k], &g[i * m * n..(i + 1) * m * n]);
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if transpose_rhs {
                            // dB[N,K] = dCᵀ · A
                            gemm(n, m, k, gi, View::trans(n), ai, View::plain(k), dst, false);
                        } else {
                            // dB[K,N] = Aᵀ · dC
                            gemm(k, m, n, ai, View::trans(k), gi, View::plain(n), dst, false);
                        }
                    }
                    Tensor::from_vec(c.inputs[1].shape(), gb).unwrap()
                });
                vec![ga, gb]
            })
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Var<'t, T> {
        let x = self.value();
        let d = *x.shape().last().unwrap();
        let mut out = (*x).clone();
        for row in out.data_mut().chunks_mut(d) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        self.tape.record(out, &[self.id], move |c: &BackCtx<'_, T>| {
            let mut gx = c.grad.clone();
            for (gr, yr) in gx.data_mut().chunks_mut(d).zip(c.out.data().chunks(d)) {
                let dot: T = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum();
                for (g, &y) in gr.iter_mut().zip(yr) {
                    *g = y * (*g - dot);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Mean cross-entropy of `[N, C]` logits against class indices.
    pub fn cross_entropy_rows(&self, targets: &[usize]) -> Var<'t, T> {
        let x = self.value();
        let c_dim = x.shape()[1];
        let n = x.shape()[0];
        assert_eq!(targets.len(), n);
        let mut probs = (*x).clone();
        let mut loss = T::zero();
        for (row, &tgt) in probs.data_mut().chunks_mut(c_dim).zip(targets) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
            loss += lse - row[tgt];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let nf = lit::<T>(n as f64);
        let targets = targets.to_vec();
        self.tape
            .record(Tensor::scalar(loss / nf), &[self.id], move |c: &BackCtx<'_, T>| {
                let g = c.grad.data()[0] / nf;
                let mut gx = probs.clone();
                for (row, &tgt) in gx.data_mut().chunks_mut(c_dim).zip(&targets) {
                    row[tgt] -= T::one();
                    row.iter_mut().for_each(|v| *v *= g);
                }
                vec![Some(gx)]
            })
    }

    /// Masks attention logits `[B·H, Lq, Lk]` so that keys flagged invalid in
    /// `valid` (`[B, Lk]`, row-major) receive no weight after the softmax.
    pub fn mask_keys(&self, valid: &[bool]) -> Var<'t, T> {
        let x = self.value();
        let (g, lq, lk) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let b = valid.len() / lk;
        assert!(b > 0 && g % b == 0 && valid.len() == b * lk, "mask_keys layout");
        let heads = g / b;
        let neg = lit::<T>(-1e9);
        let mut out = (*x).clone();
        for (gi, block) in out.data_mut().chunks_mut(lq * lk).enumerate() {
            let mask = &valid[(gi / heads) * lk..(gi / heads + 1) * lk];
            for row in block.chunks_mut(lk) {
                for (v, &ok) in row.iter_mut().zip(mask) {
                    if !ok {
                        *v = neg;
                    }
                }
            }
        }
        let valid = valid.to_vec();
        self.tape.record(out, &[self.id], move |c: &BackCtx<'_, T>| {
            let mut gx = c.grad.clone();
            for (gi, block) in gx.data_mut().chunks_mut(lq * lk).enumerate() {
                let mask = &valid[(gi / heads) * lk..(gi / heads + 1) * lk];
                for row in block.chunks_mut(lk) {
                    for (v, &ok) in row.iter_mut().zip(mask) {
                        if !ok {
                            *v = T::zero();
                        }
                    }
                }
            }
            vec![Some(gx)]
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

    #[test]
    fn matmul_gradients() {
        check_grad(&[rnd(&[3, 4], 1), rnd(&[4, 2], 2)], |_, v| v[0].matmul(&v[1]), 1e-6);
        check_grad(&[rnd(&[2, 3, 4], 3), rnd(&[5, 4], 4)], |_, v| v[0].matmul_nt(&v[1]), 1e-6);
        check_grad(&[rnd(&[2, 3, 4], 5), rnd(&[2, 4, 2], 6)], |_, v| v[0].bmm(&v[1], false), 1e-6);
        check_grad(&[rnd(&[2, 3, 4], 7), rnd(&[2, 5, 4], 8)], |_, v| v[0].bmm(&v[1], true), 1e-6);
    }

    #[test]
    fn softmax_and_cross_entropy_gradients() {
        check_grad(&[rnd(&[3, 5], 9)], |_, v| v[0].softmax_last(), 1e-6);
        check_grad(&[rnd(&[3, 5], 10)], |_, v| v[0].cross_entropy_rows(&[0, 4, 2]), 1e-6);
        let valid = [true, true, false, true, false, false];
        check_grad(
            &[rnd(&[4, 2, 3], 11)],
            |_, v| v[0].mask_keys(&valid).softmax_last(),
            1e-6,
        );
    }

    #[test]
    fn softmax_rows_sum_to_one_and_mask_zeroes_keys() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(rnd(&[2, 3, 4], 12));
        let valid = [true, false, true, true, true, true, true, false];
        let y = x.mask_keys(&valid).softmax_last().value();
        for (i, row) in y.data().chunks(4).enumerate() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let b = i / 3;
            for (j, &p) in row.iter().enumerate() {
                if !valid[b * 4 + j] {
                    assert_eq!(p, 0.0);
                }
            }
        }
    }
}
