use super::{BackCtx, Var};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `src` into the order given by `axes`.
fn permute_data<T: Scalar>(src: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let shape = src.shape();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = src.len();
    let rank = axes.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let data = src.data();
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::from_vec(&out_shape, out).unwrap()
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn reshape(&self, shape: &[usize]) -> Var<'t, T> {
        let v = self.value().reshaped(shape);
        self.tape.record(v, &[self.id], |c: &BackCtx<'_, T>| {
            vec![Some(c.grad.reshaped(c.inputs[0].shape()))]
        })
    }

    pub fn permute(&self, axes: &[usize]) -> Var<'t, T> {
        let v = permute_data(&self.value(), axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.tape.record(v, &[self.id], move |c: &BackCtx<'_, T>| {
            vec![Some(permute_data(c.grad, &inverse))]
        })
    }

    /// Concatenates two `[N, C, H, W]` tensors along channels.
    pub fn concat_channels(&self, other: &Var<'t, T>) -> Var<'t, T> {
        let a = self.value();
        let b = other.value();
        let (n, ca) = (a.shape()[0], a.shape()[1]);
        let cb = b.shape()[1];
        assert_eq!(a.shape()[2..], b.shape()[2..], "concat spatial dims");
        assert_eq!(b.shape()[0], n);
        let hw: usize = a.shape()[2..].iter().product();
        let mut out = Vec::with_capacity(a.len() + b.len());
        for i in 0..n {
            out.extend_from_slice(&a.data()[i * ca * hw..(i + 1) * ca * hw]);
            out.extend_from_slice(&b.data()[i * cb * hw..(i + 1) * cb * hw]);
        }
        let mut shape = a.shape().to_vec();
        shape[1] = ca + cb;
        let v = Tensor::from_vec(&shape, out).unwrap();
        self.tape
            .record(v, &[self.id, other.id], move |c: &BackCtx<'_, T>| {
                let g = c.grad.data();
                let mut ga = Vec::with_capacity(n * ca * hw);
                let mut gb = Vec::with_capacity(n * cb * hw);
                for i in 0..n {
                    let base = i * (ca + cb) * hw;
                    ga.extend_from_slice(&g[base..base + ca * hw]);
                    gb.extend_from_slice(&g[base + ca * hw..base + (ca + cb) * hw]);
                }
                vec![
                    Some(Tensor::from_vec(c.inputs[0].shape(), ga).unwrap()),
                    Some(Tensor::from_vec(c.inputs[1].shape(), gb).unwrap()),
                ]
            })
    }

    /// Row lookup into a `[V, D]` table, giving `[ids.len(), D]`.
    pub fn gather_rows(&self, ids: &[usize]) -> Var<'t, T> {
        let table = self.value();
        let d = table.shape()[1];
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&table.data()[i * d..(i + 1) * d]);
        }
        let v = Tensor::from_vec(&[ids.len(), d], out).unwrap();
        let ids = ids.to_vec();
        self.tape.record(v, &[self.id], move |c: &BackCtx<'_, T>| {
            let mut g = Tensor::zeros(c.inputs[0].shape());
            let gd = g.data_mut();
            for (row, &i) in c.grad.data().chunks(d).zip(&ids) {
                for (acc, &v) in gd[i * d..(i + 1) * d].iter_mut().zip(row) {
                    *acc += v;
                }
            }
            vec![Some(g)]
        })
    }

    /// Mean over valid token positions of `[B, L, D]`, giving `[B, D]`.
    pub fn masked_mean_tokens(&self, valid: &[bool]) -> Var<'t, T> {
        let x = self.value();
        let (b, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        assert_eq!(valid.len(), b * l);
        let counts: Vec<T> = valid
            .chunks(l)
            .map(|m| lit::<T>(m.iter().filter(|&&v| v).count().max(1) as f64))
            .collect();
        let mut out = vec![T::zero(); b * d];
        for bi in 0..b {
            for li in 0..l {
                if !valid[bi * l + li] {
                    continue;
                }
                let src = &x.data()[(bi * l + li) * d..(bi * l + li + 1) * d];
                for (o, &v) in out[bi * d..(bi + 1) * d].iter_mut().zip(src) {
                    *o += v;
                }
            }
            out[bi * d..(bi + 1) * d].iter_mut().for_each(|v| *v /= counts[bi]);
        }
        let v = Tensor::from_vec(&[b, d], out).unwrap();
        let valid = valid.to_vec();
        self.tape.record(v, &[self.id], move |c: &BackCtx<'_, T>| {
            let mut g = Tensor::zeros(c.inputs[0].shape());
            let gd = g.data_mut();
            for bi in 0..b {
                let src = &c.grad.data()[bi * d..(bi + 1) * d];
                for li in 0..l {
                    if !valid[bi * l + li] {
                        continue;
                    }
                    for (o, &v) in gd[(bi * l + li) * d..(bi * l + li + 1) * d].iter_mut().zip(src) {
                        *o = v / counts[bi];
                    }
                }
            }
            vec![Some(g)]
        })
    }

    /// Replaces rows of a `[R, D]` matrix: rows in `set` become `row`
    /// (a `[D]` variable), rows in `zero` become zero.
    pub fn override_rows(&self, row: &Var<'t, T>, set: &[usize], zero: &[usize]) -> Var<'t, T> {
        let x = self.value();
        let r = row.value();
        let d = r.len();
        let mut out = (*x).clone();
        for &i in set {
            out.data_mut()[i * d..(i + 1) * d].copy_from_slice(r.data());
        }
        for &i in zero {
            out.data_mut()[i * d..(i + 1) * d].iter_mut().for_each(|v| *v = T::zero());
        }
        let (set, zero) = (set.to_vec(), zero.to_vec());
        self.tape
            .record(out, &[self.id, row.id], move |c: &BackCtx<'_, T>| {
                let gx = c.needs[0].then(|| {
                    let mut g = c.grad.clone();
                    for &i in set.iter().chain(&zero) {
                        g.data_mut()[i * d..(i + 1) * d].iter_mut().for_each(|v| *v = T::zero());
                    }
                    g
                });
                let gr = c.needs[1].then(|| {
                    let mut acc = Tensor::zeros(c.inputs[1].shape());
                    for &i in &set {
                        for (a, &v) in acc.data_mut().iter_mut().zip(&c.grad.data()[i * d..(i + 1) * d]) {
                            *a += v;
                        }
                    }
                    acc
                });
                vec![gx, gr]
            })
    }

    /// First `n` rows of a `[R, D]` matrix.
    pub fn take_rows(&self, n: usize) -> Var<'t, T> {
        self.narrow(0, n)
    }

    /// Entries `start..start + n` along the leading axis.
    pub fn narrow(&self, start: usize, n: usize) -> Var<'t, T> {
        let x = self.value();
        let mut shape = x.shape().to_vec();
        assert!(start + n <= shape[0], "narrow {start}+{n} past {}", shape[0]);
        let inner: usize = shape[1..].iter().product();
        shape[0] = n;
        let (lo, hi) = (start * inner, (start + n) * inner);
        let v = Tensor::from_vec(&shape, x.data()[lo..hi].to_vec()).unwrap();
        self.tape.record(v, &[self.id], move |c: &BackCtx<'_, T>| {
            let mut g = Tensor::zeros(c.inputs[0].shape());
            g.data_mut()[lo..hi].copy_from_slice(c.grad.data());
            vec![Some(g)]
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
    fn permute_moves_elements() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64s(&[2, 3], &[0., 1., 2., 3., 4., 5.]).unwrap());
        let y = x.permute(&[1, 0]).value();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[0., 3., 1., 4., 2., 5.]);
    }

    #[test]
    fn shape_op_gradients() {
        check_grad(&[rnd(&[2, 3, 4, 2], 1)], |_, v| v[0].permute(&[0, 2, 1, 3]), 1e-6);
        check_grad(
            &[rnd(&[2, 1, 2, 2], 2), rnd(&[2, 3, 2, 2], 3)],
            |_, v| v[0].concat_channels(&v[1]),
            1e-6,
        );
        check_grad(&[rnd(&[4, 3], 4)], |_, v| v[0].gather_rows(&[1, 3, 1]), 1e-6);
        let valid = [true, false, true, true, true, false];
        check_grad(&[rnd(&[2, 3, 2], 5)], |_, v| v[0].masked_mean_tokens(&valid), 1e-6);
        check_grad(
            &[rnd(&[4, 3], 6), rnd(&[3], 7)],
            |_, v| v[0].override_rows(&v[1], &[0, 2], &[3]),
            1e-6,
        );
        check_grad(&[rnd(&[5, 2], 8)], |_, v| v[0].take_rows(3), 1e-6);
        check_grad(&[rnd(&[4, 2, 3], 9)], |_, v| v[0].narrow(1, 2).silu(), 1e-6);
    }
}
