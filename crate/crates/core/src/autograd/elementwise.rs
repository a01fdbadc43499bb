use super::{BackCtx, Var};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn scale_leading<T: Scalar>(x: &Tensor<T>, k: &[T]) -> Tensor<T> {
    let mut out = x.clone();
    let m = x.len() / k.len();
    for (chunk, &k) in out.data_mut().chunks_mut(m).zip(k) {
        chunk.iter_mut().for_each(|v| *v *= k);
    }
    out
}

impl<'t, T: Scalar> Var<'t, T> {
    fn binary_same_shape(&self, other: &Var<'t, T>, what: &str) -> (Tensor<T>, Tensor<T>) {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.shape(), b.shape(), "{what}: operand shapes differ");
        ((*a).clone(), (*b).clone())
    }

    pub fn add(&self, other: &Var<'t, T>) -> Var<'t, T> {
        let (a, b) = self.binary_same_shape(other, "add");
        self.tape.record(a.add(&b), &[self.id, other.id], |c: &BackCtx<'_, T>| {
            vec![Some(c.grad.clone()), Some(c.grad.clone())]
        })
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Var<'t, T> {
        let (a, b) = self.binary_same_shape(other, "sub");
        self.tape.record(a.sub(&b), &[self.id, other.id], |c: &BackCtx<'_, T>| {
            vec![Some(c.grad.clone()), Some(c.grad.scale(-T::one()))]
        })
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Var<'t, T> {
        let (a, b) = self.binary_same_shape(other, "mul");
        self.tape.record(
            a.zip_map(&b, |x, y| x * y),
            &[self.id, other.id],
            |c: &BackCtx<'_, T>| {
                let ga = c.needs[0].then(|| c.grad.zip_map(c.inputs[1], |g, y| g * y));
                let gb = c.needs[1].then(|| c.grad.zip_map(c.inputs[0], |g, x| g * x));
                vec![ga, gb]
            },
        )
    }

    pub fn scale(&self, k: f64) -> Var<'t, T> {
        self.scale_by(lit(k))
    }

    pub fn scale_by(&self, k: T) -> Var<'t, T> {
        let v = self.value().scale(k);
        self.tape
            .record(v, &[self.id], move |c: &BackCtx<'_, T>| vec![Some(c.grad.scale(k))])
    }

    /// Multiplies item `i` along the leading axis by `k[i]`.
    pub fn scale_items(&self, k: &[T]) -> Var<'t, T> {
        let v = self.value();
        assert_eq!(v.shape().first(), Some(&k.len()), "scale_items: one factor per item");
        let k = k.to_vec();
        let out = scale_leading(&v, &k);
        self.tape
            .record(out, &[self.id], move |c: &BackCtx<'_, T>| vec![Some(scale_leading(c.grad, &k))])
    }

    pub fn add_scalar(&self, k: T) -> Var<'t, T> {
        let v = self.value().map(|x| x + k);
        self.tape
            .record(v, &[self.id], |c: &BackCtx<'_, T>| vec![Some(c.grad.clone())])
    }

    /// Adds a constant tensor of the same shape.
    pub fn add_const(&self, k: &Tensor<T>) -> Var<'t, T> {
        let v = self.value().add(k);
        self.tape
            .record(v, &[self.id], |c: &BackCtx<'_, T>| vec![Some(c.grad.clone())])
    }

    /// Multiplies by a single-element variable.
    pub fn mul_scalar_var(&self, s: &Var<'t, T>) -> Var<'t, T> {
        let sv = s.item();
        let v = self.value().scale(sv);
        self.tape
            .record(v, &[self.id, s.id], move |c: &BackCtx<'_, T>| {
                let gx = c.needs[0].then(|| c.grad.scale(sv));
                let gs = c.needs[1].then(|| Tensor::scalar(c.grad.dot(c.inputs[0])));
                vec![gx, gs]
            })
    }

    pub fn silu(&self) -> Var<'t, T> {
        let v = self.value().map(|x| x * sigmoid(x));
        self.tape.record(v, &[self.id], |c: &BackCtx<'_, T>| {
            vec![Some(c.grad.zip_map(c.inputs[0], |g, x| {
                let s = sigmoid(x);
                g * s * (T::one() + x * (T::one() - s))
            }))]
        })
    }

    pub fn exp(&self) -> Var<'t, T> {
        let v = self.value().map(|x| x.exp());
        self.tape.record(v, &[self.id], |c: &BackCtx<'_, T>| {
            vec![Some(c.grad.zip_map(c.out, |g, y| g * y))]
        })
    }

    /// Adds `other` repeated to fill `self`; `other.len()` must divide
    /// `self.len()` and match its trailing layout (row bias, position table).
    pub fn add_tiled(&self, other: &Var<'t, T>) -> Var<'t, T> {
        let a = self.value();
        let b = other.value();
        let n = b.len();
        assert!(n > 0 && a.len().is_multiple_of(n), "add_tiled: {} not a multiple of {n}", a.len());
        let mut out = (*a).clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, &v) in chunk.iter_mut().zip(b.data()) {
                *o += v;
            }
        }
        self.tape
            .record(out, &[self.id, other.id], move |c: &BackCtx<'_, T>| {
                let gb = c.needs[1].then(|| {
                    let mut acc = vec![T::zero(); n];
                    for chunk in c.grad.data().chunks(n) {
                        for (s, &g) in acc.iter_mut().zip(chunk) {
                            *s += g;
                        }
                    }
                    Tensor::from_vec(c.inputs[1].shape(), acc).unwrap()
                });
                vec![Some(c.grad.clone()), gb]
            })
    }

    pub fn sum_all(&self) -> Var<'t, T> {
        let v = Tensor::scalar(self.value().sum());
        self.tape.record(v, &[self.id], |c: &BackCtx<'_, T>| {
            vec![Some(Tensor::full(c.inputs[0].shape(), c.grad.data()[0]))]
        })
    }

    pub fn mean_all(&self) -> Var<'t, T> {
        let x = self.value();
        let n = lit::<T>(x.len() as f64);
        let v = Tensor::scalar(x.sum() / n);
        self.tape.record(v, &[self.id], move |c: &BackCtx<'_, T>| {
            vec![Some(Tensor::full(c.inputs[0].shape(), c.grad.data()[0] / n))]
        })
    }

    /// Row-wise dot product of two `[B, D]` matrices, giving `[B]`.
    pub fn rows_dot(&self, other: &Var<'t, T>) -> Var<'t, T> {
        let (a, b) = self.binary_same_shape(other, "rows_dot");
        let d = *a.shape().last().unwrap();
        let rows = a.len() / d;
        let out: Vec<T> = a
            .data()
            .chunks(d)
            .zip(b.data().chunks(d))
            .map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| p * q).sum())
            .collect();
        let v = Tensor::from_vec(&[rows], out).unwrap();
        self.tape
            .record(v, &[self.id, other.id], move |c: &BackCtx<'_, T>| {
                let spread = |other: &Tensor<T>| {
                    let mut g = other.clone();
                    for (row, &gr) in g.data_mut().chunks_mut(d).zip(c.grad.data()) {
                        row.iter_mut().for_each(|v| *v *= gr);
                    }
                    g
                };
                vec![
                    c.needs[0].then(|| spread(c.inputs[1])),
                    c.needs[1].then(|| spread(c.inputs[0])),
                ]
            })
    }

    /// Scales each row (last axis) to unit Euclidean length.
    pub fn l2_normalize_rows(&self) -> Var<'t, T> {
        let x = self.value();
        let d = *x.shape().last().unwrap();
        let eps = lit::<T>(1e-12);
        let mut out = (*x).clone();
        for row in out.data_mut().chunks_mut(d) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
            row.iter_mut().for_each(|v| *v /= n);
        }
        self.tape.record(out, &[self.id], move |c: &BackCtx<'_, T>| {
            let mut g = c.grad.clone();
            for ((gr, xr), yr) in g
                .data_mut()
                .chunks_mut(d)
                .zip(c.inputs[0].data().chunks(d))
                .zip(c.out.data().chunks(d))
            {
                let n = xr.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
                let yg: T = yr.iter().zip(gr.iter()).map(|(&y, &g)| y * g).sum();
                for (gv, &y) in gr.iter_mut().zip(yr) {
                    *gv = (*gv - y * yg) / n;
                }
            }
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
    fn elementwise_gradients() {
        let a = rnd(&[2, 3], 1);
        let b = rnd(&[2, 3], 2);
        check_grad(&[a.clone(), b.clone()], |_, v| v[0].mul(&v[1]).sub(&v[0]).silu(), 1e-6);
        check_grad(std::slice::from_ref(&a), |_, v| v[0].scale(0.3).exp().add_scalar(2.0), 1e-6);
        check_grad(&[a.clone(), b.clone()], |_, v| v[0].rows_dot(&v[1]), 1e-6);
        check_grad(std::slice::from_ref(&a), |_, v| v[0].l2_normalize_rows(), 1e-6);
        check_grad(std::slice::from_ref(&a), |_, v| v[0].mean_all(), 1e-6);
        let bias = rnd(&[3], 3);
        check_grad(&[a.clone(), bias], |_, v| v[0].add_tiled(&v[1]), 1e-6);
        let s = rnd(&[1], 4);
        check_grad(&[a, s], |_, v| v[0].mul_scalar_var(&v[1]), 1e-6);
        check_grad(&[rnd(&[3, 2, 2], 5)], |_, v| v[0].scale_items(&[0.5, -2.0, 3.0]), 1e-6);
    }

    #[test]
    fn normalized_rows_have_unit_norm() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(rnd(&[4, 5], 9));
        let y = x.l2_normalize_rows().value();
        for row in y.data().chunks(5) {
            let n: f64 = row.iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }
}
