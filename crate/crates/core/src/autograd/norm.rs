use super::{BackCtx, Var};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// How affine parameters are laid out over normalized segments: segment `s`
/// is split into runs of `run` elements sharing parameter
/// `(s % period)·runs + r`.
#[derive(Clone, Copy)]
struct Affine {
    period: usize,
    runs: usize,
    run: usize,
}

fn stats<T: Scalar>(seg: &[T], eps: T) -> (T, T) {
    let n = lit::<T>(seg.len() as f64);
    let mean = seg.iter().copied().sum::<T>() / n;
    let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}

impl<'t, T: Scalar> Var<'t, T> {
    fn normalize_segments(&self, gamma: &Var<'t, T>, beta: &Var<'t, T>, af: Affine) -> Var<'t, T> {
        let eps = lit::<T>(1e-5);
        let seg_len = af.runs * af.run;
        let x = self.value();
        let (gm, bt) = (gamma.value(), beta.value());
        let mut out = (*x).clone();
        for (s, seg) in out.data_mut().chunks_mut(seg_len).enumerate() {
            let (mean, rstd) = stats(seg, eps);
            let base = (s % af.period) * af.runs;
            for (r, run) in seg.chunks_mut(af.run).enumerate() {
                let scale = rstd * gm.data()[base + r];
                let shift = bt.data()[base + r] - mean * scale;
                run.iter_mut().for_each(|v| *v = *v * scale + shift);
            }
        }
        self.tape.record(
            out,
            &[self.id, gamma.id, beta.id],
            move |c: &BackCtx<'_, T>| {
                let (x, gm) = (c.inputs[0], c.inputs[1]);
                let mut gx = Tensor::zeros(x.shape());
                let mut ggm = Tensor::zeros(gm.shape());
                let mut gbt = Tensor::zeros(gm.shape());
                let n = lit::<T>(seg_len as f64);
                let mut xhat = vec![T::zero(); seg_len];
                for (s, ((xs, gs), dst)) in x
                    .data()
                    .chunks(seg_len)
                    .zip(c.grad.data().chunks(seg_len))
                    .zip(gx.data_mut().chunks_mut(seg_len))
                    .enumerate()
                {
                    let (mean, rstd) = stats(xs, eps);
                    xhat.iter_mut().zip(xs).for_each(|(h, &v)| *h = (v - mean) * rstd);
                    let base = (s % af.period) * af.runs;
                    // dxhat = g·γ; m1 = mean(dxhat), m2 = mean(dxhat·xhat)
                    let (mut m1, mut m2) = (T::zero(), T::zero());
                    for r in 0..af.runs {
                        let span = r * af.run..(r + 1) * af.run;
                        let (g, h) = (&gs[span.clone()], &xhat[span]);
                        let gsum: T = g.iter().copied().sum();
                        let gh: T = g.iter().zip(h).map(|(&a, &b)| a * b).sum();
                        let a = base + r;
                        m1 += gsum * gm.data()[a];
                        m2 += gh * gm.data()[a];
                        ggm.data_mut()[a] += gh;
                        gbt.data_mut()[a] += gsum;
                    }
                    m1 /= n;
                    m2 /= n;
                    for r in 0..af.runs {
                        let span = r * af.run..(r + 1) * af.run;
                        let gamma = gm.data()[base + r];
                        for ((d, &g), &h) in dst[span.clone()].iter_mut().zip(&gs[span.clone()]).zip(&xhat[span]) {
                            *d = rstd * (g * gamma - m1 - h * m2);
                        }
                    }
                }
                vec![Some(gx), Some(ggm), Some(gbt)]
            },
        )
    }

    /// Group normalization of `[N, C, H, W]` with per-channel affine terms.
    pub fn group_norm(&self, groups: usize, gamma: &Var<'t, T>, beta: &Var<'t, T>) -> Var<'t, T> {
        let shape = self.shape();
        let ch = shape[1];
        let hw: usize = shape[2..].iter().product();
        assert!(ch.is_multiple_of(groups), "group_norm: {ch} channels, {groups} groups");
        self.normalize_segments(
            gamma,
            beta,
            Affine {
                period: groups,
                runs: ch / groups,
                run: hw,
            },
        )
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&self, gamma: &Var<'t, T>, beta: &Var<'t, T>) -> Var<'t, T> {
        let d = *self.shape().last().unwrap();
        self.normalize_segments(gamma, beta, Affine { period: 1, runs: d, run: 1 })
    }
}
