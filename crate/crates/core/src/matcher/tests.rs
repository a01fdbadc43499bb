use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

pub(crate) fn micro_config(kind: ImageEncoderKind, normalize: bool) -> MatcherConfig {
    MatcherConfig {
        resolution: 8,
        image_encoder: kind,
        widths: vec![4, 6],
        groups: 2,
        embed_dim: 5,
        temperature: 0.07,
        learn_temperature: true,
        normalize,
        text: TransformerConfig {
            vocab_size: VOCAB_WORDS.len(),
            max_tokens: 8,
            dim: 8,
            heads: 2,
            layers: 1,
            ff_mult: 2,
        },
    }
}

fn image(n: usize, seed: u64) -> Tensor<f64> {
    Tensor::randn(&[n, 3, 8, 8], &mut ChaCha8Rng::seed_from_u64(seed))
}

const CAP: &[u16] = &[3, 17, 25, 9, 11, 42];

#[test]
fn normalized_embeddings_have_unit_norm() {
    let m = Matcher::<f64>::new(micro_config(ImageEncoderKind::Cnn, true), 1).unwrap();
    let f = m.embed_image(&image(3, 2)).unwrap();
    for row in f.data().chunks(5) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
    }
    let g = m.embed_caption(CAP).unwrap();
    assert!((g.norm() - 1.0).abs() < 1e-5);
    assert_eq!(g, m.embed_caption(CAP).unwrap());
    assert_eq!(f, m.embed_image(&image(3, 2)).unwrap());
    let s = m.match_score(&image(1, 3), CAP).unwrap();
    assert!(s.abs() <= 1.0 + 1e-12);
}

#[test]
fn score_respects_cauchy_schwarz() {
    let m = Matcher::<f64>::new(micro_config(ImageEncoderKind::Cnn, false), 4).unwrap();
    let x = image(1, 5);
    let f = m.embed_image(&x).unwrap();
    let g = m.embed_caption(CAP).unwrap();
    let s = m.match_score(&x, CAP).unwrap();
    assert!(s.abs() <= f.norm() * g.norm() + 1e-12);
}

#[test]
fn score_gradient_matches_finite_differences() {
    for normalize in [true, false] {
        let m = Matcher::<f64>::new(micro_config(ImageEncoderKind::Cnn, normalize), 6).unwrap();
        let x = image(1, 7);
        let grad = m.score_gradient(&x, CAP).unwrap();
        assert_eq!(grad.shape(), x.shape());
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = 1e-6;
        for _ in 0..10 {
            let j = rng.random_range(0..x.len());
            let mut plus = x.clone();
            plus.data_mut()[j] += h;
            let mut minus = x.clone();
            minus.data_mut()[j] -= h;
            let numeric = (m.match_score(&plus, CAP).unwrap() - m.match_score(&minus, CAP).unwrap()) / (2.0 * h);
            let a = grad.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-3 || (a - numeric).abs() < 1e-9, "pixel {j}: {a} vs {numeric}");
        }
    }
}

#[test]
fn linear_encoder_gradient_is_w_transpose_g() {
    let m = Matcher::<f64>::new(micro_config(ImageEncoderKind::Linear, false), 9).unwrap();
    let w = m.params().get(m.params().find("image.linear.weight").unwrap()).clone();
    let g = m.embed_caption(CAP).unwrap();
    let mut expected = vec![0.0; 192];
    for (e, &gv) in g.data().iter().enumerate() {
        for (j, v) in expected.iter_mut().enumerate() {
            *v += w.data()[e * 192 + j] * gv;
        }
    }
    for seed in [10, 11] {
        let grad = m.score_gradient(&image(1, seed), CAP).unwrap();
        for (a, b) in grad.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn constant_image_encoder_ignores_the_image() {
    let mut m = Matcher::<f64>::new(micro_config(ImageEncoderKind::Linear, false), 12).unwrap();
    let wid = m.params().find("image.linear.weight").unwrap();
    m.params_mut().get_mut(wid).data_mut().fill(0.0);
    let c0 = m.params().get(m.params().find("image.linear.bias").unwrap()).clone();
    let g = m.embed_caption(CAP).unwrap();
    for seed in [13, 14] {
        let s = m.match_score(&image(1, seed), CAP).unwrap();
        assert!((s - c0.dot(&g)).abs() < 1e-12);
    }
}

#[test]
fn gradient_scales_with_caption_embedding() {
    let m = Matcher::<f64>::new(micro_config(ImageEncoderKind::Cnn, false), 15).unwrap();
    let x = image(1, 16);
    let g = m.embed_captions(&[CAP]).unwrap();
    let grad_of = |caps: &Tensor<f64>| {
        let tape = Tape::new();
        let p = m.params().bind(&tape, false);
        let xv = tape.leaf(x.clone());
        let s = m.score_on(&p, &xv, caps).sum_all();
        tape.gradients(s).wrt(xv)
    };
    let base = grad_of(&g);
    let scaled = grad_of(&g.scale(2.5));
    for (a, b) in base.data().iter().zip(scaled.data()) {
        assert!((2.5 * a - b).abs() < 1e-12);
    }
}

#[test]
fn contrastive_loss_two_pair_example() {
    let tape = Tape::<f64>::new();
    let logits = tape.constant(Tensor::from_vec(&[2, 2], vec![2.0, 0.0, 0.0, 2.0]).unwrap());
    let loss = symmetric_contrastive(&logits).item();
    let e2 = 2f64.exp();
    assert!((loss - -(e2 / (e2 + 1.0)).ln()).abs() < 1e-12);
}

#[test]
fn contrastive_loss_single_pair_is_zero() {
    let m = Matcher::<f64>::new(micro_config(ImageEncoderKind::Cnn, true), 17).unwrap();
    assert!(m.contrastive_loss(&image(1, 18), &[CAP]).unwrap().abs() < 1e-12);
}

#[test]
fn contrastive_loss_is_permutation_equivariant() {
    let m = Matcher::<f64>::new(micro_config(ImageEncoderKind::Cnn, true), 19).unwrap();
    let x = image(3, 20);
    let caps: [&[u16]; 3] = [CAP, &[4, 22, 26], &[3, 18, 28, 7, 3, 31, 29]];
    let loss = m.contrastive_loss(&x, &caps).unwrap();
    assert!(loss >= 0.0);
    let perm = [2, 0, 1];
    let xp = Tensor::stack(&perm.map(|i| x.item(i))).unwrap();
    let cp = perm.map(|i| caps[i]);
    assert!((m.contrastive_loss(&xp, &cp).unwrap() - loss).abs() < 1e-12);
    assert!(matches!(m.contrastive_loss(&x, &caps[..2]), Err(Error::Parameter(_))));
}

#[test]
fn bad_inputs_are_rejected() {
    let m = Matcher::<f64>::new(micro_config(ImageEncoderKind::Cnn, true), 21).unwrap();
    assert!(matches!(m.embed_image(&Tensor::zeros(&[1, 3, 4, 4])), Err(Error::Shape { .. })));
    assert!(matches!(m.embed_caption(&[900]), Err(Error::Vocabulary { .. })));
    assert!(MatcherEnsemble::<f64>::new(vec![]).is_err());
    let mut bad = micro_config(ImageEncoderKind::Cnn, true);
    bad.temperature = 0.0;
    assert!(Matcher::<f64>::new(bad, 0).is_err());
    let other = Matcher::<f64>::new(MatcherConfig { resolution: 16, ..micro_config(ImageEncoderKind::Cnn, true) }, 0).unwrap();
    assert!(MatcherEnsemble::new(vec![("a".into(), m), ("b".into(), other)]).is_err());
}

#[test]
fn temperature_is_learnable() {
    let m = Matcher::<f64>::new(micro_config(ImageEncoderKind::Cnn, true), 22).unwrap();
    assert!((m.temperature() - 0.07).abs() < 1e-12);
    let x = image(2, 23);
    let tokens = m.tokens(&[CAP, &[4, 22, 26]]).unwrap();
    let tape = Tape::new();
    let p = m.params().bind(&tape, true);
    let loss = m.contrastive_loss_on(&p, &tape.constant(x), &tokens);
    let g = tape.gradients(loss);
    assert!(g.wrt(p.var(m.log_temperature_id())).max_abs() > 0.0);
}
