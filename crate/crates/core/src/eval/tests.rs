use super::*;
use crate::corpus::Dataset;
use crate::matcher::ImageEncoderKind;
use crate::schedule::make_linear_schedule;

fn stats_1d(mean: f64, var: f64) -> FeatureStats {
    FeatureStats {
        mean: vec![mean],
        cov: vec![var],
        n: 10,
    }
}

#[test]
fn duplicate_rows_have_zero_covariance() {
    let rows = vec![vec![1.0, -2.0, 0.5]; 4];
    let s = FeatureStats::from_rows(&rows).unwrap();
    assert_eq!(s.mean, vec![1.0, -2.0, 0.5]);
    assert!(s.cov.iter().all(|&v| v == 0.0));
    assert!(FeatureStats::from_rows(&rows[..1]).is_err());
}

#[test]
fn three_row_statistics() {
    let rows = vec![vec![1.0, 2.0], vec![3.0, 0.0], vec![2.0, 7.0]];
    let s = FeatureStats::from_rows(&rows).unwrap();
    assert_eq!(s.n, 3);
    assert!((s.mean[0] - 2.0).abs() < 1e-15 && (s.mean[1] - 3.0).abs() < 1e-15);
    // deviations (-1,-1), (1,-3), (0,4)
    let expect = [(1.0 + 1.0) / 2.0, (1.0 - 3.0) / 2.0, (1.0 - 3.0) / 2.0, (1.0 + 9.0 + 16.0) / 2.0];
    for (a, b) in s.cov.iter().zip(expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn frechet_closed_forms() {
    let a = stats_1d(0.0, 1.0);
    assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-6);
    assert!((frechet_distance(&a, &stats_1d(1.0, 1.0)).unwrap() - 1.0).abs() < 1e-9);
    let b = stats_1d(0.5, 4.0);
    // (μ₁−μ₂)² + (σ₁−σ₂)²
    assert!((frechet_distance(&a, &b).unwrap() - (0.25 + 1.0)).abs() < 1e-9);
    let p = FeatureStats {
        mean: vec![0.0, 1.0, -1.0],
        cov: vec![1.0, 0.0, 0.0, 0.0, 9.0, 0.0, 0.0, 0.0, 0.25],
        n: 5,
    };
    let q = FeatureStats {
        mean: vec![2.0, 1.0, 0.0],
        cov: vec![4.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
        n: 5,
    };
    let expect = (4.0 + 1.0) + (0.0 + 4.0) + (1.0 + 0.25);
    assert!((frechet_distance(&p, &q).unwrap() - expect).abs() < 1e-9);
    assert!((frechet_distance(&q, &p).unwrap() - expect).abs() < 1e-9);
    assert!(frechet_distance(&p, &a).is_err());
}

#[test]
fn frechet_of_sample_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rows = |rng: &mut ChaCha8Rng, shift: f64| -> Vec<Vec<f64>> {
        (0..50)
            .map(|_| Tensor::<f64>::randn(&[4], rng).data().iter().map(|v| v + shift).collect())
            .collect()
    };
    let a = FeatureStats::from_rows(&rows(&mut rng, 0.0)).unwrap();
    let b = FeatureStats::from_rows(&rows(&mut rng, 1.0)).unwrap();
    assert!(frechet_distance(&a, &a).unwrap() < 1e-6);
    let ab = frechet_distance(&a, &b).unwrap();
    assert!((ab - frechet_distance(&b, &a).unwrap()).abs() < 1e-8);
    assert!(ab > 2.0 && ab < 8.0, "{ab}");
}

fn micro_matcher(seed: u64) -> Matcher<f32> {
    let mut c = crate::matcher::tests::micro_config(ImageEncoderKind::Cnn, true);
    c.text.max_tokens = crate::corpus::CAPTION_SLOT;
    Matcher::new(c, seed).unwrap()
}

#[test]
fn matcher_score_metric_properties() {
    let m = micro_matcher(1);
    let ds = Dataset::generate(4, 0, 2, 8).unwrap();
    let img = ds.records[0].image.clone();
    let cap = ds.records[0].caption.as_slice();
    let one = matcher_score_metric(std::slice::from_ref(&img), &[cap], &m).unwrap();
    let three = matcher_score_metric(&[img.clone(), img.clone(), img.clone()], &[cap, cap, cap], &m).unwrap();
    assert!((one - three).abs() < 1e-12);
    assert!((0.0..=1.0 + 1e-9).contains(&one));
    assert!(matcher_score_metric::<f32>(&[], &[], &m).is_err());
    assert!(matcher_score_metric(&[img], &[cap, cap], &m).is_err());
    let imgs: Vec<Tensor<f32>> = ds.records.iter().map(|r| r.image.clone()).collect();
    let caps: Vec<&[u16]> = ds.records.iter().map(|r| r.caption.as_slice()).collect();
    let fwd = matcher_score_metric(&imgs, &caps, &m).unwrap();
    let rev_i: Vec<_> = imgs.iter().rev().cloned().collect();
    let rev_c: Vec<_> = caps.iter().rev().copied().collect();
    assert!((fwd - matcher_score_metric(&rev_i, &rev_c, &m).unwrap()).abs() < 1e-12);
}

#[test]
fn retrieval_accuracy_bounds() {
    let m = micro_matcher(2);
    let ds = Dataset::generate(10, 10, 3, 8).unwrap();
    let acc = retrieval_accuracy(&m, &ds.records, 4, 0).unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(acc, retrieval_accuracy(&m, &ds.records, 4, 0).unwrap());
    assert!(retrieval_accuracy(&m, &ds.records[..3], 4, 0).is_err());
}

#[test]
fn paired_difference_example() {
    let (m, se) = paired_difference(&[1.0, 2.0, 3.0], &[2.0, 2.0, 5.0]).unwrap();
    assert!((m - 1.0).abs() < 1e-12);
    // diffs 1, 0, 2: variance 1, se = 1/√3
    assert!((se - (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
}

struct Micro {
    denoiser: Denoiser<f32>,
    schedule: NoiseSchedule,
    ensemble: MatcherEnsemble<f32>,
    scorer: Matcher<f32>,
    reference: FeatureStats,
    prompts: Vec<Vec<u16>>,
}

fn micro() -> Micro {
    let mut dc = crate::denoiser::tests::micro_config();
    dc.text.max_tokens = crate::corpus::CAPTION_SLOT;
    let ds = Dataset::generate(6, 6, 4, 8).unwrap();
    let scorer = micro_matcher(9);
    let real: Vec<Tensor<f32>> = ds.records.iter().map(|r| r.image.clone()).collect();
    Micro {
        denoiser: Denoiser::new(dc, 5).unwrap(),
        schedule: make_linear_schedule(10, 0.05, 0.3).unwrap(),
        ensemble: MatcherEnsemble::new(vec![("a".into(), micro_matcher(6)), ("b".into(), micro_matcher(7))]).unwrap(),
        reference: extract_features(&real, &scorer).unwrap(),
        scorer,
        prompts: ds.records.iter().take(2).map(|r| r.caption.clone()).collect(),
    }
}

impl Micro {
    fn models(&self) -> SweepModels<'_> {
        SweepModels {
            denoiser: &self.denoiser,
            schedule: &self.schedule,
            ensemble: &self.ensemble,
            scorer: &self.scorer,
            reference: &self.reference,
        }
    }
}

fn base() -> GuidanceConfig {
    GuidanceConfig {
        s: 2.0,
        g: 3.0,
        ddim_steps: 5,
        skip_steps: 1,
        seed: 11,
        ..Default::default()
    }
}

#[test]
fn single_value_sweep_is_one_evaluation() {
    let m = micro();
    let res = run_sweep(SweepAxis::GuidanceWeight, &["3".into()], &base(), &m.prompts, 2, &m.models()).unwrap();
    let row = evaluate_config(&base(), Some(&m.ensemble), &m.prompts, 2, &m.models()).unwrap();
    assert_eq!(res.rows.len(), 1);
    assert_eq!(res.rows[0].scores, row.scores);
    assert_eq!(res.rows[0].fid, row.fid);
    assert_eq!(res.rows[0].n, 4);
    assert_eq!(res.rows[0].matcher_evaluations, vec![4; 4]);
}

#[test]
fn sweeps_are_paired_and_reproducible() {
    let m = micro();
    let values: Vec<String> = ["0", "1", "5"].iter().map(|s| s.to_string()).collect();
    let a = run_sweep(SweepAxis::SkipSteps, &values, &base(), &m.prompts, 2, &m.models()).unwrap();
    let b = run_sweep(SweepAxis::SkipSteps, &values, &base(), &m.prompts, 2, &m.models()).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a.to_csv().lines().count(), 4);
    assert!(a.to_csv().starts_with("axis_value,fid,matcher_score,n\n0,"));
    let evals: Vec<usize> = a.rows.iter().map(|r| r.matcher_evaluations[0]).collect();
    assert_eq!(evals, vec![5, 4, 0]);
    let off = evaluate_config(&GuidanceConfig { g: 0.0, ..base() }, None, &m.prompts, 2, &m.models()).unwrap();
    for (x, y) in a.rows[2].images.iter().zip(&off.images) {
        assert_eq!(x, y);
    }
}

#[test]
fn sweep_axes_parse_values() {
    let m = micro();
    let e = run_sweep(SweepAxis::Ensemble, &["a".into(), "a+b".into()], &base(), &m.prompts[..1], 1, &m.models()).unwrap();
    assert_eq!(e.rows[1].value, "a+b");
    assert!(run_sweep(SweepAxis::Ensemble, &["c".into()], &base(), &m.prompts, 1, &m.models()).is_err());
    assert!(run_sweep(SweepAxis::GradientMode, &["sideways".into()], &base(), &m.prompts, 1, &m.models()).is_err());
    assert!(run_sweep(SweepAxis::GuidanceWeight, &["x".into()], &base(), &m.prompts, 1, &m.models()).is_err());
    let modes = run_sweep(SweepAxis::InputMode, &["modified".into(), "noisy".into()], &base(), &m.prompts[..1], 1, &m.models());
    assert_eq!(modes.unwrap().rows.len(), 2);
    assert_eq!("input_mode".parse::<SweepAxis>().unwrap(), SweepAxis::InputMode);
    assert!("colour".parse::<SweepAxis>().is_err());
}
