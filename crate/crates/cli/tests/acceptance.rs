//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Trained models are shared between criteria.
//!
//! Set `UPAINT_ACCEPTANCE_OUT` to keep the sweep tables and contact sheets.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use upaint::corpus::{build_dataset, Dataset, Vocabulary, VOCAB_WORDS};
use upaint::eval::{
    denoiser_heldout_mse, extract_features, frechet_distance, matcher_scores, paired_difference, retrieval_accuracy,
    run_sweep, FeatureStats, SweepAxis, SweepModels, SweepResult, SweepRow,
};
use upaint::guidance::{
    classifier_free_eps, ensemble_gradient, ensemble_score_and_gradient, matcher_input, matcher_input_with,
    sample_tokens, DenoiserContext,
};
use upaint::matcher::ImageEncoderKind;
use upaint::trainer::{
    denoiser_from_checkpoint, load_checkpoint, matcher_from_checkpoint, run_training, save_checkpoint, Checkpoint,
    ModelSpec, TrainConfig, TrainEvent,
};
use upaint::transformer::TransformerConfig;
use upaint::{
    make_ddim_timesteps, make_linear_schedule, Denoiser, DenoiserConfig, Error, GradientMode, GuidanceConfig,
    InputMode, Matcher, MatcherConfig, MatcherEnsemble, NoiseSchedule, ScheduleConfig, ScoreScale, Tape, Tensor,
};
use upaint_cli::{EvalConfig, RunConfig};

type Outcome = std::result::Result<String, String>;

fn check(cond: bool, what: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what.into())
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn micro_text() -> TransformerConfig {
    TransformerConfig {
        vocab_size: VOCAB_WORDS.len(),
        max_tokens: 16,
        dim: 8,
        heads: 2,
        layers: 1,
        ff_mult: 2,
    }
}

fn micro_schedule() -> NoiseSchedule {
    make_linear_schedule(20, 0.01, 0.2).unwrap()
}

fn micro_denoiser(seed: u64) -> Denoiser<f64> {
    let cfg = DenoiserConfig {
        resolution: 8,
        base_width: 4,
        channel_mults: vec![1, 2],
        attention_levels: 1,
        groups: 2,
        attn_heads: 2,
        num_timesteps: 20,
        data_std: 0.5,
        text: micro_text(),
    };
    Denoiser::new(cfg, seed).unwrap().with_schedule(&micro_schedule()).unwrap()
}

fn micro_matcher(seed: u64, widths: &[usize]) -> Matcher<f64> {
    let cfg = MatcherConfig {
        resolution: 8,
        image_encoder: ImageEncoderKind::Cnn,
        widths: widths.to_vec(),
        groups: 2,
        embed_dim: 5,
        temperature: 0.07,
        learn_temperature: true,
        normalize: true,
        text: micro_text(),
    };
    Matcher::new(cfg, seed).unwrap()
}

fn caption(text: &str) -> Vec<u16> {
    Vocabulary::default().encode(text).unwrap()
}

// ---------------------------------------------------------------- criterion 1

fn exactness(_: &mut Shared) -> Outcome {
    let sched = ScheduleConfig::default().build().map_err(|e| e.to_string())?;
    let x0 = randn(&[1, 3, 4, 4], 1);
    let eps = randn(&[1, 3, 4, 4], 2);
    let mut worst_round = 0.0f64;
    let mut worst_mean = 0.0f64;
    for t in 1..=sched.num_steps() {
        let xt = sched.q_sample(&x0, t, &eps).unwrap().x;
        let back = sched.predict_x0(&xt, t, &eps).unwrap();
        for (a, b) in back.data().iter().zip(x0.data()) {
            worst_round = worst_round.max((a - b).abs() / b.abs().max(1.0));
        }
        let eps_hat = randn(&[1, 3, 4, 4], 100 + t as u64);
        let (mean, _) = sched.mu_sigma_from_eps(&xt, t, &eps_hat).unwrap();
        // posterior mean at x̂_0 assembled here from the schedule's raw values
        let ab = sched.alpha_bar(t).unwrap();
        let ab_prev = if t == 1 { 1.0 } else { sched.alpha_bar(t - 1).unwrap() };
        let beta = sched.beta(t).unwrap();
        let x0_hat = xt.zip_map(&eps_hat, |x, e| (x - (1.0 - ab).sqrt() * e) / ab.sqrt());
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let post = x0_hat.zip_map(&xt, |a, b| c0 * a + ct * b);
        for (a, b) in mean.data().iter().zip(post.data()) {
            worst_mean = worst_mean.max((a - b).abs() / b.abs().max(1.0));
        }
        check(
            sched.posterior_variance(t).unwrap() <= beta,
            format!("posterior variance exceeds beta at t={t}"),
        )?;
    }
    check(worst_round < 1e-6, format!("round trip error {worst_round:e}"))?;
    check(worst_mean < 1e-6, format!("mean equivalence error {worst_mean:e}"))?;

    let (xt, xh) = (randn(&[1, 3, 8, 8], 3), randn(&[1, 3, 8, 8], 4));
    check(matcher_input_with(&xt, &xh, 0.0).unwrap() == xt, "x_in at weight 0 is not x_t")?;
    check(matcher_input_with(&xt, &xh, 1.0).unwrap() == xh, "x_in at weight 1 is not x0_hat")?;
    let w = (1.0 - sched.alpha_bar(400).unwrap()).sqrt();
    let mid = matcher_input(&xt, &xh, 400, &sched).unwrap();
    for ((m, a), b) in mid.data().iter().zip(xt.data()).zip(xh.data()) {
        check(rel_err(*m, w * b + (1.0 - w) * a) < 1e-6 || (m - (w * b + (1.0 - w) * a)).abs() < 1e-15, "x_in interpolation")?;
    }
    let (ec, eu) = (randn(&[1, 3, 8, 8], 5), randn(&[1, 3, 8, 8], 6));
    check(classifier_free_eps(&ec, &eu, 1.0).unwrap() == ec, "s = 1 is not the conditional prediction")?;

    // g = 0 against a hand-rolled classifier-free DDIM loop, bit for bit
    let den = micro_denoiser(7);
    let msched = micro_schedule();
    let cap = caption("a red circle");
    let matchers = MatcherEnsemble::new(vec![("a".into(), micro_matcher(8, &[4, 6]))]).unwrap();
    for s in [1.0, 3.0] {
        let cfg = GuidanceConfig {
            g: 0.0,
            s,
            ddim_steps: 5,
            skip_steps: 0,
            seed: 9,
            ..Default::default()
        };
        let (img, trace) = sample_tokens(&cap, &cfg, &msched, &den, Some(&matchers)).unwrap();
        let cond = den.encode_text(&cap).unwrap();
        let null = den.null_condition();
        let mut x = Tensor::<f64>::randn(&[1, 3, 8, 8], &mut ChaCha8Rng::seed_from_u64(9));
        let ts = make_ddim_timesteps(20, 5).unwrap();
        for (i, &t) in ts.iter().enumerate() {
            let c = den.predict_eps(&x, t, &cond).unwrap();
            let e = if s == 1.0 {
                c
            } else {
                let u = den.predict_eps(&x, t, &null).unwrap();
                classifier_free_eps(&c, &u, s).unwrap()
            };
            x = msched.ddim_step(&x, t, ts.get(i + 1).copied().unwrap_or(0), &e, 0.0, None).unwrap();
        }
        check(img == x.clamp(-1.0, 1.0), format!("g = 0, s = {s} differs from plain guidance"))?;
        check(trace.matcher_evaluations == 0, "g = 0 evaluated matchers")?;
    }

    let single = MatcherEnsemble::new(vec![("a".into(), micro_matcher(10, &[4, 6]))]).unwrap();
    let triple = MatcherEnsemble::new((0..3).map(|i| (format!("m{i}"), micro_matcher(10, &[4, 6]))).collect()).unwrap();
    let cond = den.encode_text(&cap).unwrap();
    let null = den.null_condition();
    let ctx = DenoiserContext { denoiser: &den, cond: &cond, null: &null, s: 3.0 };
    let x = randn(&[1, 3, 8, 8], 11);
    for mode in [GradientMode::Full, GradientMode::Detached] {
        let a = ensemble_gradient(&x, 6, &cap, &single, &msched, &ctx, mode).unwrap();
        let b = ensemble_gradient(&x, 6, &cap, &triple, &msched, &ctx, mode).unwrap();
        check(a == b, format!("duplicated ensemble differs in {mode:?} mode"))?;
    }

    let same = FeatureStats::from_rows(&[vec![0.3, -1.0], vec![1.2, 0.5], vec![-0.7, 2.0]]).unwrap();
    let self_fd = frechet_distance(&same, &same).unwrap();
    check(self_fd.abs() < 1e-9, format!("Fréchet(a, a) = {self_fd:e}"))?;
    // sample std 1 around 0 and around 1
    let a = FeatureStats::from_rows(&[vec![-1.0], vec![1.0], vec![0.0]]).unwrap();
    let b = FeatureStats::from_rows(&[vec![0.0], vec![2.0], vec![1.0]]).unwrap();
    let fd = frechet_distance(&a, &b).unwrap();
    check(rel_err(fd, 1.0) < 1e-6, format!("1-D Fréchet {fd}, want 1"))?;
    Ok(format!(
        "round trip {worst_round:.1e}, mean equivalence {worst_mean:.1e} over 1000 steps; reductions bit-exact; 1-D Fréchet {fd:.9}"
    ))
}

// ---------------------------------------------------------------- criterion 2

fn central<F: Fn(&Tensor<f64>) -> f64>(f: F, x: &Tensor<f64>, dir: &Tensor<f64>, h: f64) -> f64 {
    let mut plus = x.clone();
    plus.axpy(h, dir);
    let mut minus = x.clone();
    minus.axpy(-h, dir);
    (f(&plus) - f(&minus)) / (2.0 * h)
}

fn gradients(_: &mut Shared) -> Outcome {
    const PROBES: usize = 12;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cap = caption("a small green star and a blue square at night, moonlit");
    let mut worst = [0.0f64; 3];

    let m = micro_matcher(22, &[4, 6]);
    let x = randn(&[1, 3, 8, 8], 23);
    let grad = m.score_gradient(&x, &cap).unwrap();
    for _ in 0..PROBES {
        let dir = randn(&[1, 3, 8, 8], rng.random());
        let numeric = central(|x| m.match_score(x, &cap).unwrap(), &x, &dir, 1e-6);
        worst[0] = worst[0].max(rel_err(grad.dot(&dir), numeric));
    }

    let den = micro_denoiser(24);
    let cond = den.encode_text(&cap).unwrap();
    for _ in 0..PROBES {
        let t = rng.random_range(1..=20);
        let x = randn(&[1, 3, 8, 8], rng.random());
        let w = randn(&[1, 3, 8, 8], rng.random());
        let dir = randn(&[1, 3, 8, 8], rng.random());
        let tape = Tape::new();
        let p = den.params().bind(&tape, false);
        let xv = tape.leaf(x.clone());
        let cv = upaint::denoiser::CondVars::from_embeddings(&tape, &[&cond]);
        let out = den.forward(&p, &xv, &[t], &cv);
        let g = tape.gradients_seeded(out, w.clone()).wrt(xv);
        let numeric = central(|x| den.predict_eps(x, t, &cond).unwrap().dot(&w), &x, &dir, 1e-6);
        worst[1] = worst[1].max(rel_err(g.dot(&dir), numeric));
    }

    let ens = MatcherEnsemble::new(vec![
        ("a".into(), micro_matcher(25, &[4, 6])),
        ("b".into(), micro_matcher(26, &[6, 4])),
    ])
    .unwrap();
    let null = den.null_condition();
    let ctx = DenoiserContext { denoiser: &den, cond: &cond, null: &null, s: 3.0 };
    let sched = micro_schedule();
    for _ in 0..PROBES {
        let t = rng.random_range(1..=20);
        let x = randn(&[1, 3, 8, 8], rng.random());
        let dir = randn(&[1, 3, 8, 8], rng.random());
        let g = ensemble_gradient(&x, t, &cap, &ens, &sched, &ctx, GradientMode::Full).unwrap();
        let score = |x: &Tensor<f64>| {
            ensemble_score_and_gradient(x, t, &cap, &ens, &sched, &ctx, GradientMode::Full, InputMode::Modified, ScoreScale::Dot)
                .unwrap()
                .0
        };
        worst[2] = worst[2].max(rel_err(g.dot(&dir), central(score, &x, &dir, 1e-6)));
    }
    let names = ["score_gradient", "predict_eps", "ensemble_gradient(full)"];
    for (n, w) in names.iter().zip(worst) {
        check(w < 1e-3, format!("{n}: worst relative error {w:e}"))?;
    }
    Ok(format!(
        "{PROBES} directional probes each; worst relative errors {:.1e}, {:.1e}, {:.1e}",
        worst[0], worst[1], worst[2]
    ))
}

// ---------------------------------------------------------------- criterion 3

fn forward_statistics(_: &mut Shared) -> Outcome {
    const N: usize = 100_000;
    let sched = ScheduleConfig::default().build().unwrap();
    let x0 = 0.7;
    let mut lines = Vec::new();
    for (k, t) in [1usize, 100, 400, 700, 1000].into_iter().enumerate() {
        let eps = randn(&[N], 31 + k as u64);
        let xt = sched.q_sample(&Tensor::full(&[N], x0), t, &eps).unwrap().x;
        let n = N as f64;
        let mean = xt.data().iter().sum::<f64>() / n;
        let var = xt.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        let ab = sched.alpha_bar(t).unwrap();
        let (want_mean, want_var) = (ab.sqrt() * x0, 1.0 - ab);
        let se_mean = (want_var / n).sqrt();
        let se_var = want_var * (2.0 / (n - 1.0)).sqrt();
        let zm = (mean - want_mean) / se_mean;
        let zv = (var - want_var) / se_var;
        check(zm.abs() < 3.0 && zv.abs() < 3.0, format!("t={t}: mean z {zm:.2}, variance z {zv:.2}"))?;
        lines.push(format!("t={t} z=({zm:+.2},{zv:+.2})"));
    }
    Ok(format!("{N} draws; {}", lines.join(" ")))
}

// ---------------------------------------------------------------- shared models

const DENOISER_STEPS: u64 = 2500;
const MATCHER_STEPS: u64 = 500;
const PROMPTS: usize = 20;
const SEEDS_PER_PROMPT: usize = 16;
const SWEEP_SEED: u64 = 2024;

struct Trained {
    dir: PathBuf,
    config_path: PathBuf,
    heldout: Dataset,
    denoiser: Denoiser<f32>,
    schedule: NoiseSchedule,
    ensemble: MatcherEnsemble<f32>,
    scorer: Matcher<f32>,
    reference: FeatureStats,
    prompts: Vec<Vec<u16>>,
    denoiser_losses: Vec<f64>,
    matcher_losses: Vec<(String, Vec<f64>)>,
}

impl Trained {
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

struct Shared {
    /// Model files and config; kept when `out` is set.
    work: PathBuf,
    out: Option<PathBuf>,
    trained: Option<Trained>,
    /// Rows for g = 0, 5, 10 under the base guidance config.
    weight_rows: Option<Vec<SweepRow>>,
}

impl Shared {
    fn trained(&self) -> std::result::Result<&Trained, String> {
        self.trained.as_ref().ok_or_else(|| "no trained models (training viability failed)".to_string())
    }

    fn save_sweep(&self, res: &SweepResult, name: &str) {
        if let Some(dir) = &self.out {
            fs::create_dir_all(dir).unwrap();
            fs::write(dir.join(format!("{name}.csv")), res.to_csv()).unwrap();
            res.write_grids(dir, 16).unwrap();
        }
    }
}

fn base_guidance() -> GuidanceConfig {
    GuidanceConfig {
        seed: SWEEP_SEED,
        ..Default::default()
    }
}

fn train(dir: &Path) -> Result<Trained, Error> {
    let data_path = dir.join("data.upds");
    let ds = build_dataset(5000, 5000, 1, 32, &data_path)?;
    let (train, heldout) = ds.split_tail(500);
    let started = Instant::now();
    let progress = |label: String| {
        move |e: TrainEvent<'_>| {
            if let TrainEvent::Eval { step, loss } = e {
                eprintln!("  {label} step {step:>5} loss {loss:.4} ({:.0?})", started.elapsed());
            }
            Ok(())
        }
    };

    let model = DenoiserConfig {
        base_width: 16,
        text: TransformerConfig {
            dim: 64,
            ..DenoiserConfig::default().text
        },
        ..Default::default()
    };
    let spec = ModelSpec::Denoiser {
        model: model.clone(),
        schedule: ScheduleConfig::default(),
    };
    let tc = TrainConfig {
        steps: DENOISER_STEPS,
        eval_interval: 500,
        seed: 1,
        ..Default::default()
    };
    let out = run_training(&train, &spec, &tc, None, &mut progress("denoiser".into()))?;
    let den_path = dir.join("denoiser.upck");
    save_checkpoint(&out.checkpoint, &den_path)?;
    let denoiser_losses = out.losses;
    let (denoiser, sc) = denoiser_from_checkpoint(&out.checkpoint)?;
    let schedule = sc.build()?;

    // guidance members differ in width and seed; the scorer stays out of guidance
    let members = [("matcher_a", vec![16, 32, 64, 64], 11), ("matcher_b", vec![8, 16, 32, 32], 12), ("scorer", vec![16, 32, 64, 64], 13)];
    let mut loaded = Vec::new();
    let mut matcher_losses = Vec::new();
    for (name, widths, seed) in members {
        let spec = ModelSpec::Matcher(MatcherConfig {
            widths,
            ..Default::default()
        });
        let tc = TrainConfig {
            batch_size: 64,
            steps: MATCHER_STEPS,
            eval_interval: 100,
            seed,
            ..Default::default()
        };
        let out = run_training(&train, &spec, &tc, None, &mut progress(name.into()))?;
        save_checkpoint(&out.checkpoint, &dir.join(format!("{name}.upck")))?;
        matcher_losses.push((name.to_string(), out.losses));
        loaded.push((name.to_string(), matcher_from_checkpoint(&out.checkpoint)?));
    }
    let scorer = loaded.pop().unwrap().1;
    let ensemble = MatcherEnsemble::new(loaded)?;

    let real: Vec<Tensor<f32>> = heldout.records.iter().map(|r| r.image.clone()).collect();
    let reference = extract_features(&real, &scorer)?;
    let mut prompts: Vec<Vec<u16>> = Vec::new();
    for r in &heldout.records {
        if prompts.len() < PROMPTS && !prompts.contains(&r.caption) {
            prompts.push(r.caption.clone());
        }
    }

    let run = RunConfig {
        paths: upaint_cli::PathsConfig {
            dataset: data_path,
            denoiser: den_path,
            matchers: vec![dir.join("matcher_a.upck"), dir.join("matcher_b.upck")],
            scorer: dir.join("scorer.upck"),
            output: dir.join("out"),
        },
        denoiser: model,
        eval: EvalConfig {
            prompts: 2,
            samples_per_prompt: 2,
            ..Default::default()
        },
        ..Default::default()
    };
    run.validate()?;
    let config_path = dir.join("config.json");
    fs::write(&config_path, serde_json::to_string_pretty(&run).unwrap()).map_err(|e| Error::io(&config_path, e))?;

    Ok(Trained {
        dir: dir.to_path_buf(),
        config_path,
        heldout,
        denoiser,
        schedule,
        ensemble,
        scorer,
        reference,
        prompts,
        denoiser_losses,
        matcher_losses,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// ---------------------------------------------------------------- criterion 4

fn training_viability(sh: &mut Shared) -> Outcome {
    let dir = sh.work.clone();
    fs::create_dir_all(&dir).unwrap();
    let started = Instant::now();
    let tr = train(&dir).map_err(|e| format!("training failed: {e}"))?;
    let train_time = started.elapsed();
    let held = &tr.heldout.records;
    let mse = denoiser_heldout_mse(&tr.denoiser, held, &tr.schedule, 5).map_err(|e| e.to_string())?;
    let mut retrieval = Vec::new();
    for (name, m) in tr.ensemble.members().iter().map(|(n, m)| (n.as_str(), m)).chain([("scorer", &tr.scorer)]) {
        retrieval.push((name.to_string(), retrieval_accuracy(m, held, 16, 5).map_err(|e| e.to_string())?));
    }
    let mut notes = Vec::new();
    let mut ok = mse < 0.15 && DENOISER_STEPS <= 15_000;
    ok &= retrieval.iter().all(|(_, r)| *r > 0.6);

    // post-training properties of the trained models
    let x0 = held[0].image.clone();
    let eps = Tensor::<f32>::randn(x0.shape(), &mut ChaCha8Rng::seed_from_u64(41));
    let null = tr.denoiser.null_condition();
    let mut sens = 0.0;
    for r in &held[..16] {
        let xt = tr.schedule.q_sample(&r.image, 500, &eps).unwrap().x;
        let c = tr.denoiser.encode_text(&r.caption).unwrap();
        let a = tr.denoiser.predict_eps(&xt, 500, &c).unwrap();
        let b = tr.denoiser.predict_eps(&xt, 500, &null).unwrap();
        sens += a.cast::<f64>().sub(&b.cast::<f64>()).data().iter().map(|v| v.abs()).sum::<f64>() / a.len() as f64;
    }
    sens /= 16.0;
    let empty = tr.denoiser.encode_text(&[]).unwrap();
    let null_gap = empty.pooled.sub(&null.pooled).max_abs() as f64;
    let sub = [
        ("conditioning changes ε", sens > 1e-6, format!("{sens:.2e}")),
        ("null differs from empty caption", null_gap > 1e-6, format!("{null_gap:.2e}")),
    ];
    for (what, pass, v) in sub {
        ok &= pass;
        notes.push(format!("{what} {v}{}", if pass { "" } else { " FAILED" }));
    }

    let images: Vec<Tensor<f32>> = held.iter().map(|r| r.image.clone()).collect();
    let caps: Vec<&[u16]> = held.iter().map(|r| r.caption.as_slice()).collect();
    let shuffled: Vec<&[u16]> = (0..caps.len()).map(|i| caps[(i + 1) % caps.len()]).collect();
    for (name, m) in tr.ensemble.members().iter().map(|(n, m)| (n.as_str(), m)).chain([("scorer", &tr.scorer)]) {
        let matched = mean(&matcher_scores(&images, &caps, m).unwrap());
        let mixed = mean(&matcher_scores(&images, &shuffled, m).unwrap());
        let emb: Vec<Tensor<f32>> = tr.prompts.iter().map(|p| m.embed_caption(p).unwrap()).collect();
        let distinct = (0..emb.len()).all(|i| (0..i).all(|j| emb[i].sub(&emb[j]).max_abs() > 1e-6));
        ok &= matched > mixed && distinct;
        notes.push(format!(
            "{name}: matched {matched:.3} > shuffled {mixed:.3}{}{}",
            if matched > mixed { "" } else { " FAILED" },
            if distinct { "" } else { ", duplicate caption embeddings FAILED" }
        ));
    }
    let mut curves = vec![("denoiser".to_string(), &tr.denoiser_losses)];
    curves.extend(tr.matcher_losses.iter().map(|(n, l)| (n.clone(), l)));
    for (name, l) in curves {
        let (first, at500) = (mean(&l[..20]), mean(&l[480..500]));
        ok &= at500 < first;
        notes.push(format!("{name} loss {first:.3} -> {at500:.3} by step 500{}", if at500 < first { "" } else { " FAILED" }));
    }

    let detail = format!(
        "denoiser held-out MSE {mse:.4} after {DENOISER_STEPS} steps (< 0.15); retrieval top-1 among 16: {}; trained in {:.1} min\n{}",
        retrieval.iter().map(|(n, r)| format!("{n} {:.1}%", 100.0 * r)).collect::<Vec<_>>().join(", "),
        train_time.as_secs_f64() / 60.0,
        notes.iter().map(|n| format!("        {n}")).collect::<Vec<_>>().join("\n")
    );
    sh.trained = Some(tr);
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- criterion 5

fn table(res: &SweepResult) -> String {
    res.rows
        .iter()
        .map(|r| format!("{}: score {:.4} fid {:.3}", r.value, r.matcher_score, r.fid))
        .collect::<Vec<_>>()
        .join("; ")
}

fn guidance_weight(sh: &mut Shared) -> Outcome {
    let tr = sh.trained()?;
    let values = ["0", "5", "10"].map(String::from);
    let res = run_sweep(SweepAxis::GuidanceWeight, &values, &base_guidance(), &tr.prompts, SEEDS_PER_PROMPT, &tr.models())
        .map_err(|e| e.to_string())?;
    sh.save_sweep(&res, "guidance_weight");
    let r = &res.rows;
    check(r[0].n == PROMPTS * SEEDS_PER_PROMPT, format!("{} samples per value", r[0].n))?;
    let (d, se) = paired_difference(&r[0].scores, &r[2].scores).unwrap();
    let (d1, se1) = paired_difference(&r[0].scores, &r[1].scores).unwrap();
    let (d2, se2) = paired_difference(&r[1].scores, &r[2].scores).unwrap();
    let detail = format!(
        "{}; 0->10 {d:+.4} ± {se:.4}, 0->5 {d1:+.4} ± {se1:.4}, 5->10 {d2:+.4} ± {se2:.4} over {} pairs",
        table(&res),
        r[0].n
    );
    let increasing = r[0].matcher_score < r[1].matcher_score && r[1].matcher_score < r[2].matcher_score;
    sh.weight_rows = Some(res.rows);
    if increasing && d > 2.0 * se {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn weight_row(sh: &Shared, i: usize) -> std::result::Result<SweepRow, String> {
    sh.weight_rows
        .as_ref()
        .map(|r| r[i].clone())
        .ok_or_else(|| "guidance-weight rows unavailable".to_string())
}

// ---------------------------------------------------------------- criterion 6

fn input_mode(sh: &mut Shared) -> Outcome {
    let tr = sh.trained()?;
    // the x_in row is the g = 10 row of the weight sweep: same config and seeds
    let mut modified = weight_row(sh, 2)?;
    modified.value = "modified".into();
    let noisy = run_sweep(SweepAxis::InputMode, &["noisy".into()], &base_guidance(), &tr.prompts, SEEDS_PER_PROMPT, &tr.models())
        .map_err(|e| e.to_string())?;
    let res = SweepResult {
        axis: SweepAxis::InputMode,
        rows: vec![modified, noisy.rows.into_iter().next().unwrap()],
    };
    sh.save_sweep(&res, "input_mode");
    let (d, se) = paired_difference(&res.rows[1].scores, &res.rows[0].scores).unwrap();
    let detail = format!("{}; x_in − x_t {d:+.4} ± {se:.4}", table(&res));
    if res.rows[0].matcher_score >= res.rows[1].matcher_score {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- criterion 7

fn skip_schedule(sh: &mut Shared) -> Outcome {
    let tr = sh.trained()?;
    let base = base_guidance();
    check(base.ddim_steps == 50 && base.skip_steps == 10 && base.g == 10.0, "unexpected base guidance")?;
    let fresh = run_sweep(SweepAxis::SkipSteps, &["0".into(), "50".into()], &base, &tr.prompts, SEEDS_PER_PROMPT, &tr.models())
        .map_err(|e| e.to_string())?;
    let mut ten = weight_row(sh, 2)?;
    ten.value = "10".into();
    let mut rows = fresh.rows;
    rows.insert(1, ten);
    let res = SweepResult {
        axis: SweepAxis::SkipSteps,
        rows,
    };
    sh.save_sweep(&res, "skip_steps");
    for r in &res.rows {
        let skip: usize = r.value.parse().unwrap();
        check(
            r.matcher_evaluations.iter().all(|&e| e == 50 - skip),
            format!("skip {skip}: evaluations {:?}", &r.matcher_evaluations[..4]),
        )?;
    }
    let unguided = weight_row(sh, 0)?;
    check(
        res.rows[2].images.iter().zip(&unguided.images).all(|(a, b)| a.data() == b.data()),
        "skip 50 differs from g = 0",
    )?;
    Ok(format!(
        "evaluations = 50 − skip for all {} samples per row; skip 50 ≡ g = 0 bit-exact; {}",
        res.rows[0].n,
        table(&res)
    ))
}

// ---------------------------------------------------------------- criterion 8

fn binary(args: &[&str]) -> std::result::Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_upaint"))
        .args(args)
        .env("UPAINT_LOG", "error")
        .stdout(std::process::Stdio::null())
        .status()
        .map_err(|e| e.to_string())?;
    check(status.success(), format!("upaint {} exited with {status}", args.join(" ")))
}

fn determinism(sh: &mut Shared) -> Outcome {
    let tr = sh.trained()?;
    let c = tr.config_path.to_str().unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let png = tr.dir.join(format!("det_{run}.png"));
        binary(&["--config", c, "--threads", "1", "--seed", "7", "--out", png.to_str().unwrap(), "sample", "--prompt", "a red circle and a small blue star"])?;
        let sweep = tr.dir.join(format!("det_sweep_{run}"));
        binary(&["--config", c, "--threads", "1", "--out", sweep.to_str().unwrap(), "sweep", "--axis", "guidance_weight", "--values", "0,5,10"])?;
        outputs.push((
            fs::read(&png).unwrap(),
            fs::read(png.with_extension("trace.csv")).unwrap(),
            fs::read(sweep.join("sweep_guidance_weight.csv")).unwrap(),
            fs::read(sweep.join("sweep_guidance_weight_samples.csv")).unwrap(),
        ));
    }
    let (a, b) = (&outputs[0], &outputs[1]);
    check(a.0 == b.0, "sample PNG differs between runs")?;
    check(a.1 == b.1, "sample trace differs between runs")?;
    check(a.2 == b.2 && a.3 == b.3, "sweep CSV differs between runs")?;
    let rows = String::from_utf8_lossy(&a.2).lines().count() - 1;
    check(rows == 3, format!("sweep CSV has {rows} rows"))?;
    Ok(format!("sample PNG ({} bytes) and trace identical; 3-row sweep CSVs identical", a.0.len()))
}

// ---------------------------------------------------------------- criterion 9

fn is_format_error<T: std::fmt::Debug>(r: &std::result::Result<T, Error>) -> bool {
    matches!(r, Err(Error::Format { .. }))
}

fn corruptions(len: usize) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let mut cuts = vec![0, 1, 4, 5, 9, 16, 64, len / 2, len - 5, len - 1];
    cuts.extend((0..10).map(|_| rng.random_range(0..len)));
    let mut flips = vec![0, 2, 4, 5, 7, 9, len - 1, len - 3];
    flips.extend((0..24).map(|_| rng.random_range(0..len)));
    (cuts, flips)
}

fn persistence(sh: &mut Shared) -> Outcome {
    let tr = sh.trained()?;
    let mut checked = 0;
    for name in ["denoiser", "matcher_a", "scorer"] {
        let path = tr.dir.join(format!("{name}.upck"));
        let bytes = fs::read(&path).unwrap();
        let ck = load_checkpoint(&path).map_err(|e| e.to_string())?;
        check(ck.to_bytes() == bytes, format!("{name} checkpoint does not re-serialize byte-exactly"))?;
        let copy = tr.dir.join(format!("{name}.copy.upck"));
        save_checkpoint(&ck, &copy).unwrap();
        check(fs::read(&copy).unwrap() == bytes, format!("{name} checkpoint copy differs"))?;
        let (cuts, flips) = corruptions(bytes.len());
        for &c in &cuts {
            let r = panic::catch_unwind(|| Checkpoint::from_bytes(&bytes[..c]));
            check(matches!(&r, Ok(r) if is_format_error(r)), format!("{name} truncated to {c} bytes: {r:?}"))?;
            checked += 1;
        }
        for &f in &flips {
            let mut bad = bytes.clone();
            bad[f] ^= 0x5a;
            let r = panic::catch_unwind(|| Checkpoint::from_bytes(&bad));
            check(matches!(&r, Ok(r) if is_format_error(r)), format!("{name} byte {f} flipped: not a format error"))?;
            checked += 1;
        }
    }

    let path = tr.dir.join("data.upds");
    let bytes = fs::read(&path).unwrap();
    let ds = Dataset::load(&path).map_err(|e| e.to_string())?;
    check(ds.to_bytes().unwrap() == bytes, "dataset does not re-serialize byte-exactly")?;
    let (cuts, flips) = corruptions(bytes.len());
    for &c in &cuts {
        let r = panic::catch_unwind(|| Dataset::from_bytes(&bytes[..c]));
        check(matches!(&r, Ok(r) if is_format_error(r)), format!("dataset truncated to {c} bytes"))?;
        checked += 1;
    }
    let mut undetected = 0;
    for &f in &flips {
        let mut bad = bytes.clone();
        bad[f] ^= 0x5a;
        match panic::catch_unwind(|| Dataset::from_bytes(&bad)) {
            Err(_) => return Err(format!("dataset byte {f} flipped: panic")),
            Ok(Ok(_)) if f < 16 => return Err(format!("dataset header byte {f} flipped: accepted")),
            Ok(Ok(_)) => undetected += 1,
            Ok(Err(Error::Format { .. })) => {}
            Ok(Err(e)) => return Err(format!("dataset byte {f} flipped: {e}")),
        }
        checked += 1;
    }
    Ok(format!(
        "3 checkpoints and a {:.0} MB dataset round-trip byte-exactly; {checked} corruptions, no panics, all format errors except {undetected} in-range payload flips",
        bytes.len() as f64 / 1e6
    ))
}

// ---------------------------------------------------------------- driver

type Criterion = fn(&mut Shared) -> Outcome;

fn main() {
    // keep per-criterion panics to their own line
    panic::set_hook(Box::new(|info| eprintln!("  panic: {info}")));
    let out = std::env::var_os("UPAINT_ACCEPTANCE_OUT").map(PathBuf::from);
    let tmp = tempfile::tempdir().unwrap();
    let mut shared = Shared {
        work: out.as_ref().map_or_else(|| tmp.path().to_path_buf(), |d| d.join("models")),
        out,
        trained: None,
        weight_rows: None,
    };
    let criteria: [(&str, Duration, Criterion); 9] = [
        ("exactness", Duration::from_secs(60), exactness),
        ("gradients", Duration::from_secs(120), gradients),
        ("forward-process statistics", Duration::from_secs(120), forward_statistics),
        ("training viability", Duration::from_secs(40 * 60), training_viability),
        ("guidance-weight trend", Duration::from_secs(20 * 60), guidance_weight),
        ("modified-input effect", Duration::from_secs(15 * 60), input_mode),
        ("skip-schedule mechanism", Duration::from_secs(15 * 60), skip_schedule),
        ("determinism", Duration::from_secs(5 * 60), determinism),
        ("persistence", Duration::from_secs(60), persistence),
    ];
    let total = Instant::now();
    let mut failed = 0;
    for (i, (name, budget, f)) in criteria.into_iter().enumerate() {
        let started = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(|| f(&mut shared)))
            .unwrap_or_else(|_| Err("panicked".to_string()));
        let took = started.elapsed();
        let (pass, detail) = match outcome {
            Ok(d) if took <= budget => (true, d),
            Ok(d) => (false, format!("{d}; over the {:.0} s budget", budget.as_secs_f64())),
            Err(d) => (false, d),
        };
        failed += usize::from(!pass);
        println!(
            "{} {}. {name} ({:.1} s): {detail}",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            took.as_secs_f64()
        );
    }
    println!("{} of 9 criteria passed in {:.1} min", 9 - failed, total.elapsed().as_secs_f64() / 60.0);
    drop(tmp);
    if failed > 0 {
        std::process::exit(1);
    }
}
