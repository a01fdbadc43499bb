use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use upaint::corpus::{build_dataset, Dataset, Vocabulary};
use upaint::eval::{
    denoiser_heldout_mse, evaluate_config, extract_features, retrieval_accuracy, run_sweep, FeatureStats, SweepAxis,
    SweepModels, SweepResult,
};
use upaint::guidance::sample;
use upaint::image_io::write_image_grid;
use upaint::trainer::{
    denoiser_from_checkpoint, load_checkpoint, matcher_from_checkpoint, run_training, save_checkpoint, ModelKind,
    ModelSpec, TrainEvent,
};
use upaint::{Denoiser, Error, GuidanceConfig, Matcher, MatcherEnsemble, NoiseSchedule, Result};

use crate::config::{load_config, RunConfig};
use crate::{Cli, Command, GuidanceArgs};

const HELDOUT_SEED: u64 = 0;

/// Runs a parsed command line.
pub fn execute(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.global.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.global.seed {
        cfg.seed = Some(s);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::param(format!("cannot start worker threads: {e}")))?;
    let out = cli.global.out.as_deref();
    pool.install(|| match &cli.command {
        Command::GenData => gen_data(&cfg, out),
        Command::TrainDenoiser { resume } => train(&cfg, ModelKind::Denoiser, resume.as_deref(), out),
        Command::TrainMatcher { resume } => train(&cfg, ModelKind::Matcher, resume.as_deref(), out),
        Command::Sample { prompt, guidance } => sample_cmd(&cfg, prompt, guidance, out),
        Command::Sweep { axis, values, guidance } => sweep_cmd(&cfg, axis, values, guidance, out),
        Command::Eval { guidance } => eval_cmd(&cfg, guidance, out),
    })
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn gen_data(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let path = out.unwrap_or(&cfg.paths.dataset);
    ensure_parent(path)?;
    let d = &cfg.data;
    let ds = build_dataset(d.n_simple, d.n_complex, cfg.seed.unwrap_or(0), d.resolution, path)?;
    println!("wrote {} records to {}", ds.len(), path.display());
    Ok(())
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let ds = Dataset::load(&cfg.paths.dataset)?;
    if ds.vocab != Vocabulary::default() {
        return Err(Error::Compatibility(format!(
            "{} uses a different vocabulary",
            cfg.paths.dataset.display()
        )));
    }
    if ds.len() <= cfg.data.heldout {
        return Err(Error::Compatibility(format!(
            "{} has {} records, too few to hold out {}",
            cfg.paths.dataset.display(),
            ds.len(),
            cfg.data.heldout
        )));
    }
    Ok(ds)
}

fn heldout(cfg: &RunConfig) -> Result<Dataset> {
    Ok(load_dataset(cfg)?.split_tail(cfg.data.heldout).1)
}

fn train(cfg: &RunConfig, kind: ModelKind, resume: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let (spec, mut tc, default_out) = match kind {
        ModelKind::Denoiser => (
            ModelSpec::Denoiser {
                model: cfg.denoiser.clone(),
                schedule: cfg.schedule.clone(),
            },
            cfg.train_denoiser.clone(),
            cfg.paths.denoiser.clone(),
        ),
        ModelKind::Matcher => (
            ModelSpec::Matcher(cfg.matcher.clone()),
            cfg.train_matcher.clone(),
            cfg.paths.matchers.first().cloned().unwrap_or_else(|| PathBuf::from("matcher.upck")),
        ),
    };
    if let Some(s) = cfg.seed {
        tc.seed = s;
    }
    let path = out.map(Path::to_path_buf).unwrap_or(default_out);
    let resume = resume.map(load_checkpoint).transpose()?;
    let train = load_dataset(cfg)?.split_tail(cfg.data.heldout).0;
    ensure_parent(&path)?;
    let mut observer = |event: TrainEvent<'_>| -> Result<()> {
        match event {
            TrainEvent::Eval { step, loss } => info!("step {step} loss {loss:.5}"),
            TrainEvent::Checkpoint(ck) => {
                save_checkpoint(ck, &path)?;
                info!("step {} checkpoint written to {}", ck.step, path.display());
            }
        }
        Ok(())
    };
    let outcome = run_training(&train, &spec, &tc, resume.as_ref(), &mut observer)?;
    save_checkpoint(&outcome.checkpoint, &path)?;
    let first = outcome.checkpoint.step as usize - outcome.losses.len();
    let mut csv = String::from("step,loss\n");
    for (i, l) in outcome.losses.iter().enumerate() {
        csv.push_str(&format!("{},{l:.9e}\n", first + i + 1));
    }
    let mut loss_path = path.clone().into_os_string();
    loss_path.push(".losses.csv");
    write_file(Path::new(&loss_path), &csv)?;
    println!(
        "trained to step {}; final loss {}; wrote {}",
        outcome.checkpoint.step,
        outcome.losses.last().map_or("n/a".to_string(), |l| format!("{l:.5}")),
        path.display()
    );
    Ok(())
}

fn load_denoiser(path: &Path) -> Result<(Denoiser<f32>, NoiseSchedule)> {
    let (d, s) = denoiser_from_checkpoint(&load_checkpoint(path)?)?;
    Ok((d, s.build()?))
}

fn load_matcher(path: &Path) -> Result<Matcher<f32>> {
    matcher_from_checkpoint(&load_checkpoint(path)?)
}

fn load_ensemble(paths: &[PathBuf]) -> Result<MatcherEnsemble<f32>> {
    let members = paths
        .iter()
        .map(|p| {
            let name = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .ok_or_else(|| Error::param(format!("matcher path {} has no file name", p.display())))?;
            Ok((name, load_matcher(p)?))
        })
        .collect::<Result<Vec<_>>>()?;
    MatcherEnsemble::new(members)
}

fn guidance(cfg: &RunConfig, args: &GuidanceArgs) -> Result<GuidanceConfig> {
    let mut g = cfg.guidance.clone();
    if let Some(v) = args.g {
        g.g = v;
    }
    if let Some(v) = args.s {
        g.s = v;
    }
    if let Some(v) = args.skip_steps {
        g.skip_steps = v;
    }
    if let Some(v) = args.ddim_steps {
        g.ddim_steps = v;
    }
    if let Some(v) = args.gradient_mode {
        g.gradient_mode = v;
    }
    if let Some(s) = cfg.seed {
        g.seed = s;
    }
    g.validate()?;
    Ok(g)
}

fn sample_cmd(cfg: &RunConfig, prompt: &str, args: &GuidanceArgs, out: Option<&Path>) -> Result<()> {
    let g = guidance(cfg, args)?;
    let vocab = Vocabulary::default();
    vocab.encode(prompt)?;
    let (denoiser, sched) = load_denoiser(&cfg.paths.denoiser)?;
    let ensemble = if g.uses_matchers() {
        Some(load_ensemble(&cfg.paths.matchers)?)
    } else {
        None
    };
    let (image, trace) = sample(prompt, &vocab, &g, &sched, &denoiser, ensemble.as_ref())?;
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.paths.output.join("sample.png"));
    ensure_parent(&path)?;
    write_image_grid(&[image], &path, 1)?;
    let trace_path = path.with_extension("trace.csv");
    write_file(&trace_path, &trace.to_csv())?;
    println!("wrote {} and {}", path.display(), trace_path.display());
    Ok(())
}

/// Everything a sweep or evaluation scores against.
struct EvalInputs {
    denoiser: Denoiser<f32>,
    schedule: NoiseSchedule,
    ensemble: MatcherEnsemble<f32>,
    scorer: Matcher<f32>,
    reference: FeatureStats,
    heldout: Dataset,
    prompts: Vec<Vec<u16>>,
}

impl EvalInputs {
    fn load(cfg: &RunConfig) -> Result<Self> {
        let (denoiser, schedule) = load_denoiser(&cfg.paths.denoiser)?;
        let ensemble = load_ensemble(&cfg.paths.matchers)?;
        let scorer = load_matcher(&cfg.paths.scorer)?;
        let heldout = heldout(cfg)?;
        let prompts = distinct_captions(&heldout, cfg.eval.prompts)?;
        let n = cfg.eval.reference_images.min(heldout.len());
        let real: Vec<_> = heldout.records[..n].iter().map(|r| r.image.clone()).collect();
        let reference = extract_features(&real, &scorer)?;
        Ok(Self {
            denoiser,
            schedule,
            ensemble,
            scorer,
            reference,
            heldout,
            prompts,
        })
    }

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

/// The first `n` distinct captions in record order.
pub fn distinct_captions(ds: &Dataset, n: usize) -> Result<Vec<Vec<u16>>> {
    let mut out: Vec<Vec<u16>> = Vec::with_capacity(n);
    for r in &ds.records {
        if out.len() == n {
            break;
        }
        if !out.contains(&r.caption) {
            out.push(r.caption.clone());
        }
    }
    if out.len() < n {
        return Err(Error::param(format!("held-out set has only {} distinct captions, need {n}", out.len())));
    }
    Ok(out)
}

/// Per-sample scores, one column per axis value, for paired comparisons.
pub fn sample_scores_csv(res: &SweepResult) -> String {
    let mut out = String::from("sample");
    for r in &res.rows {
        out.push(',');
        out.push_str(&r.value);
    }
    out.push('\n');
    let n = res.rows.first().map_or(0, |r| r.scores.len());
    for k in 0..n {
        out.push_str(&k.to_string());
        for r in &res.rows {
            out.push_str(&format!(",{:.9e}", r.scores[k]));
        }
        out.push('\n');
    }
    out
}

fn sweep_cmd(cfg: &RunConfig, axis: &str, values: &[String], args: &GuidanceArgs, out: Option<&Path>) -> Result<()> {
    let axis: SweepAxis = axis.parse()?;
    let g = guidance(cfg, args)?;
    let dir = out.unwrap_or(&cfg.paths.output);
    let inputs = EvalInputs::load(cfg)?;
    let res = run_sweep(axis, values, &g, &inputs.prompts, cfg.eval.samples_per_prompt, &inputs.models())?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = res.to_csv();
    write_file(&dir.join(format!("sweep_{}.csv", axis.name())), &csv)?;
    write_file(&dir.join(format!("sweep_{}_samples.csv", axis.name())), &sample_scores_csv(&res))?;
    res.write_grids(dir, cfg.eval.grid_columns)?;
    print!("{csv}");
    Ok(())
}

fn eval_cmd(cfg: &RunConfig, args: &GuidanceArgs, out: Option<&Path>) -> Result<()> {
    let g = guidance(cfg, args)?;
    let dir = out.unwrap_or(&cfg.paths.output);
    let inputs = EvalInputs::load(cfg)?;
    let held = &inputs.heldout.records;
    let mse = denoiser_heldout_mse(
        &inputs.denoiser,
        &held[..cfg.eval.mse_records.min(held.len())],
        &inputs.schedule,
        HELDOUT_SEED,
    )?;
    let mut retrieval = serde_json::Map::new();
    for (name, m) in inputs.ensemble.members() {
        retrieval.insert(name.clone(), retrieval_accuracy(m, held, cfg.eval.distractors, HELDOUT_SEED)?.into());
    }
    let scorer_acc = retrieval_accuracy(&inputs.scorer, held, cfg.eval.distractors, HELDOUT_SEED)?;
    retrieval.insert("scorer".into(), scorer_acc.into());
    let row = evaluate_config(
        &g,
        Some(&inputs.ensemble),
        &inputs.prompts,
        cfg.eval.samples_per_prompt,
        &inputs.models(),
    )?;
    let report = serde_json::json!({
        "denoiser_mse": mse,
        "retrieval_top1": retrieval,
        "fid": row.fid,
        "matcher_score": row.matcher_score,
        "samples": row.n,
        "guidance": g,
    });
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(&dir.join("eval.json"), &text)?;
    write_image_grid(&row.images, &dir.join("eval_samples.png"), cfg.eval.grid_columns)?;
    println!("{text}");
    Ok(())
}
