use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use hitdvae::data::{
    preprocess, render_svg, synth_corpus, BodyEncoding, Corpus, MotionClip, Projection, RenderOptions, Split,
    SynthSpec,
};
use hitdvae::eval::{DistanceMode, MetricReport};
use hitdvae::generator::{generate as rollouts, GenerateOptions, RolloutMode};
use hitdvae::losses::PosePrior;
use hitdvae::pipeline::{labeled_split, score, sequence_seed, train_classifier, RunConfig};
use hitdvae::tensor::Checkpoint;
use hitdvae::trainer::{build_pose_prior, total_loss_gradcheck, Trainer, TrainingSet, GRADCHECK_STEP};
use hitdvae::{HitDvae, PoseSequence};
use serde::{Deserialize, Serialize};

use crate::record::{create_dir, io_err, load_config, read_json, sha256_file, write_json, RunRecord};
use crate::{
    CliError, CliResult, Distance, Encoding, EvalArgs, GenerateArgs, GradcheckArgs, Mode, PretrainFlowArgs,
    RenderArgs, SplitArg, SynthArgs, TrainArgs, View,
};

const GRADCHECK_TOLERANCE: f64 = 1e-4;

impl From<Mode> for RolloutMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Sample => RolloutMode::Sample,
            Mode::Mean => RolloutMode::Mean,
        }
    }
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

impl From<Distance> for DistanceMode {
    fn from(d: Distance) -> Self {
        match d {
            Distance::PerFrame => DistanceMode::PerFrame,
            Distance::Flattened => DistanceMode::Flattened,
        }
    }
}

impl From<View> for Projection {
    fn from(v: View) -> Self {
        match v {
            View::Front => Projection::Front,
            View::Side => Projection::Side,
            View::Top => Projection::Top,
        }
    }
}

/// Loads a corpus and checks it against the config's skeleton.
fn load_corpus(dir: &Path, config: &RunConfig) -> CliResult<(Corpus, String)> {
    let (corpus, _) = Corpus::load(dir)?;
    if corpus.skeleton != config.skeleton {
        return Err(CliError::Usage(format!(
            "corpus `{}` was built for a different skeleton than `skeleton` in the config",
            dir.display()
        )));
    }
    Ok((corpus, sha256_file(&dir.join("manifest.json"))?))
}

fn load_model(config: &RunConfig, path: &Path) -> CliResult<(HitDvae, String)> {
    let ck = Checkpoint::load(path)?;
    let mut model = HitDvae::new(config.model.clone(), 0)?;
    model.params.load_checkpoint(&ck).map_err(|e| {
        CliError::Usage(format!(
            "checkpoint `{}` does not fit the `model` section of the config: {e}",
            path.display()
        ))
    })?;
    Ok((model, sha256_file(path)?))
}

pub fn synth(a: &SynthArgs) -> CliResult<()> {
    let spec = match &a.config {
        Some(path) => SynthSpec {
            seed: a.seed,
            ..load_config(path)?.0.corpus
        },
        None => SynthSpec::standard(a.seed),
    };
    let corpus = synth_corpus(&spec)?;
    let encoding = match a.encoding {
        Encoding::Base64 => BodyEncoding::Base64,
        Encoding::Csv => BodyEncoding::Csv,
    };
    let manifest = corpus.save(&a.out, encoding)?;
    let mut record = RunRecord::new("synth", a.seed, &spec)?.arg("encoding", encoding);
    if let Some(path) = &a.config {
        record = record.input_file(path)?;
    }
    record.write(a.out.join("run.json"))?;
    log::info!("wrote {} clips to {}", manifest.clips.len(), a.out.display());
    println!("{}", manifest.corpus_sha256);
    Ok(())
}

pub fn pretrain_flow(a: &PretrainFlowArgs) -> CliResult<()> {
    let (mut config, config_hash) = load_config(&a.config)?;
    if let Some(seed) = a.seed {
        config.flow.seed = seed;
    }
    let (corpus, corpus_hash) = load_corpus(&a.corpus, &config)?;
    let train: Vec<PoseSequence> = labeled_split(&corpus, Split::Train, config.schedule.observed)?
        .into_iter()
        .map(|(s, _)| s)
        .collect();
    let (prior, report) = build_pose_prior(&train, &config.flow)?;
    if let Some(step) = report.diverged_at {
        log::warn!("flow training stopped at step {step} on a non-finite value");
    }
    create_dir(&a.out)?;
    prior.to_checkpoint().save(a.out.join("prior.ckpt"))?;
    let mut log = String::from("step,batch_log_prob\n");
    for (i, v) in report.batch_log_prob.iter().enumerate() {
        writeln!(log, "{i},{v}").expect("writing to a String");
    }
    let log_path = a.out.join("flow_log.csv");
    fs::write(&log_path, log).map_err(io_err(&log_path))?;
    RunRecord::new("pretrain-flow", config.flow.seed, &config.flow)?
        .arg("calibration", prior.calibration)
        .input(&a.config, config_hash)
        .input(&a.corpus, corpus_hash)
        .write(a.out.join("run.json"))?;
    log::info!("pose prior calibration {:.4}", prior.calibration);
    Ok(())
}

pub fn train(a: &TrainArgs) -> CliResult<()> {
    let (config, config_hash) = load_config(&a.config)?;
    let (corpus, corpus_hash) = load_corpus(&a.corpus, &config)?;
    let prior = PosePrior::from_checkpoint(&Checkpoint::load(&a.flow)?)?;
    let train: Vec<PoseSequence> = labeled_split(&corpus, Split::Train, config.schedule.observed)?
        .into_iter()
        .map(|(s, _)| s)
        .collect();
    let data = TrainingSet::new(train, &config.skeleton)?;
    let model = HitDvae::new(config.model.clone(), a.seed)?;
    let mut trainer = Trainer::new(
        model,
        config.schedule.clone(),
        config.weights.clone(),
        config.skeleton.clone(),
        prior,
        a.seed,
    )?;
    let mut record = RunRecord::new("train", a.seed, &config)?
        .input(&a.config, config_hash)
        .input(&a.corpus, corpus_hash)
        .input_file(&a.flow)?;
    if let Some(path) = &a.checkpoint {
        trainer.restore(&Checkpoint::load(path)?)?;
        record = record.input_file(path)?;
        log::info!("resuming at step {}", trainer.step);
    }
    create_dir(&a.out)?;
    record.write(a.out.join("run.json"))?;
    let epochs = trainer.run(&data, &a.out)?;
    if let Some(last) = epochs.last() {
        log::info!("finished epoch {} with mean loss {:.4}", last.epoch, last.mean_total);
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratedClip {
    pub clip: String,
    pub label: String,
    pub seeds: Vec<u64>,
    pub files: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationManifest {
    pub build: String,
    pub checkpoint_sha256: String,
    pub corpus_sha256: String,
    pub config: RunConfig,
    pub seed: u64,
    pub obs_frames: usize,
    pub horizon: Option<usize>,
    pub samples: usize,
    pub mode: RolloutMode,
    pub posterior_mean: bool,
    pub context_cap: Option<usize>,
    pub clips: Vec<GeneratedClip>,
}

pub fn generate(a: &GenerateArgs) -> CliResult<()> {
    let (config, _) = load_config(&a.config)?;
    let (corpus, corpus_hash) = load_corpus(&a.corpus, &config)?;
    let (model, checkpoint_hash) = load_model(&config, &a.checkpoint)?;
    let r = &a.rollout;
    let observed = r.obs_frames.unwrap_or(config.schedule.observed);
    let split: Split = a.split.into();
    let chosen: Vec<&MotionClip> = corpus
        .split(split)
        .filter(|c| a.clips.is_empty() || a.clips.contains(&c.id))
        .collect();
    if let Some(missing) = a.clips.iter().find(|id| !chosen.iter().any(|c| c.id == **id)) {
        return Err(CliError::Usage(format!(
            "clip `{missing}` is not in the {} split",
            format!("{split:?}").to_lowercase()
        )));
    }
    create_dir(&a.out)?;
    let mut entries = Vec::with_capacity(chosen.len());
    for (i, clip) in chosen.iter().enumerate() {
        let seq = preprocess(clip, observed)?;
        let horizon = a.horizon.unwrap_or(clip.frames - observed);
        let options = GenerateOptions {
            mode: r.mode.into(),
            posterior_mean: r.posterior_mean,
            context_cap: r.context_cap,
            ..GenerateOptions::new(horizon, r.samples, sequence_seed(r.seed, i))
        };
        let out = rollouts(&model, &seq, &options).map_err(|e| {
            CliError::Core(hitdvae::Error::InvalidArgument(format!("clip `{}`: {e}", clip.id)))
        })?;
        create_dir(&a.out.join(&clip.id))?;
        let mut files = Vec::with_capacity(out.samples.len());
        for (k, (sample, seed)) in out.samples.iter().zip(&out.seeds).enumerate() {
            let file = format!("{}/sample-{k:03}.clip", clip.id);
            MotionClip {
                id: format!("{}-sample-{k:03}", clip.id),
                skeleton: clip.skeleton.clone(),
                label: clip.label.clone(),
                fps: clip.fps,
                frames: sample.frames(),
                joints: sample.joints(),
                coords: sample.coords().to_vec(),
                source: format!("generated:{}:seed={seed}", clip.id),
            }
            .save(a.out.join(&file), BodyEncoding::Base64)?;
            files.push(file);
        }
        entries.push(GeneratedClip {
            clip: clip.id.clone(),
            label: clip.label.clone(),
            seeds: out.seeds,
            files,
        });
    }
    let manifest = GenerationManifest {
        build: hitdvae::trainer::build_id(),
        checkpoint_sha256: checkpoint_hash,
        corpus_sha256: corpus_hash,
        config,
        seed: r.seed,
        obs_frames: observed,
        horizon: a.horizon,
        samples: r.samples,
        mode: r.mode.into(),
        posterior_mean: r.posterior_mean,
        context_cap: r.context_cap,
        clips: entries,
    };
    write_json(&a.out.join("generations.json"), &manifest)?;
    log::info!(
        "wrote {} rollouts for {} clips",
        manifest.samples * manifest.clips.len(),
        manifest.clips.len()
    );
    Ok(())
}

/// Test sequences and their generations as written by `generate`.
fn read_generations(
    dir: &Path,
    corpus: &Corpus,
) -> CliResult<(Vec<(PoseSequence, usize)>, Vec<Vec<PoseSequence>>, GenerationManifest)> {
    let manifest: GenerationManifest = read_json(&dir.join("generations.json"))?;
    let observed = manifest.obs_frames;
    let test = labeled_split(corpus, Split::Test, observed)?;
    let ids: Vec<&str> = corpus.split(Split::Test).map(|c| c.id.as_str()).collect();
    let mut seqs = Vec::with_capacity(manifest.clips.len());
    let mut gens = Vec::with_capacity(manifest.clips.len());
    for entry in &manifest.clips {
        let i = ids
            .iter()
            .position(|id| *id == entry.clip)
            .ok_or_else(|| CliError::Usage(format!("generated clip `{}` is not in the test split", entry.clip)))?;
        seqs.push(test[i].clone());
        let samples = entry
            .files
            .iter()
            .map(|f| Ok(preprocess(&MotionClip::load(dir.join(f))?, observed)?))
            .collect::<CliResult<Vec<_>>>()?;
        gens.push(samples);
    }
    Ok((seqs, gens, manifest))
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    let (config, config_hash) = load_config(&a.config)?;
    let (corpus, corpus_hash) = load_corpus(&a.corpus, &config)?;
    let mut record = RunRecord::new("eval", a.seed.unwrap_or(0), &config)?
        .arg("distance", DistanceMode::from(a.distance))
        .arg("skip_classifier", a.skip_classifier)
        .input(&a.config, config_hash)
        .input(&a.corpus, corpus_hash);
    let (test, generated) = match (&a.generations, &a.checkpoint) {
        (Some(dir), _) => {
            let (test, gens, _) = read_generations(dir, &corpus)?;
            record = record.input_file(&dir.join("generations.json"))?;
            (test, gens)
        }
        (None, Some(path)) => {
            let (seed, samples) = match (a.seed, a.samples) {
                (Some(s), Some(k)) => (s, k),
                _ => {
                    return Err(CliError::Usage(
                        "`eval --checkpoint` needs `--seed` and `--samples`".into(),
                    ))
                }
            };
            let (model, hash) = load_model(&config, path)?;
            let observed = a.obs_frames.unwrap_or(config.schedule.observed);
            let test = labeled_split(&corpus, Split::Test, observed)?;
            let options = hitdvae::pipeline::EvalOptions {
                samples,
                seed,
                mode: a.mode.into(),
                distance: a.distance.into(),
            };
            let gens = hitdvae::pipeline::generate_all(&model, &test, &options)?;
            record = record
                .input(path, hash)
                .arg("samples", samples)
                .arg("obs_frames", observed)
                .arg("mode", RolloutMode::from(a.mode));
            (test, gens)
        }
        (None, None) => unreachable!("clap requires one of --generations and --checkpoint"),
    };
    let classifier = if a.skip_classifier {
        None
    } else {
        let observed = test[0].0.observed();
        let train = labeled_split(&corpus, Split::Train, observed)?;
        let held_out = labeled_split(&corpus, Split::Test, observed)?;
        let (clf, rep) = train_classifier(&config.classifier, &train, &held_out, corpus.class_names().len())?;
        for w in &rep.warnings {
            log::warn!("{w}");
        }
        if let Some(acc) = rep.held_out_accuracy {
            log::info!("classifier held-out accuracy {acc:.3}");
        }
        Some(clf)
    };
    let report = score(
        &test,
        &generated,
        &config.skeleton,
        classifier.as_ref(),
        a.distance.into(),
    )?;
    create_dir(&a.out)?;
    let csv = format!("{}\n{}\n", MetricReport::CSV_HEADER, report.csv_row());
    let csv_path = a.out.join("metrics.csv");
    fs::write(&csv_path, &csv).map_err(io_err(&csv_path))?;
    write_json(&a.out.join("report.json"), &report)?;
    record.write(a.out.join("run.json"))?;
    print!("{csv}");
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    let r = total_loss_gradcheck(a.seed)?;
    let pass = r.max_rel_error < GRADCHECK_TOLERANCE;
    let out = serde_json::json!({
        "max_rel_error": r.max_rel_error,
        "worst_index": r.worst_index,
        "coordinates": r.coordinates,
        "step": GRADCHECK_STEP,
        "tolerance": GRADCHECK_TOLERANCE,
        "seed": a.seed,
        "build": hitdvae::trainer::build_id(),
        "pass": pass,
    });
    println!("{out}");
    if pass {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!(
            "max relative error {:e} exceeds {GRADCHECK_TOLERANCE:e}",
            r.max_rel_error
        )))
    }
}

pub fn render(a: &RenderArgs) -> CliResult<()> {
    let clips = a
        .clips
        .iter()
        .map(|p| Ok(MotionClip::load(p)?))
        .collect::<CliResult<Vec<_>>>()?;
    let skeleton = &clips[0].skeleton;
    if let Some(c) = clips.iter().find(|c| c.skeleton != *skeleton) {
        return Err(CliError::Usage(format!("clip `{}` uses a different skeleton", c.id)));
    }
    let options = RenderOptions {
        projection: a.projection.into(),
        ..RenderOptions::new(a.frames.clone())
    };
    let samples: Vec<&[f64]> = clips.iter().map(|c| c.coords.as_slice()).collect();
    let svg = render_svg(skeleton, &samples, &options)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    fs::write(&a.out, svg).map_err(io_err(&a.out))?;
    let mut record = RunRecord::new("render", 0, &options)?;
    for p in &a.clips {
        record = record.input_file(p)?;
    }
    let mut manifest = a.out.clone().into_os_string();
    manifest.push(".json");
    record.write(PathBuf::from(manifest))
}
