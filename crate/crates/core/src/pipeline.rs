//! End-to-end glue shared by the command-line tool and the test suites:
//! the run configuration, corpus splitting, batch generation and scoring.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{preprocess, Corpus, Skeleton, Split, SynthSpec};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, fid, recognition_accuracy, ActionClassifier, ClassifierConfig, ClassifierReport, DistanceMode,
    EvalCase, FeatureStats, LabeledSequence, MetricReport,
};
use crate::generator::{generate, GenerateOptions, RolloutMode};
use crate::losses::{select_pseudo_gt, LossWeights};
use crate::model::{HitDvae, ModelConfig, PoseSequence};
use crate::trainer::{FlowSchedule, TrainSchedule};

/// Every setting of a run, one section per component. Unknown keys are
/// rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: SynthSpec,
    pub skeleton: Skeleton,
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    pub weights: LossWeights,
    pub flow: FlowSchedule,
    pub classifier: ClassifierConfig,
}

impl RunConfig {
    /// Desk-scale configuration for the synthetic corpus.
    pub fn small(seed: u64) -> Self {
        let schedule = TrainSchedule::small();
        Self {
            corpus: SynthSpec::standard(seed),
            skeleton: Skeleton::synthetic(),
            model: ModelConfig::small(9, schedule.w_window),
            schedule,
            weights: LossWeights::humaneva(),
            flow: FlowSchedule::standard(seed),
            classifier: ClassifierConfig::standard(seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.skeleton.validate()?;
        self.model.validate()?;
        self.schedule.validate()?;
        self.weights.validate()?;
        if self.model.joints != self.skeleton.joint_count() {
            return Err(Error::Config(format!(
                "`model.joints` is {} but the skeleton has {} joints",
                self.model.joints,
                self.skeleton.joint_count()
            )));
        }
        if self.model.w_window != self.schedule.w_window {
            return Err(Error::Config(format!(
                "`model.w_window` ({}) and `schedule.w_window` ({}) differ",
                self.model.w_window, self.schedule.w_window
            )));
        }
        if self.schedule.frames != self.corpus.frames {
            return Err(Error::Config(format!(
                "`schedule.frames` ({}) and `corpus.frames` ({}) differ",
                self.schedule.frames, self.corpus.frames
            )));
        }
        Ok(())
    }
}

/// Preprocessed clips of one split with their class indices.
pub fn labeled_split(corpus: &Corpus, split: Split, observed: usize) -> Result<Vec<(PoseSequence, usize)>> {
    let names = corpus.class_names();
    corpus
        .split(split)
        .map(|c| {
            let label = names
                .iter()
                .position(|n| *n == c.label)
                .ok_or_else(|| Error::InvalidArgument(format!("clip `{}` has unknown label `{}`", c.id, c.label)))?;
            Ok((preprocess(c, observed)?, label))
        })
        .collect()
}

/// Future segments of real sequences, as classifier input.
pub fn futures(seqs: &[(PoseSequence, usize)]) -> Vec<LabeledSequence> {
    seqs.iter().map(|(s, l)| LabeledSequence::future(s, *l)).collect()
}

/// The classifier used for accuracy and FID, trained on real futures.
pub fn train_classifier(
    config: &ClassifierConfig,
    train: &[(PoseSequence, usize)],
    held_out: &[(PoseSequence, usize)],
    classes: usize,
) -> Result<(ActionClassifier, ClassifierReport)> {
    ActionClassifier::train(config.clone(), &futures(train), &futures(held_out), classes)
}

/// Noise seed for the rollouts of test sequence `index`; rollout `k` then
/// uses this value ⊕ k.
pub fn sequence_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add((index as u64) << 32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    pub samples: usize,
    pub seed: u64,
    pub mode: RolloutMode,
    pub distance: DistanceMode,
}

/// `K` rollouts for every sequence, predicting its whole future.
pub fn generate_all(
    model: &HitDvae,
    seqs: &[(PoseSequence, usize)],
    options: &EvalOptions,
) -> Result<Vec<Vec<PoseSequence>>> {
    seqs.iter()
        .enumerate()
        .map(|(i, (s, _))| {
            let opts = GenerateOptions {
                mode: options.mode,
                ..GenerateOptions::new(s.generated(), options.samples, sequence_seed(options.seed, i))
            };
            Ok(generate(model, s, &opts)?.samples)
        })
        .collect()
}

/// Scores generated futures against the real test sequences. Pseudo ground
/// truths of each sequence are the test sequences (itself included) sharing
/// its last observed pose. Accuracy and FID need a classifier.
pub fn score(
    test: &[(PoseSequence, usize)],
    generated: &[Vec<PoseSequence>],
    skeleton: &Skeleton,
    classifier: Option<&ActionClassifier>,
    distance: DistanceMode,
) -> Result<MetricReport> {
    if test.len() != generated.len() || test.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} test sequences but {} generation sets",
            test.len(),
            generated.len()
        )));
    }
    let plain: Vec<PoseSequence> = test.iter().map(|(s, _)| s.clone()).collect();
    let cases = test
        .par_iter()
        .zip(generated)
        .enumerate()
        .map(|(i, ((s, _), gens))| {
            if let Some(g) = gens.iter().find(|g| g.frames() != s.frames() || g.observed() != s.observed()) {
                return Err(Error::InvalidArgument(format!(
                    "generation for sequence {i} has {} frames ({} observed), expected {} ({})",
                    g.frames(),
                    g.observed(),
                    s.frames(),
                    s.observed()
                )));
            }
            let mm = select_pseudo_gt(s, &plain, skeleton, s.observed() - 1, None)?;
            Ok(EvalCase {
                samples: gens.iter().map(|g| g.future().to_vec()).collect(),
                gt: s.future().to_vec(),
                pseudo: mm.sequences().iter().map(|p| p.future().to_vec()).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = evaluate(&cases, test[0].0.frame_len(), distance)?;
    if let Some(clf) = classifier {
        let gen: Vec<LabeledSequence> = test
            .iter()
            .zip(generated)
            .flat_map(|((_, l), gens)| gens.iter().map(move |g| LabeledSequence::future(g, *l)))
            .collect();
        report.acc = Some(recognition_accuracy(clf, &gen)?);
        let real = FeatureStats::from_features(&clf.features(&futures(test))?)?;
        let fake = FeatureStats::from_features(&clf.features(&gen)?)?;
        report.fid = Some(fid(&real, &fake)?);
    }
    Ok(report)
}

/// Real futures with their frames permuted in time: right poses, wrong
/// dynamics.
pub fn shuffled_frames(seqs: &[LabeledSequence], seed: u64) -> Vec<LabeledSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    seqs.iter()
        .map(|s| {
            let g = s.frames.len() / s.width;
            let mut order: Vec<usize> = (0..g).collect();
            order.shuffle(&mut rng);
            LabeledSequence {
                frames: order
                    .iter()
                    .flat_map(|&t| s.frames[t * s.width..(t + 1) * s.width].iter().copied())
                    .collect(),
                width: s.width,
                label: s.label,
            }
        })
        .collect()
}
