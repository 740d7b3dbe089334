//! Training loop: scheduled sampling, KL annealing, batched Adam updates,
//! checkpointing, and pose-prior pretraining.

mod flow;
mod gradcheck;
mod step;

pub use flow::{build_pose_prior, flow_training_data, pretrain_flow, FlowReport, FlowSchedule};
pub use gradcheck::{total_loss_gradcheck, GRADCHECK_STEP};
pub use step::{scheduled_mask, sequence_loss, FrameSource, LossContext, SequenceLoss, StepInput};

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Skeleton;
use crate::error::{Error, Result};
use crate::losses::{select_pseudo_gt, LossBreakdown, LossWeights, PosePrior};
use crate::model::{HitDvae, PoseSequence};
use crate::tensor::{clip_grad_norm, AdamConfig, AdamState, Checkpoint, Fwd, Graph, ParamId, Tensor};

pub const GRAD_CLIP_NORM: f64 = 5.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub kl_anneal_epochs: usize,
    /// Epochs over which the scheduled-sampling probability rises from 0 to 1,
    /// starting once KL annealing has finished.
    pub ss_ramp_epochs: usize,
    /// Generated samples per training sequence (K).
    pub samples: usize,
    pub frames: usize,
    pub observed: usize,
    pub w_window: usize,
    /// Write a checkpoint every this many epochs; 0 only at the end.
    pub checkpoint_every: usize,
}

impl TrainSchedule {
    /// Full-scale HumanEva-I schedule.
    pub fn full() -> Self {
        Self {
            epochs: 500,
            samples_per_epoch: 1000,
            batch_size: 64,
            learning_rate: 1e-3,
            kl_anneal_epochs: 20,
            ss_ramp_epochs: 80,
            samples: 50,
            frames: 75,
            observed: 15,
            w_window: 15,
            checkpoint_every: 50,
        }
    }

    /// Desk-scale settings for the synthetic corpus.
    pub fn small() -> Self {
        Self {
            epochs: 100,
            samples_per_epoch: 32,
            batch_size: 8,
            kl_anneal_epochs: 20,
            ss_ramp_epochs: 80,
            samples: 10,
            frames: 40,
            observed: 10,
            w_window: 10,
            checkpoint_every: 25,
            learning_rate: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("epochs", self.epochs),
            ("samples_per_epoch", self.samples_per_epoch),
            ("batch_size", self.batch_size),
            ("ss_ramp_epochs", self.ss_ramp_epochs),
            ("samples", self.samples),
            ("frames", self.frames),
            ("observed", self.observed),
            ("w_window", self.w_window),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("`schedule.{name}` must be positive")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "`schedule.learning_rate` must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.frames < 2 || self.observed >= self.frames {
            return Err(Error::Config(format!(
                "need 1 ≤ observed < frames and frames ≥ 2, got observed {} frames {}",
                self.observed, self.frames
            )));
        }
        if self.w_window > self.frames {
            return Err(Error::Config(format!(
                "w window {} longer than the {}-frame training sequences",
                self.w_window, self.frames
            )));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.samples_per_epoch.div_ceil(self.batch_size)
    }
}

/// Probability of feeding a generated pose back at `epoch`: a linear ramp
/// over `ss_ramp_epochs` starting when KL annealing ends.
pub fn ss_probability(epoch: usize, schedule: &TrainSchedule) -> f64 {
    let start = schedule.kl_anneal_epochs as f64;
    ((epoch as f64 - start) / schedule.ss_ramp_epochs as f64).clamp(0.0, 1.0)
}

/// KL multiplier at `epoch`: `min(epoch / kl_anneal_epochs, 1)`.
pub fn kl_anneal(epoch: usize, schedule: &TrainSchedule) -> f64 {
    if schedule.kl_anneal_epochs == 0 {
        return 1.0;
    }
    (epoch as f64 / schedule.kl_anneal_epochs as f64).min(1.0)
}

/// Training sequences with their pseudo ground truths precomputed.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub sequences: Vec<PoseSequence>,
    /// `[M, T−1, J, 3]` per sequence over frames `2..T`.
    pub pseudo: Vec<Tensor>,
    /// SHA-256 over every coordinate, for run manifests.
    pub hash: String,
}

impl TrainingSet {
    /// Pseudo ground truths of each sequence are the other sequences whose
    /// last observed pose is close to its own.
    pub fn new(sequences: Vec<PoseSequence>, skeleton: &Skeleton) -> Result<Self> {
        let first = sequences
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty training set".into()))?;
        let (t, o) = (first.frames(), first.observed());
        if t < 2 || o == 0 {
            return Err(Error::InvalidArgument(format!(
                "training sequences need ≥ 2 frames and ≥ 1 observed, got {t} and {o}"
            )));
        }
        let pseudo = sequences
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let set = if sequences.len() > 1 {
                    select_pseudo_gt(s, &sequences, skeleton, o - 1, Some(i))?
                } else {
                    crate::losses::MultiModalSet::new(vec![s.clone()])?
                };
                set.to_tensor(1, t - 1)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut h = Sha256::new();
        for s in &sequences {
            for v in s.coords() {
                h.update(v.to_le_bytes());
            }
        }
        Ok(Self {
            sequences,
            pseudo,
            hash: hex::encode(h.finalize()),
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub epoch: usize,
    pub step: usize,
    /// Batch-mean term values; `None` when the step was aborted.
    pub breakdown: Option<LossBreakdown>,
    pub grad_norm: f64,
    pub aborted: bool,
    /// Decoder inputs read from generated poses, summed over the batch.
    pub generated_inputs: usize,
    pub skipped_hinges: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_total: f64,
    pub steps: usize,
    pub aborted: usize,
}

/// JSON run manifest written next to the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub model: crate::model::ModelConfig,
    pub schedule: TrainSchedule,
    pub weights: LossWeights,
    pub seed: u64,
    pub corpus_sha256: String,
    pub build: String,
    pub sampling: String,
}

pub struct Trainer {
    pub model: HitDvae,
    pub schedule: TrainSchedule,
    pub weights: LossWeights,
    pub skeleton: Skeleton,
    pub prior: PosePrior,
    pub adam: AdamState,
    pub seed: u64,
    /// Optimizer steps taken so far, including aborted ones.
    pub step: usize,
}

fn mix(seed: u64, step: u64) -> u64 {
    // splitmix64 finaliser over the pair.
    let mut z = seed ^ step.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

type Grads = Vec<(ParamId, Vec<f64>)>;

struct ElementOutcome {
    breakdown: LossBreakdown,
    grads: Grads,
    generated: usize,
    skipped: usize,
}

impl Trainer {
    pub fn new(
        model: HitDvae,
        schedule: TrainSchedule,
        weights: LossWeights,
        skeleton: Skeleton,
        prior: PosePrior,
        seed: u64,
    ) -> Result<Self> {
        schedule.validate()?;
        weights.validate()?;
        if schedule.w_window != model.config.w_window {
            return Err(Error::Config(format!(
                "schedule w window {} does not match the model's {}",
                schedule.w_window, model.config.w_window
            )));
        }
        if skeleton.joint_count() != model.config.joints || prior.joints() != model.config.joints {
            return Err(Error::Config(format!(
                "model has {} joints, skeleton {} and pose prior {}",
                model.config.joints,
                skeleton.joint_count(),
                prior.joints()
            )));
        }
        let adam = AdamState::new(AdamConfig::with_lr(schedule.learning_rate), &model.params);
        Ok(Self {
            model,
            schedule,
            weights,
            skeleton,
            prior,
            adam,
            seed,
            step: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.step / self.schedule.steps_per_epoch()
    }

    fn check_data(&self, data: &TrainingSet) -> Result<()> {
        let s = &self.schedule;
        if data.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        if let Some(bad) = data
            .sequences
            .iter()
            .find(|x| x.frames() != s.frames || x.observed() != s.observed || x.joints() != self.model.config.joints)
        {
            return Err(Error::InvalidArgument(format!(
                "training sequence of {} frames ({} observed, {} joints), schedule wants {} ({} observed, {} joints)",
                bad.frames(),
                bad.observed(),
                bad.joints(),
                s.frames,
                s.observed,
                self.model.config.joints
            )));
        }
        Ok(())
    }

    fn element(&self, input: &StepInput, anneal: f64) -> Result<ElementOutcome> {
        let ctx = LossContext {
            skeleton: &self.skeleton,
            weights: &self.weights,
            prior: &self.prior,
            anneal,
        };
        let g = Graph::new();
        let f = Fwd::new(&g, &self.model.params);
        let out = sequence_loss(&f, &self.model, &ctx, input)?;
        g.backward(out.total)?;
        Ok(ElementOutcome {
            breakdown: out.breakdown,
            grads: g.param_grads_for(&self.model.params),
            generated: out.sources.iter().filter(|s| **s == FrameSource::Generated).count(),
            skipped: out.skipped_hinges,
        })
    }

    /// One optimizer step on a batch drawn (with replacement) from `data`.
    ///
    /// A non-finite loss or gradient aborts the step: parameters and
    /// optimizer state stay untouched and the report says so.
    pub fn train_step(&mut self, data: &TrainingSet) -> Result<StepReport> {
        self.check_data(data)?;
        let epoch = self.epoch();
        let p = ss_probability(epoch, &self.schedule);
        let anneal = kl_anneal(epoch, &self.schedule);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, self.step as u64));
        let b = self.schedule.batch_size;
        let picks: Vec<(usize, u64)> = (0..b).map(|_| (rng.gen_range(0..data.len()), rng.gen())).collect();
        let inputs = picks
            .iter()
            .map(|&(i, s)| {
                let mut r = ChaCha8Rng::seed_from_u64(s);
                StepInput::draw(
                    &self.model,
                    data.sequences[i].clone(),
                    data.pseudo[i].clone(),
                    self.schedule.samples,
                    p,
                    &mut r,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let outcomes: Vec<Result<ElementOutcome>> = inputs.par_iter().map(|x| self.element(x, anneal)).collect();

        let step = self.step;
        self.step += 1;
        let aborted = |reason: String| {
            log::warn!("step {step} aborted: {reason}");
            Ok(StepReport {
                epoch,
                step,
                breakdown: None,
                grad_norm: f64::NAN,
                aborted: true,
                generated_inputs: 0,
                skipped_hinges: 0,
            })
        };
        let mut ok = Vec::with_capacity(b);
        for o in outcomes {
            match o {
                Ok(o) => ok.push(o),
                Err(e @ (Error::NonFinite { .. } | Error::NonFiniteTerm { .. })) => return aborted(e.to_string()),
                Err(e) => return Err(e),
            }
        }
        if ok.iter().any(|o| o.grads.iter().any(|(_, g)| g.iter().any(|v| !v.is_finite()))) {
            return aborted("non-finite gradient".into());
        }

        let params = &mut self.model.params;
        params.clear_grads();
        params.zero_grad();
        for o in &ok {
            params.accumulate_grads(&o.grads)?;
        }
        params.scale_grads(1.0 / b as f64);
        let grad_norm = clip_grad_norm(params, GRAD_CLIP_NORM);
        self.adam.step(params)?;
        params.clear_grads();

        let mut mean = [0.0; 9];
        for o in &ok {
            for (m, v) in mean.iter_mut().zip(o.breakdown.values()) {
                *m += v / b as f64;
            }
        }
        Ok(StepReport {
            epoch,
            step,
            breakdown: Some(LossBreakdown::from_terms(mean, &self.weights, anneal)?),
            grad_norm,
            aborted: false,
            generated_inputs: ok.iter().map(|o| o.generated).sum(),
            skipped_hinges: ok.iter().map(|o| o.skipped).sum(),
        })
    }

    /// Runs the remaining steps of the current epoch.
    pub fn run_epoch(&mut self, data: &TrainingSet) -> Result<(EpochReport, Vec<StepReport>)> {
        let epoch = self.epoch();
        let mut reports = Vec::new();
        while self.epoch() == epoch {
            reports.push(self.train_step(data)?);
        }
        let done: Vec<f64> = reports
            .iter()
            .filter_map(|r| r.breakdown.as_ref().map(|b| b.total))
            .collect();
        let summary = EpochReport {
            epoch,
            mean_total: done.iter().sum::<f64>() / done.len().max(1) as f64,
            steps: reports.len(),
            aborted: reports.iter().filter(|r| r.aborted).count(),
        };
        Ok((summary, reports))
    }

    pub fn manifest(&self, data: &TrainingSet) -> RunManifest {
        RunManifest {
            model: self.model.config.clone(),
            schedule: self.schedule.clone(),
            weights: self.weights.clone(),
            seed: self.seed,
            corpus_sha256: data.hash.clone(),
            build: build_id(),
            sampling: "uniform with replacement".into(),
        }
    }

    /// Trains up to `schedule.epochs`, appending to `out/losses.csv` and
    /// writing `out/manifest.json`, periodic `checkpoint-<epoch>.ckpt` files
    /// and a final `model.ckpt`.
    pub fn run(&mut self, data: &TrainingSet, out: &Path) -> Result<Vec<EpochReport>> {
        fs::create_dir_all(out)?;
        fs::write(
            out.join("manifest.json"),
            serde_json::to_string_pretty(&self.manifest(data))?,
        )?;
        let log_path = out.join("losses.csv");
        let fresh = self.step == 0 || !log_path.exists();
        let mut log = if fresh {
            let mut f = File::create(&log_path)?;
            writeln!(f, "{}", LossBreakdown::CSV_HEADER)?;
            f
        } else {
            OpenOptions::new().append(true).open(&log_path)?
        };
        let mut epochs = Vec::new();
        while self.epoch() < self.schedule.epochs {
            let (summary, steps) = self.run_epoch(data)?;
            for r in &steps {
                if let Some(b) = &r.breakdown {
                    writeln!(log, "{}", b.csv_row(r.epoch, r.step))?;
                }
            }
            log::info!(
                "epoch {} mean loss {:.4} ({} aborted)",
                summary.epoch,
                summary.mean_total,
                summary.aborted
            );
            let finished = summary.epoch + 1;
            if self.schedule.checkpoint_every > 0 && finished % self.schedule.checkpoint_every == 0 {
                self.save_checkpoint(out.join(format!("checkpoint-{finished:04}.ckpt")))?;
            }
            epochs.push(summary);
        }
        self.save_checkpoint(out.join("model.ckpt"))?;
        Ok(epochs)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.params.to_checkpoint();
        self.adam.write_checkpoint(&self.model.params, &mut ck);
        ck.push("trainer.step", &[1], vec![self.step as f64]);
        ck
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<PathBuf> {
        self.checkpoint().save(path.as_ref())?;
        Ok(path.as_ref().to_path_buf())
    }

    /// Restores parameters, optimizer moments and the step counter. Model
    /// checkpoints without optimizer state are rejected.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        self.model.params.load_checkpoint(ck)?;
        self.adam = AdamState::read_checkpoint(self.adam.config, &self.model.params, ck)?;
        let (_, step) = ck
            .get("trainer.step")
            .ok_or_else(|| Error::Checkpoint("missing `trainer.step`".into()))?;
        self.step = step[0] as usize;
        Ok(())
    }
}

/// Package version plus the git revision when built from a checkout.
pub fn build_id() -> String {
    match option_env!("HITDVAE_GIT_DESCRIBE") {
        Some(rev) => format!("{}-{rev}", env!("CARGO_PKG_VERSION")),
        None => env!("CARGO_PKG_VERSION").to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{preprocess, synth_corpus, SynthSpec};
    use crate::model::ModelConfig;
    use crate::nn::CouplingFlow;
    use crate::tensor::ParamStore;

    fn sched() -> TrainSchedule {
        TrainSchedule {
            epochs: 2,
            samples_per_epoch: 4,
            batch_size: 2,
            samples: 2,
            frames: 8,
            observed: 3,
            w_window: 3,
            checkpoint_every: 1,
            ..TrainSchedule::small()
        }
    }

    fn fixture(seed: u64) -> (Trainer, TrainingSet) {
        let skel = Skeleton::synthetic();
        let corpus = synth_corpus(&SynthSpec {
            clips_per_class: 2,
            frames: 8,
            ..SynthSpec::standard(7)
        })
        .unwrap();
        let seqs: Vec<_> = corpus.clips.iter().map(|c| preprocess(c, 3).unwrap()).collect();
        let data = TrainingSet::new(seqs, &skel).unwrap();
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let flow = CouplingFlow::new(&mut params, "nf", 24, 2, 4, &mut rng);
        let prior = PosePrior {
            flow,
            params,
            calibration: 20.0,
        };
        let model = HitDvae::new(ModelConfig::micro(9, 3), 1).unwrap();
        let t = Trainer::new(model, sched(), LossWeights::humaneva(), skel, prior, seed).unwrap();
        (t, data)
    }

    #[test]
    fn schedules_follow_the_ramps() {
        let s = TrainSchedule::full();
        assert_eq!(ss_probability(0, &s), 0.0);
        assert_eq!(ss_probability(20, &s), 0.0);
        assert_eq!(ss_probability(60, &s), 0.5);
        assert_eq!(ss_probability(100, &s), 1.0);
        assert_eq!(ss_probability(400, &s), 1.0);
        assert_eq!(kl_anneal(0, &s), 0.0);
        assert_eq!(kl_anneal(10, &s), 0.5);
        assert_eq!(kl_anneal(20, &s), 1.0);
        assert_eq!(kl_anneal(35, &s), 1.0);
    }

    #[test]
    fn schedule_validation() {
        assert!(TrainSchedule::full().validate().is_ok());
        let bad = TrainSchedule {
            observed: 75,
            ..TrainSchedule::full()
        };
        assert!(bad.validate().is_err());
        let bad = TrainSchedule {
            batch_size: 0,
            ..TrainSchedule::full()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn pseudo_ground_truths_cover_frames_after_the_first() {
        let (_, data) = fixture(0);
        for p in &data.pseudo {
            assert_eq!(&p.shape()[1..], &[7, 9, 3]);
        }
    }

    #[test]
    fn steps_are_deterministic_and_resume_exactly() {
        let (mut a, data) = fixture(11);
        let (mut b, _) = fixture(11);
        let ra = a.train_step(&data).unwrap();
        let rb = b.train_step(&data).unwrap();
        assert_eq!(ra, rb);
        assert!(!ra.aborted);
        let ck = a.checkpoint();

        let next_a = a.train_step(&data).unwrap();
        let (mut c, _) = fixture(11);
        c.restore(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        let next_c = c.train_step(&data).unwrap();
        assert_eq!(next_a, next_c);
        assert_eq!(a.checkpoint().to_bytes(), c.checkpoint().to_bytes());
    }

    #[test]
    fn non_finite_step_leaves_parameters_untouched() {
        let (mut t, data) = fixture(2);
        let id = t.model.params.ids().next().unwrap();
        t.model.params.get_mut(id).data_mut()[0] = f64::NAN;
        let before = t.model.params.to_checkpoint().to_bytes();
        let r = t.train_step(&data).unwrap();
        assert!(r.aborted);
        assert_eq!(t.model.params.to_checkpoint().to_bytes(), before);
        assert_eq!(t.adam.step_count(), 0);
    }

    #[test]
    fn run_writes_log_manifest_and_checkpoints() {
        let (mut t, data) = fixture(3);
        let dir = tempfile::tempdir().unwrap();
        let epochs = t.run(&data, dir.path()).unwrap();
        assert_eq!(epochs.len(), 2);
        let log = fs::read_to_string(dir.path().join("losses.csv")).unwrap();
        assert_eq!(log.lines().count(), 1 + 4);
        assert!(dir.path().join("checkpoint-0001.ckpt").exists());
        assert!(dir.path().join("model.ckpt").exists());
        let m: RunManifest =
            serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m.corpus_sha256, data.hash);
    }
}
