use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PoseSequence;
use crate::nn::{GruCell, Linear};
use crate::tensor::{clip_grad_norm, AdamConfig, AdamState, Fwd, Graph, ParamStore, Tensor, Var};

const MIN_PER_CLASS: usize = 20;
const IMBALANCE_LIMIT: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub layers: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl ClassifierConfig {
    pub fn standard(seed: u64) -> Self {
        Self {
            hidden: 128,
            layers: 2,
            epochs: 15,
            batch_size: 32,
            learning_rate: 2e-3,
            seed,
        }
    }
}

/// A pose sequence flattened to `frames × width` values with its class.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSequence {
    pub frames: Vec<f64>,
    pub width: usize,
    pub label: usize,
}

impl LabeledSequence {
    /// The frames after the observed prefix of `seq`.
    pub fn future(seq: &PoseSequence, label: usize) -> Self {
        Self {
            frames: seq.future().to_vec(),
            width: seq.frame_len(),
            label,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub train_accuracy: f64,
    pub held_out_accuracy: Option<f64>,
    pub epoch_loss: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Stacked GRU over frames with a linear head on the last layer's final
/// hidden state, which also serves as the FID feature.
#[derive(Clone, Debug)]
pub struct ActionClassifier {
    pub config: ClassifierConfig,
    pub classes: usize,
    pub input_dim: usize,
    pub params: ParamStore,
    pub cells: Vec<GruCell>,
    pub head: Linear,
}

impl ActionClassifier {
    pub fn new(config: ClassifierConfig, input_dim: usize, classes: usize) -> Result<Self> {
        if config.hidden == 0 || config.layers == 0 || classes < 2 || input_dim == 0 {
            return Err(Error::Config(
                "classifier needs positive widths, at least one layer and two classes".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let cells = (0..config.layers)
            .map(|l| {
                let input = if l == 0 { input_dim } else { config.hidden };
                GruCell::new(&mut params, &format!("gru.{l}"), input, config.hidden, &mut rng)
            })
            .collect();
        let head = Linear::new(&mut params, "head", config.hidden, classes, &mut rng);
        Ok(Self {
            config,
            classes,
            input_dim,
            params,
            cells,
            head,
        })
    }

    fn batch_tensor(&self, batch: &[&LabeledSequence]) -> Result<Tensor> {
        let t = batch[0].frames.len() / self.input_dim.max(1);
        let mut data = Vec::with_capacity(batch.len() * t * self.input_dim);
        for s in batch {
            if s.width != self.input_dim || s.frames.len() != t * self.input_dim || t == 0 {
                return Err(Error::InvalidArgument(format!(
                    "classifier expects {t} frames of width {}, got {} values of width {}",
                    self.input_dim,
                    s.frames.len(),
                    s.width
                )));
            }
            data.extend_from_slice(&s.frames);
        }
        Tensor::new(&[batch.len(), t, self.input_dim], data)
    }

    /// Final hidden state of the last layer, `[B, hidden]`.
    fn encode<'a>(&self, f: &Fwd<'a>, x: Var<'a>) -> Result<Var<'a>> {
        let shape = x.shape();
        let (b, t) = (shape[0], shape[1]);
        let mut hs: Vec<Var<'a>> = self
            .cells
            .iter()
            .map(|_| f.constant(Tensor::zeros(&[b, self.config.hidden])))
            .collect();
        for step in 0..t {
            let mut input = x.slice(1, step, 1)?.reshape(&[b, self.input_dim])?;
            for (cell, h) in self.cells.iter().zip(hs.iter_mut()) {
                *h = cell.step(f, input, *h)?;
                input = *h;
            }
        }
        Ok(*hs.last().expect("at least one layer"))
    }

    fn logits<'a>(&self, f: &Fwd<'a>, x: Var<'a>) -> Result<(Var<'a>, Var<'a>)> {
        let h = self.encode(f, x)?;
        Ok((self.head.forward(f, h)?, h))
    }

    /// Class probabilities and features of each sequence.
    pub fn predict(&self, seqs: &[LabeledSequence]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let mut probs = Vec::with_capacity(seqs.len());
        let mut feats = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(64) {
            let refs: Vec<&LabeledSequence> = chunk.iter().collect();
            let g = Graph::new();
            let f = Fwd::frozen(&g, &self.params);
            let (logits, h) = self.logits(&f, f.constant(self.batch_tensor(&refs)?))?;
            probs.extend(logits.softmax().value().chunks(self.classes).map(<[f64]>::to_vec));
            feats.extend(h.value().chunks(self.config.hidden).map(<[f64]>::to_vec));
        }
        Ok((probs, feats))
    }

    pub fn features(&self, seqs: &[LabeledSequence]) -> Result<Vec<Vec<f64>>> {
        Ok(self.predict(seqs)?.1)
    }

    pub fn classify(&self, seqs: &[LabeledSequence]) -> Result<Vec<usize>> {
        Ok(self
            .predict(seqs)?
            .0
            .iter()
            .map(|p| {
                (0..p.len())
                    .max_by(|&a, &b| p[a].total_cmp(&p[b]).then(b.cmp(&a)))
                    .unwrap_or(0)
            })
            .collect())
    }

    /// Cross-entropy training with Adam (single-threaded), reporting
    /// accuracy on `held_out` when given.
    pub fn train(
        config: ClassifierConfig,
        train: &[LabeledSequence],
        held_out: &[LabeledSequence],
        classes: usize,
    ) -> Result<(Self, ClassifierReport)> {
        let first = train
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty classifier training set".into()))?;
        let mut counts = vec![0usize; classes];
        for s in train {
            *counts
                .get_mut(s.label)
                .ok_or_else(|| Error::InvalidArgument(format!("label {} outside {classes} classes", s.label)))? += 1;
        }
        if classes < 2 || counts.iter().any(|&c| c < MIN_PER_CLASS) {
            return Err(Error::InvalidArgument(format!(
                "classifier needs ≥ 2 classes with ≥ {MIN_PER_CLASS} sequences each, got {counts:?}"
            )));
        }
        let mut warnings = Vec::new();
        let (lo, hi) = (*counts.iter().min().unwrap(), *counts.iter().max().unwrap());
        if hi as f64 > IMBALANCE_LIMIT * lo as f64 {
            let msg = format!("class imbalance {hi}:{lo} exceeds {IMBALANCE_LIMIT}:1");
            log::warn!("{msg}");
            warnings.push(msg);
        }

        let mut model = Self::new(config.clone(), first.width, classes)?;
        let mut adam = AdamState::new(AdamConfig::with_lr(config.learning_rate), &model.params);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xc1a5);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut epoch_loss = Vec::with_capacity(config.epochs);
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for idx in order.chunks(config.batch_size.max(1)) {
                let batch: Vec<&LabeledSequence> = idx.iter().map(|&i| &train[i]).collect();
                let x = model.batch_tensor(&batch)?;
                let mut onehot = vec![0.0; batch.len() * classes];
                for (i, s) in batch.iter().enumerate() {
                    onehot[i * classes + s.label] = 1.0;
                }
                let onehot = Tensor::new(&[batch.len(), classes], onehot)?;
                let (value, grads) = {
                    let g = Graph::new();
                    let f = Fwd::new(&g, &model.params);
                    let (logits, _) = model.logits(&f, f.constant(x))?;
                    let loss = logits
                        .log_softmax()?
                        .mul(f.constant(onehot))?
                        .sum()
                        .scale(-1.0 / batch.len() as f64);
                    g.backward(loss)?;
                    (loss.item(), g.param_grads_for(&model.params))
                };
                if !value.is_finite() {
                    return Err(Error::Diverged(format!("classifier loss became {value}")));
                }
                total += value * batch.len() as f64;
                model.params.clear_grads();
                model.params.zero_grad();
                model.params.accumulate_grads(&grads)?;
                clip_grad_norm(&mut model.params, 5.0);
                adam.step(&mut model.params)?;
            }
            epoch_loss.push(total / train.len() as f64);
        }
        model.params.clear_grads();
        let train_accuracy = recognition_accuracy(&model, train)?;
        let held_out_accuracy = if held_out.is_empty() {
            None
        } else {
            Some(recognition_accuracy(&model, held_out)?)
        };
        Ok((
            model,
            ClassifierReport {
                train_accuracy,
                held_out_accuracy,
                epoch_loss,
                warnings,
            },
        ))
    }
}

/// Fraction of `seqs` classified as their own label.
pub fn recognition_accuracy(classifier: &ActionClassifier, seqs: &[LabeledSequence]) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::InvalidArgument("no sequences to classify".into()));
    }
    if let Some(s) = seqs.iter().find(|s| s.label >= classifier.classes) {
        return Err(Error::InvalidArgument(format!(
            "label {} unknown to a {}-class classifier",
            s.label, classifier.classes
        )));
    }
    let predicted = classifier.classify(seqs)?;
    let hits = predicted.iter().zip(seqs).filter(|(p, s)| **p == s.label).count();
    Ok(hits as f64 / seqs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Circular versus straight-line 2-d trajectories with random phase,
    /// radius and direction.
    fn toy(n: usize, seed: u64) -> Vec<LabeledSequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = i % 2;
                let phase: f64 = rng.gen_range(0.0..6.3);
                let r: f64 = rng.gen_range(0.5..1.5);
                let frames = (0..12)
                    .flat_map(|t| {
                        let s = t as f64 / 11.0;
                        if label == 0 {
                            let a = phase + 3.0 * s;
                            [r * a.cos(), r * a.sin()]
                        } else {
                            [r * phase.cos() * (2.0 * s - 1.0), r * phase.sin() * (2.0 * s - 1.0)]
                        }
                    })
                    .collect();
                LabeledSequence { frames, width: 2, label }
            })
            .collect()
    }

    fn quick(seed: u64) -> ClassifierConfig {
        ClassifierConfig {
            hidden: 16,
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-2,
            ..ClassifierConfig::standard(seed)
        }
    }

    #[test]
    fn separates_circles_from_lines() {
        let (model, report) = ActionClassifier::train(quick(1), &toy(200, 1), &toy(100, 2), 2).unwrap();
        assert!(report.held_out_accuracy.unwrap() >= 0.95, "{report:?}");
        let (probs, feats) = model.predict(&toy(4, 3)).unwrap();
        for p in probs {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12 && p.iter().all(|v| *v >= 0.0));
        }
        assert_eq!(feats[0].len(), 16);
    }

    #[test]
    fn shuffled_labels_give_chance() {
        let mut train = toy(200, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for s in &mut train {
            s.label = rng.gen_range(0..2);
        }
        let (_, report) = ActionClassifier::train(quick(2), &train, &toy(200, 5), 2).unwrap();
        assert!((report.held_out_accuracy.unwrap() - 0.5).abs() <= 0.1, "{report:?}");
    }

    #[test]
    fn same_seed_same_weights() {
        let data = toy(60, 6);
        let cfg = ClassifierConfig { epochs: 2, ..quick(3) };
        let (a, _) = ActionClassifier::train(cfg.clone(), &data, &[], 2).unwrap();
        let (b, _) = ActionClassifier::train(cfg, &data, &[], 2).unwrap();
        assert_eq!(a.params.to_checkpoint().to_bytes(), b.params.to_checkpoint().to_bytes());
    }

    #[test]
    fn rejects_small_classes_and_unknown_labels() {
        let data = toy(30, 7);
        assert!(ActionClassifier::train(quick(4), &data, &[], 2).is_err());
        let model = ActionClassifier::new(quick(4), 2, 2).unwrap();
        let mut bad = toy(2, 8);
        bad[0].label = 5;
        assert!(recognition_accuracy(&model, &bad).is_err());
    }
}
