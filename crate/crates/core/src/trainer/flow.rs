use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::PosePrior;
use crate::model::PoseSequence;
use crate::nn::CouplingFlow;
use crate::tensor::{clip_grad_norm, AdamConfig, AdamState, Fwd, Graph, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSchedule {
    pub layers: usize,
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl FlowSchedule {
    pub fn standard(seed: u64) -> Self {
        Self {
            layers: 4,
            hidden: 32,
            steps: 1500,
            batch_size: 64,
            learning_rate: 1e-3,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowReport {
    /// Mean log-density of each step's batch, before the update.
    pub batch_log_prob: Vec<f64>,
    /// Step at which training produced a non-finite value; the returned
    /// parameters are those from before that step.
    pub diverged_at: Option<usize>,
}

impl FlowReport {
    /// Mean of `batch_log_prob` over consecutive windows of `window` steps.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        self.batch_log_prob
            .chunks(window.max(1))
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }
}

/// Maximum-likelihood fit of a fresh coupling flow to the rows of `data`
/// (`[N, D]`), with Adam and gradient clipping at norm 5.
pub fn pretrain_flow(data: &Tensor, schedule: &FlowSchedule) -> Result<(CouplingFlow, ParamStore, FlowReport)> {
    let shape = data.shape();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::InvalidArgument(format!(
            "flow training data must be a non-empty [N, D] matrix, got {shape:?}"
        )));
    }
    let (n, d) = (shape[0], shape[1]);
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut params = ParamStore::new();
    let flow = CouplingFlow::new(&mut params, "flow", d, schedule.layers, schedule.hidden, &mut rng);
    let mut adam = AdamState::new(AdamConfig::with_lr(schedule.learning_rate), &params);
    let batch = schedule.batch_size.clamp(1, n);
    let mut report = FlowReport {
        batch_log_prob: Vec::with_capacity(schedule.steps),
        diverged_at: None,
    };
    for step in 0..schedule.steps {
        let rows = sample(&mut rng, n, batch).into_vec();
        let mut x = Vec::with_capacity(batch * d);
        for r in &rows {
            x.extend_from_slice(&data.data()[r * d..(r + 1) * d]);
        }
        let x = Tensor::new(&[batch, d], x)?;
        let outcome = (|| -> Result<(f64, Vec<_>)> {
            let g = Graph::new();
            let f = Fwd::new(&g, &params);
            let lp = flow.log_prob(&f, g.constant(x))?.mean();
            let value = lp.item();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    index: step,
                    context: "flow batch log-prob".into(),
                });
            }
            g.backward(lp.neg())?;
            Ok((value, g.param_grads_for(&params)))
        })();
        let finite = |grads: &[(_, Vec<f64>)]| grads.iter().all(|(_, g)| g.iter().all(|v| v.is_finite()));
        match outcome {
            Ok((lp, grads)) if finite(&grads) => {
                params.clear_grads();
                params.zero_grad();
                params.accumulate_grads(&grads)?;
                clip_grad_norm(&mut params, 5.0);
                adam.step(&mut params)?;
                report.batch_log_prob.push(lp);
            }
            Ok(_) | Err(Error::NonFinite { .. }) => {
                log::warn!("flow pretraining diverged at step {step}; keeping the previous parameters");
                report.diverged_at = Some(step);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    params.clear_grads();
    Ok((flow, params, report))
}

/// All frames of `poses` as flow inputs: `[N·T, 3(J−1)]` non-root coordinates.
pub fn flow_training_data(poses: &[PoseSequence]) -> Result<Tensor> {
    let j = poses
        .first()
        .ok_or_else(|| Error::InvalidArgument("no poses to fit the pose prior on".into()))?
        .joints();
    let mut rows = Vec::new();
    let mut count = 0;
    for p in poses {
        for t in 0..p.frames() {
            rows.extend_from_slice(&p.frame(t)[3..]);
            count += 1;
        }
    }
    Tensor::new(&[count, 3 * (j - 1)], rows)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Fits the pose prior on every training frame and calibrates it to the
/// median training negative log-likelihood.
pub fn build_pose_prior(poses: &[PoseSequence], schedule: &FlowSchedule) -> Result<(PosePrior, FlowReport)> {
    let data = flow_training_data(poses)?;
    let (flow, params, report) = pretrain_flow(&data, schedule)?;
    let lp = flow.log_prob_values(&params, &data)?;
    let calibration = median(lp.into_iter().map(|v| -v).collect());
    Ok((
        PosePrior {
            flow,
            params,
            calibration,
        },
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn moons(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = Vec::with_capacity(2 * n);
        for i in 0..n {
            let a: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let (x, y) = if i % 2 == 0 {
                (a.cos(), a.sin())
            } else {
                (1.0 - a.cos(), 0.5 - a.sin())
            };
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            v.push(x + 0.1 * nx);
            v.push(y + 0.1 * ny);
        }
        Tensor::new(&[n, 2], v).unwrap()
    }

    #[test]
    fn two_moons_beats_standard_normal() {
        let train = moons(2000, 1);
        let held = moons(500, 2);
        let sched = FlowSchedule {
            steps: 800,
            hidden: 16,
            ..FlowSchedule::standard(3)
        };
        let (flow, params, report) = pretrain_flow(&train, &sched).unwrap();
        assert!(report.diverged_at.is_none());
        let lp = flow.log_prob_values(&params, &held).unwrap();
        let mean = lp.iter().sum::<f64>() / lp.len() as f64;
        let baseline = held
            .data()
            .chunks(2)
            .map(|r| -0.5 * (r[0] * r[0] + r[1] * r[1]) - (2.0 * std::f64::consts::PI).ln())
            .sum::<f64>()
            / 500.0;
        assert!(mean > baseline + 0.3, "flow {mean} vs baseline {baseline}");
        let smooth = report.smoothed(100);
        assert!(smooth.last().unwrap() > smooth.first().unwrap());

        let g = Graph::new();
        let f = Fwd::frozen(&g, &params);
        let (z, _) = flow.forward(&f, g.constant(held.clone())).unwrap();
        let back = flow.inverse(&f, z).unwrap().value();
        let err = back.iter().zip(held.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9);
    }

    #[test]
    fn learns_shifted_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f64> = (0..2000).map(|_| 3.0 + rng.sample::<f64, _>(StandardNormal)).collect();
        let sched = FlowSchedule {
            steps: 1500,
            learning_rate: 1e-2,
            hidden: 8,
            ..FlowSchedule::standard(5)
        };
        let (flow, params, _) = pretrain_flow(&Tensor::new(&[2000, 1], data).unwrap(), &sched).unwrap();
        let samples = flow.sample(&params, 20_000, &mut rng).unwrap();
        let (lo, width) = (-2.0, 0.25);
        let mut hist = vec![0usize; 40];
        for v in samples.data() {
            let b = ((v - lo) / width).floor();
            if (0.0..40.0).contains(&b) {
                hist[b as usize] += 1;
            }
        }
        // Smooth over 3 bins before taking the mode.
        let smooth: Vec<usize> = (0..40)
            .map(|i: usize| hist[i.saturating_sub(1)..(i + 2).min(40)].iter().sum())
            .collect();
        let mode = (0..40).max_by_key(|&i| smooth[i]).unwrap();
        let centre = lo + (mode as f64 + 0.5) * width;
        assert!((centre - 3.0).abs() < 0.2 + width / 2.0, "mode at {centre}");
    }

    #[test]
    fn calibration_is_median() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
