//! Autoregressive rollout: infer `w` and `z_1:O` from the observed frames,
//! then alternately sample `z_t` from the prior and emit `x_t`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HitDvae, PoseSequence, Side};
use crate::tensor::{Fwd, Graph, Tensor};

/// Standard-normal draws for one rollout, in order: `w` (d_w values), the
/// observed latents `z_1:O` (O·d_z), then `z_t` (d_z) per generated frame.
#[derive(Clone, Debug)]
pub struct NoiseStream {
    source: NoiseSource,
    drawn: usize,
    splice: Option<(usize, ChaCha8Rng)>,
}

#[derive(Clone, Debug)]
enum NoiseSource {
    Zeros,
    Seeded(ChaCha8Rng),
}

impl NoiseStream {
    pub fn seeded(seed: u64) -> Self {
        Self {
            source: NoiseSource::Seeded(ChaCha8Rng::seed_from_u64(seed)),
            drawn: 0,
            splice: None,
        }
    }

    /// All-zero noise: every stochastic node takes its mean.
    pub fn zeros() -> Self {
        Self {
            source: NoiseSource::Zeros,
            drawn: 0,
            splice: None,
        }
    }

    /// Draws from `seed` for the first `after` values and from `tail_seed`
    /// afterwards.
    pub fn spliced(seed: u64, tail_seed: u64, after: usize) -> Self {
        Self {
            splice: Some((after, ChaCha8Rng::seed_from_u64(tail_seed))),
            ..Self::seeded(seed)
        }
    }

    pub fn draw(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.next()).collect()
    }

    fn next(&mut self) -> f64 {
        let i = self.drawn;
        self.drawn += 1;
        if let Some((after, tail)) = &mut self.splice {
            if i >= *after {
                return tail.sample(StandardNormal);
            }
        }
        match &mut self.source {
            NoiseSource::Zeros => 0.0,
            NoiseSource::Seeded(rng) => rng.sample(StandardNormal),
        }
    }
}

/// Number of noise values a rollout consumes before sampling `z` for the
/// 1-based generated frame `frame` (> `observed`).
pub fn draws_before_frame(model: &HitDvae, observed: usize, frame: usize) -> usize {
    let c = &model.config;
    c.d_w + observed * c.d_z + frame.saturating_sub(observed + 1) * c.d_z
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    Sample,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateOptions {
    pub horizon: usize,
    pub samples: usize,
    pub seed: u64,
    pub mode: RolloutMode,
    /// Seed the latent history with posterior means instead of samples.
    pub posterior_mean: bool,
    /// Attend to at most this many past frames; `None` keeps the whole
    /// history.
    pub context_cap: Option<usize>,
}

impl GenerateOptions {
    pub fn new(horizon: usize, samples: usize, seed: u64) -> Self {
        Self {
            horizon,
            samples,
            seed,
            mode: RolloutMode::Sample,
            posterior_mean: false,
            context_cap: None,
        }
    }

    /// Noise seed of rollout `k`.
    pub fn rollout_seed(&self, k: usize) -> u64 {
        self.seed ^ k as u64
    }
}

/// `K` sequences of `O + G` frames whose first `O` frames are the observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rollouts {
    pub samples: Vec<PoseSequence>,
    pub seeds: Vec<u64>,
}

/// The observed prefix of `observed`, checked against the model.
fn observation(model: &HitDvae, observed: &PoseSequence) -> Result<PoseSequence> {
    let c = &model.config;
    let o = observed.observed();
    if o < 2 || o < c.w_window {
        return Err(Error::InvalidArgument(format!(
            "generation needs at least {} observed frames, got {o}",
            c.w_window.max(2)
        )));
    }
    if observed.joints() != c.joints {
        return Err(Error::ShapeMismatch {
            op: "generate",
            lhs: vec![c.joints, 3],
            rhs: vec![observed.joints(), 3],
        });
    }
    PoseSequence::new(o, c.joints, o, observed.frames_slice(0, o).to_vec())
}

/// One rollout of `horizon` frames after the observed prefix of `observed`.
pub fn rollout(
    model: &HitDvae,
    observed: &PoseSequence,
    horizon: usize,
    noise: &mut NoiseStream,
    posterior_mean: bool,
    context_cap: Option<usize>,
) -> Result<PoseSequence> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    if context_cap == Some(0) {
        return Err(Error::InvalidArgument("context cap must be positive".into()));
    }
    let obs = observation(model, observed)?;
    let c = &model.config;
    let (o, j, fd) = (obs.frames(), c.joints, c.feature_dim());
    let frame_len = 3 * j;

    // Posterior over the observation.
    let (w, mut z_hist, mut feats) = {
        let g = Graph::new();
        let f = Fwd::frozen(&g, &model.params);
        let x = f.constant(obs.to_tensor());
        let enc = model.pose_features(&f, Side::Encoder, x)?;
        let qw = model.infer_w_from_features(&f, enc.slice(0, o - c.w_window, c.w_window)?)?;
        let w = qw.sample(f.constant(Tensor::vector(noise.draw(c.d_w))))?;
        let qz = model.infer_z_from_features(&f, enc, w)?;
        let eps = Tensor::new(&[o, c.d_z], noise.draw(o * c.d_z))?;
        let z = if posterior_mean {
            qz.mean
        } else {
            qz.sample(f.constant(eps))?
        };
        let dec = model.pose_features(&f, Side::Decoder, x)?;
        (w.tensor(), z.value(), dec.value())
    };

    let mut coords = obs.coords().to_vec();
    coords.reserve(horizon * frame_len);
    for t in o + 1..=o + horizon {
        let first = context_cap.map_or(1, |cap| t.saturating_sub(cap).max(1));
        let rows = t - first;
        let g = Graph::new();
        let f = Fwd::frozen(&g, &model.params);
        let dec = f.constant(Tensor::new(&[rows, fd], feats[(first - 1) * fd..].to_vec())?);
        let zs = f.constant(Tensor::new(&[rows, c.d_z], z_hist[(first - 1) * c.d_z..].to_vec())?);
        let wv = f.constant(w.clone());
        let prior = model.prior_z_from(&f, t..t + 1, first, dec, zs, wv)?;
        let zt = prior.sample(f.constant(Tensor::new(&[1, c.d_z], noise.draw(c.d_z))?))?;
        let mu = model.emit_x_from(&f, t..t + 1, first, zt, dec, wv)?;
        let pose = mu.value();
        if let Some(i) = pose.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                index: i,
                context: format!("generated frame {t}"),
            });
        }
        let next = model.pose_features(&f, Side::Decoder, mu)?;
        feats.extend(next.value());
        z_hist.extend(zt.value());
        coords.extend(pose);
    }
    PoseSequence::new(o + horizon, j, o, coords)
}

/// `K` independent rollouts, rollout `k` drawing noise from seed `seed ⊕ k`.
pub fn generate(model: &HitDvae, observed: &PoseSequence, options: &GenerateOptions) -> Result<Rollouts> {
    if options.samples == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    let seeds: Vec<u64> = (0..options.samples).map(|k| options.rollout_seed(k)).collect();
    let samples = seeds
        .par_iter()
        .enumerate()
        .map(|(k, &s)| {
            let mut noise = match options.mode {
                RolloutMode::Sample => NoiseStream::seeded(s),
                RolloutMode::Mean => NoiseStream::zeros(),
            };
            rollout(
                model,
                observed,
                options.horizon,
                &mut noise,
                options.posterior_mean,
                options.context_cap,
            )
            .map_err(|e| match e {
                Error::NonFinite { index, context } => Error::NonFinite {
                    index,
                    context: format!("rollout {k}: {context}"),
                },
                e => e,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Rollouts { samples, seeds })
}

/// Deterministic rollout taking the mean at every stochastic node.
pub fn generate_mean(model: &HitDvae, observed: &PoseSequence, horizon: usize) -> Result<PoseSequence> {
    rollout(model, observed, horizon, &mut NoiseStream::zeros(), true, None)
}
