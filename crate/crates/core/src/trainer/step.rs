use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Skeleton;
use crate::error::{Error, Result};
use crate::losses::{
    angle_loss, diversity_term, kl_w_loss, kl_z_loss, limb_loss, multimodal_loss, recon_loss,
    total_loss, LossBreakdown, LossTerms, LossWeights, PosePrior,
};
use crate::model::{DiagGaussian, HitDvae, PoseSequence, Side};
use crate::tensor::{Fwd, Tensor, Var};

/// Where a decoder input frame came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameSource {
    GroundTruth,
    Generated,
}

/// Per-frame scheduled-sampling choice: `true` means the decoder reads the
/// generated pose for that (0-based) frame. The first `max(observed, 1)`
/// frames always use ground truth.
pub fn scheduled_mask<R: Rng + ?Sized>(frames: usize, observed: usize, p: f64, rng: &mut R) -> Vec<bool> {
    let protected = observed.max(1);
    (0..frames)
        .map(|t| {
            // Draw for every frame so the stream does not depend on `observed`.
            let u: f64 = rng.gen();
            t >= protected && u < p
        })
        .collect()
}

/// Everything random about one sequence's training pass, drawn up front.
#[derive(Clone, Debug, PartialEq)]
pub struct StepInput {
    pub x: PoseSequence,
    /// Pseudo ground truths `[M, T−1, J, 3]` over frames `2..T`.
    pub pseudo: Tensor,
    pub w_start: usize,
    pub noise_w: Tensor,
    /// `[K, T, d_z]`.
    pub noise_z: Tensor,
    pub generated: Vec<bool>,
}

impl StepInput {
    pub fn draw<R: Rng + ?Sized>(
        model: &HitDvae,
        x: PoseSequence,
        pseudo: Tensor,
        samples: usize,
        p: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let c = &model.config;
        let t = x.frames();
        if t < c.w_window || t < 2 {
            return Err(Error::InvalidArgument(format!(
                "training needs at least {} frames, got {t}",
                c.w_window.max(2)
            )));
        }
        let w_start = rng.gen_range(0..=t - c.w_window);
        let mut normal = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
        let noise_w = Tensor::vector(normal(c.d_w));
        let noise_z = Tensor::new(&[samples, t, c.d_z], normal(samples * t * c.d_z))?;
        let generated = scheduled_mask(t, x.observed(), p, rng);
        Ok(Self {
            x,
            pseudo,
            w_start,
            noise_w,
            noise_z,
            generated,
        })
    }
}

pub struct LossContext<'c> {
    pub skeleton: &'c Skeleton,
    pub weights: &'c LossWeights,
    pub prior: &'c PosePrior,
    pub anneal: f64,
}

pub struct SequenceLoss<'a> {
    pub total: Var<'a>,
    pub breakdown: LossBreakdown,
    /// Source of the decoder input actually read for frames `1..T−1`.
    pub sources: Vec<FrameSource>,
    /// `[K, T−1, J, 3]` emitted means for frames `2..T`.
    pub generated: Var<'a>,
    pub skipped_hinges: usize,
}

/// Inference pass, scheduled-sampling generation pass and the total loss of
/// one sequence.
///
/// Frames are emitted in chunks that end at each frame whose generated pose
/// is fed back, so every emission sees exactly the inputs the mask selects;
/// gradients flow through fed-back poses.
pub fn sequence_loss<'a>(
    f: &Fwd<'a>,
    model: &HitDvae,
    ctx: &LossContext<'a>,
    input: &StepInput,
) -> Result<SequenceLoss<'a>> {
    let c = &model.config;
    let t = input.x.frames();
    let k = input.noise_z.shape()[0];
    let j = c.joints;
    if input.generated.len() != t || input.noise_z.shape() != [k, t, c.d_z] {
        return Err(Error::InvalidArgument("step input does not match the sequence length".into()));
    }
    let x = f.constant(input.x.to_tensor());

    // Inference.
    let enc = model.pose_features(f, Side::Encoder, x)?;
    let qw = model.infer_w_from_features(f, enc.slice(0, input.w_start, c.w_window)?)?;
    let w = qw.sample(f.constant(input.noise_w.clone()))?;
    let qz = model.infer_z_from_features(f, enc, w)?;
    let z = qz.sample(f.constant(input.noise_z.clone()))?;

    // Generation with scheduled sampling.
    let gt_feats = model.pose_features(f, Side::Decoder, x)?;
    let width = c.feature_dim();
    let mut rows: Vec<Var<'a>> = Vec::new();
    let mut sources = Vec::with_capacity(t - 1);
    let mut have = 0; // decoder inputs available for frames 1..=have
    let mut chunks: Vec<Var<'a>> = Vec::new();
    let mut start = 2;
    while start <= t {
        let end = (start..t).find(|&e| input.generated[e - 1]).unwrap_or(t);
        if end - 1 > have {
            let n = end - 1 - have;
            rows.push(gt_feats.slice(0, have, n)?.broadcast_to(&[k, n, width])?);
            sources.extend(std::iter::repeat(FrameSource::GroundTruth).take(n));
            have = end - 1;
        }
        let feats = Var::concat(&rows, 1)?;
        let zt = z.slice(1, start - 1, end - start + 1)?;
        let mu = model.emit_x(f, start..end + 1, zt, feats, w)?;
        if end < t {
            let last = mu.slice(1, end - start, 1)?;
            rows.push(model.pose_features(f, Side::Decoder, last)?);
            sources.push(FrameSource::Generated);
            have = end;
        }
        chunks.push(mu);
        start = end + 1;
    }
    let xhat = Var::concat(&chunks, 1)?;
    let dec = Var::concat(&rows, 1)?;
    let prior = model.prior_z(f, 2..t + 1, dec, z, w)?;
    let post = DiagGaussian::new(
        qz.mean.slice(0, 1, t - 1)?.broadcast_to(&[k, t - 1, c.d_z])?,
        qz.logvar.slice(0, 1, t - 1)?.broadcast_to(&[k, t - 1, c.d_z])?,
    )?;

    // Losses over frames 2..T.
    let target = x.slice(0, 1, t - 1)?;
    let w8 = ctx.weights;
    let (div_lower, div_upper) = if k >= 2 {
        (
            diversity_term(xhat, &ctx.skeleton.lower, w8.alpha_lower)?,
            diversity_term(xhat, &ctx.skeleton.upper, w8.alpha_upper)?,
        )
    } else {
        (f.constant(Tensor::zeros(&[1])), f.constant(Tensor::zeros(&[1])))
    };
    let angle = angle_loss(xhat, ctx.skeleton)?;
    if input.pseudo.shape() != [input.pseudo.shape()[0], t - 1, j, 3] {
        return Err(Error::ShapeMismatch {
            op: "pseudo ground truth",
            lhs: vec![t - 1, j, 3],
            rhs: input.pseudo.shape().to_vec(),
        });
    }
    let terms = LossTerms {
        recon: recon_loss(xhat, target)?,
        multimodal: multimodal_loss(xhat, f.constant(input.pseudo.clone()))?,
        kl_z: kl_z_loss(&post, &prior)?,
        kl_w: kl_w_loss(&qw)?,
        div_lower,
        div_upper,
        limb: limb_loss(xhat, ctx.skeleton)?,
        angle: angle.value,
        nf: ctx.prior.loss(xhat)?,
    };
    let (total, breakdown) = total_loss(&terms, ctx.weights, ctx.anneal)?;
    Ok(SequenceLoss {
        total,
        breakdown,
        sources,
        generated: xhat,
        skipped_hinges: angle.skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::nn::CouplingFlow;
    use crate::tensor::{Graph, ParamStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_prior(joints: usize) -> PosePrior {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let flow = CouplingFlow::new(&mut params, "nf", 3 * (joints - 1), 2, 4, &mut rng);
        PosePrior {
            flow,
            params,
            calibration: 0.0,
        }
    }

    fn setup(p: f64, seed: u64) -> (HitDvae, StepInput) {
        let skel = Skeleton::synthetic();
        let model = HitDvae::new(ModelConfig::micro(9, 3), 1).unwrap();
        let corpus = crate::data::synth_corpus(&crate::data::SynthSpec {
            clips_per_class: 1,
            frames: 8,
            ..crate::data::SynthSpec::standard(2)
        })
        .unwrap();
        let x = crate::data::preprocess(&corpus.clips[0], 3).unwrap();
        let pseudo = Tensor::new(&[1, 7, 9, 3], x.frames_slice(1, 7).to_vec()).unwrap();
        let _ = skel;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = StepInput::draw(&model, x, pseudo, 3, p, &mut rng).unwrap();
        (model, input)
    }

    #[test]
    fn mask_respects_prefix_and_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(scheduled_mask(50, 10, 0.0, &mut rng).iter().all(|g| !g));
        let all = scheduled_mask(50, 10, 1.0, &mut rng);
        assert!(all[..10].iter().all(|g| !g) && all[10..].iter().all(|g| *g));
        let half = scheduled_mask(10_000, 0, 0.5, &mut rng);
        let frac = half.iter().filter(|g| **g).count() as f64 / 9_999.0;
        assert!((0.47..=0.53).contains(&frac), "{frac}");
    }

    #[test]
    fn teacher_forcing_reads_no_generated_frame() {
        let (model, input) = setup(0.0, 3);
        let skel = Skeleton::synthetic();
        let prior = identity_prior(9);
        let w = LossWeights::humaneva();
        let ctx = LossContext {
            skeleton: &skel,
            weights: &w,
            prior: &prior,
            anneal: 1.0,
        };
        let g = Graph::new();
        let f = Fwd::new(&g, &model.params);
        let out = sequence_loss(&f, &model, &ctx, &input).unwrap();
        assert_eq!(out.sources.len(), 7);
        assert!(out.sources.iter().all(|s| *s == FrameSource::GroundTruth));

        let (model, input) = setup(1.0, 3);
        let g = Graph::new();
        let f = Fwd::new(&g, &model.params);
        let out = sequence_loss(&f, &model, &ctx, &input).unwrap();
        let generated = out.sources.iter().filter(|s| **s == FrameSource::Generated).count();
        assert_eq!(generated, 7 - 3);
    }

    #[test]
    fn chunked_emission_matches_teacher_forcing_when_nothing_fed_back() {
        // With no generated input the chunked pass is a single emission over
        // frames 2..T; compare against the direct call.
        let (model, input) = setup(0.0, 4);
        let skel = Skeleton::synthetic();
        let prior = identity_prior(9);
        let w = LossWeights::humaneva();
        let ctx = LossContext {
            skeleton: &skel,
            weights: &w,
            prior: &prior,
            anneal: 0.5,
        };
        let g = Graph::new();
        let f = Fwd::frozen(&g, &model.params);
        let out = sequence_loss(&f, &model, &ctx, &input).unwrap();
        let x = f.constant(input.x.to_tensor());
        let enc = model.pose_features(&f, Side::Encoder, x).unwrap();
        let qw = model
            .infer_w_from_features(&f, enc.slice(0, input.w_start, 3).unwrap())
            .unwrap();
        let wv = qw.sample(f.constant(input.noise_w.clone())).unwrap();
        let z = model
            .infer_z_from_features(&f, enc, wv)
            .unwrap()
            .sample(f.constant(input.noise_z.clone()))
            .unwrap();
        let dec = model
            .pose_features(&f, Side::Decoder, x)
            .unwrap()
            .slice(0, 0, 7)
            .unwrap()
            .broadcast_to(&[3, 7, model.config.feature_dim()])
            .unwrap();
        let direct = model
            .emit_x(&f, 2..9, z.slice(1, 1, 7).unwrap(), dec, wv)
            .unwrap()
            .value();
        assert_eq!(out.generated.value(), direct);
    }
}
