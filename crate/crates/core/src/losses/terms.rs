use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Skeleton;
use crate::error::{Error, Result};
use crate::model::DiagGaussian;
use crate::nn::CouplingFlow;
use crate::tensor::{Checkpoint, Fwd, ParamStore, Tensor, Var};

/// Zero-length limbs get this constant added under the square root so their
/// gradient stays finite; any other length is computed exactly.
const LENGTH_GUARD: f64 = 1e-24;
const COS_LIMIT: f64 = 1.0 - 1e-12;
/// Hinges with a limb shorter than this are skipped by [`angle_loss`].
pub const DEGENERATE_LIMB: f64 = 1e-9;

fn check_samples(samples: &Var<'_>, target: &[usize], op: &'static str) -> Result<usize> {
    let s = samples.shape();
    if s.len() != target.len() + 1 || s[1..] != *target {
        return Err(Error::ShapeMismatch {
            op,
            lhs: target.to_vec(),
            rhs: s,
        });
    }
    Ok(s[0])
}

/// Mean squared error of every sample against `target`: `[K, ..]` → `[K]`.
pub fn per_sample_mse<'a>(samples: Var<'a>, target: Var<'a>) -> Result<Var<'a>> {
    let k = check_samples(&samples, &target.shape(), "per_sample_mse")?;
    let n = target.numel();
    samples
        .sub(target)?
        .square()
        .reshape(&[k, n])?
        .mean_axis(1, false)
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x < v[best] {
            best = i;
        }
    }
    best
}

/// `min_k mean‖x̂^k − x‖²`; the gradient flows into the winning sample only.
pub fn recon_loss<'a>(samples: Var<'a>, target: Var<'a>) -> Result<Var<'a>> {
    let per = per_sample_mse(samples, target)?;
    let k = per.with_value(argmin);
    per.select(0, &[k])
}

/// `(1/M) Σ_m min_k mean‖x̂^k − x^m‖²` with pseudo ground truths `[M, ..]`.
pub fn multimodal_loss<'a>(samples: Var<'a>, pseudo: Var<'a>) -> Result<Var<'a>> {
    let ps = pseudo.shape();
    let m = ps[0];
    let mut total: Option<Var<'a>> = None;
    for i in 0..m {
        let target = pseudo.select(0, &[i])?.reshape(&ps[1..])?;
        let term = recon_loss(samples, target)?;
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    Ok(total
        .ok_or_else(|| Error::InvalidArgument("empty pseudo ground-truth set".into()))?
        .scale(1.0 / m as f64))
}

/// Mean over frames (and any leading axes) of `KL(q_t ‖ p_t)`.
pub fn kl_z_loss<'a>(posterior: &DiagGaussian<'a>, prior: &DiagGaussian<'a>) -> Result<Var<'a>> {
    Ok(posterior.kl(prior)?.mean())
}

/// `KL(q(w) ‖ N(0, I))`.
pub fn kl_w_loss<'a>(posterior: &DiagGaussian<'a>) -> Result<Var<'a>> {
    Ok(posterior.kl_standard()?.mean())
}

fn pair_indices(k: usize) -> (Vec<usize>, Vec<usize>) {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            a.push(i);
            b.push(j);
        }
    }
    (a, b)
}

/// `(2 / K(K−1)) Σ_{k<k'} exp(−‖x̂^{k,p} − x̂^{k',p}‖₁ / α)` over the joints
/// of one body part; `samples` is `[K, T, J, 3]`.
pub fn diversity_term<'a>(samples: Var<'a>, joints: &[usize], alpha: f64) -> Result<Var<'a>> {
    let s = samples.shape();
    if s.len() != 4 || s[3] != 3 {
        return Err(Error::ShapeMismatch {
            op: "diversity",
            lhs: vec![0, 0, 0, 3],
            rhs: s,
        });
    }
    let k = s[0];
    if k < 2 {
        return Err(Error::InvalidArgument(format!("diversity needs at least 2 samples, got {k}")));
    }
    if joints.is_empty() || !(alpha > 0.0) {
        return Err(Error::InvalidArgument("diversity needs joints and a positive α".into()));
    }
    let part = samples
        .select(2, joints)?
        .reshape(&[k, s[1] * joints.len() * 3])?;
    let (a, b) = pair_indices(k);
    let dist = part
        .select(0, &a)?
        .sub(part.select(0, &b)?)?
        .abs()
        .sum_axis(1, false)?;
    Ok(dist.scale(-1.0 / alpha).exp().mean())
}

fn flatten_poses<'a>(x: Var<'a>, joints: usize) -> Result<(Var<'a>, usize)> {
    let s = x.shape();
    let r = s.len();
    if r < 2 || s[r - 1] != 3 || s[r - 2] != joints {
        return Err(Error::ShapeMismatch {
            op: "pose",
            lhs: vec![joints, 3],
            rhs: s,
        });
    }
    let n = x.numel() / (3 * joints);
    Ok((x.reshape(&[n, joints, 3])?, n))
}

/// Guarded Euclidean norm over the last axis.
fn norms<'a>(v: Var<'a>) -> Result<Var<'a>> {
    let axis = v.shape().len() - 1;
    let sq = v.square().sum_axis(axis, false)?;
    let guard: Vec<f64> = sq.with_value(|s| {
        s.iter()
            .map(|&x| if x < LENGTH_GUARD { LENGTH_GUARD } else { 0.0 })
            .collect()
    });
    let guard = Tensor::new(&sq.shape(), guard)?;
    let g = v.graph().constant(guard);
    Ok(sq.add(g)?.sqrt())
}

/// Mean over frames and edges of `(‖x_c − x_p‖ − ℓ_e)²`; `x` is `[.., J, 3]`.
pub fn limb_loss<'a>(x: Var<'a>, skeleton: &Skeleton) -> Result<Var<'a>> {
    let (x, _) = flatten_poses(x, skeleton.joint_count())?;
    let parents: Vec<usize> = skeleton.edges.iter().map(|e| e.0).collect();
    let children: Vec<usize> = skeleton.edges.iter().map(|e| e.1).collect();
    let len = norms(x.select(1, &children)?.sub(x.select(1, &parents)?)?)?;
    let reference = x.graph().constant(Tensor::vector(skeleton.limb_lengths.clone()));
    Ok(len.sub(reference)?.square().mean())
}

#[derive(Clone, Copy, Debug)]
pub struct AngleLoss<'a> {
    pub value: Var<'a>,
    /// Hinge evaluations skipped because a limb had (near) zero length.
    pub skipped: usize,
}

/// Squared violations of the hinge limits, summed over hinges and averaged
/// over frames; `x` is `[.., J, 3]`.
pub fn angle_loss<'a>(x: Var<'a>, skeleton: &Skeleton) -> Result<AngleLoss<'a>> {
    let (x, n) = flatten_poses(x, skeleton.joint_count())?;
    let g = x.graph();
    let hinges = &skeleton.hinges;
    if hinges.is_empty() {
        return Ok(AngleLoss {
            value: g.scalar(0.0),
            skipped: 0,
        });
    }
    let h = hinges.len();
    let pick = |f: fn(&crate::data::Hinge) -> usize| -> Vec<usize> { hinges.iter().map(f).collect() };
    let center = x.select(1, &pick(|h| h.joint))?;
    let a = x.select(1, &pick(|h| h.parent))?.sub(center)?;
    let b = x.select(1, &pick(|h| h.child))?.sub(center)?;
    let (na, nb) = (norms(a)?, norms(b)?);
    let mut skipped = 0;
    let mask: Vec<f64> = na.with_value(|la| {
        nb.with_value(|lb| {
            la.iter()
                .zip(lb)
                .map(|(p, q)| {
                    if *p < DEGENERATE_LIMB || *q < DEGENERATE_LIMB {
                        skipped += 1;
                        0.0
                    } else {
                        1.0
                    }
                })
                .collect()
        })
    });
    let cos = a
        .mul(b)?
        .sum_axis(2, false)?
        .div(na.mul(nb)?)?
        .clamp(-COS_LIMIT, COS_LIMIT);
    let angle = cos.acos();
    let lo = g.constant(Tensor::vector(hinges.iter().map(|h| h.min).collect()));
    let hi = g.constant(Tensor::vector(hinges.iter().map(|h| h.max).collect()));
    let over = angle.sub(hi)?.relu();
    let under = lo.sub(angle)?.relu();
    let mask = g.constant(Tensor::new(&[n, h], mask)?);
    let value = over
        .square()
        .add(under.square())?
        .mul(mask)?
        .sum()
        .scale(1.0 / n as f64);
    Ok(AngleLoss { value, skipped })
}

/// Frozen pose prior: a coupling flow over the non-root coordinates plus the
/// calibration constant subtracted from its negative log-likelihood.
#[derive(Clone, Debug)]
pub struct PosePrior {
    pub flow: CouplingFlow,
    pub params: ParamStore,
    pub calibration: f64,
}

impl PosePrior {
    pub fn joints(&self) -> usize {
        self.flow.dim / 3 + 1
    }

    /// Non-root coordinates of `x` (`[.., J, 3]`) as `[N, 3(J−1)]`.
    pub fn flow_input<'a>(x: Var<'a>, joints: usize) -> Result<Var<'a>> {
        let (x, n) = flatten_poses(x, joints)?;
        x.slice(1, 1, joints - 1)?.reshape(&[n, 3 * (joints - 1)])
    }

    /// `−log p(x)` per frame, gradients flowing into `x` only.
    pub fn neg_log_prob<'a>(&'a self, x: Var<'a>) -> Result<Var<'a>> {
        let f = Fwd::frozen(x.graph(), &self.params);
        let input = Self::flow_input(x, self.joints())?;
        let lp = self.flow.log_prob(&f, input)?;
        if let Some(i) = lp.with_value(|v| v.iter().position(|x| !x.is_finite())) {
            return Err(Error::NonFinite {
                index: i,
                context: "pose prior log-prob".into(),
            });
        }
        Ok(lp.neg())
    }

    /// Mean over frames of `max(0, −log p(x) − c)`.
    pub fn loss<'a>(&'a self, x: Var<'a>) -> Result<Var<'a>> {
        Ok(self.neg_log_prob(x)?.add_scalar(-self.calibration).relu().mean())
    }

    /// Flow weights (named `flow.*`) plus the layout and calibration.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.params.to_checkpoint();
        let hidden = self.flow.layers.first().map_or(0, |l| l.net.layers[0].out_dim);
        ck.push(
            "prior.layout",
            &[3],
            vec![self.flow.dim as f64, self.flow.layers.len() as f64, hidden as f64],
        );
        ck.push("prior.calibration", &[1], vec![self.calibration]);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let field = |name: &str, len: usize| -> Result<Vec<f64>> {
            match ck.get(name) {
                Some((_, v)) if v.len() == len => Ok(v.to_vec()),
                Some((_, v)) => Err(Error::Checkpoint(format!("`{name}` has {} values, expected {len}", v.len()))),
                None => Err(Error::Checkpoint(format!("missing `{name}`; not a pose prior checkpoint"))),
            }
        };
        let layout = field("prior.layout", 3)?;
        let calibration = field("prior.calibration", 1)?[0];
        let (dim, layers, hidden) = (layout[0] as usize, layout[1] as usize, layout[2] as usize);
        let mut params = ParamStore::new();
        let flow = CouplingFlow::new(&mut params, "flow", dim, layers, hidden, &mut ChaCha8Rng::seed_from_u64(0));
        params.load_checkpoint(ck)?;
        Ok(Self {
            flow,
            params,
            calibration,
        })
    }
}
