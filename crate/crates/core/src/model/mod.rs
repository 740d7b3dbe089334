//! The hierarchical transformer DVAE: posterior networks for `w` and
//! `z_1:T`, the causal `z` prior and the causal pose emission.

mod config;
mod gaussian;
mod sequence;

pub use config::{BlockConfig, ModelConfig};
pub use gaussian::{reparameterize, DiagGaussian};
pub use sequence::{LatentSequence, PoseSequence};

use std::f64::consts::PI;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{sinusoidal_encoding, Activation, AttentionMask, GcnBlock, Linear, TransformerBlock};
use crate::tensor::{Fwd, ParamStore, Tensor, Var};

/// Which spatial feature extractor to use; the two never share weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Encoder,
    Decoder,
}

#[derive(Clone, Debug)]
pub struct HitDvae {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub enc_spatial: Vec<GcnBlock>,
    pub dec_spatial: Vec<GcnBlock>,
    pub w_temporal: Vec<GcnBlock>,
    pub w_head: Linear,
    pub enc_in: Linear,
    pub enc_block: TransformerBlock,
    pub enc_head: Linear,
    pub zq_in: Linear,
    pub zk_in: Linear,
    pub z_block: TransformerBlock,
    pub z_head: Linear,
    pub xq_in: Linear,
    pub xk_in: Linear,
    pub x_block: TransformerBlock,
    pub x_head: Linear,
}

fn spatial_stack(
    store: &mut ParamStore,
    name: &str,
    c: &ModelConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<GcnBlock> {
    (0..c.spatial_blocks)
        .map(|i| {
            let input = if i == 0 { 3 } else { c.spatial_hidden };
            GcnBlock::new(
                store,
                &format!("{name}.{i}"),
                c.joints,
                input,
                c.spatial_hidden,
                Activation::Tanh,
                rng,
            )
        })
        .collect()
}

impl HitDvae {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let feat = c.feature_dim();
        let enc_spatial = spatial_stack(&mut s, "enc.spatial", c, &mut rng);
        let dec_spatial = spatial_stack(&mut s, "dec.spatial", c, &mut rng);
        let w_temporal = (0..c.temporal_blocks)
            .map(|i| {
                let input = if i == 0 { feat } else { c.temporal_hidden };
                GcnBlock::new(
                    &mut s,
                    &format!("enc.temporal.{i}"),
                    c.w_window,
                    input,
                    c.temporal_hidden,
                    Activation::Tanh,
                    &mut rng,
                )
            })
            .collect();
        let w_head = Linear::new(&mut s, "enc.w_head", c.w_window * c.temporal_hidden, 2 * c.d_w, &mut rng);
        let (e, zd, xd) = (c.encoder, c.z_decoder, c.x_decoder);
        let enc_in = Linear::new(&mut s, "enc.in", feat + c.d_w, e.width, &mut rng);
        let enc_block = TransformerBlock::new(&mut s, "enc.block", e.width, e.heads, e.ff, &mut rng)?;
        let enc_head = Linear::new(&mut s, "enc.head", e.width, 2 * c.d_z, &mut rng);
        let zq_in = Linear::new(&mut s, "zdec.q_in", feat + c.d_w, zd.width, &mut rng);
        let zk_in = Linear::new(&mut s, "zdec.k_in", c.d_z, zd.width, &mut rng);
        let z_block = TransformerBlock::new(&mut s, "zdec.block", zd.width, zd.heads, zd.ff, &mut rng)?;
        let z_head = Linear::new(&mut s, "zdec.head", zd.width, 2 * c.d_z, &mut rng);
        let xq_in = Linear::new(&mut s, "xdec.q_in", c.d_z + c.d_w, xd.width, &mut rng);
        let xk_in = Linear::new(&mut s, "xdec.k_in", feat, xd.width, &mut rng);
        let x_block = TransformerBlock::new(&mut s, "xdec.block", xd.width, xd.heads, xd.ff, &mut rng)?;
        let x_head = Linear::new(&mut s, "xdec.head", xd.width, (c.joints - 1) * 3, &mut rng);
        Ok(Self {
            config,
            params: s,
            enc_spatial,
            dec_spatial,
            w_temporal,
            w_head,
            enc_in,
            enc_block,
            enc_head,
            zq_in,
            zk_in,
            z_block,
            z_head,
            xq_in,
            xk_in,
            x_block,
            x_head,
        })
    }

    fn with_position<'a>(&self, f: &Fwd<'a>, x: Var<'a>, times: &[usize]) -> Result<Var<'a>> {
        if !self.config.positional_encoding {
            return Ok(x);
        }
        let width = *x.shape().last().unwrap();
        x.add(f.constant(sinusoidal_encoding(times, width)))
    }

    /// `w` repeated to `[lead.., n, d_w]`.
    fn spread_w<'a>(&self, w: Var<'a>, lead: &[usize], n: usize) -> Result<Var<'a>> {
        if w.shape() != [self.config.d_w] {
            return Err(Error::ShapeMismatch {
                op: "w",
                lhs: vec![self.config.d_w],
                rhs: w.shape(),
            });
        }
        let mut shape = lead.to_vec();
        shape.extend([n, self.config.d_w]);
        w.broadcast_to(&shape)
    }

    /// Per-frame spatial-GCN features: `[.., T, J, 3]` → `[.., T, J·H]`.
    pub fn pose_features<'a>(&self, f: &Fwd<'a>, side: Side, x: Var<'a>) -> Result<Var<'a>> {
        let shape = x.shape();
        let rank = shape.len();
        if rank < 3 || shape[rank - 2] != self.config.joints || shape[rank - 1] != 3 {
            return Err(Error::ShapeMismatch {
                op: "pose_features",
                lhs: vec![self.config.joints, 3],
                rhs: shape,
            });
        }
        let rows: usize = shape[..rank - 2].iter().product();
        let blocks = match side {
            Side::Encoder => &self.enc_spatial,
            Side::Decoder => &self.dec_spatial,
        };
        let mut h = x.reshape(&[rows, self.config.joints, 3])?;
        for b in blocks {
            h = b.forward(f, h)?;
        }
        let mut out = shape[..rank - 2].to_vec();
        out.push(self.config.feature_dim());
        h.reshape(&out)
    }

    /// `q(w | x)` from encoder features of exactly `w_window` frames.
    pub fn infer_w_from_features<'a>(&self, f: &Fwd<'a>, feats: Var<'a>) -> Result<DiagGaussian<'a>> {
        let c = &self.config;
        if feats.shape() != [c.w_window, c.feature_dim()] {
            return Err(Error::InvalidArgument(format!(
                "w inference needs {} frames of width {}, got {:?}",
                c.w_window,
                c.feature_dim(),
                feats.shape()
            )));
        }
        let mut h = feats;
        for b in &self.w_temporal {
            h = b.forward(f, h)?;
        }
        let packed = self
            .w_head
            .forward(f, h.reshape(&[c.w_window * c.temporal_hidden])?)?;
        DiagGaussian::from_packed(packed, c.logvar_clamp)
    }

    /// `q(w | x)` for a `[w_window, J, 3]` pose window.
    pub fn infer_w<'a>(&self, f: &Fwd<'a>, window: Var<'a>) -> Result<DiagGaussian<'a>> {
        let feats = self.pose_features(f, Side::Encoder, window)?;
        self.infer_w_from_features(f, feats)
    }

    /// `q(z_t | x_1:T, w)` for every frame, from encoder features
    /// `[.., T, F]`. Attention is unmasked.
    pub fn infer_z_from_features<'a>(
        &self,
        f: &Fwd<'a>,
        feats: Var<'a>,
        w: Var<'a>,
    ) -> Result<DiagGaussian<'a>> {
        let shape = feats.shape();
        let rank = shape.len();
        let t = shape[rank - 2];
        let wb = self.spread_w(w, &shape[..rank - 2], t)?;
        let times: Vec<usize> = (1..=t).collect();
        let q = self.enc_in.forward(f, Var::concat(&[feats, wb], rank - 1)?)?;
        let q = self.with_position(f, q, &times)?;
        let h = self.enc_block.forward(f, q, q, &AttentionMask::full(t, t))?;
        DiagGaussian::from_packed(self.enc_head.forward(f, h)?, self.config.logvar_clamp)
    }

    pub fn infer_z<'a>(&self, f: &Fwd<'a>, x: Var<'a>, w: Var<'a>) -> Result<DiagGaussian<'a>> {
        let feats = self.pose_features(f, Side::Encoder, x)?;
        self.infer_z_from_features(f, feats, w)
    }

    fn check_times(&self, times: &Range<usize>, first: usize, op: &str) -> Result<()> {
        if first == 0 {
            return Err(Error::InvalidArgument(format!("{op}: frames are 1-based")));
        }
        if times.start < 2 {
            return Err(Error::InvalidArgument(format!(
                "{op} is defined from frame 2 on (got t = {})",
                times.start
            )));
        }
        if times.start <= first {
            return Err(Error::InvalidArgument(format!(
                "{op}: frame {} has no history from frame {first} on",
                times.start
            )));
        }
        if times.end <= times.start {
            return Err(Error::InvalidArgument(format!("{op}: empty frame range")));
        }
        Ok(())
    }

    /// `p(z_t | x_{t−1}, z_1:t−1, w)` for the 1-based frames in `times`.
    ///
    /// `dec_feats` holds decoder features of frames `1..` (at least
    /// `times.end − 2` rows) and `z` the latents of frames `1..` (same
    /// minimum). Returns `[.., n, d_z]`.
    pub fn prior_z<'a>(
        &self,
        f: &Fwd<'a>,
        times: Range<usize>,
        dec_feats: Var<'a>,
        z: Var<'a>,
        w: Var<'a>,
    ) -> Result<DiagGaussian<'a>> {
        self.prior_z_from(f, times, 1, dec_feats, z, w)
    }

    /// [`Self::prior_z`] with history rows starting at frame `first`, so
    /// attention only sees frames `first..t`.
    pub fn prior_z_from<'a>(
        &self,
        f: &Fwd<'a>,
        times: Range<usize>,
        first: usize,
        dec_feats: Var<'a>,
        z: Var<'a>,
        w: Var<'a>,
    ) -> Result<DiagGaussian<'a>> {
        self.check_times(&times, first, "prior_z")?;
        let shape = dec_feats.shape();
        let rank = shape.len();
        let axis = rank - 2;
        let n = times.len();
        let keys = times.end - 1 - first;
        let qf = dec_feats.slice(axis, times.start - 1 - first, n)?;
        let wb = self.spread_w(w, &shape[..axis], n)?;
        let qt: Vec<usize> = times.clone().collect();
        let kt: Vec<usize> = (first..first + keys).collect();
        let q = self.zq_in.forward(f, Var::concat(&[qf, wb], rank - 1)?)?;
        let q = self.with_position(f, q, &qt)?;
        let k = self.zk_in.forward(f, z.slice(axis, 0, keys)?)?;
        let k = self.with_position(f, k, &kt)?;
        let h = self.z_block.forward(f, q, k, &AttentionMask::causal(&qt, &kt))?;
        DiagGaussian::from_packed(self.z_head.forward(f, h)?, self.config.logvar_clamp)
    }

    /// Mean pose `μ_x,t` for the 1-based frames in `times`, given their
    /// latents `z_t` (`[.., n, d_z]`) and decoder features of frames `1..`
    /// (at least `times.end − 2` rows). Returns `[.., n, J, 3]` with the root
    /// joint at the origin.
    pub fn emit_x<'a>(
        &self,
        f: &Fwd<'a>,
        times: Range<usize>,
        z_t: Var<'a>,
        dec_feats: Var<'a>,
        w: Var<'a>,
    ) -> Result<Var<'a>> {
        self.emit_x_from(f, times, 1, z_t, dec_feats, w)
    }

    /// [`Self::emit_x`] with feature rows starting at frame `first`.
    pub fn emit_x_from<'a>(
        &self,
        f: &Fwd<'a>,
        times: Range<usize>,
        first: usize,
        z_t: Var<'a>,
        dec_feats: Var<'a>,
        w: Var<'a>,
    ) -> Result<Var<'a>> {
        self.check_times(&times, first, "emit_x")?;
        let shape = z_t.shape();
        let rank = shape.len();
        let axis = rank - 2;
        let n = times.len();
        if shape[axis] != n {
            return Err(Error::ShapeMismatch {
                op: "emit_x latents",
                lhs: vec![n, self.config.d_z],
                rhs: shape,
            });
        }
        let keys = times.end - 1 - first;
        let wb = self.spread_w(w, &shape[..axis], n)?;
        let qt: Vec<usize> = times.clone().collect();
        let kt: Vec<usize> = (first..first + keys).collect();
        let q = self.xq_in.forward(f, Var::concat(&[z_t, wb], rank - 1)?)?;
        let q = self.with_position(f, q, &qt)?;
        let k = self.xk_in.forward(f, dec_feats.slice(axis, 0, keys)?)?;
        let k = self.with_position(f, k, &kt)?;
        let h = self.x_block.forward(f, q, k, &AttentionMask::causal(&qt, &kt))?;
        let j = self.config.joints;
        let mut body = shape[..axis].to_vec();
        body.extend([n, j - 1, 3]);
        let out = self.x_head.forward(f, h)?.reshape(&body)?;
        let mut root = body;
        root[axis + 1] = 1;
        Var::concat(&[f.constant(Tensor::zeros(&root)), out], axis + 1)
    }

    /// `Σ_{t≥2} [log p(x_t | ·) + log p(z_t | ·)] + log p(w)` for a single
    /// sequence `x` (`[T, J, 3]`), latents `z` (`[T, d_z]`) and `w`. The
    /// emission density covers the `3(J−1)` non-root coordinates.
    pub fn log_joint<'a>(&self, f: &Fwd<'a>, x: Var<'a>, z: Var<'a>, w: Var<'a>) -> Result<Var<'a>> {
        let t = x.shape()[0];
        let feats = self.pose_features(f, Side::Decoder, x)?;
        let prior = self.prior_z(f, 2..t + 1, feats, z, w)?;
        let z_rest = z.slice(0, 1, t - 1)?;
        let lz = prior.log_density(z_rest)?.sum();
        let mu = self.emit_x(f, 2..t + 1, z_rest, feats, w)?;
        let dims = ((self.config.joints - 1) * 3) as f64;
        let lx = x
            .slice(0, 1, t - 1)?
            .sub(mu)?
            .square()
            .sum()
            .scale(-0.5)
            .add_scalar(-0.5 * dims * (t - 1) as f64 * (2.0 * PI).ln());
        let d_w = self.config.d_w as f64;
        let lw = w.square().sum().scale(-0.5).add_scalar(-0.5 * d_w * (2.0 * PI).ln());
        lz.add(lx)?.add(lw)
    }

    /// Single-draw ELBO with analytic KL terms:
    /// `Σ_{t≥2} [log p(x_t | ·) − KL(q(z_t) ‖ p(z_t))] − KL(q(w) ‖ N(0, I))`.
    /// `w` is inferred from frames `w_start..w_start + w_window`.
    pub fn elbo<'a>(
        &self,
        f: &Fwd<'a>,
        x: Var<'a>,
        w_start: usize,
        noise_w: Var<'a>,
        noise_z: Var<'a>,
    ) -> Result<Var<'a>> {
        let t = x.shape()[0];
        let enc = self.pose_features(f, Side::Encoder, x)?;
        let qw = self.infer_w_from_features(f, enc.slice(0, w_start, self.config.w_window)?)?;
        let w = qw.sample(noise_w)?;
        let qz = self.infer_z_from_features(f, enc, w)?;
        let z = qz.sample(noise_z)?;
        let dec = self.pose_features(f, Side::Decoder, x)?;
        let prior = self.prior_z(f, 2..t + 1, dec, z, w)?;
        let kl_z = qz.slice(0, 1, t - 1)?.kl(&prior)?.sum();
        let mu = self.emit_x(f, 2..t + 1, z.slice(0, 1, t - 1)?, dec, w)?;
        let dims = ((self.config.joints - 1) * 3) as f64;
        let lx = x
            .slice(0, 1, t - 1)?
            .sub(mu)?
            .square()
            .sum()
            .scale(-0.5)
            .add_scalar(-0.5 * dims * (t - 1) as f64 * (2.0 * PI).ln());
        lx.sub(kl_z)?.sub(qw.kl_standard()?.sum())
    }
}
