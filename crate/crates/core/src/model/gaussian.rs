use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Var;

/// Diagonal Gaussian over the last axis; leading axes index independent
/// distributions.
#[derive(Clone, Copy, Debug)]
pub struct DiagGaussian<'a> {
    pub mean: Var<'a>,
    pub logvar: Var<'a>,
}

impl<'a> DiagGaussian<'a> {
    pub fn new(mean: Var<'a>, logvar: Var<'a>) -> Result<Self> {
        if mean.shape() != logvar.shape() {
            return Err(Error::ShapeMismatch {
                op: "gaussian",
                lhs: mean.shape(),
                rhs: logvar.shape(),
            });
        }
        Ok(Self { mean, logvar })
    }

    /// Splits `[.., 2d]` into mean and log-variance, clamping the latter to
    /// `[-clamp, clamp]`.
    pub fn from_packed(packed: Var<'a>, clamp: f64) -> Result<Self> {
        let shape = packed.shape();
        let axis = shape.len() - 1;
        if shape[axis] % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "packed gaussian needs an even last axis, got {shape:?}"
            )));
        }
        let d = shape[axis] / 2;
        Ok(Self {
            mean: packed.slice(axis, 0, d)?,
            logvar: packed.slice(axis, d, d)?.clamp(-clamp, clamp),
        })
    }

    pub fn dim(&self) -> usize {
        *self.mean.shape().last().unwrap()
    }

    pub fn std(&self) -> Var<'a> {
        self.logvar.scale(0.5).exp()
    }

    /// `μ + exp(½·logvar)·noise`.
    pub fn sample(&self, noise: Var<'a>) -> Result<Var<'a>> {
        self.mean.add(self.std().mul(noise)?)
    }

    /// Rows `start..start+len` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            mean: self.mean.slice(axis, start, len)?,
            logvar: self.logvar.slice(axis, start, len)?,
        })
    }

    /// `log N(x; μ, diag(exp(logvar)))`, summed over the last axis.
    pub fn log_density(&self, x: Var<'a>) -> Result<Var<'a>> {
        let axis = self.mean.shape().len() - 1;
        let d = self.dim() as f64;
        let z2 = x.sub(self.mean)?.square().mul(self.logvar.neg().exp())?;
        Ok(z2
            .add(self.logvar)?
            .sum_axis(axis, false)?
            .scale(-0.5)
            .add_scalar(-0.5 * d * (2.0 * PI).ln()))
    }

    /// `KL(self ‖ other)`, summed over the last axis.
    pub fn kl(&self, other: &DiagGaussian<'a>) -> Result<Var<'a>> {
        if self.mean.shape() != other.mean.shape() {
            return Err(Error::ShapeMismatch {
                op: "kl",
                lhs: self.mean.shape(),
                rhs: other.mean.shape(),
            });
        }
        let axis = self.mean.shape().len() - 1;
        let ratio = self
            .logvar
            .exp()
            .add(self.mean.sub(other.mean)?.square())?
            .mul(other.logvar.neg().exp())?;
        Ok(other
            .logvar
            .sub(self.logvar)?
            .add(ratio)?
            .add_scalar(-1.0)
            .sum_axis(axis, false)?
            .scale(0.5))
    }

    /// `KL(self ‖ N(0, I))`, summed over the last axis.
    pub fn kl_standard(&self) -> Result<Var<'a>> {
        let axis = self.mean.shape().len() - 1;
        Ok(self
            .logvar
            .exp()
            .add(self.mean.square())?
            .sub(self.logvar)?
            .add_scalar(-1.0)
            .sum_axis(axis, false)?
            .scale(0.5))
    }
}

/// Reparameterised draw `μ + σ·noise`.
pub fn reparameterize<'a>(g: &DiagGaussian<'a>, noise: Var<'a>) -> Result<Var<'a>> {
    g.sample(noise)
}
