//! Differentiable layers built on the tensor tape.

mod attention;
mod flow;
mod gcn;
mod gru;

pub use attention::{sinusoidal_encoding, AttentionMask, MultiHeadAttention, TransformerBlock};
pub use flow::{CouplingFlow, CouplingLayer};
pub use gcn::{Activation, GcnBlock};
pub use gru::GruCell;

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Fwd, ParamId, ParamStore, Tensor, Var};

fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Affine map `x·W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let w = Tensor::uniform(&[in_dim, out_dim], xavier_bound(in_dim, out_dim), rng);
        Self::from_tensors(store, name, w, Tensor::zeros(&[out_dim]))
    }

    /// Weight and bias initialised to zero.
    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self::from_tensors(
            store,
            name,
            Tensor::zeros(&[in_dim, out_dim]),
            Tensor::zeros(&[out_dim]),
        )
    }

    pub fn from_tensors(store: &mut ParamStore, name: &str, weight: Tensor, bias: Tensor) -> Self {
        let (in_dim, out_dim) = (weight.shape()[0], weight.shape()[1]);
        Self {
            weight: store.insert(format!("{name}.weight"), weight),
            bias: store.insert(format!("{name}.bias"), bias),
            in_dim,
            out_dim,
        }
    }

    /// `x` is `[.., in_dim]`; a plain vector is treated as a single row.
    pub fn forward<'a>(&self, f: &Fwd<'a>, x: Var<'a>) -> Result<Var<'a>> {
        if x.shape().len() == 1 {
            let row = x.reshape(&[1, self.in_dim])?;
            return row.matmul(f.p(self.weight))?.add(f.p(self.bias))?.reshape(&[self.out_dim]);
        }
        x.matmul(f.p(self.weight))?.add(f.p(self.bias))
    }
}

/// Layer normalisation over the last axis with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.insert(format!("{name}.gain"), Tensor::ones(&[dim])),
            bias: store.insert(format!("{name}.bias"), Tensor::zeros(&[dim])),
            eps: 1e-5,
        }
    }

    pub fn forward<'a>(&self, f: &Fwd<'a>, x: Var<'a>) -> Result<Var<'a>> {
        let axis = x.shape().len() - 1;
        let centered = x.sub(x.mean_axis(axis, true)?)?;
        let var = centered.square().mean_axis(axis, true)?;
        let inv = var.add_scalar(self.eps).powf(-0.5);
        centered.mul(inv)?.mul(f.p(self.gain))?.add(f.p(self.bias))
    }
}

/// Stack of linear layers with `tanh` between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        zero_last: bool,
        rng: &mut R,
    ) -> Self {
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let lname = format!("{name}.{i}");
                if zero_last && i == n - 1 {
                    Linear::zeros(store, &lname, dims[i], dims[i + 1])
                } else {
                    Linear::new(store, &lname, dims[i], dims[i + 1], rng)
                }
            })
            .collect();
        Self { layers }
    }

    pub fn forward<'a>(&self, f: &Fwd<'a>, x: Var<'a>) -> Result<Var<'a>> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(f, h)?;
            if i + 1 < self.layers.len() {
                h = h.tanh();
            }
        }
        Ok(h)
    }
}
