use rand::Rng;
use serde::{Deserialize, Serialize};

use super::xavier_bound;
use crate::error::{Error, Result};
use crate::tensor::{Fwd, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply<'a>(self, x: Var<'a>) -> Var<'a> {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.relu(),
        }
    }
}

/// Graph convolution `X' = act(A·X·W + b)` with a fully learnable adjacency.
#[derive(Clone, Debug)]
pub struct GcnBlock {
    pub nodes: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub adjacency: ParamId,
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
}

impl GcnBlock {
    /// Adjacency starts at `I + N(0, 0.01²)`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        nodes: usize,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let mut adj = Tensor::randn(&[nodes, nodes], 0.01, rng);
        for i in 0..nodes {
            adj.data_mut()[i * nodes + i] += 1.0;
        }
        let w = Tensor::uniform(&[in_dim, out_dim], xavier_bound(in_dim, out_dim), rng);
        Self::from_tensors(store, name, adj, w, Tensor::zeros(&[out_dim]), activation)
            .expect("shapes constructed consistently")
    }

    pub fn from_tensors(
        store: &mut ParamStore,
        name: &str,
        adjacency: Tensor,
        weight: Tensor,
        bias: Tensor,
        activation: Activation,
    ) -> Result<Self> {
        let nodes = adjacency.shape()[0];
        if adjacency.shape() != [nodes, nodes] {
            return Err(Error::InvalidArgument(format!(
                "adjacency must be square, got {:?}",
                adjacency.shape()
            )));
        }
        let (in_dim, out_dim) = (weight.shape()[0], weight.shape()[1]);
        if out_dim == 0 || bias.shape() != [out_dim] {
            return Err(Error::ShapeMismatch {
                op: "gcn bias",
                lhs: vec![out_dim],
                rhs: bias.shape().to_vec(),
            });
        }
        Ok(Self {
            nodes,
            in_dim,
            out_dim,
            adjacency: store.insert(format!("{name}.adjacency"), adjacency),
            weight: store.insert(format!("{name}.weight"), weight),
            bias: store.insert(format!("{name}.bias"), bias),
            activation,
        })
    }

    /// `x` is `[N, F]` or `[B, N, F]`.
    pub fn forward<'a>(&self, f: &Fwd<'a>, x: Var<'a>) -> Result<Var<'a>> {
        let shape = x.shape();
        let rank = shape.len();
        if !(rank == 2 || rank == 3) || shape[rank - 2] != self.nodes || shape[rank - 1] != self.in_dim {
            return Err(Error::ShapeMismatch {
                op: "gcn_forward",
                lhs: vec![self.nodes, self.in_dim],
                rhs: shape,
            });
        }
        let xw = x.matmul(f.p(self.weight))?;
        let mixed = f.p(self.adjacency).matmul(xw)?;
        Ok(self.activation.apply(mixed.add(f.p(self.bias))?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(adj: Tensor, w: Tensor, act: Activation) -> (ParamStore, GcnBlock) {
        let mut store = ParamStore::new();
        let out = w.shape()[1];
        let b = GcnBlock::from_tensors(&mut store, "g", adj, w, Tensor::zeros(&[out]), act).unwrap();
        (store, b)
    }

    #[test]
    fn identity_block_is_identity() {
        let (store, b) = block(Tensor::eye(3), Tensor::eye(2), Activation::Identity);
        let g = Graph::new();
        let f = Fwd::new(&g, &store);
        let x = Tensor::new(&[3, 2], vec![1.0, -2.0, 0.5, 3.0, 4.0, -1.0]).unwrap();
        let y = b.forward(&f, g.constant(x.clone())).unwrap();
        assert_eq!(y.value(), x.data());
    }

    #[test]
    fn mean_aggregation() {
        let (store, b) = block(Tensor::full(&[2, 2], 0.5), Tensor::eye(1), Activation::Identity);
        let g = Graph::new();
        let f = Fwd::new(&g, &store);
        let x = g.constant(Tensor::new(&[2, 1], vec![1.0, 3.0]).unwrap());
        assert_eq!(b.forward(&f, x).unwrap().value(), vec![2.0, 2.0]);
    }

    #[test]
    fn matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let adj = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let (store, b) = block(adj.clone(), w.clone(), Activation::Tanh);
        let g = Graph::new();
        let f = Fwd::new(&g, &store);
        let y = b.forward(&f, g.constant(x.clone())).unwrap().value();
        for n in 0..3 {
            for o in 0..2 {
                let mut s = 0.0;
                for m in 0..3 {
                    for i in 0..4 {
                        s += adj.data()[n * 3 + m] * x.data()[m * 4 + i] * w.data()[i * 2 + o];
                    }
                }
                assert!((y[n * 2 + o] - s.tanh()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn node_count_mismatch_rejected() {
        let (store, b) = block(Tensor::eye(3), Tensor::eye(2), Activation::Identity);
        let g = Graph::new();
        let f = Fwd::new(&g, &store);
        let x = g.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(b.forward(&f, x), Err(Error::ShapeMismatch { .. })));
    }
}
