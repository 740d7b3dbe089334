use rand::Rng;

use super::Linear;
use crate::error::{Error, Result};
use crate::tensor::{Fwd, ParamStore, Var};

/// GRU cell with gate order (reset, update, candidate):
///
/// ```text
/// r  = σ(x·W_ir + b_ir + h·W_hr + b_hr)
/// z  = σ(x·W_iz + b_iz + h·W_hz + b_hz)
/// n  = tanh(x·W_in + b_in + r ⊙ (h·W_hn + b_hn))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub input_dim: usize,
    pub hidden: usize,
    pub wx: Linear,
    pub wh: Linear,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            input_dim,
            hidden,
            wx: Linear::new(store, &format!("{name}.wx"), input_dim, 3 * hidden, rng),
            wh: Linear::new(store, &format!("{name}.wh"), hidden, 3 * hidden, rng),
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, input_dim: usize, hidden: usize) -> Self {
        Self {
            input_dim,
            hidden,
            wx: Linear::zeros(store, &format!("{name}.wx"), input_dim, 3 * hidden),
            wh: Linear::zeros(store, &format!("{name}.wh"), hidden, 3 * hidden),
        }
    }

    /// `x` is `[.., input_dim]`, `h` is `[.., hidden]`.
    pub fn step<'a>(&self, f: &Fwd<'a>, x: Var<'a>, h: Var<'a>) -> Result<Var<'a>> {
        let (xs, hs) = (x.shape(), h.shape());
        if xs.last() != Some(&self.input_dim) || hs.last() != Some(&self.hidden) {
            return Err(Error::ShapeMismatch {
                op: "gru_step",
                lhs: vec![self.input_dim, self.hidden],
                rhs: vec![xs.last().copied().unwrap_or(0), hs.last().copied().unwrap_or(0)],
            });
        }
        let axis = xs.len() - 1;
        let gx = self.wx.forward(f, x)?;
        let gh = self.wh.forward(f, h)?;
        let hd = self.hidden;
        let r = gx.slice(axis, 0, hd)?.add(gh.slice(axis, 0, hd)?)?.sigmoid();
        let z = gx.slice(axis, hd, hd)?.add(gh.slice(axis, hd, hd)?)?.sigmoid();
        let n = gx
            .slice(axis, 2 * hd, hd)?
            .add(r.mul(gh.slice(axis, 2 * hd, hd)?)?)?
            .tanh();
        let keep = z.neg().add_scalar(1.0);
        keep.mul(n)?.add(z.mul(h)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sigmoid(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    #[test]
    fn zero_weights_halve_state() {
        let mut store = ParamStore::new();
        let cell = GruCell::zeros(&mut store, "g", 2, 3);
        let g = Graph::new();
        let f = Fwd::new(&g, &store);
        let x = g.constant(Tensor::vector(vec![0.7, -1.2]));
        let h = g.constant(Tensor::vector(vec![1.0, -2.0, 0.5]));
        assert_eq!(cell.step(&f, x, h).unwrap().value(), vec![0.5, -1.0, 0.25]);
    }

    #[test]
    fn matches_gate_equation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "g", 3, 2, &mut rng);
        for id in [cell.wx.bias, cell.wh.bias] {
            let n = store.get(id).numel();
            *store.get_mut(id) = Tensor::randn(&[n], 0.5, &mut rng);
        }
        let x = Tensor::randn(&[3], 1.0, &mut rng);
        let h = Tensor::randn(&[2], 1.0, &mut rng);
        let g = Graph::new();
        let f = Fwd::new(&g, &store);
        let out = cell.step(&f, g.constant(x.clone()), g.constant(h.clone())).unwrap().value();

        let affine = |l: &Linear, v: &[f64], o: usize| -> f64 {
            let w = store.get(l.weight).data();
            let b = store.get(l.bias).data();
            b[o] + v.iter().enumerate().map(|(i, vi)| vi * w[i * 6 + o]).sum::<f64>()
        };
        for j in 0..2 {
            let r = sigmoid(affine(&cell.wx, x.data(), j) + affine(&cell.wh, h.data(), j));
            let z = sigmoid(affine(&cell.wx, x.data(), 2 + j) + affine(&cell.wh, h.data(), 2 + j));
            let n = (affine(&cell.wx, x.data(), 4 + j) + r * affine(&cell.wh, h.data(), 4 + j)).tanh();
            let expected = (1.0 - z) * n + z * h.data()[j];
            assert!((out[j] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn small_weights_contract_to_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "g", 2, 4, &mut rng);
        for id in [cell.wx.weight, cell.wh.weight] {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::randn(&shape, 0.1, &mut rng);
        }
        let mut h = Tensor::randn(&[4], 1.0, &mut rng).into_data();
        let mut last_delta = f64::INFINITY;
        for _ in 0..100 {
            let g = Graph::new();
            let f = Fwd::frozen(&g, &store);
            let next = cell
                .step(&f, g.constant(Tensor::zeros(&[2])), g.constant(Tensor::vector(h.clone())))
                .unwrap()
                .value();
            last_delta = next.iter().zip(&h).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            h = next;
        }
        assert!(last_delta < 1e-10, "delta {last_delta}");
    }

    #[test]
    fn width_mismatch_rejected() {
        let mut store = ParamStore::new();
        let cell = GruCell::zeros(&mut store, "g", 2, 3);
        let g = Graph::new();
        let f = Fwd::new(&g, &store);
        let x = g.constant(Tensor::zeros(&[3]));
        let h = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(cell.step(&f, x, h), Err(Error::ShapeMismatch { .. })));
    }
}
