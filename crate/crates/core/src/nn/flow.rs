use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use super::Mlp;
use crate::error::{Error, Result};
use crate::tensor::{Fwd, Graph, ParamStore, Tensor, Var};

/// Affine coupling: coordinates with mask 1 pass through and condition a
/// scale/shift applied to the others.
#[derive(Clone, Debug)]
pub struct CouplingLayer {
    pub mask: Vec<f64>,
    pub net: Mlp,
    pub scale_clamp: f64,
}

impl CouplingLayer {
    fn scale_shift<'a>(&self, f: &Fwd<'a>, x: Var<'a>) -> Result<(Var<'a>, Var<'a>)> {
        let d = self.mask.len();
        let keep = f.constant(Tensor::vector(self.mask.clone()));
        let free = f.constant(Tensor::vector(self.mask.iter().map(|m| 1.0 - m).collect()));
        let out = self.net.forward(f, x.mul(keep)?)?;
        let axis = out.shape().len() - 1;
        let c = self.scale_clamp;
        let s = out.slice(axis, 0, d)?.scale(1.0 / c).tanh().scale(c).mul(free)?;
        let t = out.slice(axis, d, d)?.mul(free)?;
        Ok((s, t))
    }

    /// Returns `(y, log|det J|)` with the determinant reduced over the last axis.
    pub fn forward<'a>(&self, f: &Fwd<'a>, x: Var<'a>) -> Result<(Var<'a>, Var<'a>)> {
        let (s, t) = self.scale_shift(f, x)?;
        let y = x.mul(s.exp())?.add(t)?;
        let axis = s.shape().len() - 1;
        Ok((y, s.sum_axis(axis, false)?))
    }

    pub fn inverse<'a>(&self, f: &Fwd<'a>, y: Var<'a>) -> Result<Var<'a>> {
        let (s, t) = self.scale_shift(f, y)?;
        y.sub(t)?.mul(s.neg().exp())
    }
}

/// RealNVP-style stack of affine couplings with alternating masks, mapping
/// data to a standard normal base.
#[derive(Clone, Debug)]
pub struct CouplingFlow {
    pub dim: usize,
    pub layers: Vec<CouplingLayer>,
}

impl CouplingFlow {
    /// The output layer of every coupling net is zero, so a fresh flow is the
    /// identity map.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        layers: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let layers = (0..layers)
            .map(|l| CouplingLayer {
                mask: (0..dim).map(|i| ((i + l) % 2 == 0) as u8 as f64).collect(),
                net: Mlp::new(
                    store,
                    &format!("{name}.{l}"),
                    &[dim, hidden, hidden, 2 * dim],
                    true,
                    rng,
                ),
                scale_clamp: 3.0,
            })
            .collect();
        Self { dim, layers }
    }

    fn check_dim(&self, x: &Var<'_>) -> Result<()> {
        let shape = x.shape();
        if shape.last() != Some(&self.dim) {
            return Err(Error::ShapeMismatch {
                op: "flow",
                lhs: vec![self.dim],
                rhs: shape,
            });
        }
        Ok(())
    }

    /// Data → base. `x` is `[.., dim]`; log-det has the leading shape.
    pub fn forward<'a>(&self, f: &Fwd<'a>, x: Var<'a>) -> Result<(Var<'a>, Var<'a>)> {
        self.check_dim(&x)?;
        let mut h = x;
        let mut logdet: Option<Var<'a>> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, ld) = layer.forward(f, h)?;
            if !y.with_value(|v| v.iter().all(|a| a.is_finite())) {
                return Err(Error::NonFinite {
                    index: i,
                    context: "coupling layer output".into(),
                });
            }
            logdet = Some(match logdet {
                Some(acc) => acc.add(ld)?,
                None => ld,
            });
            h = y;
        }
        let logdet = match logdet {
            Some(ld) => ld,
            None => {
                let axis = x.shape().len() - 1;
                x.scale(0.0).sum_axis(axis, false)?
            }
        };
        Ok((h, logdet))
    }

    /// Base → data.
    pub fn inverse<'a>(&self, f: &Fwd<'a>, z: Var<'a>) -> Result<Var<'a>> {
        self.check_dim(&z)?;
        let mut h = z;
        for layer in self.layers.iter().rev() {
            h = layer.inverse(f, h)?;
        }
        Ok(h)
    }

    pub fn log_prob<'a>(&self, f: &Fwd<'a>, x: Var<'a>) -> Result<Var<'a>> {
        let (z, logdet) = self.forward(f, x)?;
        let axis = z.shape().len() - 1;
        let base = z
            .square()
            .sum_axis(axis, false)?
            .scale(-0.5)
            .add_scalar(-0.5 * self.dim as f64 * (2.0 * PI).ln());
        base.add(logdet)
    }

    /// Log-density of each row of `x` (`[N, dim]` or `[dim]`) without
    /// recording gradients.
    pub fn log_prob_values(&self, store: &ParamStore, x: &Tensor) -> Result<Vec<f64>> {
        let g = Graph::new();
        let f = Fwd::frozen(&g, store);
        let lp = self.log_prob(&f, g.constant(x.clone()))?.value();
        if let Some(i) = lp.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                index: i,
                context: "flow log-prob".into(),
            });
        }
        Ok(lp)
    }

    pub fn sample<R: Rng + ?Sized>(&self, store: &ParamStore, n: usize, rng: &mut R) -> Result<Tensor> {
        let z: Vec<f64> = (0..n * self.dim).map(|_| rng.sample(StandardNormal)).collect();
        let g = Graph::new();
        let f = Fwd::frozen(&g, store);
        let x = self.inverse(&f, g.constant(Tensor::new(&[n, self.dim], z)?))?;
        Ok(x.tensor())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randomized(dim: usize, seed: u64) -> (ParamStore, CouplingFlow) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let flow = CouplingFlow::new(&mut store, "flow", dim, 4, 8, &mut rng);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::randn(&shape, 0.4, &mut rng);
        }
        (store, flow)
    }

    #[test]
    fn identity_flow_at_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let flow = CouplingFlow::new(&mut store, "flow", 6, 4, 32, &mut rng);
        let lp = flow.log_prob_values(&store, &Tensor::zeros(&[6])).unwrap()[0];
        assert!((lp - (-3.0 * (2.0 * PI).ln())).abs() < 1e-12);
        assert!((lp + 5.5136).abs() < 1e-3);
    }

    #[test]
    fn round_trip_is_exact() {
        let (store, flow) = randomized(6, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[5, 6], 1.0, &mut rng);
        let g = Graph::new();
        let f = Fwd::frozen(&g, &store);
        let (z, _) = flow.forward(&f, g.constant(x.clone())).unwrap();
        let back = flow.inverse(&f, z).unwrap().value();
        for (a, b) in back.iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn logdet_matches_numeric_jacobian() {
        let (store, flow) = randomized(2, 3);
        let map = |p: [f64; 2]| -> [f64; 2] {
            let g = Graph::new();
            let f = Fwd::frozen(&g, &store);
            let z = flow.forward(&f, g.constant(Tensor::vector(p.to_vec()))).unwrap().0.value();
            [z[0], z[1]]
        };
        let p = [0.3, -0.8];
        let g = Graph::new();
        let f = Fwd::frozen(&g, &store);
        let ld = flow.forward(&f, g.constant(Tensor::vector(p.to_vec()))).unwrap().1.item();
        let h = 1e-6;
        let mut jac = [[0.0; 2]; 2];
        for c in 0..2 {
            let (mut a, mut b) = (p, p);
            a[c] += h;
            b[c] -= h;
            let (fa, fb) = (map(a), map(b));
            for r in 0..2 {
                jac[r][c] = (fa[r] - fb[r]) / (2.0 * h);
            }
        }
        let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        assert!((det.abs().ln() - ld).abs() < 1e-4, "{} vs {ld}", det.abs().ln());
    }

    #[test]
    fn density_integrates_to_one() {
        let (store, flow) = randomized(2, 4);
        let (lo, hi, n) = (-9.0, 9.0, 300);
        let step = (hi - lo) / n as f64;
        let mut pts = Vec::with_capacity(2 * n * n);
        for i in 0..n {
            for j in 0..n {
                pts.push(lo + (i as f64 + 0.5) * step);
                pts.push(lo + (j as f64 + 0.5) * step);
            }
        }
        let lp = flow
            .log_prob_values(&store, &Tensor::new(&[n * n, 2], pts).unwrap())
            .unwrap();
        let mass: f64 = lp.iter().map(|v| v.exp() * step * step).sum();
        assert!((mass - 1.0).abs() < 1e-2, "mass {mass}");
    }

    #[test]
    fn wrong_width_rejected() {
        let (store, flow) = randomized(3, 5);
        assert!(flow.log_prob_values(&store, &Tensor::zeros(&[4])).is_err());
    }
}
