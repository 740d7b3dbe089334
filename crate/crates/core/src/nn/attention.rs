use rand::Rng;

use super::{LayerNorm, Linear};
use crate::error::{Error, Result};
use crate::tensor::{Fwd, ParamStore, Tensor, Var};

/// Logit assigned to hidden keys; `exp` of it underflows to exactly zero.
const HIDDEN_LOGIT: f64 = -1e30;

/// Visibility of keys (columns) from queries (rows); `true` = visible.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    visible: Vec<bool>,
}

impl AttentionMask {
    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            visible: vec![true; rows * cols],
        }
    }

    /// Query at time `query_times[r]` sees key at time `key_times[c]` iff
    /// the key is strictly earlier.
    pub fn causal(query_times: &[usize], key_times: &[usize]) -> Self {
        let visible = query_times
            .iter()
            .flat_map(|&t| key_times.iter().map(move |&j| j < t))
            .collect();
        Self {
            rows: query_times.len(),
            cols: key_times.len(),
            visible,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let visible = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| (r, c)))
            .map(|(r, c)| f(r, c))
            .collect();
        Self { rows, cols, visible }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_visible(&self, row: usize, col: usize) -> bool {
        self.visible[row * self.cols + col]
    }

    /// Every row must see at least one key.
    pub fn validate(&self) -> Result<()> {
        for r in 0..self.rows {
            if !(0..self.cols).any(|c| self.is_visible(r, c)) {
                return Err(Error::FullyMaskedRow { row: r });
            }
        }
        Ok(())
    }

    /// Additive logit bias: 0 where visible, a huge negative value where
    /// hidden.
    pub fn bias(&self) -> Tensor {
        let data = self
            .visible
            .iter()
            .map(|&v| if v { 0.0 } else { HIDDEN_LOGIT })
            .collect();
        Tensor::new(&[self.rows, self.cols], data).expect("mask dims are positive")
    }
}

/// Sinusoidal position codes, one row per position.
pub fn sinusoidal_encoding(positions: &[usize], dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &pos in positions {
        for i in 0..dim {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 / rate;
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(&[positions.len(), dim], data).expect("positions and dim are positive")
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub d_model: usize,
    pub heads: usize,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "model width {d_model} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            d_model,
            heads,
            wq: Linear::new(store, &format!("{name}.q"), d_model, d_model, rng),
            wk: Linear::new(store, &format!("{name}.k"), d_model, d_model, rng),
            wv: Linear::new(store, &format!("{name}.v"), d_model, d_model, rng),
            wo: Linear::new(store, &format!("{name}.o"), d_model, d_model, rng),
        })
    }

    /// All four projections set to the identity with zero bias.
    pub fn identity(store: &mut ParamStore, name: &str, d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "model width {d_model} is not divisible by {heads} heads"
            )));
        }
        let lin = |store: &mut ParamStore, suffix: &str| {
            Linear::from_tensors(
                store,
                &format!("{name}.{suffix}"),
                Tensor::eye(d_model),
                Tensor::zeros(&[d_model]),
            )
        };
        Ok(Self {
            d_model,
            heads,
            wq: lin(store, "q"),
            wk: lin(store, "k"),
            wv: lin(store, "v"),
            wo: lin(store, "o"),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// `q` is `[.., Tq, d]`, `k`/`v` are `[.., Tk, d]`; returns `[.., Tq, d]`.
    pub fn forward<'a>(
        &self,
        f: &Fwd<'a>,
        q: Var<'a>,
        k: Var<'a>,
        v: Var<'a>,
        mask: &AttentionMask,
    ) -> Result<Var<'a>> {
        Ok(self.forward_with_weights(f, q, k, v, mask)?.0)
    }

    /// Also returns the per-head attention weights `[.., Tq, Tk]`.
    pub fn forward_with_weights<'a>(
        &self,
        f: &Fwd<'a>,
        q: Var<'a>,
        k: Var<'a>,
        v: Var<'a>,
        mask: &AttentionMask,
    ) -> Result<(Var<'a>, Vec<Var<'a>>)> {
        let (qs, ks) = (q.shape(), k.shape());
        let tq = qs[qs.len() - 2];
        let tk = ks[ks.len() - 2];
        if mask.rows() != tq || mask.cols() != tk {
            return Err(Error::ShapeMismatch {
                op: "attention mask",
                lhs: vec![tq, tk],
                rhs: vec![mask.rows(), mask.cols()],
            });
        }
        mask.validate()?;
        let axis = qs.len() - 1;
        let qp = self.wq.forward(f, q)?;
        let kp = self.wk.forward(f, k)?;
        let vp = self.wv.forward(f, v)?;
        let bias = f.constant(mask.bias());
        let dk = self.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = qp.slice(axis, h * dk, dk)?;
            let kh = kp.slice(axis, h * dk, dk)?;
            let vh = vp.slice(axis, h * dk, dk)?;
            let logits = qh.matmul(kh.transpose()?)?.scale(scale).add(bias)?;
            let w = logits.softmax();
            outs.push(w.matmul(vh)?);
            weights.push(w);
        }
        let joined = if outs.len() == 1 {
            outs[0]
        } else {
            Var::concat(&outs, axis)?
        };
        Ok((self.wo.forward(f, joined)?, weights))
    }
}

/// Post-norm transformer block: `h = LN(q + MHA(q, kv, kv))`,
/// `out = LN(h + FF(h))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub norm2: LayerNorm,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        ff: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            attention: MultiHeadAttention::new(store, &format!("{name}.attn"), d_model, heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d_model),
            ff_in: Linear::new(store, &format!("{name}.ff_in"), d_model, ff, rng),
            ff_out: Linear::new(store, &format!("{name}.ff_out"), ff, d_model, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d_model),
        })
    }

    pub fn forward<'a>(
        &self,
        f: &Fwd<'a>,
        query: Var<'a>,
        memory: Var<'a>,
        mask: &AttentionMask,
    ) -> Result<Var<'a>> {
        let att = self.attention.forward(f, query, memory, memory, mask)?;
        let h = self.norm1.forward(f, query.add(att)?)?;
        let ff = self.ff_out.forward(f, self.ff_in.forward(f, h)?.relu())?;
        self.norm2.forward(f, h.add(ff)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn causal_mask_is_strictly_lower() {
        let m = AttentionMask::causal(&[1, 2, 3], &[1, 2, 3]);
        assert!(!m.is_visible(0, 0));
        assert!(m.is_visible(1, 0) && !m.is_visible(1, 1));
        assert!(m.is_visible(2, 1) && !m.is_visible(2, 2));
        assert!(matches!(m.validate(), Err(Error::FullyMaskedRow { row: 0 })));
        assert!(AttentionMask::causal(&[2, 3], &[1, 2, 3]).validate().is_ok());
    }

    #[test]
    fn single_visible_key_selects_its_value() {
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::identity(&mut store, "a", 2, 1).unwrap();
        let g = Graph::new();
        let f = Fwd::new(&g, &store);
        let q = g.constant(Tensor::new(&[1, 2], vec![0.3, -0.7]).unwrap());
        let kv = g.constant(Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let mask = AttentionMask::from_fn(1, 3, |_, c| c == 1);
        let y = mha.forward(&f, q, kv, kv, &mask).unwrap();
        assert_eq!(y.value(), vec![3.0, 4.0]);
    }

    #[test]
    fn equal_logits_average_values() {
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::identity(&mut store, "a", 2, 2).unwrap();
        let g = Graph::new();
        let f = Fwd::new(&g, &store);
        let q = g.constant(Tensor::zeros(&[1, 2]));
        let kv = g.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap());
        let y = mha.forward(&f, q, kv, kv, &AttentionMask::full(1, 2)).unwrap().value();
        assert!((y[0] - 2.0).abs() < 1e-15 && (y[1] - 4.0).abs() < 1e-15);
    }

    #[test]
    fn matches_explicit_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 4, 1, &mut rng).unwrap();
        let q = Tensor::randn(&[4, 4], 1.0, &mut rng);
        let kv = Tensor::randn(&[4, 4], 1.0, &mut rng);
        let mask = AttentionMask::causal(&[1, 2, 3, 4], &[0, 1, 2, 3]);
        let g = Graph::new();
        let f = Fwd::new(&g, &store);
        let kvv = g.constant(kv.clone());
        let y = mha.forward(&f, g.constant(q.clone()), kvv, kvv, &mask).unwrap().value();

        let proj = |x: &Tensor, l: &Linear| -> Vec<f64> {
            let (w, b) = (store.get(l.weight).data(), store.get(l.bias).data());
            let n = x.shape()[0];
            let mut out = vec![0.0; n * 4];
            for r in 0..n {
                for o in 0..4 {
                    let mut s = b[o];
                    for i in 0..4 {
                        s += x.data()[r * 4 + i] * w[i * 4 + o];
                    }
                    out[r * 4 + o] = s;
                }
            }
            out
        };
        let (qp, kp, vp) = (proj(&q, &mha.wq), proj(&kv, &mha.wk), proj(&kv, &mha.wv));
        let mut ctx = vec![0.0; 16];
        for r in 0..4 {
            let mut logits = Vec::new();
            for c in 0..4 {
                if mask.is_visible(r, c) {
                    let dot: f64 = (0..4).map(|i| qp[r * 4 + i] * kp[c * 4 + i]).sum();
                    logits.push((c, dot / 2.0));
                }
            }
            let max = logits.iter().map(|l| l.1).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l.1 - max).exp()).sum();
            for (c, l) in logits {
                let w = (l - max).exp() / z;
                for i in 0..4 {
                    ctx[r * 4 + i] += w * vp[c * 4 + i];
                }
            }
        }
        let ctx_t = Tensor::new(&[4, 4], ctx).unwrap();
        let expected = proj(&ctx_t, &mha.wo);
        for (a, b) in y.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn fully_masked_row_rejected() {
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::identity(&mut store, "a", 2, 1).unwrap();
        let g = Graph::new();
        let f = Fwd::new(&g, &store);
        let x = g.constant(Tensor::zeros(&[2, 2]));
        let mask = AttentionMask::causal(&[0, 1], &[0, 1]);
        assert!(matches!(
            mha.forward(&f, x, x, x, &mask),
            Err(Error::FullyMaskedRow { row: 0 })
        ));
    }

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(MultiHeadAttention::new(&mut store, "a", 6, 4, &mut rng).is_err());
    }
}
