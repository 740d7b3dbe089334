use serde::Serialize;

use super::{Fwd, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic − numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    /// Flat coordinate index where the maximum occurred.
    pub worst_index: usize,
    pub coordinates: usize,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn finite(v: f64, index: usize, context: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            index,
            context: context.to_string(),
        })
    }
}

/// Compares the reverse-mode gradient of scalar `f` at `point` with central
/// differences of width `step`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<GradCheckReport>
where
    F: for<'g> Fn(Var<'g>) -> Result<Var<'g>>,
{
    if step <= 0.0 {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let g = Graph::new();
    let x = g.leaf(point.clone(), true);
    let y = f(x)?;
    g.backward(y)?;
    let analytic = g.grad(x).unwrap_or_else(|| vec![0.0; point.numel()]);

    let eval = |p: Tensor| -> Result<f64> {
        let g = Graph::new();
        let x = g.constant(p);
        Ok(f(x)?.item())
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        coordinates: point.numel(),
    };
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let fp = finite(eval(plus)?, i, "f(x + h)")?;
        let fm = finite(eval(minus)?, i, "f(x - h)")?;
        let numeric = (fp - fm) / (2.0 * step);
        let a = finite(analytic[i], i, "analytic gradient")?;
        let err = rel_error(a, numeric);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
        }
    }
    Ok(report)
}

/// Same check over every scalar of every parameter in `store`; `f` builds
/// the scalar objective from a forward context.
pub fn grad_check_params<F>(store: &ParamStore, f: F, step: f64) -> Result<GradCheckReport>
where
    F: for<'a> Fn(Fwd<'a>) -> Result<Var<'a>>,
{
    grad_check_params_with(store, &(), |_, fwd| f(fwd), step)
}

/// [`grad_check_params`] for objectives that borrow from `ctx` for as long
/// as the graph lives (frozen auxiliary networks, for instance).
pub fn grad_check_params_with<C, F>(store: &ParamStore, ctx: &C, f: F, step: f64) -> Result<GradCheckReport>
where
    C: ?Sized,
    F: for<'a> Fn(&'a C, Fwd<'a>) -> Result<Var<'a>>,
{
    if step <= 0.0 {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let mut work = store.clone();
    work.clear_grads();
    {
        let g = Graph::new();
        let y = f(ctx, Fwd::new(&g, &work))?;
        g.backward(y)?;
        work.accumulate_from(&g)?;
    }
    let analytic: Vec<Vec<f64>> = work
        .iter()
        .map(|(_, t)| t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |s: &ParamStore| -> Result<f64> {
        let g = Graph::new();
        Ok(f(ctx, Fwd::frozen(&g, s))?.item())
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        coordinates: store.num_scalars(),
    };
    let mut flat = 0;
    let ids: Vec<_> = work.ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        for j in 0..work.get(id).numel() {
            let orig = work.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + step;
            let fp = finite(eval(&work)?, flat, "f(θ + h)")?;
            work.get_mut(id).data_mut()[j] = orig - step;
            let fm = finite(eval(&work)?, flat, "f(θ - h)")?;
            work.get_mut(id).data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let a = finite(analytic[pi][j], flat, "analytic gradient")?;
            let err = rel_error(a, numeric);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_index = flat;
            }
            flat += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_at_three() {
        let r = grad_check(|x| Ok(x.square().sum()), &Tensor::scalar(3.0), 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
    }

    #[test]
    fn sigmoid_sum_random_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = Tensor::randn(&[8], 1.0, &mut rng);
        let r = grad_check(|x| Ok(x.sigmoid().sum()), &p, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn non_finite_reports_coordinate() {
        let p = Tensor::vector(vec![1.0, 1e-6]);
        let err = grad_check(|x| Ok(x.log().sum()), &p, 1e-5).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1, .. }), "{err}");
    }

    #[test]
    fn rejects_bad_step() {
        assert!(grad_check(|x| Ok(x.sum()), &Tensor::scalar(1.0), 0.0).is_err());
    }
}
