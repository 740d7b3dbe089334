use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::step::{sequence_loss, LossContext, StepInput};
use crate::data::Skeleton;
use crate::error::Result;
use crate::losses::{LossWeights, PosePrior};
use crate::model::{HitDvae, ModelConfig, PoseSequence};
use crate::nn::CouplingFlow;
use crate::tensor::{grad_check_params_with, GradCheckReport, ParamStore, Tensor};

/// Finite-difference step used by [`total_loss_gradcheck`].
pub const GRADCHECK_STEP: f64 = 1e-5;

/// Central-difference check of the full training loss over every model
/// parameter, on a micro configuration: T = 4, J = 3, d_z = d_w = 2, K = 2,
/// with one generated pose fed back to the decoder.
pub fn total_loss_gradcheck(seed: u64) -> Result<GradCheckReport> {
    let (j, t, k) = (3, 4, 2);
    let config = ModelConfig {
        w_window: 2,
        ..ModelConfig::micro(j, 2)
    };
    let model = HitDvae::new(config, seed)?;
    let skeleton = Skeleton::chain3();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9c);

    let mut coords = Tensor::randn(&[t, j, 3], 0.3, &mut rng).into_data();
    for f in 0..t {
        coords[f * j * 3..f * j * 3 + 3].fill(0.0);
    }
    let x = PoseSequence::new(t, j, 1, coords)?;
    let mut pseudo = Tensor::randn(&[2, t - 1, j, 3], 0.3, &mut rng);
    for row in pseudo.data_mut().chunks_mut(j * 3) {
        row[..3].fill(0.0);
    }
    let mut input = StepInput::draw(&model, x, pseudo, k, 0.0, &mut rng)?;
    input.generated = vec![false, false, true, false];

    let mut prior_params = ParamStore::new();
    let flow = CouplingFlow::new(&mut prior_params, "nf", 3 * (j - 1), 2, 4, &mut rng);
    // Move the flow away from the identity so its Jacobian is exercised.
    for id in prior_params.ids().collect::<Vec<_>>() {
        let shape = prior_params.get(id).shape().to_vec();
        *prior_params.get_mut(id) = Tensor::randn(&shape, 0.2, &mut rng);
    }
    let prior = PosePrior {
        flow,
        params: prior_params,
        calibration: 0.0,
    };
    let weights = LossWeights::humaneva();
    let parts = (skeleton, weights, prior);
    grad_check_params_with(
        &model.params,
        &parts,
        |(skeleton, weights, prior), f| {
            let ctx = LossContext {
                skeleton,
                weights,
                prior,
                anneal: 0.7,
            };
            Ok(sequence_loss(&f, &model, &ctx, &input)?.total)
        },
        GRADCHECK_STEP,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_loss_matches_central_differences() {
        let r = total_loss_gradcheck(1).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        assert!(r.coordinates > 100);
    }
}
