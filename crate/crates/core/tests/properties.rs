//! Randomised invariants across the tensor core, network blocks, model,
//! losses, generator and metrics.

use hitdvae::data::{preprocess, synth_corpus, Skeleton, SynthSpec};
use hitdvae::eval::{ade_fde, evaluate, fid, DistanceMode, EvalCase, FeatureStats, Selection};
use hitdvae::generator::{generate, GenerateOptions};
use hitdvae::losses::{angle_loss, diversity_term, limb_loss, multimodal_loss, recon_loss};
use hitdvae::model::Side;
use hitdvae::nn::{AttentionMask, MultiHeadAttention};
use hitdvae::tensor::{grad_check, AdamConfig, AdamState};
use hitdvae::{DiagGaussian, Fwd, Graph, HitDvae, ModelConfig, ParamStore, PoseSequence, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Values kept clear of the kinks and domain edges of the primitives.
fn smooth_point() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0.1f64..0.9, any::<bool>()), 1..6)
        .prop_map(|v| v.into_iter().map(|(x, s)| if s { x } else { -x }).collect())
}

fn weights_for(n: usize) -> Tensor {
    Tensor::vector((0..n).map(|i| 0.3 + 0.17 * i as f64).collect())
}

type Unary = for<'g> fn(Var<'g>) -> Var<'g>;

const UNARY: [(&str, Unary); 10] = [
    ("exp", |x| x.exp()),
    ("log", |x| x.abs().add_scalar(0.5).log()),
    ("tanh", |x| x.tanh()),
    ("sigmoid", |x| x.sigmoid()),
    ("relu", |x| x.relu()),
    ("sqrt", |x| x.abs().sqrt()),
    ("abs", |x| x.abs()),
    ("acos", |x| x.acos()),
    ("square", |x| x.square()),
    ("powf", |x| x.abs().powf(1.7)),
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn primitives_match_central_differences(x in smooth_point()) {
        let n = x.len();
        let point = Tensor::vector(x);
        for (name, op) in UNARY {
            let w = weights_for(n);
            let r = grad_check(|v| Ok(op(v).mul(v.graph().constant(w.clone()))?.sum()), &point, 1e-5).unwrap();
            prop_assert!(r.max_rel_error < 1e-6, "{name}: {r:?}");
        }
        let w = weights_for(n);
        let r = grad_check(|v| Ok(v.softmax().mul(v.graph().constant(w.clone()))?.sum()), &point, 1e-5).unwrap();
        prop_assert!(r.max_rel_error < 1e-6, "softmax: {r:?}");
        let r = grad_check(|v| Ok(v.log_softmax()?.mul(v.graph().constant(w.clone()))?.sum()), &point, 1e-5).unwrap();
        prop_assert!(r.max_rel_error < 1e-6, "log_softmax: {r:?}");
        let r = grad_check(|v| Ok(v.div(v.square().add_scalar(1.0))?.sum()), &point, 1e-5).unwrap();
        prop_assert!(r.max_rel_error < 1e-6, "div: {r:?}");
    }

    #[test]
    fn matmul_gradient_matches_central_differences(seed in any::<u64>(), m in 1usize..4, k in 1usize..4, n in 1usize..4) {
        let mut r = rng(seed);
        let b = Tensor::randn(&[k, n], 1.0, &mut r);
        let a = Tensor::randn(&[m, k], 1.0, &mut r);
        let rep = grad_check(|v| Ok(v.matmul(v.graph().constant(b.clone()))?.tanh().sum()), &a, 1e-5).unwrap();
        prop_assert!(rep.max_rel_error < 1e-6, "{rep:?}");
    }

    #[test]
    fn backward_is_linear(x in smooth_point()) {
        let t = Tensor::vector(x);
        let grad_of = |which: u8| {
            let g = Graph::new();
            let v = g.leaf(t.clone(), true);
            let a = v.tanh().sum();
            let b = v.square().scale(0.7).sum();
            let loss = match which {
                0 => a,
                1 => b,
                _ => a.add(b).unwrap(),
            };
            g.backward(loss).unwrap();
            g.grad(v).unwrap()
        };
        let (ga, gb, gs) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..gs.len() {
            prop_assert!((gs[i] - (ga[i] + gb[i])).abs() <= 1e-14 * (1.0 + gs[i].abs()));
        }
    }

    #[test]
    fn adam_is_deterministic(seed in any::<u64>(), steps in 1usize..5) {
        let run = || {
            let mut r = rng(seed);
            let mut store = ParamStore::new();
            let id = store.insert("p", Tensor::randn(&[3, 2], 1.0, &mut r));
            let mut adam = AdamState::new(AdamConfig::with_lr(0.01), &store);
            for s in 0..steps {
                let g = Tensor::randn(&[3, 2], 1.0, &mut rng(seed ^ s as u64));
                store.accumulate_grads(&[(id, g.into_data())]).unwrap();
                adam.step(&mut store).unwrap();
            }
            store.get(id).data().to_vec()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn causal_attention_ignores_future_keys(seed in any::<u64>(), t in 2usize..7, cut in 0usize..6) {
        let cut = cut % t;
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 4, 2, &mut r).unwrap();
        let q = Tensor::randn(&[t, 4], 1.0, &mut r);
        let kv = Tensor::randn(&[t, 4], 1.0, &mut r);
        let mut moved = kv.clone();
        for v in &mut moved.data_mut()[cut * 4..] {
            *v += 3.0;
        }
        // Query i sits at time i + 2 and sees key times 1..=i + 1.
        let qt: Vec<usize> = (2..t + 2).collect();
        let kt: Vec<usize> = (1..t + 1).collect();
        let mask = AttentionMask::causal(&qt, &kt);
        let out = |kv: &Tensor| {
            let g = Graph::new();
            let f = Fwd::new(&g, &store);
            let k = g.constant(kv.clone());
            mha.forward(&f, g.constant(q.clone()), k, k, &mask).unwrap().value()
        };
        let (a, b) = (out(&kv), out(&moved));
        prop_assert_eq!(&a[..cut * 4], &b[..cut * 4]);
    }

    #[test]
    fn attention_rows_are_convex(seed in any::<u64>(), t in 1usize..7) {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 6, 3, &mut r).unwrap();
        let x = Tensor::randn(&[t, 6], 2.0, &mut r);
        let times: Vec<usize> = (1..=t).collect();
        let keys: Vec<usize> = (0..t).collect();
        let mask = AttentionMask::causal(&times, &keys);
        let g = Graph::new();
        let f = Fwd::new(&g, &store);
        let v = g.constant(x);
        let (_, weights) = mha.forward_with_weights(&f, v, v, v, &mask).unwrap();
        for w in weights {
            let w = w.value();
            for row in 0..t {
                let mut sum = 0.0;
                for col in 0..t {
                    let p = w[row * t + col];
                    prop_assert!(p >= 0.0);
                    if mask.is_visible(row, col) { sum += p } else { prop_assert_eq!(p, 0.0) }
                }
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn losses_are_non_negative(seed in any::<u64>(), k in 2usize..5, m in 1usize..4) {
        let mut r = rng(seed);
        let skel = Skeleton::synthetic();
        let g = Graph::new();
        let samples = g.constant(Tensor::randn(&[k, 3, 9, 3], 0.5, &mut r));
        let target = g.constant(Tensor::randn(&[3, 9, 3], 0.5, &mut r));
        let pseudo = g.constant(Tensor::randn(&[m, 3, 9, 3], 0.5, &mut r));
        prop_assert!(recon_loss(samples, target).unwrap().item() >= 0.0);
        prop_assert!(multimodal_loss(samples, pseudo).unwrap().item() >= 0.0);
        prop_assert!(diversity_term(samples, &skel.lower, 15.0).unwrap().item() > 0.0);
        prop_assert!(limb_loss(samples, &skel).unwrap().item() >= 0.0);
        prop_assert!(angle_loss(samples, &skel).unwrap().value.item() >= 0.0);
        let q = DiagGaussian::new(
            g.constant(Tensor::randn(&[4, 2], 1.0, &mut r)),
            g.constant(Tensor::randn(&[4, 2], 1.0, &mut r)),
        ).unwrap();
        let p = DiagGaussian::new(
            g.constant(Tensor::randn(&[4, 2], 1.0, &mut r)),
            g.constant(Tensor::randn(&[4, 2], 1.0, &mut r)),
        ).unwrap();
        prop_assert!(q.kl(&p).unwrap().value().iter().all(|v| *v >= 0.0));
        prop_assert!(q.kl_standard().unwrap().value().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn reconstruction_losses_ignore_ordering(seed in any::<u64>(), k in 2usize..5, m in 1usize..4) {
        let mut r = rng(seed);
        let s = Tensor::randn(&[k, 2, 3, 3], 1.0, &mut r);
        let p = Tensor::randn(&[m, 2, 3, 3], 1.0, &mut r);
        let target = Tensor::randn(&[2, 3, 3], 1.0, &mut r);
        let g = Graph::new();
        let (sv, pv) = (g.constant(s), g.constant(p));
        let ks: Vec<usize> = (0..k).rev().collect();
        let ms: Vec<usize> = (0..m).rev().collect();
        let (sr, pr) = (sv.select(0, &ks).unwrap(), pv.select(0, &ms).unwrap());
        let t = g.constant(target);
        prop_assert_eq!(recon_loss(sv, t).unwrap().item(), recon_loss(sr, t).unwrap().item());
        let a = multimodal_loss(sv, pv).unwrap().item();
        let b = multimodal_loss(sr, pr).unwrap().item();
        prop_assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
    }

    #[test]
    fn diversity_falls_as_a_pair_separates(seed in any::<u64>(), grow in 0.01f64..2.0) {
        let mut r = rng(seed);
        let a = Tensor::randn(&[1, 2, 9, 3], 0.3, &mut r);
        let b = Tensor::randn(&[1, 2, 9, 3], 0.3, &mut r);
        let joints = [1, 2, 3];
        let term = |b: &Tensor| {
            let g = Graph::new();
            let s = Var::concat(&[g.constant(a.clone()), g.constant(b.clone())], 0).unwrap();
            diversity_term(s, &joints, 5.0).unwrap().item()
        };
        // Push b away from a along their difference: the L1 distance grows.
        let far = Tensor::new(
            b.shape(),
            b.data().iter().zip(a.data()).map(|(y, x)| y + grow * (y - x)).collect(),
        ).unwrap();
        prop_assert!(term(&far) < term(&b));
    }

    #[test]
    fn fid_is_symmetric_and_zero_on_itself(seed in any::<u64>(), d in 1usize..5) {
        let mut r = rng(seed);
        let rows = |r: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..d + 6).map(|_| Tensor::randn(&[d], 1.0, r).into_data()).collect()
        };
        let a = FeatureStats::from_features(&rows(&mut r)).unwrap();
        let b = FeatureStats::from_features(&rows(&mut r)).unwrap();
        let (ab, ba) = (fid(&a, &b).unwrap(), fid(&b, &a).unwrap());
        prop_assert!((ab - ba).abs() < 1e-8, "{} vs {}", ab, ba);
        prop_assert!(fid(&a, &a).unwrap().abs() < 1e-8);
    }

    #[test]
    fn diagonal_fid_has_closed_form(
        m1 in prop::collection::vec(-2.0f64..2.0, 1..5),
        seed in any::<u64>(),
    ) {
        let d = m1.len();
        let mut r = rng(seed);
        let m2 = Tensor::randn(&[d], 1.0, &mut r).into_data();
        let v1: Vec<f64> = Tensor::randn(&[d], 1.0, &mut r).data().iter().map(|x| x * x + 0.01).collect();
        let v2: Vec<f64> = Tensor::randn(&[d], 1.0, &mut r).data().iter().map(|x| x * x + 0.01).collect();
        let diag = |v: &[f64]| {
            let mut c = vec![0.0; d * d];
            for i in 0..d { c[i * d + i] = v[i]; }
            c
        };
        let a = FeatureStats::new(m1.clone(), diag(&v1)).unwrap();
        let b = FeatureStats::new(m2.clone(), diag(&v2)).unwrap();
        let oracle: f64 = (0..d)
            .map(|i| (m1[i] - m2[i]).powi(2) + (v1[i].sqrt() - v2[i].sqrt()).powi(2))
            .sum();
        prop_assert!((fid(&a, &b).unwrap() - oracle).abs() < 1e-8 * oracle.max(1.0));
    }

    #[test]
    fn a_closer_sample_never_raises_best_error(seed in any::<u64>(), k in 1usize..6, shrink in 0.0f64..0.99) {
        let mut r = rng(seed);
        let (g, fl) = (4, 6);
        let gt = Tensor::randn(&[g * fl], 1.0, &mut r).into_data();
        let mut samples: Vec<Vec<f64>> = (0..k).map(|_| Tensor::randn(&[g * fl], 1.0, &mut r).into_data()).collect();
        let views: Vec<&[f64]> = samples.iter().map(|s| s.as_slice()).collect();
        let (ade, fde) = ade_fde(&views, &gt, fl, Selection::Best, DistanceMode::PerFrame).unwrap();
        // Shrink the best sample's offset towards the ground truth.
        let errs: Vec<f64> = views.iter().map(|s| ade_fde(&[s], &gt, fl, Selection::Best, DistanceMode::PerFrame).unwrap().0).collect();
        let best = (0..k).min_by(|&a, &b| errs[a].total_cmp(&errs[b])).unwrap();
        let closer: Vec<f64> = samples[best].iter().zip(&gt).map(|(s, t)| t + shrink * (s - t)).collect();
        samples.push(closer);
        let views: Vec<&[f64]> = samples.iter().map(|s| s.as_slice()).collect();
        let (ade2, fde2) = ade_fde(&views, &gt, fl, Selection::Best, DistanceMode::PerFrame).unwrap();
        prop_assert!(ade2 <= ade);
        prop_assert!(fde2 <= fde);
    }

    #[test]
    fn reports_order_best_before_medium(seed in any::<u64>(), n in 1usize..4, k in 1usize..7, m in 1usize..4) {
        let mut r = rng(seed);
        let (g, fl) = (3, 6);
        let mut draw = || Tensor::randn(&[g * fl], 1.0, &mut r).into_data();
        let cases: Vec<EvalCase> = (0..n)
            .map(|_| EvalCase {
                samples: (0..k).map(|_| draw()).collect(),
                gt: draw(),
                pseudo: (0..m).map(|_| draw()).collect(),
            })
            .collect();
        for mode in [DistanceMode::PerFrame, DistanceMode::Flattened] {
            let rep = evaluate(&cases, fl, mode).unwrap();
            prop_assert!(rep.invariants_hold(), "{:?}", rep);
        }
    }
}

fn random_sequence(seed: u64, t: usize, j: usize) -> Tensor {
    let mut x = Tensor::randn(&[t, j, 3], 0.4, &mut rng(seed));
    for row in x.data_mut().chunks_mut(j * 3) {
        row[..3].fill(0.0);
    }
    x
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn prior_and_emission_ignore_the_future(seed in any::<u64>(), t in 3usize..7, s in 2usize..7) {
        let s = 2 + (s - 2) % (t - 1);
        let model = HitDvae::new(ModelConfig::micro(3, 2), seed).unwrap();
        let mut r = rng(seed ^ 1);
        let x = random_sequence(seed, t, 3);
        let z = Tensor::randn(&[t, 2], 1.0, &mut r);
        let w = Tensor::randn(&[2], 1.0, &mut r);
        // Changes at frames ≥ s (1-based) may only reach outputs of frames > s.
        let mut x2 = x.clone();
        for v in &mut x2.data_mut()[(s - 1) * 9..] { *v += 0.5; }
        for row in x2.data_mut().chunks_mut(9) { row[..3].fill(0.0); }
        let mut z2 = z.clone();
        for v in &mut z2.data_mut()[(s - 1) * 2..] { *v -= 0.7; }
        let run = |x: &Tensor, z: &Tensor| {
            let g = Graph::new();
            let f = Fwd::new(&g, &model.params);
            let feats = model.pose_features(&f, Side::Decoder, g.constant(x.clone())).unwrap();
            let (zv, wv) = (g.constant(z.clone()), g.constant(w.clone()));
            let prior = model.prior_z(&f, 2..t + 1, feats, zv, wv).unwrap();
            let emit = model.emit_x(&f, 2..t + 1, zv.slice(0, 1, t - 1).unwrap(), feats, wv).unwrap();
            (prior.mean.value(), prior.logvar.value(), emit.value())
        };
        let (a, b) = (run(&x, &z), run(&x2, &z2));
        // Row i is frame i + 2; frames 2..=s are rows 0..s-1.
        let rows = s - 1;
        prop_assert_eq!(&a.0[..rows * 2], &b.0[..rows * 2]);
        prop_assert_eq!(&a.1[..rows * 2], &b.1[..rows * 2]);
        // The emission at frame s reads z_s, which moved; compare frames < s.
        prop_assert_eq!(&a.2[..(rows - 1) * 9], &b.2[..(rows - 1) * 9]);
    }

    #[test]
    fn generation_keeps_the_observation_and_its_prefixes(seed in any::<u64>(), g0 in 1usize..5) {
        let model = HitDvae::new(ModelConfig::micro(3, 2), seed).unwrap();
        let x = random_sequence(seed, 3, 3);
        let obs = PoseSequence::new(3, 3, 3, x.into_data()).unwrap();
        let short = generate(&model, &obs, &GenerateOptions::new(g0, 2, seed)).unwrap();
        let long = generate(&model, &obs, &GenerateOptions::new(2 * g0, 2, seed)).unwrap();
        for (s, l) in short.samples.iter().zip(&long.samples) {
            prop_assert_eq!(&s.coords()[..27], obs.coords());
            prop_assert_eq!(s.coords(), &l.coords()[..s.coords().len()]);
        }
    }
}

#[test]
fn posterior_sees_the_future() {
    let model = HitDvae::new(ModelConfig::micro(3, 2), 5).unwrap();
    let x = random_sequence(6, 5, 3);
    let mut x2 = x.clone();
    for v in &mut x2.data_mut()[4 * 9 + 3..] {
        *v += 0.5;
    }
    let q1 = |x: &Tensor| {
        let g = Graph::new();
        let f = Fwd::new(&g, &model.params);
        let w = g.constant(Tensor::zeros(&[2]));
        model.infer_z(&f, g.constant(x.clone()), w).unwrap().mean.value()[..2].to_vec()
    };
    assert_ne!(q1(&x), q1(&x2));
}

#[test]
fn synthetic_clips_satisfy_the_validators() {
    let corpus = synth_corpus(&SynthSpec {
        clips_per_class: 5,
        ..SynthSpec::standard(4)
    })
    .unwrap();
    for clip in &corpus.clips {
        let seq = preprocess(clip, 10).unwrap();
        let g = Graph::new();
        let x = g.constant(seq.to_tensor());
        assert!(limb_loss(x, &corpus.skeleton).unwrap().item() < 1e-24, "{}", clip.id);
        let angle = angle_loss(x, &corpus.skeleton).unwrap();
        assert_eq!(angle.value.item(), 0.0, "{}", clip.id);
        assert_eq!(angle.skipped, 0);
    }
}
