//! Randomised invariants across the modules. Inputs are drawn from seeded
//! generators so shrinking reduces seeds and sizes rather than raw floats.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fusekit::autograd::{finite_diff_check_all, Graph, ParameterStore};
use fusekit::colearn::colearn_loss;
use fusekit::embedding::{contrastive_loss, sne_affinities, sne_cost_grad, Sigma, SiameseNet};
use fusekit::fusion::{responsibilities, FusionConfig, FusionModel, Variant};
use fusekit::nn::{gaussian_kl, Gaussian};
use fusekit::statespace::{
    hmm_forward_backward, kalman_filter, kalman_smooth, sequence_likelihood, DiscreteHMM, Emission,
    LinearGaussianSSM, Observation,
};
use fusekit::synth::{gen_scenario, ScenarioConfig, SegmentLaw};
use fusekit::Matrix;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn simplex(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

fn spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &m * m.transpose() + DMatrix::identity(n, n) * 0.2
}

fn small_scenario(seed: u64, sequences: usize, frames: usize) -> ScenarioConfig {
    let mut s = ScenarioConfig {
        sequences,
        frames,
        seed,
        ..ScenarioConfig::default()
    };
    s.corruption.segment = SegmentLaw::Uniform {
        min: 1,
        max: frames / 2,
    };
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn composite_graph_gradients(seed in any::<u64>(), r in 1usize..=8, k in 1usize..=8, c in 1usize..=8) {
        let mut rng = rng(seed);
        let mut g = Graph::new();
        let a = g.param("a", &Matrix::uniform(r, k, -1.0, 1.0, &mut rng));
        let b = g.param("b", &Matrix::uniform(k, c, -1.0, 1.0, &mut rng));
        let p = g.param("p", &Matrix::uniform(r, c, 0.5, 2.0, &mut rng));
        let ab = g.matmul(a, b).unwrap();
        let h = g.tanh(ab).unwrap();
        let s = g.softmax(h).unwrap();
        let q = g.sqrt(p).unwrap();
        let l = g.log(p).unwrap();
        let d = g.div(s, q).unwrap();
        let e = g.mul(d, l).unwrap();
        let sp = g.softplus(e).unwrap();
        let root = g.sum(sp).unwrap();
        prop_assert!(finite_diff_check_all(&mut g, root, 1e-6).unwrap() < 1e-5);
    }

    #[test]
    fn reevaluation_is_bit_identical(seed in any::<u64>(), r in 1usize..=8, c in 1usize..=8) {
        let mut rng = rng(seed);
        let mut g = Graph::new();
        let x = g.input("x", Matrix::uniform(r, c, -2.0, 2.0, &mut rng));
        let s = g.softmax(x).unwrap();
        let t = g.sigmoid(x).unwrap();
        let m = g.mul(s, t).unwrap();
        let root = g.mean(m).unwrap();
        let mut b = BTreeMap::new();
        b.insert("x".to_string(), Matrix::uniform(r, c, -2.0, 2.0, &mut rng));
        let first = g.eval_forward(root, &b).unwrap();
        let second = g.eval_forward(root, &b).unwrap();
        prop_assert_eq!(first.item().to_bits(), second.item().to_bits());
    }

    #[test]
    fn gaussian_kl_is_non_negative(seed in any::<u64>(), d in 1usize..6) {
        let mut rng = rng(seed);
        let mut draw = || Gaussian::new(
            (0..d).map(|_| rng.random_range(-3.0..3.0)).collect(),
            (0..d).map(|_| rng.random_range(0.05..3.0)).collect(),
        );
        let (q, p) = (draw(), draw());
        prop_assert!(gaussian_kl(&q, &p).unwrap() >= 0.0);
        prop_assert!(gaussian_kl(&q, &q).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn responsibilities_are_a_simplex(seed in any::<u64>(), m in 1usize..6, y in 0u8..2) {
        let mut rng = rng(seed);
        let w = simplex(m, &mut rng);
        let p: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..=1.0)).collect();
        let (r, _) = responsibilities(&w, &p, y);
        prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(r.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn colearn_loss_vanishes_only_on_agreement(seed in any::<u64>(), m in 2usize..5, n in 1usize..5) {
        let mut rng = rng(seed);
        let z: Vec<Vec<f64>> = (0..m).map(|_| (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let lambda: Vec<f64> = (0..m).map(|_| rng.random_range(0.01..2.0)).collect();
        let (loss, _) = colearn_loss(&z, &lambda, None).unwrap();
        prop_assert!(loss > 0.0);
        let same = vec![z[0].clone(); m];
        prop_assert_eq!(colearn_loss(&same, &lambda, None).unwrap().0, 0.0);
    }

    #[test]
    fn hmm_posteriors_are_simplexes(seed in any::<u64>(), k in 1usize..5, t in 1usize..12) {
        let mut rng = rng(seed);
        let hmm = DiscreteHMM::new(
            simplex(k, &mut rng),
            (0..k).map(|_| simplex(k, &mut rng)).collect(),
            Emission::Categorical((0..k).map(|_| simplex(3, &mut rng)).collect()),
        ).unwrap();
        let obs: Vec<Observation> = (0..t).map(|_| Observation::Symbol(rng.random_range(0..3))).collect();
        let fb = hmm_forward_backward(&hmm, &obs).unwrap();
        for row in &fb.gamma {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|v| *v >= 0.0));
        }
        prop_assert_eq!(fb.loglik, sequence_likelihood(&hmm, &obs).unwrap());
    }

    #[test]
    fn kalman_covariances_stay_symmetric_psd(seed in any::<u64>(), n in 1usize..4, d in 1usize..4, t in 1usize..10) {
        let mut rng = rng(seed);
        let ssm = LinearGaussianSSM::new(
            DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0)),
            DMatrix::from_fn(d, n, |_, _| rng.random_range(-2.0..2.0)),
            spd(n, &mut rng),
            spd(d, &mut rng),
            DVector::zeros(n),
            spd(n, &mut rng),
        ).unwrap();
        let obs: Vec<DVector<f64>> = (0..t).map(|_| DVector::from_fn(d, |_, _| rng.random_range(-3.0..3.0))).collect();
        let f = kalman_filter(&ssm, &obs).unwrap();
        let s = kalman_smooth(&ssm, &obs).unwrap();
        for b in f.filtered.iter().chain(&f.predicted).chain(&s) {
            prop_assert!((&b.cov - b.cov.transpose()).amax() < 1e-12);
            prop_assert!(b.cov.symmetric_eigenvalues().min() > -1e-12);
        }
        prop_assert!(f.loglik.is_finite());
    }

    #[test]
    fn contrastive_loss_properties(d in 0.0f64..5.0, m in 0.1f64..3.0) {
        prop_assert!(contrastive_loss(d, false, m) >= 0.0);
        prop_assert!(contrastive_loss(d, true, m) >= 0.0);
        prop_assert_eq!(contrastive_loss(0.0, false, m), 0.0);
        prop_assert_eq!(contrastive_loss(m + d, true, m), 0.0);
    }

    #[test]
    fn siamese_loss_is_symmetric(seed in any::<u64>(), dissimilar in any::<bool>()) {
        let mut rng = rng(seed);
        let net = SiameseNet::new("s", &[4, 5, 3], 1.0).unwrap();
        let mut store = ParameterStore::new();
        net.init(&mut store, &mut rng);
        let x1: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x2: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        prop_assert_eq!(
            net.pair_loss(&store, &x1, &x2, dissimilar).unwrap(),
            net.pair_loss(&store, &x2, &x1, dissimilar).unwrap()
        );
    }

    #[test]
    fn sne_cost_is_non_negative(seed in any::<u64>(), n in 2usize..12) {
        let mut rng = rng(seed);
        let x = Matrix::randn(n, 4, 1.0, &mut rng);
        let sigma = Sigma::Fixed(rng.random_range(0.5..2.0));
        let p = sne_affinities(&x, &sigma).unwrap();
        let (cost, grad) = sne_cost_grad(&p, &Matrix::randn(n, 2, 1.0, &mut rng), &sigma).unwrap();
        prop_assert!(cost >= 0.0);
        prop_assert!(grad.is_finite());
        for i in 0..n {
            prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert_eq!(p.row(i)[i], 0.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn generation_is_pure_and_masks_leave_labels(seed in any::<u64>(), frames in 8usize..30) {
        let config = small_scenario(seed, 3, frames);
        let data = gen_scenario(&config).unwrap();
        prop_assert_eq!(&data, &gen_scenario(&config).unwrap());
        let mut uncorrupted = config.clone();
        uncorrupted.corruption.level = 0.0;
        let plain = gen_scenario(&uncorrupted).unwrap();
        let all = data.train.iter().chain(&data.val).chain(&data.test);
        let plain_all = plain.train.iter().chain(&plain.val).chain(&plain.test);
        for (s, p) in all.zip(plain_all) {
            prop_assert_eq!(&s.y, &p.y);
            prop_assert_eq!(s.frames(), frames);
            for (m, x) in s.x.iter().enumerate() {
                prop_assert_eq!(x.rows(), frames);
                prop_assert_eq!(s.masks[m].len(), frames);
                if !config.corruption.modalities.contains(&m) {
                    prop_assert!(s.masks[m].iter().all(|v| !v));
                }
            }
        }
    }

    #[test]
    fn fused_output_is_a_convex_combination(seed in any::<u64>(), v in 0usize..3) {
        let variant = [Variant::Conditional, Variant::Markov, Variant::Recurrent][v];
        let data = gen_scenario(&small_scenario(seed, 3, 16)).unwrap();
        let model = FusionModel::new(FusionConfig {
            variant,
            expert_hidden: vec![4],
            gate_hidden: 4,
            ..FusionConfig::default()
        }).unwrap();
        let mut store = ParameterStore::new();
        model.init(&mut store, &mut rng(seed));
        let seqs: Vec<_> = data.train.iter().collect();
        for out in model.run_sequences(&store, &seqs).unwrap() {
            for ((f, w), p) in out.fused.iter().zip(&out.weights).zip(&out.probs) {
                prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(w.iter().all(|x| *x >= 0.0));
                let lo = p.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(*f >= lo - 1e-12 && *f <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn conditional_fusion_ignores_frame_order(seed in any::<u64>()) {
        let data = gen_scenario(&small_scenario(seed, 3, 16)).unwrap();
        let model = FusionModel::new(FusionConfig {
            expert_hidden: vec![4],
            gate_hidden: 4,
            context: 1,
            ..FusionConfig::default()
        }).unwrap();
        let mut store = ParameterStore::new();
        model.init(&mut store, &mut rng(seed));
        let seq = &data.train[0];
        let t = seq.frames();
        let mut reversed = seq.clone();
        for (x, r) in seq.x.iter().zip(reversed.x.iter_mut()) {
            for i in 0..t {
                r.row_mut(i).copy_from_slice(x.row(t - 1 - i));
            }
        }
        reversed.y.reverse();
        let a = model.run_sequences(&store, &[seq]).unwrap().remove(0);
        let b = model.run_sequences(&store, &[&reversed]).unwrap().remove(0);
        for i in 0..t {
            prop_assert_eq!(a.fused[i], b.fused[t - 1 - i]);
        }
    }
}
