use std::collections::HashSet;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use gpq::data::{split_protocol1, split_protocol2, synth_gaussian_mixture, Dataset, ProtocolSplit};
use gpq::encoder::{EncoderParams, FeatureEncoder, GradientBundle};
use gpq::eval::{average_precision, kmeans_objective, pq_baseline_fit, RelevanceJudge, RelevanceMode};
use gpq::index::RetrievalIndex;
use gpq::numerics::intra_normalize;
use gpq::objectives::{cls_loss, npq_loss, sem_loss, total_objective, LabeledBatch, LossWeights, Prototypes};
use gpq::quantizer::{hard_assign, soft_quantize};
use gpq::{Codebook, SubspaceShape};

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn features(rng: &mut ChaCha8Rng, shape: &SubspaceShape, n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| intra_normalize(&gaussian(rng, shape.dim), shape).unwrap()).collect()
}

fn one_hot(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn hard_assign_ignores_positive_scale(seed in any::<u64>(), scale in 1e-3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cb = Codebook::random(SubspaceShape::new(1, 6, 16).unwrap(), 1.0, seed);
        let x = gaussian(&mut rng, 6);
        let scaled: Vec<f64> = x.iter().map(|v| v * scale).collect();
        prop_assert_eq!(hard_assign(&x, cb.words()).unwrap(), hard_assign(&scaled, cb.words()).unwrap());
    }

    #[test]
    fn losses_finite_and_relabel_invariant(seed in any::<u64>(), alpha in 0.0f64..200.0, beta in 0.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = SubspaceShape::new(3, 4, 8).unwrap();
        let nc = 5;
        let cb = Codebook::random(shape, alpha, seed);
        let proto = Prototypes::random(&shape, nc, beta, seed ^ 1).unwrap();
        let x = features(&mut rng, &shape, 6);
        let u = features(&mut rng, &shape, 6);
        let classes: Vec<usize> = (0..6).map(|_| rng.random_range(0..nc)).collect();
        let y: Vec<Vec<f64>> = classes.iter().map(|&c| one_hot(nc, c)).collect();
        let batch = LabeledBatch::new(x.clone(), y.clone(), u).unwrap();
        let out = total_objective(&batch, &cb, Some(&proto), LossWeights { cls: 0.1, sem: 0.1 }).unwrap();
        prop_assert!(out.total.is_finite() && out.npq.is_finite() && out.cls.is_finite() && out.sem.is_finite());
        prop_assert!(out.grad_codewords.iter().chain(&out.grad_prototypes).all(|g| g.is_finite()));
        prop_assert!(out.labeled_grads.iter().chain(&out.unlabeled_reversal_grads).flatten().all(|g| g.is_finite()));

        let mut perm: Vec<usize> = (0..nc).collect();
        perm.shuffle(&mut rng);
        let relabeled: Vec<Vec<f64>> = classes.iter().map(|&c| one_hot(nc, perm[c])).collect();
        let q: Vec<Vec<f64>> = x.iter().map(|v| soft_quantize(v, &cb).unwrap().0).collect();
        let a = npq_loss(&x, &q, &y).unwrap().loss;
        let b = npq_loss(&x, &q, &relabeled).unwrap().loss;
        prop_assert!((a - b).abs() < 1e-12);
        for (xi, yi) in x.iter().zip(&y) {
            prop_assert!(cls_loss(xi, yi, &proto).unwrap().loss.is_finite());
            let h = sem_loss(xi, &proto).unwrap().loss;
            prop_assert!(h >= -1e-12 && h <= (nc as f64).ln() + 1e-12);
        }
    }

    #[test]
    fn entropy_minimax_step_directions(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = SubspaceShape::new(2, 3, 4).unwrap();
        let enc = EncoderParams::init(5, 6, shape.dim, seed).unwrap();
        let proto = Prototypes::random(&shape, 3, 4.0, seed ^ 7).unwrap();
        let raws: Vec<Vec<f64>> = (0..4).map(|_| gaussian(&mut rng, 5)).collect();
        let entropy = |enc: &EncoderParams, proto: &Prototypes| -> f64 {
            raws.iter()
                .map(|r| sem_loss(&enc.encode(r, &shape).unwrap().0, proto).unwrap().loss)
                .sum::<f64>()
                / raws.len() as f64
        };
        let base = entropy(&enc, &proto);
        let eta = 1e-4;
        let mut gw = vec![0.0; proto.weights().len()];
        let mut genc = GradientBundle::zeros_like(&enc);
        for r in &raws {
            let (x, cache) = enc.encode(r, &shape).unwrap();
            let s = sem_loss(&x, &proto).unwrap();
            gw.iter_mut().zip(&s.grad_prototypes).for_each(|(g, v)| *g += v / raws.len() as f64);
            // Routed like the trainer: the reversal input carries -dH/dx.
            let rev: Vec<f64> = s.grad_feature.iter().map(|v| -v / raws.len() as f64).collect();
            genc.accumulate(&enc.backward(&cache, &vec![0.0; shape.dim], &rev).unwrap());
        }
        let mut up = proto.clone();
        up.weights_mut().iter_mut().zip(&gw).for_each(|(w, g)| *w += eta * g);
        prop_assert!(entropy(&enc, &up) >= base - 1e-8);
        let mut down = enc.clone();
        for (p, g) in down.param_groups_mut().into_iter().zip(&genc.groups) {
            p.iter_mut().zip(g).for_each(|(w, d)| *w -= eta * d);
        }
        prop_assert!(entropy(&down, &proto) <= base + 1e-8);
    }

    #[test]
    fn search_read_only_and_append_monotone(seed in any::<u64>(), extra in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = SubspaceShape::new(4, 3, 16).unwrap();
        let cb = Codebook::random(shape, 0.0, seed);
        let base = features(&mut rng, &shape, 60);
        let more = features(&mut rng, &shape, extra);
        let index = RetrievalIndex::build(&base, &cb).unwrap();
        let image = index.to_bytes().unwrap();
        let grown = RetrievalIndex::build(&[base.clone(), more].concat(), &cb).unwrap();
        for _ in 0..5 {
            let q = features(&mut rng, &shape, 1).remove(0);
            let before: Vec<u64> = index.search_topk(&q, base.len()).unwrap().iter().map(|h| h.id).collect();
            let after: Vec<u64> = grown
                .search_topk(&q, grown.len())
                .unwrap()
                .iter()
                .map(|h| h.id)
                .filter(|&id| (id as usize) < base.len())
                .collect();
            prop_assert_eq!(before, after);
        }
        prop_assert_eq!(index.to_bytes().unwrap(), image);
    }

    #[test]
    fn ap_ignores_order_of_trailing_irrelevant_items(seed in any::<u64>(), n in 2usize..50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<u32> = (0..=n).map(|_| rng.random_range(0..3)).collect();
        let judge = RelevanceJudge::new(labels.iter().enumerate().map(|(i, &c)| (i as u64, vec![c])), RelevanceMode::SingleLabel);
        let mut ranked: Vec<u64> = (1..=n as u64).collect();
        ranked.shuffle(&mut rng);
        let last = ranked.iter().rposition(|&i| labels[i as usize] == labels[0]).map_or(0, |p| p + 1);
        let ap = average_precision(&ranked, &judge, 0, None).unwrap();
        ranked[last..].shuffle(&mut rng);
        prop_assert_eq!(ap, average_precision(&ranked, &judge, 0, None).unwrap());
    }

    #[test]
    fn lloyd_iterations_never_lower_the_objective(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = SubspaceShape::new(2, 3, 4).unwrap();
        let data = features(&mut rng, &shape, 50);
        let (cb, history) = pq_baseline_fit(&data, shape, 8, seed).unwrap();
        for w in history.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-9, "{:?}", history);
        }
        prop_assert!((kmeans_objective(&data, &cb).unwrap() - history[history.len() - 1]).abs() < 1e-12);
    }

    #[test]
    fn splits_are_disjoint_reproducible_and_round_trip(seed in any::<u64>(), classes in 4usize..9, per in 6usize..20) {
        let ds = synth_gaussian_mixture(classes, per, 3, 0.1, seed).unwrap();
        let one = split_protocol1(&ds, 2, 3, seed).unwrap();
        let two = split_protocol2(&ds, seed).unwrap();
        for s in [&one, &two] {
            let q: HashSet<u64> = s.query.iter().copied().collect();
            let db: HashSet<u64> = s.database.iter().copied().collect();
            prop_assert!(q.is_disjoint(&db));
            prop_assert_eq!(q.len(), s.query.len());
            prop_assert_eq!(db.len(), s.database.len());
            prop_assert!(s.labeled.iter().all(|&i| (i as usize) < ds.len()));
            prop_assert_eq!(&ProtocolSplit::from_json(&s.to_json().unwrap()).unwrap(), s);
        }
        prop_assert_eq!(&one, &split_protocol1(&ds, 2, 3, seed).unwrap());
        prop_assert_eq!(&two, &split_protocol2(&ds, seed).unwrap());
        prop_assert_eq!(Dataset::from_bytes(&ds.to_bytes().unwrap()).unwrap(), ds);
    }
}
