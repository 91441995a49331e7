use std::collections::HashSet;

use metaevent::data::{generate_corpus, sample_disjoint_pair, sample_task, CorpusSpec, EpisodeSpec, Example, LabelPool, TriggerSpan};
use metaevent::encoder::{trigger_weights, verbalize, EncoderOutput, VerbalizerParams};
use metaevent::matcher::{assign_clusters_to_labels, hungarian, micro_f1, AssignmentProblem, Sense};
use metaevent::meta::toy::{scalar_params, Separable, TanhNet, ToyBatch};
use metaevent::meta::{inner_adapt, meta_step, AdaptiveLRSchedule, MetaConfig, MetaState, MetaTask};
use metaevent::metrics::clustering_metrics;
use metaevent::objective::{contrastive_loss, mmd, MMDConfig};
use metaevent::rng::seeded_rng;
use metaevent::{Execution, Tensor};
use proptest::prelude::*;

fn pool(labels: usize, per_label: usize) -> LabelPool {
    (0..labels)
        .map(|l| {
            let examples = (0..per_label)
                .map(|i| Example {
                    tokens: vec![l, i, 7],
                    trigger_span: TriggerSpan::new(0, 1),
                    label: l,
                    raw_text: None,
                })
                .collect();
            (l, examples)
        })
        .collect()
}

fn points(max_len: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0..3.0f64, dim), 1..max_len)
}

fn bandwidth() -> impl Strategy<Value = MMDConfig> {
    prop_oneof![Just(MMDConfig::default()), (0.1..4.0f64).prop_map(MMDConfig::fixed)]
}

fn brute_force(cost: &[Vec<f64>], sense: Sense) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, sense: Sense, best: &mut f64) {
        if row == cost.len() {
            *best = match sense {
                Sense::Min => best.min(acc),
                Sense::Max => best.max(acc),
            };
            return;
        }
        for c in 0..cost.len() {
            if !used[c] {
                used[c] = true;
                go(cost, row + 1, used, acc + cost[row][c], sense, best);
                used[c] = false;
            }
        }
    }
    let mut best = match sense {
        Sense::Min => f64::INFINITY,
        Sense::Max => f64::NEG_INFINITY,
    };
    go(cost, 0, &mut vec![false; cost.len()], 0.0, sense, &mut best);
    best
}

proptest! {
    #[test]
    fn tasks_have_exact_per_class_counts(
        labels in 5usize..12,
        n in 2usize..5,
        k in 0usize..4,
        q in 1usize..4,
        seed in any::<u64>(),
    ) {
        prop_assume!(n <= labels);
        let p = pool(labels, 8);
        let spec = EpisodeSpec { n_way: n, k_shot: k, query_per_class: q, seed: 0 };
        let task = sample_task(&p, &spec, &mut seeded_rng(seed, &[])).unwrap();
        prop_assert_eq!(task.n_way(), n);
        for c in 0..n {
            prop_assert_eq!(task.support_classes().iter().filter(|&&x| x == c).count(), k);
            prop_assert_eq!(task.query_classes().iter().filter(|&&x| x == c).count(), q);
        }
        let support: HashSet<_> = task.support.iter().collect();
        prop_assert!(task.query.iter().all(|e| !support.contains(e)));
    }

    #[test]
    fn corpus_generation_is_a_pure_function_of_its_spec(
        types in 2usize..8,
        triggers in 1usize..3,
        examples in 2usize..10,
        seed in any::<u64>(),
    ) {
        let spec = CorpusSpec { num_event_types: types, triggers_per_type: triggers, examples_per_type: examples, seed, ..CorpusSpec::default() };
        let a = serde_json::to_vec(&generate_corpus(&spec).unwrap()).unwrap();
        let b = serde_json::to_vec(&generate_corpus(&spec).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn mmd_is_non_negative_and_permutation_invariant(
        (x, y) in (1usize..4).prop_flat_map(|d| (points(6, d), points(6, d))),
        cfg in bandwidth(),
        rot in 0usize..6,
    ) {
        let d = mmd(&x, &y, &cfg).unwrap();
        prop_assert!(d >= -1e-12);
        let mut xp = x.clone();
        let mut yp = y.clone();
        xp.rotate_left(rot % x.len());
        yp.reverse();
        let dp = mmd(&xp, &yp, &cfg).unwrap();
        prop_assert!((d - dp).abs() <= 1e-12 * d.abs().max(1.0));
    }

    #[test]
    fn raising_a_score_raises_only_that_weight(
        l in 2usize..7,
        heads in 1usize..3,
        raw in prop::collection::vec(0.01..1.0f64, 2 * 7 * 7),
        probs in prop::collection::vec(0.0..0.9f64, 7),
        pick in 0usize..7,
        delta in 0.01..0.1f64,
    ) {
        let attention: Vec<Tensor<f64>> = (0..heads)
            .map(|h| {
                let mut data = raw[h * 49..h * 49 + l * l].to_vec();
                for r in 0..l {
                    let s: f64 = data[r * l..(r + 1) * l].iter().sum();
                    data[r * l..(r + 1) * l].iter_mut().for_each(|x| *x /= s);
                }
                Tensor::from_vec(l, l, data)
            })
            .collect();
        let out = EncoderOutput {
            token_features: Tensor::zeros(l, 1),
            attention: attention.clone(),
            full_attention: attention,
            slot_distribution: Vec::new(),
            trigger_probs: probs[..l].to_vec(),
        };
        let k = pick % l;
        let mut raised = out.clone();
        raised.trigger_probs[k] += delta;
        let (w0, w1) = (trigger_weights(&out), trigger_weights(&raised));
        prop_assert!((w0.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..l {
            if i == k {
                prop_assert!(w1[i] > w0[i]);
            } else {
                prop_assert!(w1[i] < w0[i]);
            }
        }
    }

    #[test]
    fn verbalizer_prediction_ignores_a_common_logit_shift(
        v in prop::collection::vec(0.0..1.0f64, 3),
        t in prop::collection::vec(-2.0..2.0f64, 2),
        w in prop::collection::vec(-1.0..1.0f64, 5 * 3),
        b in prop::collection::vec(-1.0..1.0f64, 3),
        shift in -100.0..100.0f64,
    ) {
        let params = VerbalizerParams { weights: Tensor::from_vec(5, 3, w), bias: b.clone() };
        let shifted = VerbalizerParams { bias: b.iter().map(|x| x + shift).collect(), ..params.clone() };
        let (l0, p0) = verbalize(&v, &t, &params).unwrap();
        let (l1, p1) = verbalize(&v, &t, &shifted).unwrap();
        // ties within rounding can legitimately flip, so compare only clear winners
        let mut sorted = l0.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        prop_assume!(sorted[0] - sorted[1] > 1e-9 * shift.abs().max(1.0));
        prop_assert_eq!(p0, p1);
        prop_assert!(l0.iter().zip(&l1).all(|(a, c)| ((c - a) - shift).abs() < 1e-9));
    }

    #[test]
    fn hungarian_matches_brute_force(
        cost in (1usize..7).prop_flat_map(|n| prop::collection::vec(prop::collection::vec(-10i32..10, n), n)),
        max in any::<bool>(),
    ) {
        let cost: Vec<Vec<f64>> = cost.into_iter().map(|r| r.into_iter().map(f64::from).collect()).collect();
        let sense = if max { Sense::Max } else { Sense::Min };
        let (assignment, obj) = hungarian(&AssignmentProblem::new(cost.clone()).unwrap(), sense).unwrap();
        let mut cols = assignment.clone();
        cols.sort_unstable();
        prop_assert_eq!(cols, (0..cost.len()).collect::<Vec<_>>());
        prop_assert_eq!(obj, brute_force(&cost, sense));
    }

    #[test]
    fn relabeling_clusters_leaves_f1_unchanged(
        n in 2usize..6,
        data in prop::collection::vec((0usize..6, 0usize..6), 1..40),
        perm_seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let clusters: Vec<usize> = data.iter().map(|p| p.0 % n).collect();
        let gold: Vec<usize> = data.iter().map(|p| p.1 % n).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut seeded_rng(perm_seed, &[]));
        let relabeled: Vec<usize> = clusters.iter().map(|&c| perm[c]).collect();
        let f1 = |c: &[usize]| {
            let map = assign_clusters_to_labels(c, &gold, n).unwrap();
            micro_f1(&c.iter().map(|&x| map[x]).collect::<Vec<_>>(), &gold).unwrap()
        };
        prop_assert_eq!(f1(&clusters), f1(&relabeled));
    }

    #[test]
    fn metrics_stay_in_range(
        data in prop::collection::vec((0usize..5, 0usize..5), 2..120),
    ) {
        let clusters: Vec<usize> = data.iter().map(|p| p.0).collect();
        let gold: Vec<usize> = data.iter().map(|p| p.1).collect();
        let m = clustering_metrics(&clusters, &gold).unwrap();
        for v in [m.fm, m.rand, m.nmi, m.homogeneity] {
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&v), "{:?}", m);
        }
        for v in [m.ami, m.ari] {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&v), "{:?}", m);
        }
        prop_assert!(m.ari <= m.rand + 1e-12);
    }

    #[test]
    fn learning_rates_stay_positive(
        theta0 in -2.0..2.0f64,
        target in -2.0..2.0f64,
        alpha_lr in 0.01..100.0f64,
        steps in 1usize..4,
    ) {
        let theta = scalar_params(&[theta0]);
        let schedule = AdaptiveLRSchedule::new(&theta.groups(), steps, 0.05, 10.0, true);
        let config = MetaConfig {
            inner_steps: steps,
            second_order: true,
            alpha_lr,
            meta_lr: 0.1,
            execution: Execution::Sequential,
            ..MetaConfig::default()
        };
        let task = MetaTask {
            init: theta.clone(),
            support: vec![ToyBatch::Quadratic { target: 0.0 }],
            query: ToyBatch::Quadratic { target },
            query_head: None,
            task_id: 0,
        };
        let mut state = MetaState::new(theta, schedule, &config);
        for _ in 0..10 {
            meta_step(&Separable, &mut state, std::slice::from_ref(&task), &config).unwrap();
            prop_assert!(state.schedule.flat().iter().all(|&a| a > 0.0));
        }
    }

    #[test]
    fn adaptation_never_touches_theta(
        w in (-1.5..1.5f64, -1.5..1.5f64),
        batch in prop::collection::vec((-2.0..2.0f64, -1.0..1.0f64), 1..6),
        steps in 1usize..5,
        track in any::<bool>(),
    ) {
        let theta = scalar_params(&[w.0, w.1]);
        let before = theta.checksum();
        let schedule = AdaptiveLRSchedule::uniform(&theta.groups(), steps, 0.2);
        inner_adapt(&TanhNet, &theta, &[batch], &schedule, steps, track).unwrap();
        prop_assert_eq!(theta.checksum(), before);
    }

    #[test]
    fn separating_clusters_lowers_the_contrastive_loss(
        (a, b, axis) in (1usize..4).prop_flat_map(|d| (
            prop::collection::vec(prop::collection::vec(0.0..1.0f64, d), 1..5),
            prop::collection::vec(prop::collection::vec(0.0..1.0f64, d), 1..5),
            0..d,
        )),
        sigma in 0.3..3.0f64,
    ) {
        let cfg = MMDConfig::fixed(sigma);
        let mut prev = f64::INFINITY;
        for s in 0..20 {
            let shift = 1.0 + 0.5 * s as f64;
            let moved: Vec<Vec<f64>> = b.iter().map(|p| {
                let mut p = p.clone();
                p[axis] += shift;
                p
            }).collect();
            let loss = contrastive_loss(&[a.clone(), moved], &cfg).unwrap();
            prop_assert!(loss <= prev + 1e-15, "shift {}: {} after {}", shift, loss, prev);
            prev = loss;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn disjoint_pairs_never_share_labels(
        labels in 10usize..16,
        n in 2usize..6,
        k in 0usize..3,
        seed in any::<u64>(),
    ) {
        let p = pool(labels, 6);
        let spec = EpisodeSpec { n_way: n, k_shot: k, query_per_class: 2, seed: 0 };
        let (s, q) = sample_disjoint_pair(&p, &spec, &mut seeded_rng(seed, &[])).unwrap();
        prop_assert!(s.labels().is_disjoint(&q.labels()));
        prop_assert_eq!(s.n_way(), n);
        prop_assert_eq!(q.n_way(), n);
        prop_assert!(s.query.is_empty() && q.support.is_empty());
    }
}
