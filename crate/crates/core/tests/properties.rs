use dropens_core::attacks::signed_step;
use dropens_core::data::batch_iter;
use dropens_core::evaluation::{auc, roc_curve, standardized_partial_auc, ScoredDataset};
use dropens_core::nn::softmax_rows;
use dropens_core::uncertainty::decompose;
use dropens_core::{PredictiveSampleSet, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Scores on a coarse grid so ties are common; both classes always present.
fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    let score = (0u32..16).prop_map(|v| v as f64 / 8.0);
    (prop::collection::vec(score.clone(), 1..80), prop::collection::vec(score, 1..80))
}

fn normalised(raw: &[f64]) -> Vec<f64> {
    let z: f64 = raw.iter().sum();
    raw.iter().map(|v| v / z).collect()
}

/// (samples, members, batch, classes, probabilities)
fn sample_set() -> impl Strategy<Value = (usize, usize, usize, usize, Vec<f64>)> {
    (1usize..5, 1usize..5, 1usize..4, 2usize..7).prop_flat_map(|(s, m, b, k)| {
        prop::collection::vec(prop::collection::vec(0.001f64..1.0, k), s * m * b)
            .prop_map(move |rows| (s, m, b, k, rows.iter().flat_map(|r| normalised(r)).collect()))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn roc_is_monotone_with_fixed_ends((id, ood) in scored()) {
        let c = roc_curve(&ScoredDataset::from_parts(&id, &ood, "p").unwrap()).unwrap();
        prop_assert!(c.fpr.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(c.tpr.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(c.points().next(), Some((0.0, 0.0)));
        prop_assert_eq!(c.points().last(), Some((1.0, 1.0)));
    }

    #[test]
    fn swapping_classes_mirrors_auc((id, ood) in scored()) {
        let a = auc(&roc_curve(&ScoredDataset::from_parts(&id, &ood, "p").unwrap()).unwrap());
        let b = auc(&roc_curve(&ScoredDataset::from_parts(&ood, &id, "p").unwrap()).unwrap());
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn auc_counts_ordered_pairs((id, ood) in scored()) {
        let mut wins = 0.0;
        for o in &ood {
            for i in &id {
                wins += if o > i { 1.0 } else if o == i { 0.5 } else { 0.0 };
            }
        }
        let expected = wins / (id.len() * ood.len()) as f64;
        let a = auc(&roc_curve(&ScoredDataset::from_parts(&id, &ood, "p").unwrap()).unwrap());
        prop_assert!((a - expected).abs() < 1e-12);
    }

    #[test]
    fn metrics_ignore_monotone_rescaling((id, ood) in scored(), fpr_max in 0.01f64..=1.0) {
        let f = |v: &Vec<f64>| v.iter().map(|s| 3.0 * s.powi(3) - 7.0).collect::<Vec<_>>();
        let c1 = roc_curve(&ScoredDataset::from_parts(&id, &ood, "p").unwrap()).unwrap();
        let c2 = roc_curve(&ScoredDataset::from_parts(&f(&id), &f(&ood), "p").unwrap()).unwrap();
        prop_assert_eq!(auc(&c1), auc(&c2));
        prop_assert_eq!(
            standardized_partial_auc(&c1, fpr_max).unwrap(),
            standardized_partial_auc(&c2, fpr_max).unwrap()
        );
    }

    #[test]
    fn full_range_partial_auc_is_auc((id, ood) in scored()) {
        let c = roc_curve(&ScoredDataset::from_parts(&id, &ood, "p").unwrap()).unwrap();
        prop_assert!((standardized_partial_auc(&c, 1.0).unwrap() - auc(&c)).abs() < 1e-12);
    }

    #[test]
    fn separated_scores_give_unit_partial_auc(id in prop::collection::vec(0.0f64..1.0, 1..50), ood in prop::collection::vec(2.0f64..3.0, 1..50), fpr_max in 0.001f64..=1.0) {
        let c = roc_curve(&ScoredDataset::from_parts(&id, &ood, "p").unwrap()).unwrap();
        prop_assert!((standardized_partial_auc(&c, fpr_max).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uncertainty_bounds_and_additivity((s, m, b, k, probs) in sample_set()) {
        let r = decompose(&PredictiveSampleSet::new(probs, s, m, b, k).unwrap());
        for i in 0..b {
            prop_assert!(r.epistemic[i] >= -1e-12);
            prop_assert!(r.epistemic[i] <= (k as f64).ln() + 1e-6);
            prop_assert!(r.aleatoric[i] >= -1e-12);
            prop_assert_eq!(r.total[i], r.epistemic[i] + r.aleatoric[i]);
        }
    }

    #[test]
    fn uncertainty_ignores_member_and_sample_order((s, m, b, k, probs) in sample_set(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draws: Vec<(usize, usize)> = (0..s).flat_map(|si| (0..m).map(move |mi| (si, mi))).collect();
        draws.shuffle(&mut rng);
        let mut permuted = Vec::with_capacity(probs.len());
        for &(si, mi) in &draws {
            let start = (si * m + mi) * b * k;
            permuted.extend_from_slice(&probs[start..start + b * k]);
        }
        let a = decompose(&PredictiveSampleSet::new(probs, s, m, b, k).unwrap());
        let p = decompose(&PredictiveSampleSet::new(permuted, s, m, b, k).unwrap());
        for i in 0..b {
            prop_assert!((a.epistemic[i] - p.epistemic[i]).abs() < 1e-12);
            prop_assert!((a.total[i] - p.total[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_draws_have_no_epistemic_part(row in prop::collection::vec(0.001f64..1.0, 2..8), s in 1usize..4, m in 1usize..4) {
        let p = normalised(&row);
        let k = p.len();
        let probs: Vec<f64> = (0..s * m).flat_map(|_| p.clone()).collect();
        let r = decompose(&PredictiveSampleSet::new(probs, s, m, 1, k).unwrap());
        prop_assert!(r.epistemic[0].abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_are_distributions(logits in prop::collection::vec(-50.0f32..50.0, 12)) {
        for k in [2, 3, 4, 6] {
            let p = softmax_rows(&logits, k);
            for row in p.chunks(k) {
                prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|v| *v >= 0.0));
            }
        }
    }

    #[test]
    fn signed_step_respects_budget_and_box(x in prop::collection::vec(0.0f64..=1.0, 1..40), seed in any::<u64>(), eps in 0.0f64..0.3) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = x.len();
        let grad: Vec<f64> = (0..n).map(|_| [-1.5, 0.0, 2.0][rng.random_range(0..3)]).collect();
        let xt = Tensor::new(&[n], x.clone()).unwrap();
        let adv = signed_step(&xt, &Tensor::new(&[n], grad.clone()).unwrap(), -eps).unwrap();
        for ((a, b), g) in adv.data().iter().zip(&x).zip(&grad) {
            prop_assert!((a - b).abs() <= eps + 1e-15);
            prop_assert!((0.0..=1.0).contains(a));
            if *g == 0.0 {
                prop_assert_eq!(a, b);
            }
            prop_assert!((a - b) * g <= 0.0);
        }
    }

    #[test]
    fn batches_partition_every_index(n in 0usize..300, batch in 1usize..64, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batches = batch_iter(n, batch, true, &mut rng).unwrap();
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        prop_assert!(batches.iter().all(|b| b.len() <= batch && !b.is_empty()));
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn tensor_round_trips_through_bytes(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let t = Tensor::<f32>::new(&shape, (0..n).map(|_| rng.random::<f32>()).collect()).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let back = Tensor::<f32>::read_from(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back, t);
    }
}
