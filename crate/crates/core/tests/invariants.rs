use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use weakshot_core::geometry::{iou, BoundingBox};
use weakshot_core::maskgen::CoarseMask;
use weakshot_core::milcls::{filter_source_pseudo, mil_scores, PseudoBox};
use weakshot_core::simnet::{assign_weights, sample_balanced_batch, FeaturePool};
use weakshot_core::synthdata::{generate_corpus, CorpusConfig};
use weakshot_core::trainer::{Dataset, TrainingConfig, TrainingState};

fn matrix(max: usize) -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1..=max, 1..=max).prop_flat_map(|(n, c)| (Just(n), Just(c), prop::collection::vec(-30.0..30.0f64, n * c)))
}

fn boxes() -> impl Strategy<Value = BoundingBox> {
    (0.0..50.0f64, 0.0..50.0f64, 1.0..30.0f64, 1.0..30.0f64).prop_map(|(x, y, w, h)| BoundingBox::new(x, y, x + w, y + h).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn mil_normalisations_and_range((n, c, sr) in matrix(9), sd_seed in prop::collection::vec(-30.0..30.0f64, 81)) {
        let sd: Vec<f64> = sd_seed[..n * c].to_vec();
        let s = mil_scores(sr, sd, c).unwrap();
        for i in 0..n {
            let row: f64 = (0..c).map(|k| s.s_r_norm[i * c + k]).sum();
            prop_assert!((row - 1.0).abs() < 1e-9);
        }
        for k in 0..c {
            let col: f64 = (0..n).map(|i| s.s_d_norm[i * c + k]).sum();
            prop_assert!((col - 1.0).abs() < 1e-9);
        }
        for &y in &s.y_mil {
            prop_assert!((0.0..=1.0).contains(&y));
        }
    }

    #[test]
    fn mask_pixels_sum_to_one(c in 1usize..6, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        use rand::Rng;
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let p: Vec<f64> = (0..c * h * w).map(|_| r.gen_range(-40.0..40.0)).collect();
        let m = CoarseMask::from_logits(p, c, h, w).unwrap();
        for s in 0..h * w {
            let total: f64 = (0..=c).map(|k| m.channel(k)[s]).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn weights_bounded_and_transpose_invariant(m in 1usize..10, vals in prop::collection::vec(0.0..=1.0f64, 81)) {
        let a = &vals[..m * m];
        let at: Vec<f64> = (0..m * m).map(|idx| a[(idx % m) * m + idx / m]).collect();
        let w = assign_weights(a, m);
        let wt = assign_weights(&at, m);
        for i in 0..m {
            prop_assert!((0.0..=1.0).contains(&w[i]));
            prop_assert!((w[i] - wt[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn sampler_is_balanced(cats in 2usize..12, k_frac in 0.0..1.0f64, m in 1usize..10, sizes in prop::collection::vec(1usize..15, 12), seed in any::<u64>()) {
        let k = 1 + ((cats - 1) as f64 * k_frac) as usize;
        let pool: FeaturePool = (0..cats).map(|c| (c * 3, (0..sizes[c]).map(|i| vec![c as f64, i as f64]).collect())).collect();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let b = sample_balanced_batch(&pool, k, m, &mut r).unwrap();
        prop_assert_eq!(b.rows(), k * m);
        let mut counts = std::collections::BTreeMap::new();
        for (row, &c) in b.category_of_row.iter().enumerate() {
            *counts.entry(c).or_insert(0) += 1;
            prop_assert_eq!(b.features[row * 2], (c / 3) as f64);
        }
        prop_assert_eq!(counts.len(), k);
        prop_assert!(counts.values().all(|&n| n == m));
        if sizes[..cats].iter().all(|&s| s >= m) {
            let mut rows: Vec<(u64, u64)> = (0..b.rows()).map(|i| (b.features[2 * i].to_bits(), b.features[2 * i + 1].to_bits())).collect();
            rows.sort();
            rows.dedup();
            prop_assert_eq!(rows.len(), k * m);
        }
    }

    #[test]
    fn source_filter_keeps_only_low_overlap(ps in prop::collection::vec(boxes(), 0..12), gt in prop::collection::vec(boxes(), 0..6)) {
        let pseudo: Vec<(usize, PseudoBox)> = ps.iter().enumerate().map(|(i, b)| (i, PseudoBox { bbox: *b, pseudo_label: 0, mining_score: 0.9, weight: 1.0 })).collect();
        let kept = filter_source_pseudo(&pseudo, &gt, 0.1);
        for (_, p) in &kept {
            let worst = gt.iter().map(|g| iou(&p.bbox, g)).fold(0.0, f64::max);
            prop_assert!(worst <= 0.1);
        }
        // Exhaustive: every dropped box overlaps some ground truth by more.
        let kept_ids: Vec<usize> = kept.iter().map(|k| k.0).collect();
        for (i, b) in ps.iter().enumerate() {
            let worst = gt.iter().map(|g| iou(b, g)).fold(0.0, f64::max);
            prop_assert_eq!(kept_ids.contains(&i), worst <= 0.1);
        }
    }
}

#[test]
fn weight_fixed_cases() {
    assert!(assign_weights(&[1.0; 16], 4).iter().all(|&w| w == 1.0));
    assert_eq!(assign_weights(&[1.0, 0.0, 0.0, 1.0], 2), vec![0.5, 0.5]);
}

#[test]
fn first_iteration_weights_are_one() {
    let cfg = CorpusConfig { n_source: 24, n_source_val: 4, n_target: 12, n_test: 4, ..CorpusConfig::default() };
    let (corpus, _) = generate_corpus(&cfg).unwrap();
    let data = Dataset::from_corpus(&corpus).unwrap();
    let tcfg = TrainingConfig { source_per_epoch: 24, batch_size: 8, ..TrainingConfig::default() };
    let mut st = TrainingState::new(tcfg, &data).unwrap();
    let check = |st: &TrainingState| {
        assert!(st.pseudo_pool.is_empty() && st.base_pool.is_empty());
        for s in &data.source {
            let (sup, neg) = st.supervision(s, true);
            assert_eq!(sup.len(), s.gt.len());
            assert!(sup.iter().all(|b| b.weight == 1.0) && neg == 1.0);
        }
        for s in &data.target {
            let (sup, _) = st.supervision(s, false);
            assert!(sup.is_empty());
        }
    };
    check(&st);
    st.step1(1).unwrap();
    check(&st);
}
