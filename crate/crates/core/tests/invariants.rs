use proptest::prelude::*;

use units_core::data::{block_mask, epoch_batches, repetition_factors};
use units_core::rng;
use units_core::tasks::{NormStats, TaskSpec};
use units_core::tensor::bilinear_resize_values;
use units_core::tokenizer::{admissible_counts, draw_mask_plan, plan_mask, token_count, truncated_tokens, MaskScheme};
use units_core::towers::match_class;
use units_core::trainer::{lr_at, Regime, Schedule, TrainingConfig};
use units_core::{Tape, Tensor};

fn tensor(shape: &[usize], seed: u64) -> Tensor {
    rng::normal_tensor(&mut rng::seeded(seed), shape, 1.0)
}

proptest! {
    #[test]
    fn resize_to_same_shape_is_identity(r in 1usize..9, c in 1usize..9, seed in any::<u64>()) {
        let w = tensor(&[r, c], seed);
        prop_assert_eq!(bilinear_resize_values(&w, r, c).unwrap(), w);
    }

    #[test]
    fn resize_preserves_constants_and_bounds(r in 1usize..6, c in 1usize..6, r2 in 1usize..12, c2 in 1usize..12, seed in any::<u64>()) {
        let w = tensor(&[r, c], seed);
        let out = bilinear_resize_values(&w, r2, c2).unwrap();
        let (lo, hi) = w.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        prop_assert!(out.data().iter().all(|&x| x >= lo - 1e-12 && x <= hi + 1e-12));
        let k = Tensor::full(&[r, c], 0.75);
        prop_assert!(bilinear_resize_values(&k, r2, c2).unwrap().data().iter().all(|&x| (x - 0.75).abs() < 1e-14));
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..7, seed in any::<u64>()) {
        let mut tape = Tape::new();
        let x = tape.constant(tensor(&[rows, cols], seed).reshape(&[rows, cols]).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        for row in tape.value(y).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn nearest_class_is_a_member_at_distance_zero(n in 2usize..9, v in 1usize..4, d in 1usize..6, pick in 0usize..8, seed in any::<u64>()) {
        let emb = tensor(&[n, v, d], seed);
        let i = pick % n;
        let (got, dist) = match_class(&emb.narrow_first(i, 1).unwrap(), &emb).unwrap();
        prop_assert_eq!(dist[i], 0.0);
        prop_assert!(dist[got] == 0.0 && got <= i);
    }

    #[test]
    fn mask_plans_are_sorted_unique_and_sized(s in 2usize..80, seed in any::<u64>()) {
        let mut r = rng::seeded(seed);
        let plan = draw_mask_plan(s, &mut r).unwrap();
        prop_assert!(plan.masked.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(plan.masked.iter().all(|&i| i < s));
        if plan.scheme == MaskScheme::Right {
            prop_assert!(plan.is_contiguous_suffix(s));
        }
        if admissible_counts(s).is_some() {
            let q = plan.realized_ratio(s);
            prop_assert!((0.70..=0.80).contains(&q), "s={} q={}", s, q);
        }
        let again = plan_mask(s, plan.scheme, &mut rng::seeded(seed ^ 1)).unwrap();
        prop_assert!(!again.masked.is_empty());
    }

    #[test]
    fn tokens_cover_every_step(t in 1usize..500, k in 1usize..40) {
        let n = token_count(t, k);
        prop_assert!(n * k >= t && (n - 1) * k < t);
    }

    #[test]
    fn truncation_stays_in_bounds(s in 2usize..100, frac in 0.5f64..=1.0) {
        let kept = truncated_tokens(s, frac);
        prop_assert!(kept >= 2 && kept <= s);
        prop_assert!(kept as f64 >= frac * s as f64 - 1e-9);
    }

    #[test]
    fn block_masks_are_one_contiguous_run(t in 2usize..200, frac in 0.05f64..0.95, seed in any::<u64>()) {
        let m = block_mask(&mut rng::seeded(seed), t, frac);
        let hidden = m.iter().filter(|&&h| h).count();
        prop_assert!(hidden >= 1 && hidden < t);
        let first = m.iter().position(|&h| h).unwrap();
        prop_assert!(m[first..first + hidden].iter().all(|&h| h));
    }

    #[test]
    fn epochs_visit_each_index_repetition_times(n in 1usize..40, bs in 1usize..17, rep in 1usize..4, seed in any::<u64>(), epoch in 0u64..5) {
        let batches = epoch_batches(n, bs, rep, seed, epoch).unwrap();
        let mut counts = vec![0usize; n];
        for b in &batches {
            prop_assert!(!b.is_empty() && b.len() <= bs);
            for &i in b {
                counts[i] += 1;
            }
        }
        prop_assert!(counts.iter().all(|&c| c == rep));
    }

    #[test]
    fn repetition_balances_to_the_largest(sizes in prop::collection::vec(1usize..300, 1..6)) {
        let max = *sizes.iter().max().unwrap();
        for (n, r) in sizes.iter().zip(repetition_factors(&sizes)) {
            prop_assert!(n * r >= max && n * (r - 1) < max);
        }
    }

    #[test]
    fn normalization_round_trips(b in 1usize..4, t in 2usize..20, v in 1usize..4, seed in any::<u64>()) {
        let x = rng::normal_tensor(&mut rng::seeded(seed), &[b, t, v], 3.0);
        let st = NormStats::fit(&x, None).unwrap();
        let back = st.restore(&st.apply(&x).unwrap()).unwrap();
        prop_assert!(back.max_abs_diff(&x) < 1e-9);
    }

    #[test]
    fn schedules_never_exceed_the_base_rate(steps in 1usize..2000, at in 0usize..2000, cosine in any::<bool>()) {
        let mut cfg = TrainingConfig::new(Regime::Supervised, steps, 8, 0.01);
        cfg.schedule = if cosine { Schedule::Cosine } else { Schedule::Multistep };
        let lr = lr_at(&cfg, at.min(steps));
        prop_assert!((0.0..=0.01).contains(&lr));
        prop_assert_eq!(lr_at(&cfg, 0), 0.01);
    }
}

#[test]
fn task_specs_reject_inconsistent_fields() {
    assert!(TaskSpec::forecast("a", "a", 0).validate().is_err());
    assert!(TaskSpec::classify("a", "a", 1).validate().is_err());
    assert!(TaskSpec::anomaly("a", "a", 1.5).validate().is_err());
    assert!(TaskSpec::impute("a", "a").validate().is_ok());
}
