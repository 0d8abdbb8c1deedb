use std::collections::BTreeSet;

use proptest::prelude::*;

use opencon::data::{generate_synthetic, make_split, AugmentConfig, BatchSampler, SyntheticSpec};
use opencon::eval::{accuracy_triple, OverallMatching};
use opencon::numeric::{dot, l2_norm, l2_normalize, percentile_threshold, softmax, Matrix};
use opencon::objective::{build_sets_grouped, decompose_alignment, grouped_contrastive_loss, per_sample_loss};
use opencon::prototype::{calibrate_threshold, ood_gate, pseudo_label, update_prototypes, GateMode, PrototypeStore, Restrict};
use opencon::rng::{Rng, Stream};
use opencon::vmf::{sample_vmf, VmfParams};

fn unit_rows(rng: &mut Rng, n: usize, dim: usize) -> Matrix {
    let rows: Vec<Vec<f64>> = (0..n).map(|_| rng.unit_vector(dim)).collect();
    Matrix::from_rows(&rows).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalize_is_idempotent(v in prop::collection::vec(-1e3f64..1e3, 1..20)) {
        prop_assume!(l2_norm(&v) > 1e-6);
        let once = l2_normalize(&v).unwrap();
        let twice = l2_normalize(&once).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_ignores_exact_shifts(
        raw in prop::collection::vec(-4096i32..4096, 1..12),
        shift in -100i32..100,
        tau in prop::sample::select(vec![0.25, 0.5, 1.0, 2.0]),
    ) {
        // dyadic inputs and integer shifts keep every addition exact
        let v: Vec<f64> = raw.iter().map(|&x| x as f64 / 1024.0).collect();
        let shifted: Vec<f64> = v.iter().map(|x| x + shift as f64).collect();
        prop_assert_eq!(softmax(&v, tau).unwrap(), softmax(&shifted, tau).unwrap());
    }

    #[test]
    fn softmax_shift_within_rounding(v in prop::collection::vec(-50f64..50.0, 1..12), c in -1e3f64..1e3) {
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        for (a, b) in softmax(&v, 0.7).unwrap().iter().zip(softmax(&shifted, 0.7).unwrap()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn percentile_is_nonincreasing_in_p(
        scores in prop::collection::vec(-1f64..1.0, 1..60),
        p in 0f64..100.0,
        q in 0f64..100.0,
    ) {
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        prop_assert!(percentile_threshold(&scores, hi).unwrap() <= percentile_threshold(&scores, lo).unwrap());
    }

    #[test]
    fn vmf_samples_are_unit(seed in any::<u64>(), kappa in prop::sample::select(vec![0.0, 1e-3, 1.0, 30.0, 1e4, 1e8]), dim in 2usize..20) {
        let mut rng = Rng::new(seed, Stream::Data);
        let mu = rng.unit_vector(dim);
        let params = VmfParams::new(mu, kappa).unwrap();
        for z in sample_vmf(&params, 20, &mut rng) {
            prop_assert!((l2_norm(&z) - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn split_partitions_dataset(
        seed in any::<u64>(),
        classes in 2usize..6,
        per_class in 1usize..12,
        known in 0.2f64..1.0,
        ratio in 0.1f64..1.0,
    ) {
        let mut rng = Rng::new(seed, Stream::Data);
        let ds = generate_synthetic(&SyntheticSpec::new(classes, per_class, 4, 10.0), &mut rng).unwrap();
        let Ok(split) = make_split(&ds, known, ratio, &mut rng) else { return Ok(()) };
        let ids_l: BTreeSet<u64> = split.labeled.iter().map(|s| s.id).collect();
        let ids_u: BTreeSet<u64> = split.unlabeled.iter().map(|s| s.id).collect();
        prop_assert!(ids_l.is_disjoint(&ids_u));
        prop_assert_eq!(ids_l.len() + ids_u.len(), ds.len());
        prop_assert_eq!(ids_l.len(), split.labeled.len());
        for s in &split.labeled {
            prop_assert!(split.is_known(s.true_class.unwrap()));
        }
    }

    #[test]
    fn epoch_visits_every_unlabeled_sample_once(seed in any::<u64>(), b_u in 1usize..9) {
        let mut rng = Rng::new(seed, Stream::Data);
        let ds = generate_synthetic(&SyntheticSpec::new(4, 6, 4, 10.0), &mut rng).unwrap();
        let split = make_split(&ds, 0.5, 0.5, &mut rng).unwrap();
        let mut sampler = BatchSampler::new(&split, 2, b_u).unwrap();
        let mut aug = Rng::new(seed, Stream::Augment);
        sampler.start_epoch(&mut rng);
        let mut seen = Vec::new();
        while let Some((l, u)) = sampler.sample_batches(&split, &mut rng, &mut aug, &AugmentConfig::default()) {
            for batch in [&l, &u] {
                prop_assert_eq!(batch.len() % 2, 0);
                for pair in batch.views.chunks(2) {
                    prop_assert_eq!(pair[0].sample_index, pair[1].sample_index);
                    prop_assert_eq!((pair[0].view, pair[1].view), (0, 1));
                }
            }
            seen.extend(u.views.iter().filter(|v| v.view == 0).map(|v| v.sample_index));
        }
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..split.unlabeled.len()).collect::<Vec<_>>());
    }

    #[test]
    fn loss_is_view_permutation_invariant(seed in any::<u64>(), n in 4usize..12) {
        let mut rng = Rng::new(seed, Stream::Theory);
        let z = unit_rows(&mut rng, n, 5);
        let groups: Vec<usize> = (0..n).map(|i| i / 2).collect();
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let rows: Vec<Vec<f64>> = order.iter().map(|&i| z.row(i).to_vec()).collect();
        let permuted = Matrix::from_rows(&rows).unwrap();
        let permuted_groups: Vec<usize> = order.iter().map(|&i| groups[i]).collect();
        let a = grouped_contrastive_loss(&z, &groups, 0.4).unwrap();
        let b = grouped_contrastive_loss(&permuted, &permuted_groups, 0.4).unwrap();
        prop_assert!((a.value - b.value).abs() <= 1e-12 * a.value.abs().max(1.0));
        for (k, &i) in order.iter().enumerate() {
            for (x, y) in a.grad.row(i).iter().zip(b.grad.row(k)) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn uniformity_term_bounded_by_hardest_negative(seed in any::<u64>(), n in 3usize..10, tau in 0.05f64..1.0) {
        let mut rng = Rng::new(seed, Stream::Theory);
        let z = unit_rows(&mut rng, n, 4);
        let mut groups: Vec<usize> = (0..n).map(|_| rng.below(3)).collect();
        groups[1] = groups[0];
        let sets = build_sets_grouped(&groups, 0);
        let (loss, _) = per_sample_loss(&z, &sets, tau).unwrap();
        let (la, lb) = decompose_alignment(&z, &sets, tau).unwrap();
        let hardest = sets.negatives.iter().map(|&j| dot(z.row(0), z.row(j))).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lb >= hardest / tau - 1e-12);
        prop_assert!((loss - (la + lb)).abs() <= 1e-12);
    }

    #[test]
    fn closer_negative_never_lowers_loss(seed in any::<u64>(), step in 0.01f64..0.5) {
        let mut rng = Rng::new(seed, Stream::Theory);
        let n = 5;
        let mut z = unit_rows(&mut rng, n, 3);
        let groups = vec![0, 0, 1, 2, 3];
        let sets = build_sets_grouped(&groups, 0);
        let (before, _) = per_sample_loss(&z, &sets, 0.5).unwrap();
        // rotate negative 2 toward the anchor
        let anchor = z.row(0).to_vec();
        let moved: Vec<f64> = z.row(2).iter().zip(&anchor).map(|(x, a)| x + step * (a - x)).collect();
        prop_assume!(l2_norm(&moved) > 1e-6);
        let moved = l2_normalize(&moved).unwrap();
        prop_assume!(dot(&moved, &anchor) >= dot(z.row(2), &anchor));
        z.row_mut(2).copy_from_slice(&moved);
        let (after, _) = per_sample_loss(&z, &sets, 0.5).unwrap();
        prop_assert!(after >= before - 1e-12);
    }

    #[test]
    fn gate_partitions_and_grows_as_p_falls(seed in any::<u64>(), p in 0f64..100.0, q in 0f64..100.0) {
        let mut rng = Rng::new(seed, Stream::Theory);
        let store = PrototypeStore::random(2, 4, 3, &mut rng).unwrap();
        let labeled = unit_rows(&mut rng, 10, 3);
        let unlabeled = unit_rows(&mut rng, 12, 3);
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        let gate_at = |p| {
            let t = calibrate_threshold(&labeled, &store, p).unwrap();
            ood_gate(&unlabeled, &store, t, GateMode::PerView)
        };
        let g_lo = gate_at(lo);
        let g_hi = gate_at(hi);
        for g in [&g_lo, &g_hi] {
            let mut all: Vec<usize> = g.novel_view_ids.iter().chain(&g.rejected_view_ids).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..12).collect::<Vec<_>>());
        }
        let hi_set: BTreeSet<usize> = g_hi.novel_view_ids.iter().copied().collect();
        let lo_set: BTreeSet<usize> = g_lo.novel_view_ids.iter().copied().collect();
        prop_assert!(hi_set.is_subset(&lo_set));
    }

    #[test]
    fn updates_keep_unit_rows_and_respect_case_split(seed in any::<u64>(), rounds in 1usize..30, gamma in 0f64..0.99) {
        let mut rng = Rng::new(seed, Stream::Theory);
        let mut store = PrototypeStore::random(2, 5, 4, &mut rng).unwrap();
        for _ in 0..rounds {
            let labeled = unit_rows(&mut rng, 4, 4);
            let labels: Vec<usize> = (0..4).map(|_| rng.below(2)).collect();
            let unlabeled = unit_rows(&mut rng, 6, 4);
            let gated: Vec<usize> = (0..6).filter(|_| rng.uniform() < 0.5).collect();

            let before = store.clone();
            let empty = Matrix::zeros(0, 4);
            update_prototypes(&mut store, &empty, &[], &unlabeled, &gated, gamma).unwrap();
            for c in store.known_ids() {
                prop_assert_eq!(store.row(c), before.row(c));
            }
            let before = store.clone();
            update_prototypes(&mut store, &labeled, &labels, &empty, &[], gamma).unwrap();
            for c in store.novel_ids() {
                prop_assert_eq!(store.row(c), before.row(c));
            }
            for c in 0..store.n_classes() {
                prop_assert!((l2_norm(store.row(c)) - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn pseudo_label_survives_monotone_transforms(seed in any::<u64>()) {
        let mut rng = Rng::new(seed, Stream::Theory);
        let store = PrototypeStore::random(2, 6, 5, &mut rng).unwrap();
        let z = rng.unit_vector(5);
        let label = pseudo_label(&z, &store, Restrict::All).unwrap();
        let transformed: Vec<f64> = store.scores(&z).iter().map(|s| (3.0 * s).exp() + 7.0).collect();
        let best = transformed
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
            .0;
        prop_assert_eq!(label, best);
    }

    #[test]
    fn accuracies_bounded_and_novel_relabeling_invariant(
        seed in any::<u64>(),
        n in 1usize..60,
    ) {
        let mut rng = Rng::new(seed, Stream::Theory);
        let n_known = 3;
        let truth: Vec<usize> = (0..n).map(|_| rng.below(6)).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.below(8)).collect();
        let a = accuracy_triple(&preds, &truth, n_known, OverallMatching::Free).unwrap();
        for x in [a.all, a.novel, a.seen] {
            prop_assert!((0.0..=1.0).contains(&x));
        }
        // swap novel prediction ids 5 and 7
        let relabeled: Vec<usize> = preds.iter().map(|&p| match p { 5 => 7, 7 => 5, p => p }).collect();
        let b = accuracy_triple(&relabeled, &truth, n_known, OverallMatching::Free).unwrap();
        prop_assert_eq!(a.novel, b.novel);
        prop_assert_eq!(a.all, b.all);
        prop_assert_eq!(a.seen, b.seen);
    }
}
