//! Property tests for metric, agreement and split invariants.

use std::collections::BTreeMap;

use proptest::prelude::*;
use qualcode::agreement::{self, bucket, krippendorff_alpha, Bucket, LabelRating, Scale, GOLD_SOURCE};
use qualcode::corpus::{self, Dataset, QuoteCodePair, Split};
use qualcode::prompting::postprocess_code;
use qualcode::text_metrics::{lcs_len, rouge, tokenize_for_rouge};

fn phrase() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "fear", "Work", "of", "."]), 0..10)
        .prop_map(|w| w.join(" "))
}

proptest! {
    #[test]
    fn rouge_swaps_precision_and_recall(c in phrase(), r in phrase()) {
        let ab = rouge(&c, &r);
        let ba = rouge(&r, &c);
        for (x, y) in [(ab.rouge1, ba.rouge1), (ab.rouge2, ba.rouge2), (ab.rouge_l, ba.rouge_l)] {
            prop_assert_eq!(x.precision, y.recall);
            prop_assert_eq!(x.recall, y.precision);
            prop_assert!((x.f1 - y.f1).abs() < 1e-15);
            prop_assert!((0.0..=1.0).contains(&x.f1));
        }
    }

    #[test]
    fn lcs_bounded_by_unigram_overlap(c in phrase(), r in phrase()) {
        let s = rouge(&c, &r);
        prop_assert!(s.rouge_l.precision <= s.rouge1.precision + 1e-15);
        prop_assert!(s.rouge2.f1 <= s.rouge1.f1 + 1e-15);
        let (ct, rt) = (tokenize_for_rouge(&c), tokenize_for_rouge(&r));
        prop_assert!(lcs_len(&ct, &rt) <= ct.len().min(rt.len()));
    }

    #[test]
    fn identical_nonempty_text_scores_one(c in phrase()) {
        let s = rouge(&c, &c);
        let expect = if tokenize_for_rouge(&c).is_empty() { 0.0 } else { 1.0 };
        prop_assert_eq!(s.rouge1.f1, expect);
        prop_assert_eq!(s.rouge_l.f1, expect);
    }

    #[test]
    fn postprocess_is_idempotent(raw in "[ \\n\\t\"'.*A-Za-z:-]{0,40}") {
        if let Ok(once) = postprocess_code(&raw) {
            prop_assert_eq!(postprocess_code(&once).unwrap(), once);
        }
    }

    #[test]
    fn alpha_invariant_under_unit_and_rater_order(
        rows in prop::collection::vec(prop::collection::vec(prop::option::of(1u8..=5), 3), 4..20),
        rot in 0usize..3,
    ) {
        let units: Vec<Vec<Option<f64>>> = rows.iter().map(|r| r.iter().map(|v| v.map(f64::from)).collect()).collect();
        let Ok(base) = krippendorff_alpha(&units, Scale::Interval) else { return Ok(()); };
        let mut shuffled: Vec<Vec<Option<f64>>> = units.iter().rev().cloned().collect();
        for r in &mut shuffled {
            r.rotate_left(rot);
        }
        let other = krippendorff_alpha(&shuffled, Scale::Interval).unwrap();
        prop_assert!((base.alpha - other.alpha).abs() < 1e-12);
        prop_assert!(base.alpha <= 1.0 + 1e-12);
    }

    #[test]
    fn dgs_is_antisymmetric(pairs in prop::collection::vec((1u8..=5, 1u8..=5), 1..6)) {
        let mut ratings = Vec::new();
        for (i, (m, g)) in pairs.iter().enumerate() {
            let e = format!("e{i}");
            ratings.push(LabelRating { expert: e.clone(), sentence: "s".into(), source: "model:x".into(), value: *m });
            ratings.push(LabelRating { expert: e, sentence: "s".into(), source: GOLD_SOURCE.into(), value: *g });
        }
        let d = agreement::dgs(&ratings, "model:x", "s").unwrap();
        let flipped: Vec<LabelRating> = ratings
            .iter()
            .map(|r| LabelRating {
                source: if r.source == GOLD_SOURCE { "model:x".into() } else { GOLD_SOURCE.into() },
                ..r.clone()
            })
            .collect();
        prop_assert_eq!(agreement::dgs(&flipped, "model:x", "s").unwrap(), -d);
    }

    #[test]
    fn bucket_is_monotone(a in 1.0f64..=3.0, b in 1.0f64..=3.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let rank = |x: Bucket| Bucket::ALL.iter().position(|&y| y == x).unwrap();
        prop_assert!(rank(bucket(lo)) <= rank(bucket(hi)));
    }

    #[test]
    fn split_partitions_every_pair(sizes in prop::collection::vec(1usize..40, 1..6), seed in any::<u64>()) {
        let mut pairs = Vec::new();
        for (s, n) in sizes.iter().enumerate() {
            for i in 0..*n {
                pairs.push(QuoteCodePair {
                    id: format!("{s}-{i}"),
                    quote: format!("quote {s} {i}"),
                    code: "c".into(),
                    source: format!("src{s}"),
                    split: Split::Unassigned,
                });
            }
        }
        let total = pairs.len();
        let d = Dataset::new(pairs).unwrap();
        let out = corpus::split_dataset(&d, 0.1, seed).unwrap();
        let test = out.split_pairs(Split::Test);
        prop_assert_eq!(test.len() + out.split_pairs(Split::Train).len(), total);
        prop_assert_eq!(test.len(), (total as f64 * 0.1).round() as usize);
        let mut per: BTreeMap<&str, usize> = BTreeMap::new();
        for p in &test {
            *per.entry(p.source.as_str()).or_default() += 1;
        }
        for (s, n) in sizes.iter().enumerate() {
            let got = per.get(format!("src{s}").as_str()).copied().unwrap_or(0) as f64;
            prop_assert!((got - *n as f64 * 0.1).abs() < 1.0 + 1e-9);
        }
        prop_assert_eq!(corpus::split_dataset(&d, 0.1, seed).unwrap(), out);
    }
}
