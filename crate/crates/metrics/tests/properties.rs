use proptest::prelude::*;
use radreport_metrics::{bleu, cider, roc_auc, rouge_l};

fn sentence() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e", "."]), 1..10)
        .prop_map(|v| v.into_iter().map(str::to_owned).collect())
}

fn corpus() -> impl Strategy<Value = (Vec<Vec<String>>, Vec<Vec<Vec<String>>>)> {
    prop::collection::vec((sentence(), sentence()), 2..8).prop_map(|pairs| {
        let (c, r): (Vec<_>, Vec<_>) = pairs.into_iter().map(|(c, r)| (c, vec![r])).unzip();
        (c, r)
    })
}

proptest! {
    #[test]
    fn metrics_invariant_to_pair_order((c, r) in corpus(), rot in 0usize..8) {
        let k = rot % c.len();
        let mut c2 = c.clone();
        let mut r2 = r.clone();
        c2.rotate_left(k);
        r2.rotate_left(k);
        let b1 = bleu(&c, &r, 4).unwrap();
        let b2 = bleu(&c2, &r2, 4).unwrap();
        for (x, y) in b1.scores.iter().zip(&b2.scores) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert!((rouge_l(&c, &r).unwrap() - rouge_l(&c2, &r2).unwrap()).abs() < 1e-12);
        prop_assert!((cider(&c, &r).unwrap() - cider(&c2, &r2).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn appending_matching_token_never_lowers_bleu1(reference in sentence(), cut in 0usize..10) {
        let cut = cut.min(reference.len() - 1);
        let short = reference[..cut].to_vec();
        let longer = reference[..cut + 1].to_vec();
        let refs = vec![vec![reference.clone()]];
        let a = bleu(&[short], &refs, 1).unwrap().get(1);
        let b = bleu(&[longer], &refs, 1).unwrap().get(1);
        prop_assert!(b >= a);
    }

    #[test]
    fn auc_stays_in_unit_interval(scores in prop::collection::vec(0.0f64..1.0, 4..40), seed in 0u64..1000) {
        let labels: Vec<bool> = (0..scores.len()).map(|i| (i as u64 * 7 + seed) % 3 == 0).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let auc = roc_auc(&scores, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&auc));
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        prop_assert!((auc + roc_auc(&scores, &flipped).unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn uninformative_scores_give_half() {
    // Deterministic pseudo-random labels independent of scores.
    let n = 20_000;
    let mut state = 0x9e37_79b9_7f4a_7c15u64;
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        state
    };
    let scores: Vec<f64> = (0..n).map(|_| (next() % 1_000_000) as f64).collect();
    let labels: Vec<bool> = (0..n).map(|_| next() % 2 == 0).collect();
    let auc = roc_auc(&scores, &labels).unwrap();
    assert!((auc - 0.5).abs() < 0.02, "auc {auc}");
}
