mod common;

use common::{brute_prf, brute_spans, random_tags};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xeroalign_core::metrics::{bio_spans, span_f1};

#[test]
fn span_decoding_matches_interval_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let len = rng.random_range(0..12);
        let tags = random_tags(&mut rng, len);
        let fast: std::collections::HashSet<_> =
            bio_spans(&tags).into_iter().map(|s| (s.label, s.start, s.end)).collect();
        assert_eq!(fast, brute_spans(&tags), "{tags:?}");
    }
}

#[test]
fn span_f1_matches_brute_force_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..1000 {
        let n = rng.random_range(1..5);
        let (mut gold, mut pred) = (Vec::new(), Vec::new());
        for _ in 0..n {
            let len = rng.random_range(1..10);
            gold.push(random_tags(&mut rng, len));
            pred.push(random_tags(&mut rng, len));
        }
        assert_eq!(span_f1(&gold, &pred).unwrap(), brute_prf(&gold, &pred));
    }
}

#[test]
fn half_recall_hand_case() {
    let s = |x: &str| x.split(' ').map(String::from).collect::<Vec<_>>();
    let gold = vec![s("B-time I-time O B-place")];
    let pred = vec![s("B-time I-time O O")];
    let r = span_f1(&gold, &pred).unwrap();
    assert_eq!((r.precision, r.recall), (1.0, 0.5));
    assert!((r.f1 - 2.0 / 3.0).abs() < 1e-15);
}
