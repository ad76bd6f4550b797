//! Metric oracles: brute-force NMI, oracle classifier bounds, diversity.

use protostyle::autodiff::Tensor;
use protostyle::config::Config;
use protostyle::error::Error;
use protostyle::metrics::*;
use protostyle::pipeline::Corpus;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// NMI straight from a dense contingency table.
fn nmi_oracle(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut table = vec![vec![0.0; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1.0;
    }
    let row: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let col: Vec<f64> = (0..kb).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let h = |m: &[f64]| -> f64 { m.iter().filter(|&&c| c > 0.0).map(|&c| -(c / n) * (c / n).ln()).sum() };
    let (ha, hb) = (h(&row), h(&col));
    if ha == 0.0 && hb == 0.0 {
        return 1.0;
    }
    let mut mi = 0.0;
    for i in 0..ka {
        for j in 0..kb {
            if table[i][j] > 0.0 {
                let p = table[i][j] / n;
                mi += p * (p / ((row[i] / n) * (col[j] / n))).ln();
            }
        }
    }
    2.0 * mi / (ha + hb)
}

/// Every labeling of `n` items over `k` labels, as base-k digits.
fn labelings(n: usize, k: usize) -> Vec<Vec<usize>> {
    (0..k.pow(n as u32))
        .map(|mut code| {
            (0..n)
                .map(|_| {
                    let d = code % k;
                    code /= k;
                    d
                })
                .collect()
        })
        .collect()
}

#[test]
fn nmi_matches_contingency_oracle_exhaustively_on_small_sets() {
    for n in 1..=5 {
        let all = labelings(n, 3);
        for a in &all {
            for b in &all {
                let got = nmi(a, b).unwrap();
                let want = nmi_oracle(a, b);
                assert!((got - want).abs() < 1e-10, "{a:?} {b:?}: {got} vs {want}");
            }
        }
    }
}

#[test]
fn nmi_matches_contingency_oracle_up_to_twenty_items() {
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    for n in 1..=20 {
        for _ in 0..500 {
            let (ka, kb) = (rng.random_range(1..=6), rng.random_range(1..=6));
            let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..ka)).collect();
            let b: Vec<usize> = (0..n).map(|_| rng.random_range(0..kb)).collect();
            assert!((nmi(&a, &b).unwrap() - nmi_oracle(&a, &b)).abs() < 1e-10, "{a:?} {b:?}");
        }
    }
}

#[test]
fn eight_item_contingency_case() {
    let a = [0, 0, 0, 1, 1, 1, 2, 2];
    let b = [0, 0, 1, 1, 1, 2, 2, 2];
    let got = nmi(&a, &b).unwrap();
    assert!((got - nmi_oracle(&a, &b)).abs() < 1e-10);
    assert!(got > 0.3 && got < 0.8);
    assert_eq!(nmi(&a, &a).unwrap(), 1.0);
    assert_eq!(nmi(&a, &[4; 8]).unwrap(), 0.0);
}

proptest! {
    #[test]
    fn nmi_is_a_symmetric_relabeling_invariant_score(
        pairs in prop::collection::vec((0usize..4, 0usize..5), 1..40),
        shift in 1usize..7,
    ) {
        let a: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let b: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let v = nmi(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!((v - nmi(&b, &a).unwrap()).abs() < 1e-12);
        let relabeled: Vec<usize> = a.iter().map(|x| (x + shift) * 3).collect();
        prop_assert!((v - nmi(&relabeled, &b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn adding_a_duplicate_stays_under_the_max_pairwise_distance(
        rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 6), 2..8),
        pick in 0usize..8,
    ) {
        let seqs: Vec<Tensor> = rows.iter().map(|r| Tensor::from_shape_vec((3, 2), r.clone()).unwrap()).collect();
        let refs: Vec<&Tensor> = seqs.iter().collect();
        let mut max = 0.0f64;
        for i in 0..refs.len() {
            for j in i + 1..refs.len() {
                max = max.max((refs[i] - refs[j]).mapv(|v| v * v).sum().sqrt());
            }
        }
        let mut with_dup = refs.clone();
        with_dup.push(refs[pick % refs.len()]);
        let d = diversity(&with_dup).unwrap();
        prop_assert!(d >= 0.0 && d <= max + 1e-12);
    }
}

#[test]
fn oracle_bounds_on_corpus_samples() {
    let corpus = Corpus::generate(&Config::default()).unwrap();
    let oracle = OracleClassifier::fit(&corpus.train, &corpus.eval, 4, 0.95).unwrap();
    assert!(oracle.eval_accuracy >= 0.95);

    let all: Vec<_> = corpus.train.iter().chain(&corpus.eval).collect();
    let frames: Vec<&Tensor> = all.iter().map(|s| &s.frames).collect();
    let labels: Vec<usize> = all.iter().map(|s| s.style_id).collect();
    assert!(oracle.accuracy(&frames, &labels) >= oracle.eval_accuracy - 0.02);

    // 200 samples scored against shuffled labels sit at chance
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let picks: Vec<usize> = (0..200).map(|_| rng.random_range(0..all.len())).collect();
    let frames: Vec<&Tensor> = picks.iter().map(|&i| &all[i].frames).collect();
    let mut labels: Vec<usize> = picks.iter().map(|&i| all[i].style_id).collect();
    labels.shuffle(&mut rng);
    let sra = oracle.accuracy(&frames, &labels);
    assert!((sra - 0.25).abs() <= 0.05, "shuffled-label sra {sra}");
}

#[test]
fn oracle_refuses_to_certify_below_its_gate() {
    let corpus = Corpus::generate(&Config::default()).unwrap();
    let err = OracleClassifier::fit(&corpus.train, &corpus.eval, 4, 1.01).unwrap_err();
    assert!(matches!(err, Error::UngatedOracle { .. }));
}

#[test]
fn content_score_prefers_the_true_program() {
    let corpus = Corpus::generate(&Config::default()).unwrap();
    let n_content = corpus.config.n_content;
    let mut right = 0;
    for s in &corpus.eval {
        let own = content_score(&s.frames, s.content_id);
        if (0..n_content).all(|c| c == s.content_id || content_score(&s.frames, c) < own) {
            right += 1;
        }
    }
    assert!(right as f64 >= 0.9 * corpus.eval.len() as f64);
    let frames: Vec<&Tensor> = corpus.eval.iter().map(|s| &s.frames).collect();
    let labels: Vec<usize> = corpus.eval.iter().map(|s| s.content_id).collect();
    assert!(content_accuracy(&frames, &labels, n_content) >= 0.9);
}
