//! Synthetic detector experiments shared by the property and acceptance
//! tests. Observations are concept sets embedded by the seeded embedder.

use fallsafe_core::detector::{Classification, Detector, EmbeddingCache, ScoreFn};
use fallsafe_core::embedding::{build_nominal_cache, embed_concepts};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn vocabulary(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

/// Uniform size in `1..=max_size`, then a uniform subset of that size.
pub fn draw(rng: &mut ChaCha8Rng, vocab: &[String], max_size: usize) -> Vec<String> {
    let size = rng.gen_range(1..=max_size.min(vocab.len()));
    vocab.choose_multiple(rng, size).cloned().collect()
}

/// More novel than known concepts, at least one novel.
pub fn draw_novel(rng: &mut ChaCha8Rng, vocab: &[String], novel: &[String]) -> Vec<String> {
    let k_novel = rng.gen_range(1..=2);
    let k_known = rng.gen_range(0..k_novel);
    let mut c: Vec<String> = novel.choose_multiple(rng, k_novel).cloned().collect();
    c.extend(vocab.choose_multiple(rng, k_known).cloned());
    c
}

/// Empirical false-positive rate on `holdout` fresh nominal draws, with τ
/// calibrated on `n_cache` draws from the same generator.
pub fn calibration_fpr(seed: u64, alpha: f64, n_cache: usize, holdout: usize, dim: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = vocabulary("scene-", 60);
    let rows: Vec<_> = (0..n_cache)
        .map(|_| embed_concepts(&draw(&mut rng, &vocab, 3), dim, seed).unwrap())
        .collect();
    let det = Detector::calibrate(EmbeddingCache::from_rows(&rows).unwrap(), ScoreFn::MaxCos, alpha).unwrap();
    let mut flagged = 0;
    for _ in 0..holdout {
        let e = embed_concepts(&draw(&mut rng, &vocab, 3), dim, seed).unwrap();
        if det.classify(&e).unwrap().1 == Classification::Anomaly {
            flagged += 1;
        }
    }
    flagged as f64 / holdout as f64
}

/// Fraction of novel-dominant observations flagged, over `vocabs` fresh
/// vocabularies with `per_vocab` trials each.
pub fn novel_flag_rate(vocabs: usize, per_vocab: usize, vocab_size: usize, dim: usize, alpha: f64) -> f64 {
    let mut flagged = 0;
    for v in 0..vocabs as u64 {
        let seed = 1000 + v;
        let vocab = vocabulary(&format!("v{v}-known-"), vocab_size);
        let novel = vocabulary(&format!("v{v}-novel-"), 50);
        let cache = build_nominal_cache(&vocab, 2, dim, seed, None).unwrap();
        let det = Detector::calibrate(cache, ScoreFn::MaxCos, alpha).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..per_vocab {
            let e = embed_concepts(&draw_novel(&mut rng, &vocab, &novel), dim, seed).unwrap();
            if det.classify(&e).unwrap().1 == Classification::Anomaly {
                flagged += 1;
            }
        }
    }
    flagged as f64 / (vocabs * per_vocab) as f64
}

/// Detector accuracy when the cache covers a `coverage` fraction of the
/// nominal vocabulary; tested on equal numbers of nominal and novel draws.
pub fn coverage_accuracy(coverage: f64, seed: u64) -> f64 {
    let dim = 128;
    let vocab = vocabulary(&format!("s{seed}-known-"), 20);
    let novel = vocabulary(&format!("s{seed}-novel-"), 20);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = vocab.clone();
    order.shuffle(&mut rng);
    let covered = &order[..((coverage * vocab.len() as f64).round() as usize).max(2)];
    let cache = build_nominal_cache(covered, 2, dim, seed, None).unwrap();
    let det = Detector::calibrate(cache, ScoreFn::MaxCos, 0.95).unwrap();
    let trials = 200;
    let mut correct = 0;
    for _ in 0..trials {
        let nominal = embed_concepts(&draw(&mut rng, &vocab, 2), dim, seed).unwrap();
        if det.classify(&nominal).unwrap().1 == Classification::Nominal {
            correct += 1;
        }
        let anomaly = embed_concepts(&draw_novel(&mut rng, &vocab, &novel), dim, seed).unwrap();
        if det.classify(&anomaly).unwrap().1 == Classification::Anomaly {
            correct += 1;
        }
    }
    correct as f64 / (2 * trials) as f64
}

/// Mean accuracy over seeds for each coverage level.
pub fn coverage_curve(levels: &[f64], seeds: u64) -> Vec<f64> {
    levels
        .iter()
        .map(|&c| (0..seeds).map(|s| coverage_accuracy(c, s)).sum::<f64>() / seeds as f64)
        .collect()
}

/// Pairwise count with ties at one half.
pub fn auroc_pairs(nominal: &[f64], anomaly: &[f64]) -> f64 {
    let mut twice = 0u64;
    for &a in anomaly {
        for &n in nominal {
            twice += if a > n {
                2
            } else if a == n {
                1
            } else {
                0
            };
        }
    }
    twice as f64 / (2.0 * (nominal.len() * anomaly.len()) as f64)
}
