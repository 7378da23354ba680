//! Exact-search equivalence against the naive oracle, plus the retrieval
//! properties that only make sense over whole corpora.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use xrag_core::oracle::{oracle_excluded, oracle_similarity, oracle_topk, FixedLinearEncoder};
use xrag_core::retrieval::{
    build_kb, similarity, topk, Exclusion, SimilarityMetric,
};
use xrag_core::series::{minmax_scale, WindowPair};
use xrag_core::toy::{gen_toy_corpus, is_relevant_source, ToyCorpusSpec};

fn random_instance(rng: &mut ChaCha8Rng, max_n: usize) -> (Vec<WindowPair>, WindowPair) {
    let t = if rng.random_bool(0.5) { 16 } else { 32 };
    let l = 8;
    let n = rng.random_range(20..=max_n);
    let n_sources = rng.random_range(1..=4);
    let mut entries = Vec::with_capacity(n);
    for j in 0..n {
        let source = format!("src{}", rng.random_range(0..n_sources));
        let constant = rng.random_bool(0.03);
        let base: f64 = rng.random_range(-5.0..5.0);
        let x: Vec<f64> = (0..t)
            .map(|_| {
                if constant {
                    base
                } else {
                    rng.random_range(-5.0..5.0)
                }
            })
            .collect();
        let y: Vec<f64> = (0..l).map(|_| rng.random_range(-5.0..5.0)).collect();
        entries.push(WindowPair {
            x,
            y,
            source_id: source,
            start_index: j * 3,
        });
    }
    let q_source = format!("src{}", rng.random_range(0..n_sources));
    let query = WindowPair {
        x: (0..t).map(|_| rng.random_range(-5.0..5.0)).collect(),
        y: (0..l).map(|_| rng.random_range(-5.0..5.0)).collect(),
        source_id: q_source,
        start_index: rng.random_range(0..n * 3),
    };
    (entries, query)
}

fn metric_for(i: usize, t: usize) -> SimilarityMetric {
    match i % 4 {
        0 => SimilarityMetric::CosineData,
        1 => SimilarityMetric::EuclideanData,
        2 => SimilarityMetric::CorrelationData,
        _ => SimilarityMetric::EuclideanLatent(Arc::new(FixedLinearEncoder::seeded(t, 12, 99))),
    }
}

#[test]
fn topk_matches_oracle_on_200_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let ks = [1usize, 5, 15];
    let mut checked = 0;
    while checked < 200 {
        let (entries, query) = random_instance(&mut rng, 2000);
        let metric = metric_for(checked, query.x.len());
        let k = ks[checked % ks.len()];

        let admissible = entries
            .iter()
            .filter(|e| !oracle_excluded(e, &query, query.x.len(), query.y.len()))
            .count();
        if admissible < k {
            continue;
        }

        let kb = build_kb(entries.clone()).unwrap();
        let got = topk(&kb, &query, k, &metric, Exclusion::SameSourceOverlap).unwrap();
        let want = oracle_topk(&entries, &query, k, &metric, true);

        assert_eq!(got.items.len(), want.len());
        for (item, (j, score)) in got.items.iter().zip(&want) {
            assert_eq!(item.kb_index, *j, "index mismatch ({:?}, k={k})", metric);
            assert_eq!(item.score.to_bits(), score.to_bits(), "score mismatch ({:?})", metric);
        }
        checked += 1;
    }
}

#[test]
fn topk_k_is_prefix_of_k_plus_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..40 {
        let (entries, query) = random_instance(&mut rng, 300);
        let metric = metric_for(i, query.x.len());
        let kb = build_kb(entries).unwrap();
        let admissible = kb.admissible(&query, Exclusion::SameSourceOverlap).len();
        if admissible < 2 {
            continue;
        }
        let max_k = admissible.min(20);
        for k in 1..max_k {
            let small = topk(&kb, &query, k, &metric, Exclusion::SameSourceOverlap).unwrap();
            let large = topk(&kb, &query, k + 1, &metric, Exclusion::SameSourceOverlap).unwrap();
            for (a, b) in small.items.iter().zip(&large.items) {
                assert_eq!(a.kb_index, b.kb_index);
            }
        }
    }
}

#[test]
fn exclusion_soundness_over_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for i in 0..60 {
        let (entries, query) = random_instance(&mut rng, 400);
        let metric = metric_for(i, query.x.len());
        let kb = build_kb(entries).unwrap();
        let admissible = kb.admissible(&query, Exclusion::SameSourceOverlap).len();
        if admissible == 0 {
            continue;
        }
        let k = admissible.min(10);
        let got = topk(&kb, &query, k, &metric, Exclusion::SameSourceOverlap).unwrap();
        for item in &got.items {
            assert!(
                !oracle_excluded(&item.pair, &query, query.x.len(), query.y.len()),
                "leaked entry {} for query at {}",
                item.kb_index,
                query.start_index
            );
        }
    }
}

#[test]
fn similarity_agrees_with_oracle_pointwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for i in 0..200 {
        let n = rng.random_range(2..50);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let metric = metric_for(i, n);
        if metric.is_latent() {
            continue; // pointwise check on raw vectors is a data-space concern
        }
        let got = similarity(&metric, &a, &b).unwrap();
        let want = oracle_similarity(&metric, &a, &b);
        assert_eq!(got.to_bits(), want.to_bits());
    }
}

// --- toy-corpus retrieval facts -------------------------------------------

#[test]
fn single_family_kb_is_tightly_clustered() {
    let spec = ToyCorpusSpec {
        n_relevant_families: 1,
        n_irrelevant_families: 0,
        samples_per_family: 10,
        noise_sigma: 0.0,
        seed: 7,
        t: 64,
        l: 16,
    };
    let corpus = gen_toy_corpus(&spec).unwrap();
    assert_eq!(corpus.kb.len(), 10);
    for a in &corpus.kb {
        for b in &corpus.kb {
            let sa = minmax_scale(&a.x).values;
            let sb = minmax_scale(&b.x).values;
            let sim = oracle_similarity(&SimilarityMetric::CosineData, &sa, &sb);
            assert!(sim >= 0.99, "got {sim}");
        }
    }
}

#[test]
fn noiseless_test_query_has_perfect_neighbor() {
    let spec = ToyCorpusSpec {
        n_relevant_families: 3,
        n_irrelevant_families: 2,
        samples_per_family: 6,
        noise_sigma: 0.0,
        seed: 11,
        t: 64,
        l: 16,
    };
    let corpus = gen_toy_corpus(&spec).unwrap();
    for q in &corpus.test {
        let qs = minmax_scale(&q.x).values;
        let best = corpus
            .kb
            .iter()
            .map(|e| {
                let es = minmax_scale(&e.x).values;
                oracle_similarity(&SimilarityMetric::CosineData, &qs, &es)
            })
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((best - 1.0).abs() <= 1e-9, "best neighbor {best}");
    }
}

#[test]
fn relevant_entries_outrank_irrelevant_under_cosine() {
    let spec = ToyCorpusSpec {
        n_relevant_families: 1,
        n_irrelevant_families: 1,
        samples_per_family: 5,
        noise_sigma: 0.0,
        seed: 3,
        t: 64,
        l: 16,
    };
    let corpus = gen_toy_corpus(&spec).unwrap();
    let kb = build_kb(corpus.kb.clone()).unwrap();
    assert_eq!(kb.len(), 10);
    for q in &corpus.test {
        let r = topk(&kb, q, 10, &SimilarityMetric::CosineData, Exclusion::SameSourceOverlap)
            .unwrap();
        for item in &r.items[..5] {
            assert!(
                is_relevant_source(&item.pair.source_id),
                "rank {} held by {}",
                item.kb_index,
                item.pair.source_id
            );
        }
    }
}

#[test]
fn kb_row_count_matches_generator() {
    let spec = ToyCorpusSpec {
        n_relevant_families: 3,
        n_irrelevant_families: 4,
        samples_per_family: 12,
        ..ToyCorpusSpec::default()
    };
    let corpus = gen_toy_corpus(&spec).unwrap();
    let kb = build_kb(corpus.kb).unwrap();
    assert_eq!(kb.len(), 12 * 7);
}
