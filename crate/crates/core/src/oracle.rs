//! Naive reference implementations used by the test suites as independent
//! oracles. Everything here is written from the definitions, without
//! touching the optimized paths it is checked against. Not for production
//! use.

use crate::retrieval::{RetrievalEncoder, SimilarityMetric, COSINE_EPS};
use crate::series::{WindowPair, MINMAX_EPS};

/// Reference min-max scaling.
pub fn oracle_minmax(x: &[f64]) -> Vec<f64> {
    let min = x.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let max = x.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let denom = (max - min) + MINMAX_EPS;
    x.iter().map(|&v| (v - min) / denom).collect()
}

/// Reference similarity from the metric definitions.
pub fn oracle_similarity(metric: &SimilarityMetric, a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    match metric {
        SimilarityMetric::CosineData => {
            let mut dot = 0.0;
            for (x, y) in a.iter().zip(b) {
                dot += x * y;
            }
            let mut na = 0.0;
            for x in a {
                na += x * x;
            }
            let mut nb = 0.0;
            for y in b {
                nb += y * y;
            }
            dot / (na.sqrt() * nb.sqrt() + COSINE_EPS)
        }
        SimilarityMetric::EuclideanData | SimilarityMetric::EuclideanLatent(_) => {
            let mut ss = 0.0;
            for (x, y) in a.iter().zip(b) {
                let d = x - y;
                ss += d * d;
            }
            -ss.sqrt()
        }
        SimilarityMetric::CorrelationData => {
            let n = a.len() as f64;
            let ma = a.iter().sum::<f64>() / n;
            let mb = b.iter().sum::<f64>() / n;
            let mut cov = 0.0;
            let mut sa = 0.0;
            let mut sb = 0.0;
            for (x, y) in a.iter().zip(b) {
                let dx = x - ma;
                let dy = y - mb;
                cov += dx * dy;
                sa += dx * dx;
                sb += dy * dy;
            }
            if sa == 0.0 || sb == 0.0 {
                0.0
            } else {
                cov / (sa.sqrt() * sb.sqrt())
            }
        }
    }
}

/// Reference leakage rule: same source and input window overlapping
/// [query.start − (T+L), query.start + (T+L)).
pub fn oracle_excluded(entry: &WindowPair, query: &WindowPair, t: usize, l: usize) -> bool {
    if entry.source_id != query.source_id {
        return false;
    }
    let span = (t + l) as i64;
    let lo = query.start_index as i64 - span;
    let hi = query.start_index as i64 + span;
    let e0 = entry.start_index as i64;
    let e1 = e0 + t as i64;
    e0 < hi && e1 > lo
}

/// Reference top-k: score every admissible entry, sort descending with ties
/// broken by ascending index, take k.
pub fn oracle_topk(
    entries: &[WindowPair],
    query: &WindowPair,
    k: usize,
    metric: &SimilarityMetric,
    apply_exclusion: bool,
) -> Vec<(usize, f64)> {
    let t = query.x.len();
    let l = query.y.len();
    let q_repr: Vec<f64> = match metric {
        SimilarityMetric::EuclideanLatent(enc) => enc.encode_scaled(&oracle_minmax(&query.x)),
        _ => oracle_minmax(&query.x),
    };
    let mut scored: Vec<(usize, f64)> = Vec::new();
    for (j, e) in entries.iter().enumerate() {
        if apply_exclusion && oracle_excluded(e, query, t, l) {
            continue;
        }
        let e_repr: Vec<f64> = match metric {
            SimilarityMetric::EuclideanLatent(enc) => enc.encode_scaled(&oracle_minmax(&e.x)),
            _ => oracle_minmax(&e.x),
        };
        scored.push((j, oracle_similarity(metric, &q_repr, &e_repr)));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

/// Reference single-head scaled dot-product attention: query against k
/// key/value rows, returning the attended vector and the weights.
pub fn oracle_attention(
    q: &[f64],
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
    scale: f64,
) -> (Vec<f64>, Vec<f64>) {
    let logits: Vec<f64> = keys
        .iter()
        .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale)
        .collect();
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let weights: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let dim = values[0].len();
    let mut out = vec![0.0; dim];
    for (w, v) in weights.iter().zip(values) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    (out, weights)
}

/// Deterministic linear encoder for latent-metric tests.
pub struct FixedLinearEncoder {
    pub weights: Vec<f64>, // dim × input_len, row major
    pub input_len: usize,
    pub dim: usize,
}

impl FixedLinearEncoder {
    pub fn seeded(input_len: usize, dim: usize, seed: u64) -> Self {
        let mut rng = crate::tape::SplitMix64::new(seed);
        let weights = (0..dim * input_len)
            .map(|_| rng.next_f64() * 2.0 - 1.0)
            .collect();
        FixedLinearEncoder {
            weights,
            input_len,
            dim,
        }
    }
}

impl RetrievalEncoder for FixedLinearEncoder {
    fn input_len(&self) -> usize {
        self.input_len
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_scaled(&self, x_scaled: &[f64]) -> Vec<f64> {
        assert_eq!(x_scaled.len(), self.input_len);
        (0..self.dim)
            .map(|i| {
                self.weights[i * self.input_len..(i + 1) * self.input_len]
                    .iter()
                    .zip(x_scaled)
                    .map(|(w, v)| w * v)
                    .sum()
            })
            .collect()
    }
}
