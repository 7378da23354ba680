//! Exact top-k similarity search over a knowledge base of window pairs.
//!
//! Four metrics are supported, all reported as "larger = more similar"
//! (distances are negated) so the selection logic is metric-agnostic.
//! Search is deliberately brute force: at desk scale it is fast, and
//! exactness is what makes the oracle tests meaningful.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use crate::error::{Result, XragError};
use crate::series::{minmax_scale, WindowPair};

/// Guard added to the cosine denominator.
pub const COSINE_EPS: f64 = 1e-12;

const INDEX_MAGIC: &[u8; 4] = b"XRAG";
const INDEX_VERSION: u32 = 1;

/// Frozen encoder used for latent-space retrieval.
pub trait RetrievalEncoder: Send + Sync {
    /// Expected input window length.
    fn input_len(&self) -> usize;
    /// Embedding dimensionality.
    fn dim(&self) -> usize;
    /// Encodes a min-max-scaled window.
    fn encode_scaled(&self, x_scaled: &[f64]) -> Vec<f64>;
}

/// Similarity metric. Latent-space search carries its frozen encoder, so a
/// latent metric without an encoder cannot be constructed.
#[derive(Clone)]
pub enum SimilarityMetric {
    CosineData,
    EuclideanData,
    CorrelationData,
    EuclideanLatent(Arc<dyn RetrievalEncoder>),
}

impl SimilarityMetric {
    pub fn name(&self) -> &'static str {
        match self {
            SimilarityMetric::CosineData => "cosine",
            SimilarityMetric::EuclideanData => "euclidean",
            SimilarityMetric::CorrelationData => "correlation",
            SimilarityMetric::EuclideanLatent(_) => "latent",
        }
    }

    pub fn is_latent(&self) -> bool {
        matches!(self, SimilarityMetric::EuclideanLatent(_))
    }
}

impl std::fmt::Debug for SimilarityMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Similarity between two equal-length vectors. Data-space metrics expect
/// min-max-scaled inputs; the latent metric expects encoder embeddings.
pub fn similarity(metric: &SimilarityMetric, a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(XragError::LengthMismatch {
            expected: a.len(),
            got: b.len(),
            context: "similarity",
        });
    }
    Ok(match metric {
        SimilarityMetric::CosineData => {
            let mut dot = 0.0;
            for i in 0..a.len() {
                dot += a[i] * b[i];
            }
            let mut na = 0.0;
            for &v in a {
                na += v * v;
            }
            let mut nb = 0.0;
            for &v in b {
                nb += v * v;
            }
            dot / (na.sqrt() * nb.sqrt() + COSINE_EPS)
        }
        SimilarityMetric::EuclideanData | SimilarityMetric::EuclideanLatent(_) => {
            let mut ss = 0.0;
            for i in 0..a.len() {
                let d = a[i] - b[i];
                ss += d * d;
            }
            -ss.sqrt()
        }
        SimilarityMetric::CorrelationData => {
            let n = a.len() as f64;
            let mean_a = a.iter().sum::<f64>() / n;
            let mean_b = b.iter().sum::<f64>() / n;
            let mut cov = 0.0;
            let mut ssa = 0.0;
            let mut ssb = 0.0;
            for i in 0..a.len() {
                let da = a[i] - mean_a;
                let db = b[i] - mean_b;
                cov += da * db;
                ssa += da * da;
                ssb += db * db;
            }
            if ssa == 0.0 || ssb == 0.0 {
                0.0
            } else {
                cov / (ssa.sqrt() * ssb.sqrt())
            }
        }
    })
}

/// Leakage-exclusion rule applied at query time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exclusion {
    /// No entries removed (distinct datasets, timing runs).
    None,
    /// Removes same-source entries whose input window overlaps
    /// [query.start − (T+L), query.start + (T+L)).
    SameSourceOverlap,
}

/// One retrieved entry with its knowledge-base position and score.
#[derive(Clone, Debug)]
pub struct RetrievedItem {
    pub kb_index: usize,
    pub score: f64,
    pub pair: WindowPair,
}

/// The top-k retrieved pairs for one query, sorted by descending relevance
/// with ties broken by ascending knowledge-base index.
#[derive(Clone, Debug)]
pub struct RetrievedSet {
    pub items: Vec<RetrievedItem>,
    pub query_id: String,
}

impl RetrievedSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// The retrieval corpus with precomputed scaled inputs.
#[derive(Debug)]
pub struct KnowledgeBase {
    entries: Vec<WindowPair>,
    /// n × T, row j = min-max-scaled entries[j].x.
    scaled_inputs: Vec<f64>,
    t: usize,
    l: usize,
    latent_cache: OnceLock<Vec<f64>>,
    latent_dim: OnceLock<usize>,
}

impl KnowledgeBase {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn window_len(&self) -> usize {
        self.t
    }

    pub fn horizon_len(&self) -> usize {
        self.l
    }

    pub fn entries(&self) -> &[WindowPair] {
        &self.entries
    }

    pub fn entry(&self, j: usize) -> &WindowPair {
        &self.entries[j]
    }

    pub fn scaled_input(&self, j: usize) -> &[f64] {
        &self.scaled_inputs[j * self.t..(j + 1) * self.t]
    }

    /// Indices that survive the exclusion rule for a query.
    pub fn admissible(&self, query: &WindowPair, exclusion: Exclusion) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&j| !excluded(&self.entries[j], query, self.t, self.l, exclusion))
            .collect()
    }

    /// Embeddings of every entry under `encoder`, computed once and cached.
    fn latent_matrix(&self, encoder: &Arc<dyn RetrievalEncoder>) -> Result<&[f64]> {
        let dim = *self.latent_dim.get_or_init(|| encoder.dim());
        if dim != encoder.dim() {
            return Err(XragError::InvalidConfig(format!(
                "knowledge base latent cache built for dim {dim}, encoder has dim {}",
                encoder.dim()
            )));
        }
        Ok(self.latent_cache.get_or_init(|| {
            let mut out = Vec::with_capacity(self.entries.len() * dim);
            for j in 0..self.entries.len() {
                out.extend(encoder.encode_scaled(self.scaled_input(j)));
            }
            out
        }))
    }
}

fn excluded(entry: &WindowPair, query: &WindowPair, t: usize, l: usize, rule: Exclusion) -> bool {
    match rule {
        Exclusion::None => false,
        Exclusion::SameSourceOverlap => {
            if entry.source_id != query.source_id {
                return false;
            }
            let span = (t + l) as i64;
            let e_start = entry.start_index as i64;
            let q_start = query.start_index as i64;
            // Entry x-window [e_start, e_start+T) vs [q_start−(T+L), q_start+(T+L)).
            e_start < q_start + span && e_start + t as i64 > q_start - span
        }
    }
}

/// Builds the knowledge base, precomputing scaled inputs. Entry order is
/// preserved so tie-breaking by index is stable.
pub fn build_kb(pairs: Vec<WindowPair>) -> Result<KnowledgeBase> {
    if pairs.is_empty() {
        return Err(XragError::EmptyInput("knowledge base needs at least one pair"));
    }
    let t = pairs[0].x.len();
    let l = pairs[0].y.len();
    let mut scaled_inputs = Vec::with_capacity(pairs.len() * t);
    for p in &pairs {
        if p.x.len() != t || p.y.len() != l {
            return Err(XragError::WindowLengthMismatch {
                expected_t: t,
                expected_l: l,
                got_t: p.x.len(),
                got_l: p.y.len(),
            });
        }
        scaled_inputs.extend(minmax_scale(&p.x).values);
    }
    Ok(KnowledgeBase {
        entries: pairs,
        scaled_inputs,
        t,
        l,
        latent_cache: OnceLock::new(),
        latent_dim: OnceLock::new(),
    })
}

/// Deterministic embedding of a raw window for latent-space retrieval.
pub fn encode_for_retrieval(encoder: &dyn RetrievalEncoder, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != encoder.input_len() {
        return Err(XragError::LengthMismatch {
            expected: encoder.input_len(),
            got: x.len(),
            context: "encode_for_retrieval",
        });
    }
    let scaled = minmax_scale(x);
    let emb = encoder.encode_scaled(&scaled.values);
    if emb.len() != encoder.dim() {
        return Err(XragError::LengthMismatch {
            expected: encoder.dim(),
            got: emb.len(),
            context: "encoder output",
        });
    }
    Ok(emb)
}

/// Exact top-k retrieval.
pub fn topk(
    kb: &KnowledgeBase,
    query: &WindowPair,
    k: usize,
    metric: &SimilarityMetric,
    exclusion: Exclusion,
) -> Result<RetrievedSet> {
    if kb.is_empty() {
        return Err(XragError::EmptyInput("topk over empty knowledge base"));
    }
    if query.x.len() != kb.t {
        return Err(XragError::LengthMismatch {
            expected: kb.t,
            got: query.x.len(),
            context: "query window",
        });
    }
    let admissible = kb.admissible(query, exclusion);
    if k == 0 || k > admissible.len() {
        return Err(XragError::KTooLarge {
            k,
            admissible: admissible.len(),
        });
    }

    let mut scored: Vec<(usize, f64)> = match metric {
        SimilarityMetric::EuclideanLatent(encoder) => {
            let dim = encoder.dim();
            let kb_emb = kb.latent_matrix(encoder)?;
            let q_emb = encode_for_retrieval(encoder.as_ref(), &query.x)?;
            admissible
                .iter()
                .map(|&j| {
                    let e = &kb_emb[j * dim..(j + 1) * dim];
                    similarity(metric, &q_emb, e).map(|s| (j, s))
                })
                .collect::<Result<_>>()?
        }
        _ => {
            let q_scaled = minmax_scale(&query.x).values;
            admissible
                .iter()
                .map(|&j| similarity(metric, &q_scaled, kb.scaled_input(j)).map(|s| (j, s)))
                .collect::<Result<_>>()?
        }
    };

    scored.sort_unstable_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);

    Ok(RetrievedSet {
        items: scored
            .into_iter()
            .map(|(j, score)| RetrievedItem {
                kb_index: j,
                score,
                pair: kb.entries[j].clone(),
            })
            .collect(),
        query_id: format!("{}@{}", query.source_id, query.start_index),
    })
}

/// Wall-clock retrieval cost split into embedding and search phases.
#[derive(Clone, Debug)]
pub struct TimingReport {
    pub metric: String,
    pub embed_seconds: f64,
    pub search_seconds: f64,
}

impl TimingReport {
    pub fn total_seconds(&self) -> f64 {
        self.embed_seconds + self.search_seconds
    }
}

/// Times retrieval over a query batch. The embedding phase covers encoding
/// the whole knowledge base plus the queries and is exactly zero for
/// data-space metrics. Search always scans every entry and keeps the best
/// `k` per query.
pub fn time_retrieval(
    kb: &KnowledgeBase,
    queries: &[WindowPair],
    metric: &SimilarityMetric,
    k: usize,
) -> Result<TimingReport> {
    if queries.is_empty() {
        return Err(XragError::EmptyInput("time_retrieval needs queries"));
    }
    let k = k.min(kb.len());

    match metric {
        SimilarityMetric::EuclideanLatent(encoder) => {
            let dim = encoder.dim();
            let t0 = Instant::now();
            let mut kb_emb = Vec::with_capacity(kb.len() * dim);
            for j in 0..kb.len() {
                kb_emb.extend(encoder.encode_scaled(kb.scaled_input(j)));
            }
            let q_embs: Vec<Vec<f64>> = queries
                .iter()
                .map(|q| encode_for_retrieval(encoder.as_ref(), &q.x))
                .collect::<Result<_>>()?;
            let embed_seconds = t0.elapsed().as_secs_f64();

            let t1 = Instant::now();
            for q_emb in &q_embs {
                let mut scored: Vec<(usize, f64)> = (0..kb.len())
                    .map(|j| {
                        let e = &kb_emb[j * dim..(j + 1) * dim];
                        similarity(metric, q_emb, e).map(|s| (j, s))
                    })
                    .collect::<Result<_>>()?;
                scored.sort_unstable_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                scored.truncate(k);
                std::hint::black_box(&scored);
            }
            let search_seconds = t1.elapsed().as_secs_f64();
            Ok(TimingReport {
                metric: metric.name().to_string(),
                embed_seconds,
                search_seconds,
            })
        }
        _ => {
            let t1 = Instant::now();
            for q in queries {
                let q_scaled = minmax_scale(&q.x).values;
                let mut scored: Vec<(usize, f64)> = (0..kb.len())
                    .map(|j| similarity(metric, &q_scaled, kb.scaled_input(j)).map(|s| (j, s)))
                    .collect::<Result<_>>()?;
                scored.sort_unstable_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                scored.truncate(k);
                std::hint::black_box(&scored);
            }
            Ok(TimingReport {
                metric: metric.name().to_string(),
                embed_seconds: 0.0,
                search_seconds: t1.elapsed().as_secs_f64(),
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Persistence: magic "XRAG", version, dimensions, then little-endian f64
// payloads row-major.
// ---------------------------------------------------------------------------

pub fn save_index(kb: &KnowledgeBase, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(INDEX_MAGIC)?;
    out.write_all(&INDEX_VERSION.to_le_bytes())?;
    out.write_all(&(kb.entries.len() as u64).to_le_bytes())?;
    out.write_all(&(kb.t as u64).to_le_bytes())?;
    out.write_all(&(kb.l as u64).to_le_bytes())?;

    // Source-id table, then per-entry metadata.
    let mut sources: Vec<&str> = Vec::new();
    let mut source_of = Vec::with_capacity(kb.entries.len());
    for e in &kb.entries {
        let idx = match sources.iter().position(|s| *s == e.source_id) {
            Some(i) => i,
            None => {
                sources.push(&e.source_id);
                sources.len() - 1
            }
        };
        source_of.push(idx as u32);
    }
    out.write_all(&(sources.len() as u32).to_le_bytes())?;
    for s in &sources {
        let bytes = s.as_bytes();
        out.write_all(&(bytes.len() as u32).to_le_bytes())?;
        out.write_all(bytes)?;
    }
    for (e, src) in kb.entries.iter().zip(&source_of) {
        out.write_all(&src.to_le_bytes())?;
        out.write_all(&(e.start_index as u64).to_le_bytes())?;
    }

    for e in &kb.entries {
        for v in &e.x {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    for e in &kb.entries {
        for v in &e.y {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    for v in &kb.scaled_inputs {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_index(path: &Path) -> Result<KnowledgeBase> {
    let path_str = path.display().to_string();
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let corrupt = |detail: &str| XragError::Corrupt {
        path: path_str.clone(),
        detail: detail.to_string(),
    };

    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)
        .map_err(|_| corrupt("truncated header"))?;
    if &magic != INDEX_MAGIC {
        return Err(XragError::BadMagic {
            path: path_str,
            expected: "XRAG",
        });
    }
    let version = read_u32(&mut file).map_err(|_| corrupt("truncated version"))?;
    if version != INDEX_VERSION {
        return Err(XragError::BadVersion {
            path: path_str,
            found: version,
            supported: INDEX_VERSION,
        });
    }
    let n = read_u64(&mut file).map_err(|_| corrupt("truncated dims"))? as usize;
    let t = read_u64(&mut file).map_err(|_| corrupt("truncated dims"))? as usize;
    let l = read_u64(&mut file).map_err(|_| corrupt("truncated dims"))? as usize;
    if n == 0 || t == 0 || l == 0 || n > u32::MAX as usize {
        return Err(corrupt("implausible dimensions"));
    }

    let n_sources = read_u32(&mut file).map_err(|_| corrupt("truncated source table"))? as usize;
    let mut sources = Vec::with_capacity(n_sources);
    for _ in 0..n_sources {
        let len = read_u32(&mut file).map_err(|_| corrupt("truncated source table"))? as usize;
        let mut buf = vec![0u8; len];
        file.read_exact(&mut buf)
            .map_err(|_| corrupt("truncated source table"))?;
        sources.push(String::from_utf8(buf).map_err(|_| corrupt("source id not utf-8"))?);
    }

    let mut meta = Vec::with_capacity(n);
    for _ in 0..n {
        let src = read_u32(&mut file).map_err(|_| corrupt("truncated metadata"))? as usize;
        let start = read_u64(&mut file).map_err(|_| corrupt("truncated metadata"))? as usize;
        if src >= sources.len() {
            return Err(corrupt("source index out of range"));
        }
        meta.push((src, start));
    }

    let xs = read_f64s(&mut file, n * t).map_err(|_| corrupt("truncated x payload"))?;
    let ys = read_f64s(&mut file, n * l).map_err(|_| corrupt("truncated y payload"))?;
    let scaled_inputs = read_f64s(&mut file, n * t).map_err(|_| corrupt("truncated scaled payload"))?;

    let entries = meta
        .into_iter()
        .enumerate()
        .map(|(j, (src, start))| WindowPair {
            x: xs[j * t..(j + 1) * t].to_vec(),
            y: ys[j * l..(j + 1) * l].to_vec(),
            source_id: sources[src].clone(),
            start_index: start,
        })
        .collect();

    Ok(KnowledgeBase {
        entries,
        scaled_inputs,
        t,
        l,
        latent_cache: OnceLock::new(),
        latent_dim: OnceLock::new(),
    })
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, count: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; count * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(x: Vec<f64>, y: Vec<f64>, source: &str, start: usize) -> WindowPair {
        WindowPair {
            x,
            y,
            source_id: source.to_string(),
            start_index: start,
        }
    }

    #[test]
    fn cosine_self_similarity() {
        let v = vec![0.3, -1.0, 2.5, 0.7];
        let s = similarity(&SimilarityMetric::CosineData, &v, &v).unwrap();
        assert!((s - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn cosine_scale_invariance() {
        let a = vec![0.2, 0.9, 0.1, 0.5];
        let b = vec![0.8, 0.3, 0.6, 0.2];
        let b_scaled: Vec<f64> = b.iter().map(|v| v * 3.7).collect();
        let s1 = similarity(&SimilarityMetric::CosineData, &a, &b).unwrap();
        let s2 = similarity(&SimilarityMetric::CosineData, &a, &b_scaled).unwrap();
        assert!((s1 - s2).abs() <= 1e-9);
    }

    #[test]
    fn correlation_perfect_and_degenerate() {
        let s = similarity(
            &SimilarityMetric::CorrelationData,
            &[1.0, 2.0, 3.0],
            &[2.0, 4.0, 6.0],
        )
        .unwrap();
        assert!((s - 1.0).abs() <= 1e-9);
        let z = similarity(
            &SimilarityMetric::CorrelationData,
            &[1.0, 2.0, 3.0],
            &[5.0, 5.0, 5.0],
        )
        .unwrap();
        assert_eq!(z, 0.0);
    }

    #[test]
    fn metric_symmetry() {
        let a = vec![0.1, 0.7, 0.4, 0.9];
        let b = vec![0.6, 0.2, 0.8, 0.3];
        for metric in [
            SimilarityMetric::CosineData,
            SimilarityMetric::EuclideanData,
            SimilarityMetric::CorrelationData,
        ] {
            let ab = similarity(&metric, &a, &b).unwrap();
            let ba = similarity(&metric, &b, &a).unwrap();
            assert!((ab - ba).abs() <= 1e-12, "{metric:?}");
        }
    }

    #[test]
    fn length_mismatch_rejected() {
        let err = similarity(&SimilarityMetric::CosineData, &[1.0], &[1.0, 2.0]).unwrap_err();
        assert!(matches!(err, XragError::LengthMismatch { .. }));
    }

    #[test]
    fn build_kb_precomputes_scaled_rows() {
        let pairs = vec![
            pair(vec![0.0, 5.0, 10.0], vec![1.0], "a", 0),
            pair(vec![1.0, 2.0, 3.0], vec![2.0], "a", 10),
            pair(vec![-1.0, 0.0, 1.0], vec![3.0], "b", 0),
        ];
        let kb = build_kb(pairs.clone()).unwrap();
        assert_eq!(kb.len(), 3);
        for j in 0..3 {
            assert_eq!(kb.scaled_input(j), &minmax_scale(&pairs[j].x).values[..]);
        }
    }

    #[test]
    fn build_kb_rejects_mixed_lengths() {
        let pairs = vec![
            pair(vec![0.0, 1.0], vec![1.0], "a", 0),
            pair(vec![0.0, 1.0, 2.0], vec![1.0], "a", 5),
        ];
        assert!(matches!(
            build_kb(pairs).unwrap_err(),
            XragError::WindowLengthMismatch { .. }
        ));
    }

    #[test]
    fn exact_copy_ranks_first_with_unit_score() {
        let q = pair(vec![0.1, 0.9, 0.4, 0.6], vec![0.0], "query-src", 0);
        let pairs = vec![
            pair(vec![0.9, 0.1, 0.2, 0.3], vec![0.0], "kb", 0),
            pair(q.x.clone(), vec![0.0], "kb", 50),
            pair(vec![0.5, 0.5, 0.4, 0.5], vec![0.0], "kb", 100),
        ];
        let kb = build_kb(pairs).unwrap();
        let r = topk(&kb, &q, 1, &SimilarityMetric::CosineData, Exclusion::SameSourceOverlap)
            .unwrap();
        assert_eq!(r.items[0].kb_index, 1);
        assert!((r.items[0].score - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn exclusion_blocks_overlapping_same_source() {
        // T=2, L=1 → exclusion interval is ±3 around the query start.
        let pairs: Vec<WindowPair> = (0..10)
            .map(|s| pair(vec![s as f64, s as f64 + 1.0], vec![0.0], "src", s))
            .collect();
        let kb = build_kb(pairs).unwrap();
        let q = pair(vec![5.0, 6.0], vec![0.0], "src", 5);
        let admissible = kb.admissible(&q, Exclusion::SameSourceOverlap);
        // Excluded: entries with start in (5-3-2, 5+3) = starts 1..=7.
        assert_eq!(admissible, vec![0, 8, 9]);
        let r = topk(&kb, &q, 3, &SimilarityMetric::EuclideanData, Exclusion::SameSourceOverlap)
            .unwrap();
        for item in &r.items {
            assert!(admissible.contains(&item.kb_index));
        }
    }

    #[test]
    fn k_too_large_errors() {
        let kb = build_kb(vec![pair(vec![0.0, 1.0], vec![0.0], "a", 0)]).unwrap();
        let q = pair(vec![0.0, 1.0], vec![0.0], "b", 0);
        assert!(matches!(
            topk(&kb, &q, 2, &SimilarityMetric::CosineData, Exclusion::None).unwrap_err(),
            XragError::KTooLarge { .. }
        ));
    }

    #[test]
    fn index_roundtrip_bit_exact() {
        let pairs = vec![
            pair(vec![0.25, 5.5, -3.125], vec![1.0, 2.0], "alpha", 3),
            pair(vec![1e-9, 2e9, 0.1], vec![-7.0, 0.5], "beta", 42),
            pair(vec![0.0, 0.0, 0.0], vec![0.0, 0.0], "alpha", 99),
        ];
        let kb = build_kb(pairs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.xrag");
        save_index(&kb, &path).unwrap();
        let back = load_index(&path).unwrap();
        assert_eq!(back.entries(), kb.entries());
        assert_eq!(back.scaled_inputs, kb.scaled_inputs);
        assert_eq!((back.t, back.l), (kb.t, kb.l));
    }

    #[test]
    fn truncated_index_is_a_corruption_error() {
        let kb = build_kb(vec![pair(vec![1.0, 2.0], vec![3.0], "a", 0)]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.xrag");
        save_index(&kb, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(load_index(&path).unwrap_err(), XragError::Corrupt { .. }));
    }

    #[test]
    fn future_version_is_a_version_error() {
        let kb = build_kb(vec![pair(vec![1.0, 2.0], vec![3.0], "a", 0)]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.xrag");
        save_index(&kb, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_index(&path).unwrap_err(),
            XragError::BadVersion { found: 99, .. }
        ));
    }

    #[test]
    fn bad_magic_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.xrag");
        std::fs::write(&path, b"NOPExxxxxxxxxxxxxxxxxxxxxxxxxxx").unwrap();
        assert!(matches!(load_index(&path).unwrap_err(), XragError::BadMagic { .. }));
    }

    #[test]
    fn data_space_timing_has_zero_embed_component() {
        let pairs: Vec<WindowPair> = (0..100)
            .map(|j| pair(vec![j as f64, 1.0, 2.0, 3.0], vec![0.0], format!("s{j}").as_str(), 0))
            .collect();
        let kb = build_kb(pairs).unwrap();
        let queries = vec![pair(vec![1.0, 2.0, 3.0, 4.0], vec![0.0], "q", 0)];
        let rep = time_retrieval(&kb, &queries, &SimilarityMetric::CosineData, 5).unwrap();
        assert_eq!(rep.embed_seconds, 0.0);
        assert!(rep.search_seconds >= 0.0);
    }
}
