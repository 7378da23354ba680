//! Zero-shot evaluation and the retrieval-scenario studies: k sweeps,
//! random retrieval, shrunken knowledge bases, cross-dataset transfer,
//! the fusion-component ablation grid and the λ sweep.
//!
//! Nothing in this module ever takes an optimizer step; every entry point
//! asserts that the global step counter did not move while it ran.

use std::collections::HashSet;

use rayon::prelude::*;

use crate::error::{Result, XragError};
use crate::fusion::{AblationMask, FrozenBackbone, FusionConfig, FusionModel, GateMode};
use crate::retrieval::{
    build_kb, similarity, topk, Exclusion, KnowledgeBase, RetrievedItem, RetrievedSet,
    SimilarityMetric,
};
use crate::series::{minmax_scale, Series, WindowPair};
use crate::tape::{derive_seed, SplitMix64};
use crate::toy::is_relevant_source;
use crate::train::{
    mae_loss, mse_loss, optimizer_step_count, pretrain_backbone, train_fusion, BackboneArch,
    TrainConfig,
};

/// How retrieved sets are assembled during evaluation.
#[derive(Clone, Debug)]
pub enum RetrievalMode {
    /// Exact top-k by similarity.
    TopK,
    /// k admissible entries drawn uniformly without replacement, seeded
    /// per query.
    Random { seed: u64 },
    /// Toy-corpus probe: the most similar relevant-family entries plus
    /// randomly drawn irrelevant-family entries.
    Mixed {
        n_relevant: usize,
        n_irrelevant: usize,
        seed: u64,
    },
}

impl RetrievalMode {
    pub fn name(&self) -> String {
        match self {
            RetrievalMode::TopK => "topk".into(),
            RetrievalMode::Random { seed } => format!("random:{seed}"),
            RetrievalMode::Mixed {
                n_relevant,
                n_irrelevant,
                seed,
            } => format!("mixed:{n_relevant}:{n_irrelevant}:{seed}"),
        }
    }
}

/// Everything one evaluation run needs beyond the model and the data.
#[derive(Clone, Debug)]
pub struct EvalSpec {
    pub target: String,
    pub kb_source: String,
    pub k: usize,
    pub metric: SimilarityMetric,
    pub lambda: f64,
    pub mask: AblationMask,
    pub retrieval: RetrievalMode,
    pub export_attention: bool,
}

impl EvalSpec {
    pub fn new(target: &str, kb_source: &str, k: usize, metric: SimilarityMetric) -> Self {
        EvalSpec {
            target: target.to_string(),
            kb_source: kb_source.to_string(),
            k,
            metric,
            lambda: 0.7,
            mask: AblationMask::FULL,
            retrieval: RetrievalMode::TopK,
            export_attention: false,
        }
    }
}

/// One exported cross-attention weight.
#[derive(Clone, Debug)]
pub struct AttentionRow {
    pub query_id: String,
    pub head: usize,
    pub rank: usize,
    pub kb_index: usize,
    pub weight: f64,
    pub score: f64,
}

/// Metrics and artifacts of one evaluation run.
#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub target: String,
    pub kb_source: String,
    pub metric_name: String,
    pub k: usize,
    pub lambda: f64,
    pub mask: String,
    pub retrieval: String,
    /// Mean over test queries of the per-query MSE on de-scaled values.
    pub mse: f64,
    pub mae: f64,
    pub n_queries: usize,
    pub attention: Vec<AttentionRow>,
    /// Per-query de-scaled point forecasts, aligned with `truths`.
    pub predictions: Vec<Vec<f64>>,
    pub truths: Vec<Vec<f64>>,
}

fn assemble_retrieved(
    kb: &KnowledgeBase,
    query: &WindowPair,
    query_idx: usize,
    spec: &EvalSpec,
) -> Result<RetrievedSet> {
    match &spec.retrieval {
        RetrievalMode::TopK => topk(kb, query, spec.k, &spec.metric, Exclusion::SameSourceOverlap),
        RetrievalMode::Random { seed } => {
            let admissible = kb.admissible(query, Exclusion::SameSourceOverlap);
            if spec.k > admissible.len() {
                return Err(XragError::KTooLarge {
                    k: spec.k,
                    admissible: admissible.len(),
                });
            }
            let mut pool = admissible;
            let mut rng = SplitMix64::new(derive_seed(&[*seed, query_idx as u64]));
            for i in 0..spec.k {
                let j = i + (rng.next_u64() as usize) % (pool.len() - i);
                pool.swap(i, j);
            }
            pool.truncate(spec.k);
            scored_set(kb, query, pool, spec)
        }
        RetrievalMode::Mixed {
            n_relevant,
            n_irrelevant,
            seed,
        } => {
            let admissible = kb.admissible(query, Exclusion::SameSourceOverlap);
            let relevant: Vec<usize> = admissible
                .iter()
                .copied()
                .filter(|&j| is_relevant_source(&kb.entry(j).source_id))
                .collect();
            let mut irrelevant: Vec<usize> = admissible
                .iter()
                .copied()
                .filter(|&j| !is_relevant_source(&kb.entry(j).source_id))
                .collect();
            if relevant.len() < *n_relevant || irrelevant.len() < *n_irrelevant {
                return Err(XragError::InvalidConfig(format!(
                    "mixed retrieval wants {n_relevant}+{n_irrelevant} items, knowledge base has {} relevant / {} irrelevant",
                    relevant.len(),
                    irrelevant.len()
                )));
            }
            // Most similar relevant entries, by the spec's metric.
            let q_scaled = minmax_scale(&query.x).values;
            let mut rel_scored: Vec<(usize, f64)> = relevant
                .iter()
                .map(|&j| similarity(&spec.metric, &q_scaled, kb.scaled_input(j)).map(|s| (j, s)))
                .collect::<Result<_>>()?;
            rel_scored.sort_unstable_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let mut chosen: Vec<usize> = rel_scored[..*n_relevant].iter().map(|(j, _)| *j).collect();
            // Random irrelevant entries.
            let mut rng = SplitMix64::new(derive_seed(&[*seed, query_idx as u64]));
            for i in 0..*n_irrelevant {
                let j = i + (rng.next_u64() as usize) % (irrelevant.len() - i);
                irrelevant.swap(i, j);
            }
            chosen.extend(&irrelevant[..*n_irrelevant]);
            scored_set(kb, query, chosen, spec)
        }
    }
}

/// Builds a RetrievedSet from chosen indices, scored and ordered like a
/// top-k result.
fn scored_set(
    kb: &KnowledgeBase,
    query: &WindowPair,
    indices: Vec<usize>,
    spec: &EvalSpec,
) -> Result<RetrievedSet> {
    let q_repr: Vec<f64> = match &spec.metric {
        SimilarityMetric::EuclideanLatent(enc) => {
            crate::retrieval::encode_for_retrieval(enc.as_ref(), &query.x)?
        }
        _ => minmax_scale(&query.x).values,
    };
    let mut scored: Vec<(usize, f64)> = indices
        .into_iter()
        .map(|j| {
            let repr: Vec<f64> = match &spec.metric {
                SimilarityMetric::EuclideanLatent(enc) => enc.encode_scaled(kb.scaled_input(j)),
                _ => kb.scaled_input(j).to_vec(),
            };
            similarity(&spec.metric, &q_repr, &repr).map(|s| (j, s))
        })
        .collect::<Result<_>>()?;
    scored.sort_unstable_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(RetrievedSet {
        items: scored
            .into_iter()
            .map(|(j, score)| RetrievedItem {
                kb_index: j,
                score,
                pair: kb.entry(j).clone(),
            })
            .collect(),
        query_id: format!("{}@{}", query.source_id, query.start_index),
    })
}

/// Evaluates a trained, frozen model on test queries. The knowledge base
/// must never contain a test window.
pub fn zero_shot_eval(
    model: &FusionModel,
    spec: &EvalSpec,
    kb: &KnowledgeBase,
    queries: &[WindowPair],
) -> Result<ExperimentReport> {
    if queries.is_empty() {
        return Err(XragError::EmptyInput("no test queries"));
    }
    let kb_identities: HashSet<(String, usize)> = kb
        .entries()
        .iter()
        .map(|e| (e.source_id.clone(), e.start_index))
        .collect();
    for q in queries {
        if kb_identities.contains(&(q.source_id.clone(), q.start_index)) {
            return Err(XragError::InvalidConfig(format!(
                "test query {}@{} also sits in the knowledge base",
                q.source_id, q.start_index
            )));
        }
    }

    let steps_before = optimizer_step_count();

    let mut cfg = model.config.clone();
    cfg.k = spec.k;
    cfg.lambda = spec.lambda;
    cfg.mask = spec.mask;

    struct PerQuery {
        mse: f64,
        mae: f64,
        prediction: Vec<f64>,
        truth: Vec<f64>,
        attention: Vec<AttentionRow>,
    }

    let results: Vec<PerQuery> = queries
        .par_iter()
        .enumerate()
        .map(|(qi, query)| -> Result<PerQuery> {
            let retrieved = if cfg.mask.needs_retrieval() {
                Some(assemble_retrieved(kb, query, qi, spec)?)
            } else {
                None
            };
            let forecast = model.predict_cfg(&cfg, query, retrieved.as_ref())?;
            let mut attention = Vec::new();
            if spec.export_attention {
                if let Some(rset) = &retrieved {
                    for (head, row) in forecast.attention.iter().enumerate() {
                        for (rank, weight) in row.iter().enumerate() {
                            attention.push(AttentionRow {
                                query_id: rset.query_id.clone(),
                                head,
                                rank,
                                kb_index: rset.items[rank].kb_index,
                                weight: *weight,
                                score: rset.items[rank].score,
                            });
                        }
                    }
                }
            }
            Ok(PerQuery {
                mse: mse_loss(&forecast.point, &query.y)?,
                mae: mae_loss(&forecast.point, &query.y)?,
                prediction: forecast.point,
                truth: query.y.clone(),
                attention,
            })
        })
        .collect::<Result<_>>()?;

    if optimizer_step_count() != steps_before {
        return Err(XragError::Other(
            "optimizer stepped during a zero-shot evaluation".into(),
        ));
    }

    let n = results.len();
    let mse = results.iter().map(|r| r.mse).sum::<f64>() / n as f64;
    let mae = results.iter().map(|r| r.mae).sum::<f64>() / n as f64;
    let mut attention = Vec::new();
    let mut predictions = Vec::with_capacity(n);
    let mut truths = Vec::with_capacity(n);
    for r in results {
        attention.extend(r.attention);
        predictions.push(r.prediction);
        truths.push(r.truth);
    }

    Ok(ExperimentReport {
        target: spec.target.clone(),
        kb_source: spec.kb_source.clone(),
        metric_name: spec.metric.name().to_string(),
        k: spec.k,
        lambda: spec.lambda,
        mask: spec.mask.to_string(),
        retrieval: spec.retrieval.name(),
        mse,
        mae,
        n_queries: n,
        attention,
        predictions,
        truths,
    })
}

/// One evaluation per k, same model, same knowledge base.
pub fn run_k_sweep(
    model: &FusionModel,
    spec: &EvalSpec,
    kb: &KnowledgeBase,
    queries: &[WindowPair],
    ks: &[usize],
) -> Result<Vec<(usize, ExperimentReport)>> {
    ks.iter()
        .map(|&k| {
            let mut s = spec.clone();
            s.k = k;
            zero_shot_eval(model, &s, kb, queries).map(|r| (k, r))
        })
        .collect()
}

/// Random-retrieval study: metrics averaged over seeds, one row per k.
pub fn run_random_retrieval(
    model: &FusionModel,
    spec: &EvalSpec,
    kb: &KnowledgeBase,
    queries: &[WindowPair],
    ks: &[usize],
    n_seeds: u64,
) -> Result<Vec<(usize, f64, f64)>> {
    assert!(n_seeds >= 1);
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut mse = 0.0;
        let mut mae = 0.0;
        for seed in 0..n_seeds {
            let mut s = spec.clone();
            s.k = k;
            s.retrieval = RetrievalMode::Random { seed };
            let r = zero_shot_eval(model, &s, kb, queries)?;
            mse += r.mse;
            mae += r.mae;
        }
        rows.push((k, mse / n_seeds as f64, mae / n_seeds as f64));
    }
    Ok(rows)
}

/// Keeps the most recent fraction of each source's train windows.
pub fn recent_fraction(windows: &[WindowPair], fraction: f64) -> Vec<WindowPair> {
    assert!((0.0..=1.0).contains(&fraction));
    let mut sources: Vec<&str> = windows.iter().map(|w| w.source_id.as_str()).collect();
    sources.sort_unstable();
    sources.dedup();
    let mut kept = Vec::new();
    for source in sources {
        let mut group: Vec<&WindowPair> = windows
            .iter()
            .filter(|w| w.source_id == source)
            .collect();
        group.sort_by_key(|w| w.start_index);
        let keep = ((group.len() as f64) * fraction).ceil() as usize;
        let start = group.len() - keep;
        kept.extend(group[start..].iter().map(|w| (*w).clone()));
    }
    kept
}

/// Shrunken-knowledge-base study: rebuilds the KB from the most recent
/// fraction of the train windows for each requested fraction.
pub fn run_small_kb(
    model: &FusionModel,
    spec: &EvalSpec,
    train_windows: &[WindowPair],
    queries: &[WindowPair],
    fractions: &[f64],
) -> Result<Vec<(f64, ExperimentReport)>> {
    fractions
        .iter()
        .map(|&fraction| {
            let subset = recent_fraction(train_windows, fraction);
            let kb = build_kb(subset)?;
            let mut s = spec.clone();
            s.kb_source = format!("{} (last {:.0}%)", spec.kb_source, fraction * 100.0);
            zero_shot_eval(model, &s, &kb, queries).map(|r| (fraction, r))
        })
        .collect()
}

/// Cross-dataset transfer: knowledge base from one corpus, queries from
/// another, plus the no-retrieval baseline on the same queries.
pub fn run_cross_dataset(
    model: &FusionModel,
    spec: &EvalSpec,
    kb_windows: Vec<WindowPair>,
    queries: &[WindowPair],
) -> Result<(ExperimentReport, ExperimentReport)> {
    if kb_windows.is_empty() {
        return Err(XragError::EmptyInput("cross-dataset knowledge base is empty"));
    }
    let (t, l) = (queries[0].x.len(), queries[0].y.len());
    if kb_windows[0].x.len() != t || kb_windows[0].y.len() != l {
        return Err(XragError::WindowLengthMismatch {
            expected_t: t,
            expected_l: l,
            got_t: kb_windows[0].x.len(),
            got_l: kb_windows[0].y.len(),
        });
    }
    let kb = build_kb(kb_windows)?;
    let with = zero_shot_eval(model, spec, &kb, queries)?;

    let mut baseline_spec = spec.clone();
    baseline_spec.mask = AblationMask {
        q: true,
        r: false,
        cross: false,
    };
    baseline_spec.kb_source = "none (backbone only)".into();
    let baseline = zero_shot_eval(model, &baseline_spec, &kb, queries)?;
    Ok((with, baseline))
}

/// Shared training recipe for the study runners: pretrain a backbone, then
/// train the fusion stage on top of it.
#[allow(clippy::too_many_arguments)]
pub fn train_stack(
    pretrain: &[WindowPair],
    kb: &KnowledgeBase,
    fusion_cfg: &FusionConfig,
    arch: BackboneArch,
    backbone_cfg: &TrainConfig,
    fusion_train_cfg: &TrainConfig,
    metric: &SimilarityMetric,
    seed: u64,
) -> Result<FusionModel> {
    let bb_cfg = TrainConfig {
        seed,
        ..backbone_cfg.clone()
    };
    let (backbone, _) = pretrain_backbone(pretrain, arch, &bb_cfg)?;
    let mut model = FusionModel::new(fusion_cfg.clone(), backbone, seed)?;
    let fu_cfg = TrainConfig {
        seed,
        ..fusion_train_cfg.clone()
    };
    train_fusion(&mut model, kb, pretrain, &fu_cfg, metric)?;
    Ok(model)
}

/// Reuses one pretrained backbone per seed across study variants.
pub struct BackbonePool {
    arch: BackboneArch,
    cfg: TrainConfig,
    cache: std::sync::Mutex<std::collections::HashMap<u64, FrozenBackbone>>,
}

impl BackbonePool {
    pub fn new(arch: BackboneArch, cfg: TrainConfig) -> Self {
        BackbonePool {
            arch,
            cfg,
            cache: std::sync::Mutex::new(std::collections::HashMap::new()),
        }
    }

    pub fn get(&self, pretrain: &[WindowPair], seed: u64) -> Result<FrozenBackbone> {
        {
            let cache = self.cache.lock().unwrap();
            if let Some(bb) = cache.get(&seed) {
                return Ok(bb.clone());
            }
        }
        let cfg = TrainConfig {
            seed,
            ..self.cfg.clone()
        };
        let (backbone, _) = pretrain_backbone(pretrain, self.arch, &cfg)?;
        self.cache
            .lock()
            .unwrap()
            .insert(seed, backbone.clone());
        Ok(backbone)
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub mask: AblationMask,
    pub mse: f64,
    pub mae: f64,
}

/// Trains one fusion model per mask (identical seeds and config across
/// masks) and evaluates zero-shot; metrics are averaged over seeds.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation_grid(
    pretrain: &[WindowPair],
    kb: &KnowledgeBase,
    queries: &[WindowPair],
    masks: &[AblationMask],
    seeds: &[u64],
    fusion_cfg: &FusionConfig,
    pool: &BackbonePool,
    fusion_train_cfg: &TrainConfig,
    spec: &EvalSpec,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(masks.len());
    for &mask in masks {
        if mask.is_empty() {
            return Err(XragError::InvalidConfig("empty ablation mask".into()));
        }
        let mut mse = 0.0;
        let mut mae = 0.0;
        for &seed in seeds {
            let backbone = pool.get(pretrain, seed)?;
            let mut cfg = fusion_cfg.clone();
            cfg.mask = mask;
            let mut model = FusionModel::new(cfg, backbone, seed)?;
            if mask.needs_retrieval() {
                let tc = TrainConfig {
                    seed,
                    ..fusion_train_cfg.clone()
                };
                train_fusion(&mut model, kb, pretrain, &tc, &spec.metric)?;
            }
            let mut s = spec.clone();
            s.mask = mask;
            let report = zero_shot_eval(&model, &s, kb, queries)?;
            mse += report.mse;
            mae += report.mae;
        }
        rows.push(AblationRow {
            mask,
            mse: mse / seeds.len() as f64,
            mae: mae / seeds.len() as f64,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct LambdaRow {
    /// None marks the learnable-gate variant.
    pub lambda: Option<f64>,
    pub mse: f64,
    pub mae: f64,
}

/// Trains and evaluates one model per λ (plus optionally the learnable
/// gate), identical seeds across variants.
#[allow(clippy::too_many_arguments)]
pub fn run_lambda_sweep(
    pretrain: &[WindowPair],
    kb: &KnowledgeBase,
    queries: &[WindowPair],
    lambdas: &[f64],
    include_learnable: bool,
    fusion_cfg: &FusionConfig,
    pool: &BackbonePool,
    fusion_train_cfg: &TrainConfig,
    spec: &EvalSpec,
    seeds: &[u64],
) -> Result<Vec<LambdaRow>> {
    for &lambda in lambdas {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(XragError::InvalidConfig(format!(
                "lambda {lambda} outside [0, 1]"
            )));
        }
    }
    let mut variants: Vec<Option<f64>> = lambdas.iter().map(|&l| Some(l)).collect();
    if include_learnable {
        variants.push(None);
    }

    let mut rows = Vec::with_capacity(variants.len());
    for variant in variants {
        let mut mse = 0.0;
        let mut mae = 0.0;
        for &seed in seeds {
            let backbone = pool.get(pretrain, seed)?;
            let mut cfg = fusion_cfg.clone();
            match variant {
                Some(lambda) => {
                    cfg.lambda = lambda;
                    cfg.gate_mode = GateMode::Fixed;
                }
                None => cfg.gate_mode = GateMode::Learnable,
            }
            let mut model = FusionModel::new(cfg.clone(), backbone, seed)?;
            let tc = TrainConfig {
                seed,
                ..fusion_train_cfg.clone()
            };
            train_fusion(&mut model, kb, pretrain, &tc, &spec.metric)?;
            let mut s = spec.clone();
            s.lambda = cfg.lambda;
            // Evaluation reuses the model's own gate mode; the spec only
            // overrides mask/λ/k, and for the learnable row λ is unused.
            let report = eval_with_gate(&model, &s, kb, queries)?;
            mse += report.mse;
            mae += report.mae;
        }
        rows.push(LambdaRow {
            lambda: variant,
            mse: mse / seeds.len() as f64,
            mae: mae / seeds.len() as f64,
        });
    }
    Ok(rows)
}

fn eval_with_gate(
    model: &FusionModel,
    spec: &EvalSpec,
    kb: &KnowledgeBase,
    queries: &[WindowPair],
) -> Result<ExperimentReport> {
    zero_shot_eval(model, spec, kb, queries)
}

/// Chronologically standardized per-channel splits of a multivariate CSV.
pub struct ChannelSplit {
    pub name: String,
    /// Standardized by the train-split mean/std of this channel.
    pub train: Series,
    pub test: Series,
}

/// Standardizes each channel by its train-split statistics and splits
/// chronologically: the first `train_frac` is train, the last `test_frac`
/// is test (anything between is held out, mirroring a validation span).
pub fn split_channels(
    channels: &[Series],
    train_frac: f64,
    test_frac: f64,
) -> Result<Vec<ChannelSplit>> {
    assert!(train_frac > 0.0 && test_frac > 0.0 && train_frac + test_frac <= 1.0);
    channels
        .iter()
        .map(|c| {
            let n = c.len();
            let n_train = (n as f64 * train_frac).floor() as usize;
            let n_test = (n as f64 * test_frac).floor() as usize;
            if n_train < 2 || n_test < 1 {
                return Err(XragError::SeriesTooShort {
                    source_id: c.source_id.clone(),
                    len: n,
                    needed: 4,
                });
            }
            let train_vals = &c.values[..n_train];
            let mean = train_vals.iter().sum::<f64>() / n_train as f64;
            let var = train_vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / n_train as f64;
            let std = var.sqrt().max(1e-12);
            let standardize =
                |vals: &[f64]| -> Vec<f64> { vals.iter().map(|v| (v - mean) / std).collect() };
            Ok(ChannelSplit {
                name: c.name.clone(),
                train: Series {
                    values: standardize(train_vals),
                    source_id: format!("{}/train", c.source_id),
                    name: c.name.clone(),
                },
                test: Series {
                    values: standardize(&c.values[n - n_test..]),
                    source_id: format!("{}/test", c.source_id),
                    name: c.name.clone(),
                },
            })
        })
        .collect()
}
