//! Losses, AdamW with decoupled weight decay, and the two-phase protocol:
//! pretrain-and-freeze the backbone, then train only the fusion parameters
//! with retrieval against the knowledge base.

use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Result, XragError};
use crate::fusion::{FrozenBackbone, FusionModel, FusionParams, HeadMode, QUANTILE_LEVELS};
use crate::retrieval::{topk, Exclusion, KnowledgeBase, RetrievedSet, SimilarityMetric};
use crate::series::{minmax_scale, scale_with, WindowPair};
use crate::tape::{derive_seed, grad_of, Tape, ValueId};
use crate::tensor::Tensor;

/// Counts every optimizer step taken in this process; evaluation code
/// asserts it never moves during a zero-shot run.
static OPTIMIZER_STEPS: AtomicU64 = AtomicU64::new(0);

pub fn optimizer_step_count() -> u64 {
    OPTIMIZER_STEPS.load(Ordering::SeqCst)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    Quantile,
    Mse,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm gradient clipping threshold.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        // Desk-scale defaults; paper-scale values (batch 256, 10k steps)
        // remain configurable.
        TrainConfig {
            lr: 3e-4,
            weight_decay: 0.01,
            batch_size: 32,
            steps: 2000,
            seed: 0,
            loss_mode: LossMode::Quantile,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean pinball loss over an L×Q quantile matrix (row-major) against an
/// L-vector of observations.
pub fn pinball_loss(pred: &[f64], y: &[f64], levels: &[f64]) -> Result<f64> {
    let l = y.len();
    let q = levels.len();
    if pred.len() != l * q {
        return Err(XragError::LengthMismatch {
            expected: l * q,
            got: pred.len(),
            context: "pinball_loss",
        });
    }
    let mut acc = 0.0;
    for (li, &obs) in y.iter().enumerate() {
        for (qi, &tau) in levels.iter().enumerate() {
            let e = obs - pred[li * q + qi];
            acc += (tau * e).max((tau - 1.0) * e);
        }
    }
    Ok(acc / (l * q) as f64)
}

pub fn mse_loss(pred: &[f64], y: &[f64]) -> Result<f64> {
    if pred.len() != y.len() {
        return Err(XragError::LengthMismatch {
            expected: y.len(),
            got: pred.len(),
            context: "mse_loss",
        });
    }
    Ok(pred
        .iter()
        .zip(y)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / y.len() as f64)
}

pub fn mae_loss(pred: &[f64], y: &[f64]) -> Result<f64> {
    if pred.len() != y.len() {
        return Err(XragError::LengthMismatch {
            expected: y.len(),
            got: pred.len(),
            context: "mae_loss",
        });
    }
    Ok(pred.iter().zip(y).map(|(p, t)| (p - t).abs()).sum::<f64>() / y.len() as f64)
}

/// Tape version of the pinball loss for a (1, L·Q) prediction.
pub fn build_quantile_loss(
    tape: &mut Tape,
    pred_flat: ValueId,
    y: &[f64],
    levels: &[f64],
) -> Result<ValueId> {
    let l = y.len();
    let q = levels.len();
    let pred = tape.reshape(pred_flat, vec![l, q])?;
    let mut target = Vec::with_capacity(l * q);
    let mut tau = Vec::with_capacity(l * q);
    let mut tau_m1 = Vec::with_capacity(l * q);
    for &obs in y {
        for &level in levels {
            target.push(obs);
            tau.push(level);
            tau_m1.push(level - 1.0);
        }
    }
    let target = tape.constant(Tensor::matrix(l, q, target)?);
    let tau = tape.constant(Tensor::matrix(l, q, tau)?);
    let tau_m1 = tape.constant(Tensor::matrix(l, q, tau_m1)?);
    let err = tape.sub(target, pred)?;
    let a = tape.mul(tau, err)?;
    let b = tape.mul(tau_m1, err)?;
    let hinge = tape.maximum(a, b)?;
    tape.mean_all(hinge)
}

/// Tape version of the MSE loss for a (1, L) prediction.
pub fn build_mse_loss(tape: &mut Tape, pred: ValueId, y: &[f64]) -> Result<ValueId> {
    let target = tape.constant(Tensor::row(y.to_vec()));
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean_all(sq)
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

/// Anything with named tensors the optimizer may update.
pub trait ParamSet {
    fn visit(&self, f: &mut dyn FnMut(String, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor));

    fn names(&self) -> BTreeSet<String> {
        let mut names = BTreeSet::new();
        self.visit(&mut |name, _| {
            names.insert(name);
        });
        names
    }

    fn tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name, t.clone())));
        out
    }
}

impl ParamSet for FusionParams {
    fn visit(&self, f: &mut dyn FnMut(String, &Tensor)) {
        FusionParams::visit(self, &mut |name, t| f(name, t));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        FusionParams::visit_mut(self, &mut |name, t| f(name, t));
    }
}

impl ParamSet for FrozenBackbone {
    fn visit(&self, f: &mut dyn FnMut(String, &Tensor)) {
        FrozenBackbone::visit(self, &mut |name, t| f(name, t));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        FrozenBackbone::visit_mut(self, &mut |name, t| f(name, t));
    }
}

/// View of a parameter set restricted to the named tensors; masked fusion
/// variants train exactly the parameters their active branches bind.
pub struct SubsetParams<'a, P: ParamSet> {
    inner: &'a mut P,
    names: BTreeSet<String>,
}

impl<'a, P: ParamSet> SubsetParams<'a, P> {
    pub fn new(inner: &'a mut P, names: BTreeSet<String>) -> Self {
        SubsetParams { inner, names }
    }
}

impl<P: ParamSet> ParamSet for SubsetParams<'_, P> {
    fn visit(&self, f: &mut dyn FnMut(String, &Tensor)) {
        self.inner.visit(&mut |name, t| {
            if self.names.contains(&name) {
                f(name, t);
            }
        });
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        let names = &self.names;
        self.inner.visit_mut(&mut |name, t| {
            if names.contains(&name) {
                f(name, t);
            }
        });
    }
}

/// First/second moments per parameter plus the step counter.
#[derive(Default)]
pub struct OptimizerState {
    moments: HashMap<String, (Tensor, Tensor)>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One AdamW step with bias correction and decoupled weight decay. The
/// gradient map must cover exactly the parameter set.
pub fn adamw_step(
    params: &mut dyn ParamSet,
    grads: &HashMap<String, Tensor>,
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<()> {
    let param_names = params.names();
    let grad_names: BTreeSet<String> = grads.keys().cloned().collect();
    if param_names != grad_names {
        let missing: Vec<&String> = param_names.difference(&grad_names).collect();
        let extra: Vec<&String> = grad_names.difference(&param_names).collect();
        return Err(XragError::GradParamMismatch {
            detail: format!("missing grads {missing:?}, unexpected grads {extra:?}"),
        });
    }

    state.step += 1;
    OPTIMIZER_STEPS.fetch_add(1, Ordering::SeqCst);
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);

    let mut failure: Option<XragError> = None;
    let moments = &mut state.moments;
    params.visit_mut(&mut |name, tensor| {
        if failure.is_some() {
            return;
        }
        let g = &grads[&name];
        if g.shape() != tensor.shape() {
            failure = Some(XragError::ShapeMismatch {
                op: "adamw_step",
                lhs: tensor.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
            return;
        }
        let (m, v) = moments
            .entry(name)
            .or_insert_with(|| {
                (
                    Tensor::zeros(tensor.shape().to_vec()),
                    Tensor::zeros(tensor.shape().to_vec()),
                )
            });
        let decay = 1.0 - cfg.lr * cfg.weight_decay;
        for ((p, gv), (mv, vv)) in tensor
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            // Decoupled decay, applied independently of the moment update.
            *p *= decay;
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    });
    if let Some(err) = failure {
        return Err(err);
    }
    Ok(())
}

/// Scales the gradient map so its global ℓ2 norm is at most `max_norm`.
/// Iterates in sorted name order so runs stay bit-reproducible.
pub fn clip_global_norm(grads: &mut HashMap<String, Tensor>, max_norm: f64) -> f64 {
    let mut names: Vec<&String> = grads.keys().collect();
    names.sort();
    let mut ss = 0.0;
    for name in &names {
        for v in grads[*name].data() {
            ss += v * v;
        }
    }
    let norm = ss.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for t in grads.values_mut() {
            for v in t.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

// ---------------------------------------------------------------------------
// Batch plumbing
// ---------------------------------------------------------------------------

fn merge_grads(acc: &mut HashMap<String, Tensor>, part: HashMap<String, Tensor>) {
    for (name, tensor) in part {
        match acc.get_mut(&name) {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(tensor.data()) {
                    *a += b;
                }
            }
            None => {
                acc.insert(name, tensor);
            }
        }
    }
}

fn extract_grads(
    tape: &Tape,
    loss: ValueId,
    bindings: &[(String, ValueId)],
) -> Result<(f64, HashMap<String, Tensor>)> {
    let loss_val = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    let mut map = HashMap::with_capacity(bindings.len());
    for (name, id) in bindings {
        let g = grad_of(&grads, *id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(*id).shape().to_vec()));
        map.insert(name.clone(), g);
    }
    Ok((loss_val, grads_done(map)))
}

fn grads_done(map: HashMap<String, Tensor>) -> HashMap<String, Tensor> {
    map
}

/// Runs per-sample closures in parallel and reduces losses/gradients in
/// batch order, so results do not depend on scheduling.
fn batch_grads<F>(indices: &[usize], per_sample: F) -> Result<(f64, HashMap<String, Tensor>)>
where
    F: Fn(usize) -> Result<(f64, HashMap<String, Tensor>)> + Sync,
{
    let parts: Vec<(f64, HashMap<String, Tensor>)> = indices
        .par_iter()
        .map(|&i| per_sample(i))
        .collect::<Result<_>>()?;
    let scale = 1.0 / indices.len() as f64;
    let mut total_loss = 0.0;
    let mut acc: HashMap<String, Tensor> = HashMap::new();
    for (loss, grads) in parts {
        total_loss += loss;
        merge_grads(&mut acc, grads);
    }
    for t in acc.values_mut() {
        for v in t.data_mut() {
            *v *= scale;
        }
    }
    Ok((total_loss * scale, acc))
}

// ---------------------------------------------------------------------------
// Phase 1: backbone pretraining
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct BackboneArch {
    pub t: usize,
    pub l: usize,
    pub d: usize,
    pub d_hid: usize,
}

/// Trains the backbone with MSE on (scaled x → x-scaled y) pairs, then
/// hands it back frozen. Deterministic given the seed.
pub fn pretrain_backbone(
    corpus: &[WindowPair],
    arch: BackboneArch,
    cfg: &TrainConfig,
) -> Result<(FrozenBackbone, Vec<(usize, f64)>)> {
    if corpus.is_empty() {
        return Err(XragError::EmptyInput("pretraining corpus is empty"));
    }
    for p in corpus {
        if p.x.len() != arch.t || p.y.len() != arch.l {
            return Err(XragError::WindowLengthMismatch {
                expected_t: arch.t,
                expected_l: arch.l,
                got_t: p.x.len(),
                got_l: p.y.len(),
            });
        }
    }
    let mut backbone = FrozenBackbone::init(arch.t, arch.l, arch.d, arch.d_hid, cfg.seed);

    // Scale once: inputs to [0,1], targets into the input window's frame.
    let scaled: Vec<(Vec<f64>, Vec<f64>)> = corpus
        .iter()
        .map(|p| {
            let stats = minmax_scale(&p.x);
            let y = scale_with(&stats, &p.y);
            (stats.values, y)
        })
        .collect();

    let mut state = OptimizerState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.random_range(0..corpus.len()))
            .collect();
        let bb = &backbone;
        let (loss, mut grads) = batch_grads(&batch, |i| {
            let (x, y) = &scaled[i];
            let mut tape = Tape::new();
            let mut bindings = Vec::new();
            let x_id = tape.constant(Tensor::row(x.clone()));
            let h = bb.build_encode(&mut tape, x_id, true, &mut bindings)?;
            let pred = bb.build_predictor(&mut tape, h, true, &mut bindings)?;
            let loss = build_mse_loss(&mut tape, pred, y)?;
            extract_grads(&tape, loss, &bindings)
        })?;
        if !loss.is_finite() {
            return Err(XragError::Other(format!(
                "non-finite pretraining loss at step {step}"
            )));
        }
        if let Some(max_norm) = cfg.clip_norm {
            clip_global_norm(&mut grads, max_norm);
        }
        adamw_step(&mut backbone, &grads, &mut state, cfg)?;
        curve.push((step, loss));
    }
    Ok((backbone, curve))
}

// ---------------------------------------------------------------------------
// Phase 2: fusion training against the knowledge base
// ---------------------------------------------------------------------------

/// Precomputes top-k retrieval for every corpus query with self-exclusion,
/// mirroring the offline-index protocol.
pub fn memoize_retrieval(
    kb: &KnowledgeBase,
    corpus: &[WindowPair],
    k: usize,
    metric: &SimilarityMetric,
) -> Result<Vec<RetrievedSet>> {
    corpus
        .par_iter()
        .map(|q| topk(kb, q, k, metric, Exclusion::SameSourceOverlap))
        .collect()
}

/// Trains only the fusion parameters; the backbone stays frozen. Returns
/// the per-step loss curve.
pub fn train_fusion(
    model: &mut FusionModel,
    kb: &KnowledgeBase,
    corpus: &[WindowPair],
    cfg: &TrainConfig,
    metric: &SimilarityMetric,
) -> Result<Vec<(usize, f64)>> {
    if corpus.is_empty() {
        return Err(XragError::EmptyInput("fusion training corpus is empty"));
    }
    match (cfg.loss_mode, model.config.head_mode) {
        (LossMode::Quantile, HeadMode::Quantile) | (LossMode::Mse, HeadMode::Point) => {}
        (loss, head) => {
            return Err(XragError::InvalidConfig(format!(
                "loss mode {loss:?} incompatible with head mode {head:?}"
            )))
        }
    }

    let retrieved = memoize_retrieval(kb, corpus, model.config.k, metric)?;

    // The trainable set of this variant: whatever the active branches bind.
    let probe = model.build_forward(&corpus[0], Some(&retrieved[0]), false, 0)?;
    let active: BTreeSet<String> = probe.bindings.iter().map(|(n, _)| n.clone()).collect();
    drop(probe);

    let mut state = OptimizerState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.random_range(0..corpus.len()))
            .collect();
        let model_ref = &*model;
        let (loss, mut grads) = batch_grads(&batch, |i| {
            let query = &corpus[i];
            let drop_seed = derive_seed(&[cfg.seed, step as u64, i as u64]);
            let pass = model_ref.build_forward(query, Some(&retrieved[i]), true, drop_seed)?;
            let mut tape = pass.tape;
            let loss = match cfg.loss_mode {
                LossMode::Quantile => {
                    build_quantile_loss(&mut tape, pass.pred_raw, &query.y, &QUANTILE_LEVELS)?
                }
                LossMode::Mse => build_mse_loss(&mut tape, pass.pred_raw, &query.y)?,
            };
            extract_grads(&tape, loss, &pass.bindings)
        })?;
        if !loss.is_finite() {
            return Err(XragError::Other(format!(
                "non-finite fusion loss at step {step}"
            )));
        }
        if let Some(max_norm) = cfg.clip_norm {
            clip_global_norm(&mut grads, max_norm);
        }
        let mut active_params = SubsetParams::new(&mut model.params, active.clone());
        adamw_step(&mut active_params, &grads, &mut state, cfg)?;
        curve.push((step, loss));
    }
    Ok(curve)
}

/// Writes a loss curve as `step,loss` CSV.
pub fn write_loss_csv(path: &std::path::Path, curve: &[(usize, f64)]) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "step,loss")?;
    for (step, loss) in curve {
        writeln!(out, "{step},{loss:?}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{AblationMask, FusionConfig, GateMode};
    use crate::retrieval::build_kb;
    use crate::toy::{gen_toy_corpus, ToyCorpusSpec};

    fn tiny_spec(seed: u64) -> ToyCorpusSpec {
        ToyCorpusSpec {
            n_relevant_families: 2,
            n_irrelevant_families: 1,
            samples_per_family: 8,
            noise_sigma: 0.05,
            seed,
            t: 32,
            l: 8,
        }
    }

    fn tiny_fusion_config() -> FusionConfig {
        FusionConfig {
            d: 16,
            n_heads: 2,
            k: 4,
            lambda: 0.7,
            dropout_p: 0.1,
            gate_mode: GateMode::Fixed,
            head_mode: HeadMode::Quantile,
            head_trainable: false,
            mask: AblationMask::FULL,
            t: 32,
            l: 8,
        }
    }

    fn tiny_train_config(steps: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            steps,
            seed,
            lr: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn pinball_identities() {
        // Perfect prediction: zero loss.
        let pred = vec![2.0; 3 * 9];
        let y = vec![2.0; 3];
        assert_eq!(pinball_loss(&pred, &y, &QUANTILE_LEVELS).unwrap(), 0.0);

        // Median pinball is half the absolute error.
        let pred = vec![1.0];
        let y = vec![4.0];
        let loss = pinball_loss(&pred, &y, &[0.5]).unwrap();
        assert!((loss - 0.5 * 3.0).abs() < 1e-12);

        // τ = 0.9 penalizes under-prediction 9× more than over-prediction.
        let under = pinball_loss(&[0.0], &[1.0], &[0.9]).unwrap();
        let over = pinball_loss(&[1.0], &[0.0], &[0.9]).unwrap();
        assert!((under - 0.9).abs() < 1e-12);
        assert!((over - 0.1).abs() < 1e-12);
    }

    #[test]
    fn mse_mae_basics() {
        assert_eq!(mse_loss(&[1.0, 1.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(mae_loss(&[1.0, 1.0], &[1.0, 1.0]).unwrap(), 0.0);
        let mse = mse_loss(&[1.0, 1.0], &[0.0, 2.0]).unwrap();
        let mae = mae_loss(&[1.0, 1.0], &[0.0, 2.0]).unwrap();
        assert!((mse - 1.0).abs() < 1e-12);
        assert!((mae - 1.0).abs() < 1e-12);
        // Constant offset δ: MSE = δ², MAE = |δ|.
        let delta = 0.3;
        let pred = vec![delta; 5];
        let y = vec![0.0; 5];
        assert!((mse_loss(&pred, &y).unwrap() - delta * delta).abs() < 1e-12);
        assert!((mae_loss(&pred, &y).unwrap() - delta).abs() < 1e-12);
    }

    #[test]
    fn tape_losses_match_plain_losses() {
        let y = [0.4, -1.0, 2.0];
        let pred = [0.1, 0.2, 0.3, -0.5, 0.7, 1.1, 0.0, 2.2, -0.3];
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::row(pred.to_vec()));
        let levels = [0.25, 0.5, 0.75];
        let loss = build_quantile_loss(&mut tape, p, &y, &levels).unwrap();
        let want = pinball_loss(&pred, &y, &levels).unwrap();
        assert!((tape.value(loss).data()[0] - want).abs() < 1e-12);

        let mut tape = Tape::new();
        let p = tape.constant(Tensor::row(vec![1.0, 2.0, 3.0]));
        let loss = build_mse_loss(&mut tape, p, &y).unwrap();
        let want = mse_loss(&[1.0, 2.0, 3.0], &y).unwrap();
        assert!((tape.value(loss).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn adamw_zero_grad_zero_decay_is_fixed_point() {
        let mut backbone = FrozenBackbone::init(4, 2, 4, 4, 0);
        let before = backbone.tensors();
        let grads: HashMap<String, Tensor> = before
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape().to_vec())))
            .collect();
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut state = OptimizerState::new();
        adamw_step(&mut backbone, &grads, &mut state, &cfg).unwrap();
        assert_eq!(backbone.tensors(), before);
    }

    #[test]
    fn adamw_first_step_matches_hand_computation() {
        struct OneParam(Tensor);
        impl ParamSet for OneParam {
            fn visit(&self, f: &mut dyn FnMut(String, &Tensor)) {
                f("w".into(), &self.0);
            }
            fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
                f("w".into(), &mut self.0);
            }
        }
        let mut p = OneParam(Tensor::scalar(3.0));
        let mut grads = HashMap::new();
        grads.insert("w".to_string(), Tensor::scalar(1.0));
        let cfg = TrainConfig {
            lr: 3e-4,
            weight_decay: 0.0,
            clip_norm: None,
            ..TrainConfig::default()
        };
        let mut state = OptimizerState::new();
        adamw_step(&mut p, &grads, &mut state, &cfg).unwrap();
        // Step 1 with g = 1: m̂ = 1, v̂ = 1 → θ = 3 − lr·1/(1 + eps).
        let want = 3.0 - 3e-4 * (1.0 / (1.0 + 1e-8));
        assert!((p.0.data()[0] - want).abs() < 1e-15, "{}", p.0.data()[0]);
    }

    #[test]
    fn adamw_pure_decay_shrinks_parameters() {
        struct OneParam(Tensor);
        impl ParamSet for OneParam {
            fn visit(&self, f: &mut dyn FnMut(String, &Tensor)) {
                f("w".into(), &self.0);
            }
            fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
                f("w".into(), &mut self.0);
            }
        }
        let mut p = OneParam(Tensor::scalar(2.0));
        let mut grads = HashMap::new();
        grads.insert("w".to_string(), Tensor::scalar(0.0));
        let cfg = TrainConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..TrainConfig::default()
        };
        let mut state = OptimizerState::new();
        adamw_step(&mut p, &grads, &mut state, &cfg).unwrap();
        assert!((p.0.data()[0] - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-15);
        adamw_step(&mut p, &grads, &mut state, &cfg).unwrap();
        assert!((p.0.data()[0] - 2.0 * (1.0 - 0.1 * 0.5) * (1.0 - 0.1 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn adamw_rejects_grad_set_mismatch() {
        let mut backbone = FrozenBackbone::init(4, 2, 4, 4, 0);
        let mut grads: HashMap<String, Tensor> = backbone
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, Tensor::zeros(t.shape().to_vec())))
            .collect();
        grads.remove("encoder.w1");
        grads.insert("unknown".into(), Tensor::scalar(0.0));
        let mut state = OptimizerState::new();
        let err = adamw_step(&mut backbone, &grads, &mut state, &TrainConfig::default())
            .unwrap_err();
        assert!(matches!(err, XragError::GradParamMismatch { .. }));
    }

    #[test]
    fn clip_rescales_only_large_gradients() {
        let mut grads = HashMap::new();
        grads.insert("a".to_string(), Tensor::from_vec(vec![3.0, 4.0]));
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let clipped = &grads["a"];
        let new_norm: f64 = clipped.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((new_norm - 1.0).abs() < 1e-12);

        let mut small = HashMap::new();
        small.insert("a".to_string(), Tensor::from_vec(vec![0.1, 0.1]));
        let before = small["a"].clone();
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small["a"], before);
    }

    #[test]
    fn pretrain_reduces_heldout_mse_and_is_deterministic() {
        let corpus = gen_toy_corpus(&ToyCorpusSpec {
            noise_sigma: 0.0,
            ..tiny_spec(3)
        })
        .unwrap();
        let arch = BackboneArch {
            t: 32,
            l: 8,
            d: 16,
            d_hid: 24,
        };
        let cfg = tiny_train_config(150, 3);

        let heldout_mse = |bb: &FrozenBackbone| {
            let mut acc = 0.0;
            for q in &corpus.test {
                let stats = minmax_scale(&q.x);
                let pred_scaled = bb.predict_scaled(&stats.values);
                let pred = stats.descale(&pred_scaled);
                acc += mse_loss(&pred, &q.y).unwrap();
            }
            acc / corpus.test.len() as f64
        };

        let initial = FrozenBackbone::init(32, 8, 16, 24, cfg.seed);
        let (trained, curve) = pretrain_backbone(&corpus.pretrain, arch, &cfg).unwrap();
        assert!(curve.iter().all(|(_, l)| l.is_finite()));
        assert!(
            heldout_mse(&trained) < heldout_mse(&initial),
            "training must strictly reduce held-out error"
        );

        let (again, _) = pretrain_backbone(&corpus.pretrain, arch, &cfg).unwrap();
        assert_eq!(again, trained, "same seed must give bit-identical weights");
    }

    #[test]
    fn zero_steps_leaves_model_at_initialization() {
        let corpus = gen_toy_corpus(&tiny_spec(5)).unwrap();
        let kb = build_kb(corpus.kb.clone()).unwrap();
        let arch = BackboneArch {
            t: 32,
            l: 8,
            d: 16,
            d_hid: 24,
        };
        let (backbone, _) = pretrain_backbone(&corpus.pretrain, arch, &tiny_train_config(20, 5)).unwrap();
        let mut model = FusionModel::new(tiny_fusion_config(), backbone, 5).unwrap();
        let before = model.params.clone();
        let curve = train_fusion(
            &mut model,
            &kb,
            &corpus.pretrain,
            &tiny_train_config(0, 5),
            &SimilarityMetric::CosineData,
        )
        .unwrap();
        assert!(curve.is_empty());
        assert_eq!(model.params, before);
    }

    #[test]
    fn fusion_training_reduces_loss_and_freezes_backbone() {
        // Averaged over 3 seeds: loss at the end below loss at step 0.
        let mut first = 0.0;
        let mut last = 0.0;
        for seed in 0..3u64 {
            let corpus = gen_toy_corpus(&tiny_spec(seed)).unwrap();
            let kb = build_kb(corpus.kb.clone()).unwrap();
            let arch = BackboneArch {
                t: 32,
                l: 8,
                d: 16,
                d_hid: 24,
            };
            let (backbone, _) =
                pretrain_backbone(&corpus.pretrain, arch, &tiny_train_config(100, seed)).unwrap();
            let hash_before = backbone.content_hash();
            let mut model = FusionModel::new(tiny_fusion_config(), backbone, seed).unwrap();
            let curve = train_fusion(
                &mut model,
                &kb,
                &corpus.pretrain,
                &tiny_train_config(200, seed),
                &SimilarityMetric::CosineData,
            )
            .unwrap();
            assert!(curve.iter().all(|(_, l)| l.is_finite()));
            first += curve.first().unwrap().1;
            last += curve.last().unwrap().1;
            assert_eq!(model.backbone.content_hash(), hash_before);
        }
        assert!(
            last / 3.0 < first / 3.0,
            "mean loss should fall: {first} → {last}"
        );
    }

    #[test]
    fn fusion_training_is_deterministic() {
        let corpus = gen_toy_corpus(&tiny_spec(9)).unwrap();
        let kb = build_kb(corpus.kb.clone()).unwrap();
        let arch = BackboneArch {
            t: 32,
            l: 8,
            d: 16,
            d_hid: 24,
        };
        let (backbone, _) =
            pretrain_backbone(&corpus.pretrain, arch, &tiny_train_config(30, 9)).unwrap();

        let run = || {
            let mut model = FusionModel::new(tiny_fusion_config(), backbone.clone(), 9).unwrap();
            let curve = train_fusion(
                &mut model,
                &kb,
                &corpus.pretrain,
                &tiny_train_config(40, 9),
                &SimilarityMetric::CosineData,
            )
            .unwrap();
            (model.params.clone(), curve)
        };
        let (p1, c1) = run();
        let (p2, c2) = run();
        assert_eq!(c1, c2, "loss curves must be identical");
        assert_eq!(p1, p2, "trained parameters must be identical");
    }

    #[test]
    fn loss_and_head_mode_must_agree() {
        let corpus = gen_toy_corpus(&tiny_spec(1)).unwrap();
        let kb = build_kb(corpus.kb.clone()).unwrap();
        let backbone = FrozenBackbone::init(32, 8, 16, 24, 1);
        let mut model = FusionModel::new(tiny_fusion_config(), backbone, 1).unwrap();
        let cfg = TrainConfig {
            loss_mode: LossMode::Mse,
            ..tiny_train_config(5, 1)
        };
        let err = train_fusion(&mut model, &kb, &corpus.pretrain, &cfg, &SimilarityMetric::CosineData)
            .unwrap_err();
        assert!(matches!(err, XragError::InvalidConfig(_)));
    }

    #[test]
    fn mse_mode_training_converges_on_noiseless_corpus() {
        let corpus = gen_toy_corpus(&ToyCorpusSpec {
            noise_sigma: 0.0,
            ..tiny_spec(12)
        })
        .unwrap();
        let kb = build_kb(corpus.kb.clone()).unwrap();
        let arch = BackboneArch {
            t: 32,
            l: 8,
            d: 16,
            d_hid: 24,
        };
        let (backbone, _) =
            pretrain_backbone(&corpus.pretrain, arch, &tiny_train_config(120, 12)).unwrap();
        let mut cfg = tiny_fusion_config();
        cfg.head_mode = HeadMode::Point;
        let mut model = FusionModel::new(cfg, backbone, 12).unwrap();
        let tc = TrainConfig {
            loss_mode: LossMode::Mse,
            ..tiny_train_config(300, 12)
        };
        let curve =
            train_fusion(&mut model, &kb, &corpus.pretrain, &tc, &SimilarityMetric::CosineData)
                .unwrap();
        let first = curve.first().unwrap().1;
        let last = curve.last().unwrap().1;
        assert!(last < 0.1 * first, "final {last} vs initial {first}");
    }

    #[test]
    fn missing_retrieval_budget_is_an_error() {
        let corpus = gen_toy_corpus(&tiny_spec(2)).unwrap();
        let kb = build_kb(corpus.kb[..3].to_vec()).unwrap();
        let backbone = FrozenBackbone::init(32, 8, 16, 24, 2);
        let mut model = FusionModel::new(tiny_fusion_config(), backbone, 2).unwrap();
        let err = train_fusion(
            &mut model,
            &kb,
            &corpus.pretrain,
            &tiny_train_config(5, 2),
            &SimilarityMetric::CosineData,
        )
        .unwrap_err();
        assert!(matches!(err, XragError::KTooLarge { .. }));
    }
}
