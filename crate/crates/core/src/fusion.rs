//! The retrieval-fusion forecaster.
//!
//! A frozen backbone encodes the query window into `h`. Retrieved window
//! pairs are projected into the same latent width, then two branches run:
//! cross-attention (query attends over retrieved inputs, aggregates
//! retrieved outputs) and self-attention over retrieved outputs with mean
//! pooling. A fixed λ-gate (or a learnable sigmoid gate) combines the
//! branches, and the frozen forecast head maps the fused vector to the
//! horizon.
//!
//! Attention output projections and all FFN second layers start at zero,
//! so every residual block is the identity at initialization and the whole
//! model reproduces the frozen backbone exactly before training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, XragError};
use crate::retrieval::{RetrievalEncoder, RetrievedSet};
use crate::series::{minmax_scale, ScaledWindow, WindowPair};
use crate::tape::{derive_seed, SplitMix64, Tape, ValueId};
use crate::tensor::{matmul_acc, Tensor};

/// Quantile levels produced by the quantile head; the point forecast is the
/// 0.5 quantile.
pub const QUANTILE_LEVELS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
const MEDIAN_IDX: usize = 4;

/// Which fusion components are active. `q` is the skip-connection from the
/// query representation, `r` the retrieval self-attention branch, `cross`
/// the query–retrieval cross-attention branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationMask {
    pub q: bool,
    pub r: bool,
    pub cross: bool,
}

impl AblationMask {
    pub const FULL: AblationMask = AblationMask {
        q: true,
        r: true,
        cross: true,
    };

    /// All seven non-empty masks, in grid order.
    pub fn grid() -> [AblationMask; 7] {
        [
            AblationMask { q: true, r: false, cross: false },
            AblationMask { q: false, r: true, cross: false },
            AblationMask { q: false, r: false, cross: true },
            AblationMask { q: true, r: true, cross: false },
            AblationMask { q: true, r: false, cross: true },
            AblationMask { q: false, r: true, cross: true },
            AblationMask::FULL,
        ]
    }

    pub fn is_empty(&self) -> bool {
        !(self.q || self.r || self.cross)
    }

    /// True when the forward pass needs a retrieved set at all.
    pub fn needs_retrieval(&self) -> bool {
        self.r || self.cross
    }

    pub fn parse(s: &str) -> Result<AblationMask> {
        let mut mask = AblationMask {
            q: false,
            r: false,
            cross: false,
        };
        for part in s.split(|c| c == ',' || c == '+') {
            match part.trim().to_ascii_lowercase().as_str() {
                "q" => mask.q = true,
                "r" => mask.r = true,
                "qxr" | "cross" | "q<->r" => mask.cross = true,
                "" => {}
                other => {
                    return Err(XragError::InvalidConfig(format!(
                        "unknown mask component {other:?} (expected Q, R, QxR)"
                    )))
                }
            }
        }
        if mask.is_empty() {
            return Err(XragError::InvalidConfig(format!("empty ablation mask {s:?}")));
        }
        Ok(mask)
    }
}

impl std::fmt::Display for AblationMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut parts = Vec::new();
        if self.q {
            parts.push("Q");
        }
        if self.r {
            parts.push("R");
        }
        if self.cross {
            parts.push("QxR");
        }
        write!(f, "{}", parts.join("+"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    Fixed,
    Learnable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadMode {
    /// Linear d → L; the frozen backbone predictor unless `head_trainable`.
    Point,
    /// Linear d → L×9 over [`QUANTILE_LEVELS`]; trainable, initialized by
    /// tiling the frozen predictor so every quantile starts at the point
    /// forecast.
    Quantile,
}

#[derive(Clone, Debug)]
pub struct FusionConfig {
    pub d: usize,
    pub n_heads: usize,
    pub k: usize,
    pub lambda: f64,
    pub dropout_p: f64,
    pub gate_mode: GateMode,
    pub head_mode: HeadMode,
    /// Point mode only: train a copy of the predictor instead of reusing
    /// the frozen one.
    pub head_trainable: bool,
    pub mask: AblationMask,
    pub t: usize,
    pub l: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            d: 64,
            n_heads: 4,
            k: 15,
            lambda: 0.7,
            dropout_p: 0.2,
            gate_mode: GateMode::Fixed,
            head_mode: HeadMode::Quantile,
            head_trainable: false,
            mask: AblationMask::FULL,
            t: 64,
            l: 16,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_heads == 0 || self.d % self.n_heads != 0 {
            return Err(XragError::InvalidConfig(format!(
                "d = {} must be a positive multiple of n_heads = {}",
                self.d, self.n_heads
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(XragError::InvalidConfig(format!(
                "lambda = {} outside [0, 1]",
                self.lambda
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(XragError::InvalidConfig(format!(
                "dropout_p = {} outside [0, 1)",
                self.dropout_p
            )));
        }
        if self.k == 0 {
            return Err(XragError::InvalidConfig("k must be at least 1".into()));
        }
        if self.mask.is_empty() {
            return Err(XragError::InvalidConfig("ablation mask is empty".into()));
        }
        if self.gate_mode == GateMode::Learnable && !(self.mask.r && self.mask.cross) {
            return Err(XragError::InvalidConfig(
                "learnable gate needs both the R and QxR branches".into(),
            ));
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        match self.head_mode {
            HeadMode::Point => self.l,
            HeadMode::Quantile => self.l * QUANTILE_LEVELS.len(),
        }
    }
}

/// Two-layer MLP with relu, the building block for projectors, FFNs and the
/// backbone encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp2 {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Mlp2 {
    pub fn init(d_in: usize, d_hidden: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Mlp2 {
            w1: Tensor::rand_init(vec![d_in, d_hidden], d_in, rng),
            b1: Tensor::zeros(vec![d_hidden]),
            w2: Tensor::rand_init(vec![d_hidden, d_out], d_hidden, rng),
            b2: Tensor::zeros(vec![d_out]),
        }
    }

    /// Random first layer, zero second layer: the residual-identity init.
    pub fn init_zero_out(d_in: usize, d_hidden: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Mlp2 {
            w1: Tensor::rand_init(vec![d_in, d_hidden], d_in, rng),
            b1: Tensor::zeros(vec![d_hidden]),
            w2: Tensor::zeros(vec![d_hidden, d_out]),
            b2: Tensor::zeros(vec![d_out]),
        }
    }

    pub fn zeros(d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        Mlp2 {
            w1: Tensor::zeros(vec![d_in, d_hidden]),
            b1: Tensor::zeros(vec![d_hidden]),
            w2: Tensor::zeros(vec![d_hidden, d_out]),
            b2: Tensor::zeros(vec![d_out]),
        }
    }

    pub fn numel(&self) -> usize {
        self.w1.numel() + self.b1.numel() + self.w2.numel() + self.b2.numel()
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{prefix}.w1"), &self.w1);
        f(format!("{prefix}.b1"), &self.b1);
        f(format!("{prefix}.w2"), &self.w2);
        f(format!("{prefix}.b2"), &self.b2);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.w1"), &mut self.w1);
        f(format!("{prefix}.b1"), &mut self.b1);
        f(format!("{prefix}.w2"), &mut self.w2);
        f(format!("{prefix}.b2"), &mut self.b2);
    }

    /// Plain (tape-free) forward over a flat row-major batch.
    pub fn apply(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let (d_in, d_hidden) = (self.w1.shape()[0], self.w1.shape()[1]);
        let d_out = self.w2.shape()[1];
        debug_assert_eq!(x.len(), rows * d_in);
        let mut hidden = vec![0.0; rows * d_hidden];
        matmul_acc(&mut hidden, x, self.w1.data(), rows, d_in, d_hidden);
        for r in 0..rows {
            for j in 0..d_hidden {
                let v = hidden[r * d_hidden + j] + self.b1.data()[j];
                hidden[r * d_hidden + j] = v.max(0.0);
            }
        }
        let mut out = vec![0.0; rows * d_out];
        matmul_acc(&mut out, &hidden, self.w2.data(), rows, d_hidden, d_out);
        for r in 0..rows {
            for j in 0..d_out {
                out[r * d_out + j] += self.b2.data()[j];
            }
        }
        out
    }

    /// Tape forward: relu(x·w1 + b1)·w2 + b2, with optional dropout on the
    /// hidden activations.
    fn build(
        &self,
        tape: &mut Tape,
        x: ValueId,
        trainable: bool,
        prefix: &str,
        bindings: &mut Vec<(String, ValueId)>,
        dropout: Option<(f64, &mut SplitMix64)>,
    ) -> Result<ValueId> {
        let w1 = tape.leaf(self.w1.clone(), trainable);
        let b1 = tape.leaf(self.b1.clone(), trainable);
        let w2 = tape.leaf(self.w2.clone(), trainable);
        let b2 = tape.leaf(self.b2.clone(), trainable);
        if trainable {
            bindings.push((format!("{prefix}.w1"), w1));
            bindings.push((format!("{prefix}.b1"), b1));
            bindings.push((format!("{prefix}.w2"), w2));
            bindings.push((format!("{prefix}.b2"), b2));
        }
        let mut hidden = tape.matmul(x, w1)?;
        hidden = tape.bias_add(hidden, b1)?;
        hidden = tape.relu(hidden)?;
        if let Some((p, rng)) = dropout {
            hidden = tape.dropout(hidden, p, true, rng)?;
        }
        let out = tape.matmul(hidden, w2)?;
        tape.bias_add(out, b2)
    }
}

/// Linear map with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl HeadParams {
    pub fn numel(&self) -> usize {
        self.w.numel() + self.b.numel()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (d, out) = (self.w.shape()[0], self.w.shape()[1]);
        debug_assert_eq!(x.len(), d);
        let mut y = vec![0.0; out];
        matmul_acc(&mut y, x, self.w.data(), 1, d, out);
        for (v, b) in y.iter_mut().zip(self.b.data()) {
            *v += b;
        }
        y
    }
}

/// Per-head attention projections plus the output map. `w_o` starts at
/// zero so the block is the identity under its residual connection.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w_q: Vec<Tensor>,
    pub w_k: Vec<Tensor>,
    pub w_v: Vec<Tensor>,
    pub w_o: Tensor,
}

impl AttentionParams {
    fn init(d: usize, n_heads: usize, rng: &mut ChaCha8Rng) -> Self {
        let dh = d / n_heads;
        let mk = |rng: &mut ChaCha8Rng| Tensor::rand_init(vec![d, dh], d, rng);
        AttentionParams {
            w_q: (0..n_heads).map(|_| mk(rng)).collect(),
            w_k: (0..n_heads).map(|_| mk(rng)).collect(),
            w_v: (0..n_heads).map(|_| mk(rng)).collect(),
            w_o: Tensor::zeros(vec![d, d]),
        }
    }

    pub fn numel(&self) -> usize {
        self.w_q.iter().map(Tensor::numel).sum::<usize>()
            + self.w_k.iter().map(Tensor::numel).sum::<usize>()
            + self.w_v.iter().map(Tensor::numel).sum::<usize>()
            + self.w_o.numel()
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, t) in self.w_q.iter().enumerate() {
            f(format!("{prefix}.w_q{i}"), t);
        }
        for (i, t) in self.w_k.iter().enumerate() {
            f(format!("{prefix}.w_k{i}"), t);
        }
        for (i, t) in self.w_v.iter().enumerate() {
            f(format!("{prefix}.w_v{i}"), t);
        }
        f(format!("{prefix}.w_o"), &self.w_o);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, t) in self.w_q.iter_mut().enumerate() {
            f(format!("{prefix}.w_q{i}"), t);
        }
        for (i, t) in self.w_k.iter_mut().enumerate() {
            f(format!("{prefix}.w_k{i}"), t);
        }
        for (i, t) in self.w_v.iter_mut().enumerate() {
            f(format!("{prefix}.w_v{i}"), t);
        }
        f(format!("{prefix}.w_o"), &mut self.w_o);
    }
}

/// All trainable weights of the fusion stage.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub proj_x: Mlp2,
    pub proj_y: Mlp2,
    pub cross_attn: AttentionParams,
    pub ffn_cross: Mlp2,
    pub self_attn: AttentionParams,
    pub ffn_self: Mlp2,
    /// Trainable head; `None` routes through the frozen backbone predictor.
    pub head: Option<HeadParams>,
    pub gate_mlp: Option<Mlp2>,
}

impl FusionParams {
    pub fn init(config: &FusionConfig, backbone: &FrozenBackbone, seed: u64) -> Result<Self> {
        config.validate()?;
        if backbone.d != config.d || backbone.t != config.t || backbone.l != config.l {
            return Err(XragError::InvalidConfig(format!(
                "backbone (d={}, T={}, L={}) does not match fusion config (d={}, T={}, L={})",
                backbone.d, backbone.t, backbone.l, config.d, config.t, config.l
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d;
        let head = match config.head_mode {
            HeadMode::Quantile => Some(tile_predictor(&backbone.predictor, QUANTILE_LEVELS.len())),
            HeadMode::Point => {
                if config.head_trainable {
                    Some(backbone.predictor.clone())
                } else {
                    None
                }
            }
        };
        let gate_mlp = match config.gate_mode {
            GateMode::Learnable => Some(Mlp2::init_zero_out(2 * d, d, 1, &mut rng)),
            GateMode::Fixed => None,
        };
        Ok(FusionParams {
            proj_x: Mlp2::init(config.t, d, d, &mut rng),
            proj_y: Mlp2::init(config.l, d, d, &mut rng),
            cross_attn: AttentionParams::init(d, config.n_heads, &mut rng),
            ffn_cross: Mlp2::init_zero_out(d, 4 * d, d, &mut rng),
            self_attn: AttentionParams::init(d, config.n_heads, &mut rng),
            ffn_self: Mlp2::init_zero_out(d, 4 * d, d, &mut rng),
            head,
            gate_mlp,
        })
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.proj_x.visit("proj_x", f);
        self.proj_y.visit("proj_y", f);
        self.cross_attn.visit("cross_attn", f);
        self.ffn_cross.visit("ffn_cross", f);
        self.self_attn.visit("self_attn", f);
        self.ffn_self.visit("ffn_self", f);
        if let Some(head) = &self.head {
            f("head.w".to_string(), &head.w);
            f("head.b".to_string(), &head.b);
        }
        if let Some(gate) = &self.gate_mlp {
            gate.visit("gate", f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.proj_x.visit_mut("proj_x", f);
        self.proj_y.visit_mut("proj_y", f);
        self.cross_attn.visit_mut("cross_attn", f);
        self.ffn_cross.visit_mut("ffn_cross", f);
        self.self_attn.visit_mut("self_attn", f);
        self.ffn_self.visit_mut("ffn_self", f);
        if let Some(head) = &mut self.head {
            f("head.w".to_string(), &mut head.w);
            f("head.b".to_string(), &mut head.b);
        }
        if let Some(gate) = &mut self.gate_mlp {
            gate.visit_mut("gate", f);
        }
    }

    /// Names of every trainable tensor, in visit order.
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |name, _| names.push(name));
        names
    }
}

fn tile_predictor(predictor: &HeadParams, n_levels: usize) -> HeadParams {
    let (d, l) = (predictor.w.shape()[0], predictor.w.shape()[1]);
    let mut w = Tensor::zeros(vec![d, l * n_levels]);
    for i in 0..d {
        for j in 0..l {
            let v = predictor.w.data()[i * l + j];
            for q in 0..n_levels {
                w.data_mut()[i * (l * n_levels) + j * n_levels + q] = v;
            }
        }
    }
    let mut b = Tensor::zeros(vec![l * n_levels]);
    for j in 0..l {
        for q in 0..n_levels {
            b.data_mut()[j * n_levels + q] = predictor.b.data()[j];
        }
    }
    HeadParams { w, b }
}

/// The pretrained query encoder and forecast predictor. Never updated by
/// fusion training.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenBackbone {
    pub encoder: Mlp2,
    pub predictor: HeadParams,
    pub t: usize,
    pub l: usize,
    pub d: usize,
    pub d_hid: usize,
}

impl FrozenBackbone {
    /// Random initialization; becomes meaningful after pretraining.
    pub fn init(t: usize, l: usize, d: usize, d_hid: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FrozenBackbone {
            encoder: Mlp2::init(t, d_hid, d, &mut rng),
            predictor: HeadParams {
                w: Tensor::rand_init(vec![d, l], d, &mut rng),
                b: Tensor::zeros(vec![l]),
            },
            t,
            l,
            d,
            d_hid,
        }
    }

    /// Query representation from a scaled window.
    pub fn encode(&self, x_scaled: &[f64]) -> Vec<f64> {
        self.encoder.apply(x_scaled, 1)
    }

    /// Backbone's own forecast in the query-scaled space.
    pub fn predict_scaled(&self, x_scaled: &[f64]) -> Vec<f64> {
        self.predictor.apply(&self.encode(x_scaled))
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.encoder.visit("encoder", f);
        f("predictor.w".to_string(), &self.predictor.w);
        f("predictor.b".to_string(), &self.predictor.b);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.encoder.visit_mut("encoder", f);
        f("predictor.w".to_string(), &mut self.predictor.w);
        f("predictor.b".to_string(), &mut self.predictor.b);
    }

    /// Tape forward of the encoder, optionally with trainable leaves (used
    /// only while pretraining the backbone itself).
    pub fn build_encode(
        &self,
        tape: &mut Tape,
        x: ValueId,
        trainable: bool,
        bindings: &mut Vec<(String, ValueId)>,
    ) -> Result<ValueId> {
        self.encoder.build(tape, x, trainable, "encoder", bindings, None)
    }

    pub fn build_predictor(
        &self,
        tape: &mut Tape,
        h: ValueId,
        trainable: bool,
        bindings: &mut Vec<(String, ValueId)>,
    ) -> Result<ValueId> {
        let w = tape.leaf(self.predictor.w.clone(), trainable);
        let b = tape.leaf(self.predictor.b.clone(), trainable);
        if trainable {
            bindings.push(("predictor.w".to_string(), w));
            bindings.push(("predictor.b".to_string(), b));
        }
        let out = tape.matmul(h, w)?;
        tape.bias_add(out, b)
    }

    /// SHA-256 over the canonical little-endian serialization of all
    /// backbone tensors.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        self.visit(&mut |name, tensor| {
            hasher.update(name.as_bytes());
            for &d in tensor.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for v in tensor.data() {
                hasher.update(v.to_le_bytes());
            }
        });
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl RetrievalEncoder for FrozenBackbone {
    fn input_len(&self) -> usize {
        self.t
    }

    fn dim(&self) -> usize {
        self.d
    }

    fn encode_scaled(&self, x_scaled: &[f64]) -> Vec<f64> {
        self.encode(x_scaled)
    }
}

/// Forecast produced by one forward pass, in original units.
#[derive(Clone, Debug)]
pub struct Forecast {
    /// De-scaled point forecast of length L.
    pub point: Vec<f64>,
    /// De-scaled quantile matrix (L rows × 9 levels), quantile head only.
    pub quantiles: Option<Vec<Vec<f64>>>,
    /// Cross-attention probabilities, n_heads × k. Empty without the
    /// cross branch.
    pub attention: Vec<Vec<f64>>,
}

/// Tape, output ids and bindings of one recorded forward pass.
pub struct ForwardPass {
    pub tape: Tape,
    /// Prediction in the query-scaled space, shape (1, head_width).
    pub pred_scaled: ValueId,
    /// De-scaled prediction, same shape.
    pub pred_raw: ValueId,
    pub attention: Vec<Vec<f64>>,
    /// Trainable-leaf bindings (fusion parameters only).
    pub bindings: Vec<(String, ValueId)>,
    pub query_stats: ScaledWindow,
}

pub struct FusionModel {
    pub config: FusionConfig,
    pub params: FusionParams,
    pub backbone: FrozenBackbone,
}

impl FusionModel {
    pub fn new(config: FusionConfig, backbone: FrozenBackbone, seed: u64) -> Result<Self> {
        let params = FusionParams::init(&config, &backbone, seed)?;
        Ok(FusionModel {
            config,
            params,
            backbone,
        })
    }

    /// Inference-mode forward returning the de-scaled forecast.
    pub fn predict(&self, query: &WindowPair, retrieved: Option<&RetrievedSet>) -> Result<Forecast> {
        self.predict_cfg(&self.config, query, retrieved)
    }

    /// Inference with a config override (mask, λ, gate untouched weights).
    pub fn predict_cfg(
        &self,
        cfg: &FusionConfig,
        query: &WindowPair,
        retrieved: Option<&RetrievedSet>,
    ) -> Result<Forecast> {
        let pass = self.build_forward_cfg(cfg, query, retrieved, false, 0)?;
        let raw = pass.tape.value(pass.pred_raw).data();
        Ok(match cfg.head_mode {
            HeadMode::Point => Forecast {
                point: raw.to_vec(),
                quantiles: None,
                attention: pass.attention,
            },
            HeadMode::Quantile => {
                let nq = QUANTILE_LEVELS.len();
                let l = cfg.l;
                let point = (0..l).map(|i| raw[i * nq + MEDIAN_IDX]).collect();
                let quantiles = (0..l)
                    .map(|i| raw[i * nq..(i + 1) * nq].to_vec())
                    .collect();
                Forecast {
                    point,
                    quantiles: Some(quantiles),
                    attention: pass.attention,
                }
            }
        })
    }

    /// Records the forward computation on a fresh tape.
    ///
    /// `dropout_seed` only matters when `train` is set; derive it from
    /// (run seed, step, query index) for reproducible masks.
    pub fn build_forward(
        &self,
        query: &WindowPair,
        retrieved: Option<&RetrievedSet>,
        train: bool,
        dropout_seed: u64,
    ) -> Result<ForwardPass> {
        self.build_forward_cfg(&self.config, query, retrieved, train, dropout_seed)
    }

    pub fn build_forward_cfg(
        &self,
        cfg: &FusionConfig,
        query: &WindowPair,
        retrieved: Option<&RetrievedSet>,
        train: bool,
        dropout_seed: u64,
    ) -> Result<ForwardPass> {
        cfg.validate()?;
        debug_assert_eq!(cfg.d, self.config.d);
        debug_assert_eq!(cfg.t, self.config.t);
        debug_assert_eq!(cfg.l, self.config.l);
        if query.x.len() != cfg.t || query.y.len() != cfg.l {
            return Err(XragError::WindowLengthMismatch {
                expected_t: cfg.t,
                expected_l: cfg.l,
                got_t: query.x.len(),
                got_l: query.y.len(),
            });
        }
        let retrieved = if cfg.mask.needs_retrieval() {
            let r = retrieved.ok_or_else(|| {
                XragError::InvalidConfig(format!(
                    "mask {} needs a retrieved set, none given",
                    cfg.mask
                ))
            })?;
            if r.is_empty() {
                return Err(XragError::EmptyInput("retrieved set is empty"));
            }
            Some(r)
        } else {
            None
        };

        let mut tape = Tape::new();
        let mut bindings = Vec::new();
        let mut attention = Vec::new();
        let mut layer = 0u64;

        let query_stats = minmax_scale(&query.x);
        let x = tape.constant(Tensor::row(query_stats.values.clone()));

        // Query representation h, needed by the Q skip and the cross branch.
        let h = if cfg.mask.q || cfg.mask.cross {
            Some(self.backbone.build_encode(&mut tape, x, false, &mut bindings)?)
        } else {
            None
        };

        // Projected retrieved inputs/outputs; the inputs are only needed by
        // the cross branch.
        let (r_x, r_y) = match retrieved {
            Some(r) => {
                let (rx, ry) =
                    self.build_projections(&mut tape, cfg, r, cfg.mask.cross, &mut bindings)?;
                (rx, Some(ry))
            }
            None => (None, None),
        };

        let c_tilde = if cfg.mask.cross {
            let rx = r_x.expect("cross branch needs retrieved inputs");
            let ry = r_y.expect("cross branch needs retrieved outputs");
            Some(self.build_cross_branch(
                &mut tape,
                cfg,
                h.expect("cross branch needs h"),
                rx,
                ry,
                train,
                dropout_seed,
                &mut layer,
                &mut bindings,
                &mut attention,
            )?)
        } else {
            None
        };

        let s_tilde = if cfg.mask.r {
            let ry = r_y.expect("self branch needs retrieved outputs");
            Some(self.build_self_branch(
                &mut tape,
                cfg,
                ry,
                train,
                dropout_seed,
                &mut layer,
                &mut bindings,
            )?)
        } else {
            None
        };

        let z = self.combine(&mut tape, cfg, h, c_tilde, s_tilde, &mut bindings)?;

        // Forecast head: trainable copy when present, frozen predictor
        // otherwise.
        let pred_scaled = match &self.params.head {
            Some(head) => {
                let w = tape.leaf(head.w.clone(), true);
                let b = tape.leaf(head.b.clone(), true);
                bindings.push(("head.w".to_string(), w));
                bindings.push(("head.b".to_string(), b));
                let out = tape.matmul(z, w)?;
                tape.bias_add(out, b)?
            }
            None => self
                .backbone
                .build_predictor(&mut tape, z, false, &mut bindings)?,
        };

        // De-scale with the query window statistics.
        let denom = query_stats.range_val + crate::series::MINMAX_EPS;
        let scaled_up = tape.scale(pred_scaled, denom)?;
        let mins = tape.constant(Tensor::full(
            tape.value(scaled_up).shape().to_vec(),
            query_stats.min_val,
        ));
        let pred_raw = tape.add(scaled_up, mins)?;

        Ok(ForwardPass {
            tape,
            pred_scaled,
            pred_raw,
            attention,
            bindings,
            query_stats,
        })
    }

    /// Stacks scaled retrieved inputs/outputs and projects them, one row
    /// per retrieved pair in rank order. Inputs are skipped entirely when
    /// no branch consumes them.
    fn build_projections(
        &self,
        tape: &mut Tape,
        cfg: &FusionConfig,
        retrieved: &RetrievedSet,
        with_inputs: bool,
        bindings: &mut Vec<(String, ValueId)>,
    ) -> Result<(Option<ValueId>, ValueId)> {
        let k = retrieved.len();
        let mut xs = Vec::with_capacity(if with_inputs { k * cfg.t } else { 0 });
        let mut ys = Vec::with_capacity(k * cfg.l);
        for item in &retrieved.items {
            if item.pair.x.len() != cfg.t || item.pair.y.len() != cfg.l {
                return Err(XragError::WindowLengthMismatch {
                    expected_t: cfg.t,
                    expected_l: cfg.l,
                    got_t: item.pair.x.len(),
                    got_l: item.pair.y.len(),
                });
            }
            // Inputs and outputs are scaled independently, so the value
            // representation of a retrieved pair never depends on its keys.
            if with_inputs {
                xs.extend(minmax_scale(&item.pair.x).values);
            }
            ys.extend(minmax_scale(&item.pair.y).values);
        }
        let r_x = if with_inputs {
            let xs = tape.constant(Tensor::matrix(k, cfg.t, xs)?);
            Some(self.params.proj_x.build(tape, xs, true, "proj_x", bindings, None)?)
        } else {
            None
        };
        let ys = tape.constant(Tensor::matrix(k, cfg.l, ys)?);
        let r_y = self.params.proj_y.build(tape, ys, true, "proj_y", bindings, None)?;
        Ok((r_x, r_y))
    }

    /// Multi-head attention of `queries` over `keys`/`values` with scaled
    /// dot-product logits. Returns the pre-residual output and, when asked,
    /// pushes per-head probability rows of the first query into `export`.
    #[allow(clippy::too_many_arguments)]
    fn build_attention(
        &self,
        tape: &mut Tape,
        cfg: &FusionConfig,
        attn: &AttentionParams,
        prefix: &str,
        queries: ValueId,
        keys: ValueId,
        values: ValueId,
        train: bool,
        dropout_seed: u64,
        layer: &mut u64,
        bindings: &mut Vec<(String, ValueId)>,
        export: Option<&mut Vec<Vec<f64>>>,
    ) -> Result<ValueId> {
        let dh = cfg.d / cfg.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outs = Vec::with_capacity(cfg.n_heads);
        let mut exported: Vec<Vec<f64>> = Vec::new();
        for i in 0..cfg.n_heads {
            let wq = tape.leaf(attn.w_q[i].clone(), true);
            let wk = tape.leaf(attn.w_k[i].clone(), true);
            let wv = tape.leaf(attn.w_v[i].clone(), true);
            bindings.push((format!("{prefix}.w_q{i}"), wq));
            bindings.push((format!("{prefix}.w_k{i}"), wk));
            bindings.push((format!("{prefix}.w_v{i}"), wv));

            let q = tape.matmul(queries, wq)?;
            let key = tape.matmul(keys, wk)?;
            let val = tape.matmul(values, wv)?;
            let logits = tape.matmul_nt(q, key)?;
            let logits = tape.scale(logits, scale)?;
            let probs = tape.softmax_lastdim(logits)?;
            if export.is_some() {
                let row = tape.value(probs);
                let kcount = row.shape()[1];
                exported.push(row.data()[..kcount].to_vec());
            }
            let mut rng = SplitMix64::new(derive_seed(&[dropout_seed, *layer]));
            *layer += 1;
            let probs = tape.dropout(probs, cfg.dropout_p, train, &mut rng)?;
            head_outs.push(tape.matmul(probs, val)?);
        }
        if let Some(export) = export {
            *export = exported;
        }
        let concat = tape.concat_lastdim(&head_outs)?;
        let wo = tape.leaf(attn.w_o.clone(), true);
        bindings.push((format!("{prefix}.w_o"), wo));
        tape.matmul(concat, wo)
    }

    #[allow(clippy::too_many_arguments)]
    fn build_cross_branch(
        &self,
        tape: &mut Tape,
        cfg: &FusionConfig,
        h: ValueId,
        r_x: ValueId,
        r_y: ValueId,
        train: bool,
        dropout_seed: u64,
        layer: &mut u64,
        bindings: &mut Vec<(String, ValueId)>,
        attention: &mut Vec<Vec<f64>>,
    ) -> Result<ValueId> {
        let attn_out = self.build_attention(
            tape,
            cfg,
            &self.params.cross_attn,
            "cross_attn",
            h,
            r_x,
            r_y,
            train,
            dropout_seed,
            layer,
            bindings,
            Some(attention),
        )?;
        // The Q skip-connection is the h-residual inside this branch.
        let c = if cfg.mask.q {
            tape.add(attn_out, h)?
        } else {
            attn_out
        };
        let mut rng = SplitMix64::new(derive_seed(&[dropout_seed, *layer]));
        *layer += 1;
        let ffn = self.params.ffn_cross.build(
            tape,
            c,
            true,
            "ffn_cross",
            bindings,
            if train { Some((cfg.dropout_p, &mut rng)) } else { None },
        )?;
        tape.add(ffn, c)
    }

    #[allow(clippy::too_many_arguments)]
    fn build_self_branch(
        &self,
        tape: &mut Tape,
        cfg: &FusionConfig,
        r_y: ValueId,
        train: bool,
        dropout_seed: u64,
        layer: &mut u64,
        bindings: &mut Vec<(String, ValueId)>,
    ) -> Result<ValueId> {
        let attn_out = self.build_attention(
            tape,
            cfg,
            &self.params.self_attn,
            "self_attn",
            r_y,
            r_y,
            r_y,
            train,
            dropout_seed,
            layer,
            bindings,
            None,
        )?;
        let s = tape.add(attn_out, r_y)?;
        let mut rng = SplitMix64::new(derive_seed(&[dropout_seed, *layer]));
        *layer += 1;
        let ffn = self.params.ffn_self.build(
            tape,
            s,
            true,
            "ffn_self",
            bindings,
            if train { Some((cfg.dropout_p, &mut rng)) } else { None },
        )?;
        let rows = tape.add(ffn, s)?;
        let pooled = tape.mean_axis(rows, 0)?;
        tape.reshape(pooled, vec![1, cfg.d])
    }

    /// Combines the active branches into the fused representation z.
    fn combine(
        &self,
        tape: &mut Tape,
        cfg: &FusionConfig,
        h: Option<ValueId>,
        c_tilde: Option<ValueId>,
        s_tilde: Option<ValueId>,
        bindings: &mut Vec<(String, ValueId)>,
    ) -> Result<ValueId> {
        match (c_tilde, s_tilde) {
            (Some(c), Some(s)) => match cfg.gate_mode {
                GateMode::Fixed => gate_fixed(tape, cfg.lambda, c, s),
                GateMode::Learnable => {
                    let gate = self.params.gate_mlp.as_ref().ok_or_else(|| {
                        XragError::InvalidConfig("learnable gate selected but gate_mlp missing".into())
                    })?;
                    let cat = tape.concat_lastdim(&[c, s])?;
                    let logit = gate.build(tape, cat, true, "gate", bindings, None)?;
                    let lam = tape.sigmoid(logit)?;
                    let lam = tape.reshape(lam, vec![1])?;
                    let one = tape.constant(Tensor::scalar(1.0));
                    let inv = tape.sub(one, lam)?;
                    let cw = tape.scale_by(c, lam)?;
                    let sw = tape.scale_by(s, inv)?;
                    tape.add(cw, sw)
                }
            },
            (Some(c), None) => Ok(c),
            (None, Some(s)) => match h {
                // {Q, R}: gate the skip-connection against the pooled
                // retrieval summary.
                Some(h) if cfg.mask.q => gate_fixed(tape, cfg.lambda, h, s),
                _ => Ok(s),
            },
            (None, None) => h.ok_or_else(|| {
                XragError::InvalidConfig("no active fusion branch".into())
            }),
        }
    }
}

/// z = λ·a + (1−λ)·b.
pub fn gate_fixed(tape: &mut Tape, lambda: f64, a: ValueId, b: ValueId) -> Result<ValueId> {
    let aw = tape.scale(a, lambda)?;
    let bw = tape.scale(b, 1.0 - lambda)?;
    tape.add(aw, bw)
}

/// Parameter accounting, one row per named component.
#[derive(Clone, Debug)]
pub struct ParamRow {
    pub component: String,
    pub count: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug)]
pub struct ParamReport {
    pub rows: Vec<ParamRow>,
    pub trainable_total: usize,
    pub frozen_total: usize,
}

impl ParamReport {
    pub fn total(&self) -> usize {
        self.trainable_total + self.frozen_total
    }

    pub fn trainable_fraction(&self) -> f64 {
        self.trainable_total as f64 / self.total() as f64
    }
}

/// Exact parameter counts per component of a constructed model.
pub fn count_params(model: &FusionModel) -> ParamReport {
    let mut rows = vec![
        ParamRow {
            component: "backbone.encoder".into(),
            count: model.backbone.encoder.numel(),
            trainable: false,
        },
        ParamRow {
            component: "backbone.predictor".into(),
            count: model.backbone.predictor.numel(),
            trainable: false,
        },
        ParamRow {
            component: "proj_x".into(),
            count: model.params.proj_x.numel(),
            trainable: true,
        },
        ParamRow {
            component: "proj_y".into(),
            count: model.params.proj_y.numel(),
            trainable: true,
        },
        ParamRow {
            component: "cross_attn".into(),
            count: model.params.cross_attn.numel(),
            trainable: true,
        },
        ParamRow {
            component: "ffn_cross".into(),
            count: model.params.ffn_cross.numel(),
            trainable: true,
        },
        ParamRow {
            component: "self_attn".into(),
            count: model.params.self_attn.numel(),
            trainable: true,
        },
        ParamRow {
            component: "ffn_self".into(),
            count: model.params.ffn_self.numel(),
            trainable: true,
        },
    ];
    if let Some(head) = &model.params.head {
        rows.push(ParamRow {
            component: "head".into(),
            count: head.numel(),
            trainable: true,
        });
    }
    if let Some(gate) = &model.params.gate_mlp {
        rows.push(ParamRow {
            component: "gate".into(),
            count: gate.numel(),
            trainable: true,
        });
    }
    let trainable_total = rows.iter().filter(|r| r.trainable).map(|r| r.count).sum();
    let frozen_total = rows.iter().filter(|r| !r.trainable).map(|r| r.count).sum();
    ParamReport {
        rows,
        trainable_total,
        frozen_total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::oracle_attention;
    use crate::retrieval::RetrievedItem;

    fn toy_retrieved(k: usize, t: usize, l: usize, seed: u64) -> RetrievedSet {
        let mut rng = SplitMix64::new(seed);
        let items = (0..k)
            .map(|j| RetrievedItem {
                kb_index: j,
                score: 1.0 - j as f64 * 0.01,
                pair: WindowPair {
                    x: (0..t).map(|_| rng.next_f64() * 2.0 - 1.0).collect(),
                    y: (0..l).map(|_| rng.next_f64() * 2.0 - 1.0).collect(),
                    source_id: format!("kb{j}"),
                    start_index: j * 100,
                },
            })
            .collect();
        RetrievedSet {
            items,
            query_id: "q".into(),
        }
    }

    fn toy_query(t: usize, l: usize, seed: u64) -> WindowPair {
        let mut rng = SplitMix64::new(seed);
        WindowPair {
            x: (0..t).map(|_| rng.next_f64() * 2.0 - 1.0).collect(),
            y: (0..l).map(|_| rng.next_f64() * 2.0 - 1.0).collect(),
            source_id: "query".into(),
            start_index: 0,
        }
    }

    fn small_config() -> FusionConfig {
        FusionConfig {
            d: 16,
            n_heads: 4,
            k: 4,
            lambda: 0.7,
            dropout_p: 0.0,
            gate_mode: GateMode::Fixed,
            head_mode: HeadMode::Point,
            head_trainable: false,
            mask: AblationMask::FULL,
            t: 32,
            l: 8,
        }
    }

    fn small_model(seed: u64) -> FusionModel {
        let cfg = small_config();
        let backbone = FrozenBackbone::init(cfg.t, cfg.l, cfg.d, 24, seed ^ 0xB0B0);
        FusionModel::new(cfg, backbone, seed).unwrap()
    }

    #[test]
    fn init_identity_matches_backbone_bitwise() {
        let model = small_model(5);
        let mut cfg = model.config.clone();
        cfg.lambda = 1.0;
        let query = toy_query(32, 8, 77);
        let retrieved = toy_retrieved(4, 32, 8, 78);
        let forecast = model.predict_cfg(&cfg, &query, Some(&retrieved)).unwrap();

        let stats = minmax_scale(&query.x);
        let backbone_scaled = model.backbone.predict_scaled(&stats.values);
        let backbone_raw = stats.descale(&backbone_scaled);
        assert_eq!(forecast.point, backbone_raw);
    }

    #[test]
    fn init_identity_in_quantile_mode() {
        let mut cfg = small_config();
        cfg.head_mode = HeadMode::Quantile;
        cfg.lambda = 1.0;
        let backbone = FrozenBackbone::init(cfg.t, cfg.l, cfg.d, 24, 1);
        let model = FusionModel::new(cfg, backbone, 2).unwrap();
        let query = toy_query(32, 8, 3);
        let retrieved = toy_retrieved(4, 32, 8, 4);
        let forecast = model.predict(&query, Some(&retrieved)).unwrap();

        let stats = minmax_scale(&query.x);
        let backbone_raw = stats.descale(&model.backbone.predict_scaled(&stats.values));
        for (a, b) in forecast.point.iter().zip(&backbone_raw) {
            assert!((a - b).abs() <= 1e-12);
        }
        // Every quantile starts at the point forecast.
        for (l, row) in forecast.quantiles.unwrap().iter().enumerate() {
            for v in row {
                assert!((v - backbone_raw[l]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn q_only_mask_equals_backbone_and_needs_no_retrieval() {
        let model = small_model(6);
        let mut cfg = model.config.clone();
        cfg.mask = AblationMask {
            q: true,
            r: false,
            cross: false,
        };
        let query = toy_query(32, 8, 10);
        let forecast = model.predict_cfg(&cfg, &query, None).unwrap();
        let stats = minmax_scale(&query.x);
        let backbone_raw = stats.descale(&model.backbone.predict_scaled(&stats.values));
        assert_eq!(forecast.point, backbone_raw);
        assert!(forecast.attention.is_empty());
    }

    #[test]
    fn missing_retrieved_set_is_an_error_when_needed() {
        let model = small_model(7);
        let query = toy_query(32, 8, 11);
        assert!(model.predict(&query, None).is_err());
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut model = small_model(8);
        // Break zero-init so weights are non-trivial.
        model.params.cross_attn.w_o = Tensor::rand_init(
            vec![16, 16],
            16,
            &mut ChaCha8Rng::seed_from_u64(99),
        );
        let query = toy_query(32, 8, 12);
        let retrieved = toy_retrieved(5, 32, 8, 13);
        let forecast = model.predict(&query, Some(&retrieved)).unwrap();
        assert_eq!(forecast.attention.len(), 4);
        for row in &forecast.attention {
            assert_eq!(row.len(), 5);
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-9);
            assert!(row.iter().all(|w| *w >= 0.0));
        }
    }

    #[test]
    fn k1_attention_weight_is_one_and_keys_are_irrelevant() {
        let mut model = small_model(9);
        model.params.cross_attn.w_o = Tensor::rand_init(
            vec![16, 16],
            16,
            &mut ChaCha8Rng::seed_from_u64(1),
        );
        let query = toy_query(32, 8, 14);
        let mut retrieved = toy_retrieved(1, 32, 8, 15);
        let f1 = model.predict(&query, Some(&retrieved)).unwrap();
        for row in &f1.attention {
            assert_eq!(row, &vec![1.0]);
        }
        // Perturb the single retrieved input (the key); the output must not move.
        for v in retrieved.items[0].pair.x.iter_mut() {
            *v = -*v + 0.37;
        }
        let f2 = model.predict(&query, Some(&retrieved)).unwrap();
        for (a, b) in f1.point.iter().zip(&f2.point) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn cross_branch_matches_attention_oracle() {
        // Single head, d = 2, k = 2, hand-checkable wiring.
        let cfg = FusionConfig {
            d: 2,
            n_heads: 1,
            k: 2,
            lambda: 1.0,
            dropout_p: 0.0,
            gate_mode: GateMode::Fixed,
            head_mode: HeadMode::Point,
            head_trainable: false,
            mask: AblationMask {
                q: false,
                r: false,
                cross: true,
            },
            t: 4,
            l: 2,
        };
        let backbone = FrozenBackbone::init(4, 2, 2, 4, 21);
        let mut model = FusionModel::new(cfg, backbone, 22).unwrap();
        // Identity q/k/v projections, identity output, dead FFN.
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        model.params.cross_attn.w_q = vec![eye.clone()];
        model.params.cross_attn.w_k = vec![eye.clone()];
        model.params.cross_attn.w_v = vec![eye.clone()];
        model.params.cross_attn.w_o = eye.clone();
        model.params.ffn_cross = Mlp2::zeros(2, 8, 2);

        let query = toy_query(4, 2, 31);
        let retrieved = toy_retrieved(2, 4, 2, 32);
        let pass = model
            .build_forward(&query, Some(&retrieved), false, 0)
            .unwrap();

        // Reproduce the branch with the standalone oracle.
        let h = model.backbone.encode(&minmax_scale(&query.x).values);
        let keys: Vec<Vec<f64>> = retrieved
            .items
            .iter()
            .map(|it| {
                let s = minmax_scale(&it.pair.x);
                model.params.proj_x.apply(&s.values, 1)
            })
            .collect();
        let values: Vec<Vec<f64>> = retrieved
            .items
            .iter()
            .map(|it| {
                let s = minmax_scale(&it.pair.y);
                model.params.proj_y.apply(&s.values, 1)
            })
            .collect();
        let (expect_c, expect_w) = oracle_attention(&h, &keys, &values, 1.0 / (2.0f64).sqrt());

        for (got, want) in pass.attention[0].iter().zip(&expect_w) {
            assert!((got - want).abs() <= 1e-9, "weights {got} vs {want}");
        }
        // z = c̃ = attention output here; compare through the frozen head
        // by checking the scaled prediction against predictor(expect_c).
        let want_pred = model.backbone.predictor.apply(&expect_c);
        let got_pred = pass.tape.value(pass.pred_scaled).data();
        for (g, w) in got_pred.iter().zip(&want_pred) {
            assert!((g - w).abs() <= 1e-9);
        }
    }

    #[test]
    fn self_branch_matches_attention_oracle_with_pooling() {
        let cfg = FusionConfig {
            d: 4,
            n_heads: 1,
            k: 3,
            lambda: 0.0,
            dropout_p: 0.0,
            gate_mode: GateMode::Fixed,
            head_mode: HeadMode::Point,
            head_trainable: false,
            mask: AblationMask {
                q: false,
                r: true,
                cross: false,
            },
            t: 6,
            l: 3,
        };
        let backbone = FrozenBackbone::init(6, 3, 4, 8, 41);
        let mut model = FusionModel::new(cfg, backbone, 42).unwrap();
        let eye = Tensor::matrix(
            4,
            4,
            vec![
                1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0,
            ],
        )
        .unwrap();
        model.params.self_attn.w_q = vec![eye.clone()];
        model.params.self_attn.w_k = vec![eye.clone()];
        model.params.self_attn.w_v = vec![eye.clone()];
        model.params.self_attn.w_o = eye.clone();
        model.params.ffn_self = Mlp2::zeros(4, 16, 4);

        let query = toy_query(6, 3, 51);
        let retrieved = toy_retrieved(3, 6, 3, 52);
        let pass = model
            .build_forward(&query, Some(&retrieved), false, 0)
            .unwrap();

        let rows: Vec<Vec<f64>> = retrieved
            .items
            .iter()
            .map(|it| {
                let s = minmax_scale(&it.pair.y);
                model.params.proj_y.apply(&s.values, 1)
            })
            .collect();
        // s = Attn(R_y, R_y, R_y) + R_y row-wise, then mean over rows.
        let scale = 1.0 / 2.0; // 1/sqrt(4)
        let mut pooled = vec![0.0; 4];
        for r in &rows {
            let (attended, _) = oracle_attention(r, &rows, &rows, scale);
            for j in 0..4 {
                pooled[j] += (attended[j] + r[j]) / rows.len() as f64;
            }
        }
        let want_pred = model.backbone.predictor.apply(&pooled);
        let got_pred = pass.tape.value(pass.pred_scaled).data();
        for (g, w) in got_pred.iter().zip(&want_pred) {
            assert!((g - w).abs() <= 1e-9, "{g} vs {w}");
        }
    }

    #[test]
    fn retrieved_permutation_leaves_forecast_unchanged() {
        let mut model = small_model(60);
        // Non-trivial weights so both branches actually mix.
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        model.params.cross_attn.w_o = Tensor::rand_init(vec![16, 16], 16, &mut rng);
        model.params.self_attn.w_o = Tensor::rand_init(vec![16, 16], 16, &mut rng);
        model.params.ffn_cross.w2 = Tensor::rand_init(vec![64, 16], 64, &mut rng);
        model.params.ffn_self.w2 = Tensor::rand_init(vec![64, 16], 64, &mut rng);

        let query = toy_query(32, 8, 62);
        let retrieved = toy_retrieved(6, 32, 8, 63);
        let base = model.predict(&query, Some(&retrieved)).unwrap();

        let mut shuffled = retrieved.clone();
        shuffled.items.rotate_left(2);
        shuffled.items.swap(0, 3);
        let moved = model.predict(&query, Some(&shuffled)).unwrap();
        for (a, b) in base.point.iter().zip(&moved.point) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn gate_fixed_blends_componentwise() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::row(vec![1.0, 0.0]));
        let s = tape.constant(Tensor::row(vec![0.0, 1.0]));
        let z = gate_fixed(&mut tape, 0.7, c, s).unwrap();
        let got = tape.value(z).data();
        assert!((got[0] - 0.7).abs() < 1e-15);
        assert!((got[1] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn gate_endpoints_select_single_branch() {
        let model = small_model(70);
        let query = toy_query(32, 8, 71);
        let retrieved = toy_retrieved(4, 32, 8, 72);

        let mut cfg = model.config.clone();
        cfg.lambda = 1.0;
        let full = model.predict_cfg(&cfg, &query, Some(&retrieved)).unwrap();
        cfg.mask = AblationMask {
            q: true,
            r: false,
            cross: true,
        };
        let cross_only = model.predict_cfg(&cfg, &query, Some(&retrieved)).unwrap();
        assert_eq!(full.point, cross_only.point);

        let mut cfg = model.config.clone();
        cfg.lambda = 0.0;
        let full = model.predict_cfg(&cfg, &query, Some(&retrieved)).unwrap();
        cfg.mask = AblationMask {
            q: false,
            r: true,
            cross: false,
        };
        let self_only = model.predict_cfg(&cfg, &query, Some(&retrieved)).unwrap();
        for (a, b) in full.point.iter().zip(&self_only.point) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn learnable_gate_starts_at_midpoint() {
        let mut cfg = small_config();
        cfg.gate_mode = GateMode::Learnable;
        let backbone = FrozenBackbone::init(cfg.t, cfg.l, cfg.d, 24, 80);
        let model = FusionModel::new(cfg.clone(), backbone, 81).unwrap();
        let query = toy_query(32, 8, 82);
        let retrieved = toy_retrieved(4, 32, 8, 83);
        let learnable = model.predict(&query, Some(&retrieved)).unwrap();

        let mut fixed_cfg = cfg.clone();
        fixed_cfg.gate_mode = GateMode::Fixed;
        fixed_cfg.lambda = 0.5;
        let fixed = model.predict_cfg(&fixed_cfg, &query, Some(&retrieved)).unwrap();
        for (a, b) in learnable.point.iter().zip(&fixed.point) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn zeroed_projectors_produce_zero_matrices() {
        let mut model = small_model(90);
        model.params.proj_x = Mlp2::zeros(32, 16, 16);
        model.params.proj_y = Mlp2::zeros(8, 16, 16);
        let query = toy_query(32, 8, 91);
        let retrieved = toy_retrieved(3, 32, 8, 92);
        let pass = model
            .build_forward(&query, Some(&retrieved), false, 0)
            .unwrap();
        // With zero projections, self-branch pools zero rows; at zero-init
        // FFN the pooled summary is exactly zero, so z = λh.
        let z_free = model.backbone.encode(&minmax_scale(&query.x).values);
        let lam = model.config.lambda;
        let want: Vec<f64> = z_free.iter().map(|v| v * lam).collect();
        let got_pred = pass.tape.value(pass.pred_scaled).data();
        let want_pred = model.backbone.predictor.apply(&want);
        for (g, w) in got_pred.iter().zip(&want_pred) {
            assert!((g - w).abs() <= 1e-12);
        }
    }

    #[test]
    fn projection_shapes_follow_config() {
        let cfg = FusionConfig {
            d: 64,
            n_heads: 4,
            k: 15,
            t: 64,
            l: 16,
            dropout_p: 0.0,
            ..FusionConfig::default()
        };
        let backbone = FrozenBackbone::init(64, 16, 64, 32, 100);
        let model = FusionModel::new(cfg, backbone, 101).unwrap();
        let _query = toy_query(64, 16, 102);
        let retrieved = toy_retrieved(15, 64, 16, 103);
        let mut tape = Tape::new();
        let mut bindings = Vec::new();
        let (rx, ry) = model
            .build_projections(&mut tape, &model.config, &retrieved, true, &mut bindings)
            .unwrap();
        assert_eq!(tape.value(rx.unwrap()).shape(), &[15, 64]);
        assert_eq!(tape.value(ry).shape(), &[15, 64]);
    }

    #[test]
    fn identical_retrieved_samples_project_identically() {
        let model = small_model(110);
        let one = toy_retrieved(1, 32, 8, 111);
        let mut retrieved = toy_retrieved(3, 32, 8, 112);
        for item in retrieved.items.iter_mut() {
            item.pair = one.items[0].pair.clone();
        }
        let _query = toy_query(32, 8, 113);
        let mut tape = Tape::new();
        let mut bindings = Vec::new();
        let (rx, _) = model
            .build_projections(&mut tape, &model.config, &retrieved, true, &mut bindings)
            .unwrap();
        let rows = tape.value(rx.unwrap()).data();
        let d = model.config.d;
        for r in 1..3 {
            assert_eq!(&rows[..d], &rows[r * d..(r + 1) * d]);
        }
    }

    #[test]
    fn param_count_example() {
        let cfg = FusionConfig {
            d: 64,
            n_heads: 4,
            k: 15,
            t: 64,
            l: 16,
            head_mode: HeadMode::Point,
            ..FusionConfig::default()
        };
        let backbone = FrozenBackbone::init(64, 16, 64, 128, 120);
        let model = FusionModel::new(cfg, backbone, 121).unwrap();
        let report = count_params(&model);
        let proj_x = report
            .rows
            .iter()
            .find(|r| r.component == "proj_x")
            .unwrap();
        assert_eq!(proj_x.count, 64 * 64 + 64 + 64 * 64 + 64); // 8320
        assert!(proj_x.trainable);
        let frozen: Vec<&ParamRow> = report.rows.iter().filter(|r| !r.trainable).collect();
        assert_eq!(frozen.len(), 2);
        assert_eq!(
            report.trainable_total + report.frozen_total,
            report.rows.iter().map(|r| r.count).sum::<usize>()
        );
    }

    #[test]
    fn mask_parsing_round_trips() {
        for mask in AblationMask::grid() {
            let parsed = AblationMask::parse(&mask.to_string()).unwrap();
            assert_eq!(parsed, mask);
        }
        assert!(AblationMask::parse("").is_err());
        assert!(AblationMask::parse("Q,banana").is_err());
    }
}
