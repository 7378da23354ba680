//! Efficiency accounting: analytic FLOP counts per component (from tensor
//! shapes, machine-independent), measured per-instance inference time, and
//! the trainable/frozen parameter table.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::error::Result;
use crate::fusion::{
    count_params, AblationMask, FusionConfig, FusionModel, GateMode, HeadMode, ParamReport,
    QUANTILE_LEVELS,
};
use crate::retrieval::RetrievedSet;
use crate::series::WindowPair;
use crate::train::BackboneArch;

/// 2·m·n·p for a matmul plus the bias adds.
fn linear_flops(m: u64, n: u64, p: u64, bias: bool) -> u64 {
    2 * m * n * p + if bias { m * p } else { 0 }
}

fn mlp2_flops(rows: u64, d_in: u64, d_hidden: u64, d_out: u64) -> u64 {
    linear_flops(rows, d_in, d_hidden, true)
        + rows * d_hidden // relu
        + linear_flops(rows, d_hidden, d_out, true)
}

fn attention_flops(cfg: &FusionConfig, queries: u64, keys: u64) -> u64 {
    let d = cfg.d as u64;
    let heads = cfg.n_heads as u64;
    let dh = d / heads;
    let per_head = linear_flops(queries, d, dh, false)      // Q
        + 2 * linear_flops(keys, d, dh, false)               // K, V
        + 2 * queries * keys * dh                            // logits
        + queries * keys                                     // scaling
        + 3 * queries * keys                                 // softmax
        + 2 * queries * keys * dh; // weighted values
    heads * per_head + linear_flops(queries, d, d, false) // output map
}

/// Analytic FLOPs per named component for one forward pass.
pub fn component_flops(cfg: &FusionConfig, arch: &BackboneArch) -> Vec<(String, u64)> {
    let t = cfg.t as u64;
    let l = cfg.l as u64;
    let d = cfg.d as u64;
    let k = cfg.k as u64;
    let head_width = cfg.head_width() as u64;

    let mut rows = vec![
        (
            "backbone.encoder".to_string(),
            mlp2_flops(1, t, arch.d_hid as u64, d),
        ),
        ("head".to_string(), linear_flops(1, d, head_width, true)),
        ("proj_x".to_string(), mlp2_flops(k, t, d, d)),
        ("proj_y".to_string(), mlp2_flops(k, l, d, d)),
        (
            "cross_attn".to_string(),
            attention_flops(cfg, 1, k) + d // h residual
                + mlp2_flops(1, d, 4 * d, d)
                + d, // ffn residual
        ),
        (
            "self_attn".to_string(),
            attention_flops(cfg, k, k)
                + k * d
                + mlp2_flops(k, d, 4 * d, d)
                + k * d
                + k * d, // pooling
        ),
    ];
    let gate = match cfg.gate_mode {
        GateMode::Fixed => 3 * d,
        GateMode::Learnable => mlp2_flops(1, 2 * d, d, 1) + 1 + 2 * d + d,
    };
    rows.push(("gate".to_string(), gate));
    rows.push(("descale".to_string(), 2 * head_width));
    rows
}

/// Total forward FLOPs for one query under a component mask.
pub fn mask_flops(cfg: &FusionConfig, arch: &BackboneArch, mask: AblationMask) -> u64 {
    let by_name: std::collections::HashMap<String, u64> =
        component_flops(cfg, arch).into_iter().collect();
    let mut total = by_name["head"] + by_name["descale"];
    if mask.q || mask.cross {
        total += by_name["backbone.encoder"];
    }
    if mask.cross {
        total += by_name["proj_x"] + by_name["cross_attn"];
    }
    if mask.r {
        total += by_name["proj_y"] + by_name["self_attn"];
    }
    if mask.r && mask.cross {
        total += by_name["gate"];
    }
    total
}

/// Mean seconds per forward pass, measured over `runs` repetitions.
pub fn measure_inference(
    model: &FusionModel,
    mask: AblationMask,
    query: &WindowPair,
    retrieved: Option<&RetrievedSet>,
    runs: usize,
) -> Result<f64> {
    assert!(runs >= 1);
    let mut cfg = model.config.clone();
    cfg.mask = mask;
    let retrieved = if mask.needs_retrieval() { retrieved } else { None };
    // One warm pass outside the clock.
    let warm = model.predict_cfg(&cfg, query, retrieved)?;
    std::hint::black_box(&warm);
    let start = Instant::now();
    for _ in 0..runs {
        let f = model.predict_cfg(&cfg, query, retrieved)?;
        std::hint::black_box(&f);
    }
    Ok(start.elapsed().as_secs_f64() / runs as f64)
}

/// Parameter table CSV: `component,params,trainable,fraction`.
pub fn write_params_csv(path: &Path, report: &ParamReport) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "component,params,trainable,fraction")?;
    let total = report.total() as f64;
    for row in &report.rows {
        writeln!(
            out,
            "{},{},{},{:.3}",
            row.component,
            row.count,
            if row.trainable { "yes" } else { "no" },
            row.count as f64 / total
        )?;
    }
    writeln!(out, "total_trainable,{},yes,{:.3}", report.trainable_total, report.trainable_fraction())?;
    writeln!(
        out,
        "total_frozen,{},no,{:.3}",
        report.frozen_total,
        report.frozen_total as f64 / total
    )?;
    Ok(())
}

/// FLOPs table CSV: `mask,flops`, one row per grid mask.
pub fn write_flops_csv(path: &Path, cfg: &FusionConfig, arch: &BackboneArch) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "mask,flops")?;
    for mask in AblationMask::grid() {
        writeln!(out, "{},{}", mask, mask_flops(cfg, arch, mask))?;
    }
    Ok(())
}

/// Inference-time table CSV: `mask,mean_ms`. Wall clock, run-dependent.
pub fn write_inference_csv(
    path: &Path,
    model: &FusionModel,
    query: &WindowPair,
    retrieved: &RetrievedSet,
    runs: usize,
) -> Result<Vec<(AblationMask, f64)>> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "mask,mean_ms")?;
    let mut rows = Vec::new();
    for mask in AblationMask::grid() {
        let secs = measure_inference(model, mask, query, Some(retrieved), runs)?;
        writeln!(out, "{},{:.6}", mask, secs * 1e3)?;
        rows.push((mask, secs));
    }
    Ok(rows)
}

/// Convenience: parameter report of a model (re-exported shape).
pub fn param_report(model: &FusionModel) -> ParamReport {
    count_params(model)
}

/// The quantile count the FLOP model assumes for quantile heads.
pub fn quantile_count(cfg: &FusionConfig) -> usize {
    match cfg.head_mode {
        HeadMode::Point => 1,
        HeadMode::Quantile => QUANTILE_LEVELS.len(),
    }
}
