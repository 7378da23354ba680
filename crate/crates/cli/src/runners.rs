//! One runner per verb, wiring the core library to files on disk. Every
//! runner writes a manifest of its fully resolved configuration into the
//! output directory before doing any work.

use std::path::Path;
use std::sync::Arc;

use xrag_core::checkpoint::{load_backbone, load_model, save_backbone, save_model};
use xrag_core::efficiency::{
    mask_flops, write_flops_csv, write_inference_csv, write_params_csv,
};
use xrag_core::error::{Result, XragError};
use xrag_core::eval::{
    run_ablation_grid, run_cross_dataset, run_k_sweep, run_lambda_sweep, run_random_retrieval,
    run_small_kb, split_channels, zero_shot_eval, BackbonePool, EvalSpec, RetrievalMode,
};
use xrag_core::figures::{
    svg_bar_chart, svg_forecast_overlay, svg_line_chart, write_ablation_csv, write_attention_csv,
    write_eval_csv, write_fraction_csv, write_k_sweep_csv, write_lambda_csv, write_timing_csv,
    SvgSeries,
};
use xrag_core::fusion::{
    count_params, AblationMask, FrozenBackbone, FusionConfig, FusionModel, GateMode, HeadMode,
};
use xrag_core::retrieval::{
    build_kb, load_index, save_index, time_retrieval, topk, Exclusion, KnowledgeBase,
    SimilarityMetric,
};
use xrag_core::series::{load_channels, make_windows, WindowPair};
use xrag_core::tape::SplitMix64;
use xrag_core::toy::{gen_toy_corpus, read_windows_csv, write_windows_csv, ToyCorpusSpec};
use xrag_core::train::{
    pretrain_backbone, train_fusion, write_loss_csv, BackboneArch, LossMode, TrainConfig,
};

use crate::args::{ArgError, Resolved};

pub fn run(r: &Resolved) -> std::result::Result<(), ArgError> {
    let out = r.out_dir()?;
    r.write_manifest(&out)?;
    match r.verb {
        "gen-toy" => gen_toy(r, &out)?,
        "build-index" => build_index(r, &out)?,
        "pretrain-backbone" => pretrain(r, &out)?,
        "train" => train(r, &out)?,
        "eval" => eval(r, &out)?,
        "scenario" => scenario(r, &out)?,
        "ablate" => ablate(r, &out)?,
        "sweep-lambda" => sweep_lambda(r, &out)?,
        "export-attention" => export_attention(r, &out)?,
        "report-efficiency" => report_efficiency(r, &out)?,
        other => {
            return Err(ArgError::Usage(format!("unhandled verb {other}")));
        }
    }
    Ok(())
}

fn parse_metric(name: &str, backbone: Option<&FrozenBackbone>) -> Result<SimilarityMetric> {
    match name {
        "cosine" => Ok(SimilarityMetric::CosineData),
        "euclidean" => Ok(SimilarityMetric::EuclideanData),
        "correlation" => Ok(SimilarityMetric::CorrelationData),
        "latent" => match backbone {
            Some(bb) => Ok(SimilarityMetric::EuclideanLatent(Arc::new(bb.clone()))),
            None => Err(XragError::InvalidConfig(
                "latent metric needs a backbone checkpoint in scope".into(),
            )),
        },
        other => Err(XragError::InvalidConfig(format!(
            "unknown metric {other:?} (cosine | euclidean | correlation | latent)"
        ))),
    }
}

fn parse_mode(raw: &str) -> Result<RetrievalMode> {
    if raw == "topk" {
        return Ok(RetrievalMode::TopK);
    }
    if let Some(seed) = raw.strip_prefix("random:") {
        let seed = seed
            .parse()
            .map_err(|_| XragError::InvalidConfig(format!("bad retrieval mode {raw:?}")))?;
        return Ok(RetrievalMode::Random { seed });
    }
    if let Some(rest) = raw.strip_prefix("mixed:") {
        let parts: Vec<&str> = rest.split(':').collect();
        if parts.len() == 3 {
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| XragError::InvalidConfig(format!("bad retrieval mode {raw:?}")))
            };
            return Ok(RetrievalMode::Mixed {
                n_relevant: parse(parts[0])?,
                n_irrelevant: parse(parts[1])?,
                seed: parse(parts[2])? as u64,
            });
        }
    }
    Err(XragError::InvalidConfig(format!(
        "bad retrieval mode {raw:?} (topk | random:SEED | mixed:NR:NI:SEED)"
    )))
}

fn parse_loss(raw: &str) -> Result<(LossMode, HeadMode)> {
    match raw {
        "quantile" => Ok((LossMode::Quantile, HeadMode::Quantile)),
        "mse" => Ok((LossMode::Mse, HeadMode::Point)),
        other => Err(XragError::InvalidConfig(format!(
            "unknown loss mode {other:?} (quantile | mse)"
        ))),
    }
}

fn parse_gate(raw: &str) -> Result<GateMode> {
    match raw {
        "fixed" => Ok(GateMode::Fixed),
        "learnable" => Ok(GateMode::Learnable),
        other => Err(XragError::InvalidConfig(format!(
            "unknown gate mode {other:?} (fixed | learnable)"
        ))),
    }
}

fn windows_from(path: &str) -> Result<Vec<WindowPair>> {
    read_windows_csv(Path::new(path))
}

fn gen_toy(r: &Resolved, out: &Path) -> Result<()> {
    let spec = ToyCorpusSpec {
        n_relevant_families: r.usize("relevant")?,
        n_irrelevant_families: r.usize("irrelevant")?,
        samples_per_family: r.usize("samples")?,
        noise_sigma: r.f64("noise")?,
        seed: r.u64("seed")?,
        t: r.usize("t")?,
        l: r.usize("l")?,
    };
    let corpus = gen_toy_corpus(&spec)?;
    write_windows_csv(&out.join("pretrain.csv"), &corpus.pretrain)?;
    write_windows_csv(&out.join("kb.csv"), &corpus.kb)?;
    write_windows_csv(&out.join("test.csv"), &corpus.test)?;
    println!(
        "toy corpus: {} pretrain / {} kb / {} test windows",
        corpus.pretrain.len(),
        corpus.kb.len(),
        corpus.test.len()
    );
    Ok(())
}

fn build_index(r: &Resolved, out: &Path) -> std::result::Result<(), ArgError> {
    let kb = match (r.opt_str("windows"), r.opt_str("data")) {
        (Some(windows), None) => build_kb(windows_from(windows)?)?,
        (None, Some(data)) => {
            let t = r.usize("t")?;
            let l = r.usize("l")?;
            let stride = r.usize("stride")?;
            let channels = load_channels(Path::new(data))?;
            let splits = split_channels(&channels, r.f64("train-frac")?, r.f64("test-frac")?)?;
            let mut train_windows = Vec::new();
            let mut test_windows = Vec::new();
            for split in &splits {
                train_windows.extend(make_windows(&split.train, t, l, stride)?);
                // Non-overlapping horizons for evaluation queries.
                test_windows.extend(make_windows(&split.test, t, l, l)?);
            }
            write_windows_csv(&out.join("train_windows.csv"), &train_windows)?;
            write_windows_csv(&out.join("test_windows.csv"), &test_windows)?;
            build_kb(train_windows)?
        }
        _ => {
            return Err(ArgError::Usage(
                "build-index needs exactly one of --windows or --data".into(),
            ))
        }
    };
    save_index(&kb, &out.join("index.xrag"))?;
    println!("index: {} entries (T={}, L={})", kb.len(), kb.window_len(), kb.horizon_len());
    Ok(())
}

fn train_config(r: &Resolved, loss_mode: LossMode) -> Result<TrainConfig> {
    Ok(TrainConfig {
        lr: r.f64("lr")?,
        weight_decay: r.f64("wd")?,
        batch_size: r.usize("batch")?,
        steps: r.usize("steps")?,
        seed: r.u64("seed")?,
        loss_mode,
        ..TrainConfig::default()
    })
}

fn pretrain(r: &Resolved, out: &Path) -> Result<()> {
    let windows = windows_from(r.str("windows")?)?;
    if windows.is_empty() {
        return Err(XragError::EmptyInput("pretraining corpus is empty"));
    }
    let arch = BackboneArch {
        t: windows[0].x.len(),
        l: windows[0].y.len(),
        d: r.usize("d")?,
        d_hid: r.usize("dhid")?,
    };
    let cfg = train_config(r, LossMode::Mse)?;
    let (backbone, curve) = pretrain_backbone(&windows, arch, &cfg)?;
    save_backbone(&out.join("backbone.xrgw"), &backbone)?;
    write_loss_csv(&out.join("pretrain_loss.csv"), &curve)?;
    println!(
        "backbone trained: {} steps, final loss {:.6}",
        curve.len(),
        curve.last().map(|(_, l)| *l).unwrap_or(f64::NAN)
    );
    Ok(())
}

fn train(r: &Resolved, out: &Path) -> Result<()> {
    let windows = windows_from(r.str("windows")?)?;
    let kb = load_index(Path::new(r.str("index")?))?;
    let backbone = load_backbone(Path::new(r.str("backbone")?))?;
    let (loss_mode, head_mode) = parse_loss(r.str("loss")?)?;
    let metric = parse_metric(r.str("metric")?, Some(&backbone))?;
    let config = FusionConfig {
        d: backbone.d,
        n_heads: r.usize("heads")?,
        k: r.usize("k")?,
        lambda: r.f64("lambda")?,
        dropout_p: r.f64("dropout")?,
        gate_mode: parse_gate(r.str("gate")?)?,
        head_mode,
        head_trainable: false,
        mask: AblationMask::parse(r.str("mask")?)?,
        t: backbone.t,
        l: backbone.l,
    };
    let mut model = FusionModel::new(config, backbone, r.u64("seed")?)?;
    let cfg = train_config(r, loss_mode)?;
    let curve = train_fusion(&mut model, &kb, &windows, &cfg, &metric)?;
    save_model(&out.join("model.xrgw"), &model)?;
    write_loss_csv(&out.join("train_loss.csv"), &curve)?;
    println!(
        "fusion trained: {} steps, final loss {:.6}",
        curve.len(),
        curve.last().map(|(_, l)| *l).unwrap_or(f64::NAN)
    );
    Ok(())
}

fn spec_for_model(r: &Resolved, model: &FusionModel, target: &str, kb_source: &str) -> Result<EvalSpec> {
    let metric = parse_metric(r.str("metric")?, Some(&model.backbone))?;
    let mut spec = EvalSpec::new(target, kb_source, model.config.k, metric);
    spec.lambda = model.config.lambda;
    spec.mask = model.config.mask;
    if let Some(k) = r.opt_usize("k")? {
        spec.k = k;
    }
    if let Some(lambda) = r.opt_f64("lambda")? {
        spec.lambda = lambda;
    }
    if let Some(mask) = r.opt_str("mask") {
        spec.mask = AblationMask::parse(mask)?;
    }
    Ok(spec)
}

fn eval(r: &Resolved, out: &Path) -> Result<()> {
    let model = load_model(Path::new(r.str("model")?))?;
    let kb = load_index(Path::new(r.str("index")?))?;
    let queries = windows_from(r.str("test")?)?;
    let mut spec = spec_for_model(r, &model, r.str("test")?, r.str("index")?)?;
    spec.retrieval = parse_mode(r.str("mode")?)?;
    spec.export_attention = r.bool("attention")?;

    let report = zero_shot_eval(&model, &spec, &kb, &queries)?;
    write_eval_csv(&out.join("report.csv"), &[&report])?;
    if spec.export_attention {
        write_attention_csv(&out.join("attention.csv"), &report.attention)?;
    }
    if r.bool("svg")? {
        for (i, (pred, query)) in report.predictions.iter().zip(&queries).enumerate().take(3) {
            svg_forecast_overlay(
                &out.join(format!("forecast_{i}.svg")),
                &query.x,
                &query.y,
                pred,
            )?;
        }
    }
    println!(
        "eval: mse={:.6} mae={:.6} over {} queries",
        report.mse, report.mae, report.n_queries
    );
    Ok(())
}

fn scenario(r: &Resolved, out: &Path) -> std::result::Result<(), ArgError> {
    let model = load_model(Path::new(r.str("model")?))?;
    let queries = windows_from(r.str("test")?)?;
    let kind = r.str("kind")?;
    match kind {
        "k-sweep" => {
            let index = r.opt_str("index").ok_or_else(|| {
                ArgError::Usage("scenario --kind k-sweep needs --index".into())
            })?;
            let kb = load_index(Path::new(index))?;
            let spec = spec_for_model(r, &model, r.str("test")?, index)?;
            let ks = r.usize_list("ks")?;
            let rows = run_k_sweep(&model, &spec, &kb, &queries, &ks)?;
            let table: Vec<(usize, f64, f64)> =
                rows.iter().map(|(k, rep)| (*k, rep.mse, rep.mae)).collect();
            write_k_sweep_csv(&out.join("k_sweep.csv"), &table)?;
            if r.bool("svg")? {
                let series = vec![SvgSeries {
                    label: "mse".into(),
                    points: table.iter().map(|(k, mse, _)| (*k as f64, *mse)).collect(),
                }];
                svg_line_chart(&out.join("k_sweep.svg"), "mse by k", &series)?;
            }
            println!("k-sweep: {} rows", table.len());
        }
        "random" => {
            let index = r.opt_str("index").ok_or_else(|| {
                ArgError::Usage("scenario --kind random needs --index".into())
            })?;
            let kb = load_index(Path::new(index))?;
            let spec = spec_for_model(r, &model, r.str("test")?, index)?;
            let ks = r.usize_list("ks")?;
            let rows = run_random_retrieval(&model, &spec, &kb, &queries, &ks, r.u64("seeds")?)?;
            write_k_sweep_csv(&out.join("random_retrieval.csv"), &rows)?;
            println!("random retrieval: {} rows", rows.len());
        }
        "small-kb" => {
            let windows = r.opt_str("windows").ok_or_else(|| {
                ArgError::Usage("scenario --kind small-kb needs --windows".into())
            })?;
            let train_windows = windows_from(windows)?;
            let spec = spec_for_model(r, &model, r.str("test")?, windows)?;
            let fractions = r.f64_list("fractions")?;
            let rows = run_small_kb(&model, &spec, &train_windows, &queries, &fractions)?;
            let table: Vec<(f64, f64, f64)> =
                rows.iter().map(|(f, rep)| (*f, rep.mse, rep.mae)).collect();
            write_fraction_csv(&out.join("small_kb.csv"), &table)?;
            println!("small-kb: {} rows", table.len());
        }
        "cross-dataset" => {
            let kb_windows = r.opt_str("kb-windows").ok_or_else(|| {
                ArgError::Usage("scenario --kind cross-dataset needs --kb-windows".into())
            })?;
            let kb_pairs = windows_from(kb_windows)?;
            let spec = spec_for_model(r, &model, r.str("test")?, kb_windows)?;
            let (with, baseline) = run_cross_dataset(&model, &spec, kb_pairs, &queries)?;
            write_eval_csv(&out.join("cross_dataset.csv"), &[&with, &baseline])?;
            println!(
                "cross-dataset: mse={:.6} baseline={:.6}",
                with.mse, baseline.mse
            );
        }
        other => {
            return Err(ArgError::Usage(format!(
                "unknown scenario kind {other:?} (k-sweep | random | small-kb | cross-dataset)"
            )))
        }
    }
    Ok(())
}

fn study_inputs(
    r: &Resolved,
) -> Result<(Vec<WindowPair>, KnowledgeBase, Vec<WindowPair>, FusionConfig, BackbonePool, TrainConfig, EvalSpec)>
{
    let pretrain_windows = windows_from(r.str("pretrain")?)?;
    let kb_windows = windows_from(r.str("kb")?)?;
    let queries = windows_from(r.str("test")?)?;
    if pretrain_windows.is_empty() || kb_windows.is_empty() || queries.is_empty() {
        return Err(XragError::EmptyInput("study inputs must be non-empty"));
    }
    let t = pretrain_windows[0].x.len();
    let l = pretrain_windows[0].y.len();
    let kb = build_kb(kb_windows)?;

    let fusion_cfg = FusionConfig {
        d: r.usize("d")?,
        n_heads: r.usize("heads")?,
        k: r.usize("k")?,
        lambda: r.opt_f64("lambda")?.unwrap_or(0.7),
        dropout_p: r.f64("dropout")?,
        gate_mode: GateMode::Fixed,
        head_mode: HeadMode::Quantile,
        head_trainable: false,
        mask: AblationMask::FULL,
        t,
        l,
    };
    let arch = BackboneArch {
        t,
        l,
        d: fusion_cfg.d,
        d_hid: r.usize("dhid")?,
    };
    let pool = BackbonePool::new(
        arch,
        TrainConfig {
            steps: r.usize("pretrain-steps")?,
            batch_size: r.usize("batch")?,
            loss_mode: LossMode::Mse,
            ..TrainConfig::default()
        },
    );
    let fusion_tc = TrainConfig {
        steps: r.usize("steps")?,
        batch_size: r.usize("batch")?,
        lr: r.f64("lr")?,
        loss_mode: LossMode::Quantile,
        ..TrainConfig::default()
    };
    let metric = parse_metric(r.str("metric")?, None).or_else(|_| {
        // Latent retrieval during a study uses the per-seed backbone, which
        // does not exist yet here; restrict studies to data-space metrics.
        Err(XragError::InvalidConfig(
            "studies support data-space metrics only".into(),
        ))
    })?;
    let mut spec = EvalSpec::new(r.str("test")?, r.str("kb")?, fusion_cfg.k, metric);
    spec.retrieval = parse_mode(r.str("mode")?)?;
    Ok((pretrain_windows, kb, queries, fusion_cfg, pool, fusion_tc, spec))
}

fn ablate(r: &Resolved, out: &Path) -> Result<()> {
    let (pretrain_windows, kb, queries, fusion_cfg, pool, fusion_tc, mut spec) = study_inputs(r)?;
    spec.lambda = fusion_cfg.lambda;
    let seeds: Vec<u64> = (0..r.u64("seeds")?).collect();
    let rows = run_ablation_grid(
        &pretrain_windows,
        &kb,
        &queries,
        &AblationMask::grid(),
        &seeds,
        &fusion_cfg,
        &pool,
        &fusion_tc,
        &spec,
    )?;
    write_ablation_csv(&out.join("ablation.csv"), &rows)?;
    for row in &rows {
        println!("{:<10} mse={:.6} mae={:.6}", row.mask.to_string(), row.mse, row.mae);
    }
    Ok(())
}

fn sweep_lambda(r: &Resolved, out: &Path) -> Result<()> {
    let (pretrain_windows, kb, queries, fusion_cfg, pool, fusion_tc, spec) = study_inputs(r)?;
    let lambdas = r.f64_list("lambdas")?;
    let seeds: Vec<u64> = (0..r.u64("seeds")?).collect();
    let rows = run_lambda_sweep(
        &pretrain_windows,
        &kb,
        &queries,
        &lambdas,
        r.bool("learnable")?,
        &fusion_cfg,
        &pool,
        &fusion_tc,
        &spec,
        &seeds,
    )?;
    write_lambda_csv(&out.join("lambda_sweep.csv"), &rows)?;
    for row in &rows {
        match row.lambda {
            Some(l) => println!("lambda={l:<4} mse={:.6}", row.mse),
            None => println!("learnable  mse={:.6}", row.mse),
        }
    }
    Ok(())
}

fn export_attention(r: &Resolved, out: &Path) -> Result<()> {
    let model = load_model(Path::new(r.str("model")?))?;
    let kb = load_index(Path::new(r.str("index")?))?;
    let queries = windows_from(r.str("test")?)?;
    let mut spec = spec_for_model(r, &model, r.str("test")?, r.str("index")?)?;
    spec.retrieval = parse_mode(r.str("mode")?)?;
    spec.export_attention = true;
    let report = zero_shot_eval(&model, &spec, &kb, &queries)?;
    write_attention_csv(&out.join("attention.csv"), &report.attention)?;

    if r.bool("svg")? {
        let per_query = model.config.n_heads * spec.k;
        for (qi, rows) in report
            .attention
            .chunks(per_query)
            .take(r.usize("max-queries")?)
            .enumerate()
        {
            // Mean over heads per rank.
            let mut labels = Vec::with_capacity(spec.k);
            let mut weights = vec![0.0; spec.k];
            for row in rows {
                weights[row.rank] += row.weight / model.config.n_heads as f64;
            }
            for rank in 0..spec.k {
                let kb_index = rows.iter().find(|r| r.rank == rank).map(|r| r.kb_index);
                labels.push(format!("#{}", kb_index.unwrap_or(rank)));
            }
            svg_bar_chart(
                &out.join(format!("attention_q{qi}.svg")),
                &format!("mean attention, query {qi}"),
                &labels,
                &weights,
            )?;
        }
    }
    println!("attention rows: {}", report.attention.len());
    Ok(())
}

fn report_efficiency(r: &Resolved, out: &Path) -> Result<()> {
    let t = r.usize("t")?;
    let l = r.usize("l")?;
    let d = r.usize("d")?;
    let d_hid = r.usize("dhid")?;
    let seed = r.u64("seed")?;
    let cfg = FusionConfig {
        d,
        n_heads: r.usize("heads")?,
        k: r.usize("k")?,
        lambda: 0.7,
        dropout_p: 0.0,
        gate_mode: GateMode::Fixed,
        head_mode: HeadMode::Quantile,
        head_trainable: false,
        mask: AblationMask::FULL,
        t,
        l,
    };
    let arch = BackboneArch { t, l, d, d_hid };
    let backbone = FrozenBackbone::init(t, l, d, d_hid, seed);
    let model = FusionModel::new(cfg.clone(), backbone, seed)?;

    // Parameter table (Table-style rows: frozen backbone, trainable fusion).
    write_params_csv(&out.join("params.csv"), &count_params(&model))?;

    // Analytic FLOPs per component mask.
    write_flops_csv(&out.join("flops.csv"), &cfg, &arch)?;

    // Per-instance inference time per mask.
    let query = synth_window(t, l, 0xE0);
    let probe_kb = build_kb((0..cfg.k.max(2)).map(|j| synth_window_src(t, l, 0xF0 + j as u64, &format!("probe{j}"))).collect())?;
    let retrieved = topk(
        &probe_kb,
        &query,
        cfg.k,
        &SimilarityMetric::CosineData,
        Exclusion::None,
    )?;
    let runs = r.usize("runs")?;
    let timing = write_inference_csv(&out.join("inference.csv"), &model, &query, &retrieved, runs)?;

    // Retrieval timing at desk scale: data-space search versus encoding the
    // whole base with a small toy encoder first.
    let toy_t = 64;
    let toy_encoder = FrozenBackbone::init(toy_t, 16, 32, 64, seed ^ 0xABCD);
    let kb_size = r.usize("kb-size")?;
    let n_queries = r.usize("queries")?;
    let kb_windows: Vec<WindowPair> = (0..kb_size)
        .map(|j| synth_window_src(toy_t, 16, j as u64, &format!("kb{j}")))
        .collect();
    let timing_kb = build_kb(kb_windows)?;
    let timing_queries: Vec<WindowPair> = (0..n_queries)
        .map(|j| synth_window_src(toy_t, 16, 0x5EED_0000 + j as u64, &format!("q{j}")))
        .collect();
    let data_timing = time_retrieval(&timing_kb, &timing_queries, &SimilarityMetric::CosineData, 15)?;
    let latent_metric = SimilarityMetric::EuclideanLatent(Arc::new(toy_encoder));
    let latent_timing = time_retrieval(&timing_kb, &timing_queries, &latent_metric, 15)?;
    write_timing_csv(&out.join("retrieval_timing.csv"), &[data_timing.clone(), latent_timing.clone()])?;

    let q_only = AblationMask {
        q: true,
        r: false,
        cross: false,
    };
    let t_q = timing
        .iter()
        .find(|(m, _)| *m == q_only)
        .map(|(_, s)| *s)
        .unwrap_or(f64::NAN);
    let t_full = timing
        .iter()
        .find(|(m, _)| *m == AblationMask::FULL)
        .map(|(_, s)| *s)
        .unwrap_or(f64::NAN);
    println!(
        "inference: backbone-only {:.3} ms, full {:.3} ms ({:+.1}% overhead)",
        t_q * 1e3,
        t_full * 1e3,
        (t_full / t_q - 1.0) * 100.0
    );
    println!(
        "retrieval ({} entries): data {:.3}s vs latent {:.3}s",
        kb_size,
        data_timing.total_seconds(),
        latent_timing.total_seconds()
    );
    println!(
        "flops: backbone-only {} vs full {}",
        mask_flops(&cfg, &arch, q_only),
        mask_flops(&cfg, &arch, AblationMask::FULL)
    );
    Ok(())
}

fn synth_window(t: usize, l: usize, seed: u64) -> WindowPair {
    synth_window_src(t, l, seed, "synthetic")
}

fn synth_window_src(t: usize, l: usize, seed: u64, source: &str) -> WindowPair {
    let mut rng = SplitMix64::new(seed);
    WindowPair {
        x: (0..t).map(|_| rng.next_f64() * 2.0 - 1.0).collect(),
        y: (0..l).map(|_| rng.next_f64() * 2.0 - 1.0).collect(),
        source_id: source.to_string(),
        start_index: 0,
    }
}
