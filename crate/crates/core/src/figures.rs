//! CSV report writers with stable headers, plus minimal hand-rolled SVG
//! charts (line and bar) so figure data can be eyeballed without any
//! external tooling.

use std::io::Write;
use std::path::Path;

use crate::error::Result;
use crate::eval::{AblationRow, AttentionRow, ExperimentReport, LambdaRow};
use crate::retrieval::TimingReport;

fn writer(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(std::io::BufWriter::new(std::fs::File::create(path)?))
}

/// Header: `target,kb_source,metric,k,lambda,mask,retrieval,mse,mae,n_queries`.
pub fn write_eval_csv(path: &Path, reports: &[&ExperimentReport]) -> Result<()> {
    let mut out = writer(path)?;
    writeln!(out, "target,kb_source,metric,k,lambda,mask,retrieval,mse,mae,n_queries")?;
    for r in reports {
        writeln!(
            out,
            "{},{},{},{},{:?},{},{},{:?},{:?},{}",
            r.target, r.kb_source, r.metric_name, r.k, r.lambda, r.mask, r.retrieval, r.mse, r.mae, r.n_queries
        )?;
    }
    Ok(())
}

/// Header: `k,mse,mae`.
pub fn write_k_sweep_csv(path: &Path, rows: &[(usize, f64, f64)]) -> Result<()> {
    let mut out = writer(path)?;
    writeln!(out, "k,mse,mae")?;
    for (k, mse, mae) in rows {
        writeln!(out, "{k},{mse:?},{mae:?}")?;
    }
    Ok(())
}

/// Header: `fraction,mse,mae`.
pub fn write_fraction_csv(path: &Path, rows: &[(f64, f64, f64)]) -> Result<()> {
    let mut out = writer(path)?;
    writeln!(out, "fraction,mse,mae")?;
    for (fraction, mse, mae) in rows {
        writeln!(out, "{fraction:?},{mse:?},{mae:?}")?;
    }
    Ok(())
}

/// Header: `query_id,head,rank,kb_index,weight,similarity_score`.
pub fn write_attention_csv(path: &Path, rows: &[AttentionRow]) -> Result<()> {
    let mut out = writer(path)?;
    writeln!(out, "query_id,head,rank,kb_index,weight,similarity_score")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{:?},{:?}",
            r.query_id, r.head, r.rank, r.kb_index, r.weight, r.score
        )?;
    }
    Ok(())
}

/// Header: `mask,mse,mae`.
pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut out = writer(path)?;
    writeln!(out, "mask,mse,mae")?;
    for r in rows {
        writeln!(out, "{},{:?},{:?}", r.mask, r.mse, r.mae)?;
    }
    Ok(())
}

/// Header: `lambda,mse,mae`; the learnable-gate row says `learnable`.
pub fn write_lambda_csv(path: &Path, rows: &[LambdaRow]) -> Result<()> {
    let mut out = writer(path)?;
    writeln!(out, "lambda,mse,mae")?;
    for r in rows {
        match r.lambda {
            Some(l) => writeln!(out, "{l:?},{:?},{:?}", r.mse, r.mae)?,
            None => writeln!(out, "learnable,{:?},{:?}", r.mse, r.mae)?,
        }
    }
    Ok(())
}

/// Header: `metric,phase,seconds`, one embedding/search/total triple per
/// report. Wall-clock values; inherently run-dependent.
pub fn write_timing_csv(path: &Path, reports: &[TimingReport]) -> Result<()> {
    let mut out = writer(path)?;
    writeln!(out, "metric,phase,seconds")?;
    for r in reports {
        writeln!(out, "{},embedding,{:?}", r.metric, r.embed_seconds)?;
        writeln!(out, "{},search,{:?}", r.metric, r.search_seconds)?;
        writeln!(out, "{},total,{:?}", r.metric, r.total_seconds())?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// SVG rendering
// ---------------------------------------------------------------------------

const CHART_W: f64 = 640.0;
const CHART_H: f64 = 400.0;
const MARGIN: f64 = 48.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 1000.0 || v.abs() < 0.01 {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

/// A named polyline.
pub struct SvgSeries {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Writes a minimal line chart: axes, min/max ticks, one polyline per
/// series and a text legend.
pub fn svg_line_chart(path: &Path, title: &str, series: &[SvgSeries]) -> Result<()> {
    let mut out = writer(path)?;
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in &pts {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if !x0.is_finite() {
        x0 = 0.0;
        x1 = 1.0;
        y0 = 0.0;
        y1 = 1.0;
    }
    if (x1 - x0).abs() < 1e-12 {
        x1 = x0 + 1.0;
    }
    if (y1 - y0).abs() < 1e-12 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (CHART_W - 2.0 * MARGIN);
    let sy = |y: f64| CHART_H - MARGIN - (y - y0) / (y1 - y0) * (CHART_H - 2.0 * MARGIN);

    writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{CHART_W}\" height=\"{CHART_H}\" viewBox=\"0 0 {CHART_W} {CHART_H}\">"
    )?;
    writeln!(out, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>")?;
    writeln!(
        out,
        "<text x=\"{}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{title}</text>",
        CHART_W / 2.0
    )?;
    // Axes.
    writeln!(
        out,
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/><line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>",
        m = MARGIN,
        b = CHART_H - MARGIN,
        r = CHART_W - MARGIN,
        t = MARGIN
    )?;
    for (v, x, y, anchor) in [
        (x0, MARGIN, CHART_H - MARGIN + 16.0, "middle"),
        (x1, CHART_W - MARGIN, CHART_H - MARGIN + 16.0, "middle"),
    ] {
        writeln!(
            out,
            "<text x=\"{x}\" y=\"{y}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"{anchor}\">{}</text>",
            fmt_tick(v)
        )?;
    }
    for (v, y) in [(y0, CHART_H - MARGIN), (y1, MARGIN)] {
        writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{}</text>",
            MARGIN - 4.0,
            y + 3.0,
            fmt_tick(v)
        )?;
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path_d: Vec<String> = s
            .points
            .iter()
            .map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y)))
            .collect();
        writeln!(
            out,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            path_d.join(" ")
        )?;
        writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{color}\">{}</text>",
            CHART_W - MARGIN - 140.0,
            MARGIN + 14.0 * (i as f64 + 1.0),
            s.label
        )?;
    }
    writeln!(out, "</svg>")?;
    Ok(())
}

/// Bar chart with one labelled bar per value.
pub fn svg_bar_chart(path: &Path, title: &str, labels: &[String], values: &[f64]) -> Result<()> {
    assert_eq!(labels.len(), values.len());
    let mut out = writer(path)?;
    let vmax = values.iter().cloned().fold(f64::EPSILON, f64::max);
    let n = values.len().max(1) as f64;
    let band = (CHART_W - 2.0 * MARGIN) / n;
    writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{CHART_W}\" height=\"{CHART_H}\" viewBox=\"0 0 {CHART_W} {CHART_H}\">"
    )?;
    writeln!(out, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>")?;
    writeln!(
        out,
        "<text x=\"{}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{title}</text>",
        CHART_W / 2.0
    )?;
    writeln!(
        out,
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>",
        m = MARGIN,
        b = CHART_H - MARGIN,
        r = CHART_W - MARGIN
    )?;
    for (i, (label, v)) in labels.iter().zip(values).enumerate() {
        let h = v / vmax * (CHART_H - 2.0 * MARGIN);
        let x = MARGIN + i as f64 * band + band * 0.15;
        let y = CHART_H - MARGIN - h;
        writeln!(
            out,
            "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{h:.2}\" fill=\"{}\"/>",
            band * 0.7,
            PALETTE[0]
        )?;
        writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"9\" text-anchor=\"middle\">{label}</text>",
            x + band * 0.35,
            CHART_H - MARGIN + 14.0
        )?;
    }
    writeln!(out, "</svg>")?;
    Ok(())
}

/// Forecast overlay: exactly three series — the input window, the true
/// horizon and the prediction.
pub fn svg_forecast_overlay(
    path: &Path,
    input: &[f64],
    truth: &[f64],
    prediction: &[f64],
) -> Result<()> {
    let t = input.len();
    let series = vec![
        SvgSeries {
            label: "input".into(),
            points: input.iter().enumerate().map(|(i, v)| (i as f64, *v)).collect(),
        },
        SvgSeries {
            label: "truth".into(),
            points: truth
                .iter()
                .enumerate()
                .map(|(i, v)| ((t + i) as f64, *v))
                .collect(),
        },
        SvgSeries {
            label: "prediction".into(),
            points: prediction
                .iter()
                .enumerate()
                .map(|(i, v)| ((t + i) as f64, *v))
                .collect(),
        },
    ];
    svg_line_chart(path, "forecast", &series)
}
