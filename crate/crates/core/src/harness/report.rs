use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::pipeline::{Row, RunManifest};
use crate::error::{Error, Result};
use crate::numeric::{mean, sample_std};
use crate::pretrain::write_file;
use crate::transfer::ProtocolKind;

/// Product-moment correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::invalid("pearson needs two equal-length samples of size ≥ 2"));
    }
    let (mx, my) = (mean(xs), mean(ys));
    let dx: Vec<f64> = xs.iter().map(|x| x - mx).collect();
    let dy: Vec<f64> = ys.iter().map(|y| y - my).collect();
    let sxx: f64 = dx.iter().map(|a| a * a).sum();
    let syy: f64 = dy.iter().map(|b| b * b).sum();
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    let sxy: f64 = dx.iter().zip(&dy).map(|(a, b)| a * b).sum();
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub metric_name: String,
    pub protocol: ProtocolKind,
    /// `(metric value, accuracy)` for the final checkpoint of each trajectory.
    pub pairs: Vec<(f64, f64)>,
    /// Absent with fewer than three pairs or zero variance.
    pub pearson_r: Option<f64>,
    pub note: Option<String>,
}

pub fn correlate(rows: &[Row], metric: &str, protocol: ProtocolKind) -> CorrelationReport {
    let pairs: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.is_final)
        .filter_map(|r| Some((*r.metrics.get(metric)?, r.accuracy(protocol)?)))
        .collect();
    let (pearson_r, note) = if pairs.len() < 3 {
        (None, Some(format!("only {} pairs", pairs.len())))
    } else {
        let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        match pearson(&xs, &ys) {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        }
    };
    CorrelationReport {
        metric_name: metric.to_string(),
        protocol,
        pairs,
        pearson_r,
        note,
    }
}

/// One report per (metric, protocol) that has any accuracy rows.
pub fn correlation_reports(manifest: &RunManifest, metrics: &[String]) -> Vec<CorrelationReport> {
    let mut out = Vec::new();
    for protocol in [ProtocolKind::Full, ProtocolKind::Fewshot] {
        if !manifest.rows.iter().any(|r| r.accuracy(protocol).is_some()) {
            continue;
        }
        for m in metrics {
            out.push(correlate(&manifest.rows, m, protocol));
        }
    }
    out
}

pub const CORRELATIONS_HEADER: &str = "metric,protocol,n_pairs,pearson_r";

pub fn write_correlations(out: &Path, reports: &[CorrelationReport]) -> Result<()> {
    write_file(&out.join("correlations.json"), serde_json::to_string_pretty(reports)?.as_bytes())?;
    let mut s = format!("{CORRELATIONS_HEADER}\n");
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            r.metric_name,
            r.protocol.name(),
            r.pairs.len(),
            r.pearson_r.map(|v| v.to_string()).unwrap_or_default()
        );
    }
    write_file(&out.join("correlations.csv"), s.as_bytes())
}

pub const TRAIN_LOSS_HEADER: &str = "axis_value,step,train_loss_mean,train_loss_std,n_seeds";
pub const WBIC_HEADER: &str = "axis_value,step,wbic_mean,wbic_std,n_seeds";
pub const ACCURACY_HEADER: &str = "axis_value,protocol,accuracy_mean,accuracy_std,n_seeds";
pub const SCATTER_HEADER: &str = "axis_value,protocol,wbic_mean,wbic_std,accuracy_mean,accuracy_std,n_seeds";

/// Mean and ±1 sample standard deviation across seeds; no band for one seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Band {
    pub mean: f64,
    pub std: Option<f64>,
    pub n: usize,
}

impl Band {
    pub fn of(xs: &[f64]) -> Self {
        Self {
            mean: mean(xs),
            std: (xs.len() >= 2).then(|| sample_std(xs)),
            n: xs.len(),
        }
    }
}

/// Group key that sorts axis values numerically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Key(u64);

impl Key {
    fn new(v: f64) -> Self {
        let bits = v.to_bits();
        Key(if v.is_sign_negative() { !bits } else { bits | (1 << 63) })
    }
}

fn group<F: Fn(&Row) -> Option<f64>>(rows: &[Row], by_step: bool, value: F) -> Vec<(f64, usize, Band)> {
    let mut groups: BTreeMap<(Key, usize), (f64, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        if !by_step && !r.is_final {
            continue;
        }
        if let Some(v) = value(r) {
            let step = if by_step { r.step } else { 0 };
            groups.entry((Key::new(r.axis_value), step)).or_insert((r.axis_value, Vec::new())).1.push(v);
        }
    }
    groups.into_iter().map(|((_, step), (axis, vs))| (axis, step, Band::of(&vs))).collect()
}

fn fmt_std(b: &Band) -> String {
    b.std.map(|s| s.to_string()).unwrap_or_default()
}

struct Series {
    label: String,
    /// `(x, y, y_std)`.
    points: Vec<(f64, f64, Option<f64>)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Minimal SVG scatter with error bars and axis labels.
pub fn scatter_svg(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64, Option<f64>)>)]) -> String {
    let series: Vec<Series> = series.iter().map(|(l, p)| Series { label: l.clone(), points: p.clone() }).collect();
    let (w, h, left, right, top, bottom) = (640.0, 420.0, 70.0, 150.0, 40.0, 50.0);
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y, e) in pts {
        let e = e.unwrap_or(0.0);
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y - e);
        y1 = y1.max(y + e);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let pad = |a: f64, b: f64| if b > a { (a - 0.05 * (b - a), b + 0.05 * (b - a)) } else { (a - 0.5, b + 0.5) };
    let ((x0, x1), (y0, y1)) = (pad(x0, x1), pad(y0, y1));
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, (left + w - right) / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        w - left - right,
        h - top - bottom
    );
    for k in 0..=4 {
        let fx = x0 + (x1 - x0) * k as f64 / 4.0;
        let fy = y0 + (y1 - y0) * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, px(fx), h - bottom + 16.0, tick(fx));
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, left - 6.0, py(fy) + 4.0, tick(fy));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (left + w - right) / 2.0, h - 10.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        (top + h - bottom) / 2.0,
        (top + h - bottom) / 2.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for &(x, y, e) in &ser.points {
            if let Some(e) = e {
                let _ = writeln!(
                    s,
                    r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{color}"/>"#,
                    px(x),
                    py(y - e),
                    px(x),
                    py(y + e)
                );
            }
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="4" fill="{color}"/>"#, px(x), py(y));
        }
        let ly = top + 16.0 * (i as f64 + 1.0);
        let _ = writeln!(s, r#"<circle cx="{}" cy="{ly}" r="4" fill="{color}"/>"#, w - right + 14.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, w - right + 24.0, ly + 4.0, escape(&ser.label));
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn by_axis_series(groups: &[(f64, usize, Band)]) -> Vec<(String, Vec<(f64, f64, Option<f64>)>)> {
    let mut out: Vec<(String, Vec<(f64, f64, Option<f64>)>)> = Vec::new();
    for (axis, step, band) in groups {
        let label = format!("{axis}");
        match out.iter_mut().find(|(l, _)| *l == label) {
            Some((_, pts)) => pts.push((*step as f64, band.mean, band.std)),
            None => out.push((label, vec![(*step as f64, band.mean, band.std)])),
        }
    }
    out
}

/// Per-figure CSV and SVG files under `out/plots`.
pub fn emit_plot_data(manifest: &RunManifest, out: &Path) -> Result<Vec<std::path::PathBuf>> {
    if manifest.rows.is_empty() {
        return Err(Error::invalid("manifest has no completed cells"));
    }
    let dir = out.join("plots");
    let axis = manifest.axis.to_string();
    let mut written = Vec::new();
    let mut emit = |name: &str, body: String| -> Result<()> {
        let p = dir.join(name);
        write_file(&p, body.as_bytes())?;
        written.push(p);
        Ok(())
    };

    let loss = group(&manifest.rows, true, |r| Some(r.train_loss));
    let mut csv = format!("{TRAIN_LOSS_HEADER}\n");
    for (a, step, b) in &loss {
        let _ = writeln!(csv, "{a},{step},{},{},{}", b.mean, fmt_std(b), b.n);
    }
    emit("train_loss_vs_step.csv", csv)?;
    emit(
        "train_loss_vs_step.svg",
        scatter_svg("Train loss vs step", "step", "train loss", &by_axis_series(&loss)),
    )?;

    let wbic = group(&manifest.rows, true, |r| r.wbic);
    let mut csv = format!("{WBIC_HEADER}\n");
    for (a, step, b) in &wbic {
        let _ = writeln!(csv, "{a},{step},{},{},{}", b.mean, fmt_std(b), b.n);
    }
    emit("wbic_vs_step.csv", csv)?;
    emit("wbic_vs_step.svg", scatter_svg("WBIC vs step", "step", "WBIC", &by_axis_series(&wbic)))?;

    let mut acc_csv = format!("{ACCURACY_HEADER}\n");
    let mut scatter_csv = format!("{SCATTER_HEADER}\n");
    let mut acc_series = Vec::new();
    let mut scatter_series = Vec::new();
    for protocol in [ProtocolKind::Full, ProtocolKind::Fewshot] {
        let acc = group(&manifest.rows, false, |r| r.accuracy(protocol));
        if acc.is_empty() {
            continue;
        }
        let wb = group(&manifest.rows, false, |r| r.accuracy(protocol).and(r.wbic));
        let mut pts = Vec::new();
        for (a, _, b) in &acc {
            let _ = writeln!(acc_csv, "{a},{},{},{},{}", protocol.name(), b.mean, fmt_std(b), b.n);
            pts.push((*a, b.mean, b.std));
        }
        acc_series.push((protocol.name().to_string(), pts));
        let mut sp = Vec::new();
        for ((a, _, ba), (_, _, bw)) in acc.iter().zip(&wb) {
            let _ = writeln!(
                scatter_csv,
                "{a},{},{},{},{},{},{}",
                protocol.name(),
                bw.mean,
                fmt_std(bw),
                ba.mean,
                fmt_std(ba),
                ba.n
            );
            sp.push((bw.mean, ba.mean, ba.std));
        }
        if !sp.is_empty() {
            scatter_series.push((protocol.name().to_string(), sp));
        }
    }
    emit("accuracy_vs_axis.csv", acc_csv)?;
    emit(
        "accuracy_vs_axis.svg",
        scatter_svg("Transfer accuracy", &axis, "accuracy", &acc_series),
    )?;
    emit("wbic_vs_accuracy.csv", scatter_csv)?;
    emit(
        "wbic_vs_accuracy.svg",
        scatter_svg("Pretraining WBIC vs transfer accuracy", "WBIC", "accuracy", &scatter_series),
    )?;
    Ok(written)
}
